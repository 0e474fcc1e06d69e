#include "trialscope/rng.hpp"

namespace trialscope {

uint64_t splitmix64(uint64_t& state) {
  uint64_t z = (state += 0x9e3779b97f4a7c15ull);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

uint64_t fnv1a64(std::string_view bytes, uint64_t basis) {
  uint64_t h = basis;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

RngStream RngStream::derive(uint64_t seed, std::string_view label, uint64_t index) {
  uint64_t mix = seed;
  (void)splitmix64(mix);
  mix ^= fnv1a64(label);
  (void)splitmix64(mix);
  mix ^= index * 0x9e3779b97f4a7c15ull;
  (void)splitmix64(mix);
  return RngStream(mix);
}

uint64_t RngStream::next_u64() { return splitmix64(state_); }

uint64_t RngStream::uniform_int(uint64_t n) {
  if (n == 0) throw NumericError("uniform_int: n must be positive");
  const uint64_t limit = UINT64_MAX - UINT64_MAX % n;
  uint64_t x;
  do {
    x = next_u64();
  } while (x >= limit);
  return x % n;
}

double RngStream::normal() {
  if (has_spare_) {
    has_spare_ = false;
    return spare_;
  }
  const double u1 = uniform01_open_low();
  const double u2 = uniform01();
  const double r = std::sqrt(-2.0 * std::log(u1));
  const double theta = 2.0 * 3.14159265358979323846 * u2;
  spare_ = r * std::sin(theta);
  has_spare_ = true;
  return r * std::cos(theta);
}

}  // namespace trialscope
