#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>
#include <vector>

#include "trialscope/common.hpp"

namespace trialscope {

// Deterministic counter-style RNG stream built on splitmix64. Streams are
// derived from (seed, label, index) so replicates are order-independent and
// individually re-runnable. Output sequence is identical across platforms
// (no std::distribution involved).
class RngStream {
 public:
  static RngStream derive(uint64_t seed, std::string_view label, uint64_t index = 0);

  uint64_t next_u64();

  // Uniform on [0, 1) with 53 random bits.
  double uniform01() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  // Uniform on (0, 1] — safe as a log argument.
  double uniform01_open_low() { return 1.0 - uniform01(); }

  // Unbiased integer in [0, n) via rejection.
  uint64_t uniform_int(uint64_t n);

  bool bernoulli(double p) { return uniform01() < p; }

  // Box-Muller pair, second value cached.
  double normal();

  double exponential(double rate) { return -std::log(uniform01_open_low()) / rate; }

  // Weibull with given scale (lambda in rate form: hazard = shape*rate^shape*t^(shape-1)).
  double weibull(double rate, double shape) {
    return std::pow(-std::log(uniform01_open_low()), 1.0 / shape) / rate;
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      size_t j = static_cast<size_t>(uniform_int(i));
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  explicit RngStream(uint64_t state) : state_(state) {}
  uint64_t state_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

uint64_t splitmix64(uint64_t& state);
uint64_t fnv1a64(std::string_view bytes, uint64_t basis = 0xcbf29ce484222325ull);

}  // namespace trialscope
