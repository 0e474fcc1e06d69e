#include "trialscope/dates.hpp"

#include <array>
#include <charconv>
#include <cstdio>

#include "trialscope/common.hpp"

namespace trialscope {

// Howard Hinnant's civil-days algorithms.
int32_t days_from_civil(int y, int m, int d) {
  y -= m <= 2;
  const int era = (y >= 0 ? y : y - 399) / 400;
  const unsigned yoe = static_cast<unsigned>(y - era * 400);
  const unsigned doy = (153u * static_cast<unsigned>(m + (m > 2 ? -3 : 9)) + 2) / 5 +
                       static_cast<unsigned>(d) - 1;
  const unsigned doe = yoe * 365 + yoe / 4 - yoe / 100 + doy;
  return era * 146097 + static_cast<int32_t>(doe) - 719468;
}

void civil_from_days(int32_t z, int& year, int& month, int& day) {
  z += 719468;
  const int era = (z >= 0 ? z : z - 146096) / 146097;
  const unsigned doe = static_cast<unsigned>(z - era * 146097);
  const unsigned yoe = (doe - doe / 1460 + doe / 36524 - doe / 146096) / 365;
  const int y = static_cast<int>(yoe) + era * 400;
  const unsigned doy = doe - (365 * yoe + yoe / 4 - yoe / 100);
  const unsigned mp = (5 * doy + 2) / 153;
  day = static_cast<int>(doy - (153 * mp + 2) / 5 + 1);
  month = static_cast<int>(mp + (mp < 10 ? 3 : -9));
  year = y + (month <= 2);
}

Date parse_date(std::string_view iso) {
  auto bad = [&](const char* why) -> Date {
    throw ValidationError("invalid date '" + std::string(iso) + "': " + why);
  };
  if (iso.size() != 10 || iso[4] != '-' || iso[7] != '-') return bad("want YYYY-MM-DD");
  int y = 0, m = 0, d = 0;
  auto num = [&](size_t pos, size_t len, int& out) {
    auto res = std::from_chars(iso.data() + pos, iso.data() + pos + len, out);
    return res.ec == std::errc() && res.ptr == iso.data() + pos + len;
  };
  if (!num(0, 4, y) || !num(5, 2, m) || !num(8, 2, d)) return bad("non-numeric field");
  if (m < 1 || m > 12) return bad("month out of range");
  static constexpr std::array<int, 12> mdays{31, 28, 31, 30, 31, 30, 31, 31, 30, 31, 30, 31};
  const bool leap = (y % 4 == 0 && y % 100 != 0) || y % 400 == 0;
  const int dmax = (m == 2 && leap) ? 29 : mdays[static_cast<size_t>(m - 1)];
  if (d < 1 || d > dmax) return bad("day out of range");
  return Date{days_from_civil(y, m, d)};
}

std::string format_date(Date date) {
  int y, m, d;
  civil_from_days(date.days, y, m, d);
  char buf[16];
  std::snprintf(buf, sizeof(buf), "%04d-%02d-%02d", y, m, d);
  return buf;
}

}  // namespace trialscope
