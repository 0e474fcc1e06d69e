#pragma once

#include <compare>
#include <cstdint>
#include <string>
#include <string_view>

namespace trialscope {

// Calendar date, day-granular, stored as days since 1970-01-01 (civil).
struct Date {
  int32_t days = 0;

  auto operator<=>(const Date&) const = default;
  Date operator+(int32_t d) const { return Date{days + d}; }
  Date operator-(int32_t d) const { return Date{days - d}; }
  int32_t operator-(const Date& o) const { return days - o.days; }
};

// Parses strict ISO-8601 "YYYY-MM-DD"; throws ValidationError on malformed or
// impossible dates (e.g. 2021-02-30).
Date parse_date(std::string_view iso);

std::string format_date(Date d);

int32_t days_from_civil(int year, int month, int day);
void civil_from_days(int32_t z, int& year, int& month, int& day);

}  // namespace trialscope
