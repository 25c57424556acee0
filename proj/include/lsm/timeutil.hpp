#pragma once

#include <cstdint>
#include <cstdio>
#include <string>

#include "lsm/common.hpp"

namespace lsm {

// Calendar instant at 1 s resolution, UTC.
struct CivilTime {
  int year = 1970;
  int month = 1;  // 1..12
  int day = 1;    // 1..31
  int hour = 0;
  int minute = 0;
  int second = 0;

  bool operator==(const CivilTime&) const = default;
};

// Days since 1970-01-01 for a civil date (Howard Hinnant's algorithm).
inline std::int64_t days_from_civil(int y, int m, int d) {
  y -= m <= 2;
  const std::int64_t era = (y >= 0 ? y : y - 399) / 400;
  const unsigned yoe = static_cast<unsigned>(y - era * 400);             // [0, 399]
  const unsigned doy = (153u * (m + (m > 2 ? -3 : 9)) + 2) / 5 + d - 1;  // [0, 365]
  const unsigned doe = yoe * 365 + yoe / 4 - yoe / 100 + doy;            // [0, 146096]
  return era * 146097 + static_cast<std::int64_t>(doe) - 719468;
}

inline void civil_from_days(std::int64_t z, int& y, int& m, int& d) {
  z += 719468;
  const std::int64_t era = (z >= 0 ? z : z - 146096) / 146097;
  const unsigned doe = static_cast<unsigned>(z - era * 146097);
  const unsigned yoe = (doe - doe / 1460 + doe / 36524 - doe / 146096) / 365;
  const std::int64_t yy = static_cast<std::int64_t>(yoe) + era * 400;
  const unsigned doy = doe - (365 * yoe + yoe / 4 - yoe / 100);
  const unsigned mp = (5 * doy + 2) / 153;
  d = static_cast<int>(doy - (153 * mp + 2) / 5 + 1);
  m = static_cast<int>(mp + (mp < 10 ? 3 : -9));
  y = static_cast<int>(yy + (m <= 2));
}

inline std::int64_t epoch_from_civil(const CivilTime& c) {
  return days_from_civil(c.year, c.month, c.day) * 86400 + c.hour * 3600 +
         c.minute * 60 + c.second;
}

inline CivilTime civil_from_epoch(std::int64_t t) {
  std::int64_t days = t / 86400;
  std::int64_t rem = t - days * 86400;
  if (rem < 0) {
    rem += 86400;
    --days;
  }
  CivilTime c;
  civil_from_days(days, c.year, c.month, c.day);
  c.hour = static_cast<int>(rem / 3600);
  c.minute = static_cast<int>((rem / 60) % 60);
  c.second = static_cast<int>(rem % 60);
  return c;
}

// Day of week with Saturday = 1 ... Friday = 7 (the token convention).
inline int day_of_week_sat1(std::int64_t epoch_s) {
  std::int64_t days = epoch_s / 86400;
  if (epoch_s % 86400 < 0) --days;
  // 1970-01-01 was a Thursday.
  int w = static_cast<int>(((days % 7) + 7) % 7);  // 0 = Thu
  static constexpr int kMap[7] = {6, 7, 1, 2, 3, 4, 5};
  return kMap[w];
}

// "YYYY-MM-DDTHH:MM:SSZ"
inline std::string format_iso8601(std::int64_t epoch_s) {
  const CivilTime c = civil_from_epoch(epoch_s);
  char buf[32];
  std::snprintf(buf, sizeof buf, "%04d-%02d-%02dT%02d:%02d:%02dZ", c.year,
                c.month, c.day, c.hour, c.minute, c.second);
  return buf;
}

inline std::int64_t parse_iso8601(const std::string& s) {
  CivilTime c;
  char tz = 'Z';
  int n = std::sscanf(s.c_str(), "%d-%d-%dT%d:%d:%d%c", &c.year, &c.month,
                      &c.day, &c.hour, &c.minute, &c.second, &tz);
  if (n < 6 || (n == 7 && tz != 'Z'))
    throw format_error("bad ISO-8601 timestamp: " + s);
  if (c.month < 1 || c.month > 12 || c.day < 1 || c.day > 31 || c.hour > 23 ||
      c.minute > 59 || c.second > 59 || c.hour < 0 || c.minute < 0 ||
      c.second < 0)
    throw format_error("ISO-8601 field out of range: " + s);
  return epoch_from_civil(c);
}

}  // namespace lsm
