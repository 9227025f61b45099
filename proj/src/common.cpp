#include "traff/common.hpp"

#include <algorithm>
#include <bit>
#include <charconv>
#include <cstdio>

namespace traff {

// Howard Hinnant's civil-date algorithms.
int64_t days_from_civil(int y, int m, int d) {
    y -= m <= 2;
    const int64_t era = (y >= 0 ? y : y - 399) / 400;
    const unsigned yoe = static_cast<unsigned>(y - era * 400);              // [0, 399]
    const unsigned doy = (153u * static_cast<unsigned>(m + (m > 2 ? -3 : 9)) + 2) / 5 +
                         static_cast<unsigned>(d) - 1;                      // [0, 365]
    const unsigned doe = yoe * 365 + yoe / 4 - yoe / 100 + doy;             // [0, 146096]
    return era * 146097 + static_cast<int64_t>(doe) - 719468;
}

void civil_from_days(int64_t z, int& year, int& month, int& day) {
    z += 719468;
    const int64_t era = (z >= 0 ? z : z - 146096) / 146097;
    const unsigned doe = static_cast<unsigned>(z - era * 146097);           // [0, 146096]
    const unsigned yoe = (doe - doe / 1460 + doe / 36524 - doe / 146096) / 365;
    const int64_t y = static_cast<int64_t>(yoe) + era * 400;
    const unsigned doy = doe - (365 * yoe + yoe / 4 - yoe / 100);           // [0, 365]
    const unsigned mp = (5 * doy + 2) / 153;                                // [0, 11]
    const unsigned d = doy - (153 * mp + 2) / 5 + 1;                        // [1, 31]
    const unsigned m = mp + (mp < 10 ? 3 : -9);                             // [1, 12]
    year = static_cast<int>(y + (m <= 2));
    month = static_cast<int>(m);
    day = static_cast<int>(d);
}

int weekday_mon0(int64_t days_since_epoch) {
    // 1970-01-01 was a Thursday (ISO index 3).
    return static_cast<int>(((days_since_epoch % 7) + 7 + 3) % 7);
}

int64_t to_epoch_minutes(const DateTime& dt) {
    return days_from_civil(dt.year, dt.month, dt.day) * 1440 + dt.hour * 60 + dt.minute;
}

DateTime from_epoch_minutes(int64_t minutes) {
    int64_t days = minutes / 1440;
    int64_t rem = minutes % 1440;
    if (rem < 0) {
        rem += 1440;
        days -= 1;
    }
    DateTime dt;
    civil_from_days(days, dt.year, dt.month, dt.day);
    dt.hour = static_cast<int>(rem / 60);
    dt.minute = static_cast<int>(rem % 60);
    dt.second = 0;
    return dt;
}

std::string format_datetime(const DateTime& dt) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%04d-%02d-%02d %02d:%02d:%02d", dt.year, dt.month,
                  dt.day, dt.hour, dt.minute, dt.second);
    return buf;
}

namespace {

bool parse_int_field(std::string_view s, size_t pos, size_t len, int& out) {
    if (pos + len > s.size()) return false;
    const auto first = s.data() + pos;
    const auto res = std::from_chars(first, first + len, out);
    return res.ec == std::errc{} && res.ptr == first + len;
}

}  // namespace

DateTime parse_datetime(std::string_view text) {
    // YYYY-MM-DD[ T]HH:MM[:SS]
    DateTime dt;
    const bool ok_date = text.size() >= 16 && text[4] == '-' && text[7] == '-' &&
                         (text[10] == ' ' || text[10] == 'T') && text[13] == ':' &&
                         parse_int_field(text, 0, 4, dt.year) &&
                         parse_int_field(text, 5, 2, dt.month) &&
                         parse_int_field(text, 8, 2, dt.day) &&
                         parse_int_field(text, 11, 2, dt.hour) &&
                         parse_int_field(text, 14, 2, dt.minute);
    bool ok = ok_date;
    if (ok && text.size() > 16) {
        ok = text.size() == 19 && text[16] == ':' && parse_int_field(text, 17, 2, dt.second);
    } else if (ok) {
        ok = text.size() == 16;
        dt.second = 0;
    }
    if (!ok || dt.month < 1 || dt.month > 12 || dt.day < 1 || dt.day > 31 || dt.hour > 23 ||
        dt.minute > 59 || dt.second > 59) {
        throw ParseError("invalid timestamp '" + std::string(text) + "'");
    }
    return dt;
}

DateTime parse_date(std::string_view text) {
    DateTime dt;
    const bool ok = text.size() == 10 && text[4] == '-' && text[7] == '-' &&
                    parse_int_field(text, 0, 4, dt.year) &&
                    parse_int_field(text, 5, 2, dt.month) &&
                    parse_int_field(text, 8, 2, dt.day);
    if (!ok || dt.month < 1 || dt.month > 12 || dt.day < 1 || dt.day > 31) {
        throw ParseError("invalid date '" + std::string(text) + "' (expected YYYY-MM-DD)");
    }
    return dt;
}

uint64_t splitmix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

bool total_order_less(double a, double b) {
    auto key = [](double v) {
        const uint64_t bits = std::bit_cast<uint64_t>(v);
        return (bits & 0x8000000000000000ULL) ? ~bits : bits | 0x8000000000000000ULL;
    };
    return key(a) < key(b);
}

double canonical_sum(std::span<double> terms) {
    std::sort(terms.begin(), terms.end(), total_order_less);
    double s = 0.0;
    for (const double t : terms) s += t;
    return s;
}

}  // namespace traff
