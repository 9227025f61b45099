#pragma once

// Shared plumbing: error taxonomy, civil-calendar arithmetic, and a pinned
// RNG so results do not depend on standard-library distribution internals.

#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace traff {

// ---------------------------------------------------------------------------
// Errors. The CLI maps families to exit codes: usage -> 1, data -> 2,
// numeric -> 3.
// ---------------------------------------------------------------------------

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct ShapeError : Error { using Error::Error; };     // dimension mismatch
struct IndexError : Error { using Error::Error; };     // out-of-range lookup
struct ParseError : Error { using Error::Error; };     // malformed input file
struct DataError : Error { using Error::Error; };      // valid format, unusable content
struct ContractError : Error { using Error::Error; };  // API precondition broken
struct UsageError : Error { using Error::Error; };     // bad CLI/config values
struct NumericError : Error { using Error::Error; };   // non-finite values reached an op

struct TrainingError : Error {
    int64_t iteration;
    TrainingError(const std::string& msg, int64_t it)
        : Error(msg + " (iteration " + std::to_string(it) + ")"), iteration(it) {}
};

// ---------------------------------------------------------------------------
// Civil calendar. Proleptic Gregorian, no time zones; the series timestamps
// are treated as local wall-clock values.
// ---------------------------------------------------------------------------

struct DateTime {
    int year = 1970;
    int month = 1;  // 1..12
    int day = 1;    // 1..31
    int hour = 0;
    int minute = 0;
    int second = 0;

    bool operator==(const DateTime&) const = default;
};

// Days since 1970-01-01.
int64_t days_from_civil(int year, int month, int day);
void civil_from_days(int64_t days, int& year, int& month, int& day);

// ISO weekday of a day count, Monday = 0 .. Sunday = 6.
int weekday_mon0(int64_t days_since_epoch);

int64_t to_epoch_minutes(const DateTime& dt);
DateTime from_epoch_minutes(int64_t minutes);

// "YYYY-MM-DD HH:MM:SS"
std::string format_datetime(const DateTime& dt);

// Accepts "YYYY-MM-DD HH:MM[:SS]" with ' ' or 'T' separators.
// Throws ParseError on malformed input.
DateTime parse_datetime(std::string_view text);

// "YYYY-MM-DD" only; time fields zeroed.
DateTime parse_date(std::string_view text);

// ---------------------------------------------------------------------------
// Deterministic RNG. mt19937_64 is portable; the float/int draws on top of
// it are pinned here instead of relying on std distributions, whose output
// differs between standard libraries.
// ---------------------------------------------------------------------------

uint64_t splitmix64(uint64_t x);

class Rng {
  public:
    explicit Rng(uint64_t seed) : gen_(seed) {}

    uint64_t next_u64() { return gen_(); }

    // [0,1) with 53 random bits.
    double uniform01() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

    // Box-Muller with a cached spare.
    double gauss() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = uniform01();
        double u2 = uniform01();
        while (u1 <= 0.0) u1 = uniform01();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double a = 2.0 * M_PI * u2;
        spare_ = r * std::sin(a);
        has_spare_ = true;
        return r * std::cos(a);
    }

    // [0,n) without modulo bias.
    int64_t uniform_int(int64_t n) {
        if (n <= 0) throw ContractError("uniform_int: n must be positive");
        const uint64_t un = static_cast<uint64_t>(n);
        const uint64_t limit = UINT64_MAX - UINT64_MAX % un;
        uint64_t x = gen_();
        while (x >= limit) x = gen_();
        return static_cast<int64_t>(x % un);
    }

  private:
    std::mt19937_64 gen_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

// Fisher-Yates with the pinned Rng (std::shuffle is implementation-defined).
template <class T>
void deterministic_shuffle(std::vector<T>& v, Rng& rng) {
    for (int64_t i = static_cast<int64_t>(v.size()) - 1; i > 0; --i) {
        const int64_t j = rng.uniform_int(i + 1);
        std::swap(v[static_cast<size_t>(i)], v[static_cast<size_t>(j)]);
    }
}

// ---------------------------------------------------------------------------
// Order-canonical accumulation: sorts the terms by IEEE total order before
// summing, so the result depends only on the multiset of terms, not their
// arrangement. Sorts `terms` in place.
// ---------------------------------------------------------------------------

bool total_order_less(double a, double b);
double canonical_sum(std::span<double> terms);

}  // namespace traff
