#pragma once

// Speed-series ingestion, synthesis, normalization, splitting, and the
// three-window sliding dataset (past hour / past day / next day).

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "traff/common.hpp"

namespace traff {

inline constexpr int64_t kSlotsPerDay = 288;   // 5-minute periods in a day
inline constexpr int64_t kShortSteps = 12;     // past hour at 5-minute steps
inline constexpr int64_t kMediumSteps = 12;    // past day at 2-hour stride
inline constexpr int64_t kHorizonSteps = 12;   // next day at 2-hour stride
inline constexpr int64_t kMediumStride = 24;   // 2 hours in 5-minute steps
inline constexpr int64_t kLookbackSteps = 264; // earliest input offset
inline constexpr int64_t kLookaheadSteps = 288;// latest target offset
// Smallest standalone segment producing one window: 264 + 1 + 288.
inline constexpr int64_t kMinSegmentSteps = 553;

struct TrafficSeries {
    std::vector<std::string> sensor_ids;
    DateTime start_time;
    int step_minutes = 5;
    int64_t steps = 0;
    std::vector<double> values;  // [steps x sensors], mph
    std::vector<uint8_t> mask;   // 1 = observed

    int64_t sensors() const { return static_cast<int64_t>(sensor_ids.size()); }
    double value_at(int64_t step, int64_t sensor) const {
        return values[static_cast<size_t>(step * sensors() + sensor)];
    }
    bool observed(int64_t step, int64_t sensor) const {
        return mask[static_cast<size_t>(step * sensors() + sensor)] != 0;
    }

    DateTime timestamp(int64_t step) const {
        return from_epoch_minutes(to_epoch_minutes(start_time) +
                                  step * static_cast<int64_t>(step_minutes));
    }
    // 5-minute period within the day, [0, 288). Equals step mod 288 for a
    // midnight-aligned 5-minute series.
    int64_t time_slot(int64_t step) const {
        const int64_t minutes = to_epoch_minutes(start_time) + step * step_minutes;
        return ((minutes % 1440) + 1440) % 1440 / 5;
    }
    // ISO weekday, Monday = 0.
    int day_index(int64_t step) const {
        const int64_t minutes = to_epoch_minutes(start_time) + step * step_minutes;
        int64_t days = minutes / 1440;
        if (minutes % 1440 < 0) days -= 1;
        return weekday_mon0(days);
    }

    void validate() const;  // invariant checks, throws DataError
};

// Header "timestamp,<id>,...". Empty cell or literal zero speed = missing
// (the METR-LA convention). Cadence is inferred from the first two rows and
// must divide a day; gaps or disorder are parse errors naming the line.
TrafficSeries load_speed_csv(const std::string& path);

// Missing entries are written as empty cells; values round-trip exactly.
void write_speed_csv(const TrafficSeries& series, const std::string& path);

struct SyntheticSpec {
    int64_t n_sensors = 4;
    int64_t n_days = 30;
    uint64_t seed = 42;
    double noise_std = 0.0;  // mph
    DateTime start{2012, 3, 1, 0, 0, 0};
};

// Weekday speeds dip for the morning and evening rush; weekends get one
// shallow midday dip. Deterministic per seed; clipped to [0, 80] mph.
TrafficSeries generate_synthetic(const SyntheticSpec& spec);

struct Normalizer {
    double mean = 0.0;
    double std = 1.0;  // > 0

    double normalize(double v) const { return (v - mean) / std; }
    double denormalize(double v) const { return v * std + mean; }
};

struct Segment {
    int64_t begin = 0;
    int64_t end = 0;  // half-open
    int64_t length() const { return end - begin; }
};

struct SplitSpec {
    double train_fraction = 0.7;
    double val_fraction = 0.1;
    double test_fraction = 0.2;
};

struct Splits {
    Segment train, val, test;
};

// Contiguous, unshuffled, time-ordered; boundaries at floor(fraction * steps).
Splits split_series(int64_t steps, const SplitSpec& spec = {});

// Population mean/std over observed entries of the given segment only.
Normalizer fit_normalizer(const TrafficSeries& series, Segment segment);

// Last-observation-carried-forward per sensor; leading gaps take the first
// observed value. The mask is preserved so targets stay excluded downstream.
TrafficSeries impute_locf(const TrafficSeries& series);

struct WindowSample {
    int64_t anchor = 0;
    int64_t sensors = 0;
    std::vector<double> x_short;   // [12 x S], normalized
    std::vector<double> x_medium;  // [12 x S], normalized
    std::vector<double> y_mph;     // [12 x S], original units
    std::vector<uint8_t> y_mask;   // [12 x S]
    std::array<int64_t, 12> t_idx_short{}, t_idx_medium{}, t_idx_target{};
    std::array<int64_t, 12> d_idx_short{}, d_idx_medium{}, d_idx_target{};
};

// Anchors advance one step at a time over the segment; input and target
// windows may extend past the segment into the rest of the series, but never
// past the series itself. A too-short reach yields an empty list plus a
// stderr warning, not an error. Requires a 5-minute series.
std::vector<WindowSample> build_windows(const TrafficSeries& series,
                                        const Normalizer& normalizer, Segment segment);

struct Batch {
    int64_t size = 0;     // samples in this batch
    int64_t sensors = 0;
    std::vector<double> x_short, x_medium;  // [B x 12 x S]
    std::vector<double> y_mph;              // [B x 12 x S]
    std::vector<double> y_mask;             // [B x 12 x S], 0/1
    std::vector<int64_t> t_idx_short, t_idx_medium, t_idx_target;  // [B x 12]
    std::vector<int64_t> d_idx_short, d_idx_medium, d_idx_target;  // [B x 12]
    std::vector<int64_t> anchors;           // [B]
};

Batch stack_samples(std::span<const WindowSample* const> samples);

// Deterministic per-seed permutation; the final partial batch is kept.
std::vector<Batch> make_batches(std::span<const WindowSample> samples, int64_t batch_size,
                                uint64_t shuffle_seed);

// Same batching without shuffling (evaluation order).
std::vector<Batch> make_batches_ordered(std::span<const WindowSample> samples,
                                        int64_t batch_size);

}  // namespace traff
