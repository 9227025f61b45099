#include "traff/data.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>

namespace traff {

void TrafficSeries::validate() const {
    const size_t expect = static_cast<size_t>(steps) * sensor_ids.size();
    if (values.size() != expect || mask.size() != expect) {
        throw DataError("series buffers do not match steps x sensors");
    }
    if (step_minutes <= 0 || 1440 % step_minutes != 0) {
        throw DataError("step_minutes must divide a day, got " + std::to_string(step_minutes));
    }
    for (size_t i = 0; i < values.size(); ++i) {
        if (mask[i] && (!std::isfinite(values[i]) || values[i] < 0.0)) {
            throw DataError("observed speed at flat index " + std::to_string(i) +
                            " is negative or non-finite");
        }
    }
}

// --- CSV ---

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> cells;
    size_t start = 0;
    while (true) {
        const size_t comma = line.find(',', start);
        if (comma == std::string::npos) {
            cells.push_back(line.substr(start));
            break;
        }
        cells.push_back(line.substr(start, comma - start));
        start = comma + 1;
    }
    return cells;
}

std::string trim(const std::string& s) {
    size_t a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return "";
    size_t b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
}

double parse_speed_cell(const std::string& cell, int64_t line_no) {
    double v = 0.0;
    const char* first = cell.data();
    const char* last = first + cell.size();
    const auto res = std::from_chars(first, last, v);
    if (res.ec != std::errc{} || res.ptr != last) {
        throw ParseError("line " + std::to_string(line_no) + ": non-numeric cell '" + cell +
                         "'");
    }
    if (!std::isfinite(v)) {
        throw ParseError("line " + std::to_string(line_no) + ": non-finite speed");
    }
    if (v < 0.0) {
        throw ParseError("line " + std::to_string(line_no) + ": negative speed " + cell);
    }
    return v;
}

std::string format_double(double v) {
    char buf[32];
    const auto res = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, res.ptr);
}

}  // namespace

TrafficSeries load_speed_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open '" + path + "'");

    TrafficSeries series;
    std::string line;
    int64_t line_no = 0;

    if (!std::getline(in, line)) throw ParseError("line 1: missing header");
    ++line_no;
    auto header = split_csv_line(line);
    if (header.empty() || trim(header[0]) != "timestamp") {
        throw ParseError("line 1: header must start with 'timestamp'");
    }
    for (size_t i = 1; i < header.size(); ++i) {
        const std::string id = trim(header[i]);
        if (id.empty()) throw ParseError("line 1: empty sensor id in header");
        series.sensor_ids.push_back(id);
    }
    if (series.sensor_ids.empty()) throw ParseError("line 1: no sensor columns");

    const size_t cols = header.size();
    int64_t prev_minutes = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (trim(line).empty()) continue;
        auto cells = split_csv_line(line);
        if (cells.size() != cols) {
            throw ParseError("line " + std::to_string(line_no) + ": expected " +
                             std::to_string(cols) + " cells, got " +
                             std::to_string(cells.size()));
        }
        DateTime ts;
        try {
            ts = parse_datetime(trim(cells[0]));
        } catch (const ParseError& e) {
            throw ParseError("line " + std::to_string(line_no) + ": " + e.what());
        }
        const int64_t minutes = to_epoch_minutes(ts);
        if (series.steps == 0) {
            series.start_time = ts;
        } else if (series.steps == 1) {
            const int64_t diff = minutes - prev_minutes;
            if (diff <= 0 || 1440 % diff != 0) {
                throw ParseError("line " + std::to_string(line_no) + ": cadence of " +
                                 std::to_string(diff) + " minutes does not divide a day");
            }
            series.step_minutes = static_cast<int>(diff);
        } else if (minutes - prev_minutes != series.step_minutes) {
            throw ParseError("line " + std::to_string(line_no) +
                             ": timestamp breaks the " +
                             std::to_string(series.step_minutes) + "-minute cadence");
        }
        prev_minutes = minutes;

        for (size_t c = 1; c < cols; ++c) {
            const std::string cell = trim(cells[c]);
            if (cell.empty()) {
                series.values.push_back(0.0);
                series.mask.push_back(0);
                continue;
            }
            const double v = parse_speed_cell(cell, line_no);
            series.values.push_back(v);
            series.mask.push_back(v == 0.0 ? 0 : 1);  // zero speed = missing
        }
        ++series.steps;
    }
    if (series.steps == 0) throw ParseError("no data rows in '" + path + "'");
    series.validate();
    return series;
}

void write_speed_csv(const TrafficSeries& series, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot write '" + path + "'");
    out << "timestamp";
    for (const auto& id : series.sensor_ids) out << ',' << id;
    out << '\n';
    const int64_t s = series.sensors();
    for (int64_t t = 0; t < series.steps; ++t) {
        out << format_datetime(series.timestamp(t));
        for (int64_t j = 0; j < s; ++j) {
            out << ',';
            if (series.observed(t, j)) out << format_double(series.value_at(t, j));
        }
        out << '\n';
    }
    if (!out) throw DataError("failed writing '" + path + "'");
}

// --- synthetic generator ---

TrafficSeries generate_synthetic(const SyntheticSpec& spec) {
    if (spec.n_sensors < 1) throw ContractError("generate_synthetic: n_sensors must be >= 1");
    if (spec.n_days < 2) throw ContractError("generate_synthetic: n_days must be >= 2");
    if (spec.noise_std < 0.0) throw ContractError("generate_synthetic: noise_std must be >= 0");

    TrafficSeries series;
    series.start_time = spec.start;
    series.start_time.hour = series.start_time.minute = series.start_time.second = 0;
    series.step_minutes = 5;
    series.steps = spec.n_days * kSlotsPerDay;
    for (int64_t s = 0; s < spec.n_sensors; ++s) {
        series.sensor_ids.push_back("s" + std::to_string(s));
    }

    Rng rng(spec.seed);
    struct SensorParams {
        double base, morning_depth, evening_depth, weekend_depth;
    };
    std::vector<SensorParams> params;
    params.reserve(static_cast<size_t>(spec.n_sensors));
    for (int64_t s = 0; s < spec.n_sensors; ++s) {
        SensorParams p;
        p.base = 62.0 + rng.uniform(-6.0, 6.0);
        p.morning_depth = 22.0 + rng.uniform(-4.0, 4.0);
        p.evening_depth = 26.0 + rng.uniform(-4.0, 4.0);
        p.weekend_depth = 8.0 + rng.uniform(-2.0, 2.0);
        params.push_back(p);
    }

    // half-sine dip centered at `center` hours, `width` hours wide
    auto dip = [](double hour, double center, double width, double depth) {
        const double x = (hour - center + width / 2.0) / width;
        if (x <= 0.0 || x >= 1.0) return 0.0;
        return depth * std::sin(M_PI * x);
    };

    series.values.reserve(static_cast<size_t>(series.steps * spec.n_sensors));
    series.mask.assign(static_cast<size_t>(series.steps * spec.n_sensors), 1);
    for (int64_t t = 0; t < series.steps; ++t) {
        const double hour = static_cast<double>(t % kSlotsPerDay) * 5.0 / 60.0;
        const bool weekend = series.day_index(t) >= 5;
        for (int64_t s = 0; s < spec.n_sensors; ++s) {
            const SensorParams& p = params[static_cast<size_t>(s)];
            double v = p.base;
            if (weekend) {
                v -= dip(hour, 13.0, 6.0, p.weekend_depth);
            } else {
                v -= dip(hour, 8.0, 3.0, p.morning_depth);
                v -= dip(hour, 17.5, 4.0, p.evening_depth);
            }
            if (spec.noise_std > 0.0) v += spec.noise_std * rng.gauss();
            series.values.push_back(std::clamp(v, 0.0, 80.0));
        }
    }
    series.validate();
    return series;
}

// --- splits / normalizer / imputation ---

Splits split_series(int64_t steps, const SplitSpec& spec) {
    const double total = spec.train_fraction + spec.val_fraction + spec.test_fraction;
    if (std::fabs(total - 1.0) > 1e-9) {
        throw ContractError("split fractions must sum to 1, got " + std::to_string(total));
    }
    if (steps <= 0) throw ContractError("split_series: empty series");
    const auto train_end = static_cast<int64_t>(std::floor(spec.train_fraction * steps));
    const auto val_end = static_cast<int64_t>(
        std::floor((spec.train_fraction + spec.val_fraction) * steps));
    Splits splits;
    splits.train = {0, train_end};
    splits.val = {train_end, val_end};
    splits.test = {val_end, steps};
    return splits;
}

Normalizer fit_normalizer(const TrafficSeries& series, Segment segment) {
    if (segment.begin < 0 || segment.end > series.steps || segment.begin >= segment.end) {
        throw ContractError("fit_normalizer: segment out of range");
    }
    const int64_t s = series.sensors();
    double sum = 0.0;
    int64_t count = 0;
    for (int64_t t = segment.begin; t < segment.end; ++t) {
        for (int64_t j = 0; j < s; ++j) {
            if (series.observed(t, j)) {
                sum += series.value_at(t, j);
                ++count;
            }
        }
    }
    if (count < 2) {
        throw DataError("normalizer needs at least 2 observed values in the fitting segment");
    }
    const double mean = sum / static_cast<double>(count);
    double ss = 0.0;
    for (int64_t t = segment.begin; t < segment.end; ++t) {
        for (int64_t j = 0; j < s; ++j) {
            if (series.observed(t, j)) {
                const double d = series.value_at(t, j) - mean;
                ss += d * d;
            }
        }
    }
    const double std = std::sqrt(ss / static_cast<double>(count));  // population
    if (std <= 0.0) {
        throw DataError("normalizer degenerate: observed values are constant");
    }
    return Normalizer{mean, std};
}

TrafficSeries impute_locf(const TrafficSeries& series) {
    TrafficSeries out = series;
    const int64_t s = series.sensors();
    for (int64_t j = 0; j < s; ++j) {
        int64_t first_obs = -1;
        for (int64_t t = 0; t < series.steps; ++t) {
            if (series.observed(t, j)) {
                first_obs = t;
                break;
            }
        }
        if (first_obs < 0) {
            throw DataError("sensor '" + series.sensor_ids[static_cast<size_t>(j)] +
                            "' has no observed values");
        }
        double carry = series.value_at(first_obs, j);
        for (int64_t t = 0; t < series.steps; ++t) {
            if (series.observed(t, j)) {
                carry = series.value_at(t, j);
            } else {
                out.values[static_cast<size_t>(t * s + j)] = carry;
            }
        }
    }
    return out;  // mask unchanged
}

// --- windows ---

std::vector<WindowSample> build_windows(const TrafficSeries& series,
                                        const Normalizer& normalizer, Segment segment) {
    if (series.step_minutes != 5) {
        throw DataError("windows require a 5-minute series, got " +
                        std::to_string(series.step_minutes) + "-minute steps");
    }
    if (segment.begin < 0 || segment.end > series.steps || segment.begin > segment.end) {
        throw ContractError("build_windows: segment out of range");
    }
    const int64_t s = series.sensors();
    const int64_t lo = std::max(segment.begin, kLookbackSteps);
    const int64_t hi = std::min(segment.end, series.steps - kLookaheadSteps);  // exclusive

    std::vector<WindowSample> out;
    if (lo >= hi) {
        std::cerr << "warning: segment [" << segment.begin << ", " << segment.end
                  << ") yields no windows (a standalone segment needs at least "
                  << kMinSegmentSteps << " steps)\n";
        return out;
    }
    out.reserve(static_cast<size_t>(hi - lo));
    for (int64_t t = lo; t < hi; ++t) {
        WindowSample w;
        w.anchor = t;
        w.sensors = s;
        w.x_short.resize(static_cast<size_t>(kShortSteps * s));
        w.x_medium.resize(static_cast<size_t>(kMediumSteps * s));
        w.y_mph.resize(static_cast<size_t>(kHorizonSteps * s));
        w.y_mask.resize(static_cast<size_t>(kHorizonSteps * s));
        for (int64_t k = 0; k < kShortSteps; ++k) {
            const int64_t step = t - (kShortSteps - 1) + k;  // t-11 .. t
            w.t_idx_short[static_cast<size_t>(k)] = series.time_slot(step);
            w.d_idx_short[static_cast<size_t>(k)] = series.day_index(step);
            for (int64_t j = 0; j < s; ++j) {
                w.x_short[static_cast<size_t>(k * s + j)] =
                    normalizer.normalize(series.value_at(step, j));
            }
        }
        for (int64_t k = 0; k < kMediumSteps; ++k) {
            const int64_t step = t - kLookbackSteps + k * kMediumStride;  // t-264 .. t
            w.t_idx_medium[static_cast<size_t>(k)] = series.time_slot(step);
            w.d_idx_medium[static_cast<size_t>(k)] = series.day_index(step);
            for (int64_t j = 0; j < s; ++j) {
                w.x_medium[static_cast<size_t>(k * s + j)] =
                    normalizer.normalize(series.value_at(step, j));
            }
        }
        for (int64_t k = 0; k < kHorizonSteps; ++k) {
            const int64_t step = t + (k + 1) * kMediumStride;  // t+24 .. t+288
            w.t_idx_target[static_cast<size_t>(k)] = series.time_slot(step);
            w.d_idx_target[static_cast<size_t>(k)] = series.day_index(step);
            for (int64_t j = 0; j < s; ++j) {
                w.y_mph[static_cast<size_t>(k * s + j)] = series.value_at(step, j);
                w.y_mask[static_cast<size_t>(k * s + j)] = series.mask[static_cast<size_t>(
                    step * s + j)];
            }
        }
        out.push_back(std::move(w));
    }
    return out;
}

// --- batching ---

Batch stack_samples(std::span<const WindowSample* const> samples) {
    if (samples.empty()) throw DataError("stack_samples: empty batch");
    Batch batch;
    batch.size = static_cast<int64_t>(samples.size());
    batch.sensors = samples[0]->sensors;
    const auto per = static_cast<size_t>(kHorizonSteps * batch.sensors);
    for (const WindowSample* w : samples) {
        if (w->sensors != batch.sensors) {
            throw ContractError("stack_samples: sensor count mismatch inside a batch");
        }
        batch.x_short.insert(batch.x_short.end(), w->x_short.begin(), w->x_short.end());
        batch.x_medium.insert(batch.x_medium.end(), w->x_medium.begin(), w->x_medium.end());
        batch.y_mph.insert(batch.y_mph.end(), w->y_mph.begin(), w->y_mph.end());
        for (size_t i = 0; i < per; ++i) {
            batch.y_mask.push_back(w->y_mask[i] ? 1.0 : 0.0);
        }
        batch.t_idx_short.insert(batch.t_idx_short.end(), w->t_idx_short.begin(),
                                 w->t_idx_short.end());
        batch.t_idx_medium.insert(batch.t_idx_medium.end(), w->t_idx_medium.begin(),
                                  w->t_idx_medium.end());
        batch.t_idx_target.insert(batch.t_idx_target.end(), w->t_idx_target.begin(),
                                  w->t_idx_target.end());
        batch.d_idx_short.insert(batch.d_idx_short.end(), w->d_idx_short.begin(),
                                 w->d_idx_short.end());
        batch.d_idx_medium.insert(batch.d_idx_medium.end(), w->d_idx_medium.begin(),
                                  w->d_idx_medium.end());
        batch.d_idx_target.insert(batch.d_idx_target.end(), w->d_idx_target.begin(),
                                  w->d_idx_target.end());
        batch.anchors.push_back(w->anchor);
    }
    return batch;
}

namespace {

std::vector<Batch> batch_order(std::span<const WindowSample> samples,
                               const std::vector<int64_t>& order, int64_t batch_size) {
    std::vector<Batch> batches;
    std::vector<const WindowSample*> slot;
    for (size_t i = 0; i < order.size();) {
        slot.clear();
        for (int64_t b = 0; b < batch_size && i < order.size(); ++b, ++i) {
            slot.push_back(&samples[static_cast<size_t>(order[i])]);
        }
        batches.push_back(stack_samples(slot));
    }
    return batches;
}

}  // namespace

std::vector<Batch> make_batches(std::span<const WindowSample> samples, int64_t batch_size,
                                uint64_t shuffle_seed) {
    if (samples.empty()) throw DataError("make_batches: no samples");
    if (batch_size < 1) throw ContractError("make_batches: batch_size must be >= 1");
    std::vector<int64_t> order(samples.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int64_t>(i);
    Rng rng(shuffle_seed);
    deterministic_shuffle(order, rng);
    return batch_order(samples, order, batch_size);
}

std::vector<Batch> make_batches_ordered(std::span<const WindowSample> samples,
                                        int64_t batch_size) {
    if (samples.empty()) throw DataError("make_batches_ordered: no samples");
    if (batch_size < 1) throw ContractError("make_batches_ordered: batch_size must be >= 1");
    std::vector<int64_t> order(samples.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int64_t>(i);
    return batch_order(samples, order, batch_size);
}

}  // namespace traff
