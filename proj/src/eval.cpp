#include "traff/eval.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "json.hpp"

namespace traff {

using nlohmann::json;

// --- scalar metrics ---

namespace {

void check_metric_inputs(std::span<const double> y, std::span<const double> y_hat,
                         std::span<const uint8_t> mask, const char* name) {
    if (y.size() != y_hat.size() || y.size() != mask.size()) {
        throw ShapeError(std::string(name) + ": input lengths differ");
    }
}

}  // namespace

double rmse(std::span<const double> y, std::span<const double> y_hat,
            std::span<const uint8_t> mask) {
    check_metric_inputs(y, y_hat, mask, "rmse");
    double ss = 0.0;
    int64_t n = 0;
    for (size_t i = 0; i < y.size(); ++i) {
        if (mask[i]) {
            const double d = y[i] - y_hat[i];
            ss += d * d;
            ++n;
        }
    }
    if (n == 0) throw DataError("rmse: no observed entries");
    return std::sqrt(ss / static_cast<double>(n));
}

double mae(std::span<const double> y, std::span<const double> y_hat,
           std::span<const uint8_t> mask) {
    check_metric_inputs(y, y_hat, mask, "mae");
    double s = 0.0;
    int64_t n = 0;
    for (size_t i = 0; i < y.size(); ++i) {
        if (mask[i]) {
            s += std::fabs(y[i] - y_hat[i]);
            ++n;
        }
    }
    if (n == 0) throw DataError("mae: no observed entries");
    return s / static_cast<double>(n);
}

double mape(std::span<const double> y, std::span<const double> y_hat,
            std::span<const uint8_t> mask) {
    check_metric_inputs(y, y_hat, mask, "mape");
    double s = 0.0;
    int64_t n = 0;
    for (size_t i = 0; i < y.size(); ++i) {
        if (mask[i] && y[i] != 0.0) {  // zero targets are excluded
            s += std::fabs((y[i] - y_hat[i]) / y[i]);
            ++n;
        }
    }
    if (n == 0) throw DataError("mape: no observed nonzero targets");
    return s / static_cast<double>(n);
}

// --- predictors ---

std::vector<double> ModelPredictor::predict_mph(const Batch& batch) {
    return model_.forward(batch, false).mph(normalizer_);
}

HistoricalAveragePredictor::HistoricalAveragePredictor(const TrafficSeries& series,
                                                       Segment fit_segment) {
    if (fit_segment.begin < 0 || fit_segment.end > series.steps ||
        fit_segment.begin >= fit_segment.end) {
        throw ContractError("historical average: fitting segment out of range");
    }
    sensors_ = series.sensors();
    const size_t cells = static_cast<size_t>(kSlotsPerDay * 2 * sensors_);
    std::vector<double> sums(cells, 0.0);
    std::vector<int64_t> counts(cells, 0);
    std::vector<double> overall_sum(static_cast<size_t>(sensors_), 0.0);
    std::vector<int64_t> overall_count(static_cast<size_t>(sensors_), 0);
    for (int64_t t = fit_segment.begin; t < fit_segment.end; ++t) {
        const int64_t slot = series.time_slot(t);
        const int64_t daytype = series.day_index(t) >= 5 ? 1 : 0;
        for (int64_t s = 0; s < sensors_; ++s) {
            if (!series.observed(t, s)) continue;
            const double v = series.value_at(t, s);
            const size_t cell = static_cast<size_t>((slot * 2 + daytype) * sensors_ + s);
            sums[cell] += v;
            counts[cell] += 1;
            overall_sum[static_cast<size_t>(s)] += v;
            overall_count[static_cast<size_t>(s)] += 1;
        }
    }
    fallback_.resize(static_cast<size_t>(sensors_));
    for (int64_t s = 0; s < sensors_; ++s) {
        if (overall_count[static_cast<size_t>(s)] == 0) {
            throw DataError("historical average: sensor '" +
                            series.sensor_ids[static_cast<size_t>(s)] +
                            "' has no observations in the fitting segment");
        }
        fallback_[static_cast<size_t>(s)] = overall_sum[static_cast<size_t>(s)] /
                                            static_cast<double>(overall_count[static_cast<size_t>(s)]);
    }
    table_.resize(cells);
    for (size_t c = 0; c < cells; ++c) {
        table_[c] = counts[c] > 0 ? sums[c] / static_cast<double>(counts[c])
                                  : fallback_[c % static_cast<size_t>(sensors_)];
    }
}

double HistoricalAveragePredictor::lookup(int64_t time_slot, int64_t day_index,
                                          int64_t sensor) const {
    const int64_t daytype = day_index >= 5 ? 1 : 0;
    return table_[static_cast<size_t>((time_slot * 2 + daytype) * sensors_ + sensor)];
}

std::vector<double> HistoricalAveragePredictor::predict_mph(const Batch& batch) {
    if (batch.sensors != sensors_) {
        throw ContractError("historical average: sensor count mismatch");
    }
    std::vector<double> out(batch.y_mph.size());
    for (int64_t b = 0; b < batch.size; ++b) {
        for (int64_t k = 0; k < kHorizonSteps; ++k) {
            const auto ti = batch.t_idx_target[static_cast<size_t>(b * kHorizonSteps + k)];
            const auto di = batch.d_idx_target[static_cast<size_t>(b * kHorizonSteps + k)];
            for (int64_t s = 0; s < sensors_; ++s) {
                out[static_cast<size_t>((b * kHorizonSteps + k) * sensors_ + s)] =
                    lookup(ti, di, s);
            }
        }
    }
    return out;
}

// --- evaluation ---

HorizonReport evaluate(Predictor& predictor, std::span<const WindowSample> samples,
                       int64_t batch_size, const EvalMeta& meta) {
    if (samples.empty()) throw DataError("evaluate: empty test set");
    const int64_t sensors = samples[0].sensors;

    // per horizon index (0..3): flattened targets across samples and sensors
    std::vector<double> y[4], y_hat[4];
    std::vector<uint8_t> msk[4];
    for (const Batch& batch : make_batches_ordered(samples, batch_size)) {
        const std::vector<double> pred = predictor.predict_mph(batch);
        if (pred.size() != batch.y_mph.size()) {
            throw ContractError("predictor returned " + std::to_string(pred.size()) +
                                " values, expected " + std::to_string(batch.y_mph.size()));
        }
        for (int h = 0; h < 4; ++h) {
            const int64_t k = kHorizonOutputSteps[h] - 1;
            for (int64_t b = 0; b < batch.size; ++b) {
                const size_t base = static_cast<size_t>((b * kHorizonSteps + k) * sensors);
                for (int64_t s = 0; s < sensors; ++s) {
                    y[h].push_back(batch.y_mph[base + static_cast<size_t>(s)]);
                    y_hat[h].push_back(pred[base + static_cast<size_t>(s)]);
                    msk[h].push_back(batch.y_mask[base + static_cast<size_t>(s)] > 0.0 ? 1 : 0);
                }
            }
        }
    }

    HorizonReport report;
    report.model = predictor.name();
    report.dataset_id = meta.dataset_id;
    report.config_hash = meta.config_hash;
    report.sample_count = static_cast<int64_t>(samples.size());
    report.sensor_count = sensors;
    for (int h = 0; h < 4; ++h) {
        HorizonMetrics m;
        m.hours = kHorizonHours[h];
        m.output_step = kHorizonOutputSteps[h];
        m.rmse_mph = rmse(y[h], y_hat[h], msk[h]);
        m.mae_mph = mae(y[h], y_hat[h], msk[h]);
        m.mape = mape(y[h], y_hat[h], msk[h]);
        for (const uint8_t b : msk[h]) m.entries += b;
        if (!std::isfinite(m.rmse_mph) || !std::isfinite(m.mae_mph) || !std::isfinite(m.mape)) {
            throw NumericError("evaluate: non-finite metric at horizon " +
                               std::to_string(m.hours) + "h");
        }
        // power-mean inequality; tolerance covers only rounding of sqrt
        if (m.rmse_mph + 1e-12 * (1.0 + m.rmse_mph) < m.mae_mph) {
            throw NumericError("evaluate: RMSE " + std::to_string(m.rmse_mph) +
                               " fell below MAE " + std::to_string(m.mae_mph));
        }
        report.horizons.push_back(m);
    }
    return report;
}

std::string HorizonReport::to_json() const {
    json j;
    j["format"] = "traff-horizon-report";
    j["version"] = 1;
    j["model"] = model;
    j["dataset_id"] = dataset_id;
    j["config_hash"] = config_hash;
    j["sample_count"] = sample_count;
    j["sensor_count"] = sensor_count;
    json hs = json::array();
    for (const auto& h : horizons) {
        hs.push_back(json{{"hours", h.hours},
                          {"output_step", h.output_step},
                          {"rmse_mph", h.rmse_mph},
                          {"mae_mph", h.mae_mph},
                          {"mape", h.mape},
                          {"entries", h.entries}});
    }
    j["horizons"] = hs;
    return j.dump(2) + "\n";
}

HorizonReport HorizonReport::from_json(const std::string& text) {
    HorizonReport r;
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw ParseError(std::string("horizon report: ") + e.what());
    }
    r.model = j.at("model").get<std::string>();
    r.dataset_id = j.at("dataset_id").get<std::string>();
    r.config_hash = j.at("config_hash").get<std::string>();
    r.sample_count = j.at("sample_count").get<int64_t>();
    r.sensor_count = j.at("sensor_count").get<int64_t>();
    for (const auto& h : j.at("horizons")) {
        HorizonMetrics m;
        m.hours = h.at("hours").get<int64_t>();
        m.output_step = h.at("output_step").get<int64_t>();
        m.rmse_mph = h.at("rmse_mph").get<double>();
        m.mae_mph = h.at("mae_mph").get<double>();
        m.mape = h.at("mape").get<double>();
        m.entries = h.at("entries").get<int64_t>();
        r.horizons.push_back(m);
    }
    return r;
}

// --- published reference results ---

namespace {

// Published experiment tables; row order follows the original layout.
constexpr ReferenceEntry kReferenceResults[] = {
    {"METR-LA", "FNN", 6, 11.46, 6.05, 22.14},
    {"METR-LA", "FNN", 12, 11.52, 6.08, 22.46},
    {"METR-LA", "FNN", 18, 11.54, 6.10, 22.56},
    {"METR-LA", "FNN", 24, 11.46, 6.09, 22.36},
    {"METR-LA", "Stacked GRU", 6, 10.70, 5.68, 19.72},
    {"METR-LA", "Stacked GRU", 12, 10.78, 5.72, 20.03},
    {"METR-LA", "Stacked GRU", 18, 10.77, 5.73, 20.05},
    {"METR-LA", "Stacked GRU", 24, 10.69, 5.71, 19.78},
    {"METR-LA", "Seq2Seq LSTM", 6, 9.68, 5.02, 16.83},
    {"METR-LA", "Seq2Seq LSTM", 12, 9.74, 5.06, 17.09},
    {"METR-LA", "Seq2Seq LSTM", 18, 9.77, 5.07, 17.17},
    {"METR-LA", "Seq2Seq LSTM", 24, 9.72, 5.06, 17.05},
    {"METR-LA", "DCRNN", 6, 8.99, 4.29, 13.20},
    {"METR-LA", "DCRNN", 12, 9.33, 4.48, 13.61},
    {"METR-LA", "DCRNN", 18, 9.66, 4.64, 13.98},
    {"METR-LA", "DCRNN", 24, 9.63, 4.66, 14.29},
    {"METR-LA", "STGCN", 6, 14.86, 8.76, 21.07},
    {"METR-LA", "STGCN", 12, 15.88, 9.31, 22.24},
    {"METR-LA", "STGCN", 18, 15.31, 9.12, 21.99},
    {"METR-LA", "STGCN", 24, 13.60, 7.83, 21.29},
    {"METR-LA", "GAMCN", 6, 13.33, 6.30, 16.23},
    {"METR-LA", "GAMCN", 12, 12.52, 5.85, 15.90},
    {"METR-LA", "GAMCN", 18, 11.51, 5.35, 15.07},
    {"METR-LA", "GAMCN", 24, 9.61, 4.60, 13.84},
    {"METR-LA", "TrafFormer", 6, 8.47, 4.11, 13.25},
    {"METR-LA", "TrafFormer", 12, 8.53, 4.14, 13.39},
    {"METR-LA", "TrafFormer", 18, 8.56, 4.16, 13.50},
    {"METR-LA", "TrafFormer", 24, 8.59, 4.18, 13.57},
    {"PEMS-BAY", "FNN", 6, 8.27, 3.83, 11.21},
    {"PEMS-BAY", "FNN", 12, 8.25, 3.83, 11.17},
    {"PEMS-BAY", "FNN", 18, 8.25, 3.83, 11.17},
    {"PEMS-BAY", "FNN", 24, 8.23, 3.84, 11.12},
    {"PEMS-BAY", "Stacked GRU", 6, 6.20, 2.82, 7.17},
    {"PEMS-BAY", "Stacked GRU", 12, 6.20, 2.84, 7.19},
    {"PEMS-BAY", "Stacked GRU", 18, 6.20, 2.84, 7.19},
    {"PEMS-BAY", "Stacked GRU", 24, 6.20, 2.86, 7.20},
    {"PEMS-BAY", "Seq2Seq LSTM", 6, 6.22, 2.83, 7.13},
    {"PEMS-BAY", "Seq2Seq LSTM", 12, 6.22, 2.83, 7.11},
    {"PEMS-BAY", "Seq2Seq LSTM", 18, 6.22, 2.83, 7.11},
    {"PEMS-BAY", "Seq2Seq LSTM", 24, 6.24, 2.85, 7.12},
    {"PEMS-BAY", "DCRNN", 6, 5.54, 2.45, 6.07},
    {"PEMS-BAY", "DCRNN", 12, 5.83, 2.54, 6.43},
    {"PEMS-BAY", "DCRNN", 18, 5.83, 2.54, 6.43},
    {"PEMS-BAY", "DCRNN", 24, 5.84, 2.58, 6.32},
    {"PEMS-BAY", "STGCN", 6, 5.76, 2.65, 6.30},
    {"PEMS-BAY", "STGCN", 12, 6.18, 2.83, 6.86},
    {"PEMS-BAY", "STGCN", 18, 6.18, 2.83, 6.86},
    {"PEMS-BAY", "STGCN", 24, 6.81, 3.07, 7.80},
    {"PEMS-BAY", "GAMCN", 6, 5.16, 2.30, 5.56},
    {"PEMS-BAY", "GAMCN", 12, 5.18, 2.31, 5.59},
    {"PEMS-BAY", "GAMCN", 18, 5.18, 2.31, 5.59},
    {"PEMS-BAY", "GAMCN", 24, 5.22, 2.34, 5.63},
    {"PEMS-BAY", "TrafFormer", 6, 5.47, 2.59, 6.15},
    {"PEMS-BAY", "TrafFormer", 12, 5.43, 2.58, 6.09},
    {"PEMS-BAY", "TrafFormer", 18, 5.43, 2.58, 6.09},
    {"PEMS-BAY", "TrafFormer", 24, 5.46, 2.59, 6.14},
};

}  // namespace

std::span<const ReferenceEntry> reference_results() { return kReferenceResults; }

std::string render_table(std::span<const HorizonReport> reports, bool with_references) {
    std::ostringstream os;
    char line[256];
    os << "model                           |";
    for (const int64_t h : kHorizonHours) {
        std::snprintf(line, sizeof(line), "  %2lldh RMSE   MAE  MAPE%% |",
                      static_cast<long long>(h));
        os << line;
    }
    os << '\n';
    os << std::string(32, '-') << '+';
    for (int i = 0; i < 4; ++i) os << std::string(24, '-') << '+';
    os << '\n';
    for (const auto& r : reports) {
        std::snprintf(line, sizeof(line), "%-31s |", r.model.c_str());
        os << line;
        for (const int64_t h : kHorizonHours) {
            const HorizonMetrics* m = nullptr;
            for (const auto& hm : r.horizons) {
                if (hm.hours == h) m = &hm;
            }
            if (m) {
                std::snprintf(line, sizeof(line), " %9.2f %5.2f %6.2f |", m->rmse_mph,
                              m->mae_mph, m->mape * 100.0);
            } else {
                std::snprintf(line, sizeof(line), " %9s %5s %6s |", "-", "-", "-");
            }
            os << line;
        }
        os << '\n';
    }
    if (with_references) {
        os << "reference values below are from the original experiments "
              "(not reproduced by this run)\n";
        const char* datasets[] = {"METR-LA", "PEMS-BAY"};
        for (const char* ds : datasets) {
            // preserve the row order of the source table
            std::vector<const char*> models;
            for (const auto& e : kReferenceResults) {
                if (std::string(e.dataset) == ds &&
                    (models.empty() || std::string(models.back()) != e.model)) {
                    models.push_back(e.model);
                }
            }
            for (const char* model : models) {
                std::snprintf(line, sizeof(line), "%-12s %-10s [reference] |", model, ds);
                os << line;
                for (const int64_t h : kHorizonHours) {
                    for (const auto& e : kReferenceResults) {
                        if (std::string(e.dataset) == ds && std::string(e.model) == model &&
                            e.hours == h) {
                            std::snprintf(line, sizeof(line), " %9.2f %5.2f %6.2f |",
                                          e.rmse_mph, e.mae_mph, e.mape_percent);
                            os << line;
                        }
                    }
                }
                os << '\n';
            }
        }
    }
    return os.str();
}

// --- trace export ---

void export_trace(Predictor& predictor, const TrafficSeries& series,
                  const Normalizer& normalizer, Segment test_segment, const DateTime& day,
                  const std::string& sensor_id, const std::string& out_path) {
    int64_t sensor = -1;
    for (size_t i = 0; i < series.sensor_ids.size(); ++i) {
        if (series.sensor_ids[i] == sensor_id) sensor = static_cast<int64_t>(i);
    }
    if (sensor < 0) throw DataError("unknown sensor id '" + sensor_id + "'");
    if (series.step_minutes != 5) throw DataError("trace export requires a 5-minute series");

    DateTime midnight = day;
    midnight.hour = midnight.minute = midnight.second = 0;
    const int64_t offset_min = to_epoch_minutes(midnight) - to_epoch_minutes(series.start_time);
    if (offset_min < 0 || offset_min % 5 != 0) {
        throw DataError("day " + format_datetime(midnight) + " is not covered by the series");
    }
    const int64_t day_start = offset_min / 5;
    const int64_t day_end = day_start + kSlotsPerDay;
    if (day_start < test_segment.begin || day_end > test_segment.end) {
        throw DataError("day " + format_datetime(midnight) +
                        " does not lie fully inside the test segment");
    }
    const int64_t anchor = day_start - kMediumStride;  // first target = day start
    if (anchor < kLookbackSteps || day_start - kMediumStride + kLookaheadSteps > series.steps) {
        throw DataError("series too short to anchor predictions for that day");
    }

    const auto windows = build_windows(series, normalizer, {anchor, anchor + 1});
    if (windows.size() != 1) throw DataError("could not build the prediction window");
    const WindowSample* sample = &windows[0];
    const Batch batch = stack_samples(std::span<const WindowSample* const>(&sample, 1));
    const std::vector<double> pred = predictor.predict_mph(batch);

    std::ofstream out(out_path);
    if (!out) throw DataError("cannot write '" + out_path + "'");
    auto exact = [](double v) {
        char buf[32];
        const auto res = std::to_chars(buf, buf + sizeof(buf), v);
        return std::string(buf, res.ptr);
    };
    out << "timestamp,observed_mph,predicted_mph\n";
    for (int64_t k = 0; k < kHorizonSteps; ++k) {
        const int64_t step = anchor + (k + 1) * kMediumStride;
        out << format_datetime(series.timestamp(step)) << ',';
        if (series.observed(step, sensor)) out << exact(series.value_at(step, sensor));
        out << ','
            << exact(pred[static_cast<size_t>(k * series.sensors() + sensor)]) << '\n';
    }
    if (!out) throw DataError("failed writing '" + out_path + "'");
}

}  // namespace traff
