#pragma once

// Horizon-sliced RMSE/MAE/MAPE evaluation in mph, result tables with optional
// published reference values, prediction-trace export, and a historical-
// average baseline used as a sanity oracle.

#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "traff/data.hpp"
#include "traff/model.hpp"

namespace traff {

// Scalar metrics over observed entries. MAPE additionally skips zero targets
// and is reported as a fraction.
double rmse(std::span<const double> y, std::span<const double> y_hat,
            std::span<const uint8_t> mask);
double mae(std::span<const double> y, std::span<const double> y_hat,
           std::span<const uint8_t> mask);
double mape(std::span<const double> y, std::span<const double> y_hat,
            std::span<const uint8_t> mask);

// Anything that can map a batch to denormalized predictions [B x 12 x S].
class Predictor {
  public:
    virtual ~Predictor() = default;
    virtual std::vector<double> predict_mph(const Batch& batch) = 0;
    virtual std::string name() const = 0;
};

class ModelPredictor final : public Predictor {
  public:
    ModelPredictor(Model& model, const Normalizer& normalizer)
        : model_(model), normalizer_(normalizer) {}
    std::vector<double> predict_mph(const Batch& batch) override;
    std::string name() const override { return to_string(model_.kind()); }

  private:
    Model& model_;
    Normalizer normalizer_;
};

// Naive oracle: mean observed speed per (time slot, weekday-or-weekend,
// sensor) over a fitting segment, with a per-sensor overall fallback.
class HistoricalAveragePredictor final : public Predictor {
  public:
    HistoricalAveragePredictor(const TrafficSeries& series, Segment fit_segment);
    std::vector<double> predict_mph(const Batch& batch) override;
    std::string name() const override { return "historical_average"; }

    double lookup(int64_t time_slot, int64_t day_index, int64_t sensor) const;

  private:
    int64_t sensors_;
    std::vector<double> table_;     // [288 x 2 x sensors]
    std::vector<double> fallback_;  // [sensors]
};

inline constexpr int64_t kHorizonHours[4] = {6, 12, 18, 24};
inline constexpr int64_t kHorizonOutputSteps[4] = {3, 6, 9, 12};  // 1-based

struct HorizonMetrics {
    int64_t hours = 0;
    int64_t output_step = 0;  // 1-based index into the 12 two-hour steps
    double rmse_mph = 0.0;
    double mae_mph = 0.0;
    double mape = 0.0;  // fraction
    int64_t entries = 0;
};

struct HorizonReport {
    std::string model;
    std::string dataset_id;
    std::string config_hash;
    int64_t sample_count = 0;
    int64_t sensor_count = 0;
    std::vector<HorizonMetrics> horizons;  // exactly the four standard horizons

    std::string to_json() const;
    static HorizonReport from_json(const std::string& text);
};

struct EvalMeta {
    std::string dataset_id;
    std::string config_hash;
};

// Denormalized predictions vs mph targets per horizon step {3, 6, 9, 12};
// enforces RMSE >= MAE on every slice. NaN metrics raise NumericError.
HorizonReport evaluate(Predictor& predictor, std::span<const WindowSample> samples,
                       int64_t batch_size, const EvalMeta& meta);

// Published results embedded for side-by-side display; they are reference
// values from the original experiments, not reproductions.
struct ReferenceEntry {
    const char* dataset;  // "METR-LA" | "PEMS-BAY"
    const char* model;
    int64_t hours;
    double rmse_mph;
    double mae_mph;
    double mape_percent;
};
std::span<const ReferenceEntry> reference_results();

// Plain-text table: rows = models, column groups = horizons. When
// with_references is set, labeled non-reproduced reference rows follow.
std::string render_table(std::span<const HorizonReport> reports, bool with_references);

// Predictions for the 12 two-hour points of one calendar day and one sensor,
// written as CSV (timestamp, observed_mph, predicted_mph). The day must lie
// inside the given segment.
void export_trace(Predictor& predictor, const TrafficSeries& series,
                  const Normalizer& normalizer, Segment test_segment, const DateTime& day,
                  const std::string& sensor_id, const std::string& out_path);

}  // namespace traff
