#include <cmath>
#include <filesystem>

#include "doctest.h"
#include "traff/cli.hpp"
#include "traff/eval.hpp"
#include "traff/train.hpp"

using namespace traff;
namespace fs = std::filesystem;

namespace {

// Echoes the targets back: a perfect predictor.
class OraclePredictor final : public Predictor {
  public:
    std::vector<double> predict_mph(const Batch& batch) override { return batch.y_mph; }
    std::string name() const override { return "oracle"; }
};

class ConstantPredictor final : public Predictor {
  public:
    explicit ConstantPredictor(double v) : value_(v) {}
    std::vector<double> predict_mph(const Batch& batch) override {
        return std::vector<double>(batch.y_mph.size(), value_);
    }
    std::string name() const override { return "constant"; }

  private:
    double value_;
};

PipelineData noise_free_pipeline() {
    RunConfig cfg;
    cfg.apply_kv("data.sensors", "2");
    cfg.apply_kv("data.days", "10");
    cfg.apply_kv("data.noise_std", "0");
    cfg.apply_kv("data.seed", "11");
    return build_pipeline(cfg);
}

}  // namespace

TEST_CASE("metric hand values") {
    const std::vector<double> y1{1, 2}, p1{2, 4};
    const std::vector<uint8_t> m2{1, 1};
    CHECK(rmse(y1, p1, m2) == doctest::Approx(std::sqrt(2.5)).epsilon(1e-15));
    CHECK(rmse(y1, y1, m2) == 0.0);

    const std::vector<double> y2{1, 2, 3}, p2{2, 2, 5};
    const std::vector<uint8_t> m3{1, 1, 1};
    CHECK(mae(y2, p2, m3) == doctest::Approx(1.0).epsilon(1e-15));

    const std::vector<double> y3{100, 50}, p3{110, 45};
    CHECK(mape(y3, p3, m2) == doctest::Approx(0.10).epsilon(1e-15));
    CHECK(mape(y3, y3, m2) == 0.0);

    // a single outlier dominates RMSE but not MAE
    const std::vector<double> y4{0, 0, 0, 0}, p4{4, 0, 0, 0};
    const std::vector<uint8_t> m4{1, 1, 1, 1};
    CHECK(rmse(y4, p4, m4) == doctest::Approx(2.0).epsilon(1e-15));
    CHECK(mae(y4, p4, m4) == doctest::Approx(1.0).epsilon(1e-15));

    // masked entries and zero targets are excluded
    const std::vector<double> y5{1, 2, 3}, p5{2, 2, 5};
    const std::vector<uint8_t> m5{1, 1, 0};
    CHECK(mae(y5, p5, m5) == doctest::Approx(0.5).epsilon(1e-15));
    const std::vector<double> y6{0, 50}, p6{10, 45};
    CHECK(mape(y6, p6, m2) == doctest::Approx(0.1).epsilon(1e-15));

    CHECK_THROWS_AS(mae(y5, p5, std::vector<uint8_t>{0, 0, 0}), DataError);
    CHECK_THROWS_AS(mape(std::vector<double>{0.0}, std::vector<double>{1.0},
                         std::vector<uint8_t>{1}),
                    DataError);
}

TEST_CASE("evaluate: perfect predictor, structure, horizon mapping") {
    const PipelineData data = noise_free_pipeline();
    REQUIRE_FALSE(data.test_windows.empty());
    OraclePredictor oracle;
    const HorizonReport report =
        evaluate(oracle, data.test_windows, 32, {"synthetic-test", "hash"});
    REQUIRE(report.horizons.size() == 4);
    for (size_t h = 0; h < 4; ++h) {
        CHECK(report.horizons[h].hours == kHorizonHours[h]);
        CHECK(report.horizons[h].output_step == kHorizonOutputSteps[h]);
        CHECK(report.horizons[h].rmse_mph == 0.0);
        CHECK(report.horizons[h].mae_mph == 0.0);
        CHECK(report.horizons[h].mape == 0.0);
        CHECK(report.horizons[h].entries > 0);
    }
    CHECK(report.sample_count == static_cast<int64_t>(data.test_windows.size()));
    CHECK(report.sensor_count == 2);

    // 6/12/18/24 hours map to output steps 3/6/9/12
    CHECK(kHorizonOutputSteps[0] == 3);
    CHECK(kHorizonOutputSteps[1] == 6);
    CHECK(kHorizonOutputSteps[2] == 9);
    CHECK(kHorizonOutputSteps[3] == 12);
}

TEST_CASE("evaluate matches a direct computation for a constant predictor") {
    const PipelineData data = noise_free_pipeline();
    const double c = data.normalizer.mean;  // train mean
    ConstantPredictor constant(c);
    const HorizonReport report =
        evaluate(constant, data.test_windows, 32, {"synthetic-test", "hash"});

    for (size_t h = 0; h < 4; ++h) {
        const int64_t k = kHorizonOutputSteps[h] - 1;
        double ss = 0.0, sa = 0.0;
        int64_t n = 0;
        for (const auto& w : data.test_windows) {
            for (int64_t s = 0; s < w.sensors; ++s) {
                if (!w.y_mask[static_cast<size_t>(k * w.sensors + s)]) continue;
                const double y = w.y_mph[static_cast<size_t>(k * w.sensors + s)];
                ss += (y - c) * (y - c);
                sa += std::fabs(y - c);
                ++n;
            }
        }
        CHECK(report.horizons[h].rmse_mph ==
              doctest::Approx(std::sqrt(ss / n)).epsilon(1e-12));
        CHECK(report.horizons[h].mae_mph == doctest::Approx(sa / n).epsilon(1e-12));
        CHECK(report.horizons[h].rmse_mph >= report.horizons[h].mae_mph);
    }
}

TEST_CASE("normalized and mph metrics differ by the std factor") {
    Rng rng(4);
    const Normalizer norm{50.0, 7.5};
    std::vector<double> y(500), p(500);
    std::vector<uint8_t> m(500, 1);
    for (size_t i = 0; i < y.size(); ++i) {
        y[i] = 30 + 30 * rng.uniform01();
        p[i] = y[i] + 3.0 * rng.gauss();
    }
    std::vector<double> yn(y.size()), pn(p.size());
    for (size_t i = 0; i < y.size(); ++i) {
        yn[i] = norm.normalize(y[i]);
        pn[i] = norm.normalize(p[i]);
    }
    CHECK(mae(y, p, m) == doctest::Approx(norm.std * mae(yn, pn, m)).epsilon(1e-12));
    CHECK(rmse(y, p, m) == doctest::Approx(norm.std * rmse(yn, pn, m)).epsilon(1e-12));
}

TEST_CASE("metrics are invariant under sample shuffling") {
    const PipelineData data = noise_free_pipeline();
    ConstantPredictor constant(55.0);
    const HorizonReport a = evaluate(constant, data.test_windows, 32, {"d", "h"});

    std::vector<WindowSample> shuffled(data.test_windows.begin(), data.test_windows.end());
    Rng rng(9);
    deterministic_shuffle(shuffled, rng);
    const HorizonReport b = evaluate(constant, shuffled, 17, {"d", "h"});
    for (size_t h = 0; h < 4; ++h) {
        CHECK(a.horizons[h].rmse_mph ==
              doctest::Approx(b.horizons[h].rmse_mph).epsilon(1e-12));
        CHECK(a.horizons[h].mae_mph == doctest::Approx(b.horizons[h].mae_mph).epsilon(1e-12));
        CHECK(a.horizons[h].mape == doctest::Approx(b.horizons[h].mape).epsilon(1e-12));
    }
}

TEST_CASE("historical average nails noise-free synthetic data") {
    const PipelineData data = noise_free_pipeline();
    HistoricalAveragePredictor naive(data.series, data.splits.train);
    const HorizonReport report = evaluate(naive, data.test_windows, 32, {"d", "h"});
    for (const auto& h : report.horizons) {
        CHECK(h.mae_mph < 1e-9);  // the pattern is a pure function of (slot, daytype)
        CHECK(h.rmse_mph < 1e-9);
    }
}

TEST_CASE("report JSON round trip") {
    HorizonReport r;
    r.model = "trafformer";
    r.dataset_id = "synthetic(x)";
    r.config_hash = "abc123";
    r.sample_count = 10;
    r.sensor_count = 3;
    for (size_t h = 0; h < 4; ++h) {
        r.horizons.push_back({kHorizonHours[h], kHorizonOutputSteps[h], 1.5 + h, 1.0 + h,
                              0.05 + 0.01 * h, 120});
    }
    const HorizonReport rt = HorizonReport::from_json(r.to_json());
    CHECK(rt.model == r.model);
    CHECK(rt.config_hash == r.config_hash);
    REQUIRE(rt.horizons.size() == 4);
    CHECK(rt.horizons[2].rmse_mph == r.horizons[2].rmse_mph);
    CHECK(rt.horizons[3].entries == 120);
}

TEST_CASE("reference table embeds the published values verbatim") {
    bool found_trafformer = false;
    for (const auto& e : reference_results()) {
        if (std::string(e.dataset) == "METR-LA" && std::string(e.model) == "TrafFormer" &&
            e.hours == 24) {
            CHECK(e.rmse_mph == 8.59);
            CHECK(e.mae_mph == 4.18);
            CHECK(e.mape_percent == 13.57);
            found_trafformer = true;
        }
        if (std::string(e.dataset) == "PEMS-BAY" && std::string(e.model) == "GAMCN" &&
            e.hours == 24) {
            CHECK(e.rmse_mph == 5.22);
            CHECK(e.mae_mph == 2.34);
            CHECK(e.mape_percent == 5.63);
        }
    }
    CHECK(found_trafformer);
    CHECK(reference_results().size() == 56);  // 7 models x 4 horizons x 2 datasets
}

TEST_CASE("render_table: header-only when empty, labeled references on demand") {
    const std::string empty = render_table({}, false);
    CHECK(empty.find("model") != std::string::npos);
    CHECK(empty.find("RMSE") != std::string::npos);

    HorizonReport r;
    r.model = "trafformer";
    for (size_t h = 0; h < 4; ++h) {
        r.horizons.push_back({kHorizonHours[h], kHorizonOutputSteps[h], 2.0, 1.0, 0.02, 5});
    }
    const HorizonReport reports[] = {r};
    const std::string plain = render_table(reports, false);
    CHECK(plain.find("trafformer") != std::string::npos);
    CHECK(plain.find("not reproduced") == std::string::npos);

    const std::string with_refs = render_table(reports, true);
    CHECK(with_refs.find("not reproduced") != std::string::npos);
    CHECK(with_refs.find("8.59") != std::string::npos);
    CHECK(with_refs.find("4.18") != std::string::npos);
    CHECK(with_refs.find("13.57") != std::string::npos);
    CHECK(with_refs.find("TrafFormer") != std::string::npos);
    CHECK(with_refs.find("GAMCN") != std::string::npos);
}

TEST_CASE("trace export writes 12 plot-ready rows that reload cleanly") {
    const PipelineData data = noise_free_pipeline();
    ConstantPredictor constant(42.0);

    // pick a day fully inside the test segment: steps are midnight-aligned
    const int64_t day_start =
        (data.splits.test.begin + kSlotsPerDay - 1) / kSlotsPerDay * kSlotsPerDay;
    REQUIRE(day_start + kSlotsPerDay <= data.splits.test.end);
    const DateTime day = data.series.timestamp(day_start);

    const std::string path = (fs::temp_directory_path() / "traff_trace.csv").string();
    export_trace(constant, data.series, data.normalizer, data.splits.test, day, "s1", path);

    const TrafficSeries reloaded = load_speed_csv(path);  // format consistency
    CHECK(reloaded.steps == 12);
    CHECK(reloaded.step_minutes == 120);
    CHECK(reloaded.sensor_ids == std::vector<std::string>{"observed_mph", "predicted_mph"});
    for (int64_t k = 0; k < 12; ++k) {
        const int64_t step = day_start + k * kMediumStride;
        CHECK(reloaded.value_at(k, 0) == data.series.value_at(step, 1));  // pass-through
        CHECK(reloaded.value_at(k, 1) == 42.0);
    }
    CHECK(reloaded.timestamp(0) == day);

    CHECK_THROWS_AS(export_trace(constant, data.series, data.normalizer, data.splits.test,
                                 day, "nope", path),
                    DataError);
    const DateTime early = data.series.timestamp(0);
    CHECK_THROWS_AS(export_trace(constant, data.series, data.normalizer, data.splits.test,
                                 early, "s1", path),
                    DataError);
}
