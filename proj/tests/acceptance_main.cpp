// Acceptance suite: runs every acceptance criterion at its stated tolerance
// and prints one PASS/FAIL line per criterion. Exit code = number of failures.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "traff/cli.hpp"
#include "traff/eval.hpp"
#include "traff/train.hpp"

using namespace traff;
namespace fs = std::filesystem;

namespace {

int g_failures = 0;

void report(int criterion, const std::string& what, bool pass, const std::string& detail) {
    std::printf("[%s] criterion %2d: %s (%s)\n", pass ? "PASS" : "FAIL", criterion,
                what.c_str(), detail.c_str());
    std::fflush(stdout);
    if (!pass) ++g_failures;
}

void run_criterion(int criterion, const std::string& what,
                   const std::function<std::pair<bool, std::string>()>& body) {
    try {
        const auto [pass, detail] = body();
        report(criterion, what, pass, detail);
    } catch (const std::exception& e) {
        report(criterion, what, false, std::string("exception: ") + e.what());
    }
}

std::string fresh_dir(const std::string& name) {
    const fs::path p = fs::temp_directory_path() / "traff_acceptance" / name;
    fs::remove_all(p);
    fs::create_directories(p);
    return p.string();
}

std::string slurp(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("missing file " + path);
    return std::string((std::istreambuf_iterator<char>(in)),
                       std::istreambuf_iterator<char>());
}

double elapsed_s(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// ---- criterion 1 ----
std::pair<bool, std::string> gradient_suite() {
    const auto t0 = std::chrono::steady_clock::now();
    const auto cases = gradient_check_suite(false);
    bool pass = true;
    double worst = 0.0;
    std::string worst_name;
    for (const auto& c : cases) {
        if (!c.pass) {
            pass = false;
            worst_name = c.name;
        }
        if (c.max_rel_error > worst) {
            worst = c.max_rel_error;
            if (worst_name.empty()) worst_name = c.name;
        }
    }
    const double secs = elapsed_s(t0);
    if (secs >= 120.0) pass = false;
    std::ostringstream os;
    os << cases.size() << " checks, worst err " << worst << " [" << worst_name << "], "
       << secs << " s";
    return {pass, os.str()};
}

// ---- criterion 2 ----
std::pair<bool, std::string> window_oracle_criterion() {
    const int64_t expected_counts[] = {1, 48, 448};
    const int64_t lengths[] = {553, 600, 1000};
    const Normalizer n{40.0, 10.0};
    for (int c = 0; c < 3; ++c) {
        SyntheticSpec spec;
        spec.n_sensors = 2;
        spec.n_days = (lengths[c] + 287) / 288 + 1;
        spec.seed = 100 + static_cast<uint64_t>(c);
        TrafficSeries s = generate_synthetic(spec);
        s.steps = lengths[c];
        s.values.resize(static_cast<size_t>(s.steps * 2));
        s.mask.resize(static_cast<size_t>(s.steps * 2));

        const auto windows = build_windows(s, n, {0, s.steps});
        // independent enumeration straight from the window definition
        int64_t count = 0;
        size_t wi = 0;
        for (int64_t t = 0; t < s.steps; ++t) {
            if (t < 264 || t + 288 > s.steps - 1) continue;
            ++count;
            if (wi >= windows.size()) return {false, "missing anchor"};
            const auto& w = windows[wi++];
            if (w.anchor != t) return {false, "anchor mismatch"};
            for (int64_t k = 0; k < 12; ++k) {
                const int64_t ss = t - 11 + k;
                const int64_t ms = t - 264 + 24 * k;
                const int64_t ts = t + 24 * (k + 1);
                if (w.t_idx_short[static_cast<size_t>(k)] != ss % 288 ||
                    w.t_idx_medium[static_cast<size_t>(k)] != ms % 288 ||
                    w.t_idx_target[static_cast<size_t>(k)] != ts % 288) {
                    return {false, "time index mismatch"};
                }
                for (int64_t j = 0; j < 2; ++j) {
                    if (w.x_short[static_cast<size_t>(k * 2 + j)] !=
                            n.normalize(s.value_at(ss, j)) ||
                        w.x_medium[static_cast<size_t>(k * 2 + j)] !=
                            n.normalize(s.value_at(ms, j)) ||
                        w.y_mph[static_cast<size_t>(k * 2 + j)] != s.value_at(ts, j)) {
                        return {false, "window values mismatch"};
                    }
                }
            }
        }
        if (count != expected_counts[c] ||
            static_cast<int64_t>(windows.size()) != expected_counts[c]) {
            return {false, "count mismatch at length " + std::to_string(lengths[c])};
        }
    }
    return {true, "counts 1/48/448, every index triple identical"};
}

// ---- criterion 3 ----
std::pair<bool, std::string> schedule_criterion() {
    const double expect[] = {1, 3, 1, 2, 1};
    const int64_t its[] = {0, 100, 200, 300, 400};
    for (int i = 0; i < 5; ++i) {
        if (triangular2_lr(its[i], 1, 3, 100) != expect[i]) {
            return {false, "mismatch at iteration " + std::to_string(its[i])};
        }
    }
    return {true, "exact values {1,3,1,2,1}"};
}

// ---- criterion 4 ----
class NoisyPredictor final : public Predictor {
  public:
    std::vector<double> predict_mph(const Batch& batch) override {
        Rng rng(11);
        std::vector<double> out(batch.y_mph);
        for (auto& v : out) v += rng.gauss() * 3.0;
        return out;
    }
    std::string name() const override { return "noisy"; }
};

std::pair<bool, std::string> metrics_criterion() {
    const std::vector<double> y1{1, 2}, p1{2, 4};
    const std::vector<uint8_t> m2{1, 1};
    if (std::fabs(rmse(y1, p1, m2) - std::sqrt(2.5)) > 1e-15) return {false, "rmse"};
    const std::vector<double> y2{1, 2, 3}, p2{2, 2, 5};
    const std::vector<uint8_t> m3{1, 1, 1};
    if (std::fabs(mae(y2, p2, m3) - 1.0) > 1e-15) return {false, "mae"};
    const std::vector<double> y3{100, 50}, p3{110, 45};
    if (std::fabs(mape(y3, p3, m2) - 0.10) > 1e-15) return {false, "mape"};

    // RMSE >= MAE is asserted inside evaluate on every slice
    RunConfig cfg;
    cfg.apply_kv("data.sensors", "2");
    cfg.apply_kv("data.days", "8");
    cfg.apply_kv("data.noise_std", "2");
    const PipelineData data = build_pipeline(cfg);
    NoisyPredictor noisy;
    const HorizonReport r = evaluate(noisy, data.test_windows, 64, {"acc", "none"});
    for (const auto& h : r.horizons) {
        if (h.rmse_mph < h.mae_mph) return {false, "rmse<mae escaped the assertion"};
    }
    return {true, "RMSE(√2.5), MAE(1.0), MAPE(0.10), RMSE>=MAE enforced"};
}

// ---- criteria 5-7, 9: experiment runs ----

struct TrainedRun {
    std::string dir;
    TrainedRun(const std::string& name, const std::vector<std::string>& extra) {
        dir = fresh_dir(name);
        std::vector<std::string> args{"train", "--preset", "desk", "--out", dir};
        args.insert(args.end(), extra.begin(), extra.end());
        if (run_cli(args) != 0) throw Error("training run failed: " + name);
    }
};

std::pair<bool, std::string> overfit_criterion() {
    const auto t0 = std::chrono::steady_clock::now();
    const std::string dir = fresh_dir("overfit");
    if (run_cli({"train", "--preset", "overfit", "--out", dir}) != 0) {
        return {false, "training command failed"};
    }
    const double secs = elapsed_s(t0);
    const auto j = nlohmann::json::parse(slurp(dir + "/history.json"));
    const auto train_loss = j.at("epochs").at("train_loss").get<std::vector<double>>();
    double best = 1e300;
    for (const double v : train_loss) best = std::min(best, v);
    const bool pass = best < 0.1 && train_loss.size() <= 50 && secs < 600.0;
    std::ostringstream os;
    os << "best train MAE " << best << " after " << train_loss.size() << " epochs, " << secs
       << " s";
    return {pass, os.str()};
}

HorizonReport evaluate_checkpoint(const std::string& run_dir, const PipelineData& data) {
    auto model = load_checkpoint(run_dir + "/checkpoint.bin");
    ModelPredictor predictor(*model, data.normalizer);
    return evaluate(predictor, data.test_windows, 8, {"desk", "acceptance"});
}

std::pair<bool, std::string> generalization_criterion(const TrainedRun& desk_a,
                                                      const PipelineData& data) {
    const HorizonReport model_report = evaluate_checkpoint(desk_a.dir, data);
    HistoricalAveragePredictor naive(data.series, data.splits.train);
    const HorizonReport naive_report = evaluate(naive, data.test_windows, 8, {"desk", "acc"});

    std::ostringstream os;
    bool pass = true;
    for (size_t h = 0; h < 4; ++h) {
        const double m = model_report.horizons[h].mae_mph;
        const double n = naive_report.horizons[h].mae_mph;
        pass = pass && m < n;
        os << model_report.horizons[h].hours << "h " << m << " vs naive " << n << "; ";
    }
    return {pass, os.str()};
}

std::pair<bool, std::string> ablation_criterion(const TrainedRun& desk_a,
                                                const PipelineData& data) {
    const HorizonReport base = evaluate_checkpoint(desk_a.dir, data);
    auto mean_mae = [](const HorizonReport& r) {
        double s = 0.0;
        for (const auto& h : r.horizons) s += h.mae_mph;
        return s / static_cast<double>(r.horizons.size());
    };
    const double base_mae = mean_mae(base);

    std::ostringstream os;
    os << "default " << base_mae;
    bool pass = true;
    for (const std::string mode : {"speed_only", "cyclical"}) {
        const TrainedRun run("ablation_" + mode, {"--mode", mode});
        const double mode_mae = mean_mae(evaluate_checkpoint(run.dir, data));
        os << "; " << mode << " " << mode_mae;
        pass = pass && mode_mae >= base_mae;
    }
    return {pass, os.str() + " (test MAE, mph)"};
}

std::pair<bool, std::string> early_stopping_criterion() {
    // the same observe/snapshot protocol the training loop runs
    const std::vector<double> val_losses{5.0, 4.0, 4.1, 4.2};
    EarlyStopper stopper(2);
    int64_t params_marker = 0;
    int64_t best_snapshot = 0;
    int64_t stopped_after = 0;
    for (size_t epoch = 1; epoch <= 10; ++epoch) {
        params_marker = static_cast<int64_t>(epoch);  // stand-in for epoch-end weights
        const bool stop = stopper.observe(val_losses[(epoch - 1) % val_losses.size()]);
        if (stopper.improved_last()) best_snapshot = params_marker;
        if (stop) {
            stopped_after = static_cast<int64_t>(epoch);
            break;
        }
    }
    const bool pass = stopped_after == 4 && best_snapshot == 2 && stopper.best_epoch() == 2;
    std::ostringstream os;
    os << "stopped after epoch " << stopped_after << ", returned epoch-" << best_snapshot
       << " parameters";
    return {pass, os.str()};
}

std::pair<bool, std::string> determinism_criterion(const TrainedRun& a, const TrainedRun& b) {
    const bool history_equal = slurp(a.dir + "/history.json") == slurp(b.dir + "/history.json");
    const bool ckpt_equal =
        slurp(a.dir + "/checkpoint.bin") == slurp(b.dir + "/checkpoint.bin");
    std::ostringstream os;
    os << "history " << (history_equal ? "identical" : "differs") << ", checkpoint "
       << (ckpt_equal ? "identical" : "differs");
    return {history_equal && ckpt_equal, os.str()};
}

std::pair<bool, std::string> reference_table_criterion() {
    HorizonReport own;
    own.model = "trafformer";
    for (size_t h = 0; h < 4; ++h) {
        own.horizons.push_back({kHorizonHours[h], kHorizonOutputSteps[h], 2.0, 1.0, 0.02, 9});
    }
    const HorizonReport reports[] = {own};
    const std::string table = render_table(reports, true);
    const bool values = table.find("8.59") != std::string::npos &&
                        table.find("4.18") != std::string::npos &&
                        table.find("13.57") != std::string::npos;
    const bool labeled = table.find("not reproduced") != std::string::npos;
    return {values && labeled,
            std::string("paper values ") + (values ? "embedded" : "missing") + ", " +
                (labeled ? "labeled non-reproduced" : "label missing")};
}

}  // namespace

int main() {
    unsetenv("TRAFF_OUTPUT_ROOT");
    std::printf("acceptance suite\n");

    run_criterion(1, "gradient suite (ops, encoder block, models; <2 min)", gradient_suite);
    run_criterion(2, "window construction matches brute-force enumeration",
                  window_oracle_criterion);
    run_criterion(3, "triangular2 schedule closed-form values", schedule_criterion);
    run_criterion(4, "metric hand values and RMSE>=MAE", metrics_criterion);
    run_criterion(5, "overfit: tiny trafformer reaches train MAE < 0.1", overfit_criterion);

    // desk-preset runs shared by criteria 6, 7, and 9
    try {
        const TrainedRun desk_a("desk_a", {});
        RunConfig desk_cfg;
        desk_cfg.apply_preset("desk");
        const PipelineData desk_data = build_pipeline(desk_cfg);

        run_criterion(6, "trained trafformer beats the historical-average oracle",
                      [&] { return generalization_criterion(desk_a, desk_data); });
        run_criterion(7, "speed_only and cyclical ablations do not beat the default",
                      [&] { return ablation_criterion(desk_a, desk_data); });
        run_criterion(8, "early stopping on [5, 4, 4.1, 4.2] with patience 2",
                      early_stopping_criterion);
        run_criterion(9, "same-seed desk runs are bitwise identical", [&] {
            const TrainedRun desk_b("desk_b", {});
            return determinism_criterion(desk_a, desk_b);
        });
    } catch (const std::exception& e) {
        report(6, "trained trafformer beats the historical-average oracle", false, e.what());
        report(7, "speed_only and cyclical ablations do not beat the default", false,
               e.what());
        run_criterion(8, "early stopping on [5, 4, 4.1, 4.2] with patience 2",
                      early_stopping_criterion);
        report(9, "same-seed desk runs are bitwise identical", false, e.what());
    }

    run_criterion(10, "reference table embeds published values, labeled",
                  reference_table_criterion);

    if (g_failures == 0) {
        std::printf("all acceptance criteria passed\n");
    } else {
        std::printf("%d acceptance criteria FAILED\n", g_failures);
    }
    return g_failures;
}
