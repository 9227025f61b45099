#pragma once

// Command-line entry points: generate-data, train, evaluate, predict (trace
// export), and gradcheck, driven by a flat key=value config with flag
// overrides. Exit codes: 0 success, 1 usage, 2 data, 3 numeric failure.

#include <cstdint>
#include <string>
#include <vector>

#include "traff/data.hpp"
#include "traff/eval.hpp"
#include "traff/model.hpp"
#include "traff/train.hpp"

namespace traff {

enum class DataSourceKind { synthetic, csv };

struct RunConfig {
    DataSourceKind source = DataSourceKind::synthetic;
    std::string csv_path;
    SyntheticSpec synthetic;
    ModelKind model_kind = ModelKind::trafformer;
    ModelConfig model;  // n_sensors filled from the data at run time
    TrainConfig train;
    std::string out_dir = "out";
    uint64_t seed = 42;

    // One key=value assignment; throws UsageError on unknown keys or bad
    // values. This is the single parsing path for files, presets, and flags.
    void apply_kv(const std::string& key, const std::string& value);

    void apply_file(const std::string& path);
    void apply_preset(const std::string& name);  // "desk" | "overfit"

    // Full resolved snapshot, sorted keys, round-trips through apply_kv.
    std::string to_kv_text() const;

    std::string dataset_id() const;
    // Output directory resolved against $TRAFF_OUTPUT_ROOT when relative.
    std::string resolved_out_dir() const;
};

struct PipelineData {
    TrafficSeries series;  // imputed, mask preserved
    Splits splits;
    Normalizer normalizer;
    std::vector<WindowSample> train_windows, val_windows, test_windows;
};

// load/generate -> impute -> split -> fit normalizer on train -> windows.
PipelineData build_pipeline(const RunConfig& config);

std::string sha256_hex(std::string_view data);
std::string sha256_hex_file(const std::string& path);

struct GradCheckCase {
    std::string name;
    double max_rel_error = 0.0;
    double tolerance = 0.0;
    bool pass = false;
};

// Finite-difference verification of every op, the encoder block, the
// recurrent cells, and each model end-to-end at a tiny configuration.
// The negative control deliberately corrupts one backward pass and must fail.
std::vector<GradCheckCase> gradient_check_suite(bool include_negative_control);

// args exclude the program name.
int run_cli(const std::vector<std::string>& args);

}  // namespace traff
