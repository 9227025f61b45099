#include "traff/cli.hpp"

#include <openssl/evp.h>

#include <charconv>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"

namespace traff {

namespace fs = std::filesystem;

// --- hashing ---

std::string sha256_hex(std::string_view data) {
    unsigned char md[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    if (EVP_Digest(data.data(), data.size(), md, &len, EVP_sha256(), nullptr) != 1) {
        throw Error("sha256 failed");
    }
    static const char* hex = "0123456789abcdef";
    std::string out;
    out.reserve(2 * len);
    for (unsigned int i = 0; i < len; ++i) {
        out.push_back(hex[md[i] >> 4]);
        out.push_back(hex[md[i] & 0xf]);
    }
    return out;
}

std::string sha256_hex_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open '" + path + "'");
    std::string data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return sha256_hex(data);
}

// --- config ---

namespace {

int64_t parse_i64(const std::string& key, const std::string& v) {
    int64_t out = 0;
    const auto res = std::from_chars(v.data(), v.data() + v.size(), out);
    if (res.ec != std::errc{} || res.ptr != v.data() + v.size()) {
        throw UsageError("config key '" + key + "': invalid integer '" + v + "'");
    }
    return out;
}

uint64_t parse_u64(const std::string& key, const std::string& v) {
    uint64_t out = 0;
    const auto res = std::from_chars(v.data(), v.data() + v.size(), out);
    if (res.ec != std::errc{} || res.ptr != v.data() + v.size()) {
        throw UsageError("config key '" + key + "': invalid unsigned integer '" + v + "'");
    }
    return out;
}

double parse_f64(const std::string& key, const std::string& v) {
    double out = 0.0;
    const auto res = std::from_chars(v.data(), v.data() + v.size(), out);
    if (res.ec != std::errc{} || res.ptr != v.data() + v.size()) {
        throw UsageError("config key '" + key + "': invalid number '" + v + "'");
    }
    return out;
}

bool parse_bool(const std::string& key, const std::string& v) {
    if (v == "1" || v == "true") return true;
    if (v == "0" || v == "false") return false;
    throw UsageError("config key '" + key + "': expected 0|1, got '" + v + "'");
}

std::string fmt_f64(double v) {
    char buf[32];
    const auto res = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, res.ptr);
}

std::string fmt_date(const DateTime& dt) {
    char buf[16];
    std::snprintf(buf, sizeof(buf), "%04d-%02d-%02d", dt.year, dt.month, dt.day);
    return buf;
}

std::string trim_ws(const std::string& s) {
    const size_t a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return "";
    const size_t b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
}

}  // namespace

void RunConfig::apply_kv(const std::string& key, const std::string& value) {
    if (key == "data.source") {
        if (value == "synthetic") {
            source = DataSourceKind::synthetic;
        } else if (value == "csv") {
            source = DataSourceKind::csv;
        } else {
            throw UsageError("data.source must be synthetic|csv, got '" + value + "'");
        }
    } else if (key == "data.csv") {
        csv_path = value;
    } else if (key == "data.sensors") {
        synthetic.n_sensors = parse_i64(key, value);
    } else if (key == "data.days") {
        synthetic.n_days = parse_i64(key, value);
    } else if (key == "data.noise_std") {
        synthetic.noise_std = parse_f64(key, value);
    } else if (key == "data.seed") {
        synthetic.seed = parse_u64(key, value);
    } else if (key == "data.start") {
        try {
            synthetic.start = parse_date(value);
        } catch (const ParseError& e) {
            throw UsageError(std::string("data.start: ") + e.what());
        }
    } else if (key == "model.kind") {
        model_kind = model_kind_from_string(value);
    } else if (key == "model.mode") {
        model.mode = input_mode_from_string(value);
    } else if (key == "model.d_model") {
        model.d_model = parse_i64(key, value);
    } else if (key == "model.embed_dim") {
        model.embed_dim = parse_i64(key, value);
    } else if (key == "model.n_heads") {
        model.n_heads = parse_i64(key, value);
    } else if (key == "model.n_layers") {
        model.n_layers = parse_i64(key, value);
    } else if (key == "model.ff_width") {
        model.ff_width = parse_i64(key, value);
    } else if (key == "model.dropout") {
        model.dropout = parse_f64(key, value);
    } else if (key == "model.sinusoidal_positions") {
        model.sinusoidal_positions = parse_bool(key, value);
    } else if (key == "model.fnn_widths") {
        std::vector<int64_t> widths;
        std::stringstream ss(value);
        std::string item;
        while (std::getline(ss, item, ',')) widths.push_back(parse_i64(key, trim_ws(item)));
        if (widths.size() != 3) throw UsageError("model.fnn_widths needs 3 comma-separated sizes");
        model.fnn_widths = widths;
    } else if (key == "model.gru_hidden") {
        model.gru_hidden = parse_i64(key, value);
    } else if (key == "model.gru_layers") {
        model.gru_layers = parse_i64(key, value);
    } else if (key == "model.lstm_hidden") {
        model.lstm_hidden = parse_i64(key, value);
    } else if (key == "model.teacher_forcing") {
        model.teacher_forcing = parse_bool(key, value);
    } else if (key == "train.max_epochs") {
        train.max_epochs = parse_i64(key, value);
    } else if (key == "train.patience") {
        train.patience = parse_i64(key, value);
    } else if (key == "train.batch_size") {
        train.batch_size = parse_i64(key, value);
    } else if (key == "train.base_lr") {
        train.base_lr = parse_f64(key, value);
    } else if (key == "train.max_lr") {
        train.max_lr = parse_f64(key, value);
    } else if (key == "train.momentum") {
        train.momentum = parse_f64(key, value);
    } else if (key == "train.loss") {
        train.loss = loss_kind_from_string(value);
    } else if (key == "train.optimizer") {
        train.optimizer = optimizer_kind_from_string(value);
    } else if (key == "train.grad_clip") {
        train.grad_clip = parse_f64(key, value);
    } else if (key == "train.target_train_loss") {
        if (value.empty()) {
            train.target_train_loss.reset();
        } else {
            train.target_train_loss = parse_f64(key, value);
        }
    } else if (key == "out.dir") {
        out_dir = value;
    } else if (key == "seed") {
        seed = parse_u64(key, value);
        train.seed = seed;
    } else {
        throw UsageError("unknown config key '" + key + "'");
    }
}

void RunConfig::apply_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw UsageError("cannot open config file '" + path + "'");
    std::string line;
    int64_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        const size_t hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        line = trim_ws(line);
        if (line.empty()) continue;
        const size_t eq = line.find('=');
        if (eq == std::string::npos) {
            throw UsageError(path + ":" + std::to_string(line_no) +
                             ": expected key = value");
        }
        apply_kv(trim_ws(line.substr(0, eq)), trim_ws(line.substr(eq + 1)));
    }
}

void RunConfig::apply_preset(const std::string& name) {
    auto kv = [this](const char* k, const char* v) { apply_kv(k, v); };
    if (name == "desk" || name == "overfit") {
        kv("data.source", "synthetic");
        kv("data.sensors", "4");
        kv("data.days", "30");
        kv("data.seed", "42");
        kv("data.start", "2012-03-01");
        kv("model.kind", "trafformer");
        kv("model.mode", "default");
        kv("model.d_model", "32");
        kv("model.embed_dim", "64");
        kv("model.n_heads", "4");
        kv("model.n_layers", "1");
        kv("model.ff_width", "64");
        kv("train.max_epochs", "50");
        kv("train.patience", "2");
        kv("train.batch_size", "8");
        kv("train.base_lr", "0.001");
        kv("train.max_lr", "0.006");
        kv("train.momentum", "0.9");
        kv("train.loss", "mae");
        kv("train.optimizer", "adam");
        kv("seed", "42");
        if (name == "desk") {
            kv("data.noise_std", "2");
            kv("out.dir", "out/desk");
        } else {
            kv("data.noise_std", "0");
            kv("train.target_train_loss", "0.1");
            kv("out.dir", "out/overfit");
        }
    } else {
        throw UsageError("unknown preset '" + name + "' (expected desk|overfit)");
    }
}

std::string RunConfig::to_kv_text() const {
    std::map<std::string, std::string> kv;
    kv["data.source"] = source == DataSourceKind::synthetic ? "synthetic" : "csv";
    kv["data.csv"] = csv_path;
    kv["data.sensors"] = std::to_string(synthetic.n_sensors);
    kv["data.days"] = std::to_string(synthetic.n_days);
    kv["data.noise_std"] = fmt_f64(synthetic.noise_std);
    kv["data.seed"] = std::to_string(synthetic.seed);
    kv["data.start"] = fmt_date(synthetic.start);
    kv["model.kind"] = to_string(model_kind);
    kv["model.mode"] = to_string(model.mode);
    kv["model.d_model"] = std::to_string(model.d_model);
    kv["model.embed_dim"] = std::to_string(model.embed_dim);
    kv["model.n_heads"] = std::to_string(model.n_heads);
    kv["model.n_layers"] = std::to_string(model.n_layers);
    kv["model.ff_width"] = std::to_string(model.ff_width);
    kv["model.dropout"] = fmt_f64(model.dropout);
    kv["model.sinusoidal_positions"] = model.sinusoidal_positions ? "1" : "0";
    kv["model.fnn_widths"] = std::to_string(model.fnn_widths[0]) + "," +
                             std::to_string(model.fnn_widths[1]) + "," +
                             std::to_string(model.fnn_widths[2]);
    kv["model.gru_hidden"] = std::to_string(model.gru_hidden);
    kv["model.gru_layers"] = std::to_string(model.gru_layers);
    kv["model.lstm_hidden"] = std::to_string(model.lstm_hidden);
    kv["model.teacher_forcing"] = model.teacher_forcing ? "1" : "0";
    kv["train.max_epochs"] = std::to_string(train.max_epochs);
    kv["train.patience"] = std::to_string(train.patience);
    kv["train.batch_size"] = std::to_string(train.batch_size);
    kv["train.base_lr"] = fmt_f64(train.base_lr);
    kv["train.max_lr"] = fmt_f64(train.max_lr);
    kv["train.momentum"] = fmt_f64(train.momentum);
    kv["train.loss"] = to_string(train.loss);
    kv["train.optimizer"] = to_string(train.optimizer);
    kv["train.grad_clip"] = fmt_f64(train.grad_clip);
    kv["train.target_train_loss"] =
        train.target_train_loss ? fmt_f64(*train.target_train_loss) : "";
    kv["out.dir"] = out_dir;
    kv["seed"] = std::to_string(seed);

    std::ostringstream os;
    for (const auto& [k, v] : kv) os << k << " = " << v << '\n';
    return os.str();
}

std::string RunConfig::dataset_id() const {
    if (source == DataSourceKind::csv) return "csv:" + csv_path;
    std::ostringstream os;
    os << "synthetic(sensors=" << synthetic.n_sensors << ",days=" << synthetic.n_days
       << ",noise=" << fmt_f64(synthetic.noise_std) << ",seed=" << synthetic.seed
       << ",start=" << fmt_date(synthetic.start) << ")";
    return os.str();
}

std::string RunConfig::resolved_out_dir() const {
    const char* root = std::getenv("TRAFF_OUTPUT_ROOT");
    fs::path p(out_dir);
    if (root && *root && p.is_relative()) return (fs::path(root) / p).string();
    return p.string();
}

// --- pipeline ---

PipelineData build_pipeline(const RunConfig& config) {
    PipelineData data;
    TrafficSeries raw;
    if (config.source == DataSourceKind::csv) {
        if (config.csv_path.empty()) throw UsageError("data.csv is required with data.source=csv");
        raw = load_speed_csv(config.csv_path);
    } else {
        raw = generate_synthetic(config.synthetic);
    }
    data.series = impute_locf(raw);
    data.splits = split_series(data.series.steps);
    data.normalizer = fit_normalizer(data.series, data.splits.train);
    data.train_windows = build_windows(data.series, data.normalizer, data.splits.train);
    data.val_windows = build_windows(data.series, data.normalizer, data.splits.val);
    data.test_windows = build_windows(data.series, data.normalizer, data.splits.test);
    return data;
}

// --- gradient-check suite ---

namespace {

Tensor rand_tensor(Rng& rng, Shape shape, bool requires_grad = true, double scale = 1.0) {
    std::vector<double> v(static_cast<size_t>(shape_size(shape)));
    for (auto& x : v) x = rng.gauss() * scale;
    return Tensor::from_values(std::move(shape), std::move(v), requires_grad);
}

// values bounded away from zero so kinked ops stay differentiable at probes
Tensor rand_tensor_offset(Rng& rng, Shape shape, double min_abs) {
    std::vector<double> v(static_cast<size_t>(shape_size(shape)));
    for (auto& x : v) {
        x = rng.gauss();
        x += x >= 0.0 ? min_abs : -min_abs;
    }
    return Tensor::from_values(std::move(shape), std::move(v), true);
}

Tensor weighted_sum(const Tensor& t, Rng& rng) {
    std::vector<double> w(static_cast<size_t>(t.size()));
    for (auto& x : w) x = rng.uniform(-1.0, 1.0);
    return sum(mul(t, Tensor::from_values(t.shape(), std::move(w))));
}

// A batch with valid index structure and fully observed targets.
Batch synthetic_check_batch(int64_t batch, int64_t sensors, uint64_t seed) {
    Rng rng(seed);
    Batch b;
    b.size = batch;
    b.sensors = sensors;
    const auto n = static_cast<size_t>(batch * kHorizonSteps * sensors);
    b.x_short.resize(n);
    b.x_medium.resize(n);
    b.y_mph.resize(n);
    b.y_mask.assign(n, 1.0);
    for (auto& v : b.x_short) v = rng.gauss();
    for (auto& v : b.x_medium) v = rng.gauss();
    for (auto& v : b.y_mph) v = 45.0 + 10.0 * rng.gauss();
    for (int64_t i = 0; i < batch; ++i) {
        const int64_t anchor = kLookbackSteps + rng.uniform_int(1000);
        b.anchors.push_back(anchor);
        for (int64_t k = 0; k < 12; ++k) {
            const int64_t short_step = anchor - 11 + k;
            const int64_t medium_step = anchor - kLookbackSteps + k * kMediumStride;
            const int64_t target_step = anchor + (k + 1) * kMediumStride;
            b.t_idx_short.push_back(short_step % kSlotsPerDay);
            b.t_idx_medium.push_back(medium_step % kSlotsPerDay);
            b.t_idx_target.push_back(target_step % kSlotsPerDay);
            b.d_idx_short.push_back((short_step / kSlotsPerDay) % 7);
            b.d_idx_medium.push_back((medium_step / kSlotsPerDay) % 7);
            b.d_idx_target.push_back((target_step / kSlotsPerDay) % 7);
        }
    }
    return b;
}

ModelConfig tiny_model_config(int64_t sensors, InputMode mode) {
    ModelConfig cfg;
    cfg.n_sensors = sensors;
    cfg.d_model = 8;
    cfg.n_heads = 4;
    cfg.n_layers = 1;
    cfg.ff_width = 8;
    cfg.embed_dim = 8;
    cfg.mode = mode;
    cfg.fnn_widths = {16, 8, 8};
    cfg.gru_hidden = 8;
    cfg.gru_layers = 2;
    cfg.lstm_hidden = 8;
    return cfg;
}

double model_grad_check(ModelKind kind, InputMode mode, uint64_t seed) {
    const ModelConfig cfg = tiny_model_config(2, mode);
    auto model = make_model(kind, cfg, seed);
    const Batch batch = synthetic_check_batch(2, 2, seed + 17);
    Rng rng(seed + 31);
    const Tensor y = rand_tensor(rng, {2, kHorizonSteps, 2}, false);
    const Tensor mask = Tensor::full({2, kHorizonSteps, 2}, 1.0);

    std::vector<Tensor> inputs;
    for (auto& p : model->params()) inputs.push_back(p.tensor);
    auto f = [&](std::span<const Tensor>) {
        return mae_loss(model->forward(batch, false).y_norm, y, mask);
    };
    GradCheckOptions opts;
    // the narrower step keeps probe intervals clear of relu/abs kinks
    opts.eps = 1e-6;
    opts.max_coords_per_tensor = 16;
    opts.seed = seed;
    return grad_check(f, inputs, opts).max_rel_error;
}

}  // namespace

std::vector<GradCheckCase> gradient_check_suite(bool include_negative_control) {
    std::vector<GradCheckCase> cases;
    constexpr double kOpTol = 1e-4;
    constexpr double kModelTol = 1e-3;
    constexpr int kSeeds = 10;

    auto run_seeds = [&](const std::string& name, double tol,
                         const std::function<double(uint64_t)>& one_seed) {
        GradCheckCase c{name, 0.0, tol, false};
        for (uint64_t s = 0; s < kSeeds; ++s) {
            c.max_rel_error = std::max(c.max_rel_error, one_seed(s));
        }
        c.pass = c.max_rel_error < tol;
        cases.push_back(c);
    };
    auto simple = [&](const std::string& name, double tol,
                      const std::function<Tensor(std::span<const Tensor>, Rng&)>& f,
                      const std::function<std::vector<Tensor>(Rng&)>& make_inputs) {
        run_seeds(name, tol, [&](uint64_t s) {
            Rng rng(splitmix64(s * 1299709 + 7));
            const std::vector<Tensor> inputs = make_inputs(rng);
            Rng wrng(splitmix64(s + 977));
            auto fn = [&](std::span<const Tensor> in) { return f(in, wrng); };
            // weighted-sum weights must be identical across probe calls
            std::vector<Rng> stash;
            auto fn_fixed = [&, weights_seed = splitmix64(s + 977)](std::span<const Tensor> in) {
                Rng wr(weights_seed);
                return f(in, wr);
            };
            (void)fn;
            (void)stash;
            return grad_check(fn_fixed, inputs, {}).max_rel_error;
        });
    };

    simple("matmul", kOpTol,
           [](std::span<const Tensor> in, Rng& w) {
               return weighted_sum(matmul(in[0], in[1]), w);
           },
           [](Rng& r) {
               return std::vector<Tensor>{rand_tensor(r, {3, 4}), rand_tensor(r, {4, 2})};
           });
    simple("bmm", kOpTol,
           [](std::span<const Tensor> in, Rng& w) { return weighted_sum(bmm(in[0], in[1]), w); },
           [](Rng& r) {
               return std::vector<Tensor>{rand_tensor(r, {2, 3, 4}), rand_tensor(r, {2, 4, 2})};
           });
    simple("softmax", kOpTol,
           [](std::span<const Tensor> in, Rng& w) {
               return weighted_sum(softmax(in[0], 1), w);
           },
           [](Rng& r) {
               return std::vector<Tensor>{rand_tensor(r, {3, 5}, true, 2.0)};
           });
    simple("layer_norm", kOpTol,
           [](std::span<const Tensor> in, Rng& w) {
               return weighted_sum(layer_norm(in[0], in[1], in[2], 1e-5), w);
           },
           [](Rng& r) {
               return std::vector<Tensor>{rand_tensor(r, {4, 6}), rand_tensor(r, {6}),
                                          rand_tensor(r, {6})};
           });
    simple("embedding_lookup", kOpTol,
           [](std::span<const Tensor> in, Rng& w) {
               const std::vector<int64_t> idx{0, 2, 2, 4, 1};
               return weighted_sum(embedding_lookup(in[0], idx), w);
           },
           [](Rng& r) { return std::vector<Tensor>{rand_tensor(r, {5, 3})}; });
    simple("add_broadcast", kOpTol,
           [](std::span<const Tensor> in, Rng& w) { return weighted_sum(add(in[0], in[1]), w); },
           [](Rng& r) {
               return std::vector<Tensor>{rand_tensor(r, {3, 4}), rand_tensor(r, {4})};
           });
    simple("sub", kOpTol,
           [](std::span<const Tensor> in, Rng& w) { return weighted_sum(sub(in[0], in[1]), w); },
           [](Rng& r) {
               return std::vector<Tensor>{rand_tensor(r, {2, 3}), rand_tensor(r, {2, 3})};
           });
    simple("mul_broadcast", kOpTol,
           [](std::span<const Tensor> in, Rng& w) { return weighted_sum(mul(in[0], in[1]), w); },
           [](Rng& r) {
               return std::vector<Tensor>{rand_tensor(r, {2, 3, 2}), rand_tensor(r, {3, 2})};
           });
    simple("scale", kOpTol,
           [](std::span<const Tensor> in, Rng& w) { return weighted_sum(scale(in[0], 1.7), w); },
           [](Rng& r) { return std::vector<Tensor>{rand_tensor(r, {2, 5})}; });
    simple("relu", kOpTol,
           [](std::span<const Tensor> in, Rng& w) { return weighted_sum(relu(in[0]), w); },
           [](Rng& r) { return std::vector<Tensor>{rand_tensor_offset(r, {3, 4}, 0.05)}; });
    simple("tanh", kOpTol,
           [](std::span<const Tensor> in, Rng& w) { return weighted_sum(tanh(in[0]), w); },
           [](Rng& r) { return std::vector<Tensor>{rand_tensor(r, {3, 4})}; });
    simple("sigmoid", kOpTol,
           [](std::span<const Tensor> in, Rng& w) { return weighted_sum(sigmoid(in[0]), w); },
           [](Rng& r) { return std::vector<Tensor>{rand_tensor(r, {3, 4})}; });
    simple("abs", kOpTol,
           [](std::span<const Tensor> in, Rng& w) { return weighted_sum(abs(in[0]), w); },
           [](Rng& r) { return std::vector<Tensor>{rand_tensor_offset(r, {3, 4}, 0.05)}; });
    simple("sum", kOpTol,
           [](std::span<const Tensor> in, Rng&) { return sum(in[0]); },
           [](Rng& r) { return std::vector<Tensor>{rand_tensor(r, {2, 3})}; });
    simple("mean", kOpTol,
           [](std::span<const Tensor> in, Rng&) { return mean(in[0]); },
           [](Rng& r) { return std::vector<Tensor>{rand_tensor(r, {2, 3})}; });
    simple("sum_axis", kOpTol,
           [](std::span<const Tensor> in, Rng& w) { return weighted_sum(sum_axis(in[0], 1), w); },
           [](Rng& r) { return std::vector<Tensor>{rand_tensor(r, {2, 3, 2})}; });
    simple("mean_axis", kOpTol,
           [](std::span<const Tensor> in, Rng& w) {
               return weighted_sum(mean_axis(in[0], 1), w);
           },
           [](Rng& r) { return std::vector<Tensor>{rand_tensor(r, {2, 3, 2})}; });
    simple("concat", kOpTol,
           [](std::span<const Tensor> in, Rng& w) {
               const Tensor parts[] = {in[0], in[1]};
               return weighted_sum(concat(parts, 1), w);
           },
           [](Rng& r) {
               return std::vector<Tensor>{rand_tensor(r, {2, 2}), rand_tensor(r, {2, 3})};
           });
    simple("reshape", kOpTol,
           [](std::span<const Tensor> in, Rng& w) {
               return weighted_sum(reshape(in[0], {3, 4}), w);
           },
           [](Rng& r) { return std::vector<Tensor>{rand_tensor(r, {2, 6})}; });
    simple("transpose", kOpTol,
           [](std::span<const Tensor> in, Rng& w) {
               return weighted_sum(transpose(in[0], {2, 0, 1}), w);
           },
           [](Rng& r) { return std::vector<Tensor>{rand_tensor(r, {2, 3, 4})}; });
    simple("mae_loss", kOpTol,
           [](std::span<const Tensor> in, Rng&) {
               std::vector<double> m(12, 1.0);
               m[3] = m[7] = 0.0;
               return mae_loss(in[0], in[1], Tensor::from_values({3, 4}, std::move(m)));
           },
           [](Rng& r) {
               // keep |y_hat - y| away from the |.| kink
               Tensor y_hat = rand_tensor(r, {3, 4});
               Tensor y = add(y_hat, rand_tensor_offset(r, {3, 4}, 0.1));
               return std::vector<Tensor>{y_hat,
                                          Tensor::from_values({3, 4},
                                                              {y.values().begin(),
                                                               y.values().end()},
                                                              true)};
           });
    simple("mse_loss", kOpTol,
           [](std::span<const Tensor> in, Rng&) {
               std::vector<double> m(12, 1.0);
               m[5] = 0.0;
               return mse_loss(in[0], in[1], Tensor::from_values({3, 4}, std::move(m)));
           },
           [](Rng& r) {
               return std::vector<Tensor>{rand_tensor(r, {3, 4}), rand_tensor(r, {3, 4})};
           });

    // encoder block at tiny width: every parameter plus the token input
    simple("st_attention_block", kOpTol,
           [](std::span<const Tensor> in, Rng& w) {
               EncoderLayerParams layer;
               size_t i = 1;
               for (int h = 0; h < 4; ++h) layer.wq.push_back(in[i++]);
               for (int h = 0; h < 4; ++h) layer.wk.push_back(in[i++]);
               for (int h = 0; h < 4; ++h) layer.wv.push_back(in[i++]);
               layer.wo = in[i++];
               layer.bo = in[i++];
               layer.ln1_gain = in[i++];
               layer.ln1_bias = in[i++];
               layer.ff_w1 = in[i++];
               layer.ff_b1 = in[i++];
               layer.ff_w2 = in[i++];
               layer.ff_b2 = in[i++];
               layer.ln2_gain = in[i++];
               layer.ln2_bias = in[i++];
               return weighted_sum(st_attention(in[0], layer, 4, 2), w);
           },
           [](Rng& r) {
               std::vector<Tensor> in;
               in.push_back(rand_tensor(r, {2, 8, 8}, true, 0.5));  // tokens, L=8, S=2
               for (int h = 0; h < 12; ++h) in.push_back(rand_tensor(r, {8, 2}, true, 0.5));
               in.push_back(rand_tensor(r, {8, 8}, true, 0.5));  // wo
               in.push_back(rand_tensor(r, {8}, true, 0.1));     // bo
               in.push_back(rand_tensor_offset(r, {8}, 0.5));    // ln1 gain
               in.push_back(rand_tensor(r, {8}, true, 0.1));
               in.push_back(rand_tensor(r, {8, 8}, true, 0.5));  // ff w1
               in.push_back(rand_tensor(r, {8}, true, 0.1));
               in.push_back(rand_tensor(r, {8, 8}, true, 0.5));  // ff w2
               in.push_back(rand_tensor(r, {8}, true, 0.1));
               in.push_back(rand_tensor_offset(r, {8}, 0.5));    // ln2 gain
               in.push_back(rand_tensor(r, {8}, true, 0.1));
               return in;
           });

    // recurrent cells over short sequences
    simple("gru_cell_5steps", kOpTol,
           [](std::span<const Tensor> in, Rng& w) {
               GruLayerParams p{in[0], in[1], in[2], in[3], in[4],
                                in[5], in[6], in[7], in[8]};
               const std::vector<Tensor> steps(in.begin() + 9, in.end());
               return weighted_sum(run_gru_layer(p, steps, 2, 4).back(), w);
           },
           [](Rng& r) {
               std::vector<Tensor> in;
               in.push_back(rand_tensor(r, {3, 4}));  // wz
               in.push_back(rand_tensor(r, {4, 4}));  // uz
               in.push_back(rand_tensor(r, {4}));     // bz
               in.push_back(rand_tensor(r, {3, 4}));
               in.push_back(rand_tensor(r, {4, 4}));
               in.push_back(rand_tensor(r, {4}));
               in.push_back(rand_tensor(r, {3, 4}));
               in.push_back(rand_tensor(r, {4, 4}));
               in.push_back(rand_tensor(r, {4}));
               for (int t = 0; t < 5; ++t) in.push_back(rand_tensor(r, {2, 3}));
               return in;
           });
    simple("lstm_cell_3steps_h8", kOpTol,
           [](std::span<const Tensor> in, Rng& w) {
               LstmParams p{in[0], in[1], in[2],  in[3], in[4], in[5],
                            in[6], in[7], in[8],  in[9], in[10], in[11]};
               LstmState st = lstm_init_state(2, 8);
               for (size_t t = 12; t < in.size(); ++t) st = lstm_step(p, in[t], st);
               return weighted_sum(st.h, w);
           },
           [](Rng& r) {
               std::vector<Tensor> in;
               for (int g = 0; g < 4; ++g) {
                   in.push_back(rand_tensor(r, {3, 8}));
                   in.push_back(rand_tensor(r, {8, 8}));
                   in.push_back(rand_tensor(r, {8}));
               }
               for (int t = 0; t < 3; ++t) in.push_back(rand_tensor(r, {2, 3}));
               return in;
           });

    // full models end-to-end at the tiny configuration (2 sensors, d_model 8)
    const struct {
        const char* name;
        ModelKind kind;
        InputMode mode;
    } model_cases[] = {
        {"trafformer_default", ModelKind::trafformer, InputMode::standard},
        {"trafformer_hour_only", ModelKind::trafformer, InputMode::hour_only},
        {"trafformer_day_only", ModelKind::trafformer, InputMode::day_only},
        {"trafformer_cyclical", ModelKind::trafformer, InputMode::cyclical},
        {"trafformer_speed_only", ModelKind::trafformer, InputMode::speed_only},
        {"fnn", ModelKind::fnn, InputMode::standard},
        {"gru", ModelKind::gru, InputMode::standard},
        {"seq2seq", ModelKind::seq2seq, InputMode::standard},
    };
    for (const auto& mc : model_cases) {
        GradCheckCase c{mc.name, 0.0, kModelTol, false};
        for (uint64_t s = 0; s < 3; ++s) {
            c.max_rel_error = std::max(c.max_rel_error, model_grad_check(mc.kind, mc.mode, s));
        }
        c.pass = c.max_rel_error < c.tolerance;
        cases.push_back(c);
    }

    if (include_negative_control) {
        // an op whose backward claims d(x^2)/dx = 3x; the suite must catch it
        GradCheckCase c{"negative_control_bad_backward", 0.0, 1e-2, false};
        Rng rng(5);
        const std::vector<Tensor> inputs{rand_tensor_offset(rng, {4}, 0.5)};
        auto f = [](std::span<const Tensor> in) {
            return sum(custom_unary(
                in[0], "buggy_square", [](double x) { return x * x; },
                [](double x) { return 3.0 * x; }));
        };
        c.max_rel_error = grad_check(f, inputs, {}).max_rel_error;
        c.pass = c.max_rel_error < c.tolerance;  // expected: false
        cases.push_back(c);
    }
    return cases;
}

// --- commands ---

namespace {

void write_text_file(const std::string& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write '" + path + "'");
    out << text;
    if (!out) throw DataError("failed writing '" + path + "'");
}

int cmd_generate_data(const SyntheticSpec& spec, const std::string& out_path) {
    if (spec.n_days < 2) throw UsageError("generate-data: need at least 2 days");
    if (spec.n_sensors < 1) throw UsageError("generate-data: need at least 1 sensor");
    const TrafficSeries series = generate_synthetic(spec);
    const fs::path p(out_path);
    if (p.has_parent_path()) fs::create_directories(p.parent_path());
    write_speed_csv(series, out_path);
    std::cout << "wrote " << out_path << " (" << series.steps << " rows, "
              << series.sensors() << " sensors)\n";
    std::cout << "sha256 " << sha256_hex_file(out_path) << "\n";
    return 0;
}

void require_windows(const PipelineData& data, const TrafficSeries& series) {
    if (data.train_windows.empty() || data.val_windows.empty()) {
        throw DataError(
            "the train/validation segments produced no windows; each standalone segment "
            "needs at least " + std::to_string(kMinSegmentSteps) +
            " five-minute steps (series has " + std::to_string(series.steps) +
            " steps; train " + std::to_string(data.splits.train.length()) + ", val " +
            std::to_string(data.splits.val.length()) + ", test " +
            std::to_string(data.splits.test.length()) + ")");
    }
}

int cmd_train(RunConfig config) {
    const std::string out_dir = config.resolved_out_dir();
    fs::create_directories(out_dir);

    PipelineData data = build_pipeline(config);
    require_windows(data, data.series);
    config.model.n_sensors = data.series.sensors();

    const std::string resolved = config.to_kv_text();
    write_text_file(out_dir + "/config.resolved.cfg", resolved);

    auto model = make_model(config.model_kind, config.model, config.seed);
    const TrainHistory history =
        train(*model, data.train_windows, data.val_windows, data.normalizer, config.train);

    save_checkpoint(out_dir + "/checkpoint.bin", *model);
    write_text_file(out_dir + "/history.json", history.to_json());
    {
        // volatile run facts live apart from the deterministic history
        nlohmann::json meta;
        meta["wall_seconds"] = history.wall_seconds;
        meta["config_sha256"] = sha256_hex(resolved);
        meta["dataset_id"] = config.dataset_id();
        write_text_file(out_dir + "/run_meta.json", meta.dump(2) + "\n");
    }
    std::cout << "trained " << to_string(config.model_kind) << " ("
              << to_string(config.model.mode) << ") for " << history.epochs_run
              << " epochs; best epoch " << history.best_epoch << " (val "
              << (history.best_epoch >= 1
                      ? history.epoch_val_loss[static_cast<size_t>(history.best_epoch - 1)]
                      : 0.0)
              << "); stop: " << history.stop_reason << "\n";
    std::cout << "outputs in " << out_dir << "\n";
    return 0;
}

int cmd_evaluate(RunConfig config, const std::string& checkpoint_path, bool with_refs) {
    const std::string out_dir = config.resolved_out_dir();
    fs::create_directories(out_dir);

    PipelineData data = build_pipeline(config);
    if (data.test_windows.empty()) {
        throw DataError("the test segment produced no windows; need at least " +
                        std::to_string(kMinSegmentSteps) + " steps per standalone segment");
    }
    auto model = load_checkpoint(checkpoint_path);
    if (model->config().n_sensors != data.series.sensors()) {
        throw ContractError("checkpoint was trained with " +
                            std::to_string(model->config().n_sensors) +
                            " sensors but the data has " +
                            std::to_string(data.series.sensors()));
    }
    config.model = model->config();
    config.model_kind = model->kind();

    ModelPredictor predictor(*model, data.normalizer);
    EvalMeta meta{config.dataset_id(), sha256_hex(config.to_kv_text())};
    const HorizonReport report =
        evaluate(predictor, data.test_windows, config.train.batch_size, meta);
    write_text_file(out_dir + "/report.json", report.to_json());

    const HorizonReport reports[] = {report};
    std::cout << render_table(reports, with_refs);
    std::cout << "report in " << out_dir << "/report.json\n";
    return 0;
}

int cmd_predict(RunConfig config, const std::string& checkpoint_path, const std::string& day,
                const std::string& sensor_id, const std::string& out_path) {
    DateTime date;
    try {
        date = parse_date(day);
    } catch (const ParseError& e) {
        throw UsageError(std::string("--day: ") + e.what());
    }
    PipelineData data = build_pipeline(config);
    auto model = load_checkpoint(checkpoint_path);
    if (model->config().n_sensors != data.series.sensors()) {
        throw ContractError("checkpoint sensor count does not match the data");
    }
    ModelPredictor predictor(*model, data.normalizer);
    const fs::path p(out_path);
    if (p.has_parent_path()) fs::create_directories(p.parent_path());
    export_trace(predictor, data.series, data.normalizer, data.splits.test, date, sensor_id,
                 out_path);
    std::cout << "wrote " << out_path << "\n";
    return 0;
}

int cmd_gradcheck(bool inject_bug) {
    const auto cases = gradient_check_suite(inject_bug);
    bool all_pass = true;
    std::printf("%-34s %14s %10s  %s\n", "check", "max rel err", "tolerance", "status");
    for (const auto& c : cases) {
        std::printf("%-34s %14.3e %10.0e  %s\n", c.name.c_str(), c.max_rel_error, c.tolerance,
                    c.pass ? "PASS" : "FAIL");
        all_pass = all_pass && c.pass;
    }
    std::printf("%s\n", all_pass ? "all gradient checks passed" : "gradient checks FAILED");
    return all_pass ? 0 : 3;
}

int exception_exit_code(const std::exception& e) {
    if (dynamic_cast<const UsageError*>(&e)) return 1;
    if (dynamic_cast<const NumericError*>(&e)) return 3;
    if (dynamic_cast<const TrainingError*>(&e)) return 3;
    return 2;  // parse/data/shape/index/contract
}

}  // namespace

int run_cli(const std::vector<std::string>& args) {
    CLI::App app{"traff: long-term traffic speed prediction"};
    app.require_subcommand(1);

    // config assembly: defaults -> preset -> file -> flags, last writer wins
    std::string preset, config_file;
    std::vector<std::pair<std::string, std::string>> overrides;
    auto add_common = [&](CLI::App* cmd) {
        cmd->add_option("--preset", preset, "configuration preset (desk|overfit)");
        cmd->add_option("--config", config_file, "flat key=value config file");
        cmd->add_option_function<std::vector<std::string>>(
            "--set",
            [&overrides](const std::vector<std::string>& kvs) {
                for (const auto& kv : kvs) {
                    const size_t eq = kv.find('=');
                    if (eq == std::string::npos) {
                        throw CLI::ValidationError("--set expects key=value, got '" + kv + "'");
                    }
                    overrides.emplace_back(kv.substr(0, eq), kv.substr(eq + 1));
                }
            },
            "config overrides as key=value (repeatable)");
        auto opt = [&](const char* flag, const char* key, const char* help) {
            cmd->add_option_function<std::string>(
                flag,
                [&overrides, key](const std::string& v) { overrides.emplace_back(key, v); },
                help);
        };
        opt("--data-source", "data.source", "synthetic|csv");
        opt("--csv", "data.csv", "input speed CSV path");
        opt("--sensors", "data.sensors", "synthetic: sensor count");
        opt("--days", "data.days", "synthetic: day count");
        opt("--noise-std", "data.noise_std", "synthetic: noise std in mph");
        opt("--data-seed", "data.seed", "synthetic: generator seed");
        opt("--start", "data.start", "synthetic: start date YYYY-MM-DD");
        opt("--model", "model.kind", "trafformer|fnn|gru|seq2seq");
        opt("--mode", "model.mode", "default|hour_only|day_only|cyclical|speed_only");
        opt("--d-model", "model.d_model", "model width");
        opt("--embed-dim", "model.embed_dim", "time/day embedding width");
        opt("--loss", "train.loss", "mae|mse");
        opt("--optimizer", "train.optimizer", "sgd|adam");
        opt("--max-epochs", "train.max_epochs", "epoch cap");
        opt("--patience", "train.patience", "early-stopping patience");
        opt("--batch-size", "train.batch_size", "minibatch size");
        opt("--base-lr", "train.base_lr", "cyclical schedule floor");
        opt("--max-lr", "train.max_lr", "cyclical schedule peak");
        opt("--out", "out.dir", "output directory");
        opt("--seed", "seed", "run seed (init + shuffling)");
    };
    auto resolve_config = [&]() {
        RunConfig config;
        if (!preset.empty()) config.apply_preset(preset);
        if (!config_file.empty()) config.apply_file(config_file);
        for (const auto& [k, v] : overrides) config.apply_kv(k, v);
        return config;
    };

    // generate-data
    auto* gen = app.add_subcommand("generate-data", "write a synthetic speed CSV");
    std::string gen_out = "speeds.csv";
    SyntheticSpec gen_spec;
    std::string gen_start = "2012-03-01";
    gen->add_option("--sensors", gen_spec.n_sensors, "sensor count");
    gen->add_option("--days", gen_spec.n_days, "day count");
    gen->add_option("--noise-std", gen_spec.noise_std, "noise std in mph");
    gen->add_option("--seed", gen_spec.seed, "generator seed");
    gen->add_option("--start", gen_start, "start date YYYY-MM-DD");
    gen->add_option("--out", gen_out, "output CSV path");

    auto* train_cmd = app.add_subcommand("train", "run the training recipe");
    add_common(train_cmd);

    auto* eval_cmd = app.add_subcommand("evaluate", "evaluate a checkpoint on the test split");
    add_common(eval_cmd);
    std::string eval_checkpoint;
    bool with_refs = false;
    eval_cmd->add_option("--checkpoint", eval_checkpoint, "checkpoint path")->required();
    eval_cmd->add_flag("--with-paper-refs", with_refs,
                       "append published reference rows (labeled, not reproduced)");

    auto* predict_cmd = app.add_subcommand("predict", "export a one-day prediction trace CSV");
    add_common(predict_cmd);
    std::string pred_checkpoint, pred_day, pred_sensor, pred_out = "trace.csv";
    predict_cmd->add_option("--checkpoint", pred_checkpoint, "checkpoint path")->required();
    predict_cmd->add_option("--day", pred_day, "target day YYYY-MM-DD")->required();
    predict_cmd->add_option("--sensor", pred_sensor, "sensor id")->required();
    predict_cmd->add_option("--trace-out", pred_out, "output CSV path");

    auto* grad_cmd = app.add_subcommand("gradcheck", "run the gradient-check suite");
    bool inject_bug = false;
    grad_cmd->add_flag("--inject-backward-bug", inject_bug,
                       "test fixture: add a deliberately wrong backward (must fail)");

    std::vector<const char*> argv;
    argv.push_back("traff");
    for (const auto& a : args) argv.push_back(a.c_str());
    try {
        app.parse(static_cast<int>(argv.size()), argv.data());
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 1;
    }

    try {
        if (gen->parsed()) {
            gen_spec.start = parse_date(gen_start);
            return cmd_generate_data(gen_spec, gen_out);
        }
        if (train_cmd->parsed()) return cmd_train(resolve_config());
        if (eval_cmd->parsed()) return cmd_evaluate(resolve_config(), eval_checkpoint, with_refs);
        if (predict_cmd->parsed()) {
            return cmd_predict(resolve_config(), pred_checkpoint, pred_day, pred_sensor,
                               pred_out);
        }
        if (grad_cmd->parsed()) return cmd_gradcheck(inject_bug);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return exception_exit_code(e);
    }
    return 1;
}

}  // namespace traff
