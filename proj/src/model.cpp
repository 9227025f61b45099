#include "traff/model.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>

#include "json.hpp"

namespace traff {

using nlohmann::json;

std::string to_string(ModelKind kind) {
    switch (kind) {
        case ModelKind::trafformer: return "trafformer";
        case ModelKind::fnn: return "fnn";
        case ModelKind::gru: return "gru";
        case ModelKind::seq2seq: return "seq2seq";
    }
    return "?";
}

std::string to_string(InputMode mode) {
    switch (mode) {
        case InputMode::standard: return "default";
        case InputMode::hour_only: return "hour_only";
        case InputMode::day_only: return "day_only";
        case InputMode::cyclical: return "cyclical";
        case InputMode::speed_only: return "speed_only";
    }
    return "?";
}

ModelKind model_kind_from_string(const std::string& s) {
    if (s == "trafformer") return ModelKind::trafformer;
    if (s == "fnn") return ModelKind::fnn;
    if (s == "gru") return ModelKind::gru;
    if (s == "seq2seq") return ModelKind::seq2seq;
    throw UsageError("unknown model kind '" + s +
                     "' (expected trafformer|fnn|gru|seq2seq)");
}

InputMode input_mode_from_string(const std::string& s) {
    if (s == "default") return InputMode::standard;
    if (s == "hour_only") return InputMode::hour_only;
    if (s == "day_only") return InputMode::day_only;
    if (s == "cyclical") return InputMode::cyclical;
    if (s == "speed_only") return InputMode::speed_only;
    throw UsageError("unknown input mode '" + s +
                     "' (expected default|hour_only|day_only|cyclical|speed_only)");
}

CyclicalFeatures cyclical_transform(int64_t x, int64_t max_x) {
    if (max_x <= 0) throw ContractError("cyclical_transform: max_x must be positive");
    if (x < 0 || x >= max_x) {
        throw IndexError("cyclical_transform: value " + std::to_string(x) +
                         " outside [0, " + std::to_string(max_x) + ")");
    }
    const double angle = 2.0 * M_PI * static_cast<double>(x) / static_cast<double>(max_x);
    return {(std::sin(angle) + 1.0) * 0.5, (std::cos(angle) + 1.0) * 0.5};
}

void ModelConfig::validate() const {
    if (n_sensors < 1) throw UsageError("model config: n_sensors must be >= 1");
    if (d_model < 1 || n_heads < 1 || n_layers < 1 || ff_width < 1 || embed_dim < 1) {
        throw UsageError("model config: sizes must be positive");
    }
    if (d_model % n_heads != 0) {
        throw UsageError("model config: d_model " + std::to_string(d_model) +
                         " not divisible by n_heads " + std::to_string(n_heads));
    }
    if (time_slots != kSlotsPerDay || day_slots != 7) {
        throw UsageError("model config: time/day slot counts are fixed at 288 and 7");
    }
    if (horizon_steps != kHorizonSteps) {
        throw UsageError("model config: horizon is fixed at 12 two-hour steps");
    }
    if (dropout < 0.0 || dropout >= 1.0) throw UsageError("model config: dropout must be in [0, 1)");
    if (fnn_widths.size() != 3) throw UsageError("model config: fnn_widths needs 3 entries");
    for (const int64_t w : fnn_widths) {
        if (w < 1) throw UsageError("model config: fnn widths must be positive");
    }
    if (gru_hidden < 1 || gru_layers < 1 || lstm_hidden < 1) {
        throw UsageError("model config: recurrent sizes must be positive");
    }
}

int64_t ModelConfig::window_positions() const {
    return (mode == InputMode::hour_only || mode == InputMode::day_only) ? kShortSteps
                                                                         : kShortSteps * 2;
}

int64_t ModelConfig::token_dim() const {
    return mode == InputMode::cyclical ? 1 + 4 : 1 + 2 * embed_dim;
}

std::vector<double> Prediction::mph(const Normalizer& normalizer) const {
    const auto v = y_norm.values();
    std::vector<double> out(v.size());
    for (size_t i = 0; i < v.size(); ++i) out[i] = normalizer.denormalize(v[i]);
    return out;
}

Tensor embed_time_day(const Tensor& time_table, const Tensor& day_table,
                      std::span<const int64_t> t_idx, std::span<const int64_t> d_idx) {
    if (t_idx.size() != d_idx.size()) {
        throw ShapeError("embed_time_day: index lists differ in length");
    }
    const Tensor te = embedding_lookup(time_table, t_idx);
    const Tensor de = embedding_lookup(day_table, d_idx);
    const Tensor parts[] = {te, de};
    return concat(parts, 1);
}

Tensor* Model::find_param(const std::string& name) {
    for (auto& p : params_) {
        if (p.name == name) return &p.tensor;
    }
    return nullptr;
}

void Model::zero_grads() {
    for (auto& p : params_) p.tensor.reset_grad();
}

Tensor Model::register_param(const std::string& name, Tensor t) {
    params_.push_back({name, t});
    return t;
}

// --- initialization ---

namespace {

Tensor init_linear(Rng& rng, int64_t fan_in, Shape shape) {
    const double bound = std::sqrt(1.0 / static_cast<double>(fan_in));
    std::vector<double> v(static_cast<size_t>(shape_size(shape)));
    for (auto& x : v) x = rng.uniform(-bound, bound);
    return Tensor::from_values(std::move(shape), std::move(v), true);
}

Tensor init_table(Rng& rng, int64_t rows, int64_t dim) {
    std::vector<double> v(static_cast<size_t>(rows * dim));
    for (auto& x : v) x = std::clamp(rng.gauss() * 0.02, -1.0, 1.0);
    return Tensor::from_values({rows, dim}, std::move(v), true);
}

Tensor init_const(Shape shape, double value) {
    return Tensor::full(std::move(shape), value, true);
}

// --- batch -> feature gathering ---

struct StepIndexing {
    int64_t positions = 0;
    std::vector<int64_t> t_idx, d_idx;  // [B * positions]
};

// Step order: short window oldest-first, then medium window oldest-first.
StepIndexing step_indices(const Batch& batch, InputMode mode) {
    const bool use_short = mode != InputMode::day_only;
    const bool use_medium = mode != InputMode::hour_only;
    StepIndexing si;
    si.positions = (use_short ? kShortSteps : 0) + (use_medium ? kMediumSteps : 0);
    si.t_idx.reserve(static_cast<size_t>(batch.size * si.positions));
    si.d_idx.reserve(static_cast<size_t>(batch.size * si.positions));
    for (int64_t b = 0; b < batch.size; ++b) {
        if (use_short) {
            for (int64_t k = 0; k < kShortSteps; ++k) {
                si.t_idx.push_back(batch.t_idx_short[static_cast<size_t>(b * kShortSteps + k)]);
                si.d_idx.push_back(batch.d_idx_short[static_cast<size_t>(b * kShortSteps + k)]);
            }
        }
        if (use_medium) {
            for (int64_t k = 0; k < kMediumSteps; ++k) {
                si.t_idx.push_back(
                    batch.t_idx_medium[static_cast<size_t>(b * kMediumSteps + k)]);
                si.d_idx.push_back(
                    batch.d_idx_medium[static_cast<size_t>(b * kMediumSteps + k)]);
            }
        }
    }
    return si;
}

// Speeds per (sample, position, sensor), sensors innermost.
std::vector<double> token_speeds(const Batch& batch, InputMode mode) {
    const bool use_short = mode != InputMode::day_only;
    const bool use_medium = mode != InputMode::hour_only;
    const int64_t s = batch.sensors;
    std::vector<double> out;
    out.reserve(static_cast<size_t>(batch.size * 24 * s));
    for (int64_t b = 0; b < batch.size; ++b) {
        if (use_short) {
            const size_t base = static_cast<size_t>(b * kShortSteps * s);
            out.insert(out.end(), batch.x_short.begin() + base,
                       batch.x_short.begin() + base + static_cast<size_t>(kShortSteps * s));
        }
        if (use_medium) {
            const size_t base = static_cast<size_t>(b * kMediumSteps * s);
            out.insert(out.end(), batch.x_medium.begin() + base,
                       batch.x_medium.begin() + base + static_cast<size_t>(kMediumSteps * s));
        }
    }
    return out;
}

std::vector<int64_t> expand_per_sensor(std::span<const int64_t> idx, int64_t sensors) {
    std::vector<int64_t> out;
    out.reserve(idx.size() * static_cast<size_t>(sensors));
    for (const int64_t v : idx) {
        for (int64_t s = 0; s < sensors; ++s) out.push_back(v);
    }
    return out;
}

Tensor sinusoidal_position_encoding(int64_t length, int64_t dim) {
    std::vector<double> v(static_cast<size_t>(length * dim));
    for (int64_t p = 0; p < length; ++p) {
        for (int64_t d = 0; d < dim; ++d) {
            const double rate =
                std::pow(10000.0, -2.0 * static_cast<double>(d / 2) / static_cast<double>(dim));
            const double a = static_cast<double>(p) * rate;
            v[static_cast<size_t>(p * dim + d)] = (d % 2 == 0) ? std::sin(a) : std::cos(a);
        }
    }
    return Tensor::from_values({length, dim}, std::move(v));
}

void check_batch(const Batch& batch, const ModelConfig& cfg) {
    if (batch.size < 1) throw ContractError("forward: empty batch");
    if (batch.sensors != cfg.n_sensors) {
        throw ContractError("forward: batch has " + std::to_string(batch.sensors) +
                            " sensors, model expects " + std::to_string(cfg.n_sensors));
    }
}

}  // namespace

// --- encoder block ---

Tensor st_attention(const Tensor& tokens, const EncoderLayerParams& layer, int64_t n_heads,
                    int64_t n_sensors, const DropoutFn& dropout,
                    std::vector<Tensor>* attn_probs) {
    if (tokens.rank() != 3) {
        throw ShapeError("st_attention: expected [batch, length, d_model], got " +
                         shape_str(tokens.shape()));
    }
    const int64_t b = tokens.shape()[0];
    const int64_t len = tokens.shape()[1];
    const int64_t d = tokens.shape()[2];
    if (n_sensors < 1 || len % n_sensors != 0) {
        throw ShapeError("st_attention: sequence length " + std::to_string(len) +
                         " is not a multiple of the sensor count " + std::to_string(n_sensors));
    }
    if (static_cast<int64_t>(layer.wq.size()) != n_heads) {
        throw ContractError("st_attention: head parameter count mismatch");
    }
    const int64_t dh = d / n_heads;
    const double att_scale = 1.0 / std::sqrt(static_cast<double>(dh));

    const Tensor flat = reshape(tokens, {b * len, d});
    // per-head projections run as one matmul each; column blocks are the
    // heads, so the values match head-by-head products exactly. Scaling q up
    // front is algebraically the scaled-score product.
    const Tensor q = scale(matmul(flat, concat(layer.wq, 1)), att_scale);
    const Tensor k = matmul(flat, concat(layer.wk, 1));
    const Tensor v = matmul(flat, concat(layer.wv, 1));
    auto to_heads = [&](const Tensor& t) {  // [B*L, H*Dh] -> [B*H, L, Dh]
        return reshape(transpose(reshape(t, {b, len, n_heads, dh}), {0, 2, 1, 3}),
                       {b * n_heads, len, dh});
    };
    // grouped canonical reductions over the key axis keep the whole block
    // exactly equivariant to sensor permutations within each step
    const Tensor scores = bmm(to_heads(q), transpose(to_heads(k), {0, 2, 1}));
    const Tensor attn = softmax(scores, 2, n_sensors);  // [B*H, L, L]
    if (attn_probs) attn_probs->push_back(attn);
    const Tensor ctx = bmm(attn, to_heads(v), n_sensors);
    const Tensor merged = reshape(
        transpose(reshape(ctx, {b, n_heads, len, dh}), {0, 2, 1, 3}), {b * len, d});
    Tensor attn_out = reshape(add(matmul(merged, layer.wo), layer.bo), {b, len, d});
    if (dropout) attn_out = dropout(attn_out);
    const Tensor x1 =
        layer_norm(add(tokens, attn_out), layer.ln1_gain, layer.ln1_bias, kLayerNormEps);

    const Tensor h1 = relu(add(matmul(reshape(x1, {b * len, d}), layer.ff_w1), layer.ff_b1));
    Tensor h2 = reshape(add(matmul(h1, layer.ff_w2), layer.ff_b2), {b, len, d});
    if (dropout) h2 = dropout(h2);
    return layer_norm(add(x1, h2), layer.ln2_gain, layer.ln2_bias, kLayerNormEps);
}

// --- recurrent cells ---

std::vector<Tensor> run_gru_layer(const GruLayerParams& p, std::span<const Tensor> inputs,
                                  int64_t batch, int64_t hidden) {
    Tensor h = Tensor::zeros({batch, hidden});
    const Tensor ones = Tensor::full({batch, hidden}, 1.0);
    std::vector<Tensor> states;
    states.reserve(inputs.size());
    for (const Tensor& x : inputs) {
        const Tensor z = sigmoid(add(add(matmul(x, p.wz), matmul(h, p.uz)), p.bz));
        const Tensor r = sigmoid(add(add(matmul(x, p.wr), matmul(h, p.ur)), p.br));
        const Tensor c = tanh(add(add(matmul(x, p.wc), matmul(mul(r, h), p.uc)), p.bc));
        h = add(mul(sub(ones, z), h), mul(z, c));
        states.push_back(h);
    }
    return states;
}

LstmState lstm_init_state(int64_t batch, int64_t hidden) {
    return {Tensor::zeros({batch, hidden}), Tensor::zeros({batch, hidden})};
}

LstmState lstm_step(const LstmParams& p, const Tensor& x, const LstmState& state) {
    const Tensor i = sigmoid(add(add(matmul(x, p.wi), matmul(state.h, p.ui)), p.bi));
    const Tensor f = sigmoid(add(add(matmul(x, p.wf), matmul(state.h, p.uf)), p.bf));
    const Tensor o = sigmoid(add(add(matmul(x, p.wo), matmul(state.h, p.uo)), p.bo));
    const Tensor g = tanh(add(add(matmul(x, p.wg), matmul(state.h, p.ug)), p.bg));
    const Tensor c = add(mul(f, state.c), mul(i, g));
    return {mul(o, tanh(c)), c};
}

// --- TrafFormer ---

namespace {

class TrafFormerModel final : public Model {
  public:
    TrafFormerModel(ModelConfig cfg, uint64_t seed)
        : Model(std::move(cfg)), dropout_rng_(splitmix64(seed ^ 0xd509)) {
        Rng rng(seed);
        const int64_t d = config_.d_model;
        const int64_t e = config_.embed_dim;
        const int64_t dh = d / config_.n_heads;
        if (config_.mode != InputMode::cyclical && config_.mode != InputMode::speed_only) {
            time_table_ = register_param("time_table", init_table(rng, config_.time_slots, e));
            day_table_ = register_param("day_table", init_table(rng, config_.day_slots, e));
        }
        const int64_t td = config_.token_dim();
        input_w_ = register_param("input_proj.w", init_linear(rng, td, {td, d}));
        input_b_ = register_param("input_proj.b", init_const({d}, 0.0));
        for (int64_t l = 0; l < config_.n_layers; ++l) {
            const std::string pre = "enc" + std::to_string(l) + ".";
            EncoderLayerParams layer;
            for (int64_t h = 0; h < config_.n_heads; ++h) {
                const std::string hs = std::to_string(h);
                layer.wq.push_back(
                    register_param(pre + "wq" + hs, init_linear(rng, d, {d, dh})));
                layer.wk.push_back(
                    register_param(pre + "wk" + hs, init_linear(rng, d, {d, dh})));
                layer.wv.push_back(
                    register_param(pre + "wv" + hs, init_linear(rng, d, {d, dh})));
            }
            layer.wo = register_param(pre + "wo", init_linear(rng, d, {d, d}));
            layer.bo = register_param(pre + "bo", init_const({d}, 0.0));
            layer.ln1_gain = register_param(pre + "ln1.g", init_const({d}, 1.0));
            layer.ln1_bias = register_param(pre + "ln1.b", init_const({d}, 0.0));
            layer.ff_w1 =
                register_param(pre + "ff.w1", init_linear(rng, d, {d, config_.ff_width}));
            layer.ff_b1 = register_param(pre + "ff.b1", init_const({config_.ff_width}, 0.0));
            layer.ff_w2 = register_param(pre + "ff.w2",
                                         init_linear(rng, config_.ff_width,
                                                     {config_.ff_width, d}));
            layer.ff_b2 = register_param(pre + "ff.b2", init_const({d}, 0.0));
            layer.ln2_gain = register_param(pre + "ln2.g", init_const({d}, 1.0));
            layer.ln2_bias = register_param(pre + "ln2.b", init_const({d}, 0.0));
            layers_.push_back(std::move(layer));
        }
        head_w_ = register_param("head.w", init_linear(rng, d, {d, config_.horizon_steps}));
        head_b_ = register_param("head.b", init_const({config_.horizon_steps}, 0.0));
    }

    ModelKind kind() const override { return ModelKind::trafformer; }

    // Token per (window step, sensor): [speed | time embed | day embed],
    // projected to d_model. Flat order: steps outermost, sensors innermost.
    Tensor assemble(const Batch& batch) {
        check_batch(batch, config_);
        const int64_t s = batch.sensors;
        const StepIndexing si = step_indices(batch, config_.mode);
        const int64_t rows = batch.size * si.positions * s;

        std::vector<double> speeds = token_speeds(batch, config_.mode);
        const Tensor speed_col =
            reshape(Tensor::from_values({rows}, std::move(speeds)), {rows, 1});

        Tensor feats;
        if (config_.mode == InputMode::cyclical) {
            std::vector<double> cyc(static_cast<size_t>(rows * 4));
            const auto t_exp = expand_per_sensor(si.t_idx, s);
            const auto d_exp = expand_per_sensor(si.d_idx, s);
            for (int64_t r = 0; r < rows; ++r) {
                const auto tf = cyclical_transform(t_exp[static_cast<size_t>(r)],
                                                   config_.time_slots);
                const auto df =
                    cyclical_transform(d_exp[static_cast<size_t>(r)], config_.day_slots);
                cyc[static_cast<size_t>(r * 4 + 0)] = tf.x_sin;
                cyc[static_cast<size_t>(r * 4 + 1)] = tf.x_cos;
                cyc[static_cast<size_t>(r * 4 + 2)] = df.x_sin;
                cyc[static_cast<size_t>(r * 4 + 3)] = df.x_cos;
            }
            const Tensor cyc_t = Tensor::from_values({rows, 4}, std::move(cyc));
            const Tensor parts[] = {speed_col, cyc_t};
            feats = concat(parts, 1);
        } else if (config_.mode == InputMode::speed_only) {
            const Tensor zeros = Tensor::zeros({rows, 2 * config_.embed_dim});
            const Tensor parts[] = {speed_col, zeros};
            feats = concat(parts, 1);
        } else {
            const auto t_exp = expand_per_sensor(si.t_idx, s);
            const auto d_exp = expand_per_sensor(si.d_idx, s);
            const Tensor emb = embed_time_day(time_table_, day_table_, t_exp, d_exp);
            const Tensor parts[] = {speed_col, emb};
            feats = concat(parts, 1);
        }
        const Tensor proj = add(matmul(feats, input_w_), input_b_);
        Tensor x = reshape(proj, {batch.size, si.positions * s, config_.d_model});
        if (config_.sinusoidal_positions) {
            x = add(x, sinusoidal_position_encoding(si.positions * s, config_.d_model));
        }
        return x;
    }

    Prediction forward(const Batch& batch, bool training) override {
        const Tensor x0 = assemble(batch);
        const DropoutFn drop = make_dropout(training);
        Tensor h = x0;
        for (const auto& layer : layers_) {
            h = st_attention(h, layer, config_.n_heads, config_.n_sensors, drop);
        }
        h = add(h, x0);  // outer residual around the encoder stack
        const int64_t p = config_.window_positions();
        const int64_t s = config_.n_sensors;
        const Tensor grid = reshape(h, {batch.size, p, s, config_.d_model});
        const Tensor pooled = mean_axis(grid, 1);  // [B, S, D]
        const Tensor out =
            add(matmul(reshape(pooled, {batch.size * s, config_.d_model}), head_w_), head_b_);
        const Tensor y = transpose(
            reshape(out, {batch.size, s, config_.horizon_steps}), {0, 2, 1});
        return {y};
    }

    const std::vector<EncoderLayerParams>& layers() const { return layers_; }

  private:
    DropoutFn make_dropout(bool training) {
        if (!training || config_.dropout <= 0.0) return {};
        const double p = config_.dropout;
        return [this, p](const Tensor& t) {
            std::vector<double> m(static_cast<size_t>(t.size()));
            for (auto& v : m) v = dropout_rng_.uniform01() < p ? 0.0 : 1.0 / (1.0 - p);
            return mul(t, Tensor::from_values(t.shape(), std::move(m)));
        };
    }

    Tensor time_table_, day_table_;
    Tensor input_w_, input_b_;
    std::vector<EncoderLayerParams> layers_;
    Tensor head_w_, head_b_;
    Rng dropout_rng_;
};

// --- FNN baseline: per-sensor flattened windows + embeddings ---

class FnnModel final : public Model {
  public:
    FnnModel(ModelConfig cfg, uint64_t seed) : Model(std::move(cfg)) {
        Rng rng(seed);
        const int64_t e = config_.embed_dim;
        time_table_ = register_param("time_table", init_table(rng, config_.time_slots, e));
        day_table_ = register_param("day_table", init_table(rng, config_.day_slots, e));
        const int64_t in_dim = 24 + 24 * 2 * e;
        std::vector<int64_t> dims = {in_dim, config_.fnn_widths[0], config_.fnn_widths[1],
                                     config_.fnn_widths[2], config_.horizon_steps};
        for (size_t l = 0; l + 1 < dims.size(); ++l) {
            const std::string ls = std::to_string(l);
            w_.push_back(register_param(
                "fnn.w" + ls, init_linear(rng, dims[l], {dims[l], dims[l + 1]})));
            b_.push_back(register_param("fnn.b" + ls, init_const({dims[l + 1]}, 0.0)));
        }
    }

    ModelKind kind() const override { return ModelKind::fnn; }

    Prediction forward(const Batch& batch, bool) override {
        check_batch(batch, config_);
        const int64_t bsz = batch.size;
        const int64_t s = batch.sensors;
        const int64_t e = config_.embed_dim;

        const StepIndexing si = step_indices(batch, InputMode::standard);
        const Tensor emb = reshape(embed_time_day(time_table_, day_table_, si.t_idx, si.d_idx),
                                   {bsz, 24 * 2 * e});

        std::vector<int64_t> tile_idx(static_cast<size_t>(bsz * s));
        for (int64_t b = 0; b < bsz; ++b) {
            for (int64_t j = 0; j < s; ++j) tile_idx[static_cast<size_t>(b * s + j)] = b;
        }
        const Tensor emb_tiled = embedding_lookup(emb, tile_idx);  // [B*S, 48E]

        std::vector<double> speeds(static_cast<size_t>(bsz * s * 24));
        for (int64_t b = 0; b < bsz; ++b) {
            for (int64_t j = 0; j < s; ++j) {
                const size_t row = static_cast<size_t>((b * s + j) * 24);
                for (int64_t k = 0; k < kShortSteps; ++k) {
                    speeds[row + static_cast<size_t>(k)] =
                        batch.x_short[static_cast<size_t>((b * kShortSteps + k) * s + j)];
                }
                for (int64_t k = 0; k < kMediumSteps; ++k) {
                    speeds[row + static_cast<size_t>(12 + k)] =
                        batch.x_medium[static_cast<size_t>((b * kMediumSteps + k) * s + j)];
                }
            }
        }
        const Tensor speed_t = Tensor::from_values({bsz * s, 24}, std::move(speeds));
        const Tensor feat_parts[] = {speed_t, emb_tiled};
        Tensor h = concat(feat_parts, 1);
        for (size_t l = 0; l < w_.size(); ++l) {
            h = add(matmul(h, w_[l]), b_[l]);
            if (l + 1 < w_.size()) h = relu(h);
        }
        const Tensor y =
            transpose(reshape(h, {bsz, s, config_.horizon_steps}), {0, 2, 1});
        return {y};
    }

  private:
    Tensor time_table_, day_table_;
    std::vector<Tensor> w_, b_;
};

// --- shared recurrent-input assembly: one feature vector per step ---

std::vector<Tensor> recurrent_step_inputs(const Batch& batch, const Tensor& time_table,
                                          const Tensor& day_table) {
    const int64_t bsz = batch.size;
    const int64_t s = batch.sensors;
    const StepIndexing si = step_indices(batch, InputMode::standard);
    const Tensor emb = embed_time_day(time_table, day_table, si.t_idx, si.d_idx);  // [B*24, 2E]

    std::vector<Tensor> inputs;
    inputs.reserve(24);
    for (int64_t p = 0; p < 24; ++p) {
        std::vector<double> speeds(static_cast<size_t>(bsz * s));
        for (int64_t b = 0; b < bsz; ++b) {
            for (int64_t j = 0; j < s; ++j) {
                const double v =
                    p < kShortSteps
                        ? batch.x_short[static_cast<size_t>((b * kShortSteps + p) * s + j)]
                        : batch.x_medium[static_cast<size_t>(
                              (b * kMediumSteps + (p - kShortSteps)) * s + j)];
                speeds[static_cast<size_t>(b * s + j)] = v;
            }
        }
        std::vector<int64_t> rows(static_cast<size_t>(bsz));
        for (int64_t b = 0; b < bsz; ++b) rows[static_cast<size_t>(b)] = b * 24 + p;
        const Tensor speed_t = Tensor::from_values({bsz, s}, std::move(speeds));
        const Tensor emb_p = embedding_lookup(emb, rows);
        const Tensor parts[] = {speed_t, emb_p};
        inputs.push_back(concat(parts, 1));
    }
    return inputs;
}

// --- stacked GRU baseline ---

class GruModel final : public Model {
  public:
    GruModel(ModelConfig cfg, uint64_t seed) : Model(std::move(cfg)) {
        Rng rng(seed);
        const int64_t e = config_.embed_dim;
        const int64_t h = config_.gru_hidden;
        time_table_ = register_param("time_table", init_table(rng, config_.time_slots, e));
        day_table_ = register_param("day_table", init_table(rng, config_.day_slots, e));
        for (int64_t l = 0; l < config_.gru_layers; ++l) {
            const int64_t in = l == 0 ? config_.n_sensors + 2 * e : h;
            const std::string pre = "gru" + std::to_string(l) + ".";
            GruLayerParams p;
            p.wz = register_param(pre + "wz", init_linear(rng, in, {in, h}));
            p.uz = register_param(pre + "uz", init_linear(rng, h, {h, h}));
            p.bz = register_param(pre + "bz", init_const({h}, 0.0));
            p.wr = register_param(pre + "wr", init_linear(rng, in, {in, h}));
            p.ur = register_param(pre + "ur", init_linear(rng, h, {h, h}));
            p.br = register_param(pre + "br", init_const({h}, 0.0));
            p.wc = register_param(pre + "wc", init_linear(rng, in, {in, h}));
            p.uc = register_param(pre + "uc", init_linear(rng, h, {h, h}));
            p.bc = register_param(pre + "bc", init_const({h}, 0.0));
            layers_.push_back(std::move(p));
        }
        const int64_t out = config_.horizon_steps * config_.n_sensors;
        head_w_ = register_param("head.w", init_linear(rng, h, {h, out}));
        head_b_ = register_param("head.b", init_const({out}, 0.0));
    }

    ModelKind kind() const override { return ModelKind::gru; }

    Prediction forward(const Batch& batch, bool) override {
        check_batch(batch, config_);
        std::vector<Tensor> inputs =
            recurrent_step_inputs(batch, time_table_, day_table_);
        for (const auto& layer : layers_) {
            inputs = run_gru_layer(layer, inputs, batch.size, config_.gru_hidden);
        }
        const Tensor out = add(matmul(inputs.back(), head_w_), head_b_);
        return {reshape(out, {batch.size, config_.horizon_steps, config_.n_sensors})};
    }

  private:
    Tensor time_table_, day_table_;
    std::vector<GruLayerParams> layers_;
    Tensor head_w_, head_b_;
};

// --- seq2seq LSTM baseline ---

class Seq2SeqModel final : public Model {
  public:
    Seq2SeqModel(ModelConfig cfg, uint64_t seed) : Model(std::move(cfg)) {
        Rng rng(seed);
        const int64_t e = config_.embed_dim;
        const int64_t h = config_.lstm_hidden;
        time_table_ = register_param("time_table", init_table(rng, config_.time_slots, e));
        day_table_ = register_param("day_table", init_table(rng, config_.day_slots, e));
        enc_ = make_lstm(rng, "enc.", config_.n_sensors + 2 * e, h);
        dec_ = make_lstm(rng, "dec.", config_.n_sensors, h);
        out_w_ = register_param("dec.out.w",
                                init_linear(rng, h, {h, config_.n_sensors}));
        out_b_ = register_param("dec.out.b", init_const({config_.n_sensors}, 0.0));
    }

    ModelKind kind() const override { return ModelKind::seq2seq; }

    Prediction forward(const Batch& batch, bool) override { return decode(batch, {}); }

    Prediction forward_train(const Batch& batch, std::span<const double> y_norm) override {
        if (config_.teacher_forcing) return decode(batch, y_norm);
        return decode(batch, {});
    }

  private:
    LstmParams make_lstm(Rng& rng, const std::string& pre, int64_t in, int64_t h) {
        LstmParams p;
        auto mk = [&](const char* gate, Tensor LstmParams::*w, Tensor LstmParams::*u,
                      Tensor LstmParams::*b) {
            p.*w = register_param(pre + "w" + gate, init_linear(rng, in, {in, h}));
            p.*u = register_param(pre + "u" + gate, init_linear(rng, h, {h, h}));
            p.*b = register_param(pre + "b" + gate, init_const({h}, 0.0));
        };
        mk("i", &LstmParams::wi, &LstmParams::ui, &LstmParams::bi);
        mk("f", &LstmParams::wf, &LstmParams::uf, &LstmParams::bf);
        mk("o", &LstmParams::wo, &LstmParams::uo, &LstmParams::bo);
        mk("g", &LstmParams::wg, &LstmParams::ug, &LstmParams::bg);
        return p;
    }

    Prediction decode(const Batch& batch, std::span<const double> forced_y_norm) {
        check_batch(batch, config_);
        const int64_t bsz = batch.size;
        const int64_t s = batch.sensors;
        const std::vector<Tensor> inputs =
            recurrent_step_inputs(batch, time_table_, day_table_);
        LstmState state = lstm_init_state(bsz, config_.lstm_hidden);
        for (const Tensor& x : inputs) state = lstm_step(enc_, x, state);

        // seed the decoder with the most recent observed speeds
        std::vector<double> last(static_cast<size_t>(bsz * s));
        for (int64_t b = 0; b < bsz; ++b) {
            for (int64_t j = 0; j < s; ++j) {
                last[static_cast<size_t>(b * s + j)] =
                    batch.x_short[static_cast<size_t>((b * kShortSteps + 11) * s + j)];
            }
        }
        Tensor input = Tensor::from_values({bsz, s}, std::move(last));

        std::vector<Tensor> outs;
        outs.reserve(static_cast<size_t>(config_.horizon_steps));
        for (int64_t k = 0; k < config_.horizon_steps; ++k) {
            state = lstm_step(dec_, input, state);
            const Tensor out_k = add(matmul(state.h, out_w_), out_b_);
            outs.push_back(reshape(out_k, {bsz, 1, s}));
            if (k + 1 < config_.horizon_steps) {
                if (!forced_y_norm.empty()) {
                    std::vector<double> forced(static_cast<size_t>(bsz * s));
                    for (int64_t b = 0; b < bsz; ++b) {
                        for (int64_t j = 0; j < s; ++j) {
                            forced[static_cast<size_t>(b * s + j)] = forced_y_norm[
                                static_cast<size_t>((b * config_.horizon_steps + k) * s + j)];
                        }
                    }
                    input = Tensor::from_values({bsz, s}, std::move(forced));
                } else {
                    input = out_k;  // feed back its own prediction
                }
            }
        }
        return {concat(outs, 1)};
    }

    Tensor time_table_, day_table_;
    LstmParams enc_, dec_;
    Tensor out_w_, out_b_;
};

}  // namespace

std::unique_ptr<Model> make_model(ModelKind kind, const ModelConfig& config, uint64_t seed) {
    config.validate();
    if (kind != ModelKind::trafformer && config.mode != InputMode::standard) {
        throw UsageError("input mode '" + to_string(config.mode) +
                         "' applies to the trafformer model only");
    }
    switch (kind) {
        case ModelKind::trafformer: return std::make_unique<TrafFormerModel>(config, seed);
        case ModelKind::fnn: return std::make_unique<FnnModel>(config, seed);
        case ModelKind::gru: return std::make_unique<GruModel>(config, seed);
        case ModelKind::seq2seq: return std::make_unique<Seq2SeqModel>(config, seed);
    }
    throw UsageError("unknown model kind");
}

// --- checkpoint io ---

namespace {

constexpr char kMagic[9] = "TRAFCKPT";
constexpr uint32_t kVersion = 1;

json config_to_json(const ModelConfig& c) {
    return json{{"n_sensors", c.n_sensors},
                {"d_model", c.d_model},
                {"n_heads", c.n_heads},
                {"n_layers", c.n_layers},
                {"ff_width", c.ff_width},
                {"time_slots", c.time_slots},
                {"day_slots", c.day_slots},
                {"embed_dim", c.embed_dim},
                {"horizon_steps", c.horizon_steps},
                {"dropout", c.dropout},
                {"mode", to_string(c.mode)},
                {"sinusoidal_positions", c.sinusoidal_positions},
                {"fnn_widths", c.fnn_widths},
                {"gru_hidden", c.gru_hidden},
                {"gru_layers", c.gru_layers},
                {"lstm_hidden", c.lstm_hidden},
                {"teacher_forcing", c.teacher_forcing}};
}

ModelConfig config_from_json(const json& j) {
    ModelConfig c;
    c.n_sensors = j.at("n_sensors").get<int64_t>();
    c.d_model = j.at("d_model").get<int64_t>();
    c.n_heads = j.at("n_heads").get<int64_t>();
    c.n_layers = j.at("n_layers").get<int64_t>();
    c.ff_width = j.at("ff_width").get<int64_t>();
    c.time_slots = j.at("time_slots").get<int64_t>();
    c.day_slots = j.at("day_slots").get<int64_t>();
    c.embed_dim = j.at("embed_dim").get<int64_t>();
    c.horizon_steps = j.at("horizon_steps").get<int64_t>();
    c.dropout = j.at("dropout").get<double>();
    c.mode = input_mode_from_string(j.at("mode").get<std::string>());
    c.sinusoidal_positions = j.at("sinusoidal_positions").get<bool>();
    c.fnn_widths = j.at("fnn_widths").get<std::vector<int64_t>>();
    c.gru_hidden = j.at("gru_hidden").get<int64_t>();
    c.gru_layers = j.at("gru_layers").get<int64_t>();
    c.lstm_hidden = j.at("lstm_hidden").get<int64_t>();
    c.teacher_forcing = j.at("teacher_forcing").get<bool>();
    return c;
}

void append_u32le(std::string& buf, uint32_t v) {
    for (int i = 0; i < 4; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void append_f64le(std::string& buf, double v) {
    const uint64_t bits = std::bit_cast<uint64_t>(v);
    for (int i = 0; i < 8; ++i) buf.push_back(static_cast<char>((bits >> (8 * i)) & 0xff));
}

uint32_t read_u32le(const std::string& buf, size_t pos) {
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) {
        v |= static_cast<uint32_t>(static_cast<unsigned char>(buf[pos + i])) << (8 * i);
    }
    return v;
}

double read_f64le(const std::string& buf, size_t pos) {
    uint64_t bits = 0;
    for (int i = 0; i < 8; ++i) {
        bits |= static_cast<uint64_t>(static_cast<unsigned char>(buf[pos + i])) << (8 * i);
    }
    return std::bit_cast<double>(bits);
}

}  // namespace

void save_checkpoint(const std::string& path, const Model& model) {
    json manifest;
    manifest["format"] = "traff-checkpoint";
    manifest["version"] = kVersion;
    manifest["kind"] = to_string(model.kind());
    manifest["config"] = config_to_json(model.config());
    json params = json::array();
    for (const auto& p : model.params()) {
        params.push_back(json{{"name", p.name}, {"shape", p.tensor.shape()}});
    }
    manifest["params"] = params;
    const std::string header = manifest.dump();

    std::string buf;
    buf.append(kMagic, 8);
    append_u32le(buf, static_cast<uint32_t>(header.size()));
    buf.append(header);
    for (const auto& p : model.params()) {
        for (const double v : p.tensor.values()) append_f64le(buf, v);
    }
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write checkpoint '" + path + "'");
    out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (!out) throw DataError("failed writing checkpoint '" + path + "'");
}

std::unique_ptr<Model> load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open checkpoint '" + path + "'");
    std::string buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (buf.size() < 12 || buf.compare(0, 8, kMagic, 8) != 0) {
        throw ParseError("'" + path + "' is not a traff checkpoint");
    }
    const uint32_t hlen = read_u32le(buf, 8);
    if (buf.size() < 12 + hlen) throw ParseError("checkpoint header truncated");
    json manifest;
    try {
        manifest = json::parse(buf.substr(12, hlen));
    } catch (const json::exception& e) {
        throw ParseError(std::string("checkpoint manifest: ") + e.what());
    }
    if (manifest.value("version", 0u) != kVersion) {
        throw ParseError("unsupported checkpoint version");
    }
    const ModelKind kind = model_kind_from_string(manifest.at("kind").get<std::string>());
    const ModelConfig config = config_from_json(manifest.at("config"));
    auto model = make_model(kind, config, 0);

    const json& params = manifest.at("params");
    if (params.size() != model->params().size()) {
        throw ContractError("checkpoint has " + std::to_string(params.size()) +
                            " parameters, model expects " +
                            std::to_string(model->params().size()));
    }
    size_t pos = 12 + hlen;
    for (size_t i = 0; i < model->params().size(); ++i) {
        auto& p = model->params()[i];
        const std::string name = params[i].at("name").get<std::string>();
        const auto shape = params[i].at("shape").get<Shape>();
        if (name != p.name || shape != p.tensor.shape()) {
            throw ContractError("checkpoint parameter '" + name + "' with shape " +
                                shape_str(shape) + " does not match model parameter '" +
                                p.name + "' " + shape_str(p.tensor.shape()));
        }
        auto dst = p.tensor.values_mut();
        if (pos + dst.size() * 8 > buf.size()) throw ParseError("checkpoint payload truncated");
        for (size_t k = 0; k < dst.size(); ++k) {
            dst[k] = read_f64le(buf, pos);
            pos += 8;
        }
    }
    if (pos != buf.size()) throw ParseError("checkpoint has trailing bytes");
    return model;
}

}  // namespace traff
