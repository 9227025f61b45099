#pragma once

// The TrafFormer network and the three general baselines (FNN, stacked GRU,
// seq2seq LSTM), all built on the tensor module: time/day embedding lookup,
// joint spatio-temporal token assembly, multi-head attention encoder with an
// outer residual, and a shared per-sensor prediction head.

#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "traff/data.hpp"
#include "traff/tensor.hpp"

namespace traff {

enum class ModelKind { trafformer, fnn, gru, seq2seq };
enum class InputMode { standard, hour_only, day_only, cyclical, speed_only };

std::string to_string(ModelKind kind);
std::string to_string(InputMode mode);
ModelKind model_kind_from_string(const std::string& s);   // UsageError on unknown
InputMode input_mode_from_string(const std::string& s);   // UsageError on unknown

// Static sin/cos encoding of a periodic index, both components in [0, 1].
struct CyclicalFeatures {
    double x_sin = 0.0;
    double x_cos = 0.0;
};
CyclicalFeatures cyclical_transform(int64_t x, int64_t max_x);

// Per step: [time_table[t_idx] | day_table[d_idx]] -> [steps, 2 * embed_dim].
// Gradients scatter back into exactly the referenced table rows.
Tensor embed_time_day(const Tensor& time_table, const Tensor& day_table,
                      std::span<const int64_t> t_idx, std::span<const int64_t> d_idx);

struct ModelConfig {
    int64_t n_sensors = 0;
    int64_t d_model = 64;
    int64_t n_heads = 4;
    int64_t n_layers = 1;
    int64_t ff_width = 64;
    int64_t time_slots = 288;
    int64_t day_slots = 7;
    int64_t embed_dim = 64;
    int64_t horizon_steps = 12;
    double dropout = 0.0;
    InputMode mode = InputMode::standard;
    bool sinusoidal_positions = false;  // time/day embeddings already carry position
    // baseline layer sizes
    std::vector<int64_t> fnn_widths{256, 64, 16};
    int64_t gru_hidden = 128;
    int64_t gru_layers = 2;
    int64_t lstm_hidden = 64;
    bool teacher_forcing = false;

    void validate() const;
    // steps entering the token sequence under the input mode
    int64_t window_positions() const;
    // per-token feature width before the input projection
    int64_t token_dim() const;
};

struct Param {
    std::string name;
    Tensor tensor;
};

struct Prediction {
    Tensor y_norm;  // [B, horizon, S], normalized units, graph-connected
    std::vector<double> mph(const Normalizer& normalizer) const;
};

class Model {
  public:
    virtual ~Model() = default;

    virtual ModelKind kind() const = 0;
    virtual Prediction forward(const Batch& batch, bool training = false) = 0;

    // Training-time forward; seq2seq overrides this to honor teacher forcing.
    virtual Prediction forward_train(const Batch& batch, std::span<const double> y_norm) {
        (void)y_norm;
        return forward(batch, true);
    }

    const ModelConfig& config() const { return config_; }
    std::vector<Param>& params() { return params_; }
    const std::vector<Param>& params() const { return params_; }
    Tensor* find_param(const std::string& name);
    void zero_grads();

  protected:
    explicit Model(ModelConfig config) : config_(std::move(config)) {}
    Tensor register_param(const std::string& name, Tensor t);

    ModelConfig config_;
    std::vector<Param> params_;
};

// Weights ~ uniform(+-sqrt(1/fan_in)), embedding tables ~ N(0, 0.02^2)
// clipped to [-1, 1], biases and layer-norm offsets zero, gains one.
// Deterministic per seed.
std::unique_ptr<Model> make_model(ModelKind kind, const ModelConfig& config, uint64_t seed);

// --- reusable blocks (also the gradient-check entry points) ---

struct EncoderLayerParams {
    std::vector<Tensor> wq, wk, wv;  // per head, [D, D/heads]
    Tensor wo, bo;                   // [D, D], [D]
    Tensor ln1_gain, ln1_bias;
    Tensor ff_w1, ff_b1, ff_w2, ff_b2;
    Tensor ln2_gain, ln2_bias;
};

inline constexpr double kLayerNormEps = 1e-5;

using DropoutFn = std::function<Tensor(const Tensor&)>;

// Full-sequence multi-head self-attention over the joint (step, sensor)
// tokens followed by add-&-norm, position-wise feed-forward, add-&-norm.
// Sequence length must be a multiple of n_sensors. If attn_probs is given,
// the attention matrix [B*heads, L, L] is appended per layer call.
Tensor st_attention(const Tensor& tokens, const EncoderLayerParams& layer, int64_t n_heads,
                    int64_t n_sensors, const DropoutFn& dropout = {},
                    std::vector<Tensor>* attn_probs = nullptr);

struct GruLayerParams {
    Tensor wz, uz, bz;  // update gate
    Tensor wr, ur, br;  // reset gate
    Tensor wc, uc, bc;  // candidate
};

// Returns the hidden state after each input step; h0 is all zeros.
std::vector<Tensor> run_gru_layer(const GruLayerParams& p, std::span<const Tensor> inputs,
                                  int64_t batch, int64_t hidden);

struct LstmParams {
    Tensor wi, ui, bi;
    Tensor wf, uf, bf;
    Tensor wo, uo, bo;
    Tensor wg, ug, bg;
};

struct LstmState {
    Tensor h, c;
};

LstmState lstm_init_state(int64_t batch, int64_t hidden);
LstmState lstm_step(const LstmParams& p, const Tensor& x, const LstmState& state);

// --- checkpointing ---
// Binary container: magic, JSON manifest (model kind, config, named shapes),
// then all parameter payloads as little-endian float64 in manifest order.

void save_checkpoint(const std::string& path, const Model& model);
std::unique_ptr<Model> load_checkpoint(const std::string& path);

}  // namespace traff
