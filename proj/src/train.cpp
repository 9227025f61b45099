#include "traff/train.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <iostream>

#include "json.hpp"

namespace traff {

std::string to_string(LossKind loss) { return loss == LossKind::mae ? "mae" : "mse"; }

LossKind loss_kind_from_string(const std::string& s) {
    if (s == "mae") return LossKind::mae;
    if (s == "mse") return LossKind::mse;
    throw UsageError("unknown loss '" + s + "' (expected mae|mse)");
}

std::string to_string(OptimizerKind opt) { return opt == OptimizerKind::sgd ? "sgd" : "adam"; }

OptimizerKind optimizer_kind_from_string(const std::string& s) {
    if (s == "sgd") return OptimizerKind::sgd;
    if (s == "adam") return OptimizerKind::adam;
    throw UsageError("unknown optimizer '" + s + "' (expected sgd|adam)");
}

// --- losses ---

namespace {

double mask_count(const Tensor& mask) {
    double n = 0.0;
    for (const double m : mask.values()) n += m;
    return n;
}

void check_loss_shapes(const Tensor& y_hat, const Tensor& y, const Tensor& y_mask,
                       const char* name) {
    if (y_hat.shape() != y.shape() || y.shape() != y_mask.shape()) {
        throw ShapeError(std::string(name) + ": shapes " + shape_str(y_hat.shape()) + ", " +
                         shape_str(y.shape()) + ", " + shape_str(y_mask.shape()) +
                         " must match");
    }
}

}  // namespace

Tensor mae_loss(const Tensor& y_hat, const Tensor& y, const Tensor& y_mask) {
    check_loss_shapes(y_hat, y, y_mask, "mae_loss");
    const double n = mask_count(y_mask);
    if (n <= 0.0) throw DataError("mae_loss: every target in the batch is masked out");
    return scale(sum(mul(abs(sub(y_hat, y)), y_mask)), 1.0 / n);
}

Tensor mse_loss(const Tensor& y_hat, const Tensor& y, const Tensor& y_mask) {
    check_loss_shapes(y_hat, y, y_mask, "mse_loss");
    const double n = mask_count(y_mask);
    if (n <= 0.0) throw DataError("mse_loss: every target in the batch is masked out");
    const Tensor diff = sub(y_hat, y);
    return scale(sum(mul(mul(diff, diff), y_mask)), 1.0 / n);
}

// --- schedule ---

double triangular2_lr(int64_t iteration, double base_lr, double max_lr, int64_t step_size) {
    if (iteration < 0) throw ContractError("triangular2_lr: iteration must be >= 0");
    if (step_size < 1) throw ContractError("triangular2_lr: step_size must be >= 1");
    const double it = static_cast<double>(iteration);
    const double ss = static_cast<double>(step_size);
    const double cycle = std::floor(1.0 + it / (2.0 * ss));
    const double x = std::fabs(it / ss - 2.0 * cycle + 1.0);
    return base_lr + (max_lr - base_lr) * std::max(0.0, 1.0 - x) /
                         std::pow(2.0, cycle - 1.0);
}

// --- optimizers ---

namespace {

double global_grad_norm(const std::vector<Param>& params) {
    double ss = 0.0;
    for (const auto& p : params) {
        for (const double g : p.tensor.grad()) ss += g * g;
    }
    return std::sqrt(ss);
}

void require_grads(const std::vector<Param>& params) {
    for (const auto& p : params) {
        if (!p.tensor.has_grad()) {
            throw ContractError("optimizer: parameter '" + p.name + "' has no gradient");
        }
    }
}

}  // namespace

void SgdMomentum::step(std::vector<Param>& params, double lr, double grad_clip) {
    require_grads(params);
    if (velocity_.empty()) {
        for (const auto& p : params) {
            velocity_.emplace_back(static_cast<size_t>(p.tensor.size()), 0.0);
        }
    }
    double clip_scale = 1.0;
    if (grad_clip > 0.0) {
        const double norm = global_grad_norm(params);
        if (norm > grad_clip) clip_scale = grad_clip / norm;
    }
    for (size_t i = 0; i < params.size(); ++i) {
        auto v = params[i].tensor.values_mut();
        const auto g = params[i].tensor.grad();
        auto& vel = velocity_[i];
        for (size_t k = 0; k < v.size(); ++k) {
            vel[k] = momentum_ * vel[k] + g[k] * clip_scale;
            v[k] -= lr * vel[k];
        }
        params[i].tensor.reset_grad();
    }
}

void Adam::step(std::vector<Param>& params, double lr, double grad_clip) {
    require_grads(params);
    if (m_.empty()) {
        for (const auto& p : params) {
            m_.emplace_back(static_cast<size_t>(p.tensor.size()), 0.0);
            v_.emplace_back(static_cast<size_t>(p.tensor.size()), 0.0);
        }
    }
    double clip_scale = 1.0;
    if (grad_clip > 0.0) {
        const double norm = global_grad_norm(params);
        if (norm > grad_clip) clip_scale = grad_clip / norm;
    }
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (size_t i = 0; i < params.size(); ++i) {
        auto vals = params[i].tensor.values_mut();
        const auto g = params[i].tensor.grad();
        for (size_t k = 0; k < vals.size(); ++k) {
            const double gk = g[k] * clip_scale;
            m_[i][k] = beta1_ * m_[i][k] + (1.0 - beta1_) * gk;
            v_[i][k] = beta2_ * v_[i][k] + (1.0 - beta2_) * gk * gk;
            vals[k] -= lr * (m_[i][k] / bc1) / (std::sqrt(v_[i][k] / bc2) + eps_);
        }
        params[i].tensor.reset_grad();
    }
}

// --- early stopping ---

EarlyStopper::EarlyStopper(int64_t patience) : patience_(patience) {
    if (patience < 1) throw ContractError("EarlyStopper: patience must be >= 1");
}

bool EarlyStopper::observe(double val_loss) {
    ++epoch_;
    // strict improvement; a tie counts as non-decrease
    if (epoch_ == 1 || val_loss < best_loss_) {
        best_loss_ = val_loss;
        best_epoch_ = epoch_;
        bad_epochs_ = 0;
        improved_last_ = true;
        return false;
    }
    improved_last_ = false;
    ++bad_epochs_;
    return bad_epochs_ >= patience_;
}

// --- training loop ---

void TrainConfig::validate() const {
    if (max_epochs < 1) throw UsageError("train config: max_epochs must be >= 1");
    if (patience < 1) throw UsageError("train config: patience must be >= 1");
    if (batch_size < 1) throw UsageError("train config: batch_size must be >= 1");
    if (!(base_lr > 0.0) || !(max_lr > base_lr)) {
        throw UsageError("train config: need 0 < base_lr < max_lr");
    }
    if (momentum < 0.0 || momentum >= 1.0) {
        throw UsageError("train config: momentum must be in [0, 1)");
    }
    if (grad_clip < 0.0) throw UsageError("train config: grad_clip must be >= 0");
    if (target_train_loss && !(*target_train_loss > 0.0)) {
        throw UsageError("train config: target_train_loss must be positive");
    }
}

namespace {

struct MaskedTargets {
    std::vector<double> y_norm;
    Tensor y_norm_t;
    Tensor mask_t;
};

MaskedTargets batch_targets(const Batch& batch, const Normalizer& normalizer) {
    MaskedTargets t;
    t.y_norm.resize(batch.y_mph.size());
    for (size_t i = 0; i < batch.y_mph.size(); ++i) {
        t.y_norm[i] = normalizer.normalize(batch.y_mph[i]);
    }
    const Shape shape{batch.size, kHorizonSteps, batch.sensors};
    t.y_norm_t = Tensor::from_values(shape, t.y_norm);
    t.mask_t = Tensor::from_values(shape, batch.y_mask);
    return t;
}

std::vector<std::vector<double>> snapshot_params(const std::vector<Param>& params) {
    std::vector<std::vector<double>> snap;
    snap.reserve(params.size());
    for (const auto& p : params) {
        const auto v = p.tensor.values();
        snap.emplace_back(v.begin(), v.end());
    }
    return snap;
}

void restore_params(std::vector<Param>& params, const std::vector<std::vector<double>>& snap) {
    for (size_t i = 0; i < params.size(); ++i) {
        auto v = params[i].tensor.values_mut();
        std::copy(snap[i].begin(), snap[i].end(), v.begin());
    }
}

uint64_t epoch_shuffle_seed(uint64_t seed, int64_t epoch) {
    return splitmix64(seed ^ (static_cast<uint64_t>(epoch) * 0x9e3779b97f4a7c15ULL));
}

}  // namespace

double masked_mae_norm(Model& model, std::span<const WindowSample> samples,
                       const Normalizer& normalizer, int64_t batch_size) {
    if (samples.empty()) throw DataError("masked_mae_norm: no samples");
    double total = 0.0;
    double count = 0.0;
    for (const Batch& batch : make_batches_ordered(samples, batch_size)) {
        const Prediction pred = model.forward(batch, false);
        const auto y_hat = pred.y_norm.values();
        for (size_t i = 0; i < batch.y_mph.size(); ++i) {
            if (batch.y_mask[i] > 0.0) {
                total += std::fabs(y_hat[i] - normalizer.normalize(batch.y_mph[i]));
                count += 1.0;
            }
        }
    }
    if (count <= 0.0) throw DataError("masked_mae_norm: every target is masked out");
    return total / count;
}

TrainHistory train(Model& model, std::span<const WindowSample> train_samples,
                   std::span<const WindowSample> val_samples, const Normalizer& normalizer,
                   const TrainConfig& config) {
    config.validate();
    if (train_samples.empty()) throw DataError("train: empty training sample set");
    if (val_samples.empty()) throw DataError("train: empty validation sample set");

    const auto t_start = std::chrono::steady_clock::now();
    const int64_t n_batches =
        (static_cast<int64_t>(train_samples.size()) + config.batch_size - 1) /
        config.batch_size;

    TrainHistory history;
    history.schedule_step_size = 2 * n_batches;

    SgdMomentum sgd(config.momentum);
    Adam adam;
    EarlyStopper stopper(config.patience);
    std::vector<std::vector<double>> best_snapshot = snapshot_params(model.params());

    int64_t iteration = 0;
    for (int64_t epoch = 1; epoch <= config.max_epochs; ++epoch) {
        const auto batches = make_batches(train_samples, config.batch_size,
                                          epoch_shuffle_seed(config.seed, epoch));
        double epoch_loss_sum = 0.0;
        for (const Batch& batch : batches) {
            const double lr = triangular2_lr(iteration, config.base_lr, config.max_lr,
                                             history.schedule_step_size);
            double loss_value = 0.0;
            try {
                model.zero_grads();
                const MaskedTargets targets = batch_targets(batch, normalizer);
                const Prediction pred = model.forward_train(batch, targets.y_norm);
                const Tensor loss = config.loss == LossKind::mae
                                        ? mae_loss(pred.y_norm, targets.y_norm_t, targets.mask_t)
                                        : mse_loss(pred.y_norm, targets.y_norm_t, targets.mask_t);
                loss_value = loss.item();
                if (!std::isfinite(loss_value)) {
                    throw TrainingError("training diverged: non-finite loss", iteration);
                }
                backward(loss);
                if (config.optimizer == OptimizerKind::sgd) {
                    sgd.step(model.params(), lr, config.grad_clip);
                } else {
                    adam.step(model.params(), lr, config.grad_clip);
                }
            } catch (const NumericError& e) {
                throw TrainingError(std::string("training diverged: ") + e.what(), iteration);
            }
            history.iteration_lr.push_back(lr);
            history.iteration_loss.push_back(loss_value);
            epoch_loss_sum += loss_value;
            ++iteration;
        }
        const double train_loss = epoch_loss_sum / static_cast<double>(batches.size());
        const double val_loss =
            masked_mae_norm(model, val_samples, normalizer, config.batch_size);
        history.epoch_train_loss.push_back(train_loss);
        history.epoch_val_loss.push_back(val_loss);
        history.epochs_run = epoch;

        std::fprintf(stderr, "epoch %lld/%lld  train %.6f  val %.6f  lr %.6g\n",
                     static_cast<long long>(epoch), static_cast<long long>(config.max_epochs),
                     train_loss, val_loss,
                     history.iteration_lr.empty() ? 0.0 : history.iteration_lr.back());

        const bool stop = stopper.observe(val_loss);
        if (stopper.improved_last()) best_snapshot = snapshot_params(model.params());
        if (stop) {
            history.stop_reason = "early_stop";
            break;
        }
        if (config.target_train_loss && train_loss < *config.target_train_loss) {
            history.stop_reason = "target_train_loss";
            break;
        }
    }
    if (history.stop_reason.empty()) history.stop_reason = "max_epochs";
    history.best_epoch = stopper.best_epoch();
    restore_params(model.params(), best_snapshot);

    history.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
    return history;
}

std::string TrainHistory::to_json() const {
    nlohmann::json j;
    j["format"] = "traff-train-history";
    j["version"] = 1;
    j["schedule"] = {{"mode", "triangular2"}, {"step_size", schedule_step_size}};
    j["iterations"] = {{"lr", iteration_lr}, {"loss", iteration_loss}};
    j["epochs"] = {{"train_loss", epoch_train_loss}, {"val_loss", epoch_val_loss}};
    j["best_epoch"] = best_epoch;
    j["epochs_run"] = epochs_run;
    j["stop_reason"] = stop_reason;
    return j.dump(2) + "\n";
}

}  // namespace traff
