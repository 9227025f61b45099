#pragma once

// Masked losses, triangular2 cyclical learning-rate schedule, optimizers,
// early stopping, and the deterministic epoch loop.

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "traff/data.hpp"
#include "traff/model.hpp"
#include "traff/tensor.hpp"

namespace traff {

enum class LossKind { mae, mse };
enum class OptimizerKind { sgd, adam };

std::string to_string(LossKind loss);
LossKind loss_kind_from_string(const std::string& s);
std::string to_string(OptimizerKind opt);
OptimizerKind optimizer_kind_from_string(const std::string& s);

// Mean absolute / squared error over mask-true entries only. All shapes must
// match; an all-masked batch is a data error. Training losses run in
// normalized units.
Tensor mae_loss(const Tensor& y_hat, const Tensor& y, const Tensor& y_mask);
Tensor mse_loss(const Tensor& y_hat, const Tensor& y, const Tensor& y_mask);

// Smith's cyclical schedule, 'triangular2' variant: a triangle wave between
// base_lr and max_lr whose amplitude halves every cycle of 2*step_size
// iterations.
double triangular2_lr(int64_t iteration, double base_lr, double max_lr, int64_t step_size);

// v <- momentum * v + g ; p <- p - lr * v ; grads cleared afterwards.
class SgdMomentum {
  public:
    explicit SgdMomentum(double momentum) : momentum_(momentum) {}
    void step(std::vector<Param>& params, double lr, double grad_clip = 0.0);

  private:
    double momentum_;
    std::vector<std::vector<double>> velocity_;
};

// Adam with the schedule providing the step size (config-flag alternative).
class Adam {
  public:
    Adam(double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
        : beta1_(beta1), beta2_(beta2), eps_(eps) {}
    void step(std::vector<Param>& params, double lr, double grad_clip = 0.0);

  private:
    double beta1_, beta2_, eps_;
    int64_t t_ = 0;
    std::vector<std::vector<double>> m_, v_;
};

// Stops once the validation loss has failed to strictly improve for
// `patience` consecutive epochs; tracks which epoch held the best value.
class EarlyStopper {
  public:
    explicit EarlyStopper(int64_t patience);

    // Returns true when training should stop after this epoch.
    bool observe(double val_loss);

    bool improved_last() const { return improved_last_; }
    int64_t best_epoch() const { return best_epoch_; }  // 1-based
    double best_loss() const { return best_loss_; }

  private:
    int64_t patience_;
    int64_t epoch_ = 0;
    int64_t bad_epochs_ = 0;
    int64_t best_epoch_ = 0;
    double best_loss_ = 0.0;
    bool improved_last_ = false;
};

struct TrainConfig {
    int64_t max_epochs = 50;
    int64_t patience = 2;
    int64_t batch_size = 64;
    double base_lr = 1e-3;
    double max_lr = 6e-3;
    double momentum = 0.9;
    LossKind loss = LossKind::mae;
    OptimizerKind optimizer = OptimizerKind::sgd;
    double grad_clip = 0.0;  // 0 = off
    uint64_t seed = 42;
    // Optional convergence target on the epoch training loss; mainly for
    // overfitting experiments.
    std::optional<double> target_train_loss;

    void validate() const;
};

struct TrainHistory {
    std::vector<double> iteration_lr;
    std::vector<double> iteration_loss;
    std::vector<double> epoch_train_loss;
    std::vector<double> epoch_val_loss;
    int64_t schedule_step_size = 0;
    int64_t best_epoch = 0;   // 1-based
    int64_t epochs_run = 0;
    std::string stop_reason;  // "early_stop" | "max_epochs" | "target_train_loss"
    double wall_seconds = 0.0;  // volatile; excluded from the canonical JSON

    // Deterministic for identical runs; wall time is reported separately so
    // two same-seed runs serialize byte-identically.
    std::string to_json() const;
};

// Runs the full recipe: per-seed shuffled minibatches, schedule-driven LR,
// masked loss in normalized units, per-epoch validation MAE, early stopping,
// and restoration of the best-validation parameters into the model.
// Progress lines (epoch, train loss, val loss, lr) go to stderr.
TrainHistory train(Model& model, std::span<const WindowSample> train_samples,
                   std::span<const WindowSample> val_samples, const Normalizer& normalizer,
                   const TrainConfig& config);

// Masked MAE in normalized units over a sample set (the validation metric).
double masked_mae_norm(Model& model, std::span<const WindowSample> samples,
                       const Normalizer& normalizer, int64_t batch_size);

}  // namespace traff
