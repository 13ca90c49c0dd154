#pragma once

#include <functional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "petformer/data.hpp"
#include "petformer/forecaster.hpp"

namespace petformer {

enum class LossKind { kSmoothL1, kL2, kL1 };
std::string to_string(LossKind kind);
/// "smooth_l1" | "l2" | "l1".
LossKind parse_loss_kind(std::string_view text);

/// Mean over all elements of 0.5 r^2 (|r| < 1) or |r| - 0.5, r = target - pred.
Tensor smooth_l1_loss(const Tensor& target, const Tensor& pred);
Tensor l2_loss(const Tensor& target, const Tensor& pred);
Tensor l1_loss(const Tensor& target, const Tensor& pred);
Tensor compute_loss(LossKind kind, const Tensor& target, const Tensor& pred);

double mse(std::span<const double> target, std::span<const double> pred);
double mae(std::span<const double> target, std::span<const double> pred);

struct Metrics {
  double mse = 0.0;
  double mae = 0.0;
  std::size_t n = 0;  // forecast windows scored
};

/// Adam with bias correction. Parameters without a gradient are treated as
/// having a zero gradient.
class Adam {
 public:
  Adam(std::vector<nn::NamedTensor> params, double lr, double beta1 = 0.9, double beta2 = 0.999,
       double eps = 1e-8);

  /// Throws DivergenceError naming the first parameter with a non-finite
  /// gradient; no parameter is modified in that case.
  void step();
  void zero_grad();

  std::size_t steps() const { return t_; }
  const std::vector<double>& first_moment(std::size_t i) const { return m_[i]; }
  const std::vector<double>& second_moment(std::size_t i) const { return v_[i]; }

  double learning_rate;

 private:
  std::vector<nn::NamedTensor> params_;
  double beta1_, beta2_, eps_;
  std::vector<std::vector<double>> m_;
  std::vector<std::vector<double>> v_;
  std::size_t t_ = 0;
};

struct TrainConfig {
  std::size_t epochs = 100;
  std::size_t batch_size = 32;
  double learning_rate = 1e-4;
  std::size_t patience = 5;
  std::uint64_t seed = 2024;
  LossKind loss = LossKind::kSmoothL1;

  /// ConfigError naming the field.
  void validate() const;
};

struct EpochRecord {
  std::size_t epoch;  // 1-based
  double train_loss;
  double val_loss;
  double lr;
};

/// {"epoch":..,"train_loss":..,"val_loss":..,"lr":..} on one line.
std::string to_json_line(const EpochRecord& record);

struct TrainResult {
  std::vector<EpochRecord> history;
  std::size_t best_epoch = 0;
  double best_val_loss = 0.0;
  bool stopped_early = false;
};

/// Values of every parameter and buffer, in declaration order.
using Snapshot = std::vector<std::vector<double>>;
Snapshot snapshot(const Forecaster& model);
void restore(const Forecaster& model, const Snapshot& state);

/// Mean loss over a dataset in inference mode, weighting every window equally.
double dataset_loss(Forecaster& model, const data::WindowDataset& set, LossKind loss, std::size_t batch_size);

/// Mini-batch training with a seeded shuffle per epoch, a validation pass per
/// epoch and early stopping after `patience` epochs without improvement. The
/// model ends holding its best-validation state. A non-finite loss restores
/// that state and throws DivergenceError. `on_epoch` sees each record as it
/// is produced.
TrainResult train(Forecaster& model, const data::WindowDataset& train_set, const data::WindowDataset& val_set,
                  const TrainConfig& cfg, const std::function<void(const EpochRecord&)>& on_epoch = {});

/// MSE / MAE over every element of every window, inference mode, in
/// chronological batches.
Metrics evaluate(Forecaster& model, const data::WindowDataset& set, std::size_t batch_size = 64);

/// Persistence baseline: every horizon step repeats the last look-back value.
Metrics evaluate_repeat_last(const data::WindowDataset& set);

}  // namespace petformer
