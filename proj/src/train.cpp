#include "petformer/train.hpp"

#include <cmath>
#include <limits>
#include <numeric>

#include <json.hpp>

#include "petformer/errors.hpp"
#include "petformer/random.hpp"

namespace petformer {

namespace {

void require_same_shape(const Tensor& a, const Tensor& b, const char* who) {
  if (a.shape() != b.shape()) {
    throw ContractError(std::string(who) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}

double smooth_l1(double r) { return std::fabs(r) < 1.0 ? 0.5 * r * r : std::fabs(r) - 0.5; }
double smooth_l1_grad(double r) {
  if (std::fabs(r) < 1.0) return r;
  return r > 0.0 ? 1.0 : -1.0;
}

std::vector<std::size_t> shuffled(std::size_t n, Rng& rng) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[uniform_index(rng, i)]);
  return order;
}

}  // namespace

std::string to_string(LossKind kind) {
  switch (kind) {
    case LossKind::kSmoothL1: return "smooth_l1";
    case LossKind::kL2: return "l2";
    case LossKind::kL1: return "l1";
  }
  return "?";
}

LossKind parse_loss_kind(std::string_view text) {
  for (auto k : {LossKind::kSmoothL1, LossKind::kL2, LossKind::kL1}) {
    if (text == to_string(k)) return k;
  }
  throw ConfigError("loss: invalid value '" + std::string(text) + "' (valid: smooth_l1, l2, l1)");
}

Tensor smooth_l1_loss(const Tensor& target, const Tensor& pred) {
  require_same_shape(target, pred, "smooth_l1_loss");
  return mean_all(map_unary(pred - target, smooth_l1, smooth_l1_grad));
}

Tensor l2_loss(const Tensor& target, const Tensor& pred) {
  require_same_shape(target, pred, "l2_loss");
  return mean_all(square(pred - target));
}

Tensor l1_loss(const Tensor& target, const Tensor& pred) {
  require_same_shape(target, pred, "l1_loss");
  return mean_all(abs(pred - target));
}

Tensor compute_loss(LossKind kind, const Tensor& target, const Tensor& pred) {
  switch (kind) {
    case LossKind::kSmoothL1: return smooth_l1_loss(target, pred);
    case LossKind::kL2: return l2_loss(target, pred);
    case LossKind::kL1: return l1_loss(target, pred);
  }
  throw ConfigError("loss: unknown kind");
}

double mse(std::span<const double> target, std::span<const double> pred) {
  if (target.size() != pred.size() || target.empty()) throw ContractError("mse: length mismatch or empty input");
  double s = 0.0;
  for (std::size_t i = 0; i < target.size(); ++i) s += (target[i] - pred[i]) * (target[i] - pred[i]);
  return s / static_cast<double>(target.size());
}

double mae(std::span<const double> target, std::span<const double> pred) {
  if (target.size() != pred.size() || target.empty()) throw ContractError("mae: length mismatch or empty input");
  double s = 0.0;
  for (std::size_t i = 0; i < target.size(); ++i) s += std::fabs(target[i] - pred[i]);
  return s / static_cast<double>(target.size());
}

// ---------------------------------------------------------------------------

Adam::Adam(std::vector<nn::NamedTensor> params, double lr, double beta1, double beta2, double eps)
    : learning_rate(lr), params_(std::move(params)), beta1_(beta1), beta2_(beta2), eps_(eps) {
  for (const auto& [name, t] : params_) {
    m_.emplace_back(t.numel(), 0.0);
    v_.emplace_back(t.numel(), 0.0);
  }
}

void Adam::step() {
  for (const auto& [name, t] : params_) {
    if (!t.has_grad()) continue;
    for (double g : t.grad_data()) {
      if (!std::isfinite(g)) throw DivergenceError("adam: non-finite gradient in parameter '" + name + "'");
    }
  }
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t p = 0; p < params_.size(); ++p) {
    Tensor& t = params_[p].second;
    auto values = t.mutable_data();
    const bool has = t.has_grad();
    auto& m = m_[p];
    auto& v = v_[p];
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double g = has ? t.grad_data()[i] : 0.0;
      m[i] = beta1_ * m[i] + (1.0 - beta1_) * g;
      v[i] = beta2_ * v[i] + (1.0 - beta2_) * g * g;
      values[i] -= learning_rate * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps_);
    }
  }
}

void Adam::zero_grad() {
  for (auto& [name, t] : params_) t.zero_grad();
}

// ---------------------------------------------------------------------------

void TrainConfig::validate() const {
  if (epochs == 0) throw ConfigError("epochs: must be at least 1");
  if (batch_size == 0) throw ConfigError("batch_size: must be at least 1");
  if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) {
    throw ConfigError("learning_rate: must be finite and nonnegative");
  }
  if (patience == 0) throw ConfigError("patience: must be at least 1");
}

std::string to_json_line(const EpochRecord& r) {
  nlohmann::ordered_json j;
  j["epoch"] = r.epoch;
  j["train_loss"] = r.train_loss;
  j["val_loss"] = r.val_loss;
  j["lr"] = r.lr;
  return j.dump();
}

Snapshot snapshot(const Forecaster& model) {
  Snapshot out;
  for (const auto& group : {model.parameters(), model.buffers()}) {
    for (const auto& [name, t] : group) out.emplace_back(t.data().begin(), t.data().end());
  }
  return out;
}

void restore(const Forecaster& model, const Snapshot& state) {
  std::size_t i = 0;
  for (const auto& group : {model.parameters(), model.buffers()}) {
    for (const auto& [name, t] : group) {
      if (i >= state.size() || state[i].size() != t.numel()) throw ContractError("restore: snapshot does not match model");
      auto dst = Tensor(t).mutable_data();
      std::copy(state[i].begin(), state[i].end(), dst.begin());
      ++i;
    }
  }
  if (i != state.size()) throw ContractError("restore: snapshot does not match model");
}

double dataset_loss(Forecaster& model, const data::WindowDataset& set, LossKind loss, std::size_t batch_size) {
  if (set.empty()) throw ContractError("dataset_loss: empty dataset");
  double total = 0.0;
  for (std::size_t first = 0; first < set.size(); first += batch_size) {
    const std::size_t count = std::min(batch_size, set.size() - first);
    const auto [x, y] = set.batch_range(first, count);
    total += compute_loss(loss, y, model.forward(x, false)).item() * static_cast<double>(count);
  }
  return total / static_cast<double>(set.size());
}

TrainResult train(Forecaster& model, const data::WindowDataset& train_set, const data::WindowDataset& val_set,
                  const TrainConfig& cfg, const std::function<void(const EpochRecord&)>& on_epoch) {
  cfg.validate();
  if (train_set.empty()) throw ContractError("train: training set has no windows");
  if (val_set.empty()) throw ContractError("train: validation set has no windows");

  Adam opt(model.parameters(), cfg.learning_rate);
  Rng shuffle_rng(cfg.seed);
  TrainResult result;
  Snapshot best = snapshot(model);
  result.best_val_loss = std::numeric_limits<double>::infinity();
  std::size_t stale = 0;

  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const auto order = shuffled(train_set.size(), shuffle_rng);
    double epoch_loss = 0.0;
    for (std::size_t first = 0; first < order.size(); first += cfg.batch_size) {
      const std::size_t count = std::min(cfg.batch_size, order.size() - first);
      const std::vector<std::size_t> idx(order.begin() + static_cast<std::ptrdiff_t>(first),
                                         order.begin() + static_cast<std::ptrdiff_t>(first + count));
      const auto [x, y] = train_set.batch(idx);
      opt.zero_grad();
      double value = 0.0;
      {
        Tape tape;
        Tensor loss = compute_loss(cfg.loss, y, model.forward(x, true));
        value = loss.item();
        if (!std::isfinite(value)) {
          restore(model, best);
          throw DivergenceError("train: non-finite training loss at epoch " + std::to_string(epoch) +
                                "; restored the last good state");
        }
        tape.backward(loss);
      }
      try {
        opt.step();
      } catch (const DivergenceError&) {
        restore(model, best);
        throw;
      }
      epoch_loss += value * static_cast<double>(count);
    }
    const EpochRecord record{epoch, epoch_loss / static_cast<double>(train_set.size()),
                             dataset_loss(model, val_set, cfg.loss, cfg.batch_size), opt.learning_rate};
    if (!std::isfinite(record.val_loss)) {
      restore(model, best);
      throw DivergenceError("train: non-finite validation loss at epoch " + std::to_string(epoch) +
                            "; restored the last good state");
    }
    result.history.push_back(record);
    if (on_epoch) on_epoch(record);

    if (record.val_loss < result.best_val_loss) {
      result.best_val_loss = record.val_loss;
      result.best_epoch = epoch;
      best = snapshot(model);
      stale = 0;
    } else if (++stale >= cfg.patience) {
      result.stopped_early = true;
      break;
    }
  }
  restore(model, best);
  return result;
}

Metrics evaluate(Forecaster& model, const data::WindowDataset& set, std::size_t batch_size) {
  if (set.empty()) throw ContractError("evaluate: dataset has no windows");
  if (batch_size == 0) throw ConfigError("batch_size: must be at least 1");
  double se = 0.0, ae = 0.0;
  std::size_t elements = 0;
  for (std::size_t first = 0; first < set.size(); first += batch_size) {
    const std::size_t count = std::min(batch_size, set.size() - first);
    const auto [x, y] = set.batch_range(first, count);
    const Tensor pred = model.forward(x, false);
    const auto t = y.data();
    const auto p = pred.data();
    for (std::size_t i = 0; i < t.size(); ++i) {
      const double r = t[i] - p[i];
      se += r * r;
      ae += std::fabs(r);
    }
    elements += t.size();
  }
  return {se / static_cast<double>(elements), ae / static_cast<double>(elements), set.size()};
}

Metrics evaluate_repeat_last(const data::WindowDataset& set) {
  if (set.empty()) throw ContractError("evaluate_repeat_last: dataset has no windows");
  const std::size_t l = set.lookback(), h = set.horizon(), d = set.channels();
  double se = 0.0, ae = 0.0;
  for (std::size_t i = 0; i < set.size(); ++i) {
    const auto [x, y] = set.batch_range(i, 1);
    for (std::size_t step = 0; step < h; ++step) {
      for (std::size_t c = 0; c < d; ++c) {
        const double r = y.data()[step * d + c] - x.data()[(l - 1) * d + c];
        se += r * r;
        ae += std::fabs(r);
      }
    }
  }
  const auto elements = static_cast<double>(set.size() * h * d);
  return {se / elements, ae / elements, set.size()};
}

}  // namespace petformer
