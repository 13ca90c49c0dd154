#include <gtest/gtest.h>

#include <cmath>

#include "gradcheck.hpp"
#include "petformer/model.hpp"
#include "petformer/train.hpp"

using namespace petformer;
using namespace petformer::data;

namespace {

// y[b, t, c] = w * x[b, last, c] for every horizon step: one parameter.
class ScaleModel final : public Forecaster {
 public:
  explicit ScaleModel(double w0, std::size_t h = 1) : w(Tensor({1}, {w0}, true)), h_(h) {}
  Tensor forward(const Tensor& x, bool) override {
    const Tensor last = slice(x, 1, x.dim(1) - 1, 1);
    std::vector<Tensor> steps(h_, last);
    return concat(steps, 1) * w;
  }
  std::vector<nn::NamedTensor> parameters() const override { return {{"w", w}}; }
  Tensor w;

 private:
  std::size_t h_;
};

// Dense linear map from the flattened look-back to the horizon, per channel.
class LinearModel final : public Forecaster {
 public:
  LinearModel(std::size_t l, std::size_t h, Rng& rng) : lin(l, h, rng) {}
  Tensor forward(const Tensor& x, bool) override {
    return permute(lin.forward(permute(x, {0, 2, 1})), {0, 2, 1});
  }
  std::vector<nn::NamedTensor> parameters() const override {
    std::vector<nn::NamedTensor> out;
    lin.collect("lin", out);
    return out;
  }
  nn::Linear lin;
};

WindowDataset sine_windows(std::size_t length, std::size_t l, std::size_t h, IndexRange range, std::uint64_t seed) {
  const RawSeries s = synthesize(SynthKind::kSineNoise, length, 2, SynthParams::defaults(SynthKind::kSineNoise), seed);
  return WindowDataset(s.values, 2, l, h, window(range, l, h));
}

}  // namespace

// --- losses -----------------------------------------------------------------

TEST(Loss, SmoothL1Examples) {
  auto single = [](double diff) { return smooth_l1_loss(Tensor({1}, {0.0}), Tensor({1}, {diff})).item(); };
  EXPECT_EQ(single(0.0), 0.0);
  EXPECT_EQ(single(0.5), 0.125);
  EXPECT_EQ(single(2.0), 1.5);
  EXPECT_EQ(single(-2.0), 1.5);
  EXPECT_EQ(single(1.0), 0.5);
  // Both branch formulas at |x| = 1.
  EXPECT_EQ(0.5 * 1.0 * 1.0, 1.0 - 0.5);
  const Tensor y({2, 2}, {1, 2, 3, 4});
  EXPECT_EQ(smooth_l1_loss(y, y).item(), 0.0);
  EXPECT_THROW(smooth_l1_loss(y, Tensor::zeros({4})), ContractError);
}

TEST(Loss, SmoothL1DerivativeIsContinuousAtOne) {
  for (double x0 : {1.0, -1.0}) {
    const double eps = 1e-7;
    auto slope_at = [](double x) {
      Tensor p({1}, {x}, true);
      {
        Tape tape;
        tape.backward(smooth_l1_loss(Tensor({1}, {0.0}), p));
      }
      return p.grad_data()[0];
    };
    const double inner = slope_at(x0 * (1.0 - eps));
    const double outer = slope_at(x0 * (1.0 + eps));
    EXPECT_NEAR(std::fabs(inner), 1.0, 1e-6);
    EXPECT_NEAR(std::fabs(outer), 1.0, 1e-9);
    EXPECT_NEAR(inner, outer, 1e-6);
    EXPECT_NEAR(std::fabs(slope_at(x0)), 1.0, 1e-9);
  }
}

TEST(Loss, SmoothL1IsHalfMseForSmallResiduals) {
  Rng rng(1);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<double> a(24), b(24);
    for (auto& v : a) v = uniform(rng, -3, 3);
    for (std::size_t i = 0; i < 24; ++i) b[i] = a[i] + uniform(rng, -0.999, 0.999);
    const double loss = smooth_l1_loss(Tensor({4, 6}, a), Tensor({4, 6}, b)).item();
    EXPECT_NEAR(loss, 0.5 * mse(a, b), 1e-15);
  }
}

TEST(Loss, GradientsMatchFiniteDifferences) {
  Rng rng(2);
  for (auto kind : {LossKind::kSmoothL1, LossKind::kL2, LossKind::kL1}) {
    std::vector<double> t(12), p(12);
    for (auto& v : t) v = uniform(rng, -2, 2);
    // Keep residuals away from the kinks at 0 and +-1.
    for (std::size_t i = 0; i < 12; ++i) p[i] = t[i] + (i % 2 ? 1.0 : -1.0) * (0.2 + 0.3 * static_cast<double>(i % 4));
    const Tensor target({3, 4}, t);
    Tensor pred({3, 4}, p, true);
    const auto res = petformer::testing::grad_check({pred}, [&] { return compute_loss(kind, target, pred); });
    EXPECT_LT(res.max_rel_error, 1e-7) << to_string(kind) << " " << res.worst;
  }
}

TEST(Loss, ParsesKinds) {
  EXPECT_EQ(parse_loss_kind("l2"), LossKind::kL2);
  try {
    parse_loss_kind("huber");
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("smooth_l1, l2, l1"), std::string::npos);
  }
}

// --- metrics ----------------------------------------------------------------

TEST(Metrics, Examples) {
  const std::vector<double> y{1, 2}, yhat{2, 4};
  EXPECT_EQ(mse(y, yhat), 2.5);
  EXPECT_EQ(mae(y, yhat), 1.5);
  EXPECT_EQ(mse(y, y), 0.0);
  EXPECT_EQ(mae(y, y), 0.0);
  EXPECT_THROW(mse(y, std::vector<double>{1}), ContractError);
}

TEST(Metrics, MaeSquaredBoundedByMse) {
  Rng rng(3);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<double> a(17), b(17);
    for (auto& v : a) v = uniform(rng, -5, 5);
    for (auto& v : b) v = uniform(rng, -5, 5);
    EXPECT_LE(mae(a, b) * mae(a, b), mse(a, b) * (1.0 + 1e-12));
  }
}

// --- Adam -------------------------------------------------------------------

TEST(Adam, FirstStepMovesByLearningRate) {
  Tensor p({3}, {1.0, -2.0, 0.5}, true);
  Adam opt({{"p", p}}, 1e-3);
  {
    Tape tape;
    tape.backward(sum_all(p));  // g = 1
  }
  opt.step();
  EXPECT_NEAR(p.data()[0], 1.0 - 1e-3, 1e-10);
  EXPECT_NEAR(p.data()[1], -2.0 - 1e-3, 1e-10);
  EXPECT_EQ(opt.steps(), 1u);
}

TEST(Adam, ZeroGradientLeavesParametersAndDecaysMoments) {
  Tensor p({2}, {1.0, 2.0}, true);
  Adam opt({{"p", p}}, 0.1);
  {
    Tape tape;
    tape.backward(sum_all(p));
  }
  opt.step();
  const std::vector<double> after_first(p.data().begin(), p.data().end());
  const double m1 = opt.first_moment(0)[0];
  const double v1 = opt.second_moment(0)[0];
  p.zero_grad();
  {
    Tape tape;
    tape.backward(sum_all(scale(p, 0.0)));
  }
  opt.step();
  EXPECT_NEAR(opt.first_moment(0)[0], 0.9 * m1, 1e-15);
  EXPECT_NEAR(opt.second_moment(0)[0], 0.999 * v1, 1e-15);
  // Momentum still moves the parameter; with fresh moments g = 0 does not.
  Tensor q({2}, {1.0, 2.0}, true);
  Adam fresh({{"q", q}}, 0.1);
  {
    Tape tape;
    tape.backward(sum_all(scale(q, 0.0)));
  }
  fresh.step();
  EXPECT_EQ(q.data()[0], 1.0);
  EXPECT_EQ(q.data()[1], 2.0);
  EXPECT_NE(after_first[0], 1.0);
}

TEST(Adam, QuadraticLossDecreases) {
  Tensor theta({1}, {0.7}, true);
  Adam opt({{"theta", theta}}, 1e-3);
  double previous = 0.49;
  for (int i = 0; i < 100; ++i) {
    opt.zero_grad();
    {
      Tape tape;
      tape.backward(sum_all(square(theta)));
    }
    opt.step();
    const double now = theta.data()[0] * theta.data()[0];
    EXPECT_LT(now, previous);
    previous = now;
  }
}

TEST(Adam, NonFiniteGradientNamesParameter) {
  Tensor a({1}, {1.0}, true), b({1}, {0.0}, true);
  Adam opt({{"alpha", a}, {"beta", b}}, 0.1);
  {
    Tape tape;
    tape.backward(sum_all(a + sqrt(b)));  // d sqrt(b) at 0 is infinite
  }
  try {
    opt.step();
    FAIL();
  } catch (const DivergenceError& e) {
    EXPECT_NE(std::string(e.what()).find("'beta'"), std::string::npos);
  }
  EXPECT_EQ(a.data()[0], 1.0);  // aborted before any update
  EXPECT_EQ(opt.steps(), 0u);
}

// --- training loop ----------------------------------------------------------

TEST(Train, ConvergesOnOneParameterFit) {
  // Pairs (x, 2x) laid out so each window has l = h = 1.
  Rng rng(4);
  std::vector<double> values;
  std::vector<WindowedSample> samples;
  for (int i = 0; i < 64; ++i) {
    const double x = uniform(rng, -1.5, 1.5);
    values.push_back(x);
    values.push_back(2.0 * x);
    samples.push_back({values.size() - 1});
  }
  const WindowDataset set(values, 1, 1, 1, samples);
  ScaleModel model(0.0);
  TrainConfig cfg;
  cfg.epochs = 400;
  cfg.batch_size = 16;
  cfg.learning_rate = 0.01;
  cfg.patience = 400;
  cfg.loss = LossKind::kL2;
  const auto result = train(model, set, set, cfg);
  EXPECT_NEAR(model.w.data()[0], 2.0, 1e-3);
  EXPECT_LT(result.best_val_loss, 1e-6);
}

TEST(Train, ZeroLearningRateKeepsValidationLossConstant) {
  Rng rng(5);
  LinearModel model(12, 4, rng);
  const WindowDataset tr = sine_windows(400, 12, 4, {0, 300}, 1);
  const WindowDataset va = sine_windows(400, 12, 4, {300, 400}, 1);
  TrainConfig cfg;
  cfg.epochs = 4;
  cfg.learning_rate = 0.0;
  cfg.patience = 10;
  const auto result = train(model, tr, va, cfg);
  ASSERT_EQ(result.history.size(), 4u);
  for (const auto& r : result.history) EXPECT_EQ(r.val_loss, result.history.front().val_loss);
}

TEST(Train, EarlyStoppingRestoresBestState) {
  Rng rng(6);
  LinearModel model(12, 4, rng);
  const WindowDataset tr = sine_windows(600, 12, 4, {0, 400}, 2);
  const WindowDataset va = sine_windows(600, 12, 4, {400, 600}, 2);
  TrainConfig cfg;
  cfg.epochs = 60;
  cfg.learning_rate = 0.2;  // large enough to wander after the optimum
  cfg.patience = 2;
  cfg.batch_size = 8;
  const auto result = train(model, tr, va, cfg);
  double best = 1e300;
  std::size_t best_epoch = 0;
  for (const auto& r : result.history) {
    if (r.val_loss < best) {
      best = r.val_loss;
      best_epoch = r.epoch;
    }
  }
  EXPECT_EQ(result.best_epoch, best_epoch);
  EXPECT_EQ(result.best_val_loss, best);
  EXPECT_EQ(dataset_loss(model, va, cfg.loss, 32), best);
  if (result.stopped_early) EXPECT_EQ(result.history.size(), best_epoch + cfg.patience);
}

TEST(Train, DeterministicAcrossRuns) {
  ModelConfig mc;
  mc.lookback = 16;
  mc.horizon = 8;
  mc.channels = 2;
  mc.patch = 4;
  mc.stride = 4;
  mc.d_model = 8;
  mc.layers = 1;
  mc.heads = 2;
  mc.dropout = 0.2;
  const WindowDataset tr = sine_windows(300, 16, 8, {0, 200}, 3);
  const WindowDataset va = sine_windows(300, 16, 8, {200, 300}, 3);
  TrainConfig cfg;
  cfg.epochs = 3;
  cfg.learning_rate = 1e-3;
  cfg.batch_size = 16;
  auto run = [&] {
    PETformer model(mc, 77);
    std::string lines;
    train(model, tr, va, cfg, [&](const EpochRecord& r) { lines += to_json_line(r) + "\n"; });
    return std::make_pair(lines, snapshot(model));
  };
  const auto a = run();
  const auto b = run();
  EXPECT_EQ(a.first, b.first);
  EXPECT_EQ(a.second, b.second);
}

TEST(Train, DivergenceRestoresLastGoodState) {
  Rng rng(7);
  std::vector<double> values(200);
  for (auto& v : values) v = uniform(rng, -1, 1);
  const WindowDataset set(values, 1, 1, 1, window({0, 200}, 1, 1));
  ScaleModel model(0.5);
  TrainConfig cfg;
  cfg.epochs = 3;
  // A huge step overflows the prediction on the next batch.
  cfg.learning_rate = 1e308;
  cfg.loss = LossKind::kL2;
  EXPECT_THROW(train(model, set, set, cfg), DivergenceError);
  EXPECT_EQ(model.w.data()[0], 0.5);
}

TEST(Train, RejectsBadConfig) {
  TrainConfig cfg;
  cfg.patience = 0;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = TrainConfig{};
  cfg.batch_size = 0;
  EXPECT_THROW(cfg.validate(), ConfigError);
}

TEST(Train, HistoryLineFormat) {
  EXPECT_EQ(to_json_line({3, 0.5, 0.25, 1e-4}), R"({"epoch":3,"train_loss":0.5,"val_loss":0.25,"lr":0.0001})");
}

// --- evaluation -------------------------------------------------------------

TEST(Evaluate, ZeroModelOnStandardisedDataGivesUnitMse) {
  const RawSeries s = synthesize(SynthKind::kSineNoise, 2000, 2, SynthParams::defaults(SynthKind::kSineNoise), 9);
  const auto sc = StandardScaler::fit(s, {0, 2000});
  const std::size_t l = 1, h = 1;
  // Every step appears exactly once as a target: windows over the whole series
  // with l = 1 miss only step 0.
  const WindowDataset set(sc.transform(s.values), 2, l, h, window({0, 2000}, l, h));
  ScaleModel zero(0.0);
  const Metrics m = evaluate(zero, set);
  EXPECT_NEAR(m.mse, 1.0, 5e-3);
  EXPECT_EQ(m.n, 1999u);
  const Metrics again = evaluate(zero, set);
  EXPECT_EQ(m.mse, again.mse);
  EXPECT_EQ(m.mae, again.mae);
}

TEST(Evaluate, RepeatLastBaselineMatchesModelForm) {
  // The persistence baseline equals the scale model with w = 1.
  const WindowDataset set = sine_windows(500, 10, 5, {0, 500}, 10);
  ScaleModel persistence(1.0, 5);
  const Metrics a = evaluate_repeat_last(set);
  const Metrics b = evaluate(persistence, set, 7);
  EXPECT_NEAR(a.mse, b.mse, 1e-12);
  EXPECT_NEAR(a.mae, b.mae, 1e-12);
  EXPECT_EQ(a.n, b.n);
  EXPECT_GT(a.mse, 0.0);
}

TEST(Evaluate, PersistenceOnSineMatchesClosedForm) {
  // x_t = sin(2 pi t / P): E[(x_{t+k} - x_t)^2] over whole periods is
  // 2 sin^2(pi k / P) * ... averaged -> 1 - cos(2 pi k / P).
  const std::size_t P = 48, l = 4, h = 12;
  SynthParams p;
  p.period = {static_cast<double>(P)};
  const RawSeries s = synthesize(SynthKind::kSine, P * 50 + l + h - 1, 1, p, 0);
  const WindowDataset set(s.values, 1, l, h, window({0, s.length()}, l, h));
  ASSERT_EQ(set.size() % P, 0u);
  double expected = 0.0;
  for (std::size_t k = 1; k <= h; ++k) expected += 1.0 - std::cos(2.0 * std::numbers::pi * static_cast<double>(k) / P);
  expected /= static_cast<double>(h);
  EXPECT_NEAR(evaluate_repeat_last(set).mse, expected, 1e-9);
}
