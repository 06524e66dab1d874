#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "support.hpp"
#include "xstop/trainer.hpp"

using namespace xstop;
using xstop::testing::ensemble_loss_gradient_error;
using xstop::testing::loss_gradient_error;
using xstop::testing::random_path_terms;

namespace {

StoppingPayoff put_payoff() { return {StoppingPayoff::Kind::put, {}, 0.4}; }

TrainConfig quick_config() {
  TrainConfig c;
  c.batch = 64;
  c.test_batch = 512;
  c.recalibration_batch = 256;
  c.steps = 5;
  c.eval_every = 2;
  return c;
}

LossTerms terms(double rate, LossWeighting w) { return {10.0, 1.0, rate, 0.02, w}; }

}  // namespace

TEST(MartingaleComponents, NoStoppingReducesToTerminalMinusValue) {
  const std::size_t M = 3, L = 8;
  PathTerms pt = random_path_terms(M, L, 10.0, 1.0, 0.02, 1);
  std::fill(pt.pi.begin(), pt.pi.end(), 0.0);
  pt.derive_discount(10.0, 0.02);
  const double rate = 0.06, T = L * 0.02;
  for (std::size_t m = 0; m < M; ++m) {
    for (std::size_t l = 0; l <= L; ++l) EXPECT_EQ(pt.R(m, l), 1.0);
    const auto G = martingale_components(pt, m, terms(rate, LossWeighting::discounted));
    const auto Gn = martingale_components(pt, m, terms(rate, LossWeighting::normalized));
    for (std::size_t l = 0; l < L; ++l) {
      const double t = l * 0.02;
      EXPECT_NEAR(G[l], std::exp(-rate * T) * pt.g(m, L) - std::exp(-rate * t) * pt.V(m, l), 1e-12);
      EXPECT_NEAR(Gn[l], std::exp(-rate * (T - t)) * pt.g(m, L) - pt.V(m, l), 1e-12);
      EXPECT_EQ(glk_component(l, pt, m, terms(rate, LossWeighting::discounted)), G[l]);
    }
  }
  EXPECT_THROW(glk_component(L, pt, 0, terms(rate, LossWeighting::discounted)), DomainError);
}

TEST(MartingaleComponents, LastStepIsOneStepTarget) {
  const std::size_t L = 5;
  const double K = 10, lam = 1, dt = 0.02, rate = 0.06;
  PathTerms pt = random_path_terms(2, L, K, lam, dt, 2);
  const std::size_t l = L - 1;
  for (std::size_t m = 0; m < 2; ++m) {
    const double pi = pt.p(m, l);
    const double dl = std::exp(-rate * l * dt), dL = std::exp(-rate * L * dt);
    const double expected = dL * pt.R(m, L) * pt.g(m, L) - dl * pt.R(m, l) * pt.V(m, l) +
                            dl * pt.R(m, l) * (K * pt.g(m, l) * pi - lam * bernoulli_entropy(pi)) * dt;
    EXPECT_NEAR(martingale_components(pt, m, {K, lam, rate, dt, LossWeighting::discounted})[l],
                expected, 1e-12);
  }
}

TEST(MartingaleComponents, ZeroRateMatchesUndiscountedForm) {
  const std::size_t L = 10;
  const double K = 10, lam = 1, dt = 0.02;
  PathTerms pt = random_path_terms(4, L, K, lam, dt, 3);
  for (std::size_t m = 0; m < 4; ++m) {
    const auto G = martingale_components(pt, m, {K, lam, 0.0, dt, LossWeighting::discounted});
    for (std::size_t l = 0; l < L; ++l) {
      // R_T g(X_T) - R_l V_l + sum_{j >= l} R_j [K g pi - lambda H] dt
      double s = pt.R(m, L) * pt.g(m, L) - pt.R(m, l) * pt.V(m, l);
      for (std::size_t j = l; j < L; ++j)
        s += pt.R(m, j) * (K * pt.g(m, j) * pt.p(m, j) - lam * bernoulli_entropy(pt.p(m, j))) * dt;
      EXPECT_NEAR(G[l], s, 1e-12);
    }
  }
}

TEST(MartingaleLoss, DeterministicPathHasZeroLoss) {
  const TimeGrid grid(1.0, 50);
  const auto batch = simulate_paths(GbmDiffusion{0.06, 0.0}, 36.0, grid, 4, 1);
  const double rate = 0.06;
  PathTerms pt(4, 50);
  for (std::size_t m = 0; m < 4; ++m) {
    for (std::size_t l = 0; l <= 50; ++l) pt.g(m, l) = payoff_put(batch(m, l), 40.0);
    for (std::size_t l = 0; l < 50; ++l) {
      pt.V(m, l) = std::exp(-rate * (1.0 - grid.time(l))) * pt.g(m, 50);
      pt.p(m, l) = 0.0;
    }
  }
  pt.derive_discount(10.0, 0.02);
  ASSERT_GT(pt.g(0, 50), 0.0);
  for (auto w : {LossWeighting::discounted, LossWeighting::normalized})
    EXPECT_NEAR(martingale_loss(pt, {10.0, 1.0, rate, 0.02, w}), 0.0, 1e-24);
}

TEST(MartingaleLoss, NonnegativeAndGradientChecks) {
  const double K = 10, lam = 1, dt = 0.02;
  for (std::uint64_t seed : {4u, 5u}) {
    const PathTerms pt = random_path_terms(6, 12, K, lam, dt, seed);
    for (auto w : {LossWeighting::discounted, LossWeighting::normalized}) {
      const LossTerms lt{K, lam, 0.06, dt, w};
      EXPECT_GE(martingale_loss(pt, lt), 0.0);
      EXPECT_LE(loss_gradient_error(pt, lt, false), 1e-5);
    }
    EXPECT_LE(loss_gradient_error(pt, {K, lam, 0.06, dt, LossWeighting::discounted}, true), 1e-5);
  }
  const PathTerms pt = random_path_terms(2, 3, K, lam, dt, 9);
  std::vector<double> dv;
  EXPECT_THROW(martingale_loss(pt, {K, lam, 0.06, dt, LossWeighting::normalized}, &dv, true),
               UsageError);
}

TEST(MartingaleLoss, ParameterGradientThroughNetworks) {
  const TimeGrid grid(0.06, 3);
  MarketParams p;
  p.horizon = 0.06;
  EnsembleOptions opt;
  opt.hidden = {6, 5};
  ValueEnsemble ens(grid, put_payoff(), opt, 13);
  const auto batch = simulate_paths(p, grid, 16, 3);
  ens.fit_standardization(batch);
  for (auto w : {LossWeighting::discounted, LossWeighting::normalized})
    EXPECT_LE(ensemble_loss_gradient_error(ens, batch, {10.0, 1.0, 0.06, grid.dt(), w}), 1e-4);
}

TEST(TrainConfig, Validation) {
  TrainConfig c;
  EXPECT_NO_THROW(c.validate(1.0));
  c.penalty = 51;
  EXPECT_THROW(c.validate(1.0), ConfigError);
  c = TrainConfig{};
  c.full_gradient = true;
  EXPECT_THROW(c.validate(1.0), ConfigError);
  c.weighting = LossWeighting::discounted;
  EXPECT_NO_THROW(c.validate(1.0));
  c = TrainConfig{};
  c.batch = 1;
  EXPECT_THROW(c.validate(1.0), ConfigError);
  EXPECT_THROW(parse_train_mode("offline"), ConfigError);
  EXPECT_EQ(parse_loss_weighting("discounted"), LossWeighting::discounted);
}

TEST(Trainer, ZeroLearningRateLeavesParameters) {
  for (auto mode : {TrainMode::offline_ml, TrainMode::online_td0}) {
    TrainConfig c = quick_config();
    c.learning_rate = 0.0;
    c.mode = mode;
    Trainer t(MarketParams{}, c, put_payoff());
    const mlp::Vector before = t.ensemble().network(3).params();
    const StepMetrics s = t.step();
    EXPECT_TRUE(std::isfinite(s.loss));
    EXPECT_GT(s.loss, 0.0);
    EXPECT_EQ(t.ensemble().network(3).params(), before);
  }
}

TEST(Trainer, DeterministicUpdates) {
  for (auto mode : {TrainMode::offline_ml, TrainMode::online_td0}) {
    TrainConfig c = quick_config();
    c.mode = mode;
    Trainer a(MarketParams{}, c, put_payoff()), b(MarketParams{}, c, put_payoff());
    for (int k = 0; k < 3; ++k) {
      EXPECT_EQ(a.step().loss, b.step().loss);
    }
    for (std::size_t l = 0; l < 50; l += 7)
      EXPECT_EQ(a.ensemble().network(l).params(), b.ensemble().network(l).params());
    EXPECT_EQ(a.steps_done(), 3u);
  }
}

TEST(Trainer, RecordsEveryEvalSteps) {
  TrainConfig c = quick_config();
  c.steps = 7;
  c.eval_every = 3;
  Trainer t(MarketParams{}, c, put_payoff(), EvaluationOracle{5.317, {}});
  const TrainOutcome out = t.train();
  EXPECT_FALSE(out.error);
  ASSERT_EQ(out.records.size(), 2u);
  EXPECT_EQ(out.records[0].step, 3u);
  EXPECT_EQ(out.records[1].step, 6u);
  for (const auto& r : out.records) {
    EXPECT_GE(r.price.rel_err_stopping, 0.0);
    EXPECT_GE(r.price.rel_err_control, 0.0);
    EXPECT_GE(r.price.stopping.std_error, 0.0);
  }
}

TEST(Trainer, ZeroStepsKeepsInitialEnsemble) {
  TrainConfig c = quick_config();
  c.steps = 0;
  Trainer t(MarketParams{}, c, put_payoff());
  const ValueEnsemble fresh(t.grid(), put_payoff(), c.ensemble, stream_key(c.seed, 0xe75eULL));
  const TrainOutcome out = t.train();
  EXPECT_TRUE(out.records.empty());
  EXPECT_EQ(t.ensemble().network(0).params(), fresh.network(0).params());
}

TEST(Trainer, TdStepWithoutStoppingIsPlainTd) {
  // With the stopping probability pinned near zero (huge continuation margin)
  // and no discounting the TD error is V_{l+1} - V_l.
  TrainConfig c = quick_config();
  c.mode = TrainMode::online_td0;
  c.discounting = false;
  c.penalty = 1e-9;  // K pi dt and K g pi dt vanish
  c.lambda = 1e-12;  // entropy term vanishes
  c.learning_rate = 0.0;
  Trainer t(MarketParams{}, c, put_payoff());
  const StepMetrics s = t.step();
  // Recompute the RMS of V_{l+1} - V_l on the same batch in train mode.
  const PathBatch batch = t.training_batch(1);
  double sq = 0.0;
  const auto& ens = t.ensemble();
  for (std::size_t l = 0; l < 50; ++l) {
    const auto xs = batch.column(l), xn = batch.column(l + 1);
    const auto v = ens.evaluate_value(l, xs, ens.payoffs(l, xs), mlp::Mode::train);
    const auto vn = ens.evaluate_value(l + 1, xn, ens.payoffs(l + 1, xn), mlp::Mode::train);
    for (std::size_t m = 0; m < batch.paths(); ++m) sq += (vn[m] - v[m]) * (vn[m] - v[m]);
  }
  EXPECT_NEAR(s.loss, std::sqrt(sq / (batch.paths() * 50.0)), 1e-9 * (1.0 + s.loss));
}

TEST(Trainer, LossDecreasesOverFirstHundredSteps) {
  TrainConfig c;
  c.steps = 100;
  Trainer t(MarketParams{}, c, StoppingPayoff{});
  std::vector<double> loss;
  for (int k = 0; k < 100; ++k) loss.push_back(t.step().loss);
  auto avg = [&](int from) {
    double s = 0;
    for (int k = from; k < from + 10; ++k) s += loss[k];
    return s / 10;
  };
  EXPECT_LT(avg(90), avg(0));
  // Trend: moving averages at 10-step spacing mostly decrease.
  int ups = 0;
  for (int k = 10; k <= 90; k += 10) ups += avg(k) > avg(k - 10) ? 1 : 0;
  EXPECT_LE(ups, 3);
}

TEST(Curve, HeaderAndRowFormat) {
  std::ostringstream os;
  write_curve_header(os);
  TrainRecord r;
  r.step = 10;
  r.loss = 0.1;
  r.min_accuracy = 0.97;
  write_curve_row(os, r);
  EXPECT_EQ(os.str(),
            "step,loss,p_stopping,p_control,rel_err_stopping,rel_err_control,min_accuracy,elapsed_s\n"
            "10,0.10000000000000001,0,0,0,0,0.96999999999999997,0\n");
}
