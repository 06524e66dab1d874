#include <gtest/gtest.h>

#include <cmath>

#include "xstop/pricing.hpp"

using namespace xstop;

namespace {

const PutContract kPut{40.0, 0.06, 1.0};

PathBatch test_batch(std::size_t M = 1u << 15, std::uint64_t seed = 3) {
  return simulate_paths(MarketParams{}, TimeGrid(1.0, 50), M, seed);
}

auto constant_w(double w) {
  return [w](std::size_t, const std::vector<double>& xs) { return std::vector<double>(xs.size(), w); };
}

}  // namespace

TEST(RelativeError, Examples) {
  EXPECT_EQ(relative_error(5.317, 5.317), 0.0);
  EXPECT_EQ(relative_error(0.0, 5.317), 1.0);
  EXPECT_NEAR(relative_error(5.37, 5.317), 0.00997, 1e-5);
  EXPECT_THROW(relative_error(1.0, 0.0), DomainError);
  EXPECT_THROW(relative_error(1.0, -2.0), DomainError);
}

TEST(ExecutionPolicy, TiesStopAndTerminalAlwaysStops) {
  const auto batch = test_batch(8);
  const auto p = ExecutionPolicy::from_w(batch, constant_w(0.0));
  for (std::size_t m = 0; m < 8; ++m) EXPECT_TRUE(p.stop(m, 0));
  const auto q = ExecutionPolicy::from_w(batch, constant_w(1e-12));
  for (std::size_t m = 0; m < 8; ++m) {
    EXPECT_FALSE(q.stop(m, 3));
    EXPECT_TRUE(q.stop(m, 50));
  }
}

TEST(PriceByStopping, NeverAndAlways) {
  const auto batch = test_batch();
  const auto never = ExecutionPolicy::from_w(batch, constant_w(1.0));
  const Estimate e = price_by_stopping(never, batch, kPut);
  // Never stopping is the European put under the Euler dynamics.
  EXPECT_LT(std::abs(e.value - european_put_value(0.0, 40.0, 0.4, kPut)), 3.0 * e.std_error + 0.02);
  double direct = 0.0;
  for (std::size_t m = 0; m < batch.paths(); ++m) direct += std::exp(-0.06) * payoff_put(batch(m, 50), 40.0);
  EXPECT_NEAR(e.value, direct / batch.paths(), 1e-12);

  const auto always = ExecutionPolicy::from_w(batch, constant_w(-1.0));
  const Estimate a = price_by_stopping(always, batch, kPut);
  EXPECT_EQ(a.value, 0.0);
  EXPECT_EQ(a.std_error, 0.0);
}

TEST(PriceByControl, NeverStopIsEuropean) {
  const auto batch = test_batch();
  const auto never = ExecutionPolicy::from_w(batch, constant_w(1.0));
  const Estimate c = price_by_control(never, batch, kPut, 10.0);
  const Estimate s = price_by_stopping(never, batch, kPut);
  EXPECT_NEAR(c.value, s.value, 1e-12);
  EXPECT_LT(std::abs(c.value - european_put_value(0.0, 40.0, 0.4, kPut)), 3.0 * c.std_error + 0.02);
}

TEST(PriceByControl, AbsorbingDiscount) {
  // K dt = 1: the first stop collects K g dt = g and R drops to 0.
  const auto batch = test_batch(64);
  ExecutionPolicy p(64, 51);
  for (std::size_t m = 0; m < 64; ++m) {
    p.set(m, 7, true);
    p.set(m, 20, true);
    p.set(m, 50, true);
  }
  const Estimate c = price_by_control(p, batch, kPut, 50.0);
  double expect = 0.0;
  for (std::size_t m = 0; m < 64; ++m) expect += std::exp(-0.06 * 7 * 0.02) * payoff_put(batch(m, 7), 40.0);
  EXPECT_NEAR(c.value, expect / 64, 1e-12);
  EXPECT_THROW(price_by_control(p, batch, kPut, 51.0), ConfigError);
}

TEST(PriceByControl, MeetsStoppingAtUnitIntensity) {
  // Same exercise rule: below K dt = 1 stopping is randomized and the two
  // estimators differ; at K dt = 1 they coincide.
  const auto batch = test_batch(1u << 14);
  const auto pol = ExecutionPolicy::from_w(batch, [](std::size_t, const std::vector<double>& xs) {
    std::vector<double> w(xs.size());
    for (std::size_t i = 0; i < xs.size(); ++i) w[i] = xs[i] - 30.0;
    return w;
  });
  const double s = price_by_stopping(pol, batch, kPut).value;
  for (double K : {5.0, 10.0, 25.0}) {
    const double gap = std::abs(price_by_control(pol, batch, kPut, K).value - s);
    EXPECT_GT(gap, 1e-4) << K;
    EXPECT_LT(gap, 0.5) << K;
  }
  EXPECT_LT(std::abs(price_by_control(pol, batch, kPut, 50.0).value - s), 1e-12);
}

TEST(ClassificationAccuracy, OracleRuleIsExact) {
  const MarketParams p;
  const FdSolution sol = solve_penalized_vi(p, make_fd_grid(p, {400, 400, 6.0, true}), FdOptions{});
  const FreeBoundary fb = extract_free_boundary(sol);
  const auto batch = test_batch(4096);
  const auto pol = ExecutionPolicy::from_w(batch, [&](std::size_t l, const std::vector<double>& xs) {
    std::vector<double> w(xs.size());
    const double xf = *fb.at(batch.grid().time(l));
    for (std::size_t i = 0; i < xs.size(); ++i) w[i] = xs[i] <= xf ? 0.0 : 1.0;
    return w;
  });
  const auto acc = classification_accuracy(pol, batch, fb);
  ASSERT_EQ(acc.size(), 50u);
  for (const auto& a : acc) EXPECT_EQ(a.value(), 1.0);
  EXPECT_EQ(min_accuracy(acc).value(), 1.0);

  // A boundary with missing rows flags those slices.
  FreeBoundary partial = fb;
  for (auto& x : partial.x) x.reset();
  const auto none = classification_accuracy(pol, batch, partial);
  EXPECT_FALSE(min_accuracy(none).has_value());
}

TEST(PriceReport, JsonFields) {
  const auto batch = test_batch(256);
  const auto never = ExecutionPolicy::from_w(batch, constant_w(1.0));
  const PriceReport r = price_report(never, batch, kPut, 10.0, 5.317);
  const auto j = r.to_json();
  for (const char* k : {"p_stopping", "p_control", "se_stopping", "se_control", "oracle",
                        "rel_err_stopping", "rel_err_control"})
    EXPECT_TRUE(j.contains(k)) << k;
  EXPECT_NEAR(j["rel_err_stopping"].get<double>(), std::abs(r.stopping.value - 5.317) / 5.317, 1e-15);
}
