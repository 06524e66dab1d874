#include <gtest/gtest.h>

#include <cmath>

#include "xstop/market.hpp"

using namespace xstop;

namespace {

MarketParams benchmark() { return MarketParams{}; }

}  // namespace

TEST(TimeGrid, SpacingAndEndpoints) {
  TimeGrid g(1.0, 50);
  EXPECT_DOUBLE_EQ(g.dt(), 0.02);
  EXPECT_EQ(g.time(0), 0.0);
  EXPECT_EQ(g.time(50), 1.0);
  EXPECT_NEAR(g.dt() * 50, 1.0, 1e-15);
  for (std::size_t l = 0; l < 50; ++l) EXPECT_LT(g.time(l), g.time(l + 1));
  EXPECT_THROW(TimeGrid(1.0, 0), ConfigError);
  EXPECT_THROW(TimeGrid(0.0, 5), ConfigError);
}

TEST(SimulatePaths, DriftOnlyRecursion) {
  // sigma = 0 is outside the market contract, so go through the generic engine.
  const TimeGrid g(1.0, 1);
  const auto b = simulate_paths(GbmDiffusion{0.06, 0.0}, 40.0, g, 8, 3);
  for (std::size_t m = 0; m < 8; ++m) {
    EXPECT_EQ(b(m, 0), 40.0);
    EXPECT_NEAR(b(m, 1), 42.4, 1e-12);
  }
}

TEST(SimulatePaths, Deterministic) {
  const TimeGrid g(1.0, 50);
  const auto a = simulate_paths(benchmark(), g, 64, 11);
  const auto b = simulate_paths(benchmark(), g, 64, 11);
  const auto c = simulate_paths(benchmark(), g, 64, 12);
  EXPECT_EQ(a.data(), b.data());
  EXPECT_NE(a.data(), c.data());
  // A path does not depend on the batch size.
  const auto d = simulate_paths(benchmark(), g, 16, 11);
  for (std::size_t l = 0; l <= 50; ++l) EXPECT_EQ(a(7, l), d(7, l));
}

TEST(SimulatePaths, FirstColumnIsX0AndPricesPositive) {
  const auto b = simulate_paths(benchmark(), TimeGrid(1.0, 50), 512, 5);
  for (std::size_t m = 0; m < b.paths(); ++m) {
    EXPECT_EQ(b(m, 0), 40.0);
    for (double x : b.path(m)) EXPECT_GT(x, 0.0);
  }
}

TEST(SimulatePaths, TerminalMeanMatchesGbm) {
  const std::size_t M = 1u << 18;
  const auto b = simulate_paths(benchmark(), TimeGrid(1.0, 50), M, 2024);
  double s = 0.0, s2 = 0.0;
  for (std::size_t m = 0; m < M; ++m) {
    const double x = b(m, 50);
    s += x;
    s2 += x * x;
  }
  const double mean = s / M;
  const double se = std::sqrt((s2 / M - mean * mean) / M);
  EXPECT_LT(std::abs(mean - 40.0 * std::exp(0.06)), 3.0 * se);
}

TEST(SimulatePaths, IncrementMoments) {
  const std::size_t M = 1u << 16;
  const TimeGrid g(1.0, 50);
  const auto b = simulate_paths(benchmark(), g, M, 99);
  const double dt = g.dt();
  for (std::size_t l : {0u, 17u, 49u}) {
    double s = 0.0, s2 = 0.0;
    for (std::size_t m = 0; m < M; ++m) {
      const double r = b(m, l + 1) / b(m, l) - 1.0;
      s += r;
      s2 += r * r;
    }
    const double mean = s / M;
    const double var = s2 / M - mean * mean;
    EXPECT_LT(std::abs(mean - 0.06 * dt), 3.0 * std::sqrt(var / M)) << "l=" << l;
    // Variance of a sample variance of normals: 2 sigma^4 / M.
    const double target = 0.16 * dt;
    EXPECT_LT(std::abs(var - target), 3.0 * target * std::sqrt(2.0 / M)) << "l=" << l;
  }
}

TEST(SimulatePaths, Contracts) {
  EXPECT_THROW(simulate_paths(benchmark(), TimeGrid(1.0, 5), 0, 1), ConfigError);
  EXPECT_THROW(simulate_paths(benchmark(), TimeGrid(2.0, 5), 4, 1), ConfigError);
  MarketParams bad;
  bad.sigma = -0.1;
  EXPECT_THROW(simulate_paths(bad, TimeGrid(1.0, 5), 4, 1), ConfigError);
}

TEST(Discount, Arithmetic) {
  EXPECT_EQ(evolve_discount(1.0, 0.0, 10.0, 0.02), 1.0);
  EXPECT_NEAR(evolve_discount(1.0, 1.0, 10.0, 0.02), 0.8, 1e-15);
  EXPECT_NEAR(evolve_discount(0.5, 0.5, 50.0, 0.02), 0.25, 1e-15);
  EXPECT_THROW(evolve_discount(1.0, 0.5, 51.0, 0.02), ConfigError);
  EXPECT_THROW(evolve_discount(1.0, 0.5, 0.0, 0.02), ConfigError);
}

TEST(Discount, MonotoneAlongPaths) {
  const std::size_t M = 20, L = 50;
  std::vector<double> pi(M * L);
  Stream s(42);
  for (auto& p : pi) p = s.uniform();
  DiscountState r(pi, M, L, 50.0, 0.02);
  for (std::size_t m = 0; m < M; ++m) {
    EXPECT_EQ(r(m, 0), 1.0);
    for (std::size_t l = 0; l < L; ++l) {
      EXPECT_LE(r(m, l + 1), r(m, l));
      EXPECT_GE(r(m, l + 1), 0.0);
    }
  }
  EXPECT_THROW(DiscountState(pi, M, L, 60.0, 0.02), ConfigError);
}

TEST(Payoff, Put) {
  EXPECT_EQ(payoff_put(30, 40), 10);
  EXPECT_EQ(payoff_put(45, 40), 0);
  EXPECT_EQ(payoff_put(40, 40), 0);
}
