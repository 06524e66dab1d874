#include <gtest/gtest.h>

#include <cmath>

#include "xstop/dynkin.hpp"
#include "xstop/fd_oracle.hpp"

using namespace xstop;
using namespace xstop::dynkin;

namespace {

FdGrid small_grid(std::size_t ny = 120, std::size_t nt = 80) {
  FdGrid g;
  g.y_min = -2.0;
  g.y_max = 2.0;
  g.ny = ny;
  g.nt = nt;
  g.horizon = 1.0;
  return g;
}

// A synthetic two-sided problem with both obstacles binding somewhere.
ObstacleSpec synthetic() {
  ObstacleSpec s;
  s.lower = [](double t, double z) { return -0.6 + 0.4 * std::sin(2.0 * z) - 0.1 * t; };
  s.upper = [](double, double z) { return 0.5 + 0.3 * std::cos(3.0 * z); };
  s.terminal = [](double z) { return std::clamp(0.8 * z, -0.6 + 0.4 * std::sin(2.0 * z) - 0.1, 0.5 + 0.3 * std::cos(3.0 * z)); };
  s.drift = [](double z) { return 0.1 - 0.05 * z; };
  s.diffusion = [](double) { return 0.4; };
  s.killing = [](double) { return 0.03; };
  return s;
}

ObstacleSpec negated(const ObstacleSpec& s) {
  ObstacleSpec n = s;
  n.lower = [u = s.upper](double t, double z) { return -u(t, z); };
  n.upper = [l = s.lower](double t, double z) { return -l(t, z); };
  n.terminal = [h = s.terminal](double z) { return -h(z); };
  return n;
}

}  // namespace

TEST(GameProbabilities, Examples) {
  EXPECT_EQ(optimal_probabilities(2.0, 2.0, 5.0, 10.0, 1.0).nu, 0.5);
  EXPECT_NEAR(optimal_probabilities(0.0, -1.0, 0.02, 5.0, 0.01).mu, 1.0 / (1.0 + std::exp(10.0)), 1e-18);
  EXPECT_NEAR(optimal_probabilities(0.0, -1.0, 0.02, 5.0, 0.01).mu, 4.54e-5, 1e-7);
  const auto mid = optimal_probabilities(0.0, -10.0, 10.0, 100.0, 1.0);
  EXPECT_LT(mid.nu, 1e-8);
  EXPECT_LT(mid.mu, 1e-8);
  EXPECT_THROW(optimal_probabilities(0.0, -1.0, 1.0, 0.0, 1.0), ConfigError);
  EXPECT_THROW(optimal_probabilities(0.0, -1.0, 1.0, 1.0, 0.0), ConfigError);
  // Monotone in the obstacle gaps.
  EXPECT_LT(optimal_probabilities(0.0, -0.1, 1.0, 5.0, 1.0).nu, optimal_probabilities(0.0, 0.1, 1.0, 5.0, 1.0).nu);
  EXPECT_LT(optimal_probabilities(0.0, -1.0, 0.1, 5.0, 1.0).mu, optimal_probabilities(0.0, -1.0, -0.1, 5.0, 1.0).mu);
}

TEST(GameSolver, StaticGame) {
  ObstacleSpec s;
  s.lower = [](double, double) { return -1.0; };
  s.upper = [](double, double) { return 1.0; };
  s.terminal = [](double) { return 0.0; };
  GameOptions o;
  o.penalty = 5.0;
  o.lambda = 1.0;
  const GameSolution sol = solve_penalized_game(s, small_grid(20, 10), o);
  const double expected = 1.0 / (1.0 + std::exp(5.0));
  for (std::size_t i = 0; i <= 10; ++i)
    for (std::size_t j = 0; j <= 20; ++j) {
      EXPECT_EQ(sol.w(i, j), 0.0);
      EXPECT_NEAR(sol.nu(i, j), expected, 1e-15);
      EXPECT_NEAR(sol.mu(i, j), expected, 1e-15);
    }
}

TEST(GameSolver, SingleObstacleDegeneration) {
  const MarketParams p;
  const FdGrid grid = make_fd_grid(p, {300, 300, 6.0, true});
  FdOptions fo;
  const FdSolution single = solve_penalized_vi(p, grid, fo);
  const GameSolution game = solve_penalized_game(single_obstacle_spec(p, fo.payoff), grid, GameOptions{});
  double worst = 0.0;
  for (std::size_t i = 0; i <= grid.nt; ++i)
    for (std::size_t j = 0; j <= grid.ny; ++j) worst = std::max(worst, std::abs(game.w(i, j) - single(i, j)));
  EXPECT_LE(worst, 1e-6);
  // Upper obstacle disabled: the minimizer never stops.
  EXPECT_EQ(game.mu(0, 150), kProbabilityClip);
}

TEST(GameSolver, HugeUpperMatchesDisabledUpper) {
  const MarketParams p;
  const FdGrid grid = make_fd_grid(p, {200, 100, 6.0, true});
  FdOptions fo;
  ObstacleSpec s = single_obstacle_spec(p, fo.payoff);
  const GameSolution a = solve_penalized_game(s, grid, GameOptions{});
  s.upper = [](double, double) { return 1e9; };
  const GameSolution b = solve_penalized_game(s, grid, GameOptions{});
  for (std::size_t j = 0; j <= grid.ny; ++j) EXPECT_NEAR(a.w(0, j), b.w(0, j), 1e-9);
}

TEST(GameSolver, SwapSymmetry) {
  const ObstacleSpec s = synthetic();
  GameOptions o;
  o.penalty = 1e4;
  const GameSolution a = solve_penalized_game(s, small_grid(), o);
  const GameSolution b = solve_penalized_game(negated(s), small_grid(), o);
  for (std::size_t i = 0; i <= 80; i += 4)
    for (std::size_t j = 0; j <= 120; ++j) {
      EXPECT_NEAR(b.w(i, j), -a.w(i, j), 1e-12);
      EXPECT_NEAR(b.nu(i, j), a.mu(i, j), 1e-12);
      EXPECT_NEAR(b.mu(i, j), a.nu(i, j), 1e-12);
    }
}

TEST(GameSolver, SandwichAndBothObstaclesBind) {
  const ObstacleSpec s = synthetic();
  for (double K : {1e2, 1e4, 1e6}) {
    GameOptions o;
    o.penalty = K;
    const GameSolution sol = solve_penalized_game(s, small_grid(), o);
    std::size_t at_lower = 0, at_upper = 0;
    for (std::size_t i = 0; i <= 80; ++i)
      for (std::size_t j = 0; j <= 120; ++j) {
        EXPECT_GE(sol.w(i, j) - sol.lower(i, j), -10.0 / K);
        EXPECT_GE(sol.upper(i, j) - sol.w(i, j), -10.0 / K);
        at_lower += sol.w(i, j) - sol.lower(i, j) < 1e-3;
        at_upper += sol.upper(i, j) - sol.w(i, j) < 1e-3;
      }
    EXPECT_GT(at_lower, 0u);
    EXPECT_GT(at_upper, 0u);
  }
}

TEST(GameSolver, ResidualVanishesAtSolution) {
  const ObstacleSpec s = synthetic();
  const FdGrid g = small_grid();
  GameOptions o;
  o.penalty = 1e4;
  o.tolerance = 1e-12;
  const GameSolution sol = solve_penalized_game(s, g, o);
  const auto res = penalized_game_residual(value_field(sol), s, g, o.penalty);
  double worst = 0.0;
  for (double r : res) worst = std::max(worst, std::abs(r));
  EXPECT_LE(worst, 1e-6);
  EXPECT_THROW(penalized_game_residual(std::vector<double>(3), s, g, 1.0), UsageError);
}

TEST(GameResidual, PinnedAndDegenerate) {
  ObstacleSpec s;
  s.lower = [](double, double) { return 0.7; };
  s.upper = [](double, double) { return 0.7; };
  s.terminal = [](double) { return 0.7; };
  const FdGrid g = small_grid(10, 5);
  std::vector<double> w((g.nt + 1) * (g.ny + 1), 0.7);
  for (double r : penalized_game_residual(w, s, g, 1e3)) EXPECT_EQ(r, 0.0);
  // Disabled upper obstacle: only the lower penalty acts.
  ObstacleSpec one = s;
  one.upper = disabled_upper;
  std::vector<double> low(w.size(), 0.5);
  const auto r = penalized_game_residual(low, one, g, 10.0);
  EXPECT_NEAR(r[1 * (g.ny + 1) + 3], -10.0 * 0.2, 1e-12);
}

TEST(GameSolver, SaddlePointOnLattice) {
  const ObstacleSpec s = synthetic();
  GameOptions o;
  o.penalty = 20.0;
  o.lambda = 0.5;
  const GameSolution sol = solve_penalized_game(s, small_grid(), o);
  for (std::size_t i = 0; i <= 80; i += 8)
    for (std::size_t j = 0; j <= 120; j += 6) {
      const double w = sol.w(i, j), L = sol.lower(i, j), U = sol.upper(i, j);
      const double nu = sol.nu(i, j), mu = sol.mu(i, j);
      const double h = game_hamiltonian(nu, mu, w, L, U, o.penalty, o.lambda);
      const double tol = 1e-7 * (1.0 + o.penalty * (std::abs(L - w) + std::abs(U - w)));
      for (int k = 0; k <= 100; ++k) {
        const double q = k / 100.0;
        EXPECT_LE(game_hamiltonian(q, mu, w, L, U, o.penalty, o.lambda), h + tol);
        EXPECT_GE(game_hamiltonian(nu, q, w, L, U, o.penalty, o.lambda), h - tol);
      }
      const auto cf = optimal_probabilities(w, L, U, o.penalty, o.lambda);
      EXPECT_EQ(cf.nu, nu);
      EXPECT_EQ(cf.mu, mu);
    }
}

TEST(GameSolver, ConfigErrors) {
  ObstacleSpec s = synthetic();
  s.upper = [](double, double) { return -5.0; };
  EXPECT_THROW(solve_penalized_game(s, small_grid(), GameOptions{}), ConfigError);
  ObstacleSpec t = synthetic();
  t.terminal = [](double) { return 10.0; };
  EXPECT_THROW(solve_penalized_game(t, small_grid(), GameOptions{}), ConfigError);
  ObstacleSpec empty;
  EXPECT_THROW(solve_penalized_game(empty, small_grid(), GameOptions{}), ConfigError);
  GameOptions bad;
  bad.max_iterations = 1;
  bad.tolerance = 1e-16;
  EXPECT_THROW(solve_penalized_game(synthetic(), small_grid(), bad), SolverError);
}
