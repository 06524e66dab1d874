#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "xstop/error.hpp"
#include "xstop/market.hpp"
#include "xstop/policy.hpp"
#include "xstop/premium.hpp"
#include "xstop/tridiagonal.hpp"

namespace xstop {

/// Space-time mesh in log-price y = log x: y_j = y_min + j dy, t_i = i dt.
struct FdGrid {
  double y_min = 0.0;
  double y_max = 0.0;
  std::size_t ny = 0;  // number of space intervals
  std::size_t nt = 0;  // number of time intervals
  double horizon = 1.0;

  double dy() const noexcept { return (y_max - y_min) / static_cast<double>(ny); }
  double dt() const noexcept { return horizon / static_cast<double>(nt); }
  double y(std::size_t j) const noexcept {
    return j == ny ? y_max : y_min + static_cast<double>(j) * dy();
  }
  double x(std::size_t j) const noexcept { return std::exp(y(j)); }
  double t(std::size_t i) const noexcept {
    return i == nt ? horizon : static_cast<double>(i) * dt();
  }

  void validate() const {
    if (ny < 3) throw ConfigError("fd grid needs at least 3 space intervals");
    if (nt < 1) throw ConfigError("fd grid needs at least 1 time interval");
    if (!(y_max > y_min)) throw ConfigError("fd grid has an empty log-price range");
    if (!(horizon > 0.0)) throw ConfigError("fd grid horizon must be positive");
  }
};

struct FdGridOptions {
  std::size_t ny = 2000;
  std::size_t nt = 2000;
  double halfwidth = 6.0;
  // Center the log range on log(strike); otherwise use the symmetric [-N, N].
  bool center_on_strike = true;
};

inline FdGrid make_fd_grid(const MarketParams& p, const FdGridOptions& o = {}) {
  const double c = o.center_on_strike ? std::log(p.strike) : 0.0;
  FdGrid g{c - o.halfwidth, c + o.halfwidth, o.ny, o.nt, p.horizon};
  g.validate();
  return g;
}

namespace detail {

// Off-diagonal weights of the implicit generator 1/2 s^2 u_yy + b u_y - r u:
// lower = a, upper = c, with a, c >= 0 required for a monotone scheme.
struct GeneratorRow {
  double lower;
  double upper;
  double kill;
};

inline GeneratorRow generator_row(double half_var, double drift, double kill, double dy) {
  const double diff = half_var / (dy * dy);
  const double adv = drift / (2.0 * dy);
  return {diff - adv, diff + adv, kill};
}

inline GeneratorRow black_scholes_row(const MarketParams& p, double dy) {
  return generator_row(0.5 * p.sigma * p.sigma, p.rate - 0.5 * p.sigma * p.sigma, p.rate, dy);
}

inline void check_monotone(const GeneratorRow& r) {
  if (r.lower < 0.0 || r.upper < 0.0)
    throw ConfigError("fd grid too coarse: need dy <= sigma^2 / |drift| for a monotone scheme");
}

inline double softplus(double z) noexcept {
  return z > 0.0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z));
}

}  // namespace detail

struct FdOptions {
  double penalty = 1e6;   // K; 0 disables the obstacle
  double lambda = 0.0;    // entropy temperature; 0 gives the plain penalty K (g - u)^+
  double tolerance = 1e-8;
  std::size_t max_iterations = 100;
  StoppingPayoff payoff{StoppingPayoff::Kind::put, {}, 0.4};
};

/// Value grid u(t_i, y_j) with metadata describing how it was produced.
class FdSolution {
 public:
  FdSolution(FdGrid grid, MarketParams params, FdOptions options)
      : grid_(grid), params_(params), options_(options),
        u_((grid.nt + 1) * (grid.ny + 1)), iterations_(grid.nt + 1, 0) {}

  const FdGrid& grid() const noexcept { return grid_; }
  const MarketParams& params() const noexcept { return params_; }
  const FdOptions& options() const noexcept { return options_; }
  double penalty() const noexcept { return options_.penalty; }

  double operator()(std::size_t i, std::size_t j) const noexcept { return u_[i * cols() + j]; }
  double& operator()(std::size_t i, std::size_t j) noexcept { return u_[i * cols() + j]; }
  std::span<const double> row(std::size_t i) const noexcept {
    return {u_.data() + i * cols(), cols()};
  }
  std::span<double> row(std::size_t i) noexcept { return {u_.data() + i * cols(), cols()}; }
  std::size_t cols() const noexcept { return grid_.ny + 1; }

  double obstacle(std::size_t i, std::size_t j) const {
    return options_.payoff(grid_.t(i), grid_.x(j));
  }

  // Newton iterations used per time row (0 for the terminal row).
  const std::vector<std::size_t>& iterations() const noexcept { return iterations_; }
  std::vector<std::size_t>& iterations() noexcept { return iterations_; }

 private:
  FdGrid grid_;
  MarketParams params_;
  FdOptions options_;
  std::vector<double> u_;
  std::vector<std::size_t> iterations_;
};

/// Fully implicit scheme for the penalized obstacle problem
///   u_t + 1/2 s^2 u_yy + (r - s^2/2) u_y - r u + P(g - u) = 0,  u(T) = g(T),
/// with P(z) = K z^+ (lambda = 0) or lambda * softplus(K z / lambda), the
/// entropy-regularized penalty.  Each time row is solved by Newton iteration
/// on the penalty term; the boundary rows are pinned to the obstacle.
inline FdSolution solve_penalized_vi(const MarketParams& params, const FdGrid& grid,
                                     const FdOptions& opt) {
  params.validate();
  grid.validate();
  if (!(opt.penalty >= 0.0)) throw ConfigError("penalty factor must be nonnegative");
  if (!(opt.lambda >= 0.0)) throw ConfigError("entropy temperature must be nonnegative");
  if (!(opt.tolerance > 0.0)) throw ConfigError("Newton tolerance must be positive");
  const double dy = grid.dy();
  const double dt = grid.dt();
  const auto gen = detail::black_scholes_row(params, dy);
  detail::check_monotone(gen);

  FdSolution sol(grid, params, opt);
  const std::size_t nj = grid.ny + 1;
  for (std::size_t j = 0; j < nj; ++j) sol(grid.nt, j) = sol.obstacle(grid.nt, j);

  const std::size_t n = grid.ny - 1;  // interior unknowns
  std::vector<double> lower(n, -gen.lower), upper(n, -gen.upper), diag(n), rhs(n), next(n),
      g(n), scratch;
  const double base_diag = 1.0 / dt + gen.lower + gen.upper + gen.kill;
  const double K = opt.penalty;
  const double lam = opt.lambda;

  for (std::size_t i = grid.nt; i-- > 0;) {
    const double g_lo = sol.obstacle(i, 0);
    const double g_hi = sol.obstacle(i, grid.ny);
    sol(i, 0) = g_lo;
    sol(i, grid.ny) = g_hi;
    for (std::size_t j = 0; j < n; ++j) g[j] = sol.obstacle(i, j + 1);
    // u^0 = u_{i+1}
    std::vector<double> cur(sol.row(i + 1).begin() + 1, sol.row(i + 1).begin() + 1 + n);
    bool converged = false;
    std::size_t k = 0;
    for (; k < opt.max_iterations; ++k) {
      for (std::size_t j = 0; j < n; ++j) {
        // Linearize P(g - u) around the previous iterate: P ~ p0 - slope (u - u^k).
        double slope = 0.0, p0 = 0.0;
        const double gap = g[j] - cur[j];
        if (K > 0.0) {
          if (lam > 0.0) {
            slope = K * logistic_of_negative(-K * gap / lam);
            p0 = lam * detail::softplus(K * gap / lam);
          } else if (gap > 0.0) {
            slope = K;
            p0 = K * gap;
          }
        }
        diag[j] = base_diag + slope;
        rhs[j] = sol(i + 1, j + 1) / dt + p0 + slope * cur[j];
      }
      rhs[0] += gen.lower * g_lo;
      rhs[n - 1] += gen.upper * g_hi;
      solve_tridiagonal(lower, diag, upper, rhs, next, scratch);
      double diff = 0.0, scale = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        diff = std::max(diff, std::abs(next[j] - cur[j]));
        scale = std::max(scale, std::abs(cur[j]));
      }
      cur.swap(next);
      if (diff < opt.tolerance * std::max(1.0, scale)) {
        converged = true;
        ++k;
        break;
      }
    }
    if (!converged)
      throw SolverError("penalty Newton iteration did not converge at time row " +
                        std::to_string(i) + " after " + std::to_string(opt.max_iterations) +
                        " iterations (ny=" + std::to_string(grid.ny) +
                        ", nt=" + std::to_string(grid.nt) + ")");
    sol.iterations()[i] = k;
    std::copy(cur.begin(), cur.end(), sol.row(i).begin() + 1);
  }
  return sol;
}

/// Value of a given randomized stopping policy pi(t, x) for the entropy-
/// regularized problem: a linear implicit solve of
///   u_t + L u + K pi (g - u) - lambda H(pi) = 0,  u(T) = g(T).
inline FdSolution evaluate_policy_fd(const MarketParams& params, const FdGrid& grid,
                                     const FdOptions& opt,
                                     const std::function<double(double, double)>& policy) {
  params.validate();
  grid.validate();
  const double dy = grid.dy();
  const double dt = grid.dt();
  const auto gen = detail::black_scholes_row(params, dy);
  detail::check_monotone(gen);
  FdSolution sol(grid, params, opt);
  for (std::size_t j = 0; j <= grid.ny; ++j) sol(grid.nt, j) = sol.obstacle(grid.nt, j);
  const std::size_t n = grid.ny - 1;
  std::vector<double> lower(n, -gen.lower), upper(n, -gen.upper), diag(n), rhs(n), out(n), scratch;
  const double base_diag = 1.0 / dt + gen.lower + gen.upper + gen.kill;
  for (std::size_t i = grid.nt; i-- > 0;) {
    const double t = grid.t(i);
    const double g_lo = sol.obstacle(i, 0);
    const double g_hi = sol.obstacle(i, grid.ny);
    sol(i, 0) = g_lo;
    sol(i, grid.ny) = g_hi;
    for (std::size_t j = 0; j < n; ++j) {
      const double x = grid.x(j + 1);
      const double pi = policy(t, x);
      const double g = opt.payoff(t, x);
      diag[j] = base_diag + opt.penalty * pi;
      rhs[j] = sol(i + 1, j + 1) / dt + opt.penalty * pi * g - opt.lambda * bernoulli_entropy(pi);
    }
    rhs[0] += gen.lower * g_lo;
    rhs[n - 1] += gen.upper * g_hi;
    solve_tridiagonal(lower, diag, upper, rhs, out, scratch);
    std::copy(out.begin(), out.end(), sol.row(i).begin() + 1);
    sol.iterations()[i] = 1;
  }
  return sol;
}

/// Bilinear interpolation in (t, log x).  Exact at nodes.
inline double price_at(const FdSolution& sol, double t, double x) {
  const FdGrid& g = sol.grid();
  if (!(x > 0.0)) throw DomainError("price_at: x must be positive");
  const double y = std::log(x);
  const double eps_y = 1e-12 * (1.0 + std::abs(g.y_max));
  if (y < g.y_min - eps_y || y > g.y_max + eps_y)
    throw DomainError("price_at: x outside the grid coverage");
  if (t < -1e-12 || t > g.horizon * (1.0 + 1e-12))
    throw DomainError("price_at: t outside [0, T]");
  auto locate = [](double v, double lo, double h, std::size_t cells) {
    double s = (v - lo) / h;
    s = std::clamp(s, 0.0, static_cast<double>(cells));
    std::size_t k = std::min(static_cast<std::size_t>(s), cells - 1);
    double w = s - static_cast<double>(k);
    if (w < 1e-12) w = 0.0;
    if (w > 1.0 - 1e-12) {
      w = 0.0;
      k += 1;
      if (k == cells) {
        k = cells - 1;
        w = 1.0;
      }
    }
    return std::pair{k, w};
  };
  const auto [i, wt] = locate(t, 0.0, g.dt(), g.nt);
  const auto [j, wy] = locate(y, g.y_min, g.dy(), g.ny);
  auto at = [&](std::size_t a, std::size_t b) {
    return sol(std::min(a, g.nt), std::min(b, g.ny));
  };
  const double v0 = wy == 0.0 ? at(i, j) : (1.0 - wy) * at(i, j) + wy * at(i, j + 1);
  if (wt == 0.0) return v0;
  const double v1 = wy == 0.0 ? at(i + 1, j) : (1.0 - wy) * at(i + 1, j) + wy * at(i + 1, j + 1);
  return (1.0 - wt) * v0 + wt * v1;
}

/// Critical price X_f(t_i) per time row; absent rows have no stop region.
struct FreeBoundary {
  std::vector<double> times;
  std::vector<std::optional<double>> x;

  std::size_t present() const {
    return static_cast<std::size_t>(std::count_if(x.begin(), x.end(), [](auto& v) { return v.has_value(); }));
  }

  /// Linear interpolation in time between present rows.
  std::optional<double> at(double t) const {
    if (times.empty()) return std::nullopt;
    auto it = std::lower_bound(times.begin(), times.end(), t - 1e-12);
    std::size_t hi = static_cast<std::size_t>(it - times.begin());
    if (hi >= times.size()) hi = times.size() - 1;
    if (std::abs(times[hi] - t) <= 1e-12 * (1.0 + std::abs(t))) return x[hi];
    if (hi == 0) return x[0];
    const std::size_t lo = hi - 1;
    if (!x[lo] || !x[hi]) return std::nullopt;
    const double w = (t - times[lo]) / (times[hi] - times[lo]);
    return (1.0 - w) * *x[lo] + w * *x[hi];
  }
};

/// Per time row, the top of the contiguous stop region {u - g <= tol} that
/// starts just above the lower boundary, restricted to prices below the
/// strike.  A cleanup pass makes the boundary nondecreasing in t.
inline FreeBoundary extract_free_boundary(const FdSolution& sol, double tol = 1e-6) {
  const FdGrid& g = sol.grid();
  const double strike = sol.options().payoff.contract.strike;
  FreeBoundary fb;
  fb.times.resize(g.nt + 1);
  fb.x.resize(g.nt + 1);
  for (std::size_t i = 0; i <= g.nt; ++i) {
    fb.times[i] = g.t(i);
    std::optional<double> top;
    for (std::size_t j = 1; j < g.ny; ++j) {
      const double x = g.x(j);
      if (x >= strike) break;
      if (sol(i, j) - sol.obstacle(i, j) <= tol)
        top = x;
      else
        break;
    }
    fb.x[i] = top;
  }
  for (std::size_t i = g.nt; i-- > 0;) {
    if (fb.x[i] && fb.x[i + 1]) fb.x[i] = std::min(*fb.x[i], *fb.x[i + 1]);
  }
  return fb;
}

}  // namespace xstop
