#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <ostream>
#include <string>
#include <vector>

#include "xstop/error.hpp"
#include "xstop/fd_oracle.hpp"
#include "xstop/policy.hpp"
#include "xstop/tridiagonal.hpp"

namespace xstop::dynkin {

using Field = std::function<double(double t, double z)>;
using Coefficient = std::function<double(double z)>;

/// Two-sided stopping game on a one-dimensional state z:
///   max{ min{ -w_t - Lw, w - lower }, w - upper } = 0,  w(T) = terminal,
/// with generator Lw = 1/2 s(z)^2 w_zz + b(z) w_z - k(z) w.
struct ObstacleSpec {
  Field lower;                 // L(t, z); the maximizer may stop and collect it
  Field upper;                 // U(t, z); the minimizer may stop and pay it
  std::function<double(double z)> terminal;  // H(z)
  Coefficient drift = [](double) { return 0.0; };
  Coefficient diffusion = [](double) { return 0.0; };
  Coefficient killing = [](double) { return 0.0; };
  // Edge values; by default H clamped into [L, U] at the edge.
  Field boundary;
  double cost_rate = 0.0;  // documentation only (transaction cost source)

  double edge(double t, double z) const {
    if (boundary) return boundary(t, z);
    return std::clamp(terminal(z), lower(t, z), upper(t, z));
  }
};

inline double disabled_upper(double, double) { return std::numeric_limits<double>::infinity(); }
inline double disabled_lower(double, double) { return -std::numeric_limits<double>::infinity(); }

struct GamePolicies {
  double nu;
  double mu;
};

/// nu* = 1/(1 + exp(-K (L - w)/lambda)), mu* = 1/(1 + exp(-K (w - U)/lambda)),
/// both clipped to [eps, 1 - eps].
inline GamePolicies optimal_probabilities(double w, double L, double U, double penalty,
                                          double lambda) {
  if (!(penalty > 0.0) || !(lambda > 0.0))
    throw ConfigError("game probabilities need K > 0 and lambda > 0");
  auto clip = [](double p) { return std::clamp(p, kProbabilityClip, 1.0 - kProbabilityClip); };
  const double a = penalty / lambda;
  return {clip(logistic_of_negative(-a * (L - w))), clip(logistic_of_negative(-a * (w - U)))};
}

/// Regularized pointwise Hamiltonian
///   K nu (L - w) - lambda H(nu) + K mu (U - w) + lambda H(mu),
/// maximized over nu and minimized over mu.
inline double game_hamiltonian(double nu, double mu, double w, double L, double U, double penalty,
                               double lambda) {
  double h = penalty * nu * (L - w) - lambda * bernoulli_entropy(nu) + lambda * bernoulli_entropy(mu);
  if (std::isfinite(U)) h += penalty * mu * (U - w);
  return h;
}

struct GameOptions {
  double penalty = 1e6;
  double lambda = 1.0;  // only shapes the emitted policy fields
  double tolerance = 1e-8;
  std::size_t max_iterations = 100;
};

/// w(t_i, z_j) on an FdGrid (its y coordinate is z) plus the policy fields.
class GameSolution {
 public:
  GameSolution(FdGrid grid, GameOptions opt)
      : grid_(grid), options_(opt), w_(size()), nu_(size()), mu_(size()), lower_(size()),
        upper_(size()), iterations_(grid.nt + 1, 0) {}

  const FdGrid& grid() const noexcept { return grid_; }
  const GameOptions& options() const noexcept { return options_; }
  std::size_t cols() const noexcept { return grid_.ny + 1; }

  double w(std::size_t i, std::size_t j) const noexcept { return w_[i * cols() + j]; }
  double& w(std::size_t i, std::size_t j) noexcept { return w_[i * cols() + j]; }
  double nu(std::size_t i, std::size_t j) const noexcept { return nu_[i * cols() + j]; }
  double mu(std::size_t i, std::size_t j) const noexcept { return mu_[i * cols() + j]; }
  double lower(std::size_t i, std::size_t j) const noexcept { return lower_[i * cols() + j]; }
  double upper(std::size_t i, std::size_t j) const noexcept { return upper_[i * cols() + j]; }
  const std::vector<std::size_t>& iterations() const noexcept { return iterations_; }

 private:
  friend GameSolution solve_penalized_game(const ObstacleSpec&, const FdGrid&, const GameOptions&);
  std::size_t size() const noexcept { return (grid_.nt + 1) * (grid_.ny + 1); }

  FdGrid grid_;
  GameOptions options_;
  std::vector<double> w_, nu_, mu_, lower_, upper_;
  std::vector<std::size_t> iterations_;
};

namespace detail {
inline xstop::detail::GeneratorRow row_at(const ObstacleSpec& s, double z, double dy) {
  const double sd = s.diffusion(z);
  auto r = xstop::detail::generator_row(0.5 * sd * sd, s.drift(z), s.killing(z), dy);
  xstop::detail::check_monotone(r);
  return r;
}
}  // namespace detail

/// Backward implicit marching with a two-sided Newton iteration on
///   w_t + Lw + K (L - w)^+ - K (w - U)^+ = 0.
inline GameSolution solve_penalized_game(const ObstacleSpec& spec, const FdGrid& grid,
                                         const GameOptions& opt) {
  grid.validate();
  if (!(opt.penalty > 0.0)) throw ConfigError("game penalty must be positive");
  if (!(opt.lambda > 0.0)) throw ConfigError("game temperature must be positive");
  if (!(opt.tolerance > 0.0)) throw ConfigError("Newton tolerance must be positive");
  if (!spec.lower || !spec.upper || !spec.terminal) throw ConfigError("obstacle spec incomplete");

  GameSolution sol(grid, opt);
  const std::size_t nt = grid.nt, ny = grid.ny, nj = ny + 1;
  for (std::size_t i = 0; i <= nt; ++i) {
    const double t = grid.t(i);
    for (std::size_t j = 0; j < nj; ++j) {
      const double L = spec.lower(t, grid.y(j)), U = spec.upper(t, grid.y(j));
      if (L > U)
        throw ConfigError("incompatible obstacles: lower > upper at t=" + std::to_string(t) +
                          ", z=" + std::to_string(grid.y(j)));
      sol.lower_[i * nj + j] = L;
      sol.upper_[i * nj + j] = U;
    }
  }
  for (std::size_t j = 0; j < nj; ++j) {
    const double h = spec.terminal(grid.y(j));
    if (h < sol.lower(nt, j) - 1e-12 || h > sol.upper(nt, j) + 1e-12)
      throw ConfigError("terminal value outside [lower, upper] at z=" + std::to_string(grid.y(j)));
    sol.w(nt, j) = h;
  }

  const double dt = grid.dt(), dy = grid.dy(), K = opt.penalty;
  const std::size_t n = ny - 1;
  std::vector<xstop::detail::GeneratorRow> rows(n);
  for (std::size_t j = 0; j < n; ++j) rows[j] = detail::row_at(spec, grid.y(j + 1), dy);
  std::vector<double> lo(n), up(n), diag(n), rhs(n), next(n), scratch;
  for (std::size_t j = 0; j < n; ++j) {
    lo[j] = -rows[j].lower;
    up[j] = -rows[j].upper;
  }

  for (std::size_t i = nt; i-- > 0;) {
    const double t = grid.t(i);
    const double e_lo = spec.edge(t, grid.y(0));
    const double e_hi = spec.edge(t, grid.y(ny));
    sol.w(i, 0) = e_lo;
    sol.w(i, ny) = e_hi;
    std::vector<double> cur(n);
    for (std::size_t j = 0; j < n; ++j) cur[j] = sol.w(i + 1, j + 1);
    bool converged = false;
    std::size_t k = 0;
    for (; k < opt.max_iterations; ++k) {
      for (std::size_t j = 0; j < n; ++j) {
        const auto& r = rows[j];
        const double L = sol.lower(i, j + 1), U = sol.upper(i, j + 1);
        diag[j] = 1.0 / dt + r.lower + r.upper + r.kill;
        rhs[j] = sol.w(i + 1, j + 1) / dt;
        if (L - cur[j] > 0.0) {
          diag[j] += K;
          rhs[j] += K * L;
        }
        if (cur[j] - U > 0.0) {
          diag[j] += K;
          rhs[j] += K * U;
        }
      }
      rhs[0] += rows[0].lower * e_lo;
      rhs[n - 1] += rows[n - 1].upper * e_hi;
      solve_tridiagonal(lo, diag, up, rhs, next, scratch);
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
      throw SolverError("game Newton iteration did not converge at time row " + std::to_string(i) +
                        " (ny=" + std::to_string(ny) + ", nt=" + std::to_string(nt) + ")");
    sol.iterations_[i] = k;
    for (std::size_t j = 0; j < n; ++j) sol.w(i, j + 1) = cur[j];
  }

  for (std::size_t i = 0; i <= nt; ++i)
    for (std::size_t j = 0; j < nj; ++j) {
      const auto p = optimal_probabilities(sol.w(i, j), sol.lower(i, j), sol.upper(i, j), K,
                                           opt.lambda);
      sol.nu_[i * nj + j] = p.nu;
      sol.mu_[i * nj + j] = p.mu;
    }
  return sol;
}

/// Pointwise residual of -w_t - Lw - K (w - L)^- + K (w - U)^+ under implicit
/// differencing, for interior nodes of rows i < nt (edges and the terminal row
/// are zero).  `w` is row-major (nt+1) x (ny+1).
inline std::vector<double> penalized_game_residual(const std::vector<double>& w,
                                                   const ObstacleSpec& spec, const FdGrid& grid,
                                                   double penalty) {
  const std::size_t nj = grid.ny + 1;
  if (w.size() != (grid.nt + 1) * nj) throw UsageError("residual field has the wrong shape");
  std::vector<double> res(w.size(), 0.0);
  const double dt = grid.dt(), dy = grid.dy();
  for (std::size_t i = 0; i < grid.nt; ++i) {
    const double t = grid.t(i);
    for (std::size_t j = 1; j < grid.ny; ++j) {
      const double z = grid.y(j);
      const auto r = detail::row_at(spec, z, dy);
      const double c = w[i * nj + j];
      const double gen = r.lower * w[i * nj + j - 1] + r.upper * w[i * nj + j + 1] -
                         (r.lower + r.upper + r.kill) * c;
      const double L = spec.lower(t, z), U = spec.upper(t, z);
      double v = -(w[(i + 1) * nj + j] - c) / dt - gen - penalty * std::max(L - c, 0.0);
      if (std::isfinite(U)) v += penalty * std::max(c - U, 0.0);
      res[i * nj + j] = v;
    }
  }
  return res;
}

inline std::vector<double> value_field(const GameSolution& s) {
  std::vector<double> out;
  out.reserve((s.grid().nt + 1) * s.cols());
  for (std::size_t i = 0; i <= s.grid().nt; ++i)
    for (std::size_t j = 0; j < s.cols(); ++j) out.push_back(s.w(i, j));
  return out;
}

/// CSV slice at time row i: z,w,lower,upper,nu,mu (17 significant digits).
inline void write_slice_csv(std::ostream& os, const GameSolution& s, std::size_t i) {
  if (i > s.grid().nt) throw DomainError("slice index out of range");
  const auto old = os.precision(17);
  os << "z,w,lower,upper,nu,mu\n";
  for (std::size_t j = 0; j < s.cols(); ++j)
    os << s.grid().y(j) << ',' << s.w(i, j) << ',' << s.lower(i, j) << ',' << s.upper(i, j) << ','
       << s.nu(i, j) << ',' << s.mu(i, j) << '\n';
  os.precision(old);
}

/// The American put premium setup in log price with the upper obstacle
/// disabled; solves the same problem as the single-obstacle oracle.
inline ObstacleSpec single_obstacle_spec(const MarketParams& p, const StoppingPayoff& payoff) {
  ObstacleSpec s;
  s.lower = [payoff](double t, double z) { return payoff(t, std::exp(z)); };
  s.upper = disabled_upper;
  s.terminal = [payoff, T = p.horizon](double z) { return payoff(T, std::exp(z)); };
  const double half = 0.5 * p.sigma * p.sigma;
  s.drift = [b = p.rate - half](double) { return b; };
  s.diffusion = [sd = p.sigma](double) { return sd; };
  s.killing = [r = p.rate](double) { return r; };
  s.boundary = s.lower;
  return s;
}

}  // namespace xstop::dynkin
