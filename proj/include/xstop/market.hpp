#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "xstop/error.hpp"
#include "xstop/rng.hpp"

namespace xstop {

/// Equally spaced decision times t_l = l * dt, l = 0..L.
class TimeGrid {
 public:
  TimeGrid(double horizon, std::size_t intervals) : horizon_(horizon), intervals_(intervals) {
    if (intervals == 0) throw ConfigError("time grid needs at least one interval");
    if (!(horizon > 0.0) || !std::isfinite(horizon))
      throw ConfigError("time grid horizon must be positive");
    dt_ = horizon / static_cast<double>(intervals);
  }

  double horizon() const noexcept { return horizon_; }
  std::size_t intervals() const noexcept { return intervals_; }
  std::size_t points() const noexcept { return intervals_ + 1; }
  double dt() const noexcept { return dt_; }

  double time(std::size_t l) const noexcept {
    return l == intervals_ ? horizon_ : static_cast<double>(l) * dt_;
  }

 private:
  double horizon_;
  std::size_t intervals_;
  double dt_;
};

/// Contract and diffusion primitives.  The volatility is hidden from learners
/// and only read by the simulator and the finite-difference oracle.
struct MarketParams {
  double x0 = 40.0;
  double rate = 0.06;
  double sigma = 0.4;
  double strike = 40.0;
  double horizon = 1.0;

  void validate() const {
    if (!(x0 > 0.0)) throw ConfigError("market.x0 must be positive");
    if (!(strike > 0.0)) throw ConfigError("market.strike must be positive");
    if (!(sigma > 0.0)) throw ConfigError("market.sigma must be positive");
    if (!(horizon > 0.0)) throw ConfigError("market.horizon must be positive");
    if (!(rate >= 0.0)) throw ConfigError("market.rate must be nonnegative");
  }
};

inline double payoff_put(double x, double strike) noexcept { return std::max(strike - x, 0.0); }

// Geometric Brownian motion coefficients dX = rate X dt + sigma X dW.
struct GbmDiffusion {
  double rate;
  double sigma;
  double drift(double /*t*/, double x) const noexcept { return rate * x; }
  double diffusion(double /*t*/, double x) const noexcept { return sigma * x; }
};

template <class D>
concept Diffusion = requires(const D& d, double t, double x) {
  { d.drift(t, x) } -> std::convertible_to<double>;
  { d.diffusion(t, x) } -> std::convertible_to<double>;
};

/// M simulated trajectories on an (L+1)-point grid, stored row-major.
class PathBatch {
 public:
  PathBatch(TimeGrid grid, std::size_t paths, std::uint64_t seed)
      : grid_(grid), paths_(paths), seed_(seed), prices_(paths * grid.points()) {}

  const TimeGrid& grid() const noexcept { return grid_; }
  std::size_t paths() const noexcept { return paths_; }
  std::size_t points() const noexcept { return grid_.points(); }
  std::uint64_t seed() const noexcept { return seed_; }
  // Number of Euler steps that crossed zero and were floored.
  std::size_t floored_steps() const noexcept { return floored_; }

  double operator()(std::size_t path, std::size_t l) const noexcept {
    return prices_[path * points() + l];
  }
  double& operator()(std::size_t path, std::size_t l) noexcept {
    return prices_[path * points() + l];
  }
  std::span<const double> path(std::size_t m) const noexcept {
    return {prices_.data() + m * points(), points()};
  }
  // Prices of all paths at time index l.
  std::vector<double> column(std::size_t l) const {
    std::vector<double> out(paths_);
    for (std::size_t m = 0; m < paths_; ++m) out[m] = (*this)(m, l);
    return out;
  }
  const std::vector<double>& data() const noexcept { return prices_; }

 private:
  template <Diffusion D>
  friend PathBatch simulate_paths(const D&, double, const TimeGrid&, std::size_t, std::uint64_t);

  TimeGrid grid_;
  std::size_t paths_;
  std::uint64_t seed_;
  std::size_t floored_ = 0;
  std::vector<double> prices_;
};

/// Forward Euler on price levels, one independent stream per path so that any
/// row can be regenerated from (seed, row) alone.
template <Diffusion D>
PathBatch simulate_paths(const D& diffusion, double x0, const TimeGrid& grid,
                         std::size_t batch_size, std::uint64_t seed) {
  if (batch_size == 0) throw ConfigError("batch size must be at least 1");
  if (!(x0 > 0.0)) throw ConfigError("initial price must be positive");
  PathBatch batch(grid, batch_size, seed);
  const double dt = grid.dt();
  const double sqrt_dt = std::sqrt(dt);
  const double floor = 1e-12 * x0;
  for (std::size_t m = 0; m < batch_size; ++m) {
    Stream stream(seed, m);
    std::normal_distribution<double> normal(0.0, 1.0);
    double x = x0;
    batch(m, 0) = x;
    for (std::size_t l = 0; l < grid.intervals(); ++l) {
      const double t = grid.time(l);
      const double dw = sqrt_dt * normal(stream);
      x = x + diffusion.drift(t, x) * dt + diffusion.diffusion(t, x) * dw;
      if (!(x > floor)) {
        x = floor;
        ++batch.floored_;
      }
      batch(m, l + 1) = x;
    }
  }
  return batch;
}

inline PathBatch simulate_paths(const MarketParams& params, const TimeGrid& grid,
                                std::size_t batch_size, std::uint64_t seed) {
  params.validate();
  if (std::abs(grid.horizon() - params.horizon) > 1e-12 * params.horizon)
    throw ConfigError("time grid horizon does not match market horizon");
  return simulate_paths(GbmDiffusion{params.rate, params.sigma}, params.x0, grid, batch_size, seed);
}

/// Terminal prices X_T drawn from the exact lognormal law, one stream per path.
inline std::vector<double> sample_gbm_terminal(const MarketParams& params, double tau,
                                               std::size_t count, std::uint64_t seed) {
  std::vector<double> out(count);
  const double drift = (params.rate - 0.5 * params.sigma * params.sigma) * tau;
  const double vol = params.sigma * std::sqrt(tau);
  for (std::size_t m = 0; m < count; ++m) {
    Stream stream(seed, m);
    std::normal_distribution<double> normal(0.0, 1.0);
    out[m] = params.x0 * std::exp(drift + vol * normal(stream));
  }
  return out;
}

// K * dt <= 1 keeps the discrete discount factor in [0, 1].
inline void check_penalty_step(double penalty, double dt) {
  if (!(penalty > 0.0)) throw ConfigError("penalty factor K must be positive");
  if (penalty * dt > 1.0 + 1e-12)
    throw ConfigError("penalty factor K must satisfy K*dt <= 1 (K=" + std::to_string(penalty) +
                      ", dt=" + std::to_string(dt) + ")");
}

inline double evolve_discount(double r_prev, double pi, double penalty, double dt) {
  check_penalty_step(penalty, dt);
  return r_prev * (1.0 - penalty * pi * dt);
}

/// Discount process R along each path: R_0 = 1, R_{l+1} = R_l (1 - K pi_l dt).
/// `pi` is row-major M x L.
class DiscountState {
 public:
  DiscountState(std::span<const double> pi, std::size_t paths, std::size_t intervals,
                double penalty, double dt)
      : paths_(paths), points_(intervals + 1), r_(paths * (intervals + 1)) {
    check_penalty_step(penalty, dt);
    if (pi.size() != paths * intervals) throw UsageError("pi has the wrong shape");
    for (std::size_t m = 0; m < paths; ++m) {
      double r = 1.0;
      r_[m * points_] = r;
      for (std::size_t l = 0; l < intervals; ++l) {
        r *= 1.0 - penalty * pi[m * intervals + l] * dt;
        r_[m * points_ + l + 1] = r;
      }
    }
  }

  double operator()(std::size_t path, std::size_t l) const noexcept {
    return r_[path * points_ + l];
  }
  std::size_t paths() const noexcept { return paths_; }

 private:
  std::size_t paths_;
  std::size_t points_;
  std::vector<double> r_;
};

}  // namespace xstop
