#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numbers>
#include <vector>

#include "xstop/error.hpp"
#include "xstop/market.hpp"

namespace xstop {

inline double std_normal_cdf(double y) noexcept { return 0.5 * std::erfc(-y / std::numbers::sqrt2); }

inline double std_normal_pdf(double y) noexcept {
  return std::exp(-0.5 * y * y) / std::sqrt(2.0 * std::numbers::pi);
}

/// Put contract as seen by the learner: everything except the volatility.
struct PutContract {
  double strike = 40.0;
  double rate = 0.06;
  double horizon = 1.0;

  static PutContract from(const MarketParams& p) { return {p.strike, p.rate, p.horizon}; }
};

namespace detail {
inline void check_time(double t, const PutContract& c) {
  if (t > c.horizon * (1.0 + 1e-12) || t < 0.0)
    throw DomainError("valuation time outside [0, T]");
}
}  // namespace detail

/// Black-Scholes European put with volatility `phi`.  Returns the payoff at
/// t = T and the discounted strike for x <= 0.
inline double european_put_value(double t, double x, double phi, const PutContract& c) {
  detail::check_time(t, c);
  if (!(phi > 0.0)) throw DomainError("volatility parameter must be positive");
  const double tau = c.horizon - t;
  if (tau <= 0.0) return payoff_put(x, c.strike);
  const double disc_strike = c.strike * std::exp(-c.rate * tau);
  if (x <= 0.0) return disc_strike;
  const double s = phi * std::sqrt(tau);
  const double m = std::log(x / c.strike) + c.rate * tau;
  const double d_plus = (m + 0.5 * phi * phi * tau) / s;
  const double d_minus = d_plus - s;
  return disc_strike * std_normal_cdf(-d_minus) - x * std_normal_cdf(-d_plus);
}

// dV_E/dphi = x sqrt(T - t) n(d_+).
inline double european_put_vega(double t, double x, double phi, const PutContract& c) {
  detail::check_time(t, c);
  const double tau = c.horizon - t;
  if (tau <= 0.0 || x <= 0.0) return 0.0;
  const double s = phi * std::sqrt(tau);
  const double d_plus = (std::log(x / c.strike) + (c.rate + 0.5 * phi * phi) * tau) / s;
  return x * std::sqrt(tau) * std_normal_pdf(d_plus);
}

/// Early-exercise premium payoff g(x) - V_E(t, x; phi).  Zero at maturity.
inline double premium_payoff(double t, double x, double phi, const PutContract& c) {
  return payoff_put(x, c.strike) - european_put_value(t, x, phi, c);
}

/// Payoff used by the stopping problem: either the plain put payoff or the
/// early-exercise premium payoff with a volatility surrogate phi.
struct StoppingPayoff {
  enum class Kind { put, premium };
  Kind kind = Kind::premium;
  PutContract contract;
  double phi = 0.4;

  double operator()(double t, double x) const {
    return kind == Kind::put ? payoff_put(x, contract.strike)
                             : premium_payoff(t, x, phi, contract);
  }
  // Value added back to turn a learned premium into an option value.
  double european_part(double t, double x) const {
    return kind == Kind::put ? 0.0 : european_put_value(t, x, phi, contract);
  }
};

struct CalibrationConfig {
  double phi0 = 0.8;
  std::size_t steps = 2000;
  std::size_t batch = 1024;
  std::size_t intervals = 50;
  double learning_rate = 0.001;
  std::uint64_t seed = 7;
  bool exact_paths = false;  // exact lognormal increments instead of Euler
};

struct CalibrationRow {
  std::size_t step;
  double phi;
  double loss;
  bool clamped = false;
};

struct CalibrationResult {
  std::vector<CalibrationRow> trace;  // row 0 is the initial phi
  double phi;
};

struct PhiLoss {
  double loss;
  double gradient;
};

/// Martingale loss of the European value in phi on a fixed batch, with its
/// analytic derivative:
///   1/2 mean_m sum_l (e^{-rT}(K - X_T)^+ - e^{-r t_l} V_E(t_l, X_l; phi))^2 dt.
inline PhiLoss phi_martingale_loss(const PathBatch& batch, double phi, const PutContract& c) {
  const TimeGrid& grid = batch.grid();
  const std::size_t L = grid.intervals();
  const double dt = grid.dt();
  double loss = 0.0, grad = 0.0;
  for (std::size_t m = 0; m < batch.paths(); ++m) {
    const double target = std::exp(-c.rate * c.horizon) * payoff_put(batch(m, L), c.strike);
    for (std::size_t l = 0; l < L; ++l) {
      const double t = grid.time(l);
      const double disc = std::exp(-c.rate * t);
      const double x = batch(m, l);
      const double resid = target - disc * european_put_value(t, x, phi, c);
      loss += 0.5 * resid * resid * dt;
      grad -= resid * disc * european_put_vega(t, x, phi, c) * dt;
    }
  }
  const double n = static_cast<double>(batch.paths());
  return {loss / n, grad / n};
}

namespace detail {
inline PathBatch calibration_batch(const MarketParams& market, const TimeGrid& grid,
                                   std::size_t paths, std::uint64_t seed, bool exact) {
  if (!exact) return simulate_paths(market, grid, paths, seed);
  PathBatch batch(grid, paths, seed);
  const double dt = grid.dt();
  const double drift = (market.rate - 0.5 * market.sigma * market.sigma) * dt;
  const double vol = market.sigma * std::sqrt(dt);
  for (std::size_t m = 0; m < paths; ++m) {
    Stream stream(seed, m);
    std::normal_distribution<double> normal(0.0, 1.0);
    double x = market.x0;
    batch(m, 0) = x;
    for (std::size_t l = 0; l < grid.intervals(); ++l) {
      x *= std::exp(drift + vol * normal(stream));
      batch(m, l + 1) = x;
    }
  }
  return batch;
}
}  // namespace detail

/// Stochastic gradient descent on the phi martingale loss over fresh batches.
/// The simulator uses the market's true volatility; the learner only sees
/// simulated prices.
inline CalibrationResult calibrate_phi(const MarketParams& market, const CalibrationConfig& cfg) {
  market.validate();
  if (!(cfg.phi0 > 0.0)) throw ConfigError("calibration phi0 must be positive");
  if (cfg.batch == 0) throw ConfigError("calibration batch must be positive");
  if (!(cfg.learning_rate >= 0.0)) throw ConfigError("calibration learning rate must be >= 0");
  const TimeGrid grid(market.horizon, cfg.intervals);
  const PutContract contract = PutContract::from(market);
  constexpr double phi_floor = 1e-6;

  CalibrationResult result{{}, cfg.phi0};
  double phi = cfg.phi0;
  result.trace.push_back({0, phi, std::nan(""), false});
  for (std::size_t step = 1; step <= cfg.steps; ++step) {
    const PathBatch batch =
        detail::calibration_batch(market, grid, cfg.batch, stream_key(cfg.seed, step), cfg.exact_paths);
    const PhiLoss l = phi_martingale_loss(batch, phi, contract);
    if (!std::isfinite(l.gradient)) throw TrainingError("non-finite phi gradient");
    phi -= cfg.learning_rate * l.gradient;
    bool clamped = false;
    if (phi <= 0.0) {
      phi = phi_floor;
      clamped = true;
    }
    result.trace.push_back({step, phi, l.loss, clamped});
  }
  result.phi = phi;
  return result;
}

}  // namespace xstop
