#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <vector>

#include <json.hpp>

#include "xstop/ensemble.hpp"
#include "xstop/error.hpp"
#include "xstop/fd_oracle.hpp"
#include "xstop/market.hpp"
#include "xstop/premium.hpp"

namespace xstop {

inline double relative_error(double price, double oracle) {
  if (!(oracle > 0.0)) throw DomainError("oracle price must be positive");
  return std::abs(price - oracle) / oracle;
}

/// Deterministic exercise decisions on a path batch, row-major M x (L+1).
/// stop(m, l) is 1 iff V_l(X_l) <= payoff(t_l, X_l), i.e. w_l <= 0 (ties stop).
/// The terminal column always stops.
class ExecutionPolicy {
 public:
  ExecutionPolicy(std::size_t paths, std::size_t points)
      : paths_(paths), points_(points), stop_(paths * points, 0) {}

  std::size_t paths() const noexcept { return paths_; }
  std::size_t points() const noexcept { return points_; }
  bool stop(std::size_t m, std::size_t l) const noexcept { return stop_[m * points_ + l] != 0; }
  void set(std::size_t m, std::size_t l, bool s) noexcept { stop_[m * points_ + l] = s ? 1 : 0; }

  /// From any source of w-values: wfn(l, xs) -> w per state.
  template <class WFn>
  static ExecutionPolicy from_w(const PathBatch& batch, WFn&& wfn) {
    const std::size_t L = batch.grid().intervals();
    ExecutionPolicy p(batch.paths(), L + 1);
    for (std::size_t l = 0; l < L; ++l) {
      const auto xs = batch.column(l);
      const std::vector<double> w = wfn(l, xs);
      for (std::size_t m = 0; m < batch.paths(); ++m) p.set(m, l, w[m] <= 0.0);
    }
    for (std::size_t m = 0; m < batch.paths(); ++m) p.set(m, L, true);
    return p;
  }

  static ExecutionPolicy from_ensemble(const ValueEnsemble& ens, const PathBatch& batch) {
    return from_w(batch, [&](std::size_t l, const std::vector<double>& xs) {
      return ens.evaluate_w(l, xs, ens.payoffs(l, xs), mlp::Mode::eval);
    });
  }

 private:
  std::size_t paths_;
  std::size_t points_;
  std::vector<std::uint8_t> stop_;
};

struct Estimate {
  double value = 0.0;
  double std_error = 0.0;
};

namespace detail {
inline Estimate mean_and_se(const std::vector<double>& v) {
  const double n = static_cast<double>(v.size());
  double mean = 0.0;
  for (double x : v) mean += x;
  mean /= n;
  double ss = 0.0;
  for (double x : v) ss += (x - mean) * (x - mean);
  const double var = v.size() > 1 ? ss / (n - 1.0) : 0.0;
  return {mean, std::sqrt(var / n)};
}
}  // namespace detail

/// E[e^{-r tau} g(X_tau)] with tau the first decision time where the rule
/// fires (T if it never does).
inline Estimate price_by_stopping(const ExecutionPolicy& policy, const PathBatch& batch,
                                  const PutContract& c) {
  const TimeGrid& grid = batch.grid();
  const std::size_t L = grid.intervals();
  std::vector<double> payoff(batch.paths());
  for (std::size_t m = 0; m < batch.paths(); ++m) {
    std::size_t l = 0;
    while (l < L && !policy.stop(m, l)) ++l;
    payoff[m] = std::exp(-c.rate * grid.time(l)) * payoff_put(batch(m, l), c.strike);
  }
  return detail::mean_and_se(payoff);
}

/// Value of the bang-bang control u in {0, 1} given by the execution rule:
///   sum_l K R_l e^{-r t_l} g(X_l) u_l dt + e^{-r T} R_L g(X_T),
/// with R_{l+1} = R_l (1 - K u_l dt).
inline Estimate price_by_control(const ExecutionPolicy& policy, const PathBatch& batch,
                                 const PutContract& c, double penalty) {
  const TimeGrid& grid = batch.grid();
  const std::size_t L = grid.intervals();
  const double dt = grid.dt();
  check_penalty_step(penalty, dt);
  std::vector<double> value(batch.paths());
  for (std::size_t m = 0; m < batch.paths(); ++m) {
    double r = 1.0, acc = 0.0;
    for (std::size_t l = 0; l < L; ++l) {
      if (policy.stop(m, l)) {
        acc += penalty * r * std::exp(-c.rate * grid.time(l)) * payoff_put(batch(m, l), c.strike) * dt;
        r *= 1.0 - penalty * dt;
      }
    }
    acc += std::exp(-c.rate * grid.horizon()) * r * payoff_put(batch(m, L), c.strike);
    value[m] = acc;
  }
  return detail::mean_and_se(value);
}

/// Fraction of paths per decision time l < L whose decision matches the
/// oracle side of the free boundary (stop iff x <= X_f(t_l)).  Slices with no
/// boundary are returned empty.
inline std::vector<std::optional<double>> classification_accuracy(const ExecutionPolicy& policy,
                                                                  const PathBatch& batch,
                                                                  const FreeBoundary& boundary) {
  const TimeGrid& grid = batch.grid();
  std::vector<std::optional<double>> acc(grid.intervals());
  for (std::size_t l = 0; l < grid.intervals(); ++l) {
    const auto xf = boundary.at(grid.time(l));
    if (!xf) continue;
    std::size_t correct = 0;
    for (std::size_t m = 0; m < batch.paths(); ++m) {
      const bool truth = batch(m, l) <= *xf;
      if (truth == policy.stop(m, l)) ++correct;
    }
    acc[l] = static_cast<double>(correct) / static_cast<double>(batch.paths());
  }
  return acc;
}

inline std::optional<double> min_accuracy(const std::vector<std::optional<double>>& acc) {
  std::optional<double> out;
  for (const auto& a : acc)
    if (a) out = out ? std::min(*out, *a) : *a;
  return out;
}

struct PriceReport {
  Estimate stopping;
  Estimate control;
  double oracle = 0.0;
  double rel_err_stopping = 0.0;
  double rel_err_control = 0.0;

  nlohmann::json to_json() const {
    return {{"p_stopping", stopping.value},
            {"se_stopping", stopping.std_error},
            {"p_control", control.value},
            {"se_control", control.std_error},
            {"oracle", oracle},
            {"rel_err_stopping", rel_err_stopping},
            {"rel_err_control", rel_err_control}};
  }
};

inline PriceReport price_report(const ExecutionPolicy& policy, const PathBatch& batch,
                                const PutContract& c, double penalty, double oracle) {
  PriceReport r;
  r.stopping = price_by_stopping(policy, batch, c);
  r.control = price_by_control(policy, batch, c, penalty);
  r.oracle = oracle;
  r.rel_err_stopping = relative_error(r.stopping.value, oracle);
  r.rel_err_control = relative_error(r.control.value, oracle);
  return r;
}

}  // namespace xstop
