#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "xstop/ensemble.hpp"
#include "xstop/error.hpp"
#include "xstop/market.hpp"
#include "xstop/mlp.hpp"
#include "xstop/policy.hpp"
#include "xstop/premium.hpp"
#include "xstop/pricing.hpp"

namespace xstop {

enum class TrainMode { offline_ml, online_td0 };

inline TrainMode parse_train_mode(const std::string& s) {
  if (s == "offline_ml") return TrainMode::offline_ml;
  if (s == "online_td0") return TrainMode::online_td0;
  throw ConfigError("unknown training mode '" + s + "' (expected offline_ml|online_td0)");
}
inline std::string to_string(TrainMode m) {
  return m == TrainMode::offline_ml ? "offline_ml" : "online_td0";
}

// How each G_l enters the loss.  `discounted` uses G_l as written, so path m
// carries weight (D_l R_l)^2 at step l; `normalized` divides G_l by D_l R_l,
// i.e. restarts the discount at t_l.  Both have the same minimizer V_l(x).
enum class LossWeighting { discounted, normalized };

inline LossWeighting parse_loss_weighting(const std::string& s) {
  if (s == "discounted") return LossWeighting::discounted;
  if (s == "normalized") return LossWeighting::normalized;
  throw ConfigError("unknown loss weighting '" + s + "' (expected discounted|normalized)");
}
inline std::string to_string(LossWeighting w) {
  return w == LossWeighting::discounted ? "discounted" : "normalized";
}

/// Learning hyperparameters; defaults are the benchmark values.
struct TrainConfig {
  std::size_t intervals = 50;
  double penalty = 10.0;
  double lambda = 1.0;
  double learning_rate = 0.01;
  std::size_t batch = 1024;
  std::size_t test_batch = 262144;
  std::size_t steps = 1000;
  std::size_t eval_every = 10;
  TrainMode mode = TrainMode::offline_ml;
  bool discounting = true;
  std::uint64_t seed = 1;
  std::uint64_t test_seed = 0x5eed7e57ULL;
  mlp::Optimizer optimizer = mlp::Optimizer::adam;
  // Step decay: after `lr_decay_start * steps` steps the rate is multiplied by
  // `lr_decay_factor`; a start of 1 or more keeps the rate constant.
  double lr_decay_start = 0.7;
  double lr_decay_factor = 0.1;
  // Paths used to refresh normalization statistics before each evaluation;
  // 0 keeps the momentum averages gathered during training.
  std::size_t recalibration_batch = 16384;
  // Multiply the -rate*V correction of the discounted TD(0) rule by dt.
  bool td_rate_times_dt = true;
  LossWeighting weighting = LossWeighting::normalized;
  // Differentiate through the stopping probabilities (and hence R) instead of
  // treating them as data.
  bool full_gradient = false;
  EnsembleOptions ensemble;

  void validate(double horizon) const {
    if (intervals == 0) throw ConfigError("train.intervals must be positive");
    if (!(lambda > 0.0)) throw ConfigError("train.lambda must be positive");
    if (!(learning_rate >= 0.0)) throw ConfigError("train.learning_rate must be nonnegative");
    if (batch < 2) throw ConfigError("train.batch must be at least 2");
    if (test_batch < 1) throw ConfigError("train.test_batch must be positive");
    if (eval_every == 0) throw ConfigError("train.eval_every must be positive");
    if (!(lr_decay_start >= 0.0)) throw ConfigError("train.lr_decay_start must be nonnegative");
    if (!(lr_decay_factor > 0.0)) throw ConfigError("train.lr_decay_factor must be positive");
    if (full_gradient && weighting == LossWeighting::normalized)
      throw ConfigError("train.full_gradient requires train.weighting = discounted");
    check_penalty_step(penalty, horizon / static_cast<double>(intervals));
  }
};

/// One learning-curve row.
struct TrainRecord {
  std::size_t step = 0;
  double loss = 0.0;
  PriceReport price;
  std::optional<double> min_accuracy;
  std::vector<std::optional<double>> accuracy;
  double elapsed_s = 0.0;
};

inline void write_curve_header(std::ostream& os) {
  os << "step,loss,p_stopping,p_control,rel_err_stopping,rel_err_control,min_accuracy,elapsed_s\n";
}

inline void write_curve_row(std::ostream& os, const TrainRecord& r) {
  const auto old = os.precision(17);
  os << r.step << ',' << r.loss << ',' << r.price.stopping.value << ',' << r.price.control.value
     << ',' << r.price.rel_err_stopping << ',' << r.price.rel_err_control << ',';
  if (r.min_accuracy) os << *r.min_accuracy;
  os << ',' << r.elapsed_s << '\n';
  os.precision(old);
}

/// Per-path quantities along a batch: V_l, payoff g_l, stopping probability
/// pi_l and the discount R_l (all row-major, M rows).
struct PathTerms {
  std::size_t paths = 0;
  std::size_t intervals = 0;
  std::vector<double> value;   // M x L
  std::vector<double> payoff;  // M x (L+1)
  std::vector<double> pi;      // M x L
  std::vector<double> r;       // M x (L+1)

  double& V(std::size_t m, std::size_t l) { return value[m * intervals + l]; }
  double V(std::size_t m, std::size_t l) const { return value[m * intervals + l]; }
  double& g(std::size_t m, std::size_t l) { return payoff[m * (intervals + 1) + l]; }
  double g(std::size_t m, std::size_t l) const { return payoff[m * (intervals + 1) + l]; }
  double& p(std::size_t m, std::size_t l) { return pi[m * intervals + l]; }
  double p(std::size_t m, std::size_t l) const { return pi[m * intervals + l]; }
  double& R(std::size_t m, std::size_t l) { return r[m * (intervals + 1) + l]; }
  double R(std::size_t m, std::size_t l) const { return r[m * (intervals + 1) + l]; }

  PathTerms(std::size_t m, std::size_t l)
      : paths(m), intervals(l), value(m * l), payoff(m * (l + 1)), pi(m * l), r(m * (l + 1)) {}

  // pi from the logistic map and R from the discrete discount recursion.
  void derive_policy(double penalty, double lambda, double dt) {
    for (std::size_t m = 0; m < paths; ++m) {
      R(m, 0) = 1.0;
      for (std::size_t l = 0; l < intervals; ++l) {
        p(m, l) = stopping_probability(V(m, l), g(m, l), penalty, lambda);
        R(m, l + 1) = R(m, l) * (1.0 - penalty * p(m, l) * dt);
      }
    }
  }
  void derive_discount(double penalty, double dt) {
    for (std::size_t m = 0; m < paths; ++m) {
      R(m, 0) = 1.0;
      for (std::size_t l = 0; l < intervals; ++l)
        R(m, l + 1) = R(m, l) * (1.0 - penalty * p(m, l) * dt);
    }
  }
};

struct LossTerms {
  double penalty;
  double lambda;
  double rate;  // 0 when discounting is off
  double dt;
  LossWeighting weighting = LossWeighting::normalized;
};

/// G_l for one path, l = 0..L-1:
///   D_L R_L g_L - D_l R_l V_l + sum_{j >= l} D_j R_j [K g_j pi_j - lambda H(pi_j)] dt,
/// with D_j = e^{-rate t_j}.
inline std::vector<double> martingale_components(const PathTerms& pt, std::size_t m,
                                                 const LossTerms& lt) {
  const std::size_t L = pt.intervals;
  std::vector<double> G(L);
  if (lt.weighting == LossWeighting::normalized) {
    // H_l = c_l dt + e^{-rate dt} (1 - K pi_l dt) H_{l+1}, H_L = g_L.
    const double step_disc = std::exp(-lt.rate * lt.dt);
    double h = pt.g(m, L);
    for (std::size_t l = L; l-- > 0;) {
      const double pi = pt.p(m, l);
      h = (lt.penalty * pt.g(m, l) * pi - lt.lambda * bernoulli_entropy(pi)) * lt.dt +
          step_disc * (1.0 - lt.penalty * pi * lt.dt) * h;
      G[l] = h - pt.V(m, l);
    }
    return G;
  }
  const double t_end = static_cast<double>(L) * lt.dt;
  double tail = std::exp(-lt.rate * t_end) * pt.R(m, L) * pt.g(m, L);
  for (std::size_t l = L; l-- > 0;) {
    const double d = std::exp(-lt.rate * static_cast<double>(l) * lt.dt);
    const double pi = pt.p(m, l);
    tail += d * pt.R(m, l) * (lt.penalty * pt.g(m, l) * pi - lt.lambda * bernoulli_entropy(pi)) * lt.dt;
    G[l] = tail - d * pt.R(m, l) * pt.V(m, l);
  }
  return G;
}

inline double glk_component(std::size_t l, const PathTerms& pt, std::size_t m, const LossTerms& lt) {
  if (l >= pt.intervals) throw DomainError("G_l index out of range");
  return martingale_components(pt, m, lt)[l];
}

/// 1/2 mean_m sum_l G_l^2 dt.  When `dloss_dv` is given it receives dLoss/dV_l
/// per path (M x L); with `through_policy` the derivative includes the effect of
/// V on pi (and hence on R), otherwise pi and R are held fixed.
inline double martingale_loss(const PathTerms& pt, const LossTerms& lt,
                              std::vector<double>* dloss_dv = nullptr,
                              bool through_policy = false) {
  const std::size_t L = pt.intervals;
  const double inv_m = 1.0 / static_cast<double>(pt.paths);
  const bool normalized = lt.weighting == LossWeighting::normalized;
  if (normalized && through_policy)
    throw UsageError("differentiating through the policy needs discounted weighting");
  if (dloss_dv) dloss_dv->assign(pt.paths * L, 0.0);
  double loss = 0.0;
  std::vector<double> after(L);  // F_k: everything in G that comes after step k
  for (std::size_t m = 0; m < pt.paths; ++m) {
    const std::vector<double> G = martingale_components(pt, m, lt);
    for (std::size_t l = 0; l < L; ++l) loss += 0.5 * G[l] * G[l] * lt.dt;
    if (!dloss_dv) continue;
    auto disc = [&](std::size_t l) { return std::exp(-lt.rate * static_cast<double>(l) * lt.dt); };
    if (normalized) {
      for (std::size_t l = 0; l < L; ++l) (*dloss_dv)[m * L + l] = -G[l] * lt.dt * inv_m;
      continue;
    }
    if (!through_policy) {
      for (std::size_t l = 0; l < L; ++l)
        (*dloss_dv)[m * L + l] = -G[l] * lt.dt * disc(l) * pt.R(m, l) * inv_m;
      continue;
    }
    // F_k = D_L R_L g_L + sum_{j > k} D_j R_j c_j dt.
    double f = disc(L) * pt.R(m, L) * pt.g(m, L);
    for (std::size_t k = L; k-- > 0;) {
      after[k] = f;
      const double pi = pt.p(m, k);
      f += disc(k) * pt.R(m, k) *
           (lt.penalty * pt.g(m, k) * pi - lt.lambda * bernoulli_entropy(pi)) * lt.dt;
    }
    double prefix_g = 0.0;  // sum_{l <= k} G_l dt
    double suffix_g2 = 0.0; // sum_{l > k} G_l^2 dt
    for (std::size_t l = 0; l < L; ++l) suffix_g2 += G[l] * G[l] * lt.dt;
    for (std::size_t k = 0; k < L; ++k) {
      prefix_g += G[k] * lt.dt;
      suffix_g2 -= G[k] * G[k] * lt.dt;
      const double pi = pt.p(m, k);
      double grad = -G[k] * lt.dt * disc(k) * pt.R(m, k);
      const bool clipped = pi <= kProbabilityClip || pi >= 1.0 - kProbabilityClip;
      if (!clipped) {
        const double dpi_dv = -(lt.penalty / lt.lambda) * pi * (1.0 - pi);
        const double logit = std::log(pi / (1.0 - pi));
        const double running = disc(k) * pt.R(m, k) *
                               (lt.penalty * pt.g(m, k) - lt.lambda * logit) * lt.dt * prefix_g;
        const double dlogr = -lt.penalty * lt.dt / (1.0 - lt.penalty * pi * lt.dt);
        const double via_r = dlogr * (after[k] * prefix_g + suffix_g2);
        grad += dpi_dv * (running + via_r);
      }
      (*dloss_dv)[m * L + k] = grad * inv_m;
    }
  }
  return loss * inv_m;
}

/// Monte Carlo value of a randomized stopping policy at (0, x0):
///   sum_l D_l R_l [K g_l pi_l - lambda H(pi_l)] dt + D_L R_L g_L.
/// The policy callable maps (l, xs) to probabilities.
template <class PolicyFn, class Payoff>
Estimate policy_value_mc(const PathBatch& batch, PolicyFn&& policy, const Payoff& payoff,
                         const LossTerms& lt) {
  const TimeGrid& grid = batch.grid();
  const std::size_t L = grid.intervals();
  std::vector<std::vector<double>> pis(L);
  for (std::size_t l = 0; l < L; ++l) pis[l] = policy(l, batch.column(l));
  std::vector<double> value(batch.paths());
  for (std::size_t m = 0; m < batch.paths(); ++m) {
    double r = 1.0, acc = 0.0;
    for (std::size_t l = 0; l < L; ++l) {
      const double t = grid.time(l);
      const double pi = pis[l][m];
      acc += std::exp(-lt.rate * t) * r *
             (lt.penalty * payoff(t, batch(m, l)) * pi - lt.lambda * bernoulli_entropy(pi)) * lt.dt;
      r *= 1.0 - lt.penalty * pi * lt.dt;
    }
    acc += std::exp(-lt.rate * grid.horizon()) * r * payoff(grid.horizon(), batch(m, L));
    value[m] = acc;
  }
  return detail::mean_and_se(value);
}

/// Reference data used to score an ensemble during training.
struct EvaluationOracle {
  double price = 0.0;        // option price the relative errors refer to
  FreeBoundary boundary;     // exercise boundary used for classification
};

struct StepMetrics {
  double loss = 0.0;
};

struct TrainOutcome {
  std::vector<TrainRecord> records;
  std::optional<std::string> error;  // set when a step failed; records are partial
};

/// Owns an ensemble and trains it with the offline martingale-loss algorithm or
/// the online TD(0) rule.
class Trainer {
 public:
  Trainer(MarketParams market, TrainConfig cfg, StoppingPayoff payoff,
          std::optional<EvaluationOracle> oracle = std::nullopt)
      : market_(market), cfg_(std::move(cfg)), grid_(market.horizon, cfg_.intervals),
        ensemble_(grid_, payoff, cfg_.ensemble, stream_key(cfg_.seed, 0xe75eULL)),
        adam_(cfg_.intervals), oracle_(std::move(oracle)) {
    market_.validate();
    cfg_.validate(market_.horizon);
  }

  const TrainConfig& config() const noexcept { return cfg_; }
  const TimeGrid& grid() const noexcept { return grid_; }
  ValueEnsemble& ensemble() noexcept { return ensemble_; }
  const ValueEnsemble& ensemble() const noexcept { return ensemble_; }
  std::size_t steps_done() const noexcept { return step_; }

  LossTerms loss_terms() const {
    return {cfg_.penalty, cfg_.lambda, cfg_.discounting ? market_.rate : 0.0, grid_.dt(),
            cfg_.weighting};
  }

  PathBatch training_batch(std::size_t step) const {
    return simulate_paths(market_, grid_, cfg_.batch, stream_key(cfg_.seed, step));
  }

  /// One offline step: fresh paths, strategy from the current ensemble, one
  /// descent step on the martingale loss for all networks jointly.
  StepMetrics offline_ml_step() {
    const PathBatch batch = begin_step();
    const std::size_t M = batch.paths(), L = grid_.intervals();
    PathTerms pt(M, L);
    std::vector<mlp::Matrix> features(L);
    for (std::size_t l = 0; l <= L; ++l) {
      const auto xs = batch.column(l);
      const auto gs = ensemble_.payoffs(l, xs);
      for (std::size_t m = 0; m < M; ++m) pt.g(m, l) = gs[m];
      if (l == L) break;
      auto& net = ensemble_.network(l);
      net.set_mode(mlp::Mode::train);
      const mlp::Matrix w = net.forward(ensemble_.features(l, xs, gs));
      for (std::size_t m = 0; m < M; ++m) pt.V(m, l) = w(static_cast<Eigen::Index>(m), 0) + gs[m];
    }
    check_values(pt.value);
    pt.derive_policy(cfg_.penalty, cfg_.lambda, grid_.dt());
    std::vector<double> dv;
    const double loss = martingale_loss(pt, loss_terms(), &dv, cfg_.full_gradient);
    for (std::size_t l = 0; l < L; ++l) {
      mlp::Matrix upstream(static_cast<Eigen::Index>(M), 1);
      for (std::size_t m = 0; m < M; ++m) upstream(static_cast<Eigen::Index>(m), 0) = dv[m * L + l];
      apply(l, ensemble_.network(l).backward(upstream));
      ensemble_.network(l).clear_cache();
    }
    return {loss};
  }

  /// One online step: walk forward in time, updating theta_l from the one-step
  /// temporal difference averaged over the batch.  Reports the root-mean-square
  /// TD error.
  StepMetrics online_td0_step() {
    const PathBatch batch = begin_step();
    const std::size_t M = batch.paths(), L = grid_.intervals();
    const double dt = grid_.dt();
    const double rate = cfg_.discounting ? market_.rate : 0.0;
    const double rate_factor = cfg_.td_rate_times_dt ? dt : 1.0;
    double sq = 0.0;
    for (std::size_t l = 0; l < L; ++l) {
      const auto xs = batch.column(l);
      const auto gs = ensemble_.payoffs(l, xs);
      auto& net = ensemble_.network(l);
      net.set_mode(mlp::Mode::train);
      const mlp::Matrix w = net.forward(ensemble_.features(l, xs, gs));
      const auto xn = batch.column(l + 1);
      const auto gn = ensemble_.payoffs(l + 1, xn);
      std::vector<double> v_next;
      if (l + 1 == L) {
        v_next = gn;
      } else {
        v_next = ensemble_.evaluate_w(l + 1, xn, gn, mlp::Mode::train);
        for (std::size_t m = 0; m < M; ++m) v_next[m] += gn[m];
      }
      mlp::Matrix upstream(static_cast<Eigen::Index>(M), 1);
      for (std::size_t m = 0; m < M; ++m) {
        const double v = w(static_cast<Eigen::Index>(m), 0) + gs[m];
        const double pi = stopping_probability(v, gs[m], cfg_.penalty, cfg_.lambda);
        const double ratio = 1.0 - cfg_.penalty * pi * dt;
        const double td = ratio * v_next[m] - v +
                          (cfg_.penalty * gs[m] * pi - cfg_.lambda * bernoulli_entropy(pi)) * dt -
                          rate * v * rate_factor;
        if (!std::isfinite(td)) throw TrainingError("non-finite TD error");
        sq += td * td;
        // Ascent along dV/dtheta * td, written as descent on -td.
        upstream(static_cast<Eigen::Index>(m), 0) = -td / static_cast<double>(M);
      }
      apply(l, net.backward(upstream));
      net.clear_cache();
    }
    return {std::sqrt(sq / static_cast<double>(M * L))};
  }

  double current_learning_rate() const {
    const double start = cfg_.lr_decay_start * static_cast<double>(cfg_.steps);
    return static_cast<double>(step_) > start ? cfg_.learning_rate * cfg_.lr_decay_factor
                                              : cfg_.learning_rate;
  }

  StepMetrics step() {
    return cfg_.mode == TrainMode::offline_ml ? offline_ml_step() : online_td0_step();
  }

  const PathBatch& test_batch() {
    if (!test_batch_)
      test_batch_ = simulate_paths(market_, grid_, cfg_.test_batch, cfg_.test_seed);
    return *test_batch_;
  }

  /// Recompute normalization statistics from fresh training-distribution paths
  /// (never the test batch).  Deterministic in (seed, step).
  void refresh_statistics() {
    if (cfg_.recalibration_batch == 0 || !cfg_.ensemble.batchnorm || step_ == 0) return;
    ensemble_.recalibrate_batchnorm(simulate_paths(
        market_, grid_, std::max<std::size_t>(cfg_.recalibration_batch, 2),
        stream_key(cfg_.seed ^ 0xbadc0ffeULL, step_)));
  }

  TrainRecord evaluate(double loss = std::nan("")) {
    const PathBatch& batch = test_batch();
    refresh_statistics();
    const ExecutionPolicy policy = ExecutionPolicy::from_ensemble(ensemble_, batch);
    TrainRecord rec;
    rec.step = step_;
    rec.loss = loss;
    const PutContract c = PutContract::from(market_);
    if (oracle_) {
      rec.price = price_report(policy, batch, c, cfg_.penalty, oracle_->price);
      rec.accuracy = classification_accuracy(policy, batch, oracle_->boundary);
      rec.min_accuracy = min_accuracy(rec.accuracy);
    } else {
      rec.price.stopping = price_by_stopping(policy, batch, c);
      rec.price.control = price_by_control(policy, batch, c, cfg_.penalty);
      rec.price.rel_err_stopping = rec.price.rel_err_control = std::nan("");
    }
    return rec;
  }

  /// Runs `cfg.steps` steps, recording an evaluation every `eval_every` steps.
  /// A failing step stops training; the records gathered so far are kept.
  TrainOutcome train(std::ostream* progress = nullptr) {
    TrainOutcome out;
    const auto start = std::chrono::steady_clock::now();
    for (std::size_t n = 0; n < cfg_.steps; ++n) {
      StepMetrics sm;
      try {
        sm = step();
      } catch (const TrainingError& e) {
        out.error = e.what();
        return out;
      } catch (const UsageError& e) {
        out.error = e.what();
        return out;
      }
      if (step_ % cfg_.eval_every == 0) {
        TrainRecord rec = evaluate(sm.loss);
        rec.elapsed_s =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        if (progress) write_curve_row(*progress, rec);
        out.records.push_back(std::move(rec));
      }
    }
    return out;
  }

 private:
  PathBatch begin_step() {
    ++step_;
    PathBatch batch = training_batch(step_);
    if (step_ == 1) ensemble_.fit_standardization(batch);
    return batch;
  }

  void apply(std::size_t l, const mlp::Vector& grad) {
    auto& net = ensemble_.network(l);
    const double lr = current_learning_rate();
    if (cfg_.optimizer == mlp::Optimizer::adam)
      mlp::adam_step(net, grad, lr, adam_[l]);
    else
      mlp::sgd_step(net, grad, lr);
  }

  static void check_values(const std::vector<double>& v) {
    for (double x : v)
      if (!std::isfinite(x)) throw TrainingError("non-finite network output");
  }

  MarketParams market_;
  TrainConfig cfg_;
  TimeGrid grid_;
  ValueEnsemble ensemble_;
  std::vector<mlp::AdamState> adam_;
  std::optional<EvaluationOracle> oracle_;
  std::optional<PathBatch> test_batch_;
  std::size_t step_ = 0;
};

}  // namespace xstop
