#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <vector>

#include "xstop/error.hpp"
#include "xstop/rng.hpp"

namespace xstop {

inline constexpr double kProbabilityClip = 1e-9;

// 1 / (1 + e^z) without overflow for large |z|.
inline double logistic_of_negative(double z) noexcept {
  if (z >= 0.0) {
    const double e = std::exp(-z);
    return e / (1.0 + e);
  }
  return 1.0 / (1.0 + std::exp(z));
}

/// Optimal Bernoulli stopping probability 1 / (1 + exp(K (v - g) / lambda)),
/// clipped away from {0, 1}.
inline double stopping_probability(double v, double g, double penalty, double lambda) noexcept {
  const double p = logistic_of_negative(penalty * (v - g) / lambda);
  return std::clamp(p, kProbabilityClip, 1.0 - kProbabilityClip);
}

/// pi log pi + (1 - pi) log(1 - pi), with 0 log 0 = 0.  Its negative is the
/// entropy of the Bernoulli(pi) distribution.
inline double bernoulli_entropy(double pi) noexcept {
  auto xlogx = [](double p) { return p > 0.0 ? p * std::log(p) : 0.0; };
  return xlogx(pi) + xlogx(1.0 - pi);
}

/// Coin flip: 1 (stop) with probability pi, else 0 (continue).
inline int sample_action(double pi, Stream& stream) noexcept {
  return stream.uniform() < pi ? 1 : 0;
}

/// A source of approximate value functions V(t_l, x) on a decision grid.
template <class S>
concept ValueSource = requires(const S& s, std::size_t l, const std::vector<double>& xs) {
  { s.values(l, xs) } -> std::convertible_to<std::vector<double>>;
};

/// Stopping policy obtained from a value source by the logistic map.  This is
/// the policy-improvement step: applied to the value of a policy it yields a
/// policy that is at least as good.
template <ValueSource Source, class Payoff>
class StoppingPolicy {
 public:
  StoppingPolicy(const Source& source, Payoff payoff, std::vector<double> times, double penalty,
                 double lambda)
      : source_(&source), payoff_(std::move(payoff)), times_(std::move(times)),
        penalty_(penalty), lambda_(lambda) {
    if (!(lambda > 0.0)) throw ConfigError("temperature lambda must be positive");
    if (!(penalty > 0.0)) throw ConfigError("penalty factor K must be positive");
  }

  double penalty() const noexcept { return penalty_; }
  double temperature() const noexcept { return lambda_; }

  // Stopping probabilities at decision index l for a batch of states.
  std::vector<double> probabilities(std::size_t l, const std::vector<double>& xs) const {
    if (l >= times_.size()) throw DomainError("decision index out of range");
    const std::vector<double> v = source_->values(l, xs);
    std::vector<double> out(xs.size());
    for (std::size_t i = 0; i < xs.size(); ++i)
      out[i] = stopping_probability(v[i], payoff_(times_[l], xs[i]), penalty_, lambda_);
    return out;
  }

 private:
  const Source* source_;
  Payoff payoff_;
  std::vector<double> times_;
  double penalty_;
  double lambda_;
};

template <ValueSource Source, class Payoff>
StoppingPolicy<Source, Payoff> improve_policy(const Source& source, Payoff payoff,
                                              std::vector<double> times, double penalty,
                                              double lambda) {
  return StoppingPolicy<Source, Payoff>(source, std::move(payoff), std::move(times), penalty,
                                        lambda);
}

}  // namespace xstop
