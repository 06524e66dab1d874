#pragma once

// Helpers shared by the unit tests and the acceptance binary.

#include <algorithm>
#include <cmath>
#include <vector>

#include "xstop/ensemble.hpp"
#include "xstop/mlp.hpp"
#include "xstop/rng.hpp"
#include "xstop/trainer.hpp"

namespace xstop::testing {

inline double rel_diff(double a, double b, double floor = 1e-6) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

inline mlp::Matrix random_matrix(long rows, long cols, std::uint64_t seed, double scale = 1.0) {
  Stream s(seed);
  mlp::Matrix m(rows, cols);
  for (long i = 0; i < rows; ++i)
    for (long j = 0; j < cols; ++j) m(i, j) = scale * (2.0 * s.uniform() - 1.0);
  return m;
}

// Perturbs every non-trivial parameter (gamma, beta included) so the check
// does not run at the identity initialization only.
inline void scramble(mlp::Network& net, std::uint64_t seed) {
  net.initialize(seed);
  Stream s(seed ^ 0x5c4a);
  for (long i = 0; i < net.params().size(); ++i) net.params()[i] += 0.3 * (2.0 * s.uniform() - 1.0);
}

/// Max relative error between backprop and central differences of
/// sum(output .* upstream) in the given mode.
inline double network_gradient_error(mlp::Network& net, const mlp::Matrix& x, const mlp::Matrix& up,
                                     mlp::Mode mode, double h = 1e-5) {
  net.set_mode(mode);
  // Eval mode must not touch running statistics during the reference pass;
  // train mode uses batch statistics either way.
  net.forward(x);
  const mlp::Vector g = net.backward(up);
  net.clear_cache();
  auto f = [&] { return (net.infer(x, mode).array() * up.array()).sum(); };
  double worst = 0.0;
  for (long i = 0; i < net.params().size(); ++i) {
    const double keep = net.params()[i];
    net.params()[i] = keep + h;
    const double fp = f();
    net.params()[i] = keep - h;
    const double fm = f();
    net.params()[i] = keep;
    // Biases feeding a batch-norm site have zero gradient; compare those absolutely.
    worst = std::max(worst, rel_diff(g[i], (fp - fm) / (2.0 * h), 1e-4));
  }
  return worst;
}

/// Random path terms for loss-level checks: V near g, pi from the logistic map.
inline PathTerms random_path_terms(std::size_t M, std::size_t L, double K, double lambda, double dt,
                                   std::uint64_t seed) {
  PathTerms pt(M, L);
  Stream s(seed);
  for (std::size_t m = 0; m < M; ++m) {
    for (std::size_t l = 0; l <= L; ++l) pt.g(m, l) = std::max(0.0, 4.0 * s.uniform() - 1.0);
    for (std::size_t l = 0; l < L; ++l) pt.V(m, l) = pt.g(m, l) + 0.6 * (2.0 * s.uniform() - 1.0);
  }
  pt.derive_policy(K, lambda, dt);
  return pt;
}

/// Max relative error of dLoss/dV against central differences in V.
inline double loss_gradient_error(const PathTerms& base, const LossTerms& lt, bool through_policy,
                                  double h = 1e-6) {
  std::vector<double> dv;
  martingale_loss(base, lt, &dv, through_policy);
  double worst = 0.0;
  for (std::size_t m = 0; m < base.paths; ++m) {
    for (std::size_t l = 0; l < base.intervals; ++l) {
      auto eval = [&](double shift) {
        PathTerms pt = base;
        pt.V(m, l) += shift;
        if (through_policy) pt.derive_policy(lt.penalty, lt.lambda, lt.dt);
        return martingale_loss(pt, lt);
      };
      const double fd = (eval(h) - eval(-h)) / (2.0 * h);
      worst = std::max(worst, rel_diff(dv[m * base.intervals + l], fd, 1e-7));
    }
  }
  return worst;
}


/// Max relative error of the martingale-loss gradient with respect to every
/// network parameter, pi and R held at their values for the unperturbed
/// ensemble (the semi-gradient used by the offline trainer).
inline double ensemble_loss_gradient_error(ValueEnsemble& ens, const PathBatch& batch,
                                           const LossTerms& lt, double h = 1e-5) {
  const std::size_t M = batch.paths(), L = ens.size();
  std::vector<mlp::Matrix> feats(L);
  PathTerms base(M, L);
  for (std::size_t l = 0; l <= L; ++l) {
    const auto xs = batch.column(l);
    const auto gs = ens.payoffs(l, xs);
    for (std::size_t m = 0; m < M; ++m) base.g(m, l) = gs[m];
    if (l == L) break;
    feats[l] = ens.features(l, xs, gs);
  }
  auto fill = [&](PathTerms& pt, std::size_t l) {
    const mlp::Matrix w = ens.network(l).infer(feats[l], mlp::Mode::train);
    for (std::size_t m = 0; m < M; ++m) pt.V(m, l) = w(static_cast<long>(m), 0) + pt.g(m, l);
  };
  for (std::size_t l = 0; l < L; ++l) fill(base, l);
  base.derive_policy(lt.penalty, lt.lambda, lt.dt);
  std::vector<double> dv;
  martingale_loss(base, lt, &dv);
  double worst = 0.0;
  for (std::size_t l = 0; l < L; ++l) {
    auto& net = ens.network(l);
    net.set_mode(mlp::Mode::train);
    net.forward(feats[l]);
    mlp::Matrix up(static_cast<long>(M), 1);
    for (std::size_t m = 0; m < M; ++m) up(static_cast<long>(m), 0) = dv[m * L + l];
    const mlp::Vector g = net.backward(up);
    net.clear_cache();
    for (long i = 0; i < net.params().size(); ++i) {
      const double keep = net.params()[i];
      auto eval = [&](double v) {
        net.params()[i] = v;
        PathTerms pt = base;
        fill(pt, l);
        return martingale_loss(pt, lt);
      };
      const double fd = (eval(keep + h) - eval(keep - h)) / (2.0 * h);
      net.params()[i] = keep;
      worst = std::max(worst, rel_diff(g[i], fd));
    }
  }
  return worst;
}

}  // namespace xstop::testing
