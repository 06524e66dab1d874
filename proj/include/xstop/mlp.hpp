#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <istream>
#include <optional>
#include <ostream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "xstop/error.hpp"
#include "xstop/rng.hpp"

namespace xstop::mlp {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;

enum class Mode { train, eval };

struct BatchNormOptions {
  double momentum = 0.1;
  double epsilon = 1e-5;
};

/// Feed-forward net: [BN] -> (Linear -> [BN] -> ReLU)* -> Linear -> [BN].
///
/// With batch normalization enabled there is a normalization site after the
/// input, after every hidden affine layer (before its activation) and after the
/// output layer.  All trainable parameters live in one flat vector so that the
/// optimizers and gradient checks can treat them uniformly; `Gradients` has the
/// same layout.
class Network {
 public:
  struct Layout {
    std::size_t offset = 0;
    std::size_t rows = 0;
    std::size_t cols = 0;
  };

  Network(std::vector<std::size_t> dims, bool batchnorm = true, BatchNormOptions bn = {})
      : dims_(std::move(dims)), batchnorm_(batchnorm), bn_(bn) {
    if (dims_.size() < 2) throw ConfigError("network needs input and output dimensions");
    for (auto d : dims_)
      if (d == 0) throw ConfigError("layer widths must be positive");
    std::size_t offset = 0;
    for (std::size_t k = 0; k + 1 < dims_.size(); ++k) {
      weights_.push_back({offset, dims_[k + 1], dims_[k]});
      offset += dims_[k + 1] * dims_[k];
      biases_.push_back({offset, dims_[k + 1], 1});
      offset += dims_[k + 1];
    }
    if (batchnorm_) {
      // Site 0 normalizes the input; site k >= 1 follows affine layer k - 1.
      for (std::size_t k = 0; k < dims_.size(); ++k) {
        gammas_.push_back({offset, dims_[k], 1});
        offset += dims_[k];
        betas_.push_back({offset, dims_[k], 1});
        offset += dims_[k];
        running_mean_.push_back(Vector::Zero(static_cast<Eigen::Index>(dims_[k])));
        running_var_.push_back(Vector::Ones(static_cast<Eigen::Index>(dims_[k])));
      }
    }
    params_ = Vector::Zero(static_cast<Eigen::Index>(offset));
    for (auto& g : gammas_) segment(g).setOnes();
  }

  // Glorot-uniform weights, zero biases, identity batch normalization.
  void initialize(std::uint64_t seed) {
    Stream stream(seed, 0x6d6c70);
    for (std::size_t k = 0; k < weights_.size(); ++k) {
      const double fan = static_cast<double>(weights_[k].rows + weights_[k].cols);
      std::uniform_real_distribution<double> dist(-std::sqrt(6.0 / fan), std::sqrt(6.0 / fan));
      auto w = segment(weights_[k]);
      for (Eigen::Index i = 0; i < w.size(); ++i) w[i] = dist(stream);
      segment(biases_[k]).setZero();
    }
    for (auto& g : gammas_) segment(g).setOnes();
    for (auto& b : betas_) segment(b).setZero();
    for (auto& m : running_mean_) m.setZero();
    for (auto& v : running_var_) v.setOnes();
  }

  const std::vector<std::size_t>& dims() const noexcept { return dims_; }
  std::size_t input_dim() const noexcept { return dims_.front(); }
  std::size_t output_dim() const noexcept { return dims_.back(); }
  bool has_batchnorm() const noexcept { return batchnorm_; }
  const BatchNormOptions& batchnorm_options() const noexcept { return bn_; }
  std::size_t num_affine() const noexcept { return weights_.size(); }
  std::size_t num_params() const noexcept { return static_cast<std::size_t>(params_.size()); }

  Mode mode() const noexcept { return mode_; }
  void set_mode(Mode m) noexcept { mode_ = m; }

  Vector& params() noexcept { return params_; }
  const Vector& params() const noexcept { return params_; }

  using MatrixMap = Eigen::Map<Eigen::MatrixXd>;
  using ConstMatrixMap = Eigen::Map<const Eigen::MatrixXd>;
  using VectorMap = Eigen::Map<Eigen::VectorXd>;
  using ConstVectorMap = Eigen::Map<const Eigen::VectorXd>;

  // Affine layer k maps width dims[k] to dims[k+1]; W is (out x in).
  MatrixMap weight(std::size_t k) { return matrix(weights_.at(k)); }
  ConstMatrixMap weight(std::size_t k) const { return matrix(weights_.at(k)); }
  VectorMap bias(std::size_t k) { return segment(biases_.at(k)); }
  ConstVectorMap bias(std::size_t k) const { return segment(biases_.at(k)); }
  VectorMap bn_scale(std::size_t site) { return segment(gammas_.at(site)); }
  ConstVectorMap bn_scale(std::size_t site) const { return segment(gammas_.at(site)); }
  VectorMap bn_shift(std::size_t site) { return segment(betas_.at(site)); }
  ConstVectorMap bn_shift(std::size_t site) const { return segment(betas_.at(site)); }
  Vector& running_mean(std::size_t site) { return running_mean_.at(site); }
  const Vector& running_mean(std::size_t site) const { return running_mean_.at(site); }
  Vector& running_var(std::size_t site) { return running_var_.at(site); }
  const Vector& running_var(std::size_t site) const { return running_var_.at(site); }
  std::size_t num_bn_sites() const noexcept { return gammas_.size(); }

  const Layout& weight_layout(std::size_t k) const { return weights_.at(k); }
  const Layout& bias_layout(std::size_t k) const { return biases_.at(k); }

  /// Forward pass in the current mode.  Train mode caches activations for
  /// `backward` and folds batch statistics into the running estimates.
  Matrix forward(const Matrix& inputs) {
    cache_.emplace();
    cache_->mode = mode_;
    return run(inputs, mode_, /*update_stats=*/mode_ == Mode::train, &*cache_);
  }

  /// Pure evaluation: no cache, running statistics untouched.  Train mode uses
  /// batch statistics.
  Matrix infer(const Matrix& inputs, Mode mode) const {
    return const_cast<Network*>(this)->run(inputs, mode, false, nullptr);
  }
  Matrix infer(const Matrix& inputs) const { return infer(inputs, mode_); }

  /// Replace the running statistics with the batch statistics of `inputs`
  /// under the current weights.
  void recalibrate(const Matrix& inputs) {
    if (!batchnorm_) return;
    const BatchNormOptions saved = bn_;
    bn_.momentum = 1.0;
    run(inputs, Mode::train, true, nullptr);
    bn_ = saved;
  }

  bool has_cache() const noexcept { return cache_.has_value(); }
  void clear_cache() noexcept { cache_.reset(); }

  /// Reverse-mode derivative of sum_b output(b) . upstream(b) with respect to
  /// every trainable parameter, through the batch statistics in train mode.
  Vector backward(const Matrix& upstream) const {
    if (!cache_) throw UsageError("backward called without a cached forward pass");
    const Cache& c = *cache_;
    if (upstream.rows() != c.batch || upstream.cols() != static_cast<Eigen::Index>(output_dim()))
      throw UsageError("upstream gradient has the wrong shape");
    Vector grad = Vector::Zero(params_.size());
    Matrix delta = upstream;
    const std::size_t n_affine = weights_.size();
    for (std::size_t k = n_affine; k-- > 0;) {
      if (k + 1 < n_affine) {
        // ReLU after BN at site k+1 (hidden layers only).
        delta = delta.cwiseProduct(c.pre_activation[k].unaryExpr(
            [](double v) { return v > 0.0 ? 1.0 : 0.0; }));
      }
      if (batchnorm_) delta = bn_backward(k + 1, c, delta, grad);
      const Matrix& a = c.layer_input[k];
      auto gw = Eigen::Map<Eigen::MatrixXd>(grad.data() + weights_[k].offset,
                                            static_cast<Eigen::Index>(weights_[k].rows),
                                            static_cast<Eigen::Index>(weights_[k].cols));
      gw.noalias() += delta.transpose() * a;
      grad.segment(static_cast<Eigen::Index>(biases_[k].offset),
                   static_cast<Eigen::Index>(biases_[k].rows)) += delta.colwise().sum().transpose();
      Matrix prev = delta * weight(k);
      delta = std::move(prev);
    }
    if (batchnorm_) bn_backward(0, c, delta, grad);
    return grad;
  }

  void save(std::ostream& os) const;
  static Network load(std::istream& is);

 private:
  struct BnCache {
    Matrix normalized;  // xhat
    Vector inv_std;
  };
  struct Cache {
    Mode mode = Mode::train;
    Eigen::Index batch = 0;
    std::vector<BnCache> bn;            // per site
    std::vector<Matrix> layer_input;    // input to affine layer k
    std::vector<Matrix> pre_activation; // ReLU input of hidden layer k
  };

  MatrixMap matrix(const Layout& l) {
    return {params_.data() + l.offset, static_cast<Eigen::Index>(l.rows),
            static_cast<Eigen::Index>(l.cols)};
  }
  ConstMatrixMap matrix(const Layout& l) const {
    return {params_.data() + l.offset, static_cast<Eigen::Index>(l.rows),
            static_cast<Eigen::Index>(l.cols)};
  }
  VectorMap segment(const Layout& l) {
    return {params_.data() + l.offset, static_cast<Eigen::Index>(l.rows)};
  }
  ConstVectorMap segment(const Layout& l) const {
    return {params_.data() + l.offset, static_cast<Eigen::Index>(l.rows)};
  }

  Matrix bn_forward(std::size_t site, Matrix x, Mode mode, bool update_stats, Cache* cache) {
    const auto gamma = bn_scale(site);
    const auto beta = bn_shift(site);
    Vector mean, inv_std;
    if (mode == Mode::train) {
      const double n = static_cast<double>(x.rows());
      mean = x.colwise().mean().transpose();
      x.rowwise() -= mean.transpose();
      Vector var = x.colwise().squaredNorm().transpose() / n;
      inv_std = (var.array() + bn_.epsilon).rsqrt().matrix();
      if (update_stats) {
        // Running variance uses the unbiased estimate.
        const double unbias = n / (n - 1.0);
        running_mean_[site] = (1.0 - bn_.momentum) * running_mean_[site] + bn_.momentum * mean;
        running_var_[site] =
            (1.0 - bn_.momentum) * running_var_[site] + bn_.momentum * unbias * var;
      }
    } else {
      mean = running_mean_[site];
      inv_std = (running_var_[site].array() + bn_.epsilon).rsqrt().matrix();
      x.rowwise() -= mean.transpose();
    }
    x = x * inv_std.asDiagonal();
    if (cache) cache->bn[site] = {x, inv_std};
    Matrix y = x * gamma.asDiagonal();
    y.rowwise() += beta.transpose();
    return y;
  }

  Matrix bn_backward(std::size_t site, const Cache& c, const Matrix& dy, Vector& grad) const {
    const BnCache& bc = c.bn[site];
    const auto gamma = bn_scale(site);
    const Eigen::Index w = gamma.size();
    grad.segment(static_cast<Eigen::Index>(gammas_[site].offset), w) +=
        dy.cwiseProduct(bc.normalized).colwise().sum().transpose();
    grad.segment(static_cast<Eigen::Index>(betas_[site].offset), w) +=
        dy.colwise().sum().transpose();
    Matrix dxhat = dy * gamma.asDiagonal();
    if (c.mode == Mode::eval) return dxhat * bc.inv_std.asDiagonal();
    const double n = static_cast<double>(dy.rows());
    const Eigen::RowVectorXd sum_d = dxhat.colwise().sum();
    const Eigen::RowVectorXd sum_dx = dxhat.cwiseProduct(bc.normalized).colwise().sum();
    Matrix dx = dxhat;
    dx.rowwise() -= sum_d / n;
    dx -= bc.normalized * (sum_dx / n).asDiagonal();
    return dx * bc.inv_std.asDiagonal();
  }

  Matrix run(const Matrix& inputs, Mode mode, bool update_stats, Cache* cache) {
    if (inputs.cols() != static_cast<Eigen::Index>(input_dim()))
      throw UsageError("input width does not match the network");
    if (inputs.rows() < 1) throw UsageError("empty input batch");
    if (mode == Mode::train && batchnorm_ && inputs.rows() < 2)
      throw UsageError("train-mode batch normalization needs at least two rows");
    if (cache) {
      cache->batch = inputs.rows();
      cache->bn.resize(gammas_.size());
      cache->layer_input.resize(weights_.size());
      cache->pre_activation.resize(weights_.size());
    }
    Matrix a = batchnorm_ ? bn_forward(0, inputs, mode, update_stats, cache) : inputs;
    const std::size_t n_affine = weights_.size();
    for (std::size_t k = 0; k < n_affine; ++k) {
      Matrix z = a * weight(k).transpose();
      z.rowwise() += bias(k).transpose();
      if (cache) cache->layer_input[k] = std::move(a);
      if (batchnorm_) z = bn_forward(k + 1, std::move(z), mode, update_stats, cache);
      if (k + 1 < n_affine) {
        if (cache) cache->pre_activation[k] = z;
        a = z.cwiseMax(0.0);
      } else {
        a = std::move(z);
      }
    }
    return a;
  }

  std::vector<std::size_t> dims_;
  bool batchnorm_;
  BatchNormOptions bn_;
  Mode mode_ = Mode::train;
  std::vector<Layout> weights_, biases_, gammas_, betas_;
  std::vector<Vector> running_mean_, running_var_;
  Vector params_;
  std::optional<Cache> cache_;
};

inline void check_finite(const Vector& grad) {
  if (!grad.allFinite()) throw TrainingError("non-finite gradient");
}

/// theta <- theta - lr * grad.  Running statistics are left alone.
inline void sgd_step(Network& net, const Vector& grad, double learning_rate) {
  if (!(learning_rate >= 0.0)) throw ConfigError("learning rate must be nonnegative");
  if (grad.size() != net.params().size()) throw UsageError("gradient shape mismatch");
  check_finite(grad);
  net.params() -= learning_rate * grad;
}

struct AdamOptions {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

struct AdamState {
  Vector m, v;
  std::uint64_t step = 0;
};

inline void adam_step(Network& net, const Vector& grad, double learning_rate, AdamState& state,
                      const AdamOptions& opt = {}) {
  if (!(learning_rate >= 0.0)) throw ConfigError("learning rate must be nonnegative");
  if (grad.size() != net.params().size()) throw UsageError("gradient shape mismatch");
  check_finite(grad);
  if (state.m.size() != grad.size()) {
    state.m = Vector::Zero(grad.size());
    state.v = Vector::Zero(grad.size());
    state.step = 0;
  }
  ++state.step;
  state.m = opt.beta1 * state.m + (1.0 - opt.beta1) * grad;
  state.v = opt.beta2 * state.v + (1.0 - opt.beta2) * grad.cwiseAbs2();
  const double c1 = 1.0 - std::pow(opt.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(opt.beta2, static_cast<double>(state.step));
  net.params().array() -=
      learning_rate * (state.m.array() / c1) / ((state.v.array() / c2).sqrt() + opt.epsilon);
}

enum class Optimizer { sgd, adam };

inline Optimizer parse_optimizer(const std::string& s) {
  if (s == "sgd") return Optimizer::sgd;
  if (s == "adam") return Optimizer::adam;
  throw ConfigError("unknown optimizer '" + s + "' (expected sgd|adam)");
}
inline std::string to_string(Optimizer o) { return o == Optimizer::sgd ? "sgd" : "adam"; }

// Checkpoint text format, version 1:
//
//   xstop-mlp 1
//   dims <n> <d0> ... <d_{n-1}>
//   batchnorm <0|1> <momentum> <epsilon>
//   params <count>
//   <count values, one per line>
//   running <sites>
//   <site> <width> <mean values...> <var values...>      (one line per site)
//
// Numbers are written with 17 significant digits so reloading is exact.
inline void Network::save(std::ostream& os) const {
  os.precision(17);
  os << "xstop-mlp 1\n";
  os << "dims " << dims_.size();
  for (auto d : dims_) os << ' ' << d;
  os << "\nbatchnorm " << (batchnorm_ ? 1 : 0) << ' ' << bn_.momentum << ' ' << bn_.epsilon
     << "\nparams " << params_.size() << '\n';
  for (Eigen::Index i = 0; i < params_.size(); ++i) os << params_[i] << '\n';
  os << "running " << running_mean_.size() << '\n';
  for (std::size_t s = 0; s < running_mean_.size(); ++s) {
    os << s << ' ' << running_mean_[s].size();
    for (Eigen::Index i = 0; i < running_mean_[s].size(); ++i) os << ' ' << running_mean_[s][i];
    for (Eigen::Index i = 0; i < running_var_[s].size(); ++i) os << ' ' << running_var_[s][i];
    os << '\n';
  }
}

inline Network Network::load(std::istream& is) {
  auto expect = [&](const std::string& word) {
    std::string tok;
    if (!(is >> tok) || tok != word) throw ConfigError("checkpoint: expected '" + word + "'");
  };
  expect("xstop-mlp");
  int version = 0;
  if (!(is >> version) || version != 1) throw ConfigError("checkpoint: unsupported version");
  expect("dims");
  std::size_t n = 0;
  is >> n;
  std::vector<std::size_t> dims(n);
  for (auto& d : dims) is >> d;
  expect("batchnorm");
  int bn_flag = 0;
  BatchNormOptions bn;
  is >> bn_flag >> bn.momentum >> bn.epsilon;
  if (!is) throw ConfigError("checkpoint: malformed header");
  Network net(dims, bn_flag != 0, bn);
  expect("params");
  std::size_t count = 0;
  is >> count;
  if (count != net.num_params()) throw ConfigError("checkpoint: parameter count mismatch");
  for (std::size_t i = 0; i < count; ++i) is >> net.params_[static_cast<Eigen::Index>(i)];
  expect("running");
  std::size_t sites = 0;
  is >> sites;
  if (sites != net.running_mean_.size()) throw ConfigError("checkpoint: site count mismatch");
  for (std::size_t s = 0; s < sites; ++s) {
    std::size_t idx = 0, width = 0;
    is >> idx >> width;
    if (idx != s || width != static_cast<std::size_t>(net.running_mean_[s].size()))
      throw ConfigError("checkpoint: running statistics mismatch");
    for (auto& v : net.running_mean_[s]) is >> v;
    for (auto& v : net.running_var_[s]) is >> v;
  }
  if (!is) throw ConfigError("checkpoint: truncated file");
  return net;
}

}  // namespace xstop::mlp
