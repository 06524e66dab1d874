#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "xstop/error.hpp"
#include "xstop/market.hpp"
#include "xstop/mlp.hpp"
#include "xstop/premium.hpp"

namespace xstop {

enum class FeatureMode { raw_state, state_plus_payoff };

inline FeatureMode parse_feature_mode(const std::string& s) {
  if (s == "raw_state") return FeatureMode::raw_state;
  if (s == "state_plus_payoff") return FeatureMode::state_plus_payoff;
  throw ConfigError("unknown feature mode '" + s + "'");
}
inline std::string to_string(FeatureMode f) {
  return f == FeatureMode::raw_state ? "raw_state" : "state_plus_payoff";
}

/// Per-feature affine standardization z = (f - mean) / scale.
struct Standardizer {
  std::vector<double> mean;
  std::vector<double> scale;

  bool fitted() const noexcept { return !mean.empty(); }

  static Standardizer fit(const mlp::Matrix& features) {
    Standardizer s;
    const double n = static_cast<double>(features.rows());
    for (Eigen::Index j = 0; j < features.cols(); ++j) {
      const double mu = features.col(j).mean();
      const double var = (features.col(j).array() - mu).square().sum() / n;
      const double sd = std::sqrt(var);
      s.mean.push_back(mu);
      // Constant features (every path at x0 when l = 0) keep unit scale.
      s.scale.push_back(sd > 1e-12 * (1.0 + std::abs(mu)) ? sd : 1.0);
    }
    return s;
  }

  void encode(mlp::Matrix& f) const {
    if (!fitted()) return;
    for (Eigen::Index j = 0; j < f.cols(); ++j)
      f.col(j) = (f.col(j).array() - mean[static_cast<std::size_t>(j)]) /
                 scale[static_cast<std::size_t>(j)];
  }
  void decode(mlp::Matrix& f) const {
    if (!fitted()) return;
    for (Eigen::Index j = 0; j < f.cols(); ++j)
      f.col(j) = f.col(j).array() * scale[static_cast<std::size_t>(j)] +
                 mean[static_cast<std::size_t>(j)];
  }
};

struct EnsembleOptions {
  FeatureMode features = FeatureMode::state_plus_payoff;
  std::vector<std::size_t> hidden = {21, 21};
  bool batchnorm = true;
  bool standardize = true;
};

/// One network per decision time t_l (l < L) plus the known terminal value.
/// Network l outputs w_l = V_l(x) - payoff(t_l, x); the value is recovered by
/// adding the payoff back.
class ValueEnsemble {
 public:
  ValueEnsemble(TimeGrid grid, StoppingPayoff payoff, EnsembleOptions options = {},
                std::uint64_t seed = 1)
      : grid_(grid), payoff_(payoff), options_(std::move(options)),
        standardizers_(grid.intervals()) {
    std::vector<std::size_t> dims{input_dim()};
    dims.insert(dims.end(), options_.hidden.begin(), options_.hidden.end());
    dims.push_back(1);
    nets_.reserve(grid.intervals());
    for (std::size_t l = 0; l < grid.intervals(); ++l) {
      nets_.emplace_back(dims, options_.batchnorm);
      nets_.back().initialize(stream_key(seed, l));
    }
  }

  const TimeGrid& grid() const noexcept { return grid_; }
  const StoppingPayoff& payoff() const noexcept { return payoff_; }
  StoppingPayoff& payoff() noexcept { return payoff_; }
  const EnsembleOptions& options() const noexcept { return options_; }
  FeatureMode feature_mode() const noexcept { return options_.features; }
  std::size_t size() const noexcept { return nets_.size(); }
  std::size_t input_dim() const noexcept {
    return options_.features == FeatureMode::raw_state ? 1 : 2;
  }

  mlp::Network& network(std::size_t l) { return nets_.at(l); }
  const mlp::Network& network(std::size_t l) const { return nets_.at(l); }
  const Standardizer& standardizer(std::size_t l) const { return standardizers_.at(l); }
  void set_standardizer(std::size_t l, Standardizer s) { standardizers_.at(l) = std::move(s); }

  void set_mode(mlp::Mode m) {
    for (auto& n : nets_) n.set_mode(m);
  }

  std::vector<double> payoffs(std::size_t l, const std::vector<double>& xs) const {
    check_index(l);
    std::vector<double> out(xs.size());
    const double t = grid_.time(l);
    for (std::size_t i = 0; i < xs.size(); ++i) out[i] = payoff_(t, xs[i]);
    return out;
  }

  /// Unstandardized network inputs: the state, plus the payoff when enabled.
  mlp::Matrix raw_features(std::size_t l, const std::vector<double>& xs,
                           const std::vector<double>& payoffs) const {
    check_network_index(l);
    const auto n = static_cast<Eigen::Index>(xs.size());
    mlp::Matrix f(n, static_cast<Eigen::Index>(input_dim()));
    for (Eigen::Index i = 0; i < n; ++i) {
      f(i, 0) = xs[static_cast<std::size_t>(i)];
      if (options_.features == FeatureMode::state_plus_payoff) {
        if (payoffs.size() != xs.size()) throw UsageError("payoff batch required");
        f(i, 1) = payoffs[static_cast<std::size_t>(i)];
      }
    }
    return f;
  }

  /// Network input rows for decision index l < L, standardized if fitted.
  mlp::Matrix features(std::size_t l, const std::vector<double>& xs,
                       const std::vector<double>& payoffs) const {
    mlp::Matrix f = raw_features(l, xs, payoffs);
    standardizers_[l].encode(f);
    return f;
  }

  /// Freeze per-network standardization from the first training batch.
  void fit_standardization(const PathBatch& batch) {
    if (!options_.standardize) return;
    for (std::size_t l = 0; l < nets_.size(); ++l) {
      const auto xs = batch.column(l);
      standardizers_[l] = Standardizer::fit(raw_features(l, xs, payoffs(l, xs)));
    }
  }

  /// Reset every network's running normalization statistics to the statistics
  /// of `batch` (taken from the training distribution) under current weights.
  void recalibrate_batchnorm(const PathBatch& batch) {
    for (std::size_t l = 0; l < nets_.size(); ++l) {
      const auto xs = batch.column(l);
      nets_[l].recalibrate(features(l, xs, payoffs(l, xs)));
    }
  }

  /// Raw network output w_l (pure evaluation in the given mode).  At l = L the
  /// value equals the payoff, so w is identically zero.
  std::vector<double> evaluate_w(std::size_t l, const std::vector<double>& xs,
                                 const std::vector<double>& payoffs,
                                 mlp::Mode mode = mlp::Mode::eval) const {
    check_index(l);
    if (l == grid_.intervals()) return std::vector<double>(xs.size(), 0.0);
    if (xs.empty()) return {};
    const mlp::Matrix out = nets_[l].infer(features(l, xs, payoffs), mode);
    return {out.data(), out.data() + out.rows()};
  }

  /// V_l = w_l + payoff for l < L; the exact terminal payoff at l = L.
  std::vector<double> evaluate_value(std::size_t l, const std::vector<double>& xs,
                                     const std::vector<double>& payoffs,
                                     mlp::Mode mode = mlp::Mode::eval) const {
    check_index(l);
    if (l == grid_.intervals()) return this->payoffs(l, xs);
    std::vector<double> v = evaluate_w(l, xs, payoffs, mode);
    for (std::size_t i = 0; i < v.size(); ++i) v[i] += payoffs[i];
    return v;
  }

  // ValueSource interface (eval mode, payoffs computed internally).
  std::vector<double> values(std::size_t l, const std::vector<double>& xs) const {
    return evaluate_value(l, xs, payoffs(l, xs));
  }

  void save(const std::filesystem::path& dir) const;
  static ValueEnsemble load(const std::filesystem::path& dir);

 private:
  void check_index(std::size_t l) const {
    if (l > grid_.intervals()) throw DomainError("time index out of range");
  }
  void check_network_index(std::size_t l) const {
    if (l >= grid_.intervals()) throw DomainError("no network at the terminal time");
  }

  TimeGrid grid_;
  StoppingPayoff payoff_;
  EnsembleOptions options_;
  std::vector<Standardizer> standardizers_;
  std::vector<mlp::Network> nets_;
};

// Checkpoint directory: manifest.json plus net_<l>.txt for each decision time.
inline void ValueEnsemble::save(const std::filesystem::path& dir) const {
  std::filesystem::create_directories(dir);
  nlohmann::json manifest;
  manifest["format"] = "xstop-ensemble";
  manifest["version"] = 1;
  manifest["horizon"] = grid_.horizon();
  manifest["intervals"] = grid_.intervals();
  manifest["feature_mode"] = to_string(options_.features);
  manifest["hidden"] = options_.hidden;
  manifest["batchnorm"] = options_.batchnorm;
  manifest["standardize"] = options_.standardize;
  manifest["payoff"] = {
      {"kind", payoff_.kind == StoppingPayoff::Kind::put ? "put" : "premium"},
      {"strike", payoff_.contract.strike},
      {"rate", payoff_.contract.rate},
      {"horizon", payoff_.contract.horizon},
      {"phi", payoff_.phi}};
  nlohmann::json stds = nlohmann::json::array();
  for (const auto& s : standardizers_) stds.push_back({{"mean", s.mean}, {"scale", s.scale}});
  manifest["standardization"] = stds;
  std::ofstream(dir / "manifest.json") << manifest.dump(2) << '\n';
  for (std::size_t l = 0; l < nets_.size(); ++l) {
    std::ofstream os(dir / ("net_" + std::to_string(l) + ".txt"));
    nets_[l].save(os);
    if (!os) throw ConfigError("failed to write checkpoint in " + dir.string());
  }
}

inline ValueEnsemble ValueEnsemble::load(const std::filesystem::path& dir) {
  std::ifstream in(dir / "manifest.json");
  if (!in) throw ConfigError("missing manifest.json in " + dir.string());
  const nlohmann::json m = nlohmann::json::parse(in);
  if (m.at("format") != "xstop-ensemble" || m.at("version") != 1)
    throw ConfigError("unsupported ensemble manifest");
  const TimeGrid grid(m.at("horizon").get<double>(), m.at("intervals").get<std::size_t>());
  StoppingPayoff payoff;
  const auto& p = m.at("payoff");
  payoff.kind = p.at("kind") == "put" ? StoppingPayoff::Kind::put : StoppingPayoff::Kind::premium;
  payoff.contract = {p.at("strike").get<double>(), p.at("rate").get<double>(),
                     p.at("horizon").get<double>()};
  payoff.phi = p.at("phi").get<double>();
  EnsembleOptions opt;
  opt.features = parse_feature_mode(m.at("feature_mode").get<std::string>());
  opt.hidden = m.at("hidden").get<std::vector<std::size_t>>();
  opt.batchnorm = m.at("batchnorm").get<bool>();
  opt.standardize = m.at("standardize").get<bool>();
  ValueEnsemble ens(grid, payoff, opt);
  const auto& stds = m.at("standardization");
  for (std::size_t l = 0; l < ens.size(); ++l) {
    ens.standardizers_[l].mean = stds.at(l).at("mean").get<std::vector<double>>();
    ens.standardizers_[l].scale = stds.at(l).at("scale").get<std::vector<double>>();
    std::ifstream is(dir / ("net_" + std::to_string(l) + ".txt"));
    if (!is) throw ConfigError("missing network checkpoint " + std::to_string(l));
    ens.nets_[l] = mlp::Network::load(is);
  }
  return ens;
}

}  // namespace xstop
