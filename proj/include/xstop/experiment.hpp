#pragma once

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <map>
#include <mutex>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <json.hpp>
#include <openssl/evp.h>

#include "xstop/dynkin.hpp"
#include "xstop/ensemble.hpp"
#include "xstop/error.hpp"
#include "xstop/fd_oracle.hpp"
#include "xstop/market.hpp"
#include "xstop/premium.hpp"
#include "xstop/pricing.hpp"
#include "xstop/trainer.hpp"

#ifndef XSTOP_VERSION
#define XSTOP_VERSION "unknown"
#endif

namespace xstop {

inline constexpr const char* kOutputRootEnv = "XSTOP_OUTPUT_ROOT";

struct PayoffSettings {
  StoppingPayoff::Kind kind = StoppingPayoff::Kind::premium;
  std::optional<double> phi;  // empty: calibrate before training
};

struct OracleSettings {
  FdGridOptions grid;
  double penalty = 1e6;
  double tolerance = 1e-8;
  std::size_t max_iterations = 100;
  double boundary_tolerance = 1e-6;
  std::vector<double> slice_times = {0.0, 0.5};
};

struct SweepSettings {
  std::string axis = "K";
  std::vector<double> K = {1, 5, 10, 20, 30, 40, 50};
  std::vector<double> lambda = {0.1, 0.5, 1, 3, 5, 10};
  std::size_t workers = 1;
};

struct DynkinSettings {
  FdGridOptions grid{500, 500, 6.0, true};
  double penalty = 1e6;
  double lambda = 1.0;
};

struct OutputSettings {
  std::filesystem::path dir;  // empty: $XSTOP_OUTPUT_ROOT/<command>-<hash>
  bool timing = true;         // false writes elapsed_s = 0 for byte-stable curves
};

struct ExperimentConfig {
  MarketParams market;
  TrainConfig train;
  PayoffSettings payoff;
  CalibrationConfig calibration;
  OracleSettings oracle;
  SweepSettings sweep;
  DynkinSettings dynkin;
  OutputSettings output;
};

namespace config_detail {

// Shortest of 15..17 significant digits that reads back to the same double.
inline std::string fmt(double v) {
  for (int digits = 15;; ++digits) {
    std::ostringstream os;
    os << std::setprecision(digits) << v;
    if (digits == 17 || std::stod(os.str()) == v) return os.str();
  }
}

inline std::string trim(std::string s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  const auto e = s.find_last_not_of(" \t\r\n");
  return b == std::string::npos ? std::string{} : s.substr(b, e - b + 1);
}

inline double to_double(const std::string& key, const std::string& s) {
  try {
    std::size_t pos = 0;
    const double v = std::stod(s, &pos);
    if (trim(s.substr(pos)).empty()) return v;
  } catch (const std::exception&) {
  }
  throw ConfigError(key + ": expected a number, got '" + s + "'");
}

inline std::uint64_t to_unsigned(const std::string& key, const std::string& s) {
  const std::string t = trim(s);
  if (!t.empty() && t[0] != '-') {
    try {
      std::size_t pos = 0;
      const unsigned long long v = std::stoull(t, &pos, 0);
      if (pos == t.size()) return v;
    } catch (const std::exception&) {
    }
  }
  throw ConfigError(key + ": expected a nonnegative integer, got '" + s + "'");
}

inline bool to_bool(const std::string& key, const std::string& s) {
  const std::string t = trim(s);
  if (t == "true" || t == "1" || t == "on" || t == "yes") return true;
  if (t == "false" || t == "0" || t == "off" || t == "no") return false;
  throw ConfigError(key + ": expected true|false, got '" + s + "'");
}

inline std::vector<std::string> split(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

// Parse/format by field type.
inline void parse(const std::string& k, const std::string& s, double& v) { v = to_double(k, s); }
inline void parse(const std::string& k, const std::string& s, std::size_t& v) {
  v = static_cast<std::size_t>(to_unsigned(k, s));
}
inline void parse(const std::string& k, const std::string& s, bool& v) { v = to_bool(k, s); }
inline void parse(const std::string&, const std::string& s, std::string& v) { v = trim(s); }
inline void parse(const std::string&, const std::string& s, std::filesystem::path& v) {
  v = trim(s);
}
inline void parse(const std::string& k, const std::string& s, std::vector<double>& v) {
  v.clear();
  for (const auto& item : split(s)) v.push_back(to_double(k, item));
}
inline void parse(const std::string& k, const std::string& s, std::vector<std::size_t>& v) {
  v.clear();
  for (const auto& item : split(s)) v.push_back(static_cast<std::size_t>(to_unsigned(k, item)));
}
inline void parse(const std::string& k, const std::string& s, std::optional<double>& v) {
  if (trim(s) == "calibrate")
    v.reset();
  else
    v = to_double(k, s);
}
template <class E, class Parse>
void parse_enum(const std::string& k, const std::string& s, E& v, Parse p) {
  try {
    v = p(trim(s));
  } catch (const ConfigError& e) {
    throw ConfigError(k + ": " + e.what());
  }
}
inline void parse(const std::string& k, const std::string& s, TrainMode& v) {
  parse_enum(k, s, v, parse_train_mode);
}
inline void parse(const std::string& k, const std::string& s, mlp::Optimizer& v) {
  parse_enum(k, s, v, mlp::parse_optimizer);
}
inline void parse(const std::string& k, const std::string& s, FeatureMode& v) {
  parse_enum(k, s, v, parse_feature_mode);
}
inline void parse(const std::string& k, const std::string& s, LossWeighting& v) {
  parse_enum(k, s, v, parse_loss_weighting);
}
inline void parse(const std::string& k, const std::string& s, StoppingPayoff::Kind& v) {
  const std::string t = trim(s);
  if (t == "put")
    v = StoppingPayoff::Kind::put;
  else if (t == "premium")
    v = StoppingPayoff::Kind::premium;
  else
    throw ConfigError(k + ": expected put|premium, got '" + s + "'");
}

inline std::string format(double v) { return fmt(v); }
inline std::string format(std::size_t v) { return std::to_string(v); }
inline std::string format(bool v) { return v ? "true" : "false"; }
inline std::string format(const std::string& v) { return v; }
inline std::string format(const std::filesystem::path& v) { return v.string(); }
inline std::string format(const std::vector<double>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + fmt(v[i]);
  return out;
}
inline std::string format(const std::vector<std::size_t>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + std::to_string(v[i]);
  return out;
}
inline std::string format(const std::optional<double>& v) { return v ? fmt(*v) : "calibrate"; }
inline std::string format(TrainMode v) { return to_string(v); }
inline std::string format(mlp::Optimizer v) { return mlp::to_string(v); }
inline std::string format(FeatureMode v) { return to_string(v); }
inline std::string format(LossWeighting v) { return to_string(v); }
inline std::string format(StoppingPayoff::Kind v) {
  return v == StoppingPayoff::Kind::put ? "put" : "premium";
}

}  // namespace config_detail

struct ConfigField {
  std::string key;
  std::function<void(ExperimentConfig&, const std::string&)> set;
  std::function<std::string(const ExperimentConfig&)> get;
  bool affects_output = true;  // output.* keys are excluded from the hash
};

template <class Access>
ConfigField make_field(std::string key, Access access, bool affects_output = true) {
  ConfigField f;
  f.key = key;
  f.set = [key, access](ExperimentConfig& c, const std::string& s) {
    config_detail::parse(key, s, access(c));
  };
  f.get = [access](const ExperimentConfig& c) {
    return config_detail::format(access(const_cast<ExperimentConfig&>(c)));
  };
  f.affects_output = affects_output;
  return f;
}

/// The documented config schema: every accepted key, in file order.
inline const std::vector<ConfigField>& config_fields() {
  using C = ExperimentConfig;
  static const std::vector<ConfigField> fields = {
      make_field("market.x0", [](C& c) -> auto& { return c.market.x0; }),
      make_field("market.rate", [](C& c) -> auto& { return c.market.rate; }),
      make_field("market.sigma", [](C& c) -> auto& { return c.market.sigma; }),
      make_field("market.strike", [](C& c) -> auto& { return c.market.strike; }),
      make_field("market.horizon", [](C& c) -> auto& { return c.market.horizon; }),
      make_field("train.intervals", [](C& c) -> auto& { return c.train.intervals; }),
      make_field("train.penalty", [](C& c) -> auto& { return c.train.penalty; }),
      make_field("train.lambda", [](C& c) -> auto& { return c.train.lambda; }),
      make_field("train.learning_rate", [](C& c) -> auto& { return c.train.learning_rate; }),
      make_field("train.batch", [](C& c) -> auto& { return c.train.batch; }),
      make_field("train.test_batch", [](C& c) -> auto& { return c.train.test_batch; }),
      make_field("train.steps", [](C& c) -> auto& { return c.train.steps; }),
      make_field("train.eval_every", [](C& c) -> auto& { return c.train.eval_every; }),
      make_field("train.mode", [](C& c) -> auto& { return c.train.mode; }),
      make_field("train.discounting", [](C& c) -> auto& { return c.train.discounting; }),
      make_field("train.seed", [](C& c) -> auto& { return c.train.seed; }),
      make_field("train.test_seed", [](C& c) -> auto& { return c.train.test_seed; }),
      make_field("train.optimizer", [](C& c) -> auto& { return c.train.optimizer; }),
      make_field("train.lr_decay_start", [](C& c) -> auto& { return c.train.lr_decay_start; }),
      make_field("train.lr_decay_factor", [](C& c) -> auto& { return c.train.lr_decay_factor; }),
      make_field("train.recalibration_batch",
                 [](C& c) -> auto& { return c.train.recalibration_batch; }),
      make_field("train.td_rate_times_dt", [](C& c) -> auto& { return c.train.td_rate_times_dt; }),
      make_field("train.weighting", [](C& c) -> auto& { return c.train.weighting; }),
      make_field("train.full_gradient", [](C& c) -> auto& { return c.train.full_gradient; }),
      make_field("train.features", [](C& c) -> auto& { return c.train.ensemble.features; }),
      make_field("train.hidden", [](C& c) -> auto& { return c.train.ensemble.hidden; }),
      make_field("train.batchnorm", [](C& c) -> auto& { return c.train.ensemble.batchnorm; }),
      make_field("train.standardize", [](C& c) -> auto& { return c.train.ensemble.standardize; }),
      make_field("payoff.kind", [](C& c) -> auto& { return c.payoff.kind; }),
      make_field("payoff.phi", [](C& c) -> auto& { return c.payoff.phi; }),
      make_field("calibration.phi0", [](C& c) -> auto& { return c.calibration.phi0; }),
      make_field("calibration.steps", [](C& c) -> auto& { return c.calibration.steps; }),
      make_field("calibration.batch", [](C& c) -> auto& { return c.calibration.batch; }),
      make_field("calibration.intervals", [](C& c) -> auto& { return c.calibration.intervals; }),
      make_field("calibration.learning_rate",
                 [](C& c) -> auto& { return c.calibration.learning_rate; }),
      make_field("calibration.seed", [](C& c) -> auto& { return c.calibration.seed; }),
      make_field("calibration.exact_paths", [](C& c) -> auto& { return c.calibration.exact_paths; }),
      make_field("oracle.ny", [](C& c) -> auto& { return c.oracle.grid.ny; }),
      make_field("oracle.nt", [](C& c) -> auto& { return c.oracle.grid.nt; }),
      make_field("oracle.halfwidth", [](C& c) -> auto& { return c.oracle.grid.halfwidth; }),
      make_field("oracle.center_on_strike",
                 [](C& c) -> auto& { return c.oracle.grid.center_on_strike; }),
      make_field("oracle.penalty", [](C& c) -> auto& { return c.oracle.penalty; }),
      make_field("oracle.tolerance", [](C& c) -> auto& { return c.oracle.tolerance; }),
      make_field("oracle.max_iterations", [](C& c) -> auto& { return c.oracle.max_iterations; }),
      make_field("oracle.boundary_tolerance",
                 [](C& c) -> auto& { return c.oracle.boundary_tolerance; }),
      make_field("oracle.slice_times", [](C& c) -> auto& { return c.oracle.slice_times; }),
      make_field("sweep.axis", [](C& c) -> auto& { return c.sweep.axis; }),
      make_field("sweep.K", [](C& c) -> auto& { return c.sweep.K; }),
      make_field("sweep.lambda", [](C& c) -> auto& { return c.sweep.lambda; }),
      make_field("sweep.workers", [](C& c) -> auto& { return c.sweep.workers; }, false),
      make_field("dynkin.ny", [](C& c) -> auto& { return c.dynkin.grid.ny; }),
      make_field("dynkin.nt", [](C& c) -> auto& { return c.dynkin.grid.nt; }),
      make_field("dynkin.halfwidth", [](C& c) -> auto& { return c.dynkin.grid.halfwidth; }),
      make_field("dynkin.penalty", [](C& c) -> auto& { return c.dynkin.penalty; }),
      make_field("dynkin.lambda", [](C& c) -> auto& { return c.dynkin.lambda; }),
      make_field("output.dir", [](C& c) -> auto& { return c.output.dir; }, false),
      make_field("output.timing", [](C& c) -> auto& { return c.output.timing; }, false),
  };
  return fields;
}

/// Set one dotted key (e.g. "train.lambda").
inline void apply_setting(ExperimentConfig& cfg, const std::string& key, const std::string& value) {
  for (const auto& f : config_fields())
    if (f.key == key) {
      f.set(cfg, value);
      return;
    }
  throw ConfigError("unknown config key '" + key + "'");
}

/// "key=value" override as given on the command line.
inline void apply_override(ExperimentConfig& cfg, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos) throw ConfigError("override '" + assignment + "' is not key=value");
  apply_setting(cfg, config_detail::trim(assignment.substr(0, eq)), assignment.substr(eq + 1));
}

/// INI-style file: [section] headers and key = value lines; '#' or ';' comments.
inline void load_config_stream(ExperimentConfig& cfg, std::istream& in) {
  boost::property_tree::ptree tree;
  try {
    boost::property_tree::ini_parser::read_ini(in, tree);
  } catch (const boost::property_tree::ini_parser_error& e) {
    throw ConfigError(std::string("config parse error: ") + e.what());
  }
  for (const auto& [section, body] : tree) {
    if (body.empty()) throw ConfigError("config key '" + section + "' must live in a [section]");
    for (const auto& [key, node] : body) {
      std::string value = node.get_value<std::string>();
      // Trailing comments are allowed after values.
      for (const char c : {'#', ';'})
        if (const auto p = value.find(c); p != std::string::npos) value = value.substr(0, p);
      apply_setting(cfg, section + "." + key, value);
    }
  }
}

inline ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  ExperimentConfig cfg;
  load_config_stream(cfg, in);
  return cfg;
}

inline std::map<std::string, std::string> config_values(const ExperimentConfig& cfg,
                                                        bool include_output = true) {
  std::map<std::string, std::string> out;
  for (const auto& f : config_fields())
    if (include_output || f.affects_output) out[f.key] = f.get(cfg);
  return out;
}

/// Canonical file text: sections in schema order.
inline std::string dump_config(const ExperimentConfig& cfg) {
  std::string out, section;
  for (const auto& f : config_fields()) {
    const auto dot = f.key.find('.');
    const std::string s = f.key.substr(0, dot);
    if (s != section) {
      out += (section.empty() ? "" : "\n") + ("[" + s + "]\n");
      section = s;
    }
    out += f.key.substr(dot + 1) + " = " + f.get(cfg) + "\n";
  }
  return out;
}

/// SHA-256 of the canonical config text, excluding output-only keys.
inline std::string config_hash(const ExperimentConfig& cfg) {
  std::string text;
  for (const auto& [k, v] : config_values(cfg, false)) text += k + "=" + v + "\n";
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(text.data(), text.size(), digest, &len, EVP_sha256(), nullptr) != 1)
    throw std::runtime_error("sha256 failed");
  std::ostringstream os;
  for (unsigned int i = 0; i < len; ++i)
    os << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(digest[i]);
  return os.str();
}

inline void validate(const ExperimentConfig& cfg) {
  const auto& m = cfg.market;
  if (!(m.x0 > 0.0)) throw ConfigError("market.x0 must be positive");
  if (!(m.sigma > 0.0)) throw ConfigError("market.sigma must be positive");
  if (!(m.strike > 0.0)) throw ConfigError("market.strike must be positive");
  if (!(m.horizon > 0.0)) throw ConfigError("market.horizon must be positive");
  if (!std::isfinite(m.rate)) throw ConfigError("market.rate must be finite");
  m.validate();
  try {
    cfg.train.validate(m.horizon);
  } catch (const ConfigError& e) {
    const std::string msg = e.what();
    throw ConfigError(msg.rfind("train.", 0) == 0 ? msg : "train.penalty: " + msg);
  }
  if (cfg.train.ensemble.hidden.empty()) throw ConfigError("train.hidden must list layer widths");
  if (cfg.payoff.phi && !(*cfg.payoff.phi > 0.0)) throw ConfigError("payoff.phi must be positive");
  if (!(cfg.calibration.phi0 > 0.0)) throw ConfigError("calibration.phi0 must be positive");
  if (cfg.calibration.batch < 1) throw ConfigError("calibration.batch must be positive");
  if (cfg.calibration.intervals < 1) throw ConfigError("calibration.intervals must be positive");
  if (!(cfg.oracle.penalty >= 0.0)) throw ConfigError("oracle.penalty must be nonnegative");
  if (!(cfg.oracle.tolerance > 0.0)) throw ConfigError("oracle.tolerance must be positive");
  if (cfg.oracle.grid.ny < 3) throw ConfigError("oracle.ny must be at least 3");
  if (cfg.oracle.grid.nt < 1) throw ConfigError("oracle.nt must be positive");
  if (!(cfg.oracle.grid.halfwidth > 0.0)) throw ConfigError("oracle.halfwidth must be positive");
  for (double t : cfg.oracle.slice_times)
    if (t < 0.0 || t > m.horizon) throw ConfigError("oracle.slice_times must lie in [0, T]");
  if (cfg.sweep.axis != "K" && cfg.sweep.axis != "lambda")
    throw ConfigError("sweep.axis must be K or lambda");
  if (cfg.sweep.K.empty()) throw ConfigError("sweep.K must be nonempty");
  if (cfg.sweep.lambda.empty()) throw ConfigError("sweep.lambda must be nonempty");
  const double dt = m.horizon / static_cast<double>(cfg.train.intervals);
  for (double k : cfg.sweep.K)
    if (!(k > 0.0) || k * dt > 1.0 + 1e-12)
      throw ConfigError("sweep.K: every value must satisfy 0 < K and K*dt <= 1 (got " +
                        config_detail::fmt(k) + ")");
  for (double l : cfg.sweep.lambda)
    if (!(l > 0.0)) throw ConfigError("sweep.lambda: every value must be positive");
  if (cfg.sweep.workers < 1) throw ConfigError("sweep.workers must be positive");
  if (cfg.dynkin.grid.ny < 3 || cfg.dynkin.grid.nt < 1)
    throw ConfigError("dynkin.ny must be >= 3 and dynkin.nt >= 1");
  if (!(cfg.dynkin.penalty > 0.0)) throw ConfigError("dynkin.penalty must be positive");
  if (!(cfg.dynkin.lambda > 0.0)) throw ConfigError("dynkin.lambda must be positive");
}

/// Output directory: explicit, else $XSTOP_OUTPUT_ROOT (or ./runs) / <command>-<hash8>.
inline std::filesystem::path resolve_output_dir(const ExperimentConfig& cfg,
                                                const std::string& command) {
  if (!cfg.output.dir.empty()) return cfg.output.dir;
  const char* root = std::getenv(kOutputRootEnv);
  const std::filesystem::path base = root && *root ? root : "runs";
  return base / (command + "-" + config_hash(cfg).substr(0, 8));
}

inline void write_manifest(const std::filesystem::path& dir, const std::string& command,
                           const ExperimentConfig& cfg, const nlohmann::json& extra = {}) {
  std::filesystem::create_directories(dir);
  nlohmann::json j;
  j["command"] = command;
  j["version"] = XSTOP_VERSION;
  j["config_hash"] = config_hash(cfg);
  j["config"] = config_values(cfg);
  j["seeds"] = {{"train", cfg.train.seed},
                {"test", cfg.train.test_seed},
                {"calibration", cfg.calibration.seed}};
  if (!extra.is_null()) j["results"] = extra;
  std::ofstream(dir / "manifest.json") << j.dump(2) << '\n';
  std::ofstream(dir / "config.ini") << dump_config(cfg);
}

// ---------------------------------------------------------------- oracle

struct OracleBundle {
  double price = 0.0;             // at (0, x0) with the oracle penalty
  FreeBoundary boundary;          // at the oracle penalty
  FreeBoundary train_boundary;    // at the training penalty, used for classification
  std::size_t max_iterations = 0;
};

inline FdOptions oracle_options(const ExperimentConfig& cfg, double penalty) {
  FdOptions o;
  o.penalty = penalty;
  o.lambda = 0.0;
  o.tolerance = cfg.oracle.tolerance;
  o.max_iterations = cfg.oracle.max_iterations;
  o.payoff = StoppingPayoff{StoppingPayoff::Kind::put, PutContract::from(cfg.market), cfg.market.sigma};
  return o;
}

inline FdSolution solve_oracle(const ExperimentConfig& cfg, double penalty) {
  return solve_penalized_vi(cfg.market, make_fd_grid(cfg.market, cfg.oracle.grid),
                            oracle_options(cfg, penalty));
}

/// Oracle price plus the exercise boundary at the training penalty (the
/// classification reference for an agent trained with that K).
inline OracleBundle build_oracle(const ExperimentConfig& cfg, double train_penalty) {
  OracleBundle b;
  const FdSolution sol = solve_oracle(cfg, cfg.oracle.penalty);
  b.price = price_at(sol, 0.0, cfg.market.x0);
  b.boundary = extract_free_boundary(sol, cfg.oracle.boundary_tolerance);
  for (auto k : sol.iterations()) b.max_iterations = std::max(b.max_iterations, k);
  if (train_penalty == cfg.oracle.penalty) {
    b.train_boundary = b.boundary;
  } else {
    b.train_boundary =
        extract_free_boundary(solve_oracle(cfg, train_penalty), cfg.oracle.boundary_tolerance);
  }
  return b;
}

inline std::string slice_name(double t) {
  std::ostringstream os;
  os << "slice_t" << std::setprecision(6) << t << ".csv";
  return os.str();
}

struct OracleRunResult {
  std::filesystem::path dir;
  double price = 0.0;
};

inline OracleRunResult run_oracle(const ExperimentConfig& cfg, std::ostream& log) {
  validate(cfg);
  const auto dir = resolve_output_dir(cfg, "oracle");
  std::filesystem::create_directories(dir);
  const auto start = std::chrono::steady_clock::now();
  const FdSolution sol = solve_oracle(cfg, cfg.oracle.penalty);
  const double seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  const double price = price_at(sol, 0.0, cfg.market.x0);
  const FreeBoundary fb = extract_free_boundary(sol, cfg.oracle.boundary_tolerance);
  std::size_t max_it = 0;
  for (auto k : sol.iterations()) max_it = std::max(max_it, k);
  {
    std::ofstream os(dir / "boundary.csv");
    os << std::setprecision(17) << "t,x_f\n";
    for (std::size_t i = 0; i < fb.times.size(); ++i)
      if (fb.x[i]) os << fb.times[i] << ',' << *fb.x[i] << '\n';
  }
  const FdGrid& g = sol.grid();
  for (double t : cfg.oracle.slice_times) {
    const auto i = static_cast<std::size_t>(std::llround(t / g.dt()));
    std::ofstream os(dir / slice_name(t));
    os << std::setprecision(17) << "x,u\n";
    for (std::size_t j = 0; j <= g.ny; ++j)
      os << g.x(j) << ',' << sol(std::min(i, g.nt), j)
         << '\n';
  }
  nlohmann::json res = {{"price", price},
                        {"penalty", cfg.oracle.penalty},
                        {"ny", g.ny},
                        {"nt", g.nt},
                        {"y_min", g.y_min},
                        {"y_max", g.y_max},
                        {"tolerance", cfg.oracle.tolerance},
                        {"max_newton_iterations", max_it},
                        {"boundary_rows", fb.present()}};
  std::ofstream(dir / "oracle.json") << res.dump(2) << '\n';
  write_manifest(dir, "oracle", cfg, res);
  log << std::setprecision(10) << "oracle price " << price << " (K=" << cfg.oracle.penalty
      << ", grid " << g.ny << "x" << g.nt << ", " << std::setprecision(3) << seconds << " s)\n";
  return {dir, price};
}

// ----------------------------------------------------------- calibration

inline void write_calibration_csv(std::ostream& os, const CalibrationResult& r) {
  os << std::setprecision(17) << "step,phi,loss\n";
  for (const auto& row : r.trace) {
    os << row.step << ',' << row.phi << ',';
    if (std::isfinite(row.loss)) os << row.loss;
    os << '\n';
  }
}

struct CalibrationRunResult {
  std::filesystem::path dir;
  double phi = 0.0;
};

inline CalibrationRunResult run_calibrate_phi(const ExperimentConfig& cfg, std::ostream& log) {
  validate(cfg);
  const auto dir = resolve_output_dir(cfg, "calibrate-phi");
  std::filesystem::create_directories(dir);
  const CalibrationResult r = calibrate_phi(cfg.market, cfg.calibration);
  std::ofstream os(dir / "calibration.csv");
  write_calibration_csv(os, r);
  std::size_t clamped = 0;
  for (const auto& row : r.trace) clamped += row.clamped ? 1 : 0;
  if (clamped) log << "warning: phi was clamped at " << clamped << " steps\n";
  write_manifest(dir, "calibrate-phi", cfg, {{"phi", r.phi}, {"clamped_steps", clamped}});
  log << std::setprecision(10) << "calibrated phi " << r.phi << " after " << cfg.calibration.steps
      << " steps\n";
  return {dir, r.phi};
}

// -------------------------------------------------------------- training

inline StoppingPayoff make_payoff(const ExperimentConfig& cfg, double phi) {
  return StoppingPayoff{cfg.payoff.kind, PutContract::from(cfg.market), phi};
}

struct TrainRunResult {
  std::filesystem::path dir;
  double phi = 0.0;
  double oracle_price = 0.0;
  std::vector<TrainRecord> records;
  std::optional<std::string> error;
};

inline void write_curve(const std::filesystem::path& file, const std::vector<TrainRecord>& records,
                        bool timing) {
  std::ofstream os(file);
  write_curve_header(os);
  for (auto r : records) {
    if (!timing) r.elapsed_s = 0.0;
    write_curve_row(os, r);
  }
}

/// Trains in `dir` (no manifest); shared by train and sweep.
inline TrainRunResult train_into(const ExperimentConfig& cfg, const std::filesystem::path& dir,
                                 const OracleBundle& oracle, double phi, std::ostream& log) {
  std::filesystem::create_directories(dir);
  TrainRunResult res;
  res.dir = dir;
  res.phi = phi;
  res.oracle_price = oracle.price;
  Trainer trainer(cfg.market, cfg.train, make_payoff(cfg, phi),
                  EvaluationOracle{oracle.price, oracle.train_boundary});
  TrainOutcome out = trainer.train();
  // The checkpoint should evaluate like a freshly recorded model.
  if (!out.error) trainer.refresh_statistics();
  res.records = std::move(out.records);
  res.error = out.error;
  write_curve(dir / "learning_curve.csv", res.records, cfg.output.timing);
  trainer.ensemble().save(dir / "checkpoint");
  if (!res.records.empty()) {
    const auto& r = res.records.back();
    log << std::setprecision(6) << "step " << r.step << ": P_stopping " << r.price.stopping.value
        << " (rel err " << r.price.rel_err_stopping << "), P_control " << r.price.control.value
        << " (rel err " << r.price.rel_err_control << ")";
    if (r.min_accuracy) log << ", min accuracy " << *r.min_accuracy;
    log << '\n';
  }
  return res;
}

inline nlohmann::json record_json(const TrainRecord& r) {
  nlohmann::json j = r.price.to_json();
  j["step"] = r.step;
  j["loss"] = r.loss;
  if (r.min_accuracy) j["min_accuracy"] = *r.min_accuracy;
  nlohmann::json acc = nlohmann::json::array();
  for (const auto& a : r.accuracy) acc.push_back(a ? nlohmann::json(*a) : nlohmann::json());
  j["accuracy"] = acc;
  return j;
}

inline double resolve_phi(const ExperimentConfig& cfg, const std::filesystem::path& dir,
                          std::ostream& log) {
  if (cfg.payoff.kind == StoppingPayoff::Kind::put) return cfg.market.sigma;  // unused
  if (cfg.payoff.phi) return *cfg.payoff.phi;
  const CalibrationResult r = calibrate_phi(cfg.market, cfg.calibration);
  std::filesystem::create_directories(dir);
  std::ofstream os(dir / "calibration.csv");
  write_calibration_csv(os, r);
  log << std::setprecision(10) << "calibrated phi " << r.phi << '\n';
  return r.phi;
}

inline TrainRunResult run_train(const ExperimentConfig& cfg, std::ostream& log) {
  validate(cfg);
  const auto dir = resolve_output_dir(cfg, "train");
  const double phi = resolve_phi(cfg, dir, log);
  const OracleBundle oracle = build_oracle(cfg, cfg.train.penalty);
  TrainRunResult res = train_into(cfg, dir, oracle, phi, log);
  nlohmann::json summary = {{"phi", phi}, {"oracle_price", oracle.price}};
  if (!res.records.empty()) summary["final"] = record_json(res.records.back());
  if (res.error) summary["error"] = *res.error;
  write_manifest(dir, "train", cfg, summary);
  if (res.error) throw TrainingError("training aborted after " +
                                     std::to_string(res.records.size()) +
                                     " records: " + *res.error);
  return res;
}

// --------------------------------------------------------------- pricing

struct PriceRunResult {
  PriceReport report;
  std::vector<std::optional<double>> accuracy;
};

/// Prices a saved ensemble on the held-out batch and prints one JSON object.
inline PriceRunResult run_price(const ExperimentConfig& cfg, const std::filesystem::path& checkpoint,
                                std::ostream& out) {
  validate(cfg);
  const ValueEnsemble ens = ValueEnsemble::load(checkpoint);
  if (std::abs(ens.grid().horizon() - cfg.market.horizon) > 1e-12)
    throw ConfigError("checkpoint horizon differs from market.horizon");
  const OracleBundle oracle = build_oracle(cfg, cfg.train.penalty);
  const PathBatch batch = simulate_paths(cfg.market, ens.grid(), cfg.train.test_batch,
                                         cfg.train.test_seed);
  const ExecutionPolicy policy = ExecutionPolicy::from_ensemble(ens, batch);
  PriceRunResult r;
  r.report = price_report(policy, batch, PutContract::from(cfg.market), cfg.train.penalty,
                          oracle.price);
  r.accuracy = classification_accuracy(policy, batch, oracle.train_boundary);
  nlohmann::json j = r.report.to_json();
  j["penalty"] = cfg.train.penalty;
  j["test_batch"] = cfg.train.test_batch;
  if (auto a = min_accuracy(r.accuracy)) j["min_accuracy"] = *a;
  out << j.dump() << '\n';
  return r;
}

// ----------------------------------------------------------------- sweeps

struct SweepCell {
  double value = 0.0;
  std::optional<TrainRecord> final;
  std::string status = "ok";
};

struct SweepRunResult {
  std::filesystem::path dir;
  std::vector<SweepCell> cells;
};

inline SweepRunResult run_sweep(const ExperimentConfig& cfg, std::ostream& log) {
  validate(cfg);
  const auto dir = resolve_output_dir(cfg, "sweep");
  std::filesystem::create_directories(dir);
  const bool on_k = cfg.sweep.axis == "K";
  const std::vector<double>& values = on_k ? cfg.sweep.K : cfg.sweep.lambda;
  const double phi = resolve_phi(cfg, dir, log);
  SweepRunResult res;
  res.dir = dir;
  res.cells.resize(values.size());
  std::mutex log_mutex;
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i; (i = next++) < values.size();) {
      ExperimentConfig cell = cfg;
      (on_k ? cell.train.penalty : cell.train.lambda) = values[i];
      SweepCell& out = res.cells[i];
      out.value = values[i];
      std::ostringstream cell_log;
      try {
        const OracleBundle oracle = build_oracle(cell, cell.train.penalty);
        const auto sub = dir / "cells" / (cfg.sweep.axis + "=" + config_detail::fmt(values[i]));
        TrainRunResult r = train_into(cell, sub, oracle, phi, cell_log);
        if (!r.records.empty()) out.final = r.records.back();
        if (r.error) out.status = "training_error: " + *r.error;
      } catch (const std::exception& e) {
        out.status = std::string("error: ") + e.what();
      }
      std::lock_guard lock(log_mutex);
      log << cfg.sweep.axis << "=" << values[i] << ": " << cell_log.str()
          << (out.status == "ok" ? "" : out.status + "\n");
    }
  };
  const std::size_t n_workers = std::min(cfg.sweep.workers, values.size());
  std::vector<std::thread> pool;
  for (std::size_t w = 1; w < n_workers; ++w) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();

  std::ofstream os(dir / "sweep.csv");
  os << std::setprecision(17) << cfg.sweep.axis
     << ",p_stopping,p_control,rel_err_stopping,rel_err_control,min_accuracy,status\n";
  for (const auto& c : res.cells) {
    os << c.value << ',';
    if (c.final) {
      os << c.final->price.stopping.value << ',' << c.final->price.control.value << ','
         << c.final->price.rel_err_stopping << ',' << c.final->price.rel_err_control << ',';
      if (c.final->min_accuracy) os << *c.final->min_accuracy;
    } else {
      os << ",,,,";
    }
    os << ',' << c.status << '\n';
  }
  write_manifest(dir, "sweep", cfg, {{"phi", phi}, {"cells", values.size()}});
  return res;
}

// ----------------------------------------------------------------- dynkin

struct DynkinRunResult {
  std::filesystem::path dir;
  double game_price = 0.0;
  double oracle_price = 0.0;
  double max_abs_diff = 0.0;
};

/// Two-sided game solver with the upper obstacle disabled, checked against the
/// single-obstacle oracle on the same grid.
inline DynkinRunResult run_dynkin_demo(const ExperimentConfig& cfg, std::ostream& log) {
  validate(cfg);
  const auto dir = resolve_output_dir(cfg, "dynkin-demo");
  std::filesystem::create_directories(dir);
  const FdGrid grid = make_fd_grid(cfg.market, cfg.dynkin.grid);
  FdOptions fo;
  fo.penalty = cfg.dynkin.penalty;
  fo.tolerance = cfg.oracle.tolerance;
  fo.max_iterations = cfg.oracle.max_iterations;
  fo.payoff = StoppingPayoff{StoppingPayoff::Kind::put, PutContract::from(cfg.market), cfg.market.sigma};
  const FdSolution single = solve_penalized_vi(cfg.market, grid, fo);
  dynkin::GameOptions go;
  go.penalty = cfg.dynkin.penalty;
  go.lambda = cfg.dynkin.lambda;
  go.tolerance = cfg.oracle.tolerance;
  go.max_iterations = cfg.oracle.max_iterations;
  const auto game =
      dynkin::solve_penalized_game(dynkin::single_obstacle_spec(cfg.market, fo.payoff), grid, go);
  DynkinRunResult r;
  r.dir = dir;
  for (std::size_t i = 0; i <= grid.nt; ++i)
    for (std::size_t j = 0; j <= grid.ny; ++j)
      r.max_abs_diff = std::max(r.max_abs_diff, std::abs(game.w(i, j) - single(i, j)));
  r.oracle_price = price_at(single, 0.0, cfg.market.x0);
  // Same interpolation on the game field.
  FdSolution as_fd(grid, cfg.market, fo);
  for (std::size_t i = 0; i <= grid.nt; ++i)
    for (std::size_t j = 0; j <= grid.ny; ++j) as_fd(i, j) = game.w(i, j);
  r.game_price = price_at(as_fd, 0.0, cfg.market.x0);
  {
    std::ofstream os(dir / "game_slice_t0.csv");
    dynkin::write_slice_csv(os, game, 0);
  }
  {
    std::ofstream os(dir / "game_slice_tmid.csv");
    dynkin::write_slice_csv(os, game, grid.nt / 2);
  }
  nlohmann::json res = {{"game_price", r.game_price},
                        {"oracle_price", r.oracle_price},
                        {"max_abs_diff", r.max_abs_diff},
                        {"penalty", cfg.dynkin.penalty},
                        {"lambda", cfg.dynkin.lambda},
                        {"ny", grid.ny},
                        {"nt", grid.nt}};
  std::ofstream(dir / "dynkin.json") << res.dump(2) << '\n';
  write_manifest(dir, "dynkin-demo", cfg, res);
  log << std::setprecision(10) << "game price " << r.game_price << ", single-obstacle price "
      << r.oracle_price << ", max |diff| " << std::setprecision(3) << r.max_abs_diff << '\n';
  return r;
}

}  // namespace xstop
