// Command-line front end: train, price, oracle, sweep, calibrate-phi, dynkin-demo.
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "xstop/experiment.hpp"

namespace {

struct CommonFlags {
  std::string config;
  std::vector<std::string> set;
  std::optional<double> K, lambda;
  std::optional<std::size_t> steps;
  std::optional<std::string> mode;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
};

void add_common(CLI::App* app, CommonFlags& f) {
  app->add_option("-c,--config", f.config, "key=value config file ([section] headers)");
  app->add_option("--set", f.set, "override any config key, e.g. --set train.batch=2048");
  app->add_option("--K", f.K, "penalty factor (train.penalty)");
  app->add_option("--lambda", f.lambda, "temperature (train.lambda)");
  app->add_option("--steps", f.steps, "training steps (train.steps)");
  app->add_option("--mode", f.mode, "offline_ml | online_td0 (train.mode)");
  app->add_option("--seed", f.seed, "training seed (train.seed)");
  app->add_option("--out", f.out, "output directory (output.dir)");
}

xstop::ExperimentConfig build_config(const CommonFlags& f) {
  xstop::ExperimentConfig cfg = f.config.empty() ? xstop::ExperimentConfig{} : xstop::load_config(f.config);
  for (const auto& s : f.set) xstop::apply_override(cfg, s);
  // Dedicated flags win over both the file and --set.
  using xstop::config_detail::fmt;
  if (f.K) xstop::apply_setting(cfg, "train.penalty", fmt(*f.K));
  if (f.lambda) xstop::apply_setting(cfg, "train.lambda", fmt(*f.lambda));
  if (f.steps) xstop::apply_setting(cfg, "train.steps", std::to_string(*f.steps));
  if (f.mode) xstop::apply_setting(cfg, "train.mode", *f.mode);
  if (f.seed) xstop::apply_setting(cfg, "train.seed", std::to_string(*f.seed));
  if (f.out) xstop::apply_setting(cfg, "output.dir", *f.out);
  xstop::validate(cfg);
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Exploratory penalty-RL optimal stopping: training, pricing and oracles"};
  app.set_version_flag("--version", std::string(XSTOP_VERSION));
  app.require_subcommand(1);

  CommonFlags flags;
  std::string checkpoint, axis;
  bool print_config = false;
  auto* train = app.add_subcommand("train", "train a value ensemble and write its learning curve");
  auto* price = app.add_subcommand("price", "price a saved ensemble on the held-out test batch");
  auto* oracle = app.add_subcommand("oracle", "finite-difference price, boundary and value slices");
  auto* sweep = app.add_subcommand("sweep", "one training run per K or lambda value");
  auto* calib = app.add_subcommand("calibrate-phi", "fit the volatility surrogate of the premium payoff");
  auto* dynkin = app.add_subcommand("dynkin-demo", "two-sided game solver vs the single-obstacle oracle");
  auto* show = app.add_subcommand("config", "print the effective configuration");
  for (auto* sub : {train, price, oracle, sweep, calib, dynkin, show}) add_common(sub, flags);
  price->add_option("--checkpoint", checkpoint, "checkpoint directory written by train")->required();
  sweep->add_option("--axis", axis, "K | lambda (sweep.axis)");
  show->add_flag("--hash", print_config, "print the config hash instead");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    xstop::ExperimentConfig cfg = build_config(flags);
    if (!axis.empty()) {
      xstop::apply_setting(cfg, "sweep.axis", axis);
      xstop::validate(cfg);
    }
    if (*train) {
      const auto r = xstop::run_train(cfg, std::cerr);
      std::cout << r.dir.string() << '\n';
    } else if (*price) {
      xstop::run_price(cfg, checkpoint, std::cout);
    } else if (*oracle) {
      const auto r = xstop::run_oracle(cfg, std::cerr);
      std::cout << r.dir.string() << '\n';
    } else if (*sweep) {
      const auto r = xstop::run_sweep(cfg, std::cerr);
      std::cout << r.dir.string() << '\n';
    } else if (*calib) {
      const auto r = xstop::run_calibrate_phi(cfg, std::cerr);
      std::cout << r.dir.string() << '\n';
    } else if (*dynkin) {
      const auto r = xstop::run_dynkin_demo(cfg, std::cerr);
      std::cout << r.dir.string() << '\n';
    } else if (*show) {
      std::cout << (print_config ? xstop::config_hash(cfg) + "\n" : xstop::dump_config(cfg));
    }
  } catch (const xstop::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const xstop::DomainError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const xstop::SolverError& e) {
    std::cerr << "solver error: " << e.what() << '\n';
    return 3;
  } catch (const xstop::TrainingError& e) {
    std::cerr << "training error: " << e.what() << '\n';
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 3;
  }
  return 0;
}
