#include <cstdlib>
#include <iostream>

#include <CLI11.hpp>
#include <json.hpp>

#include "sgflab/expcli.hpp"

namespace {

int fail(int code, const std::string& kind, const std::string& message) {
  std::cerr << nlohmann::json{{"error", kind}, {"message", message}, {"exit_code", code}}.dump() << '\n';
  return code;
}

}  // namespace

int main(int argc, char** argv) {
  using namespace sgflab;
  CLI::App app{"SGD noise and flatness experiments"};
  std::string experiment, config_path, out;
  std::uint64_t seed = 0;
  int jobs = 1;
  bool print_config = false;
  app.add_option("experiment", experiment, "experiment name")->required();
  app.add_option("--config", config_path, "flat key = value config file");
  app.add_option("--seed", seed, "overrides data.seed and train.seed");
  app.add_option("--jobs", jobs, "worker threads for realizations")->check(CLI::PositiveNumber);
  app.add_option("--out", out, "output directory");
  app.add_flag("--print-config", print_config, "print the resolved config and exit");
  app.footer("experiments: " + [] {
    std::string s;
    for (const auto& e : expcli::registry()) s += (s.empty() ? "" : ", ") + e;
    return s;
  }());
  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return fail(1, "usage", e.what());
  }

  expcli::ExperimentConfig cfg;
  try {
    if (config_path.empty()) {
      cfg = expcli::default_config(experiment);
    } else {
      cfg = expcli::load_config(config_path);
      if (cfg.experiment.empty()) cfg.experiment = experiment;
      if (cfg.experiment != experiment) {
        return fail(1, "config", "config is for '" + cfg.experiment + "', not '" + experiment + "'");
      }
    }
    if (app.count("--seed")) {
      cfg.data.seed = seed;
      cfg.train.seed = seed;
    }
  } catch (const Error& e) {
    return fail(1, e.kind(), e.what());
  }
  if (print_config) {
    std::cout << expcli::format_config(cfg);
    return 0;
  }

  expcli::RunOptions opt;
  opt.jobs = jobs;
  if (!out.empty()) opt.out = out;
  if (const char* env = std::getenv("SGFLAB_OUT"); env && *env) opt.out = env;
  try {
    const expcli::RunManifest m = expcli::run_experiment(cfg, opt);
    for (const auto& d : m.diagnostics) std::cerr << d.severity << ": " << d.message << '\n';
    std::cout << (m.output_dir / "manifest.json").string() << '\n';
    return 0;
  } catch (const ConfigError& e) {
    return fail(1, e.kind(), e.what());
  } catch (const Error& e) {
    return fail(2, e.kind(), e.what());
  } catch (const std::exception& e) {
    return fail(2, "runtime", e.what());
  }
}
