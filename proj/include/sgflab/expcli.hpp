#pragma once

#include <atomic>
#include <cstdint>
#include <exception>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

#include <json.hpp>

#include "sgflab/datagen.hpp"
#include "sgflab/errors.hpp"
#include "sgflab/rng.hpp"
#include "sgflab/sgd_engine.hpp"

namespace sgflab::expcli {

struct Diagnostic {
  std::string severity;  // "error" or "warning"
  std::string code;
  std::string message;
};

struct ExperimentConfig {
  std::string experiment;
  datagen::DataSpec data;
  sgd::TrainConfig train;
  Index n_hidden = 0;
  double init_var_w1 = 0.0;  // 0: 1/N_i
  double init_var_w2 = 0.0;  // 0: 1/N_h
  int realizations = 1;
  std::string output_dir = "out";
  std::map<std::string, std::string> extra;  // experiment-specific keys

  std::string get(const std::string& key, const std::string& fallback) const {
    const auto it = extra.find(key);
    return it == extra.end() ? fallback : it->second;
  }
};

// Flat "dotted.key = value" text with '#' comments.
ExperimentConfig parse_config(std::string_view text);
ExperimentConfig load_config(const std::filesystem::path& path);
// Canonical form: sorted keys, shortest round-trip numbers.
std::string format_config(const ExperimentConfig& c);
std::uint64_t config_hash(const ExperimentConfig& c);  // FNV-1a of the canonical form

const std::vector<std::string>& registry();
// Experiment-specific keys accepted in ExperimentConfig::extra.
const std::vector<std::string>& extra_keys(const std::string& experiment);
ExperimentConfig default_config(const std::string& experiment);

std::vector<Diagnostic> validate(const ExperimentConfig& c);

struct RunOptions {
  int jobs = 1;
  std::optional<std::filesystem::path> out;  // overrides run.output_dir
};

struct RunManifest {
  std::string experiment;
  std::uint64_t config_hash = 0;
  std::uint64_t seed = 0;
  std::string version;
  double wall_time_s = 0.0;
  std::vector<std::string> files;  // relative to the output directory
  std::vector<Diagnostic> diagnostics;
  nlohmann::json summary = nlohmann::json::object();
  std::filesystem::path output_dir;

  nlohmann::json to_json() const;
};

// Validation errors raise ConfigError before anything is written.
RunManifest run_experiment(const ExperimentConfig& c, const RunOptions& opt = {});

inline std::uint64_t realization_seed(std::uint64_t base, int r) {
  return r == 0 ? base : mix64(base + static_cast<std::uint64_t>(r));
}

// Evaluates fn(0..n-1) on up to `jobs` threads; results are returned in index
// order, and the first exception (by index) is rethrown.
template <class T>
std::vector<T> parallel_map(int jobs, int n, const std::function<T(int)>& fn) {
  std::vector<std::optional<T>> out(static_cast<std::size_t>(n));
  std::vector<std::exception_ptr> errors(static_cast<std::size_t>(n));
  std::atomic<int> next{0};
  auto worker = [&] {
    for (int i = next++; i < n; i = next++) {
      try {
        out[static_cast<std::size_t>(i)] = fn(i);
      } catch (...) {
        errors[static_cast<std::size_t>(i)] = std::current_exception();
      }
    }
  };
  const int nt = std::max(1, std::min(jobs, n));
  std::vector<std::thread> pool;
  for (int t = 1; t < nt; ++t) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  for (const auto& e : errors)
    if (e) std::rethrow_exception(e);
  std::vector<T> res;
  res.reserve(out.size());
  for (auto& o : out) res.push_back(std::move(*o));
  return res;
}

std::vector<double> parse_list(const std::string& s);

}  // namespace sgflab::expcli
