// SPDX-License-Identifier: Apache-2.0
//
// qarl run | check | plotdata
//
// Exit codes: 0 success, 1 check failure, 2 configuration or input error.
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "qarl/checks.hpp"
#include "qarl/config.hpp"
#include "qarl/harness.hpp"
#include "qarl/plotdata.hpp"

#ifndef QARL_VERSION
#define QARL_VERSION "unknown"
#endif

namespace fs = std::filesystem;
using namespace qarl;

namespace {

constexpr int kOk = 0;
constexpr int kCheckFailed = 1;
constexpr int kConfigError = 2;

std::vector<std::uint64_t> parse_seeds(const std::string& list) {
  std::vector<std::uint64_t> out;
  std::stringstream ss(list);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = ExperimentConfig::trim(item);
    if (item.empty()) continue;
    std::size_t used = 0;
    unsigned long long v = 0;
    try {
      v = std::stoull(item, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used != item.size() || item.front() == '-') throw ConfigError("--seeds", "invalid seed '" + item + "'");
    out.push_back(v);
  }
  if (out.empty()) throw ConfigError("--seeds", "no seeds given");
  return out;
}

int cmd_run(const std::string& config_path, const std::vector<std::string>& overrides, const std::string& seeds,
            const std::string& out_dir, bool quiet) {
  ExperimentConfig cfg;
  std::vector<std::uint64_t> seed_list;
  try {
    cfg = ExperimentConfig::load(config_path);
    for (const auto& o : overrides) cfg.apply_override(o);
    if (!out_dir.empty()) cfg.output_dir = out_dir;
    seed_list = seeds.empty() ? std::vector<std::uint64_t>{cfg.seed} : parse_seeds(seeds);
    cfg.validate();
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfigError;
  }
  const fs::path root(cfg.output_dir);
  fs::create_directories(root);
  nlohmann::ordered_json manifest;
  manifest["config_hash"] = cfg.content_hash();
  manifest["artifact_version"] = QARL_VERSION;
  manifest["config"] = config_path;
  manifest["overrides"] = overrides;
  manifest["seeds"] = seed_list;
  manifest["runs"] = nlohmann::ordered_json::array();
  for (auto seed : seed_list) {
    ExperimentConfig run = cfg;
    run.seed = seed;
    const fs::path dir = root / ("seed-" + std::to_string(seed));
    run.output_dir = dir.string();
    try {
      const auto summary = run_experiment(run, dir, [&](const StepRecord& r) {
        if (!quiet && (r.step % 10 == 0 || r.step + 1 == run.steps))
          std::cout << "seed " << seed << " step " << r.step << " reward " << r.reward_mean << " kl " << r.kl
                    << " mismatch_p99 " << r.mismatch.p99 << "\n";
      });
      std::cout << "seed " << seed << ": final-20 reward " << tail_reward(summary.records, 20) << ", eval accuracy "
                << summary.eval.accuracy << " -> " << dir.string() << "\n";
    } catch (const NonFiniteError& e) {
      std::cerr << "run aborted: " << e.what() << " (see " << (dir / "failed_batch.json").string() << ")\n";
      return kCheckFailed;
    }
    manifest["runs"].push_back({{"seed", seed}, {"path", dir.string()}});
  }
  std::ofstream(root / "manifest.json") << manifest.dump(1) << "\n";
  return kOk;
}

int cmd_check(const std::string& fault) {
  if (fault == "truncate-rounding") {
    testing::rounding_mode() = RoundingMode::truncate;
  } else if (fault == "half-away-rounding") {
    testing::rounding_mode() = RoundingMode::half_away;
  } else if (!fault.empty()) {
    std::cerr << "unknown fault '" << fault << "'\n";
    return kConfigError;
  }
  bool ok = true;
  for (const auto& r : checks::run_all()) {
    std::cout << (r.passed ? "PASS " : "FAIL ") << r.name << ": " << r.detail << " [" << r.seconds << " s]\n";
    ok = ok && r.passed;
  }
  return ok ? kOk : kCheckFailed;
}

int cmd_plotdata(const std::string& kind, const std::vector<std::string>& dirs, const std::string& output) {
  try {
    std::vector<fs::path> paths(dirs.begin(), dirs.end());
    const std::string csv = plotdata(paths, parse_plot_kind(kind));
    if (output.empty()) {
      std::cout << csv;
    } else {
      std::ofstream(output) << csv;
    }
  } catch (const PlotDataError& e) {
    std::cerr << "plotdata error: " << e.what() << "\n";
    return kConfigError;
  } catch (const std::exception& e) {  // unreadable config copy or metrics line
    std::cerr << "plotdata error: " << e.what() << "\n";
    return kConfigError;
  }
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Quantization-aware RL simulator"};
  app.set_version_flag("--version", QARL_VERSION);
  app.require_subcommand(1);

  auto* run = app.add_subcommand("run", "Run an experiment once per seed");
  std::string config_path, seeds, out_dir;
  std::vector<std::string> overrides;
  bool quiet = false;
  run->add_option("config", config_path, "Configuration file")->required();
  run->add_option("--seeds", seeds, "Comma-separated seed list (default: sim.seed)");
  run->add_option("--set", overrides, "Override key=value (repeatable)");
  run->add_option("--out", out_dir, "Output directory (default: sim.output_dir)");
  run->add_flag("--quiet", quiet, "Only print per-seed summaries");

  auto* check = app.add_subcommand("check", "Run the oracle suites");
  std::string fault;
  check->add_option("--inject-fault", fault, "Test hook: truncate-rounding or half-away-rounding");

  auto* plot = app.add_subcommand("plotdata", "Emit CSV from completed runs");
  std::string kind, output;
  std::vector<std::string> dirs;
  plot->add_option("kind", kind, "reward_curve | kl_curve | entropy_curve | ratio_hist | mismatch_hist")->required();
  plot->add_option("runs", dirs, "Run directories");
  plot->add_option("-o,--output", output, "Write CSV here instead of stdout");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kConfigError;
  }
  if (*run) return cmd_run(config_path, overrides, seeds, out_dir, quiet);
  if (*check) return cmd_check(fault);
  if (*plot) return cmd_plotdata(kind, dirs, output);
  return kConfigError;
}
