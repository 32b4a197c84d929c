// SPDX-License-Identifier: Apache-2.0
//
// Figure-ready CSV from completed run directories: seed-averaged curves with a
// min/max envelope, and pooled log-ratio histograms.
#pragma once

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <limits>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "qarl/config.hpp"
#include "qarl/harness.hpp"

namespace qarl {

class PlotDataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class PlotKind : std::uint8_t { reward_curve, kl_curve, entropy_curve, ratio_hist, mismatch_hist };

inline const std::vector<std::pair<PlotKind, std::string>>& plot_kinds() {
  static const std::vector<std::pair<PlotKind, std::string>> k{{PlotKind::reward_curve, "reward_curve"},
                                                               {PlotKind::kl_curve, "kl_curve"},
                                                               {PlotKind::entropy_curve, "entropy_curve"},
                                                               {PlotKind::ratio_hist, "ratio_hist"},
                                                               {PlotKind::mismatch_hist, "mismatch_hist"}};
  return k;
}

inline PlotKind parse_plot_kind(const std::string& s) {
  for (const auto& [k, name] : plot_kinds())
    if (name == s) return k;
  throw PlotDataError("unknown plot kind: " + s);
}

/// CSV headers, one per kind.
inline std::string plot_header(PlotKind k) {
  switch (k) {
    case PlotKind::reward_curve:
    case PlotKind::kl_curve:
    case PlotKind::entropy_curve: return "step,mean,min,max";
    case PlotKind::ratio_hist:
    case PlotKind::mismatch_hist: return "bin,log_lower,log_upper,count,fraction";
  }
  return "";
}

struct RunData {
  std::filesystem::path dir;
  std::string config_hash;
  std::vector<nlohmann::json> records;
};

inline RunData load_run(const std::filesystem::path& dir) {
  RunData r;
  r.dir = dir;
  const auto cfg_path = dir / "config.cfg";
  const auto metrics_path = dir / "metrics.jsonl";
  if (!std::filesystem::exists(cfg_path)) throw PlotDataError(dir.string() + ": missing config.cfg");
  if (!std::filesystem::exists(metrics_path)) throw PlotDataError(dir.string() + ": missing metrics.jsonl");
  r.config_hash = ExperimentConfig::load(cfg_path.string()).content_hash();
  std::ifstream in(metrics_path);
  std::string line;
  while (std::getline(in, line))
    if (!line.empty()) r.records.push_back(nlohmann::json::parse(line));
  if (r.records.empty()) throw PlotDataError(dir.string() + ": no step records");
  return r;
}

namespace detail {

inline std::string num(double v) {
  std::ostringstream s;
  s << std::setprecision(12) << v;
  return s.str();
}

inline std::string curve(const std::vector<RunData>& runs, const char* field) {
  std::size_t steps = std::numeric_limits<std::size_t>::max();
  for (const auto& r : runs) steps = std::min(steps, r.records.size());
  std::ostringstream out;
  out << "step,mean,min,max\n";
  for (std::size_t i = 0; i < steps; ++i) {
    double sum = 0.0, lo = std::numeric_limits<double>::infinity(), hi = -lo;
    for (const auto& r : runs) {
      const double v = r.records[i].at(field).get<double>();
      sum += v;
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
    out << runs.front().records[i].at("step").get<int>() << "," << num(sum / static_cast<double>(runs.size())) << ","
        << num(lo) << "," << num(hi) << "\n";
  }
  return out.str();
}

inline std::string histogram(const std::vector<RunData>& runs, const char* field) {
  std::vector<std::uint64_t> counts(kHistBins, 0);
  for (const auto& r : runs)
    for (const auto& rec : r.records) {
      const auto h = rec.at(field).get<std::vector<std::uint64_t>>();
      if (h.size() != counts.size()) throw PlotDataError(r.dir.string() + ": histogram has unexpected bin count");
      for (std::size_t b = 0; b < h.size(); ++b) counts[b] += h[b];
    }
  std::uint64_t total = 0;
  for (auto c : counts) total += c;
  std::ostringstream out;
  out << "bin,log_lower,log_upper,count,fraction\n";
  for (int b = 0; b < kHistBins; ++b) {
    out << b << "," << num(bin_lower(b)) << "," << num(bin_lower(b + 1)) << "," << counts[static_cast<std::size_t>(b)] << ","
        << num(total ? static_cast<double>(counts[static_cast<std::size_t>(b)]) / static_cast<double>(total) : 0.0) << "\n";
  }
  return out.str();
}

}  // namespace detail

/// CSV for a set of runs of one configuration. Rejects empty and mixed sets.
/// Histogram edges are in natural-log units; the first and last bins also hold
/// everything beyond the range.
inline std::string plotdata(const std::vector<std::filesystem::path>& dirs, PlotKind kind) {
  if (dirs.empty()) throw PlotDataError("no run directories given");
  std::vector<RunData> runs;
  for (const auto& d : dirs) runs.push_back(load_run(d));
  for (const auto& r : runs)
    if (r.config_hash != runs.front().config_hash)
      throw PlotDataError("runs come from different configurations: " + runs.front().dir.string() + " vs " + r.dir.string());
  switch (kind) {
    case PlotKind::reward_curve: return detail::curve(runs, "reward_mean");
    case PlotKind::kl_curve: return detail::curve(runs, "kl");
    case PlotKind::entropy_curve: return detail::curve(runs, "entropy");
    case PlotKind::ratio_hist: return detail::histogram(runs, "token_ratio_hist");
    case PlotKind::mismatch_hist: return detail::histogram(runs, "mismatch_hist");
  }
  return "";
}

}  // namespace qarl
