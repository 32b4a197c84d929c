// SPDX-License-Identifier: Apache-2.0
//
// Verifiable-reward toy tasks. A prompt is a run of symbol tokens followed by
// SEP; the expected response is the task's target followed by EOS, and the
// reward is 1 for an exact match and 0 otherwise.
#pragma once

#include <algorithm>
#include <stdexcept>
#include <string>
#include <vector>

#include "qarl/policy.hpp"
#include "qarl/rng.hpp"

namespace qarl {

enum class TaskKind : std::uint8_t { copy, reverse, sum_mod_k, parity };

inline std::string to_string(TaskKind k) {
  switch (k) {
    case TaskKind::copy: return "copy";
    case TaskKind::reverse: return "reverse";
    case TaskKind::sum_mod_k: return "sum_mod_k";
    case TaskKind::parity: return "parity";
  }
  return "?";
}

inline TaskKind parse_task(const std::string& s) {
  for (auto k : {TaskKind::copy, TaskKind::reverse, TaskKind::sum_mod_k, TaskKind::parity})
    if (to_string(k) == s) return k;
  throw std::invalid_argument("unknown task: " + s);
}

struct TaskConfig {
  TaskKind kind = TaskKind::copy;
  int symbols = 8;   // alphabet size; sum_mod_k uses it as k
  int min_len = 2;
  int max_len = 2;

  void validate(int vocab_size) const {
    if (symbols < 2) throw std::invalid_argument("task needs at least two symbols");
    if (kFirstSymbol + symbols > vocab_size) throw std::invalid_argument("task alphabet does not fit the vocabulary");
    if (min_len < 1 || max_len < min_len || max_len > 8) throw std::invalid_argument("invalid task length range");
  }
};

class Task {
 public:
  explicit Task(TaskConfig cfg) : cfg_(cfg) {}

  const TaskConfig& config() const { return cfg_; }

  /// Random symbols followed by SEP; the length is uniform over [min_len, max_len].
  std::vector<int> prompt(Rng& rng) const {
    const int len = cfg_.min_len + static_cast<int>(rng.below(static_cast<std::uint64_t>(cfg_.max_len - cfg_.min_len + 1)));
    std::vector<int> p;
    for (int i = 0; i < len; ++i) p.push_back(kFirstSymbol + static_cast<int>(rng.below(static_cast<std::uint64_t>(cfg_.symbols))));
    p.push_back(kSep);
    return p;
  }

  /// Expected answer without the trailing EOS.
  std::vector<int> target(const std::vector<int>& prompt) const {
    std::vector<int> body(prompt.begin(), prompt.end());
    if (!body.empty() && body.back() == kSep) body.pop_back();
    switch (cfg_.kind) {
      case TaskKind::copy: return body;
      case TaskKind::reverse: return {body.rbegin(), body.rend()};
      case TaskKind::sum_mod_k: {
        int s = 0;
        for (int t : body) s += t - kFirstSymbol;
        return {kFirstSymbol + s % cfg_.symbols};
      }
      case TaskKind::parity: {
        int s = 0;
        for (int t : body) s += t - kFirstSymbol;
        return {kFirstSymbol + s % 2};
      }
    }
    return {};
  }

  double reward(const std::vector<int>& prompt, const std::vector<int>& response) const {
    auto want = target(prompt);
    want.push_back(kEos);
    return response == want ? 1.0 : 0.0;
  }

  /// Tokens a well-formed response may contain.
  bool legal(int token) const { return token == kEos || (token >= kFirstSymbol && token < kFirstSymbol + cfg_.symbols); }

  /// Longest correct response including EOS.
  int max_response_length() const {
    return (cfg_.kind == TaskKind::copy || cfg_.kind == TaskKind::reverse) ? cfg_.max_len + 1 : 2;
  }

  /// Longest prompt including SEP.
  int max_prompt_length() const { return cfg_.max_len + 1; }

 private:
  TaskConfig cfg_;
};

}  // namespace qarl
