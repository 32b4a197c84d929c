// SPDX-License-Identifier: Apache-2.0
//
// Experiment configuration and its flat "key = value" text form. Keys without
// a namespace follow the usual RL trainer names (train_batch_size, rollout.n,
// ...); simulator settings live under sim.*, objective settings under
// objective.* or the trainer's clip-ratio names.
#pragma once

#include <charconv>
#include <cstdint>
#include <fstream>
#include <functional>
#include <iomanip>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "qarl/objectives.hpp"
#include "qarl/policy.hpp"
#include "qarl/quantsim.hpp"
#include "qarl/tasks.hpp"

namespace qarl {

/// Raised for unknown keys and malformed or out-of-range values.
class ConfigError : public std::runtime_error {
 public:
  ConfigError(std::string key, const std::string& what) : std::runtime_error(key + ": " + what), key_(std::move(key)) {}
  const std::string& key() const { return key_; }

 private:
  std::string key_;
};

enum class SamplerMode : std::uint8_t { full, lowbit, snapshot };

inline std::string to_string(SamplerMode m) {
  switch (m) {
    case SamplerMode::full: return "full";
    case SamplerMode::lowbit: return "lowbit";
    case SamplerMode::snapshot: return "snapshot";
  }
  return "?";
}

struct OptimizerConfig {
  double lr = 1e-3;
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double grad_clip = 0.0;  // global norm; 0 disables
};

struct ExperimentConfig {
  TaskConfig task;
  PolicyConfig policy;
  SamplerMode sampler_mode = SamplerMode::full;
  bool learner_lowbit = false;
  QuantSpec quant = QuantSpec::w4a16();
  double kernel_noise = 0.0;
  ObjectiveConfig objective = ObjectiveConfig::for_variant(Variant::grpo);
  OptimizerConfig optim;
  int group_size = 8;
  int prompts_per_step = 64;
  int minibatch_prompts = 16;
  int epochs = 2;
  int steps = 200;
  double temperature = 1.0;
  double top_p = 1.0;
  int max_new_tokens = 8;
  double injection_rate = 0.05;
  int error_repeats = 4;
  int eval_prompts = 128;
  double eval_temperature = 0.6;
  std::uint64_t seed = 1;
  std::string output_dir = "runs";

  PrecisionMode learner_mode() const { return learner_lowbit ? PrecisionMode::lowbit(quant) : PrecisionMode::full(); }
  PrecisionMode sampler_precision() const {
    return sampler_mode == SamplerMode::full ? PrecisionMode::full() : PrecisionMode::lowbit(quant);
  }

  /// Epochs and minibatch size after variant-specific overrides.
  int effective_epochs() const { return objective.variant == Variant::grpo_onpolicy ? 1 : epochs; }
  int effective_minibatch_prompts() const {
    return objective.variant == Variant::grpo_onpolicy ? prompts_per_step : minibatch_prompts;
  }

  void validate() const;
  void set(const std::string& key, const std::string& value);
  std::string get(const std::string& key) const;
  static const std::vector<std::string>& keys();

  /// Canonical text: every key in registry order.
  std::string to_text() const {
    std::ostringstream out;
    for (const auto& k : keys()) out << k << " = " << get(k) << "\n";
    return out.str();
  }

  /// Hash of the experiment content; the seed and output directory are excluded
  /// so runs of one configuration over several seeds share it.
  std::string content_hash() const {
    std::string text;
    for (const auto& k : keys())
      if (k != "sim.seed" && k != "sim.output_dir") text += k + "=" + get(k) + "\n";
    std::ostringstream h;
    h << std::hex << std::setw(16) << std::setfill('0') << fnv1a(text);
    return h.str();
  }

  static ExperimentConfig parse(const std::string& text) {
    ExperimentConfig c;
    c.apply_text(text);
    return c;
  }
  static ExperimentConfig load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError(path, "cannot read configuration file");
    std::stringstream ss;
    ss << in.rdbuf();
    return parse(ss.str());
  }

  /// Apply "key = value" lines; '#' starts a comment.
  void apply_text(const std::string& text) {
    std::istringstream in(text);
    std::string line;
    while (std::getline(in, line)) {
      if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
      line = trim(line);
      if (line.empty()) continue;
      apply_override(line);
    }
  }

  /// One "key=value" assignment.
  void apply_override(const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos) throw ConfigError(trim(assignment), "expected key = value");
    set(trim(assignment.substr(0, eq)), trim(assignment.substr(eq + 1)));
  }

  static std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
  }
};

namespace detail {

inline double parse_double(const std::string& key, const std::string& v) {
  double out = 0.0;
  const auto* end = v.data() + v.size();
  auto [p, ec] = std::from_chars(v.data(), end, out);
  if (ec != std::errc() || p != end || v.empty()) throw ConfigError(key, "expected a number, got '" + v + "'");
  return out;
}

inline long long parse_int(const std::string& key, const std::string& v) {
  long long out = 0;
  const auto* end = v.data() + v.size();
  auto [p, ec] = std::from_chars(v.data(), end, out);
  if (ec != std::errc() || p != end || v.empty()) throw ConfigError(key, "expected an integer, got '" + v + "'");
  return out;
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError(key, "expected true or false, got '" + v + "'");
}

// Shortest text that parses back to the same double.
inline std::string fmt(double v) {
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

struct Field {
  std::string key;
  std::function<void(ExperimentConfig&, const std::string&)> set;
  std::function<std::string(const ExperimentConfig&)> get;
};

template <class T>
Field real(std::string key, T ExperimentConfig::*outer, double T::*member) {
  return {key, [=](ExperimentConfig& c, const std::string& v) { (c.*outer).*member = parse_double(key, v); },
          [=](const ExperimentConfig& c) { return fmt((c.*outer).*member); }};
}
inline Field real(std::string key, double ExperimentConfig::*member) {
  return {key, [=](ExperimentConfig& c, const std::string& v) { c.*member = parse_double(key, v); },
          [=](const ExperimentConfig& c) { return fmt(c.*member); }};
}
template <class T>
Field integer(std::string key, T ExperimentConfig::*outer, int T::*member) {
  return {key, [=](ExperimentConfig& c, const std::string& v) { (c.*outer).*member = static_cast<int>(parse_int(key, v)); },
          [=](const ExperimentConfig& c) { return std::to_string((c.*outer).*member); }};
}
inline Field integer(std::string key, int ExperimentConfig::*member) {
  return {key, [=](ExperimentConfig& c, const std::string& v) { c.*member = static_cast<int>(parse_int(key, v)); },
          [=](const ExperimentConfig& c) { return std::to_string(c.*member); }};
}

inline const std::vector<Field>& fields() {
  static const std::vector<Field> f = [] {
    using C = ExperimentConfig;
    std::vector<Field> v;
    // Trainer-style keys.
    v.push_back(integer("train_batch_size", &C::prompts_per_step));
    v.push_back(integer("rollout.n", &C::group_size));
    v.push_back(real("rollout.temperature", &C::temperature));
    v.push_back(real("rollout.top_p", &C::top_p));
    v.push_back(integer("ppo_mini_batch_size", &C::minibatch_prompts));
    v.push_back(integer("ppo_epochs", &C::epochs));
    v.push_back(real("seq_clip_ratio_high", &C::objective, &ObjectiveConfig::epsilon_high));
    v.push_back(real("seq_clip_ratio_low", &C::objective, &ObjectiveConfig::epsilon_low));
    v.push_back(real("neg_seq_clip_ratio_high", &C::objective, &ObjectiveConfig::delta_high));
    v.push_back(real("neg_seq_clip_ratio_low", &C::objective, &ObjectiveConfig::delta_low));
    v.push_back(real("seq_tis_imp_ratio_cap", &C::objective, &ObjectiveConfig::cap));
    // Objective.
    v.push_back({"objective.variant",
                 [](C& c, const std::string& s) {
                   try {
                     const Variant var = parse_variant(s);
                     c.objective.variant = var;
                     c.objective.level = natural_level(var);
                   } catch (const std::invalid_argument& e) {
                     throw ConfigError("objective.variant", e.what());
                   }
                 },
                 [](const C& c) { return to_string(c.objective.variant); }});
    v.push_back(real("objective.clip_ratio", &C::objective, &ObjectiveConfig::epsilon));
    v.push_back({"objective.tis", [](C& c, const std::string& s) { c.objective.tis = parse_bool("objective.tis", s); },
                 [](const C& c) { return std::string(c.objective.tis ? "true" : "false"); }});
    v.push_back(real("objective.mis_low", &C::objective, &ObjectiveConfig::mis_low));
    v.push_back(real("objective.mis_high", &C::objective, &ObjectiveConfig::mis_high));
    v.push_back({"objective.length_norm",
                 [](C& c, const std::string& s) { c.objective.length_norm = parse_bool("objective.length_norm", s); },
                 [](const C& c) { return std::string(c.objective.length_norm ? "true" : "false"); }});
    // Optimizer.
    v.push_back(real("optim.lr", &C::optim, &OptimizerConfig::lr));
    v.push_back(real("optim.weight_decay", &C::optim, &OptimizerConfig::weight_decay));
    v.push_back(real("optim.beta1", &C::optim, &OptimizerConfig::beta1));
    v.push_back(real("optim.beta2", &C::optim, &OptimizerConfig::beta2));
    v.push_back(real("optim.eps", &C::optim, &OptimizerConfig::eps));
    v.push_back(real("optim.grad_clip", &C::optim, &OptimizerConfig::grad_clip));
    // Simulator.
    v.push_back({"sim.task",
                 [](C& c, const std::string& s) {
                   try {
                     c.task.kind = parse_task(s);
                   } catch (const std::invalid_argument& e) {
                     throw ConfigError("sim.task", e.what());
                   }
                 },
                 [](const C& c) { return to_string(c.task.kind); }});
    v.push_back(integer("sim.symbols", &C::task, &TaskConfig::symbols));
    v.push_back(integer("sim.min_len", &C::task, &TaskConfig::min_len));
    v.push_back(integer("sim.max_len", &C::task, &TaskConfig::max_len));
    v.push_back(integer("sim.vocab_size", &C::policy, &PolicyConfig::vocab_size));
    v.push_back(integer("sim.context_window", &C::policy, &PolicyConfig::context_window));
    v.push_back(integer("sim.hidden_dim", &C::policy, &PolicyConfig::hidden_dim));
    v.push_back(integer("sim.depth", &C::policy, &PolicyConfig::depth));
    v.push_back(integer("sim.ffn_multiplier", &C::policy, &PolicyConfig::ffn_multiplier));
    v.push_back({"sim.nonlinearity",
                 [](C& c, const std::string& s) {
                   try {
                     c.policy.nonlinearity = parse_nonlinearity(s);
                   } catch (const std::invalid_argument& e) {
                     throw ConfigError("sim.nonlinearity", e.what());
                   }
                 },
                 [](const C& c) { return to_string(c.policy.nonlinearity); }});
    v.push_back({"sim.sampler_mode",
                 [](C& c, const std::string& s) {
                   if (s == "full") c.sampler_mode = SamplerMode::full;
                   else if (s == "lowbit") c.sampler_mode = SamplerMode::lowbit;
                   else if (s == "snapshot") c.sampler_mode = SamplerMode::snapshot;
                   else throw ConfigError("sim.sampler_mode", "expected full, lowbit or snapshot, got '" + s + "'");
                 },
                 [](const C& c) { return to_string(c.sampler_mode); }});
    v.push_back({"sim.learner_mode",
                 [](C& c, const std::string& s) {
                   if (s == "full") c.learner_lowbit = false;
                   else if (s == "lowbit") c.learner_lowbit = true;
                   else throw ConfigError("sim.learner_mode", "expected full or lowbit, got '" + s + "'");
                 },
                 [](const C& c) { return std::string(c.learner_lowbit ? "lowbit" : "full"); }});
    v.push_back({"sim.quant",
                 [](C& c, const std::string& s) {
                   try {
                     c.quant = parse_quant_spec(s);
                   } catch (const std::invalid_argument& e) {
                     throw ConfigError("sim.quant", e.what());
                   }
                 },
                 [](const C& c) { return c.quant.name(); }});
    v.push_back(real("sim.kernel_noise", &C::kernel_noise));
    v.push_back(integer("sim.steps", &C::steps));
    v.push_back(integer("sim.max_new_tokens", &C::max_new_tokens));
    v.push_back(real("sim.error_injection_rate", &C::injection_rate));
    v.push_back(integer("sim.error_repeats", &C::error_repeats));
    v.push_back(integer("sim.eval_prompts", &C::eval_prompts));
    v.push_back(real("sim.eval_temperature", &C::eval_temperature));
    v.push_back({"sim.seed",
                 [](C& c, const std::string& s) {
                   const long long x = parse_int("sim.seed", s);
                   if (x < 0) throw ConfigError("sim.seed", "must be non-negative");
                   c.seed = static_cast<std::uint64_t>(x);
                 },
                 [](const C& c) { return std::to_string(c.seed); }});
    v.push_back({"sim.output_dir", [](C& c, const std::string& s) { c.output_dir = s; },
                 [](const C& c) { return c.output_dir; }});
    return v;
  }();
  return f;
}

inline const Field& field(const std::string& key) {
  for (const auto& f : fields())
    if (f.key == key) return f;
  throw ConfigError(key, "unknown configuration key");
}

}  // namespace detail

inline const std::vector<std::string>& ExperimentConfig::keys() {
  static const std::vector<std::string> k = [] {
    std::vector<std::string> out;
    for (const auto& f : detail::fields()) out.push_back(f.key);
    return out;
  }();
  return k;
}

inline void ExperimentConfig::set(const std::string& key, const std::string& value) { detail::field(key).set(*this, value); }
inline std::string ExperimentConfig::get(const std::string& key) const { return detail::field(key).get(*this); }

inline void ExperimentConfig::validate() const {
  auto need = [](bool ok, const char* key, const std::string& what) {
    if (!ok) throw ConfigError(key, what);
  };
  try {
    policy.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError("sim.vocab_size", e.what());
  }
  try {
    task.validate(policy.vocab_size);
  } catch (const std::invalid_argument& e) {
    throw ConfigError("sim.symbols", e.what());
  }
  try {
    objective.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError("objective.variant", e.what());
  }
  need(group_size >= 2, "rollout.n", "group size must be at least 2");
  need(prompts_per_step >= 1, "train_batch_size", "must be positive");
  need(minibatch_prompts >= 1 && minibatch_prompts <= prompts_per_step, "ppo_mini_batch_size",
       "must be in [1, train_batch_size]");
  need(epochs >= 1, "ppo_epochs", "must be positive");
  need(steps >= 0, "sim.steps", "must be non-negative");
  need(temperature > 0.0, "rollout.temperature", "must be positive");
  need(top_p > 0.0 && top_p <= 1.0, "rollout.top_p", "must be in (0, 1]");
  need(max_new_tokens >= 1, "sim.max_new_tokens", "must be positive");
  need(policy.context_window >= Task(task).max_prompt_length() + max_new_tokens, "sim.context_window",
       "must hold the longest prompt plus max_new_tokens");
  need(injection_rate >= 0.0 && injection_rate <= 1.0, "sim.error_injection_rate", "must be in [0, 1]");
  need(error_repeats >= 2, "sim.error_repeats", "must be at least 2");
  need(kernel_noise >= 0.0, "sim.kernel_noise", "must be non-negative");
  need(eval_prompts >= 0, "sim.eval_prompts", "must be non-negative");
  need(eval_temperature > 0.0, "sim.eval_temperature", "must be positive");
  need(optim.lr > 0.0, "optim.lr", "must be positive");
  need(optim.weight_decay >= 0.0, "optim.weight_decay", "must be non-negative");
  need(optim.beta1 >= 0.0 && optim.beta1 < 1.0, "optim.beta1", "must be in [0, 1)");
  need(optim.beta2 >= 0.0 && optim.beta2 < 1.0, "optim.beta2", "must be in [0, 1)");
  need(optim.eps > 0.0, "optim.eps", "must be positive");
  need(optim.grad_clip >= 0.0, "optim.grad_clip", "must be non-negative");
  need(!(sampler_mode == SamplerMode::snapshot && !learner_lowbit), "sim.sampler_mode",
       "snapshot sampling publishes the learner's low-bit weights and needs sim.learner_mode = lowbit");
}

/// Named starting points. The config files under configs/ spell these out.
inline ExperimentConfig preset(const std::string& name) {
  ExperimentConfig c;
  auto regime = [&](const std::string& r) {
    if (r == "qarl") {
      c.sampler_mode = SamplerMode::snapshot;
      c.learner_lowbit = true;
    } else if (r == "quantized_rollout") {
      c.sampler_mode = SamplerMode::lowbit;
      c.learner_lowbit = false;
    } else if (r == "full") {
      c.sampler_mode = SamplerMode::full;
      c.learner_lowbit = false;
    } else {
      throw ConfigError("preset", "unknown regime " + r);
    }
  };
  // Regime names contain underscores too, so match them as prefixes.
  std::size_t us = std::string::npos;
  for (const char* r : {"quantized_rollout_", "qarl_", "full_"})
    if (name.starts_with(r)) us = std::string(r).size() - 1;
  if (us == std::string::npos) throw ConfigError("preset", "expected <regime>_<variant>, got " + name);
  regime(name.substr(0, us));
  try {
    c.objective = ObjectiveConfig::for_variant(parse_variant(name.substr(us + 1)));
  } catch (const std::invalid_argument& e) {
    throw ConfigError("preset", e.what());
  }
  return c;
}

}  // namespace qarl
