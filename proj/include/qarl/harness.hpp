// SPDX-License-Identifier: Apache-2.0
//
// Decoupled sampler/learner loop: grouped rollouts from a published snapshot,
// learner log-prob fill, minibatch epochs with AdamW on f32 master weights,
// weight sync through the snapshot wire format, error-token detection and
// injection, and per-step telemetry.
#pragma once

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "qarl/config.hpp"
#include "qarl/graph.hpp"
#include "qarl/objectives.hpp"
#include "qarl/policy.hpp"
#include "qarl/rng.hpp"
#include "qarl/tasks.hpp"

namespace qarl {

/// Thrown when a loss, gradient or metric stops being finite.
class NonFiniteError : public std::runtime_error {
 public:
  NonFiniteError(const std::string& what, nlohmann::ordered_json diagnostics)
      : std::runtime_error(what), diagnostics_(std::move(diagnostics)) {}
  const nlohmann::ordered_json& diagnostics() const { return diagnostics_; }

 private:
  nlohmann::ordered_json diagnostics_;
};

// ---------------------------------------------------------------------------
// Error tokens

/// Marks tokens inside an n-gram (n = 1..3) repeated at least `repeats` times
/// back to back, and tokens the task does not allow.
inline std::vector<std::uint8_t> detect_error_tokens(std::span<const int> tokens, const std::function<bool(int)>& legal,
                                                     int repeats = 4) {
  const std::size_t len = tokens.size();
  std::vector<std::uint8_t> mask(len, 0);
  for (std::size_t n = 1; n <= 3; ++n) {
    for (std::size_t i = 0; i + n <= len; ++i) {
      std::size_t count = 1;
      while (i + (count + 1) * n <= len &&
             std::equal(tokens.begin() + static_cast<std::ptrdiff_t>(i),
                        tokens.begin() + static_cast<std::ptrdiff_t>(i + n),
                        tokens.begin() + static_cast<std::ptrdiff_t>(i + count * n)))
        ++count;
      if (count >= static_cast<std::size_t>(repeats))
        std::fill(mask.begin() + static_cast<std::ptrdiff_t>(i), mask.begin() + static_cast<std::ptrdiff_t>(i + count * n), 1);
    }
  }
  if (legal)
    for (std::size_t i = 0; i < len; ++i)
      if (!legal(tokens[i])) mask[i] = 1;
  return mask;
}

inline std::vector<std::uint8_t> detect_error_tokens(std::span<const int> tokens, const Task& task, int repeats = 4) {
  return detect_error_tokens(tokens, [&](int t) { return task.legal(t); }, repeats);
}

// ---------------------------------------------------------------------------
// Rollout and learner fill

struct SamplerSide {
  const Policy& policy;
  const LowBitSnapshot& snapshot;
  DecodeConfig decode;
  KernelNoise noise;
};

/// G responses per prompt, sampled in one batched decode with one rng stream per
/// response. Responses of prompt i are contiguous and carry group id i.
inline RolloutBatch rollout(const SamplerSide& sampler, const Task& task, const std::vector<std::vector<int>>& prompts,
                            int group_size, std::uint64_t seed, int repeats = 4) {
  if (group_size < 1) throw std::invalid_argument("group size must be positive");
  std::vector<std::vector<int>> flat;
  std::vector<Rng> rngs;
  flat.reserve(prompts.size() * static_cast<std::size_t>(group_size));
  for (std::size_t i = 0; i < prompts.size(); ++i)
    for (int g = 0; g < group_size; ++g) {
      flat.push_back(prompts[i]);
      rngs.emplace_back(derive_seed({seed, i, static_cast<std::uint64_t>(g)}));
    }
  auto sampled = sampler.policy.sample_batch(sampler.snapshot, flat, sampler.decode, rngs, sampler.noise);
  RolloutBatch batch;
  batch.group_size = group_size;
  batch.responses.resize(flat.size());
  for (std::size_t k = 0; k < flat.size(); ++k) {
    auto& r = batch.responses[k];
    r.prompt = std::move(flat[k]);
    r.tokens = std::move(sampled[k].tokens);
    r.logp_sampler = std::move(sampled[k].logprobs);
    r.group = static_cast<int>(k / static_cast<std::size_t>(group_size));
    r.reward = task.reward(r.prompt, r.tokens);
    r.error_mask = detect_error_tokens(r.tokens, task, repeats);
  }
  return batch;
}

namespace detail {

inline TokenRows rows_for(std::span<const ResponseRecord> responses, int window) {
  TokenRows rows;
  for (const auto& r : responses) rows.append(r.prompt, r.tokens, window);
  return rows;
}

}  // namespace detail

/// log pi_learner(theta_old) and the learner's per-step entropy for every token,
/// under the learner's precision mode and the rollout temperature. logp_current
/// starts equal to logp_old.
inline void fill_learner_logprobs(const Policy& policy, const Params& params, RolloutBatch& batch,
                                  const PrecisionMode& mode, double temperature) {
  const TokenRows rows = detail::rows_for(batch.responses, policy.config().context_window);
  if (rows.rows() == 0) return;
  const Tape tape = policy.forward_rows(Policy::with_temperature(policy.bindings(params), temperature), rows, mode);
  const Tensor& lp = tape.value(policy.logprobs_node());
  const auto& out = tape.output().data;
  std::size_t k = 0;
  for (auto& r : batch.responses) {
    const std::size_t n = r.length();
    r.logp_old.assign(out.begin() + static_cast<std::ptrdiff_t>(k), out.begin() + static_cast<std::ptrdiff_t>(k + n));
    r.logp_current = r.logp_old;
    r.learner_entropy.resize(n);
    for (std::size_t t = 0; t < n; ++t) {
      double h = 0.0;
      for (double l : lp.row(k + t)) h -= std::exp(l) * l;
      r.learner_entropy[t] = h;
    }
    k += n;
  }
}

// ---------------------------------------------------------------------------
// Error injection

struct InjectionReport {
  std::size_t injected = 0;
  std::size_t injected_tokens = 0;
  std::vector<std::pair<std::size_t, std::size_t>> runs;  // (response index, first overwritten position)
};

/// Each zero-reward response of length >= 2 is selected with probability `rate`.
/// From a start drawn in [1, min(len - 1, budget - repeats)] the response is overwritten up to the
/// decode budget with the token the sampler finds least likely at the start
/// (EOS excluded), a degenerate run that never terminates. Sampler log-probs are
/// recomputed under the true sampler and the response is rescored.
inline InjectionReport inject_error_tokens(const SamplerSide& sampler, const Task& task, RolloutBatch& batch, double rate,
                                           Rng& rng, int repeats = 4) {
  if (!(rate >= 0.0 && rate <= 1.0)) throw std::invalid_argument("injection rate must be in [0, 1]");
  InjectionReport rep;
  if (rate == 0.0) return rep;
  const Policy& policy = sampler.policy;
  for (std::size_t idx = 0; idx < batch.responses.size(); ++idx) {
    auto& r = batch.responses[idx];
    if (r.reward != 0.0 || r.length() < 2) continue;
    if (!(rng.uniform() < rate)) continue;
    const std::size_t budget = static_cast<std::size_t>(std::max(sampler.decode.max_new_tokens, static_cast<int>(r.length())));
    // Latest start that still leaves a detectable run.
    const std::size_t room = budget > static_cast<std::size_t>(repeats) ? budget - static_cast<std::size_t>(repeats) : 1;
    const std::size_t start = 1 + rng.below(std::max<std::size_t>(1, std::min(r.length() - 1, room)));
    // Least likely non-EOS token under the sampler's own distribution.
    std::vector<int> probe(r.tokens.begin(), r.tokens.begin() + static_cast<std::ptrdiff_t>(start));
    probe.push_back(0);
    int worst = -1;
    double worst_lp = 0.0;
    for (int tok = 0; tok < policy.config().vocab_size; ++tok) {
      if (tok == kEos) continue;
      probe.back() = tok;
      const double l = policy.sampler_logprobs(sampler.snapshot, r.prompt, probe, sampler.decode, sampler.noise).back();
      if (worst < 0 || l < worst_lp) {
        worst = tok;
        worst_lp = l;
      }
    }
    r.tokens.resize(budget);
    std::fill(r.tokens.begin() + static_cast<std::ptrdiff_t>(start), r.tokens.end(), worst);
    r.logp_sampler = policy.sampler_logprobs(sampler.snapshot, r.prompt, r.tokens, sampler.decode, sampler.noise);
    r.reward = task.reward(r.prompt, r.tokens);
    r.error_mask = detect_error_tokens(r.tokens, task, repeats);
    r.injected = true;
    ++rep.injected;
    rep.injected_tokens += budget - start;
    rep.runs.emplace_back(idx, start);
  }
  return rep;
}

// ---------------------------------------------------------------------------
// Metrics

struct KlEntropy {
  double kl = 0.0;
  double entropy = 0.0;
};

/// Per-token KL(sampler || learner_old) estimate mean(log pi_sampler - log
/// pi_learner_old) over sampled tokens, and the learner's mean per-step entropy.
inline KlEntropy kl_entropy_metrics(const RolloutBatch& batch) {
  KlEntropy out;
  std::size_t n = 0;
  for (const auto& r : batch.responses) {
    if (r.logp_old.size() != r.length() || r.learner_entropy.size() != r.length())
      throw std::invalid_argument("kl_entropy_metrics needs learner log-probs");
    for (std::size_t t = 0; t < r.length(); ++t) {
      out.kl += r.logp_sampler[t] - r.logp_old[t];
      out.entropy += r.learner_entropy[t];
    }
    n += r.length();
  }
  if (n) {
    out.kl /= static_cast<double>(n);
    out.entropy /= static_cast<double>(n);
  }
  return out;
}

/// Fixed histogram over log ratio: 41 bins of width 0.1 centred on 0 (ratio 1);
/// values beyond the range land in the edge bins.
inline constexpr int kHistBins = 41;
inline constexpr double kHistWidth = 0.1;

inline int log_ratio_bin(double ratio) {
  const double x = std::log(ratio) / kHistWidth + kHistBins / 2.0;
  if (!(x >= 0.0)) return 0;
  return std::min(kHistBins - 1, static_cast<int>(std::floor(x)));
}
inline double bin_lower(int b) { return (b - kHistBins / 2.0) * kHistWidth; }

inline std::vector<std::uint64_t> log_ratio_histogram(const std::vector<double>& ratios) {
  std::vector<std::uint64_t> h(kHistBins, 0);
  for (double r : ratios) ++h[static_cast<std::size_t>(log_ratio_bin(r))];
  return h;
}

struct Percentiles {
  double p1 = 0.0, p50 = 0.0, p99 = 0.0;
};
inline Percentiles percentiles(const std::vector<double>& xs) {
  return {percentile(xs, 1.0), percentile(xs, 50.0), percentile(xs, 99.0)};
}

struct StepRecord {
  int step = 0;
  std::uint64_t version = 0;
  double reward_mean = 0.0;
  double response_length_mean = 0.0;
  double kl = 0.0;
  double entropy = 0.0;
  Percentiles token_ratio, sequence_ratio, mismatch;
  double clip_fraction = 0.0;
  double masked_fraction = 0.0;
  double masked_fraction_positive = 0.0;
  double masked_fraction_negative = 0.0;
  double mis_rejection_rate = 0.0;
  double error_token_rate = 0.0;
  double spontaneous_error_rate = 0.0;
  std::size_t injected = 0;
  double loss = 0.0;
  double grad_norm = 0.0;
  std::vector<std::uint64_t> token_ratio_hist;
  std::vector<std::uint64_t> mismatch_hist;

  static std::vector<std::string> scalar_fields() {
    return {"reward_mean", "response_length_mean", "kl", "entropy", "token_ratio_p1", "token_ratio_p50",
            "token_ratio_p99", "sequence_ratio_p1", "sequence_ratio_p50", "sequence_ratio_p99", "mismatch_p1",
            "mismatch_p50", "mismatch_p99", "clip_fraction", "masked_fraction", "masked_fraction_positive",
            "masked_fraction_negative", "mis_rejection_rate", "error_token_rate", "spontaneous_error_rate", "loss",
            "grad_norm"};
  }

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    j["step"] = step;
    j["version"] = version;
    j["reward_mean"] = reward_mean;
    j["response_length_mean"] = response_length_mean;
    j["kl"] = kl;
    j["entropy"] = entropy;
    j["token_ratio_p1"] = token_ratio.p1;
    j["token_ratio_p50"] = token_ratio.p50;
    j["token_ratio_p99"] = token_ratio.p99;
    j["sequence_ratio_p1"] = sequence_ratio.p1;
    j["sequence_ratio_p50"] = sequence_ratio.p50;
    j["sequence_ratio_p99"] = sequence_ratio.p99;
    j["mismatch_p1"] = mismatch.p1;
    j["mismatch_p50"] = mismatch.p50;
    j["mismatch_p99"] = mismatch.p99;
    j["clip_fraction"] = clip_fraction;
    j["masked_fraction"] = masked_fraction;
    j["masked_fraction_positive"] = masked_fraction_positive;
    j["masked_fraction_negative"] = masked_fraction_negative;
    j["mis_rejection_rate"] = mis_rejection_rate;
    j["error_token_rate"] = error_token_rate;
    j["spontaneous_error_rate"] = spontaneous_error_rate;
    j["injected"] = injected;
    j["loss"] = loss;
    j["grad_norm"] = grad_norm;
    j["token_ratio_hist"] = token_ratio_hist;
    j["mismatch_hist"] = mismatch_hist;
    return j;
  }

  /// Name of the first non-finite scalar, or empty.
  std::string first_non_finite() const {
    const auto j = to_json();
    for (const auto& k : scalar_fields())
      if (!std::isfinite(j.at(k).get<double>())) return k;
    return {};
  }
};

// ---------------------------------------------------------------------------
// Optimizer

/// AdamW with decoupled weight decay on every parameter. Master weights are
/// rounded to f32 after each update.
class AdamW {
 public:
  explicit AdamW(OptimizerConfig cfg) : cfg_(cfg) {}

  const OptimizerConfig& config() const { return cfg_; }
  std::uint64_t steps() const { return t_; }

  /// Applies one update; returns the global gradient norm before clipping.
  double step(Params& params, const std::map<std::string, Tensor>& grads) {
    double sq = 0.0;
    for (const auto& [name, g] : grads)
      for (double x : g.data) sq += x * x;
    const double norm = std::sqrt(sq);
    if (!std::isfinite(norm)) throw NonFiniteError("non-finite gradient norm", {{"grad_norm", nullptr}});
    const double clip = (cfg_.grad_clip > 0.0 && norm > cfg_.grad_clip) ? cfg_.grad_clip / norm : 1.0;
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (auto& [name, p] : params.tensors) {
      auto& m = state(m_, name, p);
      auto& v = state(v_, name, p);
      const auto it = grads.find(name);
      for (std::size_t i = 0; i < p.size(); ++i) {
        const double g = it == grads.end() ? 0.0 : it->second.data[i] * clip;
        m.data[i] = cfg_.beta1 * m.data[i] + (1.0 - cfg_.beta1) * g;
        v.data[i] = cfg_.beta2 * v.data[i] + (1.0 - cfg_.beta2) * g * g;
        const double mhat = m.data[i] / bc1;
        const double vhat = v.data[i] / bc2;
        p.data[i] -= cfg_.lr * (cfg_.weight_decay * p.data[i] + mhat / (std::sqrt(vhat) + cfg_.eps));
      }
      round_to_f32(p);
    }
    ++params.version;
    return norm;
  }

 private:
  static Tensor& state(std::map<std::string, Tensor>& s, const std::string& name, const Tensor& like) {
    auto it = s.find(name);
    if (it == s.end()) it = s.emplace(name, Tensor(like.shape)).first;
    return it->second;
  }

  OptimizerConfig cfg_;
  std::map<std::string, Tensor> m_, v_;
  std::uint64_t t_ = 0;
};

// ---------------------------------------------------------------------------
// Training

struct LearnerSide {
  const Policy& policy;
  PrecisionMode mode;
  double temperature = 1.0;
};

struct LossAndGrad {
  LossResult loss;
  std::map<std::string, Tensor> grads;
};

/// Refreshes logp_current of `records` under the learner, evaluates the
/// objective, and backpropagates d(loss)/d(logp) through the policy graph.
inline LossAndGrad loss_and_gradient(const LearnerSide& learner, const Params& params, std::vector<ResponseRecord>& records,
                                     const ObjectiveConfig& ocfg) {
  const TokenRows rows = detail::rows_for(records, learner.policy.config().context_window);
  const Tape tape = learner.policy.forward_rows(
      Policy::with_temperature(learner.policy.bindings(params), learner.temperature), rows, learner.mode);
  const auto& out = tape.output().data;
  std::size_t k = 0;
  for (auto& r : records) {
    r.logp_current.assign(out.begin() + static_cast<std::ptrdiff_t>(k),
                          out.begin() + static_cast<std::ptrdiff_t>(k + r.length()));
    k += r.length();
  }
  LossAndGrad res;
  res.loss = compute_loss(records, ocfg);
  Tensor seed(std::vector<std::size_t>{rows.rows()});
  k = 0;
  for (const auto& d : res.loss.dlogp)
    for (double x : d) seed.data[k++] = x;
  res.grads = gradient(tape, seed);
  return res;
}

struct TrainStats {
  ObjectiveStats stats;
  double loss = 0.0;       // mean over minibatch updates
  double grad_norm = 0.0;  // mean over minibatch updates
  std::size_t updates = 0;
};

/// Epochs over the filled batch; each epoch shuffles whole groups and splits
/// them into minibatches of `minibatch_prompts` groups, one AdamW update each.
inline TrainStats train_step(const LearnerSide& learner, Params& params, AdamW& opt, RolloutBatch& batch,
                             const ObjectiveConfig& ocfg, int epochs, int minibatch_prompts, Rng& shuffle) {
  std::map<int, std::vector<std::size_t>> by_group;
  for (std::size_t i = 0; i < batch.responses.size(); ++i) by_group[batch.responses[i].group].push_back(i);
  std::vector<int> groups;
  for (const auto& [g, idx] : by_group) groups.push_back(g);
  TrainStats ts;
  for (int e = 0; e < epochs; ++e) {
    for (std::size_t i = groups.size(); i > 1; --i) std::swap(groups[i - 1], groups[shuffle.below(i)]);
    for (std::size_t lo = 0; lo < groups.size(); lo += static_cast<std::size_t>(minibatch_prompts)) {
      const std::size_t hi = std::min(groups.size(), lo + static_cast<std::size_t>(minibatch_prompts));
      std::vector<std::size_t> members;
      for (std::size_t g = lo; g < hi; ++g)
        for (auto i : by_group[groups[g]]) members.push_back(i);
      std::vector<ResponseRecord> mb;
      mb.reserve(members.size());
      for (auto i : members) mb.push_back(batch.responses[i]);
      auto lg = loss_and_gradient(learner, params, mb, ocfg);
      if (!std::isfinite(lg.loss.loss)) {
        nlohmann::ordered_json diag;
        diag["epoch"] = e;
        diag["minibatch_start"] = lo;
        diag["loss"] = nullptr;
        throw NonFiniteError("non-finite loss", diag);
      }
      for (std::size_t m = 0; m < members.size(); ++m) batch.responses[members[m]].logp_current = mb[m].logp_current;
      const double norm = opt.step(params, lg.grads);
      auto& s = ts.stats;
      const auto& t = lg.loss.stats;
      s.tokens += t.tokens;
      s.clipped_tokens += t.clipped_tokens;
      s.sequences += t.sequences;
      s.masked_sequences += t.masked_sequences;
      s.positive += t.positive;
      s.negative += t.negative;
      s.masked_positive += t.masked_positive;
      s.masked_negative += t.masked_negative;
      s.rejected += t.rejected;
      // Ratios as the loss saw them, for every variant alike.
      for (const auto& r : mb) {
        for (std::size_t k = 0; k < r.length(); ++k) s.token_ratios.push_back(token_ratio(r.logp_current[k], r.logp_old[k]));
        s.sequence_ratios.push_back(detail::seq_ratio(r));
      }
      ts.loss += lg.loss.loss;
      ts.grad_norm += norm;
      ++ts.updates;
    }
  }
  if (ts.updates) {
    ts.loss /= static_cast<double>(ts.updates);
    ts.grad_norm /= static_cast<double>(ts.updates);
  }
  return ts;
}

/// Publishes the learner weights for the sampler and passes them through the
/// snapshot wire format, as a remote rollout engine would receive them.
inline LowBitSnapshot sync_weights(const Policy& policy, const Params& params, const PrecisionMode& sampler_mode) {
  const LowBitSnapshot published = policy.publish(params, sampler_mode);
  const auto blob = Policy::serialize_snapshot(published);
  return Policy::deserialize_snapshot(blob);
}

// ---------------------------------------------------------------------------
// Experiment

/// Mutable state of one run, with the loop pieces exposed so tests can drive
/// them individually.
class Experiment {
 public:
  explicit Experiment(ExperimentConfig cfg)
      : cfg_((cfg.validate(), cfg)),
        task_(cfg_.task),
        policy_(cfg_.policy),
        params_(policy_.init(derive_seed({cfg_.seed, fnv1a("init")}))),
        opt_(cfg_.optim) {
    snapshot_ = sync_weights(policy_, params_, cfg_.sampler_precision());
  }

  const ExperimentConfig& config() const { return cfg_; }
  const Task& task() const { return task_; }
  const Policy& policy() const { return policy_; }
  Params& params() { return params_; }
  const Params& params() const { return params_; }
  const LowBitSnapshot& snapshot() const { return snapshot_; }
  AdamW& optimizer() { return opt_; }

  DecodeConfig decode() const {
    DecodeConfig dc;
    dc.temperature = cfg_.temperature;
    dc.top_p = cfg_.top_p;
    dc.max_new_tokens = cfg_.max_new_tokens;
    return dc;
  }
  KernelNoise noise() const { return {cfg_.kernel_noise, derive_seed({cfg_.seed, fnv1a("noise")})}; }
  SamplerSide sampler() const { return {policy_, snapshot_, decode(), noise()}; }
  LearnerSide learner() const { return {policy_, cfg_.learner_mode(), cfg_.temperature}; }

  std::vector<std::vector<int>> prompts(int step) const {
    Rng rng(derive_seed({cfg_.seed, fnv1a("prompts"), static_cast<std::uint64_t>(step)}));
    std::vector<std::vector<int>> out;
    for (int i = 0; i < cfg_.prompts_per_step; ++i) out.push_back(task_.prompt(rng));
    return out;
  }

  /// Rollout, injection, advantages and learner fill for one step.
  RolloutBatch collect(int step, InjectionReport* report = nullptr) const {
    const auto s = static_cast<std::uint64_t>(step);
    RolloutBatch batch = rollout(sampler(), task_, prompts(step), cfg_.group_size,
                                 derive_seed({cfg_.seed, fnv1a("rollout"), s}), cfg_.error_repeats);
    Rng inj(derive_seed({cfg_.seed, fnv1a("inject"), s}));
    const auto rep = inject_error_tokens(sampler(), task_, batch, cfg_.injection_rate, inj, cfg_.error_repeats);
    if (report) *report = rep;
    assign_advantages(batch);
    fill_learner_logprobs(policy_, params_, batch, cfg_.learner_mode(), cfg_.temperature);
    return batch;
  }

  TrainStats train(RolloutBatch& batch, int step) {
    Rng shuffle(derive_seed({cfg_.seed, fnv1a("shuffle"), static_cast<std::uint64_t>(step)}));
    return train_step(learner(), params_, opt_, batch, cfg_.objective, cfg_.effective_epochs(),
                      cfg_.effective_minibatch_prompts(), shuffle);
  }

  void sync() { snapshot_ = sync_weights(policy_, params_, cfg_.sampler_precision()); }

  /// One full rollout -> fill -> train -> sync cycle.
  StepRecord step(int step, RolloutBatch* keep = nullptr) {
    InjectionReport rep;
    RolloutBatch batch = collect(step, &rep);
    StepRecord rec = describe(batch, step);
    rec.injected = rep.injected;
    try {
      const TrainStats ts = train(batch, step);
      rec.token_ratio = percentiles(ts.stats.token_ratios);
      rec.sequence_ratio = percentiles(ts.stats.sequence_ratios);
      rec.token_ratio_hist = log_ratio_histogram(ts.stats.token_ratios);
      rec.clip_fraction = ts.stats.clip_fraction();
      rec.masked_fraction = ts.stats.masked_fraction();
      rec.masked_fraction_positive = ts.stats.positive ? static_cast<double>(ts.stats.masked_positive) / static_cast<double>(ts.stats.positive) : 0.0;
      rec.masked_fraction_negative = ts.stats.negative ? static_cast<double>(ts.stats.masked_negative) / static_cast<double>(ts.stats.negative) : 0.0;
      rec.mis_rejection_rate = ts.stats.sequences + ts.stats.rejected
                                   ? static_cast<double>(ts.stats.rejected) / static_cast<double>(ts.stats.sequences + ts.stats.rejected)
                                   : 0.0;
      rec.loss = ts.loss;
      rec.grad_norm = ts.grad_norm;
    } catch (const NonFiniteError&) {
      if (keep) *keep = std::move(batch);
      throw;
    }
    sync();
    rec.version = params_.version;
    if (keep) *keep = std::move(batch);
    return rec;
  }

  /// Batch-level measurements taken before training.
  StepRecord describe(const RolloutBatch& batch, int step) const {
    StepRecord rec;
    rec.step = step;
    double reward = 0.0, len = 0.0;
    std::size_t flagged = 0, spont_flagged = 0, spont_tokens = 0;
    std::vector<double> mismatch;
    for (const auto& r : batch.responses) {
      reward += r.reward;
      len += static_cast<double>(r.length());
      for (std::size_t t = 0; t < r.length(); ++t) {
        mismatch.push_back(mismatch_weight(r.logp_old[t], r.logp_sampler[t]));
        flagged += r.error_mask[t];
        if (!r.injected) spont_flagged += r.error_mask[t];
      }
      if (!r.injected) spont_tokens += r.length();
    }
    const double n = static_cast<double>(batch.responses.size());
    rec.reward_mean = reward / n;
    rec.response_length_mean = len / n;
    const auto ke = kl_entropy_metrics(batch);
    rec.kl = ke.kl;
    rec.entropy = ke.entropy;
    rec.mismatch = percentiles(mismatch);
    rec.mismatch_hist = log_ratio_histogram(mismatch);
    const double tokens = static_cast<double>(batch.token_count());
    rec.error_token_rate = tokens > 0 ? static_cast<double>(flagged) / tokens : 0.0;
    rec.spontaneous_error_rate = spont_tokens ? static_cast<double>(spont_flagged) / static_cast<double>(spont_tokens) : 0.0;
    return rec;
  }

  struct EvalResult {
    double accuracy = 0.0;         // temperature-sampled, fixed seed
    double greedy_accuracy = 0.0;
    int prompts = 0;
  };

  /// Held-out evaluation on the sampler snapshot.
  EvalResult evaluate() const {
    EvalResult ev;
    ev.prompts = cfg_.eval_prompts;
    if (cfg_.eval_prompts == 0) return ev;
    Rng prng(derive_seed({cfg_.seed, fnv1a("eval-prompts")}));
    std::vector<std::vector<int>> ps;
    for (int i = 0; i < cfg_.eval_prompts; ++i) ps.push_back(task_.prompt(prng));
    DecodeConfig dc = decode();
    dc.temperature = cfg_.eval_temperature;
    dc.top_p = 1.0;
    std::vector<Rng> rngs;
    for (std::size_t i = 0; i < ps.size(); ++i) rngs.emplace_back(derive_seed({cfg_.seed, fnv1a("eval"), i}));
    const auto sampled = policy_.sample_batch(snapshot_, ps, dc, rngs, noise());
    dc.greedy = true;
    const auto greedy = policy_.sample_batch(snapshot_, ps, dc, rngs, noise());
    for (std::size_t i = 0; i < ps.size(); ++i) {
      ev.accuracy += task_.reward(ps[i], sampled[i].tokens);
      ev.greedy_accuracy += task_.reward(ps[i], greedy[i].tokens);
    }
    ev.accuracy /= static_cast<double>(ps.size());
    ev.greedy_accuracy /= static_cast<double>(ps.size());
    return ev;
  }

 private:
  ExperimentConfig cfg_;
  Task task_;
  Policy policy_;
  Params params_;
  AdamW opt_;
  LowBitSnapshot snapshot_;
};

inline nlohmann::ordered_json batch_to_json(const RolloutBatch& batch) {
  nlohmann::ordered_json out = nlohmann::ordered_json::array();
  for (const auto& r : batch.responses) {
    nlohmann::ordered_json j;
    j["group"] = r.group;
    j["prompt"] = r.prompt;
    j["tokens"] = r.tokens;
    j["reward"] = r.reward;
    j["advantage"] = r.advantage;
    j["injected"] = r.injected;
    j["logp_sampler"] = r.logp_sampler;
    j["logp_old"] = r.logp_old;
    j["logp_current"] = r.logp_current;
    out.push_back(std::move(j));
  }
  return out;
}

struct RunSummary {
  std::filesystem::path dir;
  std::vector<StepRecord> records;
  Experiment::EvalResult eval;
};

/// Runs every step and writes into `dir`: config.cfg, metrics.jsonl (one
/// StepRecord per line, byte-deterministic), timing.jsonl (wall times),
/// checkpoint.qckp, eval.json. On a non-finite metric the offending batch goes
/// to failed_batch.json and the error propagates.
inline RunSummary run_experiment(const ExperimentConfig& cfg, const std::filesystem::path& dir,
                                 const std::function<void(const StepRecord&)>& on_step = {}) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  {
    std::ofstream c(dir / "config.cfg");
    c << cfg.to_text();
  }
  Experiment exp(cfg);
  RunSummary summary;
  summary.dir = dir;
  std::ofstream metrics(dir / "metrics.jsonl");
  std::ofstream timing(dir / "timing.jsonl");
  auto fail = [&](const std::string& what, const RolloutBatch& batch, const nlohmann::ordered_json& diag, int step) {
    nlohmann::ordered_json j;
    j["step"] = step;
    j["error"] = what;
    j["diagnostics"] = diag;
    j["responses"] = batch_to_json(batch);
    std::ofstream f(dir / "failed_batch.json");
    f << j.dump(1) << "\n";
  };
  for (int s = 0; s < cfg.steps; ++s) {
    const auto t0 = std::chrono::steady_clock::now();
    RolloutBatch batch;
    StepRecord rec;
    try {
      rec = exp.step(s, &batch);
    } catch (const NonFiniteError& e) {
      fail(e.what(), batch, e.diagnostics(), s);
      throw;
    }
    if (const auto bad = rec.first_non_finite(); !bad.empty()) {
      fail("non-finite metric " + bad, batch, rec.to_json(), s);
      throw NonFiniteError("non-finite metric " + bad + " at step " + std::to_string(s), rec.to_json());
    }
    metrics << rec.to_json().dump() << "\n";
    metrics.flush();
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    timing << nlohmann::ordered_json{{"step", s}, {"seconds", secs}}.dump() << "\n";
    if (on_step) on_step(rec);
    summary.records.push_back(std::move(rec));
  }
  Policy::save_checkpoint(dir / "checkpoint.qckp", exp.policy().config(), exp.params());
  summary.eval = exp.evaluate();
  nlohmann::ordered_json ev;
  ev["accuracy"] = summary.eval.accuracy;
  ev["greedy_accuracy"] = summary.eval.greedy_accuracy;
  ev["prompts"] = summary.eval.prompts;
  ev["temperature"] = cfg.eval_temperature;
  std::ofstream(dir / "eval.json") << ev.dump(1) << "\n";
  return summary;
}

/// Mean training reward over the last `n` records.
inline double tail_reward(const std::vector<StepRecord>& recs, std::size_t n) {
  if (recs.empty()) return 0.0;
  const std::size_t k = std::min(n, recs.size());
  double s = 0.0;
  for (std::size_t i = recs.size() - k; i < recs.size(); ++i) s += recs[i].reward_mean;
  return s / static_cast<double>(k);
}

}  // namespace qarl
