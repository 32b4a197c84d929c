// SPDX-License-Identifier: Apache-2.0
//
// Policy-gradient objectives over grouped rollouts: GRPO with token-level PPO
// clipping and optional truncated mismatch weights, the dual-clip and
// positive-only ablations, sequence-level GSPO (plain and with masked
// importance sampling) and TBPO.
//
// Every loss returns its value together with d(loss)/d(log pi_current) for each
// response token. The policy graph consumes that vector as its backward seed.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace qarl {

/// One sampled response with the per-token log-prob streams the objectives need.
struct ResponseRecord {
  std::vector<int> prompt;
  std::vector<int> tokens;
  double reward = 0.0;
  int group = 0;
  double advantage = 0.0;
  std::vector<double> logp_sampler;      // log pi_sampler(theta_old), recorded at generation
  std::vector<double> logp_old;          // log pi_learner(theta_old)
  std::vector<double> logp_current;      // log pi_learner(theta), refreshed during training
  std::vector<double> learner_entropy;   // entropy of the learner's per-step distribution
  std::vector<std::uint8_t> error_mask;  // detected error tokens
  bool injected = false;

  std::size_t length() const { return tokens.size(); }
};

struct RolloutBatch {
  std::vector<ResponseRecord> responses;
  int group_size = 0;

  std::size_t token_count() const {
    std::size_t n = 0;
    for (const auto& r : responses) n += r.length();
    return n;
  }
};

enum class Variant : std::uint8_t { grpo, grpo_dualclip, grpo_onpolicy, grpo_positive, gspo, gspo_mis, tbpo };
enum class Level : std::uint8_t { token, sequence };

inline std::string to_string(Variant v) {
  switch (v) {
    case Variant::grpo: return "grpo";
    case Variant::grpo_dualclip: return "grpo_dualclip";
    case Variant::grpo_onpolicy: return "grpo_onpolicy";
    case Variant::grpo_positive: return "grpo_positive";
    case Variant::gspo: return "gspo";
    case Variant::gspo_mis: return "gspo_mis";
    case Variant::tbpo: return "tbpo";
  }
  return "?";
}

inline Variant parse_variant(const std::string& s) {
  for (auto v : {Variant::grpo, Variant::grpo_dualclip, Variant::grpo_onpolicy, Variant::grpo_positive, Variant::gspo,
                 Variant::gspo_mis, Variant::tbpo})
    if (to_string(v) == s) return v;
  throw std::invalid_argument("unknown objective variant: " + s);
}

inline std::string to_string(Level l) { return l == Level::token ? "token" : "sequence"; }
inline Level parse_level(const std::string& s) {
  if (s == "token") return Level::token;
  if (s == "sequence") return Level::sequence;
  throw std::invalid_argument("unknown aggregation level: " + s);
}

inline Level natural_level(Variant v) {
  switch (v) {
    case Variant::gspo:
    case Variant::gspo_mis:
    case Variant::tbpo: return Level::sequence;
    default: return Level::token;
  }
}

struct ObjectiveConfig {
  Variant variant = Variant::tbpo;
  Level level = Level::sequence;
  double epsilon = 0.2;         // symmetric token clip for GRPO
  double epsilon_high = 0.05;   // upper bound for positive advantages
  double epsilon_low = 0.05;    // GSPO lower bound
  double delta_low = 0.05;      // negative band, lower
  double delta_high = 0.10;     // negative band, upper
  double cap = 2.0;             // mismatch weight kept in [1/cap, cap]
  bool tis = true;              // multiply by the capped mismatch weight
  double mis_low = 0.5;         // masked importance sampling acceptance interval
  double mis_high = 2.0;
  bool length_norm = true;

  static ObjectiveConfig for_variant(Variant v) {
    ObjectiveConfig c;
    c.variant = v;
    c.level = natural_level(v);
    return c;
  }

  void validate() const {
    for (double x : {epsilon, epsilon_high, epsilon_low, delta_low, delta_high})
      if (!(x >= 0.0)) throw std::invalid_argument("clip bands must be non-negative");
    if (!(cap > 1.0)) throw std::invalid_argument("mismatch cap must exceed 1");
    if (!(mis_low <= mis_high)) throw std::invalid_argument("mis bounds must be ordered");
    if (level != natural_level(variant))
      throw std::invalid_argument("variant " + to_string(variant) + " requires " + to_string(natural_level(variant)) +
                                  "-level aggregation");
  }
};

// ---------------------------------------------------------------------------
// Scalar pieces

/// Group-normalized advantages with population std. Zero-variance groups give zeros.
inline std::vector<double> group_advantages(std::span<const double> rewards) {
  if (rewards.size() < 2) throw std::invalid_argument("group advantages need at least two responses");
  for (double r : rewards)
    if (!std::isfinite(r)) throw std::invalid_argument("non-finite reward");
  const double n = static_cast<double>(rewards.size());
  const double mean = std::accumulate(rewards.begin(), rewards.end(), 0.0) / n;
  double var = 0.0;
  for (double r : rewards) var += (r - mean) * (r - mean);
  const double sd = std::sqrt(var / n);
  std::vector<double> out(rewards.size(), 0.0);
  if (sd == 0.0) return out;
  for (std::size_t i = 0; i < rewards.size(); ++i) out[i] = (rewards[i] - mean) / sd;
  return out;
}

/// Fill ResponseRecord::advantage per group id.
inline void assign_advantages(RolloutBatch& batch) {
  std::map<int, std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < batch.responses.size(); ++i) groups[batch.responses[i].group].push_back(i);
  for (const auto& [g, idx] : groups) {
    std::vector<double> r;
    for (auto i : idx) r.push_back(batch.responses[i].reward);
    const auto a = group_advantages(r);
    for (std::size_t k = 0; k < idx.size(); ++k) batch.responses[idx[k]].advantage = a[k];
  }
}

/// pi_current / pi_old from log-probs.
inline double token_ratio(double logp_current, double logp_old) { return std::exp(logp_current - logp_old); }

/// pi_learner(theta_old) / pi_sampler(theta_old).
inline double mismatch_weight(double logp_learner_old, double logp_sampler_old) {
  return std::exp(logp_learner_old - logp_sampler_old);
}

/// exp(clip(log w, -log c, log c)), i.e. w clipped to [1/c, c].
inline double cap_mismatch(double w, double c) {
  if (!(w > 0.0)) throw std::invalid_argument("mismatch weight must be positive");
  if (!(c > 1.0)) throw std::invalid_argument("mismatch cap must exceed 1");
  const double lc = std::log(c);
  return std::exp(std::clamp(std::log(w), -lc, lc));
}

/// Mean of per-token log differences; exp of it is a geometric-mean sequence ratio.
inline double seq_logmean(std::span<const double> logdiffs) {
  if (logdiffs.empty()) throw std::invalid_argument("sequence log-mean of an empty response");
  double s = 0.0;
  for (double d : logdiffs) s += d;
  return s / static_cast<double>(logdiffs.size());
}

struct Clipped {
  double value;
  bool in_band;
};

/// Trust band: [0, 1+eps_h] for A >= 0, [1-delta_l, 1+delta_h] for A < 0.
inline Clipped clip_ratio(double r, double advantage, const ObjectiveConfig& cfg) {
  const double lo = advantage >= 0.0 ? 0.0 : 1.0 - cfg.delta_low;
  const double hi = advantage >= 0.0 ? 1.0 + cfg.epsilon_high : 1.0 + cfg.delta_high;
  const double v = std::clamp(r, lo, hi);
  return {v, v == r};
}

// ---------------------------------------------------------------------------
// Losses

struct ObjectiveStats {
  std::size_t tokens = 0;
  std::size_t clipped_tokens = 0;      // token-level: tokens whose gradient was clipped away
  std::size_t sequences = 0;
  std::size_t masked_sequences = 0;    // sequence-level: responses outside their band
  std::size_t positive = 0;
  std::size_t negative = 0;
  std::size_t masked_positive = 0;
  std::size_t masked_negative = 0;
  std::size_t rejected = 0;            // removed by MIS / positive filtering
  std::vector<double> token_ratios;
  std::vector<double> sequence_ratios;

  double clip_fraction() const {
    if (sequences > 0 && tokens == 0) return 0.0;
    return tokens ? static_cast<double>(clipped_tokens) / static_cast<double>(tokens) : 0.0;
  }
  double masked_fraction() const {
    return sequences ? static_cast<double>(masked_sequences) / static_cast<double>(sequences) : 0.0;
  }
};

struct LossResult {
  double loss = 0.0;
  std::vector<std::vector<double>> dlogp;  // d loss / d logp_current, per response token
  ObjectiveStats stats;
};

namespace detail {
inline void require_filled(std::span<const ResponseRecord> batch) {
  for (const auto& r : batch) {
    const std::size_t n = r.length();
    if (n == 0) throw std::invalid_argument("empty response in batch");
    if (r.logp_sampler.size() != n || r.logp_old.size() != n || r.logp_current.size() != n)
      throw std::invalid_argument("response is missing per-token log-probs");
  }
}

inline LossResult empty_result(std::span<const ResponseRecord> batch) {
  LossResult out;
  out.dlogp.resize(batch.size());
  for (std::size_t i = 0; i < batch.size(); ++i) out.dlogp[i].assign(batch[i].length(), 0.0);
  return out;
}

inline std::vector<bool> keep_all(std::size_t n) { return std::vector<bool>(n, true); }

inline double seq_mismatch(const ResponseRecord& r) {
  std::vector<double> d(r.length());
  for (std::size_t t = 0; t < d.size(); ++t) d[t] = r.logp_old[t] - r.logp_sampler[t];
  return std::exp(seq_logmean(d));
}

inline double seq_ratio(const ResponseRecord& r) {
  std::vector<double> d(r.length());
  for (std::size_t t = 0; t < d.size(); ++t) d[t] = r.logp_current[t] - r.logp_old[t];
  return std::exp(seq_logmean(d));
}

inline void count_sign(ObjectiveStats& s, double a, bool masked) {
  if (a > 0.0) {
    ++s.positive;
    if (masked) ++s.masked_positive;
  } else if (a < 0.0) {
    ++s.negative;
    if (masked) ++s.masked_negative;
  }
}

/// Token-level GRPO family over the kept responses.
inline LossResult token_loss(std::span<const ResponseRecord> batch, const ObjectiveConfig& cfg, const std::vector<bool>& keep) {
  LossResult out = empty_result(batch);
  std::map<int, std::vector<std::size_t>> groups;
  std::size_t max_len = 1;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    if (!keep[i]) continue;
    groups[batch[i].group].push_back(i);
    max_len = std::max(max_len, batch[i].length());
  }
  if (groups.empty()) return out;
  const bool dual = cfg.variant == Variant::grpo_dualclip;
  const double n_groups = static_cast<double>(groups.size());
  for (const auto& [g, idx] : groups) {
    const double group_w = 1.0 / (n_groups * static_cast<double>(idx.size()));
    for (auto i : idx) {
      const auto& r = batch[i];
      const double a = r.advantage;
      const double norm = (cfg.length_norm ? 1.0 / static_cast<double>(r.length()) : 1.0 / static_cast<double>(max_len)) * group_w;
      ++out.stats.sequences;
      for (std::size_t t = 0; t < r.length(); ++t) {
        const double ratio = token_ratio(r.logp_current[t], r.logp_old[t]);
        const double w = cfg.tis ? cap_mismatch(mismatch_weight(r.logp_old[t], r.logp_sampler[t]), cfg.cap) : 1.0;
        double objective;
        bool active;
        if (dual) {
          const auto c = clip_ratio(ratio, a, cfg);
          objective = c.value * a;
          active = c.in_band;
        } else {
          const double rc = std::clamp(ratio, 1.0 - cfg.epsilon, 1.0 + cfg.epsilon);
          const double un = ratio * a;
          const double cl = rc * a;
          active = un <= cl;
          objective = std::min(un, cl);
        }
        out.loss += -w * objective * norm;
        out.dlogp[i][t] = active ? -w * a * ratio * norm : 0.0;
        ++out.stats.tokens;
        if (!active && a != 0.0) ++out.stats.clipped_tokens;
        out.stats.token_ratios.push_back(ratio);
      }
    }
  }
  return out;
}

/// Sequence-level family (GSPO, MIS-GSPO, TBPO) over the kept responses.
inline LossResult sequence_loss(std::span<const ResponseRecord> batch, const ObjectiveConfig& cfg,
                                const std::vector<bool>& keep) {
  LossResult out = empty_result(batch);
  std::size_t kept = 0;
  for (std::size_t i = 0; i < batch.size(); ++i) kept += keep[i] ? 1 : 0;
  if (kept == 0) return out;
  const double inv_n = 1.0 / static_cast<double>(kept);
  const bool tbpo = cfg.variant == Variant::tbpo;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    if (!keep[i]) continue;
    const auto& r = batch[i];
    const double a = r.advantage;
    const double s = seq_ratio(r);
    const double w = (tbpo || cfg.tis) ? cap_mismatch(seq_mismatch(r), cfg.cap) : 1.0;
    Clipped c;
    if (tbpo) {
      c = clip_ratio(s, a, cfg);
    } else {
      const double v = std::clamp(s, 1.0 - cfg.epsilon_low, 1.0 + cfg.epsilon_high);
      c = {v, v == s};
    }
    out.loss += -w * c.value * a * inv_n;
    if (c.in_band) {
      const double g = -w * a * s * inv_n / static_cast<double>(r.length());
      std::fill(out.dlogp[i].begin(), out.dlogp[i].end(), g);
    }
    ++out.stats.sequences;
    out.stats.tokens += r.length();
    if (!c.in_band) {
      ++out.stats.masked_sequences;
      out.stats.clipped_tokens += r.length();
    }
    count_sign(out.stats, a, !c.in_band);
    out.stats.sequence_ratios.push_back(s);
    for (std::size_t t = 0; t < r.length(); ++t) out.stats.token_ratios.push_back(token_ratio(r.logp_current[t], r.logp_old[t]));
  }
  return out;
}

inline std::vector<bool> mis_keep(std::span<const ResponseRecord> batch, double lo, double hi) {
  std::vector<bool> keep(batch.size());
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const double w = seq_mismatch(batch[i]);
    keep[i] = w >= lo && w <= hi;
  }
  return keep;
}

inline std::vector<bool> positive_keep(std::span<const ResponseRecord> batch) {
  std::vector<bool> keep(batch.size());
  for (std::size_t i = 0; i < batch.size(); ++i) keep[i] = batch[i].advantage > 0.0;
  return keep;
}

inline std::size_t count_rejected(const std::vector<bool>& keep) {
  return static_cast<std::size_t>(std::count(keep.begin(), keep.end(), false));
}
}  // namespace detail

/// Token-level GRPO (PPO min construction), or the dual-clip variant.
/// L = mean over groups of mean over responses of (1/|o|) sum_t -w~ min(R A, clip(R) A).
inline LossResult grpo_loss(std::span<const ResponseRecord> batch, const ObjectiveConfig& cfg) {
  detail::require_filled(batch);
  return detail::token_loss(batch, cfg, detail::keep_all(batch.size()));
}

/// Sequence-level TBPO: loss = -mean_i w~_i r~_i A_i with geometric-mean ratios,
/// the capped mismatch weight held constant and responses outside their trust
/// band contributing value but no gradient.
inline LossResult tbpo_loss(std::span<const ResponseRecord> batch, const ObjectiveConfig& cfg) {
  if (cfg.level != Level::sequence) throw std::invalid_argument("tbpo_loss requires a sequence-level configuration");
  detail::require_filled(batch);
  ObjectiveConfig c = cfg;
  c.variant = Variant::tbpo;
  return detail::sequence_loss(batch, c, detail::keep_all(batch.size()));
}

/// Sequence-level GSPO with the symmetric band [1-eps_l, 1+eps_h]; the capped
/// sequence mismatch weight is applied when cfg.tis is set.
inline LossResult gspo_loss(std::span<const ResponseRecord> batch, const ObjectiveConfig& cfg) {
  if (cfg.level != Level::sequence) throw std::invalid_argument("gspo_loss requires a sequence-level configuration");
  detail::require_filled(batch);
  ObjectiveConfig c = cfg;
  if (c.variant == Variant::tbpo) c.variant = Variant::gspo;
  return detail::sequence_loss(batch, c, detail::keep_all(batch.size()));
}

struct FilterResult {
  RolloutBatch batch;
  double rejection_rate = 0.0;
};

/// Drop responses whose sequence mismatch weight falls outside [lo, hi].
inline FilterResult mis_filter(const RolloutBatch& batch, double lo, double hi) {
  FilterResult out;
  out.batch.group_size = batch.group_size;
  const auto keep = detail::mis_keep(batch.responses, lo, hi);
  for (std::size_t i = 0; i < keep.size(); ++i)
    if (keep[i]) out.batch.responses.push_back(batch.responses[i]);
  if (!batch.responses.empty())
    out.rejection_rate = static_cast<double>(detail::count_rejected(keep)) / static_cast<double>(batch.responses.size());
  return out;
}

/// Keep only responses with positive advantage.
inline RolloutBatch positive_filter(const RolloutBatch& batch) {
  RolloutBatch out;
  out.group_size = batch.group_size;
  for (const auto& r : batch.responses)
    if (r.advantage > 0.0) out.responses.push_back(r);
  return out;
}

/// Dispatch on the configured variant. Filtering variants report removed
/// responses with zero gradient, so dlogp stays aligned with the input.
inline LossResult compute_loss(std::span<const ResponseRecord> batch, const ObjectiveConfig& cfg) {
  cfg.validate();
  detail::require_filled(batch);
  switch (cfg.variant) {
    case Variant::grpo:
    case Variant::grpo_onpolicy:
    case Variant::grpo_dualclip: return detail::token_loss(batch, cfg, detail::keep_all(batch.size()));
    case Variant::grpo_positive: {
      const auto keep = detail::positive_keep(batch);
      auto r = detail::token_loss(batch, cfg, keep);
      r.stats.rejected = detail::count_rejected(keep);
      return r;
    }
    case Variant::gspo: return detail::sequence_loss(batch, cfg, detail::keep_all(batch.size()));
    case Variant::gspo_mis: {
      const auto keep = detail::mis_keep(batch, cfg.mis_low, cfg.mis_high);
      auto r = detail::sequence_loss(batch, cfg, keep);
      r.stats.rejected = detail::count_rejected(keep);
      return r;
    }
    case Variant::tbpo: return detail::sequence_loss(batch, cfg, detail::keep_all(batch.size()));
  }
  throw std::logic_error("unhandled variant");
}

/// Linear-interpolation percentile (q in [0, 100]); NaN for an empty sample.
inline double percentile(std::vector<double> xs, double q) {
  if (xs.empty()) return std::numeric_limits<double>::quiet_NaN();
  std::sort(xs.begin(), xs.end());
  const double pos = q / 100.0 * static_cast<double>(xs.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = static_cast<std::size_t>(std::ceil(pos));
  const double f = pos - static_cast<double>(lo);
  return xs[lo] + (xs[hi] - xs[lo]) * f;
}

}  // namespace qarl
