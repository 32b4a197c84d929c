// SPDX-License-Identifier: Apache-2.0
//
// Small-size oracle suites shared by `qarl check` and the acceptance binary.
// Each check compares library behaviour against an independent construction
// and reports the worst deviation it saw.
#pragma once

#include <chrono>
#include <cmath>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "qarl/graph.hpp"
#include "qarl/objectives.hpp"
#include "qarl/policy.hpp"
#include "qarl/quantsim.hpp"
#include "qarl/rng.hpp"

namespace qarl::checks {

struct CheckResult {
  std::string name;
  bool passed = false;
  std::string detail;
  double seconds = 0.0;
};

namespace detail {

inline Tensor random_tensor(Rng& rng, std::size_t r, std::size_t c, double scale) {
  Tensor t({r, c});
  for (double& v : t.data) v = scale * rng.normal();
  return t;
}

/// Reference integer code: round half to even of v / s plus z, clamped.
/// Deliberately does not go through the library's rounding routine.
inline int reference_int_code(double v, float s, std::int32_t z, Format f) {
  const double q = std::nearbyint(v / static_cast<double>(s)) + z;
  return static_cast<int>(std::clamp(q, static_cast<double>(q_min(f)), static_cast<double>(q_max(f))));
}

/// Reference floating cast: brute-force nearest over the signed grid, ties to
/// the even magnitude code, saturating beyond the largest magnitude.
inline double reference_fp(double x, Format f) {
  const auto& grid = fp_magnitudes(f);
  const double a = std::fabs(x);
  std::size_t best = 0;
  for (std::size_t c = 1; c < grid.size(); ++c) {
    const double d = std::fabs(grid[c] - a);
    const double db = std::fabs(grid[best] - a);
    if (d < db || (d == db && c % 2 == 0 && best % 2 == 1)) best = c;
  }
  return std::signbit(x) ? -grid[best] : grid[best];
}

/// Operands of a tensor re-quantized by the reference routine using the
/// library's scales and zero points; returns the dequantized values.
inline Tensor reference_dequantize(const Tensor& x, const QuantizedTensor& q) {
  Tensor out(x.shape);
  const std::size_t cols = x.cols();
  for (std::size_t i = 0; i < x.size(); ++i) {
    const std::size_t g = q.group_of_row(i / cols);
    const float s = q.scales[g];
    if (is_float_format(q.format)) {
      out.data[i] = reference_fp(x.data[i] / static_cast<double>(s), q.format) * static_cast<double>(s);
    } else {
      const int code = reference_int_code(x.data[i], s, q.zero_points[g], q.format);
      out.data[i] = static_cast<double>(code - q.zero_points[g]) * static_cast<double>(s);
    }
  }
  return out;
}

inline double max_abs(const Tensor& t) {
  double m = 0.0;
  for (double v : t.data) m = std::max(m, std::fabs(v));
  return m;
}

template <class F>
CheckResult timed(const std::string& name, F&& body) {
  const auto t0 = std::chrono::steady_clock::now();
  CheckResult r;
  r.name = name;
  try {
    body(r);
  } catch (const std::exception& e) {
    r.passed = false;
    r.detail = std::string("exception: ") + e.what();
  }
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return r;
}

}  // namespace detail

/// qgemm against a matmul of reference-quantized operands (1e-6 relative, 100
/// random 8x8 cases per format), integer round-trip error within s/2, and
/// cast_fpk against brute-force grid enumeration.
inline CheckResult quantization_oracle(int cases = 100, std::uint64_t seed = 11) {
  return detail::timed("quantization oracle", [&](CheckResult& out) {
    Rng rng(seed);
    double worst_gemm = 0.0, worst_roundtrip = 0.0;
    std::size_t cast_mismatch = 0, cast_total = 0;
    for (Format f : {Format::int8, Format::int4, Format::fp8_e4m3, Format::fp4_e2m1}) {
      const QuantScheme scheme{f, Grouping::per_row, true, std::nullopt};
      for (int c = 0; c <= cases; ++c) {
        Tensor x = detail::random_tensor(rng, 8, 8, 1.0 + 3.0 * rng.uniform());
        if (c == cases && !is_float_format(f)) {
          // Exact ties: each row spans q_max, so s = 1 and half-integers sit midway between codes.
          for (std::size_t i = 0; i < x.size(); ++i)
            x.data[i] = i % 8 == 0 ? q_max(f) : (static_cast<double>(i % 5) - 2.0) + 0.5;
        } else if (c == cases) {
          continue;
        }
        const Tensor w = detail::random_tensor(rng, 8, 8, 0.05 + rng.uniform());
        const auto qx = quantize(x, scheme);
        const auto qw = quantize(w, scheme);
        const Tensor got = qgemm(qx, qw);
        const Tensor want = matmul_nt(detail::reference_dequantize(x, qx), detail::reference_dequantize(w, qw));
        Tensor diff = got;
        for (std::size_t i = 0; i < diff.size(); ++i) diff.data[i] -= want.data[i];
        worst_gemm = std::max(worst_gemm, detail::max_abs(diff) / std::max(detail::max_abs(want), 1e-300));
        if (!is_float_format(f)) {
          const Tensor back = dequantize(qx);
          for (std::size_t i = 0; i < x.size(); ++i) {
            const double s = qx.scales[qx.group_of_row(i / x.cols())];
            worst_roundtrip = std::max(worst_roundtrip, std::fabs(back.data[i] - x.data[i]) / (s / 2.0));
          }
        }
      }
      if (is_float_format(f)) {
        const auto& grid = fp_magnitudes(f);
        std::vector<double> probes;
        for (std::size_t i = 0; i + 1 < grid.size(); ++i) probes.push_back(0.5 * (grid[i] + grid[i + 1]));
        for (int i = 0; i < 2000; ++i) probes.push_back((rng.uniform() * 2.0 - 1.0) * grid.back() * 1.2);
        for (double p : probes)
          for (double v : {p, -p}) {
            ++cast_total;
            if (cast_fpk(v, f) != detail::reference_fp(v, f)) ++cast_mismatch;
          }
      }
    }
    out.passed = worst_gemm <= 1e-6 && worst_roundtrip <= 1.0 + 1e-9 && cast_mismatch == 0;
    std::ostringstream d;
    d << "qgemm max rel err " << worst_gemm << ", round-trip max err/(s/2) " << worst_roundtrip << ", cast mismatches "
      << cast_mismatch << "/" << cast_total;
    out.detail = d.str();
  });
}

/// Full-precision finite differences through a depth-2 policy on a random
/// linear functional of per-token log-probs, and the straight-through rule:
/// under a clamping low-bit spec the weight gradient equals the gradient at the
/// dequantized weights with saturated coordinates zeroed.
inline CheckResult gradient_oracle(std::size_t coordinates = 400, std::uint64_t seed = 12) {
  return detail::timed("gradient oracle", [&](CheckResult& out) {
    PolicyConfig pc;
    pc.hidden_dim = 12;
    pc.context_window = 8;
    pc.depth = 2;
    const Policy policy(pc);
    Params params = policy.init(seed);
    Rng rng(seed);
    // Perturb gains and biases so every parameter takes part nontrivially.
    for (auto& [name, t] : params.tensors)
      for (double& v : t.data) v += 0.05 * rng.normal();
    TokenRows rows;
    for (int r = 0; r < 3; ++r) {
      std::vector<int> prompt{kFirstSymbol + r, kFirstSymbol + 2, kSep};
      std::vector<int> response{kFirstSymbol + 1, kFirstSymbol + r, kEos};
      rows.append(prompt, response, pc.context_window);
    }
    Tensor coef(std::vector<std::size_t>{rows.rows()});
    for (double& c : coef.data) c = rng.normal();
    auto value = [&](const Params& p, const PrecisionMode& mode) {
      const Tensor lp = policy.forward_rows(policy.bindings(p), rows, mode).output();
      double s = 0.0;
      for (std::size_t i = 0; i < lp.size(); ++i) s += coef.data[i] * lp.data[i];
      return s;
    };
    const auto grads = gradient(policy.forward_rows(policy.bindings(params), rows, PrecisionMode::full()), coef);
    std::vector<std::pair<std::string, std::size_t>> coords;
    for (const auto& [name, t] : params.tensors)
      for (std::size_t i = 0; i < t.size(); ++i) coords.emplace_back(name, i);
    for (std::size_t i = 0; i < std::min(coordinates, coords.size()); ++i)
      std::swap(coords[i], coords[i + rng.below(coords.size() - i)]);
    coords.resize(std::min(coordinates, coords.size()));
    double worst = 0.0;
    const double eps = 1e-5;
    for (const auto& [name, i] : coords) {
      Params p = params;
      p.tensors.at(name).data[i] += eps;
      const double up = value(p, PrecisionMode::full());
      p.tensors.at(name).data[i] -= 2.0 * eps;
      const double down = value(p, PrecisionMode::full());
      const double fd = (up - down) / (2.0 * eps);
      const double ad = grads.at(name).data[i];
      worst = std::max(worst, std::fabs(fd - ad) / std::max({std::fabs(fd), std::fabs(ad), 1e-6}));
    }

    // Straight-through estimator with saturation.
    QuantSpec clipped = QuantSpec::w4a16();
    clipped.fixed_scale = 0.02;
    const auto low = gradient(policy.forward_rows(policy.bindings(params), rows, PrecisionMode::lowbit(clipped)), coef);
    Params replaced = params;
    std::map<std::string, std::vector<std::uint8_t>> sat;
    for (const auto& name : policy.quantized_parameters()) {
      auto tq = quantize_tracked(params.at(name), clipped.weight_scheme());
      replaced.tensors.at(name) = dequantize(tq.tensor);
      sat[name] = std::move(tq.saturated);
    }
    const auto ref = gradient(policy.forward_rows(policy.bindings(replaced), rows, PrecisionMode::full()), coef);
    std::size_t saturated = 0, violations = 0, nonzero_saturated = 0;
    for (const auto& [name, mask] : sat)
      for (std::size_t i = 0; i < mask.size(); ++i) {
        const double expect = mask[i] ? 0.0 : ref.at(name).data[i];
        saturated += mask[i];
        if (mask[i] && low.at(name).data[i] != 0.0) ++nonzero_saturated;
        if (low.at(name).data[i] != expect) ++violations;
      }
    out.passed = worst <= 1e-4 && saturated > 0 && violations == 0;
    std::ostringstream d;
    d << "fd max rel err " << worst << " over " << coords.size() << " coords; STE: " << saturated
      << " saturated codes, " << nonzero_saturated << " with nonzero grad, " << violations << " mismatches";
    out.detail = d.str();
  });
}

/// Mismatch reweighting on an enumerable two-step, vocab-5 policy pair:
/// E_sampler[w f] equals E_learner[f] for random f.
inline CheckResult unbiasedness_oracle(std::uint64_t seed = 13) {
  return detail::timed("mismatch reweighting unbiasedness", [&](CheckResult& out) {
    Rng rng(seed);
    constexpr int V = 5;
    auto normalize = [](std::vector<double>& row) {
      double m = 0.0;
      for (double v : row) m += std::exp(v);
      for (double& v : row) v -= std::log(m);
    };
    std::vector<std::vector<double>> learner(V + 1, std::vector<double>(V));
    for (auto& row : learner) {
      for (double& v : row) v = rng.normal();
      normalize(row);
    }
    auto sampler = learner;
    for (auto& row : sampler) {
      for (double& v : row) v += 0.4 * rng.normal();
      normalize(row);
    }
    double worst = 0.0;
    for (int trial = 0; trial < 10; ++trial) {
      std::vector<double> f(V * V);
      for (double& v : f) v = 3.0 * rng.normal();
      double lhs = 0.0, rhs = 0.0;
      for (int a = 0; a < V; ++a)
        for (int b = 0; b < V; ++b) {
          const double ps = std::exp(sampler[V][a] + sampler[a][b]);
          const double pl = std::exp(learner[V][a] + learner[a][b]);
          const double w = mismatch_weight(learner[V][a], sampler[V][a]) * mismatch_weight(learner[a][b], sampler[a][b]);
          lhs += ps * w * f[static_cast<std::size_t>(a * V + b)];
          rhs += pl * f[static_cast<std::size_t>(a * V + b)];
        }
      worst = std::max(worst, std::fabs(lhs - rhs));
    }
    out.passed = worst <= 1e-10;
    std::ostringstream d;
    d << "max |E_s[w f] - E_l[f]| = " << worst;
    out.detail = d.str();
  });
}

namespace detail {
inline ResponseRecord shifted(double adv, const std::vector<double>& ratios) {
  ResponseRecord r;
  r.tokens.assign(ratios.size(), kFirstSymbol);
  r.advantage = adv;
  r.logp_old.assign(ratios.size(), -2.0);
  r.logp_sampler = r.logp_old;
  for (std::size_t t = 0; t < ratios.size(); ++t) r.logp_current.push_back(-2.0 + std::log(ratios[t]));
  return r;
}
inline std::size_t zeros(const std::vector<double>& g) { return static_cast<std::size_t>(std::count(g.begin(), g.end(), 0.0)); }
}  // namespace detail

/// (a) responses outside their sequence band get exactly zero gradient while
/// in-band ones do not; (b) an error response (garbled token then a repetitive
/// run) and a low-variance exploration response: token-level clipping leaves the
/// run unclipped, the sequence band masks the error response whole and keeps the
/// exploration response.
inline CheckResult tbpo_semantics() {
  return detail::timed("sequence band semantics", [&](CheckResult& out) {
    const auto cfg = ObjectiveConfig::for_variant(Variant::tbpo);
    std::vector<ResponseRecord> b{detail::shifted(-1.0, {1.3, 1.2, 1.0}), detail::shifted(1.0, {1.2, 1.2}),
                                  detail::shifted(-1.0, {0.8, 0.9}), detail::shifted(1.0, {1.01, 1.02}),
                                  detail::shifted(-1.0, {0.98, 1.05})};
    const auto r = tbpo_loss(b, cfg);
    bool a_ok = true;
    for (std::size_t i = 0; i < 3; ++i) a_ok = a_ok && detail::zeros(r.dlogp[i]) == b[i].length();
    for (std::size_t i = 3; i < 5; ++i) a_ok = a_ok && detail::zeros(r.dlogp[i]) == 0;
    a_ok = a_ok && r.stats.masked_sequences == 3;

    const auto error = detail::shifted(-1.0, {1.0, 1.0, 2.5, 1.08, 1.08, 1.08, 1.08});
    const auto explore = detail::shifted(1.0, {1.0, 1.0, 1.0, 1.3, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0});
    std::vector<ResponseRecord> pair{error, explore};
    const auto dual = compute_loss(pair, ObjectiveConfig::for_variant(Variant::grpo_dualclip));
    std::size_t unclipped_after = 0;
    for (std::size_t t = 3; t < error.length(); ++t) unclipped_after += dual.dlogp[0][t] != 0.0 ? 1 : 0;
    const bool token_leaves_run = dual.dlogp[0][2] == 0.0 && unclipped_after == error.length() - 3;
    const auto seq = compute_loss(pair, cfg);
    const bool seq_masks = detail::zeros(seq.dlogp[0]) == error.length() && detail::zeros(seq.dlogp[1]) == 0;
    out.passed = a_ok && token_leaves_run && seq_masks;
    std::ostringstream d;
    d << "out-of-band zero-grad " << (a_ok ? "ok" : "FAILED") << "; token-level leaves " << unclipped_after
      << " post-error tokens unclipped; sequence band masks error response " << (seq_masks ? "whole" : "NOT whole")
      << " and keeps exploration";
    out.detail = d.str();
  });
}

/// Sampler and learner low-bit forwards agree bit for bit on every spec, at two
/// temperatures, through the snapshot wire format.
inline CheckResult alignment_oracle(std::uint64_t seed = 14) {
  return detail::timed("sampler/learner alignment", [&](CheckResult& out) {
    PolicyConfig pc;
    pc.hidden_dim = 16;
    const Policy policy(pc);
    const Params params = policy.init(seed);
    Rng rng(seed);
    std::size_t compared = 0, differing = 0;
    for (const char* name : {"w4a16", "w8a8", "w4a8", "fp8w8a8", "fp4w4a16"}) {
      const QuantSpec spec = parse_quant_spec(name);
      const auto snap = Policy::deserialize_snapshot(Policy::serialize_snapshot(policy.publish_lowbit(params, spec)));
      for (double temp : {1.0, 0.7}) {
        DecodeConfig dc;
        dc.temperature = temp;
        dc.max_new_tokens = 6;
        std::vector<int> prompt{kFirstSymbol, kFirstSymbol + 1, kSep};
        const auto resp = policy.sample(snap, prompt, dc, rng);
        const auto learner = policy.sequence_logprobs(params, prompt, resp.tokens, PrecisionMode::lowbit(spec), temp);
        for (std::size_t t = 0; t < learner.size(); ++t) {
          ++compared;
          if (learner[t] != resp.logprobs[t]) ++differing;
        }
      }
    }
    out.passed = differing == 0 && compared > 0;
    std::ostringstream d;
    d << differing << " of " << compared << " token log-probs differ";
    out.detail = d.str();
  });
}

/// Every oracle suite, in order.
inline std::vector<CheckResult> run_all() {
  return {quantization_oracle(), gradient_oracle(), unbiasedness_oracle(), tbpo_semantics(), alignment_oracle()};
}

}  // namespace qarl::checks
