// SPDX-License-Identifier: Apache-2.0
//
// Tiny autoregressive token policy. It stands in for a transformer LM: a
// residual MLP-mixer over a fixed sliding context window with a tied output
// head. Every dense projection inside the trunk is a qmatmul, so the low-bit
// mode exercises quantized GEMM in every block.
//
//   context ids [N, W] -> embed -> flatten [N, W*H] -> in-proj -> depth x
//   (h += fc2(act(fc1(norm(h))))) -> final norm -> logits = z * embed^T
//
// The embedding and the tied head stay full precision.
#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <nlohmann/json.hpp>
#include <numeric>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "qarl/graph.hpp"
#include "qarl/quantsim.hpp"
#include "qarl/rng.hpp"
#include "qarl/tensor.hpp"

namespace qarl {

inline constexpr int kPad = 0;
inline constexpr int kEos = 1;
inline constexpr int kSep = 2;
inline constexpr int kFirstSymbol = 3;

struct PolicyConfig {
  int vocab_size = 16;
  int context_window = 16;
  int hidden_dim = 32;
  int depth = 2;
  int ffn_multiplier = 2;
  Nonlinearity nonlinearity = Nonlinearity::gelu;
  std::uint64_t init_seed = 0;

  void validate() const {
    if (vocab_size <= kFirstSymbol || vocab_size > 64) throw std::invalid_argument("vocab_size must be in (3, 64]");
    if (context_window < 1) throw std::invalid_argument("context_window must be positive");
    if (hidden_dim < 1 || depth < 0 || ffn_multiplier < 1) throw std::invalid_argument("invalid policy dimensions");
  }

  nlohmann::json to_json() const {
    return {{"vocab_size", vocab_size},     {"context_window", context_window},
            {"hidden_dim", hidden_dim},     {"depth", depth},
            {"ffn_multiplier", ffn_multiplier}, {"nonlinearity", to_string(nonlinearity)},
            {"init_seed", init_seed}};
  }
  static PolicyConfig from_json(const nlohmann::json& j) {
    PolicyConfig c;
    c.vocab_size = j.at("vocab_size").get<int>();
    c.context_window = j.at("context_window").get<int>();
    c.hidden_dim = j.at("hidden_dim").get<int>();
    c.depth = j.at("depth").get<int>();
    c.ffn_multiplier = j.at("ffn_multiplier").get<int>();
    c.nonlinearity = parse_nonlinearity(j.at("nonlinearity").get<std::string>());
    c.init_seed = j.at("init_seed").get<std::uint64_t>();
    return c;
  }
  bool operator==(const PolicyConfig&) const = default;
};

/// Master weights. Values are kept representable in 32-bit floats.
struct Params {
  std::map<std::string, Tensor> tensors;
  std::uint64_t version = 0;  // optimizer updates applied

  const Tensor& at(const std::string& name) const { return tensors.at(name); }
  bool operator==(const Params&) const = default;
};

inline void round_to_f32(Tensor& t) {
  for (double& v : t.data) v = static_cast<double>(static_cast<float>(v));
}

/// Weights as the sampler sees them: published low-bit tensors for every
/// qmatmul parameter plus the remaining dense parameters. A full-precision
/// snapshot has no spec and carries every parameter densely.
struct LowBitSnapshot {
  std::map<std::string, QuantizedTensor> quantized;
  std::map<std::string, Tensor> dense;
  std::optional<QuantSpec> spec;
  std::uint64_t version = 0;

  PrecisionMode mode() const { return spec ? PrecisionMode::lowbit(*spec) : PrecisionMode::full(); }
  bool operator==(const LowBitSnapshot&) const = default;
};

struct DecodeConfig {
  double temperature = 1.0;
  double top_p = 1.0;
  int max_new_tokens = 16;
  bool greedy = false;
  std::uint64_t stream = 0;

  void validate() const {
    if (!(temperature > 0.0)) throw std::invalid_argument("temperature must be positive");
    if (!(top_p > 0.0 && top_p <= 1.0)) throw std::invalid_argument("top_p must be in (0, 1]");
    if (max_new_tokens < 1) throw std::invalid_argument("max_new_tokens must be positive");
  }
};

/// Injected sampler-side logit perturbation standing in for residual
/// kernel-level differences between engines. Deterministic per input.
struct KernelNoise {
  double eta = 0.0;
  std::uint64_t seed = 0;
};

struct SampledResponse {
  std::vector<int> tokens;
  std::vector<double> logprobs;  // under the sampling distribution actually used
};

/// Right-aligned window of the last W tokens, left padded.
inline void write_context(std::span<const int> history, int window, std::span<int> out) {
  const std::size_t w = static_cast<std::size_t>(window);
  const std::size_t take = std::min(w, history.size());
  std::fill(out.begin(), out.end(), kPad);
  std::copy(history.end() - static_cast<std::ptrdiff_t>(take), history.end(), out.begin() + static_cast<std::ptrdiff_t>(w - take));
}

/// Teacher-forced rows: one context per response token.
struct TokenRows {
  std::vector<int> contexts;  // [rows * W]
  std::vector<int> targets;   // [rows]
  std::size_t rows() const { return targets.size(); }

  void append(std::span<const int> prompt, std::span<const int> response, int window) {
    std::vector<int> history(prompt.begin(), prompt.end());
    history.reserve(prompt.size() + response.size());
    for (int tok : response) {
      const std::size_t off = contexts.size();
      contexts.resize(off + static_cast<std::size_t>(window));
      write_context(history, window, std::span<int>(contexts).subspan(off));
      targets.push_back(tok);
      history.push_back(tok);
    }
  }
};

class Policy {
 public:
  explicit Policy(PolicyConfig cfg) : cfg_(cfg) {
    cfg_.validate();
    build();
  }

  const PolicyConfig& config() const { return cfg_; }
  const Expr& graph() const { return expr_; }
  NodeId logits_node() const { return logits_; }
  NodeId logprobs_node() const { return logprobs_; }

  /// Shapes of every parameter.
  std::map<std::string, std::vector<std::size_t>> parameter_shapes() const {
    const std::size_t h = static_cast<std::size_t>(cfg_.hidden_dim);
    const std::size_t f = h * static_cast<std::size_t>(cfg_.ffn_multiplier);
    const std::size_t v = static_cast<std::size_t>(cfg_.vocab_size);
    const std::size_t w = static_cast<std::size_t>(cfg_.context_window);
    std::map<std::string, std::vector<std::size_t>> s;
    s["embed"] = {v, h};
    s["in.weight"] = {h, w * h};
    s["in.bias"] = {h};
    for (int b = 0; b < cfg_.depth; ++b) {
      const std::string p = "block" + std::to_string(b) + ".";
      s[p + "norm.gain"] = {h};
      s[p + "norm.bias"] = {h};
      s[p + "fc1.weight"] = {f, h};
      s[p + "fc1.bias"] = {f};
      s[p + "fc2.weight"] = {h, f};
      s[p + "fc2.bias"] = {h};
    }
    s["final_norm.gain"] = {h};
    s["final_norm.bias"] = {h};
    return s;
  }

  /// Names of the parameters consumed by qmatmul (the ones published low-bit).
  std::vector<std::string> quantized_parameters() const { return expr_.quantized_parameters(); }

  /// Deterministic scaled-uniform initialization.
  Params init(std::uint64_t seed) const {
    Params p;
    for (const auto& [name, shape] : parameter_shapes()) {
      Tensor t(shape);
      Rng rng(derive_seed({seed, fnv1a(name)}));
      if (name.ends_with(".gain")) {
        std::fill(t.data.begin(), t.data.end(), 1.0);
      } else if (name.ends_with(".bias")) {
        // zero
      } else {
        const double bound = name == "embed" ? 0.05 : 1.0 / std::sqrt(static_cast<double>(shape[1]));
        for (double& v : t.data) v = rng.uniform(-bound, bound);
      }
      round_to_f32(t);
      p.tensors.emplace(name, std::move(t));
    }
    return p;
  }

  /// Published view of the learner weights: qmatmul weights quantized with the
  /// same routine the learner's low-bit forward uses, the rest copied densely.
  LowBitSnapshot publish_lowbit(const Params& params, const QuantSpec& spec) const {
    LowBitSnapshot s;
    s.spec = spec;
    s.version = params.version;
    const auto qnames = quantized_parameters();
    for (const auto& [name, t] : params.tensors) {
      if (std::find(qnames.begin(), qnames.end(), name) != qnames.end())
        s.quantized.emplace(name, quantize(t, spec.weight_scheme()));
      else
        s.dense.emplace(name, t);
    }
    return s;
  }

  LowBitSnapshot publish_full(const Params& params) const {
    LowBitSnapshot s;
    s.version = params.version;
    s.dense = params.tensors;
    return s;
  }

  LowBitSnapshot publish(const Params& params, const PrecisionMode& mode) const {
    return mode.is_lowbit() ? publish_lowbit(params, *mode.spec) : publish_full(params);
  }

  Bindings bindings(const Params& params) const {
    Bindings b;
    b.bind_all(params.tensors);
    return b;
  }
  Bindings bindings(const LowBitSnapshot& snap) const {
    Bindings b;
    b.bind_all(snap.dense);
    for (const auto& [name, q] : snap.quantized) b.bind_quantized(name, q);
    return b;
  }

  /// Forward pass over teacher-forced rows. Output node: per-row log-prob of the target.
  Tape forward_rows(Bindings b, const TokenRows& rows, const PrecisionMode& mode) const {
    b.bind_indices("context", rows.contexts);
    b.bind_indices("target", rows.targets);
    return forward(expr_, b, mode);
  }

  /// log pi(o_t | q, o_<t) for each response token, logits divided by temperature.
  std::vector<double> sequence_logprobs(const Params& params, std::span<const int> prompt, std::span<const int> response,
                                        const PrecisionMode& mode, double temperature = 1.0) const {
    return sequence_logprobs(with_temperature(bindings(params), temperature), prompt, response, mode);
  }
  std::vector<double> sequence_logprobs(const LowBitSnapshot& snap, std::span<const int> prompt,
                                        std::span<const int> response, double temperature = 1.0) const {
    return sequence_logprobs(with_temperature(bindings(snap), temperature), prompt, response, snap.mode());
  }

  static Bindings with_temperature(Bindings b, double temperature) {
    if (!(temperature > 0.0)) throw std::invalid_argument("temperature must be positive");
    if (temperature != 1.0) b.set_scalar("inv_temperature", 1.0 / temperature);
    return b;
  }

  /// Full next-token log-distributions for a set of contexts, [N, V].
  Tensor next_token_logprobs(Bindings b, const std::vector<int>& contexts, const PrecisionMode& mode) const {
    TokenRows rows;
    rows.contexts = contexts;
    rows.targets.assign(contexts.size() / static_cast<std::size_t>(cfg_.context_window), 0);
    return forward_rows(std::move(b), rows, mode).value(logprobs_);
  }

  /// Batched ancestral sampling from a snapshot; one rng stream per prompt.
  /// Each row of the batched forward depends only on its own context, so the
  /// result for a prompt does not depend on what else is in the batch.
  std::vector<SampledResponse> sample_batch(const LowBitSnapshot& snap, const std::vector<std::vector<int>>& prompts,
                                            const DecodeConfig& dc, std::vector<Rng>& rngs,
                                            const KernelNoise& noise = {}) const {
    dc.validate();
    if (rngs.size() != prompts.size()) throw std::invalid_argument("one rng stream per prompt required");
    const std::size_t w = static_cast<std::size_t>(cfg_.context_window);
    const std::size_t v = static_cast<std::size_t>(cfg_.vocab_size);
    for (const auto& p : prompts) {
      if (p.empty()) throw std::invalid_argument("empty prompt");
      for (int t : p)
        if (t < 0 || t >= cfg_.vocab_size) throw std::out_of_range("prompt token out of vocabulary");
    }
    std::vector<SampledResponse> out(prompts.size());
    std::vector<std::vector<int>> history(prompts);
    std::vector<std::size_t> active(prompts.size());
    std::iota(active.begin(), active.end(), std::size_t{0});
    const Bindings base = bindings(snap);
    const PrecisionMode mode = snap.mode();
    std::vector<double> row(v);
    std::vector<double> logp(v);
    for (int step = 0; step < dc.max_new_tokens && !active.empty(); ++step) {
      TokenRows rows;
      rows.contexts.resize(active.size() * w);
      rows.targets.assign(active.size(), 0);
      for (std::size_t a = 0; a < active.size(); ++a)
        write_context(history[active[a]], cfg_.context_window, std::span<int>(rows.contexts).subspan(a * w, w));
      const Tape tape = forward_rows(base, rows, mode);
      const Tensor& logits = tape.value(logits_);
      std::vector<std::size_t> still;
      for (std::size_t a = 0; a < active.size(); ++a) {
        const std::size_t i = active[a];
        sampling_distribution(logits.row(a), std::span<const int>(rows.contexts).subspan(a * w, w), dc, noise,
                              snap.version, row, logp);
        const int tok = dc.greedy ? argmax(logp) : draw(logp, dc.top_p, rngs[i]);
        double lp = logp[static_cast<std::size_t>(tok)];
        if (!dc.greedy && dc.top_p < 1.0) lp = nucleus_logprob(logp, dc.top_p, tok);
        out[i].tokens.push_back(tok);
        out[i].logprobs.push_back(lp);
        history[i].push_back(tok);
        if (tok != kEos) still.push_back(i);
      }
      active.swap(still);
    }
    return out;
  }

  SampledResponse sample(const LowBitSnapshot& snap, const std::vector<int>& prompt, const DecodeConfig& dc, Rng& rng,
                         const KernelNoise& noise = {}) const {
    std::vector<Rng> rngs{rng};
    auto r = sample_batch(snap, {prompt}, dc, rngs, noise);
    rng = rngs[0];
    return std::move(r[0]);
  }

  /// Sampling directly from learner weights under a precision mode; goes through
  /// the same publication step the harness uses.
  SampledResponse sample(const Params& params, const std::vector<int>& prompt, const DecodeConfig& dc,
                         const PrecisionMode& mode, Rng& rng) const {
    return sample(publish(params, mode), prompt, dc, rng);
  }

  /// Teacher-forced log-probs of a given response under the sampler's own
  /// distribution (temperature and kernel noise included, nucleus ignored).
  std::vector<double> sampler_logprobs(const LowBitSnapshot& snap, std::span<const int> prompt,
                                       std::span<const int> response, const DecodeConfig& dc,
                                       const KernelNoise& noise = {}) const {
    TokenRows rows;
    rows.append(prompt, response, cfg_.context_window);
    const std::size_t w = static_cast<std::size_t>(cfg_.context_window);
    const Tape tape = forward_rows(bindings(snap), rows, snap.mode());
    const Tensor& logits = tape.value(logits_);
    std::vector<double> row(static_cast<std::size_t>(cfg_.vocab_size));
    std::vector<double> logp(row.size());
    std::vector<double> out(rows.rows());
    for (std::size_t r = 0; r < rows.rows(); ++r) {
      sampling_distribution(logits.row(r), std::span<const int>(rows.contexts).subspan(r * w, w), dc, noise,
                            snap.version, row, logp);
      out[r] = logp[static_cast<std::size_t>(rows.targets[r])];
    }
    return out;
  }

  // -- checkpoints ---------------------------------------------------------

  /// "QCKP" | u32 format version | u32 header length | JSON header (policy
  /// config + params version) | u32 tensor count | per tensor: u32 name length,
  /// name, u32 rank, u32 dims, f32 values. Little endian.
  static void save_checkpoint(const std::filesystem::path& path, const PolicyConfig& cfg, const Params& params) {
    std::vector<std::uint8_t> out;
    for (char c : std::string("QCKP")) out.push_back(static_cast<std::uint8_t>(c));
    wire::put_u32(out, 1);
    const std::string header = nlohmann::json{{"policy", cfg.to_json()}, {"version", params.version}}.dump();
    wire::put_u32(out, static_cast<std::uint32_t>(header.size()));
    out.insert(out.end(), header.begin(), header.end());
    wire::put_u32(out, static_cast<std::uint32_t>(params.tensors.size()));
    for (const auto& [name, t] : params.tensors) put_named_f32(out, name, t);
    write_file(path, out);
  }

  static std::pair<PolicyConfig, Params> load_checkpoint(const std::filesystem::path& path) {
    const auto blob = read_file(path);
    wire::Reader in(blob);
    const auto magic = in.bytes(4);
    if (std::string(magic.begin(), magic.end()) != "QCKP") throw std::runtime_error("not a checkpoint file");
    if (in.u32() != 1) throw std::runtime_error("unsupported checkpoint version");
    const auto hdr = in.bytes(in.u32());
    const auto j = nlohmann::json::parse(std::string(hdr.begin(), hdr.end()));
    PolicyConfig cfg = PolicyConfig::from_json(j.at("policy"));
    Params p;
    p.version = j.at("version").get<std::uint64_t>();
    const std::uint32_t n = in.u32();
    for (std::uint32_t i = 0; i < n; ++i) {
      auto [name, t] = get_named_f32(in);
      p.tensors.emplace(std::move(name), std::move(t));
    }
    return {cfg, p};
  }

  /// "QSNP" | u32 format version | u64 snapshot version | u32 spec length |
  /// spec name ("" for full precision) | u32 quantized count | per tensor:
  /// u32 name length, name, quantized tensor blob | u32 dense count | dense
  /// tensors as in checkpoints.
  static std::vector<std::uint8_t> serialize_snapshot(const LowBitSnapshot& s) {
    std::vector<std::uint8_t> out;
    for (char c : std::string("QSNP")) out.push_back(static_cast<std::uint8_t>(c));
    wire::put_u32(out, 1);
    wire::put_u64(out, s.version);
    const std::string spec = s.spec ? s.spec->name() : "";
    if (s.spec && !(parse_quant_spec(spec) == *s.spec))
      throw std::invalid_argument("snapshot spec has no named wire encoding: " + spec);
    put_string(out, spec);
    wire::put_u32(out, static_cast<std::uint32_t>(s.quantized.size()));
    for (const auto& [name, q] : s.quantized) {
      put_string(out, name);
      serialize_into(q, out);
    }
    wire::put_u32(out, static_cast<std::uint32_t>(s.dense.size()));
    for (const auto& [name, t] : s.dense) put_named_f32(out, name, t);
    return out;
  }

  static LowBitSnapshot deserialize_snapshot(std::span<const std::uint8_t> blob) {
    wire::Reader in(blob);
    const auto magic = in.bytes(4);
    if (std::string(magic.begin(), magic.end()) != "QSNP") throw std::runtime_error("not a snapshot blob");
    if (in.u32() != 1) throw std::runtime_error("unsupported snapshot version");
    LowBitSnapshot s;
    s.version = in.u64();
    const std::string spec = get_string(in);
    if (!spec.empty()) s.spec = parse_quant_spec(spec);
    const std::uint32_t nq = in.u32();
    for (std::uint32_t i = 0; i < nq; ++i) {
      std::string name = get_string(in);
      s.quantized.emplace(std::move(name), deserialize_from(in));
    }
    const std::uint32_t nd = in.u32();
    for (std::uint32_t i = 0; i < nd; ++i) {
      auto [name, t] = get_named_f32(in);
      s.dense.emplace(std::move(name), std::move(t));
    }
    if (!in.done()) throw std::runtime_error("trailing bytes after snapshot");
    return s;
  }

 private:
  void build() {
    const std::size_t h = static_cast<std::size_t>(cfg_.hidden_dim);
    const std::size_t w = static_cast<std::size_t>(cfg_.context_window);
    Expr& e = expr_;
    const NodeId embed = e.parameter("embed");
    NodeId x = e.reshape(e.gather_rows(embed, "context"), w * h);
    x = e.add(e.qmatmul(x, e.parameter("in.weight")), e.parameter("in.bias"));
    for (int b = 0; b < cfg_.depth; ++b) {
      const std::string p = "block" + std::to_string(b) + ".";
      NodeId y = e.layer_norm(x, e.parameter(p + "norm.gain"), e.parameter(p + "norm.bias"));
      y = e.add(e.qmatmul(y, e.parameter(p + "fc1.weight")), e.parameter(p + "fc1.bias"));
      y = e.nonlinearity(y, cfg_.nonlinearity);
      y = e.add(e.qmatmul(y, e.parameter(p + "fc2.weight")), e.parameter(p + "fc2.bias"));
      x = e.add(x, y);
    }
    x = e.layer_norm(x, e.parameter("final_norm.gain"), e.parameter("final_norm.bias"));
    logits_ = e.scale(e.matmul(x, embed), 1.0, "inv_temperature");
    logprobs_ = e.log_softmax(logits_);
    e.set_output(e.pick(logprobs_, "target"));
  }

  std::vector<double> sequence_logprobs(const Bindings& b, std::span<const int> prompt, std::span<const int> response,
                                        const PrecisionMode& mode) const {
    for (int t : response)
      if (t < 0 || t >= cfg_.vocab_size) throw std::out_of_range("response token out of vocabulary");
    TokenRows rows;
    rows.append(prompt, response, cfg_.context_window);
    return forward_rows(b, rows, mode).output().data;
  }

  void sampling_distribution(std::span<const double> logits, std::span<const int> context, const DecodeConfig& dc,
                             const KernelNoise& noise, std::uint64_t version, std::vector<double>& row,
                             std::vector<double>& logp) const {
    const double inv_t = 1.0 / dc.temperature;
    std::uint64_t ctx_hash = 0;
    if (noise.eta != 0.0) {
      ctx_hash = derive_seed({noise.seed, version});
      for (int t : context) ctx_hash = splitmix64(ctx_hash ^ static_cast<std::uint64_t>(t + 1));
    }
    for (std::size_t j = 0; j < row.size(); ++j) {
      row[j] = logits[j] * inv_t;
      if (noise.eta != 0.0) row[j] += noise.eta * hashed_normal(derive_seed({ctx_hash, j}));
    }
    log_softmax_row(row, logp);
  }

  static int argmax(const std::vector<double>& logp) {
    return static_cast<int>(std::max_element(logp.begin(), logp.end()) - logp.begin());
  }

  static std::vector<std::size_t> nucleus(const std::vector<double>& logp, double top_p) {
    std::vector<std::size_t> order(logp.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return logp[a] > logp[b]; });
    double mass = 0.0;
    std::size_t keep = 0;
    while (keep < order.size()) {
      mass += std::exp(logp[order[keep]]);
      ++keep;
      if (mass >= top_p) break;
    }
    order.resize(keep);
    return order;
  }

  double nucleus_logprob(const std::vector<double>& logp, double top_p, int tok) const {
    const auto keep = nucleus(logp, top_p);
    double mass = 0.0;
    for (auto k : keep) mass += std::exp(logp[k]);
    return logp[static_cast<std::size_t>(tok)] - std::log(mass);
  }

  int draw(const std::vector<double>& logp, double top_p, Rng& rng) const {
    std::vector<std::size_t> order;
    if (top_p < 1.0) {
      order = nucleus(logp, top_p);
    } else {
      order.resize(logp.size());
      std::iota(order.begin(), order.end(), std::size_t{0});
    }
    double mass = 0.0;
    for (auto k : order) mass += std::exp(logp[k]);
    const double u = rng.uniform() * mass;
    double acc = 0.0;
    std::size_t last = order.front();
    for (auto k : order) {
      const double p = std::exp(logp[k]);
      if (p <= 0.0) continue;
      acc += p;
      last = k;
      if (u < acc) break;
    }
    return static_cast<int>(last);
  }

  static void put_string(std::vector<std::uint8_t>& out, const std::string& s) {
    wire::put_u32(out, static_cast<std::uint32_t>(s.size()));
    out.insert(out.end(), s.begin(), s.end());
  }
  static std::string get_string(wire::Reader& in) {
    const auto b = in.bytes(in.u32());
    return {b.begin(), b.end()};
  }
  static void put_named_f32(std::vector<std::uint8_t>& out, const std::string& name, const Tensor& t) {
    put_string(out, name);
    wire::put_u32(out, static_cast<std::uint32_t>(t.shape.size()));
    for (auto d : t.shape) wire::put_u32(out, static_cast<std::uint32_t>(d));
    for (double v : t.data) wire::put_f32(out, static_cast<float>(v));
  }
  static std::pair<std::string, Tensor> get_named_f32(wire::Reader& in) {
    std::string name = get_string(in);
    const std::uint32_t rank = in.u32();
    if (rank > 8) throw std::runtime_error("implausible tensor rank");
    std::vector<std::size_t> shape;
    for (std::uint32_t i = 0; i < rank; ++i) shape.push_back(in.u32());
    Tensor t(shape);
    for (double& v : t.data) v = static_cast<double>(in.f32());
    return {std::move(name), std::move(t)};
  }
  static void write_file(const std::filesystem::path& path, const std::vector<std::uint8_t>& data) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot write " + path.string());
    f.write(reinterpret_cast<const char*>(data.data()), static_cast<std::streamsize>(data.size()));
  }
  static std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot read " + path.string());
    return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
  }

  PolicyConfig cfg_;
  Expr expr_;
  NodeId logits_ = 0;
  NodeId logprobs_ = 0;
};

}  // namespace qarl
