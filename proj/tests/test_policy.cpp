// SPDX-License-Identifier: Apache-2.0
#include <catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>
#include <set>

#include "qarl/policy.hpp"

using namespace qarl;

namespace {

PolicyConfig small_config() {
  PolicyConfig c;
  c.vocab_size = 12;
  c.context_window = 8;
  c.hidden_dim = 16;
  c.depth = 2;
  return c;
}

// Push the weights away from the near-uniform init so distributions are peaked.
Params trained_like(const Policy& pol, std::uint64_t seed) {
  Params p = pol.init(seed);
  Rng rng(seed + 100);
  for (auto& [name, t] : p.tensors) {
    if (name.ends_with(".gain") || name.ends_with(".bias")) continue;
    const double boost = name == "embed" ? 30.0 : 3.0;
    for (double& v : t.data) v = v * boost + 0.02 * rng.normal();
    round_to_f32(t);
  }
  return p;
}

std::vector<int> random_context(Rng& rng, const PolicyConfig& c) {
  std::vector<int> ctx(static_cast<std::size_t>(c.context_window));
  for (int& t : ctx) t = static_cast<int>(rng.below(static_cast<std::uint64_t>(c.vocab_size)));
  return ctx;
}

double entropy_row(std::span<const double> logp) {
  double h = 0.0;
  for (double l : logp) h -= std::exp(l) * l;
  return h;
}

}  // namespace

TEST_CASE("initialization") {
  Policy pol(small_config());
  CHECK(pol.init(1) == pol.init(1));
  CHECK_FALSE(pol.init(1) == pol.init(2));
  for (const auto& [name, t] : pol.init(3).tensors)
    for (double v : t.data) REQUIRE(static_cast<double>(static_cast<float>(v)) == v);

  SECTION("near-uniform initial distributions") {
    PolicyConfig c;  // default desk-scale size
    Policy big(c);
    Params p = big.init(5);
    Rng rng(6);
    std::vector<int> contexts;
    for (int i = 0; i < 64; ++i) {
      auto ctx = random_context(rng, c);
      contexts.insert(contexts.end(), ctx.begin(), ctx.end());
    }
    Tensor lp = big.next_token_logprobs(big.bindings(p), contexts, PrecisionMode::full());
    const double target = std::log(static_cast<double>(c.vocab_size));
    for (std::size_t r = 0; r < lp.rows(); ++r) REQUIRE(std::fabs(entropy_row(lp.row(r)) - target) <= 0.01 * target);
  }
}

TEST_CASE("config validation and serialization") {
  PolicyConfig c = small_config();
  CHECK(PolicyConfig::from_json(c.to_json()) == c);
  c.vocab_size = 65;
  CHECK_THROWS(c.validate());
  c.vocab_size = 3;
  CHECK_THROWS(Policy(c));
}

TEST_CASE("sampling") {
  Policy pol(small_config());
  Params p = trained_like(pol, 7);
  const std::vector<int> prompt{3, 4, 5, kSep};
  DecodeConfig dc;
  dc.max_new_tokens = 10;

  SECTION("greedy emits the argmax at every step") {
    DecodeConfig g = dc;
    g.greedy = true;
    Rng rng(1);
    auto r = pol.sample(p, prompt, g, PrecisionMode::full(), rng);
    std::vector<int> history = prompt;
    for (int tok : r.tokens) {
      std::vector<int> ctx(8);
      write_context(history, 8, ctx);
      Tensor lp = pol.next_token_logprobs(pol.bindings(p), ctx, PrecisionMode::full());
      auto row = lp.row(0);
      const int arg = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
      REQUIRE(tok == arg);
      history.push_back(tok);
    }
  }
  SECTION("same stream gives the same response") {
    Rng a(9), b(9);
    const auto mode = PrecisionMode::lowbit(QuantSpec::w4a16());
    auto ra = pol.sample(p, prompt, dc, mode, a);
    auto rb = pol.sample(p, prompt, dc, mode, b);
    CHECK(ra.tokens == rb.tokens);
    CHECK(ra.logprobs == rb.logprobs);
  }
  SECTION("stops at EOS or the token budget") {
    Rng rng(11);
    for (int i = 0; i < 30; ++i) {
      auto r = pol.sample(p, prompt, dc, PrecisionMode::full(), rng);
      REQUIRE(!r.tokens.empty());
      REQUIRE(r.tokens.size() <= 10);
      for (std::size_t t = 0; t + 1 < r.tokens.size(); ++t) REQUIRE(r.tokens[t] != kEos);
      if (r.tokens.size() < 10) REQUIRE(r.tokens.back() == kEos);
    }
  }
  SECTION("int4 sampler log-probs differ from the full-precision ones") {
    const auto snap = pol.publish_lowbit(p, QuantSpec::w4a16());
    Rng rng(12);
    auto r = pol.sample(snap, prompt, dc, rng);
    auto full = pol.sequence_logprobs(p, prompt, r.tokens, PrecisionMode::full());
    double mass = 0.0;
    for (std::size_t t = 0; t < full.size(); ++t) mass += std::fabs(full[t] - r.logprobs[t]);
    CHECK(mass > 0.0);
  }
  SECTION("nucleus sampling stays inside the nucleus") {
    DecodeConfig nd = dc;
    nd.top_p = 0.5;
    nd.max_new_tokens = 1;
    Rng rng(13);
    std::vector<int> ctx(8);
    write_context(prompt, 8, ctx);
    Tensor lp = pol.next_token_logprobs(pol.bindings(p), ctx, PrecisionMode::full());
    std::vector<std::pair<double, int>> order;
    for (int j = 0; j < 12; ++j) order.emplace_back(-lp.at(0, static_cast<std::size_t>(j)), j);
    std::sort(order.begin(), order.end());
    std::set<int> nucleus;
    double mass = 0.0;
    for (auto [neg, j] : order) {
      nucleus.insert(j);
      mass += std::exp(-neg);
      if (mass >= 0.5) break;
    }
    const auto snap = pol.publish_full(p);
    for (int i = 0; i < 200; ++i) {
      auto r = pol.sample(snap, prompt, nd, rng);
      REQUIRE(nucleus.count(r.tokens[0]) == 1);
      REQUIRE(r.logprobs[0] <= 0.0);
    }
  }
  SECTION("invalid inputs") {
    Rng rng(1);
    CHECK_THROWS(pol.sample(p, {}, dc, PrecisionMode::full(), rng));
    CHECK_THROWS(pol.sample(p, {3, 99}, dc, PrecisionMode::full(), rng));
    DecodeConfig bad = dc;
    bad.temperature = 0.0;
    CHECK_THROWS(pol.sample(p, prompt, bad, PrecisionMode::full(), rng));
    CHECK_THROWS(pol.sequence_logprobs(p, prompt, std::vector<int>{3, 12}, PrecisionMode::full()));
  }
}

TEST_CASE("batched sampling does not depend on batch composition") {
  Policy pol(small_config());
  Params p = trained_like(pol, 15);
  const auto snap = pol.publish_lowbit(p, QuantSpec::w4a8());
  DecodeConfig dc;
  dc.max_new_tokens = 8;
  const std::vector<std::vector<int>> prompts{{3, 4, kSep}, {5, 6, 7, 8, kSep}, {9, kSep}};
  std::vector<Rng> rngs{Rng(1), Rng(2), Rng(3)};
  auto together = pol.sample_batch(snap, prompts, dc, rngs);
  for (std::size_t i = 0; i < prompts.size(); ++i) {
    Rng alone(i + 1);
    auto r = pol.sample(snap, prompts[i], dc, alone);
    CHECK(r.tokens == together[i].tokens);
    CHECK(r.logprobs == together[i].logprobs);
  }
}

TEST_CASE("sequence log-probs") {
  Policy pol(small_config());
  Params p = trained_like(pol, 17);
  const std::vector<int> prompt{3, 3, 4, kSep};
  SECTION("the sampler's own mode reproduces its recorded log-probs") {
    for (const auto& mode : {PrecisionMode::full(), PrecisionMode::lowbit(QuantSpec::w4a16())}) {
      const auto snap = pol.publish(p, mode);
      Rng rng(3);
      DecodeConfig dc;
      auto r = pol.sample(snap, prompt, dc, rng);
      CHECK(pol.sequence_logprobs(snap, prompt, r.tokens) == r.logprobs);
      CHECK(pol.sampler_logprobs(snap, prompt, r.tokens, dc) == r.logprobs);
    }
  }
  SECTION("single token response") {
    CHECK(pol.sequence_logprobs(p, prompt, std::vector<int>{5}, PrecisionMode::full()).size() == 1);
  }
  SECTION("per-step distributions normalize in both modes") {
    Rng rng(4);
    for (const auto& mode : {PrecisionMode::full(), PrecisionMode::lowbit(QuantSpec::w4a8())}) {
      auto ctx = random_context(rng, pol.config());
      Tensor lp = pol.next_token_logprobs(pol.bindings(p), ctx, mode);
      double s = 0.0;
      for (double v : lp.row(0)) s += std::exp(v);
      CHECK(std::fabs(s - 1.0) <= 1e-6);
    }
  }
}

TEST_CASE("low-bit publication aligns sampler and learner") {
  Policy pol(small_config());
  Params p = trained_like(pol, 19);
  for (const auto& spec : {QuantSpec::w4a16(), QuantSpec::w8a8(), QuantSpec::w4a8(), QuantSpec::fp8_w8a8(), QuantSpec::fp4_w4a16()}) {
    INFO(spec.name());
    const auto snap = pol.publish_lowbit(p, spec);
    const auto mode = PrecisionMode::lowbit(spec);
    Rng rng(5);
    std::vector<int> contexts;
    for (int i = 0; i < 16; ++i) {
      auto c = random_context(rng, pol.config());
      contexts.insert(contexts.end(), c.begin(), c.end());
    }
    CHECK(pol.next_token_logprobs(pol.bindings(snap), contexts, mode) == pol.next_token_logprobs(pol.bindings(p), contexts, mode));

    // The learner materializes exactly the published tensors.
    TokenRows rows;
    rows.append(std::vector<int>{3, kSep}, std::vector<int>{4, 5}, pol.config().context_window);
    auto tape = pol.forward_rows(pol.bindings(p), rows, mode);
    CHECK(tape.materialized_weights() == snap.quantized);

    // Sampled log-probs match the learner's low-bit forward bit for bit.
    for (double temp : {1.0, 0.7}) {
      DecodeConfig dc;
      dc.temperature = temp;
      Rng srng(6);
      auto r = pol.sample(snap, {3, 4, kSep}, dc, srng);
      CHECK(pol.sequence_logprobs(p, std::vector<int>{3, 4, kSep}, r.tokens, mode, temp) == r.logprobs);
    }
  }
  SECTION("publication is a pure function of the weights") {
    CHECK(pol.publish_lowbit(p, QuantSpec::w4a16()) == pol.publish_lowbit(p, QuantSpec::w4a16()));
    Params q = p;
    q.version = 1;
    CHECK(pol.publish_lowbit(q, QuantSpec::w4a16()).version == 1);
  }
}

TEST_CASE("kernel noise perturbs only the sampler") {
  Policy pol(small_config());
  Params p = trained_like(pol, 21);
  const auto snap = pol.publish_lowbit(p, QuantSpec::w4a16());
  const std::vector<int> prompt{4, 4, kSep};
  const std::vector<int> resp{4, 4, kEos};
  DecodeConfig dc;
  KernelNoise noise{1e-3, 77};
  auto clean = pol.sampler_logprobs(snap, prompt, resp, dc);
  auto noisy = pol.sampler_logprobs(snap, prompt, resp, dc, noise);
  CHECK(noisy == pol.sampler_logprobs(snap, prompt, resp, dc, noise));
  CHECK_FALSE(noisy == clean);
  for (std::size_t t = 0; t < clean.size(); ++t) CHECK(std::fabs(noisy[t] - clean[t]) < 0.05);
  CHECK(clean == pol.sequence_logprobs(p, prompt, resp, PrecisionMode::lowbit(QuantSpec::w4a16())));
}

TEST_CASE("checkpoints and snapshots round trip") {
  Policy pol(small_config());
  Params p = trained_like(pol, 23);
  p.version = 42;
  const auto dir = std::filesystem::temp_directory_path() / "qarl_policy_test";
  std::filesystem::create_directories(dir);
  Policy::save_checkpoint(dir / "ckpt.bin", pol.config(), p);
  auto [cfg, loaded] = Policy::load_checkpoint(dir / "ckpt.bin");
  CHECK(cfg == pol.config());
  CHECK(loaded == p);
  for (const auto& spec : {QuantSpec::w4a16(), QuantSpec::w8a8(), QuantSpec::fp8_w8a8(), QuantSpec::fp4_w4a16()}) {
    const auto snap = pol.publish_lowbit(p, spec);
    CHECK(Policy::deserialize_snapshot(Policy::serialize_snapshot(snap)) == snap);
  }
  const auto full = pol.publish_full(p);
  CHECK(Policy::deserialize_snapshot(Policy::serialize_snapshot(full)) == full);
  std::filesystem::remove_all(dir);
}
