// SPDX-License-Identifier: Apache-2.0
#include <catch_amalgamated.hpp>

#include <cmath>
#include <limits>

#include "qarl/quantsim.hpp"
#include "qarl/rng.hpp"

using namespace qarl;
using Catch::Approx;

namespace {

Tensor random_tensor(std::vector<std::size_t> shape, Rng& rng, double scale = 1.0) {
  Tensor t(std::move(shape));
  for (double& v : t.data) v = scale * rng.normal();
  return t;
}

QuantScheme scheme(Format f, Grouping g = Grouping::per_row, bool sym = true) { return {f, g, sym, std::nullopt}; }

QuantizedTensor scalar_q(Format f, std::uint8_t code, float s, std::int32_t z = 0) {
  QuantizedTensor q;
  q.format = f;
  q.shape = {1, 1};
  q.codes = {code};
  q.scales = {s};
  q.zero_points = {z};
  q.symmetric = z == 0;
  return q;
}

// |a - b| relative to the magnitude of the summed products.
double gemm_error(const Tensor& x, const Tensor& w, const Tensor& got) {
  const std::size_t n = x.rows(), k = x.cols(), o = w.rows();
  double worst = 0.0;
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < o; ++c) {
      double ref = 0.0, mag = 0.0;
      for (std::size_t j = 0; j < k; ++j) {
        ref += x.at(r, j) * w.at(c, j);
        mag += std::fabs(x.at(r, j) * w.at(c, j));
      }
      worst = std::max(worst, std::fabs(got.at(r, c) - ref) / std::max(mag, 1e-300));
    }
  return worst;
}

}  // namespace

TEST_CASE("code ranges and alpha") {
  CHECK(q_min(Format::int8) == -128);
  CHECK(q_max(Format::int8) == 127);
  CHECK(q_min(Format::int4) == -8);
  CHECK(q_max(Format::int4) == 7);
  CHECK(QuantSpec::fp8_w8a8().alpha() == 448.0);
  CHECK(QuantSpec::fp4_w4a16().alpha() == 6.0);
  CHECK(QuantSpec::w4a16().alpha() == 0.0);
}

TEST_CASE("spec names round trip through the parser") {
  for (const auto& s : {QuantSpec::w4a16(), QuantSpec::w8a8(), QuantSpec::w4a8(), QuantSpec::fp8_w8a8(), QuantSpec::fp4_w4a16()})
    CHECK(parse_quant_spec(s.name()) == s);
  CHECK_THROWS(parse_quant_spec("w3a3"));
}

TEST_CASE("int_qparams") {
  SECTION("symmetric int8 per tensor") {
    Tensor w({3}, std::vector<double>{-1.27, 0.0, 1.27});
    QuantSpec spec = QuantSpec::w8a8();
    spec.weight_granularity = WeightGranularity::per_tensor;
    auto p = int_qparams(w, spec);
    REQUIRE(p.scales.size() == 1);
    CHECK(p.scales[0] == Approx(0.01).epsilon(1e-6));
    CHECK(p.zero_points[0] == 0);
    // The float scale never lets the extremes saturate.
    auto tq = quantize_tracked(w, spec.weight_scheme());
    CHECK(tq.tensor.int_code(2) == 127);
    CHECK(tq.saturated == std::vector<std::uint8_t>{0, 0, 0});
  }
  SECTION("all zeros fall back to unit scale") {
    Tensor w({2, 3});
    auto p = int_qparams(w, QuantSpec::w8a8());
    CHECK(p.scales == std::vector<float>{1.0f, 1.0f});
    CHECK(p.zero_points == std::vector<std::int32_t>{0, 0});
  }
  SECTION("asymmetric int4") {
    Tensor w({2}, std::vector<double>{0.0, 6.0});
    auto p = compute_group_params(w, scheme(Format::int4, Grouping::per_tensor, false));
    CHECK(p.scales[0] == Approx(0.4).epsilon(1e-6));
    CHECK(p.zero_points[0] == -8);
  }
  SECTION("per channel needs rank 2") {
    Tensor w({4}, 1.0);
    CHECK_THROWS_AS(int_qparams(w, QuantSpec::w8a8()), std::invalid_argument);
  }
}

TEST_CASE("quantize examples") {
  SECTION("round half to even") {
    CHECK(round_to_integer(2.5) == 2.0);
    CHECK(round_to_integer(3.5) == 4.0);
    CHECK(round_to_integer(-2.5) == -2.0);
    QuantScheme s = scheme(Format::int8, Grouping::per_tensor);
    s.fixed_scale = 0.1;
    CHECK(quantize(Tensor({1}, std::vector<double>{0.25}), s).int_code(0) == 2);
    s.fixed_scale = 0.5;  // exact in float: 1.25 / 0.5 is an exact tie
    CHECK(quantize(Tensor({1}, std::vector<double>{1.25}), s).int_code(0) == 2);
    CHECK(quantize(Tensor({1}, std::vector<double>{1.75}), s).int_code(0) == 4);
  }
  SECTION("zero maps to code zero in every format") {
    for (auto f : {Format::int8, Format::int4, Format::fp8_e4m3, Format::fp4_e2m1}) {
      Tensor w({1, 3}, std::vector<double>{0.0, 1.0, -0.5});
      auto q = quantize(w, scheme(f));
      CHECK(dequantize(q).data[0] == 0.0);
      CHECK(q.codes[0] == 0);
    }
  }
  SECTION("fp4 clamps beyond alpha") {
    QuantScheme s = scheme(Format::fp4_e2m1, Grouping::per_tensor);
    s.fixed_scale = 1.0;
    auto tq = quantize_tracked(Tensor({1}, std::vector<double>{7.0}), s);
    CHECK(dequantize(tq.tensor).data[0] == 6.0);
    CHECK(tq.saturated[0] == 1);
  }
  SECTION("non-finite input is rejected") {
    Tensor w({1, 2}, std::vector<double>{1.0, std::numeric_limits<double>::quiet_NaN()});
    CHECK_THROWS_AS(quantize(w, QuantSpec::w4a16()), std::invalid_argument);
    w.data[1] = std::numeric_limits<double>::infinity();
    CHECK_THROWS_AS(quantize(w, QuantSpec::w4a16()), std::invalid_argument);
  }
}

TEST_CASE("dequantize examples") {
  CHECK(dequantize(scalar_q(Format::int8, 2, 0.1f)).data[0] == Approx(0.2).epsilon(1e-7));
  CHECK(dequantize(scalar_q(Format::int8, 0, 0.1f)).data[0] == 0.0);
  auto neg = scalar_q(Format::int8, static_cast<std::uint8_t>(static_cast<std::int8_t>(-3)), 0.5f, 4);
  CHECK(dequantize(neg).data[0] == Approx(-3.5));
}

TEST_CASE("integer round trip stays within half a step") {
  Rng rng(11);
  for (auto f : {Format::int8, Format::int4}) {
    for (int trial = 0; trial < 50; ++trial) {
      Tensor w = random_tensor({6, 9}, rng, 0.1 + trial);
      auto q = quantize(w, scheme(f));
      Tensor back = dequantize(q);
      for (std::size_t i = 0; i < w.size(); ++i) {
        const double s = q.scales[i / w.cols()];
        REQUIRE(std::fabs(w.data[i] - back.data[i]) <= s / 2 * (1 + 1e-12));
      }
    }
  }
}

TEST_CASE("cast_fpk") {
  CHECK(cast_fpk(2.6, Format::fp4_e2m1) == 3.0);
  CHECK(cast_fpk(0.0, Format::fp4_e2m1) == 0.0);
  CHECK(cast_fpk(-6.5, Format::fp4_e2m1) == -6.0);
  CHECK(cast_fpk(2.5, Format::fp4_e2m1) == 2.0);   // tie goes to the even pattern
  CHECK(cast_fpk(1.25, Format::fp4_e2m1) == 1.0);
  CHECK(cast_fpk(5.0, Format::fp4_e2m1) == 4.0);
  CHECK(cast_fpk(1e9, Format::fp8_e4m3) == 448.0);
  CHECK_THROWS(cast_fpk(std::numeric_limits<double>::quiet_NaN(), Format::fp8_e4m3));
  CHECK_THROWS(cast_fpk(1.0, Format::int8));

  SECTION("e2m1 grid") {
    CHECK(fp_magnitudes(Format::fp4_e2m1) == std::vector<double>{0, 0.5, 1, 1.5, 2, 3, 4, 6});
    CHECK(fp_magnitudes(Format::fp8_e4m3).size() == 127);
    CHECK(fp_magnitudes(Format::fp8_e4m3).back() == 448.0);
    CHECK(fp_magnitudes(Format::fp8_e4m3)[1] == std::ldexp(1.0, -9));
  }
  SECTION("e4m3 matches the frozen reference casts") {
    const std::vector<std::pair<double, double>> cases = {
#include "oracles/e4m3_cases.inc"
    };
    REQUIRE(cases.size() > 150);
    for (const auto& [x, y] : cases) {
      INFO("x = " << x);
      CHECK(cast_fpk(x, Format::fp8_e4m3) == y);
    }
  }
  SECTION("monotone") {
    for (auto f : {Format::fp8_e4m3, Format::fp4_e2m1}) {
      double prev = -std::numeric_limits<double>::infinity();
      for (double x = -500.0; x <= 500.0; x += 0.01) {
        const double c = cast_fpk(x, f);
        REQUIRE(c >= prev);
        prev = c;
      }
    }
  }
}

TEST_CASE("qgemm") {
  SECTION("scalar case") {
    auto x = scalar_q(Format::int8, 3, 0.1f);
    auto w = scalar_q(Format::int8, 4, 0.5f);
    CHECK(qgemm(x, w).data[0] == Approx(0.6).epsilon(1e-7));
  }
  SECTION("zero weights give a zero matrix") {
    Rng rng(3);
    auto xq = quantize(random_tensor({4, 5}, rng), scheme(Format::int8));
    auto wq = quantize(Tensor({3, 5}), scheme(Format::int8));
    CHECK(qgemm(xq, wq) == Tensor({4, 3}));
  }
  SECTION("matches the dequantized matmul in every format") {
    Rng rng(5);
    for (auto f : {Format::int8, Format::int4, Format::fp8_e4m3, Format::fp4_e2m1}) {
      for (int trial = 0; trial < 100; ++trial) {
        auto xq = quantize(random_tensor({8, 8}, rng), scheme(f));
        auto wq = quantize(random_tensor({8, 8}, rng), scheme(f));
        REQUIRE(gemm_error(dequantize(xq), dequantize(wq), qgemm(xq, wq)) <= 1e-6);
      }
    }
  }
  SECTION("asymmetric operands") {
    Rng rng(6);
    for (int trial = 0; trial < 20; ++trial) {
      Tensor x = random_tensor({5, 7}, rng);
      for (double& v : x.data) v += 0.7;
      auto xq = quantize(x, scheme(Format::int8, Grouping::per_row, false));
      auto wq = quantize(random_tensor({3, 7}, rng), scheme(Format::int4, Grouping::per_tensor, false));
      REQUIRE(gemm_error(dequantize(xq), dequantize(wq), qgemm(xq, wq)) <= 1e-6);
    }
  }
  SECTION("weight-only path") {
    Rng rng(8);
    Tensor x = random_tensor({4, 6}, rng);
    auto wq = quantize(random_tensor({5, 6}, rng), QuantSpec::w4a16());
    CHECK(qgemm(x, wq) == matmul_nt(x, dequantize(wq)));
  }
  SECTION("shape mismatch") {
    Rng rng(9);
    auto a = quantize(random_tensor({2, 3}, rng), scheme(Format::int8));
    auto b = quantize(random_tensor({2, 4}, rng), scheme(Format::int8));
    CHECK_THROWS_AS(qgemm(a, b), std::invalid_argument);
  }
}

TEST_CASE("fake_quant") {
  Rng rng(13);
  for (const auto& spec : {QuantSpec::w4a16(), QuantSpec::w8a8(), QuantSpec::fp8_w8a8(), QuantSpec::fp4_w4a16()}) {
    Tensor w = random_tensor({4, 8}, rng);
    Tensor fq = fake_quant(w, spec);
    CHECK(fq == dequantize(quantize(w, spec)));
    CHECK(fake_quant(fq, spec) == fq);
  }
  SECTION("grid values are returned unchanged") {
    Tensor w({2, 4}, std::vector<double>{-8, -3, 0, 7, 1, 2, -1, 4});
    for (double& v : w.data) v *= 0.25;
    QuantScheme s = scheme(Format::int4, Grouping::per_tensor);
    s.fixed_scale = 0.25;
    CHECK(fake_quant(w, s) == w);
  }
}

TEST_CASE("codes stay in range for extreme inputs") {
  Rng rng(17);
  for (auto f : {Format::int8, Format::int4, Format::fp8_e4m3, Format::fp4_e2m1}) {
    for (bool sym : {true, false}) {
      if (!sym && is_float_format(f)) continue;
      for (int trial = 0; trial < 30; ++trial) {
        Tensor w = random_tensor({3, 7}, rng, std::pow(10.0, trial % 12 - 6));
        w.data[0] = 1e300;
        w.data[1] = -1e300;
        w.data[2] = std::numeric_limits<double>::denorm_min();
        auto q = quantize(w, scheme(f, Grouping::per_row, sym));
        REQUIRE_NOTHROW(validate(q));
      }
      QuantScheme fixed = scheme(f, Grouping::per_tensor, sym);
      fixed.fixed_scale = 1e-3;
      auto q = quantize(random_tensor({2, 5}, rng, 100.0), fixed);
      REQUIRE_NOTHROW(validate(q));
    }
  }
}

TEST_CASE("wire format") {
  Rng rng(19);
  for (auto f : {Format::int8, Format::int4, Format::fp8_e4m3, Format::fp4_e2m1}) {
    auto q = quantize(random_tensor({3, 5}, rng), scheme(f, Grouping::per_row, !(f == Format::int4)));
    auto blob = serialize(q);
    CHECK(std::string(blob.begin(), blob.begin() + 4) == "QTN1");
    CHECK(deserialize(blob) == q);
  }
  SECTION("int4 codes pack low nibble first") {
    QuantizedTensor q;
    q.format = Format::int4;
    q.shape = {3};
    q.codes = {static_cast<std::uint8_t>(static_cast<std::int8_t>(-1)), 5, static_cast<std::uint8_t>(static_cast<std::int8_t>(-8))};
    q.scales = {1.0f};
    q.zero_points = {0};
    auto blob = serialize(q);
    const std::vector<std::uint8_t> tail(blob.end() - 2, blob.end());
    CHECK(tail == std::vector<std::uint8_t>{0x5F, 0x08});
    CHECK(deserialize(blob) == q);
  }
  SECTION("truncated blob") {
    auto blob = serialize(quantize(random_tensor({2, 2}, rng), scheme(Format::int8)));
    blob.pop_back();
    CHECK_THROWS(deserialize(blob));
  }
}
