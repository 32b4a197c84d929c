// SPDX-License-Identifier: Apache-2.0
//
// Bit-accurate emulation of integer and low-bit floating point quantization.
// The same routines back the sampler's low-bit inference and the learner's
// rollout-aligned forward, so both sides see identical arithmetic.
#pragma once

#include <algorithm>
#include <array>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <limits>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "qarl/tensor.hpp"

namespace qarl {

enum class Format : std::uint8_t { int8 = 0, int4 = 1, fp8_e4m3 = 2, fp4_e2m1 = 3 };

/// per_row groups rows of a [rows, cols] tensor. Weights are stored [out, in],
/// so per-channel weight scaling and per-row activation scaling coincide.
enum class Grouping : std::uint8_t { per_tensor = 0, per_row = 1 };

enum class WeightGranularity : std::uint8_t { per_tensor, per_channel };
enum class ActivationGranularity : std::uint8_t { per_tensor, per_row };

inline bool is_float_format(Format f) { return f == Format::fp8_e4m3 || f == Format::fp4_e2m1; }
inline bool is_4bit(Format f) { return f == Format::int4 || f == Format::fp4_e2m1; }

inline int q_min(Format f) {
  switch (f) {
    case Format::int8: return -128;
    case Format::int4: return -8;
    default: throw std::invalid_argument("q_min is defined for integer formats only");
  }
}
inline int q_max(Format f) {
  switch (f) {
    case Format::int8: return 127;
    case Format::int4: return 7;
    default: throw std::invalid_argument("q_max is defined for integer formats only");
  }
}

/// Largest finite magnitude of a floating format.
inline double fp_alpha(Format f) {
  switch (f) {
    case Format::fp8_e4m3: return 448.0;
    case Format::fp4_e2m1: return 6.0;
    default: throw std::invalid_argument("alpha is defined for floating formats only");
  }
}

inline std::string to_string(Format f) {
  switch (f) {
    case Format::int8: return "int8";
    case Format::int4: return "int4";
    case Format::fp8_e4m3: return "fp8_e4m3";
    case Format::fp4_e2m1: return "fp4_e2m1";
  }
  return "?";
}

inline Format parse_format(const std::string& s) {
  if (s == "int8") return Format::int8;
  if (s == "int4") return Format::int4;
  if (s == "fp8_e4m3" || s == "fp8") return Format::fp8_e4m3;
  if (s == "fp4_e2m1" || s == "fp4") return Format::fp4_e2m1;
  throw std::invalid_argument("unknown quantization format: " + s);
}

/// How one tensor is quantized: number format, scale grouping and symmetry.
struct QuantScheme {
  Format format = Format::int8;
  Grouping grouping = Grouping::per_tensor;
  bool symmetric = true;
  std::optional<double> fixed_scale;  // static (calibrated) scale; disables max statistics

  bool operator==(const QuantScheme&) const = default;
};

/// A WxAy configuration. activation_format empty means activations stay in
/// full precision (the A16 case, e.g. W4A16).
struct QuantSpec {
  Format format = Format::int4;
  WeightGranularity weight_granularity = WeightGranularity::per_channel;
  ActivationGranularity activation_granularity = ActivationGranularity::per_row;
  bool symmetric = true;
  std::optional<Format> activation_format;
  std::optional<double> fixed_scale;

  double alpha() const { return is_float_format(format) ? fp_alpha(format) : 0.0; }
  bool quantizes_activations() const { return activation_format.has_value(); }

  QuantScheme weight_scheme() const {
    return {format, weight_granularity == WeightGranularity::per_channel ? Grouping::per_row : Grouping::per_tensor,
            symmetric || is_float_format(format), fixed_scale};
  }
  QuantScheme activation_scheme() const {
    if (!activation_format) throw std::logic_error("spec does not quantize activations");
    return {*activation_format,
            activation_granularity == ActivationGranularity::per_row ? Grouping::per_row : Grouping::per_tensor,
            true, std::nullopt};
  }

  std::string name() const {
    auto bits = [](Format f) { return (f == Format::int4 || f == Format::fp4_e2m1) ? "4" : "8"; };
    std::string out = is_float_format(format) ? std::string("fp") + bits(format) + "w" + bits(format) : std::string("w") + bits(format);
    out += activation_format ? std::string("a") + bits(*activation_format) : "a16";
    return out;
  }

  static QuantSpec w4a16() { return {}; }
  static QuantSpec w8a8() {
    QuantSpec s;
    s.format = Format::int8;
    s.activation_format = Format::int8;
    return s;
  }
  static QuantSpec w4a8() {
    QuantSpec s;
    s.activation_format = Format::int8;
    return s;
  }
  static QuantSpec fp8_w8a8() {
    QuantSpec s;
    s.format = Format::fp8_e4m3;
    s.activation_format = Format::fp8_e4m3;
    return s;
  }
  static QuantSpec fp4_w4a16() {
    QuantSpec s;
    s.format = Format::fp4_e2m1;
    return s;
  }

  bool operator==(const QuantSpec&) const = default;
};

/// Parses "w4a16", "w8a8", "w4a8", "fp8w8a8", "fp4w4a16".
inline QuantSpec parse_quant_spec(const std::string& s) {
  if (s == "w4a16") return QuantSpec::w4a16();
  if (s == "w8a8") return QuantSpec::w8a8();
  if (s == "w4a8") return QuantSpec::w4a8();
  if (s == "fp8w8a8") return QuantSpec::fp8_w8a8();
  if (s == "fp4w4a16") return QuantSpec::fp4_w4a16();
  throw std::invalid_argument("unknown quantization scheme: " + s);
}

// ---------------------------------------------------------------------------
// Rounding

enum class RoundingMode : std::uint8_t { half_even, half_away, truncate };

namespace testing {
/// Fault-injection hook for the oracle suite. Production code never sets it.
inline std::atomic<RoundingMode>& rounding_mode() {
  static std::atomic<RoundingMode> mode{RoundingMode::half_even};
  return mode;
}
}  // namespace testing

inline double round_to_integer(double v) {
  switch (testing::rounding_mode().load(std::memory_order_relaxed)) {
    case RoundingMode::half_even: return std::nearbyint(v);
    case RoundingMode::half_away: return std::round(v);
    case RoundingMode::truncate: return std::trunc(v);
  }
  return std::nearbyint(v);
}

// ---------------------------------------------------------------------------
// Floating point grids

namespace detail {
struct FpLayout {
  int exponent_bits;
  int mantissa_bits;
  int bias;
  std::uint8_t max_magnitude_code;  // largest finite magnitude bit pattern
};

inline FpLayout fp_layout(Format f) {
  switch (f) {
    case Format::fp8_e4m3: return {4, 3, 7, 0x7E};  // 0x7F is NaN in e4m3fn
    case Format::fp4_e2m1: return {2, 1, 1, 0x7};
    default: throw std::invalid_argument("not a floating format");
  }
}

inline double decode_magnitude(const FpLayout& l, std::uint8_t code) {
  const int mant = code & ((1 << l.mantissa_bits) - 1);
  const int exp = code >> l.mantissa_bits;
  const double frac = static_cast<double>(mant) / static_cast<double>(1 << l.mantissa_bits);
  if (exp == 0) return std::ldexp(frac, 1 - l.bias);
  return std::ldexp(1.0 + frac, exp - l.bias);
}
}  // namespace detail

/// Non-negative finite values of a floating format, indexed by magnitude code.
inline const std::vector<double>& fp_magnitudes(Format f) {
  static const std::array<std::vector<double>, 2> grids = [] {
    std::array<std::vector<double>, 2> g;
    for (int i = 0; i < 2; ++i) {
      const auto l = detail::fp_layout(i == 0 ? Format::fp8_e4m3 : Format::fp4_e2m1);
      for (int c = 0; c <= l.max_magnitude_code; ++c) g[i].push_back(detail::decode_magnitude(l, static_cast<std::uint8_t>(c)));
    }
    return g;
  }();
  return grids[f == Format::fp8_e4m3 ? 0 : 1];
}

inline int fp_sign_bit(Format f) { return f == Format::fp8_e4m3 ? 7 : 3; }

inline double decode_fp(Format f, std::uint8_t bits) {
  const std::uint8_t sign_mask = static_cast<std::uint8_t>(1u << fp_sign_bit(f));
  const std::uint8_t mag = bits & static_cast<std::uint8_t>(sign_mask - 1);
  const auto& grid = fp_magnitudes(f);
  if (mag >= grid.size()) throw std::invalid_argument("bit pattern is not a finite " + to_string(f) + " value");
  const double v = grid[mag];
  return (bits & sign_mask) ? -v : v;
}

/// Nearest finite grid value, ties to the even (mantissa LSB = 0) pattern,
/// magnitudes beyond alpha saturate to +-alpha. Returns the bit pattern.
inline std::uint8_t encode_fp(Format f, double x) {
  if (std::isnan(x)) throw std::invalid_argument("cannot cast NaN to " + to_string(f));
  const auto& grid = fp_magnitudes(f);
  const double a = std::fabs(x);
  std::size_t code;
  if (a >= grid.back()) {
    code = grid.size() - 1;
  } else {
    const auto hi = static_cast<std::size_t>(std::upper_bound(grid.begin(), grid.end(), a) - grid.begin());
    const std::size_t lo = hi - 1;
    const double dlo = a - grid[lo];
    const double dhi = grid[hi] - a;
    if (dlo < dhi) code = lo;
    else if (dhi < dlo) code = hi;
    else code = (lo % 2 == 0) ? lo : hi;
  }
  std::uint8_t bits = static_cast<std::uint8_t>(code);
  if (std::signbit(x) && code != 0) bits |= static_cast<std::uint8_t>(1u << fp_sign_bit(f));
  return bits;
}

/// Cast a real to the nearest value representable in a low-bit float format.
inline double cast_fpk(double x, Format f) {
  if (!is_float_format(f)) throw std::invalid_argument("cast_fpk requires a floating format");
  return decode_fp(f, encode_fp(f, x));
}

// ---------------------------------------------------------------------------
// Quantized tensors

/// Low-bit codes with per-group scale and zero point. Integer codes are stored
/// as two's complement bytes; floating codes as format bit patterns.
struct QuantizedTensor {
  Format format = Format::int8;
  Grouping grouping = Grouping::per_tensor;
  bool symmetric = true;
  std::vector<std::size_t> shape;
  std::vector<std::uint8_t> codes;
  std::vector<float> scales;
  std::vector<std::int32_t> zero_points;

  std::size_t rows() const { return shape.size() >= 2 ? shape[0] : 1; }
  std::size_t cols() const {
    if (shape.empty()) return 1;
    if (shape.size() == 1) return shape[0];
    return codes.size() / shape[0];
  }
  std::size_t group_of_row(std::size_t r) const { return grouping == Grouping::per_row ? r : 0; }

  int int_code(std::size_t i) const { return static_cast<int>(static_cast<std::int8_t>(codes[i])); }

  /// The unscaled operand value: (code - z) for integers, the grid value for floats.
  double operand(std::size_t i, std::size_t group) const {
    if (is_float_format(format)) return decode_fp(format, codes[i]);
    return static_cast<double>(int_code(i) - zero_points[group]);
  }

  bool operator==(const QuantizedTensor&) const = default;
};

struct GroupParams {
  std::vector<float> scales;
  std::vector<std::int32_t> zero_points;
};

namespace detail {
inline std::size_t group_count(const Tensor& w, Grouping g) { return g == Grouping::per_row ? w.rows() : 1; }

inline void require_finite(const Tensor& w) {
  for (double v : w.data)
    if (!std::isfinite(v)) throw std::invalid_argument("corrupt tensor: non-finite value in quantization input");
}

// Ranges wider than float can hold get the largest finite scale and saturate.
inline float to_scale(double s) {
  if (s > static_cast<double>(std::numeric_limits<float>::max())) return std::numeric_limits<float>::max();
  const float f = static_cast<float>(s);
  if (!(f > 0.0f)) return 1.0f;
  return f;
}

inline int int_code_for(double v, float s, std::int32_t z, Format f, bool* saturated) {
  const double q = round_to_integer(v / static_cast<double>(s)) + z;
  if (q < q_min(f) || q > q_max(f)) {
    if (saturated) *saturated = true;
    return static_cast<int>(std::clamp(q, static_cast<double>(q_min(f)), static_cast<double>(q_max(f))));
  }
  if (saturated) *saturated = false;
  return static_cast<int>(q);
}
}  // namespace detail

/// Per-group scale and zero point for a scheme.
///
/// Symmetric integer: s = max|W| / q_max, z = 0. Asymmetric integer: the range
/// [min, max] is widened to contain zero, s = (max - min) / (q_max - q_min),
/// z = round(q_min - min / s) clamped to the code range. Floating: s = max|W| / alpha.
/// A group whose statistics give s = 0 (all zeros) uses s = 1.
/// Scales are held in 32-bit floats (the wire precision) and nudged upward
/// until the group extremes map inside the code range.
inline GroupParams compute_group_params(const Tensor& w, const QuantScheme& scheme) {
  if (w.size() == 0) throw std::invalid_argument("cannot quantize an empty tensor");
  if (scheme.grouping == Grouping::per_row && w.rank() < 2)
    throw std::invalid_argument("per-row/per-channel granularity requires a tensor of rank >= 2");
  detail::require_finite(w);
  const std::size_t groups = detail::group_count(w, scheme.grouping);
  const std::size_t per_group = w.size() / groups;
  GroupParams out;
  out.scales.resize(groups);
  out.zero_points.assign(groups, 0);
  const bool fp = is_float_format(scheme.format);
  for (std::size_t g = 0; g < groups; ++g) {
    const auto first = w.data.begin() + static_cast<std::ptrdiff_t>(g * per_group);
    const auto last = first + static_cast<std::ptrdiff_t>(per_group);
    if (scheme.fixed_scale) {
      out.scales[g] = detail::to_scale(*scheme.fixed_scale);
      continue;
    }
    if (fp || scheme.symmetric) {
      double amax = 0.0;
      for (auto it = first; it != last; ++it) amax = std::max(amax, std::fabs(*it));
      const double limit = fp ? fp_alpha(scheme.format) : static_cast<double>(q_max(scheme.format));
      float s = amax == 0.0 ? 1.0f : detail::to_scale(amax / limit);
      while (amax / static_cast<double>(s) > limit && s < std::numeric_limits<float>::max())
        s = std::nextafter(s, std::numeric_limits<float>::max());
      out.scales[g] = s;
    } else {
      const double lo = std::min(0.0, *std::min_element(first, last));
      const double hi = std::max(0.0, *std::max_element(first, last));
      const int qlo = q_min(scheme.format);
      const int qhi = q_max(scheme.format);
      if (hi == lo) {
        out.scales[g] = 1.0f;
        continue;
      }
      float s = detail::to_scale((hi - lo) / static_cast<double>(qhi - qlo));
      std::int32_t z = 0;
      for (int guard = 0; guard < 64; ++guard) {
        z = static_cast<std::int32_t>(std::clamp(round_to_integer(qlo - lo / static_cast<double>(s)),
                                                 static_cast<double>(qlo), static_cast<double>(qhi)));
        bool sat_lo = false;
        bool sat_hi = false;
        detail::int_code_for(lo, s, z, scheme.format, &sat_lo);
        detail::int_code_for(hi, s, z, scheme.format, &sat_hi);
        if (!sat_lo && !sat_hi) break;
        s = std::nextafter(s, std::numeric_limits<float>::max());
      }
      out.scales[g] = s;
      out.zero_points[g] = z;
    }
  }
  return out;
}

/// Scale and zero point for a weight tensor under a WxAy spec.
inline GroupParams int_qparams(const Tensor& w, const QuantSpec& spec) { return compute_group_params(w, spec.weight_scheme()); }

struct TrackedQuantization {
  QuantizedTensor tensor;
  std::vector<std::uint8_t> saturated;  // 1 where the forward clamp engaged
};

/// Quantize with explicit group parameters, recording which elements saturated.
inline TrackedQuantization quantize_with(const Tensor& w, const QuantScheme& scheme, const GroupParams& params) {
  detail::require_finite(w);
  TrackedQuantization out;
  auto& qt = out.tensor;
  qt.format = scheme.format;
  qt.grouping = scheme.grouping;
  qt.symmetric = scheme.symmetric || is_float_format(scheme.format);
  qt.shape = w.shape;
  qt.scales = params.scales;
  qt.zero_points = params.zero_points;
  qt.codes.resize(w.size());
  out.saturated.assign(w.size(), 0);
  const std::size_t cols = w.cols();
  const bool fp = is_float_format(scheme.format);
  for (std::size_t i = 0; i < w.size(); ++i) {
    const std::size_t g = qt.group_of_row(i / cols);
    const float s = qt.scales[g];
    if (fp) {
      const double v = w.data[i] / static_cast<double>(s);
      qt.codes[i] = encode_fp(scheme.format, v);
      out.saturated[i] = std::fabs(v) > fp_alpha(scheme.format) ? 1 : 0;
    } else {
      bool sat = false;
      const int code = detail::int_code_for(w.data[i], s, qt.zero_points[g], scheme.format, &sat);
      qt.codes[i] = static_cast<std::uint8_t>(static_cast<std::int8_t>(code));
      out.saturated[i] = sat ? 1 : 0;
    }
  }
  return out;
}

inline TrackedQuantization quantize_tracked(const Tensor& w, const QuantScheme& scheme) {
  return quantize_with(w, scheme, compute_group_params(w, scheme));
}

/// Quantize a weight tensor under a WxAy spec.
inline QuantizedTensor quantize(const Tensor& w, const QuantSpec& spec) {
  return quantize_tracked(w, spec.weight_scheme()).tensor;
}

inline QuantizedTensor quantize(const Tensor& w, const QuantScheme& scheme) { return quantize_tracked(w, scheme).tensor; }

/// Reject tensors whose codes, scales or zero points break the format contract.
inline void validate(const QuantizedTensor& qt) {
  if (qt.codes.size() != Tensor::count(qt.shape)) throw std::invalid_argument("quantized tensor: code count mismatch");
  const std::size_t groups = qt.grouping == Grouping::per_row ? qt.rows() : 1;
  if (qt.scales.size() != groups || qt.zero_points.size() != groups)
    throw std::invalid_argument("quantized tensor: group metadata mismatch");
  for (float s : qt.scales)
    if (!(s > 0.0f) || !std::isfinite(s)) throw std::invalid_argument("quantized tensor: non-positive scale");
  const bool fp = is_float_format(qt.format);
  for (std::size_t g = 0; g < groups; ++g) {
    if ((qt.symmetric || fp) && qt.zero_points[g] != 0)
      throw std::invalid_argument("quantized tensor: symmetric tensor with nonzero zero point");
  }
  for (std::size_t i = 0; i < qt.codes.size(); ++i) {
    if (fp) {
      decode_fp(qt.format, qt.codes[i]);
    } else {
      const int c = qt.int_code(i);
      if (c < q_min(qt.format) || c > q_max(qt.format)) throw std::invalid_argument("quantized tensor: code out of range");
    }
  }
}

/// W_hat = s (W_q - z) for integers, s * W_q for floats.
inline Tensor dequantize(const QuantizedTensor& qt) {
  Tensor out(qt.shape);
  const std::size_t cols = qt.cols();
  for (std::size_t i = 0; i < qt.codes.size(); ++i) {
    const std::size_t g = qt.group_of_row(i / cols);
    out.data[i] = static_cast<double>(qt.scales[g]) * qt.operand(i, g);
  }
  return out;
}

inline Tensor fake_quant(const Tensor& w, const QuantSpec& spec) { return dequantize(quantize(w, spec)); }
inline Tensor fake_quant(const Tensor& w, const QuantScheme& scheme) { return dequantize(quantize(w, scheme)); }

/// Y = X * W^T on quantized operands, X [N,K], W [O,K]. The inner products are
/// taken over unscaled operands (int64 for integer pairs, double otherwise,
/// exact for these formats) and rescaled by the outer product of group scales.
inline Tensor qgemm(const QuantizedTensor& x, const QuantizedTensor& w) {
  if (x.cols() != w.cols())
    throw std::invalid_argument("qgemm inner dimension mismatch: " + shape_string(x.shape) + " vs " +
                                shape_string(w.shape));
  const std::size_t n = x.rows();
  const std::size_t k = x.cols();
  const std::size_t o = w.rows();
  Tensor y({n, o});
  const bool integer = !is_float_format(x.format) && !is_float_format(w.format);
  if (integer) {
    std::vector<std::int32_t> xi(n * k);
    std::vector<std::int32_t> wi(o * k);
    for (std::size_t i = 0; i < n * k; ++i) xi[i] = x.int_code(i) - x.zero_points[x.group_of_row(i / k)];
    for (std::size_t i = 0; i < o * k; ++i) wi[i] = w.int_code(i) - w.zero_points[w.group_of_row(i / k)];
    for (std::size_t r = 0; r < n; ++r) {
      const double sx = x.scales[x.group_of_row(r)];
      for (std::size_t c = 0; c < o; ++c) {
        std::int64_t acc = 0;
        for (std::size_t j = 0; j < k; ++j) acc += static_cast<std::int64_t>(xi[r * k + j]) * wi[c * k + j];
        y.data[r * o + c] = sx * static_cast<double>(w.scales[w.group_of_row(c)]) * static_cast<double>(acc);
      }
    }
    return y;
  }
  std::vector<double> xv(n * k);
  std::vector<double> wv(o * k);
  for (std::size_t i = 0; i < n * k; ++i) xv[i] = x.operand(i, x.group_of_row(i / k));
  for (std::size_t i = 0; i < o * k; ++i) wv[i] = w.operand(i, w.group_of_row(i / k));
  matmul_nt(xv, n, k, wv, o, y.data);
  for (std::size_t r = 0; r < n; ++r) {
    const double sx = x.scales[x.group_of_row(r)];
    for (std::size_t c = 0; c < o; ++c) y.data[r * o + c] *= sx * static_cast<double>(w.scales[w.group_of_row(c)]);
  }
  return y;
}

/// Weight-only path (WxA16): full precision activations times dequantized weights.
inline Tensor qgemm(const Tensor& x, const QuantizedTensor& w) { return matmul_nt(x, dequantize(w)); }

// ---------------------------------------------------------------------------
// Wire format (little endian):
//   "QTN1" | u8 format | u8 grouping | u8 symmetric | u8 reserved
//   u32 rank | u32 dims[rank] | u32 groups | f32 scales[groups] | i32 zero_points[groups]
//   u32 code_bytes | codes   (4-bit formats packed two per byte, low nibble first)

namespace wire {
inline void put_u8(std::vector<std::uint8_t>& out, std::uint8_t v) { out.push_back(v); }
inline void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}
inline void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}
inline void put_f32(std::vector<std::uint8_t>& out, float f) {
  std::uint32_t u;
  std::memcpy(&u, &f, 4);
  put_u32(out, u);
}
inline void put_bytes(std::vector<std::uint8_t>& out, std::span<const std::uint8_t> b) { out.insert(out.end(), b.begin(), b.end()); }

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> data) : data_(data) {}
  std::uint8_t u8() {
    need(1);
    return data_[pos_++];
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(data_[pos_++]) << (8 * i);
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(data_[pos_++]) << (8 * i);
    return v;
  }
  float f32() {
    const std::uint32_t u = u32();
    float f;
    std::memcpy(&f, &u, 4);
    return f;
  }
  std::span<const std::uint8_t> bytes(std::size_t n) {
    need(n);
    auto s = data_.subspan(pos_, n);
    pos_ += n;
    return s;
  }
  std::size_t position() const { return pos_; }
  bool done() const { return pos_ == data_.size(); }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > data_.size()) throw std::runtime_error("truncated binary blob");
  }
  std::span<const std::uint8_t> data_;
  std::size_t pos_ = 0;
};
}  // namespace wire

inline void serialize_into(const QuantizedTensor& qt, std::vector<std::uint8_t>& out) {
  for (char c : std::string("QTN1")) wire::put_u8(out, static_cast<std::uint8_t>(c));
  wire::put_u8(out, static_cast<std::uint8_t>(qt.format));
  wire::put_u8(out, static_cast<std::uint8_t>(qt.grouping));
  wire::put_u8(out, qt.symmetric ? 1 : 0);
  wire::put_u8(out, 0);
  wire::put_u32(out, static_cast<std::uint32_t>(qt.shape.size()));
  for (auto d : qt.shape) wire::put_u32(out, static_cast<std::uint32_t>(d));
  wire::put_u32(out, static_cast<std::uint32_t>(qt.scales.size()));
  for (float s : qt.scales) wire::put_f32(out, s);
  for (auto z : qt.zero_points) wire::put_u32(out, static_cast<std::uint32_t>(z));
  if (is_4bit(qt.format)) {
    const std::size_t n = qt.codes.size();
    wire::put_u32(out, static_cast<std::uint32_t>((n + 1) / 2));
    for (std::size_t i = 0; i < n; i += 2) {
      const std::uint8_t lo = qt.codes[i] & 0x0F;
      const std::uint8_t hi = i + 1 < n ? static_cast<std::uint8_t>(qt.codes[i + 1] & 0x0F) : 0;
      wire::put_u8(out, static_cast<std::uint8_t>(lo | (hi << 4)));
    }
  } else {
    wire::put_u32(out, static_cast<std::uint32_t>(qt.codes.size()));
    wire::put_bytes(out, qt.codes);
  }
}

inline std::vector<std::uint8_t> serialize(const QuantizedTensor& qt) {
  std::vector<std::uint8_t> out;
  serialize_into(qt, out);
  return out;
}

inline QuantizedTensor deserialize_from(wire::Reader& in) {
  const auto magic = in.bytes(4);
  if (std::string(magic.begin(), magic.end()) != "QTN1") throw std::runtime_error("not a quantized tensor blob");
  QuantizedTensor qt;
  const std::uint8_t fmt = in.u8();
  if (fmt > 3) throw std::runtime_error("unknown format tag");
  qt.format = static_cast<Format>(fmt);
  const std::uint8_t grouping = in.u8();
  if (grouping > 1) throw std::runtime_error("unknown granularity tag");
  qt.grouping = static_cast<Grouping>(grouping);
  qt.symmetric = in.u8() != 0;
  in.u8();
  const std::uint32_t rank = in.u32();
  if (rank > 8) throw std::runtime_error("implausible tensor rank");
  for (std::uint32_t i = 0; i < rank; ++i) qt.shape.push_back(in.u32());
  const std::uint32_t groups = in.u32();
  for (std::uint32_t i = 0; i < groups; ++i) qt.scales.push_back(in.f32());
  for (std::uint32_t i = 0; i < groups; ++i) qt.zero_points.push_back(static_cast<std::int32_t>(in.u32()));
  const std::uint32_t code_bytes = in.u32();
  const auto raw = in.bytes(code_bytes);
  const std::size_t n = Tensor::count(qt.shape);
  qt.codes.resize(n);
  if (is_4bit(qt.format)) {
    if (code_bytes != (n + 1) / 2) throw std::runtime_error("packed code length mismatch");
    for (std::size_t i = 0; i < n; ++i) {
      std::uint8_t nib = (i % 2 == 0) ? (raw[i / 2] & 0x0F) : (raw[i / 2] >> 4);
      // sign-extend integer nibbles; floating nibbles are raw bit patterns
      if (qt.format == Format::int4 && (nib & 0x08)) nib |= 0xF0;
      qt.codes[i] = nib;
    }
  } else {
    if (code_bytes != n) throw std::runtime_error("code length mismatch");
    std::copy(raw.begin(), raw.end(), qt.codes.begin());
  }
  validate(qt);
  return qt;
}

inline QuantizedTensor deserialize(std::span<const std::uint8_t> blob) {
  wire::Reader in(blob);
  auto qt = deserialize_from(in);
  if (!in.done()) throw std::runtime_error("trailing bytes after quantized tensor");
  return qt;
}

}  // namespace qarl
