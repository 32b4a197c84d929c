// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cstddef>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace qarl {

/// Dense row-major tensor of doubles.
///
/// Row-wise operations view a tensor as a matrix: rank 0 is 1x1, rank 1 is a
/// single row of length n, rank >= 2 is shape[0] x (product of the rest).
struct Tensor {
  std::vector<std::size_t> shape;
  std::vector<double> data;

  Tensor() = default;
  explicit Tensor(std::vector<std::size_t> s, double fill = 0.0)
      : shape(std::move(s)), data(count(shape), fill) {}
  Tensor(std::vector<std::size_t> s, std::vector<double> d) : shape(std::move(s)), data(std::move(d)) {
    if (data.size() != count(shape)) throw std::invalid_argument("tensor data does not match shape");
  }

  static std::size_t count(const std::vector<std::size_t>& s) {
    return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>{});
  }

  std::size_t size() const { return data.size(); }
  std::size_t rank() const { return shape.size(); }
  std::size_t rows() const { return shape.size() >= 2 ? shape[0] : 1; }
  std::size_t cols() const {
    if (shape.empty()) return 1;
    if (shape.size() == 1) return shape[0];
    return size() / shape[0];
  }

  double& operator[](std::size_t i) { return data[i]; }
  double operator[](std::size_t i) const { return data[i]; }
  double& at(std::size_t r, std::size_t c) { return data[r * cols() + c]; }
  double at(std::size_t r, std::size_t c) const { return data[r * cols() + c]; }

  std::span<double> row(std::size_t r) { return {data.data() + r * cols(), cols()}; }
  std::span<const double> row(std::size_t r) const { return {data.data() + r * cols(), cols()}; }

  bool operator==(const Tensor&) const = default;
};

inline std::string shape_string(const std::vector<std::size_t>& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

/// Y = X * W^T for X [N,K] and W [O,K]. Each output row depends only on the
/// matching input row and uses a fixed accumulation order over K.
inline void matmul_nt(std::span<const double> x, std::size_t n, std::size_t k, std::span<const double> w,
                      std::size_t o, std::span<double> y) {
  std::vector<double> wt(k * o);
  for (std::size_t r = 0; r < o; ++r)
    for (std::size_t c = 0; c < k; ++c) wt[c * o + r] = w[r * k + c];
  std::fill(y.begin(), y.end(), 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    double* yi = y.data() + i * o;
    const double* xi = x.data() + i * k;
    for (std::size_t c = 0; c < k; ++c) {
      const double xv = xi[c];
      if (xv == 0.0) continue;
      const double* wc = wt.data() + c * o;
      for (std::size_t r = 0; r < o; ++r) yi[r] += xv * wc[r];
    }
  }
}

inline Tensor matmul_nt(const Tensor& x, const Tensor& w) {
  if (x.cols() != w.cols())
    throw std::invalid_argument("matmul inner dimension mismatch: " + shape_string(x.shape) + " vs " +
                                shape_string(w.shape));
  Tensor y({x.rows(), w.rows()});
  matmul_nt(x.data, x.rows(), x.cols(), w.data, w.rows(), y.data);
  return y;
}

/// dX += dY * W  for dY [N,O], W [O,K].
inline void matmul_backward_input(std::span<const double> dy, std::size_t n, std::size_t o, std::span<const double> w,
                                  std::size_t k, std::span<double> dx) {
  for (std::size_t i = 0; i < n; ++i) {
    double* dxi = dx.data() + i * k;
    for (std::size_t r = 0; r < o; ++r) {
      const double g = dy[i * o + r];
      if (g == 0.0) continue;
      const double* wr = w.data() + r * k;
      for (std::size_t c = 0; c < k; ++c) dxi[c] += g * wr[c];
    }
  }
}

/// dW += dY^T * X  for dY [N,O], X [N,K].
inline void matmul_backward_weight(std::span<const double> dy, std::size_t n, std::size_t o,
                                   std::span<const double> x, std::size_t k, std::span<double> dw) {
  for (std::size_t i = 0; i < n; ++i) {
    const double* xi = x.data() + i * k;
    for (std::size_t r = 0; r < o; ++r) {
      const double g = dy[i * o + r];
      if (g == 0.0) continue;
      double* dwr = dw.data() + r * k;
      for (std::size_t c = 0; c < k; ++c) dwr[c] += g * xi[c];
    }
  }
}

}  // namespace qarl
