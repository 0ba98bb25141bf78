// SPDX-License-Identifier: Apache-2.0
//
// Dense row-major float arrays and the handful of kernels the rest of the
// library is built from. Summation order is fixed (left to right over the
// reduced extent) so results are bit-reproducible; build with
// -ffp-contract=off to keep the compiler from fusing multiply-adds.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "mtr/errors.hpp"

namespace mtr {

// Op-count policies. Every kernel takes one; NoCount compiles away, OpCounter
// tallies FLOPs (multiply-add = 2, any other scalar op = 1).
struct NoCount {
  constexpr void add(std::uint64_t) const noexcept {}
};

struct OpCounter {
  std::uint64_t ops = 0;
  void add(std::uint64_t n) noexcept { ops += n; }
};

using Shape = std::vector<std::size_t>;

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << ']';
  return os.str();
}

class DenseArray {
 public:
  DenseArray() = default;

  explicit DenseArray(Shape shape, float fill = 0.0f)
      : shape_(std::move(shape)), data_(count(shape_), fill) {}

  DenseArray(Shape shape, std::vector<float> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (count(shape_) != data_.size())
      throw DimensionError("DenseArray: shape " + shape_str(shape_) + " holds " +
                           std::to_string(count(shape_)) + " values, got " + std::to_string(data_.size()));
  }

  static DenseArray matrix(std::size_t rows, std::size_t cols, float fill = 0.0f) {
    return DenseArray({rows, cols}, fill);
  }

  static DenseArray from_rows(std::initializer_list<std::initializer_list<float>> rows) {
    const std::size_t r = rows.size();
    const std::size_t c = r ? rows.begin()->size() : 0;
    DenseArray out = matrix(r, c);
    std::size_t i = 0;
    for (const auto& row : rows) {
      if (row.size() != c) throw DimensionError("from_rows: ragged rows");
      std::copy(row.begin(), row.end(), out.data_.begin() + static_cast<std::ptrdiff_t>(i * c));
      ++i;
    }
    return out;
  }

  static DenseArray identity(std::size_t n) {
    DenseArray out = matrix(n, n);
    for (std::size_t i = 0; i < n; ++i) out(i, i) = 1.0f;
    return out;
  }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  // 2-D accessors; calling them on other ranks is a logic error.
  std::size_t rows() const noexcept { return shape_.empty() ? 0 : shape_[0]; }
  std::size_t cols() const noexcept { return shape_.size() < 2 ? 1 : shape_[1]; }

  float& operator()(std::size_t r, std::size_t c) noexcept { return data_[r * cols() + c]; }
  float operator()(std::size_t r, std::size_t c) const noexcept { return data_[r * cols() + c]; }
  float& operator[](std::size_t i) noexcept { return data_[i]; }
  float operator[](std::size_t i) const noexcept { return data_[i]; }

  std::span<float> row(std::size_t r) noexcept { return {data_.data() + r * cols(), cols()}; }
  std::span<const float> row(std::size_t r) const noexcept { return {data_.data() + r * cols(), cols()}; }

  std::span<float> values() noexcept { return data_; }
  std::span<const float> values() const noexcept { return data_; }
  const std::vector<float>& data() const noexcept { return data_; }
  std::vector<float>& data() noexcept { return data_; }

  bool all_finite() const noexcept {
    return std::all_of(data_.begin(), data_.end(), [](float v) { return std::isfinite(v); });
  }

  friend bool operator==(const DenseArray&, const DenseArray&) = default;

  static std::size_t count(const Shape& s) {
    return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
  }

 private:
  Shape shape_;
  std::vector<float> data_;
};

inline void require_matrix(const DenseArray& a, const char* what) {
  if (a.rank() != 2) throw DimensionError(std::string(what) + ": expected a matrix, got " + shape_str(a.shape()));
}

template <class Counter = NoCount>
DenseArray matmul(const DenseArray& a, const DenseArray& b, Counter&& ops = Counter{}) {
  require_matrix(a, "matmul");
  require_matrix(b, "matmul");
  if (a.cols() != b.rows())
    throw DimensionError("matmul: inner extents differ, " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  const std::size_t m = a.rows(), k = a.cols(), p = b.cols();
  DenseArray out = DenseArray::matrix(m, p);
  for (std::size_t i = 0; i < m; ++i) {
    float* dst = out.row(i).data();
    for (std::size_t kk = 0; kk < k; ++kk) {
      const float aik = a(i, kk);
      const float* src = b.row(kk).data();
      for (std::size_t j = 0; j < p; ++j) {
        dst[j] += aik * src[j];
        ops.add(2);
      }
    }
  }
  return out;
}

inline float softplus(float x) noexcept {
  if (x > 20.0f) return x;
  return std::log1p(std::exp(x));
}

template <class Counter = NoCount>
DenseArray softplus(const DenseArray& x, Counter&& ops = Counter{}) {
  DenseArray out = x;
  for (float& v : out.values()) {
    v = softplus(v);
    ops.add(2);
  }
  return out;
}

inline float sigmoid(float x) noexcept { return 1.0f / (1.0f + std::exp(-x)); }
inline float silu(float x) noexcept { return x / (1.0f + std::exp(-x)); }

template <class Counter = NoCount>
void silu_inplace(DenseArray& x, Counter&& ops = Counter{}) {
  for (float& v : x.values()) {
    v = silu(v);
    ops.add(4);
  }
}

// Row-wise layer normalisation over the last extent.
template <class Counter = NoCount>
DenseArray layernorm(const DenseArray& x, std::span<const float> scale, std::span<const float> bias,
                     float eps = 1e-5f, Counter&& ops = Counter{}) {
  require_matrix(x, "layernorm");
  const std::size_t n = x.cols();
  if (scale.size() != n || bias.size() != n)
    throw DimensionError("layernorm: scale/bias length " + std::to_string(scale.size()) + "/" +
                         std::to_string(bias.size()) + " vs feature extent " + std::to_string(n));
  DenseArray out = DenseArray::matrix(x.rows(), n);
  const float inv_n = 1.0f / static_cast<float>(n);
  for (std::size_t r = 0; r < x.rows(); ++r) {
    auto src = x.row(r);
    float sum = 0.0f;
    for (float v : src) sum += v;
    const float mean = sum * inv_n;
    float sq = 0.0f;
    for (float v : src) {
      const float d = v - mean;
      sq += d * d;
    }
    const float var = sq * inv_n;
    const float rstd = 1.0f / std::sqrt(var + eps);
    auto dst = out.row(r);
    for (std::size_t c = 0; c < n; ++c) dst[c] = ((src[c] - mean) * rstd) * scale[c] + bias[c];
    ops.add(n + 1);      // sum, scale by 1/n
    ops.add(3 * n + 1);  // centred squares, scale by 1/n
    ops.add(3);          // +eps, sqrt, reciprocal
    ops.add(4 * n);      // centre, scale, affine
  }
  return out;
}

inline std::uint64_t layernorm_flops(std::uint64_t n) { return 8 * n + 5; }

inline float dot(std::span<const float> a, std::span<const float> b) {
  if (a.size() != b.size())
    throw DimensionError("dot: lengths " + std::to_string(a.size()) + " and " + std::to_string(b.size()));
  float s = 0.0f;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

// dot(a,b)/(|a||b|); 0 when either norm is below 1e-12.
inline float cosine_similarity(std::span<const float> a, std::span<const float> b) {
  if (a.size() != b.size())
    throw DimensionError("cosine_similarity: lengths " + std::to_string(a.size()) + " and " +
                         std::to_string(b.size()));
  double ab = 0.0, aa = 0.0, bb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ab += static_cast<double>(a[i]) * b[i];
    aa += static_cast<double>(a[i]) * a[i];
    bb += static_cast<double>(b[i]) * b[i];
  }
  const double na = std::sqrt(aa), nb = std::sqrt(bb);
  if (na < 1e-12 || nb < 1e-12) return 0.0f;
  return static_cast<float>(std::clamp(ab / (na * nb), -1.0, 1.0));
}

// Indices ordering `values` from largest to smallest; equal values keep
// ascending index order.
inline std::vector<std::size_t> argsort_desc(std::span<const float> values) {
  std::vector<std::size_t> idx(values.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return values[a] > values[b]; });
  return idx;
}

inline DenseArray reverse_rows(const DenseArray& x) {
  DenseArray out(x.shape());
  const std::size_t n = x.rows();
  for (std::size_t r = 0; r < n; ++r) std::ranges::copy(x.row(n - 1 - r), out.row(r).begin());
  return out;
}

// Columns [begin, begin + width) of a matrix.
inline DenseArray column_slice(const DenseArray& x, std::size_t begin, std::size_t width) {
  require_matrix(x, "column_slice");
  if (begin + width > x.cols()) throw DimensionError("column_slice: out of range for " + shape_str(x.shape()));
  DenseArray out = DenseArray::matrix(x.rows(), width);
  for (std::size_t r = 0; r < x.rows(); ++r) {
    auto src = x.row(r).subspan(begin, width);
    std::ranges::copy(src, out.row(r).begin());
  }
  return out;
}

inline DenseArray gather_rows(const DenseArray& x, std::span<const std::size_t> rows) {
  DenseArray out = DenseArray::matrix(rows.size(), x.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) std::ranges::copy(x.row(rows[i]), out.row(i).begin());
  return out;
}

}  // namespace mtr
