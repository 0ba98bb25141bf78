// SPDX-License-Identifier: Apache-2.0
//
// Selective state-space layer: input-dependent B/C/timescale generation,
// zero-order-hold discretisation with diagonal A, the sequential scan, and the
// bidirectional Mamba block that sums its scanning heads.
#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "mtr/errors.hpp"
#include "mtr/tensor.hpp"

namespace mtr {

enum class ScanDirection { forward, backward };

inline const char* to_string(ScanDirection d) { return d == ScanDirection::forward ? "forward" : "backward"; }

inline ScanDirection scan_direction_from_string(const std::string& s) {
  if (s == "forward") return ScanDirection::forward;
  if (s == "backward") return ScanDirection::backward;
  throw ConfigError("unknown scan direction '" + s + "'");
}

inline constexpr std::size_t kDefaultConvWidth = 4;

// One scanning head. Shapes, with E = inner width, N = state size and
// R = timescale rank:
//   a_log E x N (A = -exp(a_log)), w_b / w_c E x N, w_1 E x R, w_2 R x E,
//   skip_d E, conv_kernel E x width.
struct SsmHeadParams {
  DenseArray a_log;
  DenseArray w_b;
  DenseArray w_c;
  DenseArray w_1;
  DenseArray w_2;
  std::vector<float> skip_d;
  DenseArray conv_kernel;
  ScanDirection direction = ScanDirection::forward;

  std::size_t inner_dim() const noexcept { return a_log.rows(); }
  std::size_t state_dim() const noexcept { return a_log.cols(); }
  std::size_t delta_rank() const noexcept { return w_1.cols(); }
  std::size_t conv_width() const noexcept { return conv_kernel.cols(); }

  // Continuous-time diagonal of A, strictly negative.
  DenseArray a() const {
    DenseArray out = a_log;
    for (float& v : out.values()) v = -std::exp(v);
    return out;
  }

  void validate() const {
    const std::size_t e = inner_dim(), n = state_dim(), r = delta_rank();
    auto expect = [](const DenseArray& m, std::size_t rows, std::size_t cols, const char* name) {
      if (m.rank() != 2 || m.rows() != rows || m.cols() != cols)
        throw DimensionError(std::string("ssm head: ") + name + " is " + shape_str(m.shape()) + ", expected " +
                             shape_str({rows, cols}));
    };
    require_matrix(a_log, "ssm head a_log");
    expect(w_b, e, n, "w_b");
    expect(w_c, e, n, "w_c");
    expect(w_1, e, r, "w_1");
    expect(w_2, r, e, "w_2");
    require_matrix(conv_kernel, "ssm head conv_kernel");
    if (conv_kernel.rows() != e || conv_kernel.cols() == 0)
      throw DimensionError("ssm head: conv_kernel is " + shape_str(conv_kernel.shape()));
    if (skip_d.size() != e)
      throw DimensionError("ssm head: skip_d has length " + std::to_string(skip_d.size()) + ", expected " +
                           std::to_string(e));
  }
};

struct SsmBlockParams {
  std::vector<float> norm_scale;
  std::vector<float> norm_bias;
  DenseArray in_proj;   // D x 2E, columns [0,E) feed the scan, [E,2E) the gate
  DenseArray out_proj;  // E x D
  std::vector<SsmHeadParams> heads;

  std::size_t model_dim() const noexcept { return in_proj.rows(); }
  std::size_t inner_dim() const noexcept { return in_proj.cols() / 2; }

  void validate() const {
    require_matrix(in_proj, "block in_proj");
    require_matrix(out_proj, "block out_proj");
    const std::size_t d = model_dim(), e = inner_dim();
    if (in_proj.cols() % 2 != 0 || e < d)
      throw DimensionError("block: in_proj " + shape_str(in_proj.shape()) + " must be D x 2E with E >= D");
    if (out_proj.rows() != e || out_proj.cols() != d)
      throw DimensionError("block: out_proj is " + shape_str(out_proj.shape()) + ", expected " + shape_str({e, d}));
    if (norm_scale.size() != d || norm_bias.size() != d) throw DimensionError("block: norm parameters must have length D");
    if (heads.empty()) throw DimensionError("block: at least one scanning head is required");
    for (const auto& h : heads) {
      h.validate();
      if (h.inner_dim() != e)
        throw DimensionError("block: head inner width " + std::to_string(h.inner_dim()) + " != " + std::to_string(e));
    }
  }
};

// Per-head scan results, always in original token order regardless of the
// head's scan direction.
struct ScanTrace {
  DenseArray y;      // L x E
  DenseArray delta;  // L x E, softplus output
  DenseArray input;  // L x E, the sequence that was scanned
  DenseArray states; // L x E x N hidden states, only when requested
};

struct ScanOptions {
  bool record_states = false;
};

// Abar[t,e,n] = exp(delta[t,e] * A[e,n]).
inline DenseArray discretize(const DenseArray& a, const DenseArray& delta) {
  require_matrix(a, "discretize");
  require_matrix(delta, "discretize");
  if (delta.cols() != a.rows())
    throw DimensionError("discretize: delta " + shape_str(delta.shape()) + " does not match A " + shape_str(a.shape()));
  const std::size_t l = delta.rows(), e = a.rows(), n = a.cols();
  DenseArray out({l, e, n});
  for (std::size_t t = 0; t < l; ++t)
    for (std::size_t c = 0; c < e; ++c) {
      const float dt = delta(t, c);
      if (!(dt > 0.0f))
        throw ContractError("discretize: timescale must be positive, got " + std::to_string(dt) + " at (" +
                            std::to_string(t) + "," + std::to_string(c) + ")");
      for (std::size_t s = 0; s < n; ++s) out[(t * e + c) * n + s] = std::exp(dt * a(c, s));
    }
  return out;
}

namespace detail {

template <class Counter>
ScanTrace scan_forward(const DenseArray& x, const SsmHeadParams& head, const ScanOptions& opt, Counter&& ops) {
  const std::size_t l = x.rows(), e = head.inner_dim(), n = head.state_dim();
  const DenseArray a = head.a();
  const DenseArray b_proj = matmul(x, head.w_b, ops);
  const DenseArray c_proj = matmul(x, head.w_c, ops);
  DenseArray delta = softplus(matmul(matmul(x, head.w_1, ops), head.w_2, ops), ops);

  ScanTrace out;
  out.y = DenseArray::matrix(l, e);
  if (opt.record_states) out.states = DenseArray({l, e, n});
  std::vector<float> h(e * n, 0.0f);
  for (std::size_t t = 0; t < l; ++t) {
    auto bt = b_proj.row(t);
    auto ct = c_proj.row(t);
    for (std::size_t c = 0; c < e; ++c) {
      const float dt = delta(t, c);
      const float xt = x(t, c);
      const float dx = dt * xt;
      ops.add(1);
      float* hc = h.data() + c * n;
      const float* ac = a.row(c).data();
      float acc = 0.0f;
      for (std::size_t s = 0; s < n; ++s) {
        const float abar = std::exp(dt * ac[s]);
        hc[s] = abar * hc[s] + bt[s] * dx;
        acc += ct[s] * hc[s];
        ops.add(7);
      }
      out.y(t, c) = acc + head.skip_d[c] * xt;
      ops.add(2);
    }
    if (opt.record_states) std::ranges::copy(h, out.states.values().begin() + static_cast<std::ptrdiff_t>(t * e * n));
  }
  out.delta = std::move(delta);
  return out;
}

inline DenseArray reverse_leading(const DenseArray& x) {
  if (x.empty()) return x;
  const std::size_t l = x.shape()[0];
  const std::size_t stride = x.size() / l;
  DenseArray out(x.shape());
  for (std::size_t t = 0; t < l; ++t)
    std::copy_n(x.values().begin() + static_cast<std::ptrdiff_t>((l - 1 - t) * stride), stride,
                out.values().begin() + static_cast<std::ptrdiff_t>(t * stride));
  return out;
}

}  // namespace detail

// Runs h_t = Abar_t * h_{t-1} + B_t (delta_t * x_t), y_t = C_t h_t + D * x_t
// with h_0 = 0 over x (L x E) in the head's direction.
template <class Counter = NoCount>
ScanTrace selective_scan(const DenseArray& x, const SsmHeadParams& head, const ScanOptions& opt = {},
                         Counter&& ops = Counter{}) {
  require_matrix(x, "selective_scan");
  if (x.cols() != head.inner_dim())
    throw DimensionError("selective_scan: input " + shape_str(x.shape()) + " vs head width " +
                         std::to_string(head.inner_dim()));
  if (x.rows() == 0) throw DimensionError("selective_scan: empty sequence");
  if (head.direction == ScanDirection::forward) {
    ScanTrace tr = detail::scan_forward(x, head, opt, ops);
    tr.input = x;
    return tr;
  }
  ScanTrace rev = detail::scan_forward(reverse_rows(x), head, opt, ops);
  ScanTrace out;
  out.y = reverse_rows(rev.y);
  out.delta = reverse_rows(rev.delta);
  if (opt.record_states) out.states = detail::reverse_leading(rev.states);
  out.input = x;
  return out;
}

// Depthwise convolution along the sequence, causal with respect to the scan
// direction (a backward head sees only tokens at or after t). Zero padded.
template <class Counter = NoCount>
DenseArray causal_conv(const DenseArray& u, const DenseArray& kernel, ScanDirection dir, Counter&& ops = Counter{}) {
  require_matrix(u, "causal_conv");
  if (kernel.rows() != u.cols())
    throw DimensionError("causal_conv: kernel " + shape_str(kernel.shape()) + " vs input " + shape_str(u.shape()));
  const std::size_t l = u.rows(), e = u.cols(), w = kernel.cols();
  DenseArray out = DenseArray::matrix(l, e);
  for (std::size_t t = 0; t < l; ++t) {
    auto dst = out.row(t);
    for (std::size_t j = 0; j < w; ++j) {
      // tap j looks back (w - 1 - j) steps in scan order
      const std::size_t lag = w - 1 - j;
      std::ptrdiff_t src = dir == ScanDirection::forward ? static_cast<std::ptrdiff_t>(t) - static_cast<std::ptrdiff_t>(lag)
                                                          : static_cast<std::ptrdiff_t>(t + lag);
      ops.add(2 * e);
      if (src < 0 || src >= static_cast<std::ptrdiff_t>(l)) continue;
      auto in = u.row(static_cast<std::size_t>(src));
      for (std::size_t c = 0; c < e; ++c) dst[c] += kernel(c, j) * in[c];
    }
  }
  return out;
}

// SiLU(conv(u)) for one head, in original token order.
template <class Counter = NoCount>
DenseArray head_input(const DenseArray& u, const SsmHeadParams& head, Counter&& ops = Counter{}) {
  DenseArray x = causal_conv(u, head.conv_kernel, head.direction, ops);
  silu_inplace(x, ops);
  return x;
}

struct BlockOutput {
  DenseArray y;                  // L x D, includes the residual
  std::vector<ScanTrace> traces; // one per head
};

// y = x + out_proj(SiLU(z) * sum_heads scan_h(SiLU(conv_h(u)))), (u, z) = LN(x) in_proj.
template <class Counter = NoCount>
BlockOutput mamba_block(const DenseArray& x, const SsmBlockParams& p, const ScanOptions& opt = {},
                        Counter&& ops = Counter{}) {
  require_matrix(x, "mamba_block");
  if (x.cols() != p.model_dim())
    throw DimensionError("mamba_block: input " + shape_str(x.shape()) + " vs model width " +
                         std::to_string(p.model_dim()));
  const std::size_t l = x.rows(), e = p.inner_dim();
  const DenseArray normed = layernorm(x, p.norm_scale, p.norm_bias, 1e-5f, ops);
  const DenseArray uz = matmul(normed, p.in_proj, ops);
  const DenseArray u = column_slice(uz, 0, e);
  DenseArray z = column_slice(uz, e, e);

  BlockOutput out;
  out.traces.reserve(p.heads.size());
  DenseArray mixed = DenseArray::matrix(l, e);
  for (const auto& head : p.heads) {
    ScanTrace tr = selective_scan(head_input(u, head, ops), head, opt, ops);
    for (std::size_t i = 0; i < mixed.size(); ++i) mixed[i] += tr.y[i];
    ops.add(l * e);
    out.traces.push_back(std::move(tr));
  }
  silu_inplace(z, ops);
  for (std::size_t i = 0; i < mixed.size(); ++i) mixed[i] *= z[i];
  ops.add(l * e);
  const DenseArray proj = matmul(mixed, p.out_proj, ops);
  out.y = x;
  for (std::size_t i = 0; i < out.y.size(); ++i) out.y[i] += proj[i];
  ops.add(x.size());
  return out;
}

}  // namespace mtr
