// Copyright (C) 2026 The tokensel authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <string>
#include <string_view>
#include <vector>

#include "tokensel/errors.hpp"
#include "tokensel/tensor.hpp"

// Differentiable operator set. Only the operations the selection pipeline
// actually uses are implemented; there is no general broadcasting engine.
// Binary elementwise ops accept equal shapes or a scalar on either side.

namespace tokensel {
namespace detail {

inline Tape* common_tape(const Tensor& a) {
  return a.requires_grad() ? a.tape() : nullptr;
}

inline Tape* common_tape(const Tensor& a, const Tensor& b) {
  Tape* tape = nullptr;
  for (const Tensor* t : {&a, &b}) {
    if (!t->requires_grad()) continue;
    if (tape != nullptr && tape != t->tape()) {
      throw InputError("operands live on different tapes");
    }
    tape = t->tape();
  }
  return tape;
}

inline void check_same_shape(std::string_view op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " +
                         shape_to_string(a.shape()) + " vs " +
                         shape_to_string(b.shape()));
  }
}

inline bool is_scalar(const Tensor& t) { return t.size() == 1; }

}  // namespace detail

// --- binary elementwise ------------------------------------------------------

namespace detail {

// op_fwd(a, b) -> value; da(upstream, a_val, b_val), db(...) -> contributions.
template <typename Fwd, typename Da, typename Db>
Tensor binary_elementwise(std::string_view name, const Tensor& a, const Tensor& b,
                          Fwd fwd, Da da, Db db) {
  const bool a_scalar = is_scalar(a) && a.shape() != b.shape();
  const bool b_scalar = is_scalar(b) && a.shape() != b.shape();
  if (!a_scalar && !b_scalar) check_same_shape(name, a, b);

  const Tensor& big = a_scalar ? b : a;
  const std::size_t n = big.size();
  std::vector<double> out(n);
  const double* pa = a.data();
  const double* pb = b.data();
  for (std::size_t i = 0; i < n; ++i) {
    out[i] = fwd(pa[a_scalar ? 0 : i], pb[b_scalar ? 0 : i]);
  }
  Tensor result(big.shape(), std::move(out));

  Tape* tape = common_tape(a, b);
  if (tape == nullptr) return result;

  const int node_a = a.requires_grad() ? a.node() : -1;
  const int node_b = b.requires_grad() ? b.node() : -1;
  auto va = a.detached();
  auto vb = b.detached();
  return tape->bind(
      std::move(result), name, {node_a, node_b},
      [=](Tape& t, const std::vector<double>& upstream) {
        if (node_a >= 0) {
          std::vector<double> ga(va.size(), 0.0);
          for (std::size_t i = 0; i < upstream.size(); ++i) {
            ga[a_scalar ? 0 : i] +=
                da(upstream[i], va.data()[a_scalar ? 0 : i],
                   vb.data()[b_scalar ? 0 : i]);
          }
          t.accumulate(node_a, ga);
        }
        if (node_b >= 0) {
          std::vector<double> gb(vb.size(), 0.0);
          for (std::size_t i = 0; i < upstream.size(); ++i) {
            gb[b_scalar ? 0 : i] +=
                db(upstream[i], va.data()[a_scalar ? 0 : i],
                   vb.data()[b_scalar ? 0 : i]);
          }
          t.accumulate(node_b, gb);
        }
      });
}

template <typename Fwd, typename Dx>
Tensor unary_elementwise(std::string_view name, const Tensor& x, Fwd fwd, Dx dx) {
  const std::size_t n = x.size();
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = fwd(x.data()[i]);
  Tensor result(x.shape(), std::move(out));

  Tape* tape = common_tape(x);
  if (tape == nullptr) return result;
  const int node = x.node();
  auto vx = x.detached();
  auto vy = result.detached();
  return tape->bind(std::move(result), name, {node},
                    [=](Tape& t, const std::vector<double>& upstream) {
                      std::vector<double> g(upstream.size());
                      for (std::size_t i = 0; i < upstream.size(); ++i) {
                        g[i] = dx(upstream[i], vx.data()[i], vy.data()[i]);
                      }
                      t.accumulate(node, g);
                    });
}

}  // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) {
  return detail::binary_elementwise(
      "add", a, b, [](double x, double y) { return x + y; },
      [](double g, double, double) { return g; },
      [](double g, double, double) { return g; });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  return detail::binary_elementwise(
      "sub", a, b, [](double x, double y) { return x - y; },
      [](double g, double, double) { return g; },
      [](double g, double, double) { return -g; });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  return detail::binary_elementwise(
      "mul", a, b, [](double x, double y) { return x * y; },
      [](double g, double, double y) { return g * y; },
      [](double g, double x, double) { return g * x; });
}

inline Tensor neg(const Tensor& x) {
  return detail::unary_elementwise(
      "neg", x, [](double v) { return -v; },
      [](double g, double, double) { return -g; });
}

inline Tensor scale(const Tensor& x, double c) {
  return detail::unary_elementwise(
      "scale", x, [c](double v) { return c * v; },
      [c](double g, double, double) { return c * g; });
}

inline Tensor sigmoid(const Tensor& x) {
  return detail::unary_elementwise(
      "sigmoid", x,
      [](double v) {
        // Split by sign for numerical stability at large |v|.
        if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
        const double e = std::exp(v);
        return e / (1.0 + e);
      },
      [](double g, double, double y) { return g * y * (1.0 - y); });
}

inline Tensor log(const Tensor& x) {
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (!(x.data()[i] > 0.0)) {
      throw DomainError("log: non-positive input " + std::to_string(x.data()[i]));
    }
  }
  return detail::unary_elementwise(
      "log", x, [](double v) { return std::log(v); },
      [](double g, double v, double) { return g / v; });
}

inline Tensor tanh(const Tensor& x) {
  return detail::unary_elementwise(
      "tanh", x, [](double v) { return std::tanh(v); },
      [](double g, double, double y) { return g * (1.0 - y * y); });
}

// Values clamped into [lo, hi]; gradients pass through inside the interval
// (boundary inclusive) and are zero outside.
inline Tensor clamp(const Tensor& x, double lo, double hi) {
  return detail::unary_elementwise(
      "clamp", x, [lo, hi](double v) { return std::min(std::max(v, lo), hi); },
      [lo, hi](double g, double v, double) {
        return (v >= lo && v <= hi) ? g : 0.0;
      });
}

// --- matrix products ---------------------------------------------------------

namespace detail {

struct MatmulDims {
  std::size_t batch;  // 1 for plain 2-D
  std::size_t m, p, n;
  bool a_batched;
  bool b_batched;
};

inline MatmulDims matmul_dims(std::string_view op, const Tensor& a, const Tensor& b,
                              bool b_transposed) {
  const auto fail = [&]() -> MatmulDims {
    throw DimensionError(std::string(op) + ": incompatible shapes " +
                         shape_to_string(a.shape()) + " and " +
                         shape_to_string(b.shape()));
  };
  if (a.ndim() < 2 || a.ndim() > 3 || b.ndim() < 2 || b.ndim() > 3) return fail();

  MatmulDims d{};
  d.a_batched = a.ndim() == 3;
  d.b_batched = b.ndim() == 3;
  d.m = a.dim(d.a_batched ? 1 : 0);
  d.p = a.dim(d.a_batched ? 2 : 1);
  const std::size_t b_rows = b.dim(d.b_batched ? 1 : 0);
  const std::size_t b_cols = b.dim(d.b_batched ? 2 : 1);
  if (b_transposed) {
    d.n = b_rows;
    if (b_cols != d.p) return fail();
  } else {
    d.n = b_cols;
    if (b_rows != d.p) return fail();
  }
  if (d.a_batched && d.b_batched && a.dim(0) != b.dim(0)) return fail();
  d.batch = d.a_batched ? a.dim(0) : (d.b_batched ? b.dim(0) : 1);
  return d;
}

// C[batch] = A[batch] * B[batch] with optional transposes of either operand,
// accumulating into `out` (which must be pre-sized and zeroed by the caller).
inline void matmul_kernel(const double* a, const double* b, double* out,
                          std::size_t m, std::size_t p, std::size_t n,
                          bool at, bool bt) {
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t k = 0; k < p; ++k) {
      const double av = at ? a[k * m + i] : a[i * p + k];
      if (av == 0.0) continue;
      if (bt) {
        for (std::size_t j = 0; j < n; ++j) out[i * n + j] += av * b[j * p + k];
      } else {
        for (std::size_t j = 0; j < n; ++j) out[i * n + j] += av * b[k * n + j];
      }
    }
  }
}

inline Tensor matmul_impl(std::string_view name, const Tensor& a, const Tensor& b,
                          bool b_transposed) {
  const MatmulDims d = matmul_dims(name, a, b, b_transposed);
  Shape out_shape = d.a_batched || d.b_batched ? Shape{d.batch, d.m, d.n}
                                               : Shape{d.m, d.n};
  std::vector<double> out(shape_size(out_shape), 0.0);

  const std::size_t a_stride = d.m * d.p;
  const std::size_t b_stride = b_transposed ? d.n * d.p : d.p * d.n;
  for (std::size_t bi = 0; bi < d.batch; ++bi) {
    const double* pa = a.data() + (d.a_batched ? bi * a_stride : 0);
    const double* pb = b.data() + (d.b_batched ? bi * b_stride : 0);
    matmul_kernel(pa, pb, out.data() + bi * d.m * d.n, d.m, d.p, d.n,
                  /*at=*/false, /*bt=*/b_transposed);
  }
  Tensor result(out_shape, std::move(out));

  Tape* tape = common_tape(a, b);
  if (tape == nullptr) return result;
  const int node_a = a.requires_grad() ? a.node() : -1;
  const int node_b = b.requires_grad() ? b.node() : -1;
  auto va = a.detached();
  auto vb = b.detached();
  return tape->bind(
      std::move(result), name, {node_a, node_b},
      [=](Tape& t, const std::vector<double>& upstream) {
        if (node_a >= 0) {
          // dA = g * B^T (plain) or g * B (nt variant), per batch.
          std::vector<double> ga(va.size(), 0.0);
          for (std::size_t bi = 0; bi < d.batch; ++bi) {
            const double* pg = upstream.data() + bi * d.m * d.n;
            const double* pb = vb.data() + (d.b_batched ? bi * b_stride : 0);
            double* pga = ga.data() + (d.a_batched ? bi * a_stride : 0);
            matmul_kernel(pg, pb, pga, d.m, d.n, d.p, /*at=*/false,
                          /*bt=*/!b_transposed);
          }
          t.accumulate(node_a, ga);
        }
        if (node_b >= 0) {
          std::vector<double> gb(vb.size(), 0.0);
          for (std::size_t bi = 0; bi < d.batch; ++bi) {
            const double* pg = upstream.data() + bi * d.m * d.n;
            const double* pa = va.data() + (d.a_batched ? bi * a_stride : 0);
            double* pgb = gb.data() + (d.b_batched ? bi * b_stride : 0);
            if (b_transposed) {
              // dB = g^T * A, shape [n, p].
              matmul_kernel(pg, pa, pgb, d.n, d.m, d.p, /*at=*/true, /*bt=*/false);
            } else {
              // dB = A^T * g, shape [p, n].
              matmul_kernel(pa, pg, pgb, d.p, d.m, d.n, /*at=*/true, /*bt=*/false);
            }
          }
          t.accumulate(node_b, gb);
        }
      });
}

}  // namespace detail

// Standard matrix product. Supports 2-D x 2-D, batched 3-D x shared 2-D, and
// batched 3-D x 3-D with matching batch dimension.
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  return detail::matmul_impl("matmul", a, b, /*b_transposed=*/false);
}

// a[..., m, p] times b[..., n, p] transposed on its last two axes.
inline Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  return detail::matmul_impl("matmul_nt", a, b, /*b_transposed=*/true);
}

// x[R, C] + row vector v[C], broadcast over rows.
inline Tensor add_rowvec(const Tensor& x, const Tensor& v) {
  if (x.ndim() != 2 || v.ndim() != 1 || x.dim(1) != v.dim(0)) {
    throw DimensionError("add_rowvec: incompatible shapes " +
                         shape_to_string(x.shape()) + " and " +
                         shape_to_string(v.shape()));
  }
  const std::size_t rows = x.dim(0), cols = x.dim(1);
  std::vector<double> out(x.size());
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) {
      out[r * cols + c] = x.data()[r * cols + c] + v.data()[c];
    }
  }
  Tensor result(x.shape(), std::move(out));

  Tape* tape = detail::common_tape(x, v);
  if (tape == nullptr) return result;
  const int node_x = x.requires_grad() ? x.node() : -1;
  const int node_v = v.requires_grad() ? v.node() : -1;
  return tape->bind(std::move(result), "add_rowvec", {node_x, node_v},
                    [=](Tape& t, const std::vector<double>& upstream) {
                      if (node_x >= 0) t.accumulate(node_x, upstream);
                      if (node_v >= 0) {
                        std::vector<double> gv(cols, 0.0);
                        for (std::size_t r = 0; r < rows; ++r) {
                          for (std::size_t c = 0; c < cols; ++c) {
                            gv[c] += upstream[r * cols + c];
                          }
                        }
                        t.accumulate(node_v, gv);
                      }
                    });
}

// --- reductions --------------------------------------------------------------

inline Tensor sum(const Tensor& x) {
  double acc = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) acc += x.data()[i];
  Tensor result = Tensor::scalar(acc);

  Tape* tape = detail::common_tape(x);
  if (tape == nullptr) return result;
  const int node = x.node();
  const std::size_t n = x.size();
  return tape->bind(std::move(result), "sum", {node},
                    [=](Tape& t, const std::vector<double>& upstream) {
                      std::vector<double> g(n, upstream[0]);
                      t.accumulate(node, g);
                    });
}

inline Tensor mean(const Tensor& x) {
  if (x.empty()) throw DimensionError("mean: empty tensor");
  return scale(sum(x), 1.0 / static_cast<double>(x.size()));
}

namespace detail {

inline Tensor reduce_axis_2d(std::string_view name, const Tensor& x, std::size_t axis,
                             bool take_mean) {
  if (x.ndim() != 2) {
    throw DimensionError(std::string(name) + ": expected 2-D tensor, got " +
                         shape_to_string(x.shape()));
  }
  if (axis > 1) {
    throw DimensionError(std::string(name) + ": invalid axis " +
                         std::to_string(axis) + " for shape " +
                         shape_to_string(x.shape()));
  }
  const std::size_t rows = x.dim(0), cols = x.dim(1);
  const std::size_t out_n = axis == 0 ? cols : rows;
  const std::size_t reduced = axis == 0 ? rows : cols;
  const double w = take_mean ? 1.0 / static_cast<double>(reduced) : 1.0;

  std::vector<double> out(out_n, 0.0);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) {
      out[axis == 0 ? c : r] += x.data()[r * cols + c];
    }
  }
  for (double& v : out) v *= w;
  Tensor result({out_n}, std::move(out));

  Tape* tape = common_tape(x);
  if (tape == nullptr) return result;
  const int node = x.node();
  return tape->bind(std::move(result), name, {node},
                    [=](Tape& t, const std::vector<double>& upstream) {
                      std::vector<double> g(rows * cols);
                      for (std::size_t r = 0; r < rows; ++r) {
                        for (std::size_t c = 0; c < cols; ++c) {
                          g[r * cols + c] = w * upstream[axis == 0 ? c : r];
                        }
                      }
                      t.accumulate(node, g);
                    });
}

}  // namespace detail

inline Tensor sum_axis(const Tensor& x, std::size_t axis) {
  return detail::reduce_axis_2d("sum_axis", x, axis, /*take_mean=*/false);
}

inline Tensor mean_axis(const Tensor& x, std::size_t axis) {
  return detail::reduce_axis_2d("mean_axis", x, axis, /*take_mean=*/true);
}

// --- masked / padded helpers -------------------------------------------------

// Row means over the valid prefix of the last axis: out[b, i] is the mean of
// x[b, i, j] for j < valid[b]. Padded columns contribute nothing and get zero
// gradient.
inline Tensor row_mean_valid(const Tensor& x, const std::vector<int>& valid) {
  if (x.ndim() != 3) {
    throw DimensionError("row_mean_valid: expected 3-D tensor, got " +
                         shape_to_string(x.shape()));
  }
  const std::size_t batch = x.dim(0), rows = x.dim(1), cols = x.dim(2);
  if (valid.size() != batch) {
    throw DimensionError("row_mean_valid: valid-length count mismatch");
  }
  for (int v : valid) {
    if (v < 1 || static_cast<std::size_t>(v) > cols) {
      throw InputError("row_mean_valid: valid length " + std::to_string(v) +
                       " outside [1, " + std::to_string(cols) + "]");
    }
  }

  std::vector<double> out(batch * rows, 0.0);
  for (std::size_t b = 0; b < batch; ++b) {
    const std::size_t nv = static_cast<std::size_t>(valid[b]);
    for (std::size_t i = 0; i < rows; ++i) {
      double acc = 0.0;
      const double* row = x.data() + (b * rows + i) * cols;
      for (std::size_t j = 0; j < nv; ++j) acc += row[j];
      out[b * rows + i] = acc / static_cast<double>(nv);
    }
  }
  Tensor result({batch, rows}, std::move(out));

  Tape* tape = detail::common_tape(x);
  if (tape == nullptr) return result;
  const int node = x.node();
  auto valid_copy = valid;
  return tape->bind(std::move(result), "row_mean_valid", {node},
                    [=](Tape& t, const std::vector<double>& upstream) {
                      std::vector<double> g(batch * rows * cols, 0.0);
                      for (std::size_t b = 0; b < batch; ++b) {
                        const std::size_t nv =
                            static_cast<std::size_t>(valid_copy[b]);
                        const double inv = 1.0 / static_cast<double>(nv);
                        for (std::size_t i = 0; i < rows; ++i) {
                          const double gv = upstream[b * rows + i] * inv;
                          double* row = g.data() + (b * rows + i) * cols;
                          for (std::size_t j = 0; j < nv; ++j) row[j] = gv;
                        }
                      }
                      t.accumulate(node, g);
                    });
}

// Overwrites padded positions (index >= valid[b]) of x[B, N] with a constant
// sentinel; gradients at those positions are dropped.
inline Tensor pad_sentinel(const Tensor& x, const std::vector<int>& valid,
                           double sentinel) {
  if (x.ndim() != 2) {
    throw DimensionError("pad_sentinel: expected 2-D tensor, got " +
                         shape_to_string(x.shape()));
  }
  const std::size_t batch = x.dim(0), cols = x.dim(1);
  if (valid.size() != batch) {
    throw DimensionError("pad_sentinel: valid-length count mismatch");
  }

  std::vector<double> out(x.values());
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t j = static_cast<std::size_t>(valid[b]); j < cols; ++j) {
      out[b * cols + j] = sentinel;
    }
  }
  Tensor result(x.shape(), std::move(out));

  Tape* tape = detail::common_tape(x);
  if (tape == nullptr) return result;
  const int node = x.node();
  auto valid_copy = valid;
  return tape->bind(std::move(result), "pad_sentinel", {node},
                    [=](Tape& t, const std::vector<double>& upstream) {
                      std::vector<double> g(upstream);
                      for (std::size_t b = 0; b < batch; ++b) {
                        for (std::size_t j = static_cast<std::size_t>(valid_copy[b]);
                             j < cols; ++j) {
                          g[b * cols + j] = 0.0;
                        }
                      }
                      t.accumulate(node, g);
                    });
}

// Normalized mask-weighted pooling over tokens:
//   out[b] = sum_i w[b,i] * x[b,i,:] / sum_i w[b,i],  i < valid[b].
// Differentiable in both the weights and the token features.
inline Tensor weighted_pool(const Tensor& x, const Tensor& w,
                            const std::vector<int>& valid) {
  if (x.ndim() != 3 || w.ndim() != 2 || x.dim(0) != w.dim(0) ||
      x.dim(1) != w.dim(1)) {
    throw DimensionError("weighted_pool: incompatible shapes " +
                         shape_to_string(x.shape()) + " and " +
                         shape_to_string(w.shape()));
  }
  const std::size_t batch = x.dim(0), tokens = x.dim(1), depth = x.dim(2);
  if (valid.size() != batch) {
    throw DimensionError("weighted_pool: valid-length count mismatch");
  }

  std::vector<double> out(batch * depth, 0.0);
  std::vector<double> wsum(batch, 0.0);
  for (std::size_t b = 0; b < batch; ++b) {
    const std::size_t nv = static_cast<std::size_t>(valid[b]);
    for (std::size_t i = 0; i < nv; ++i) {
      const double wi = w.data()[b * tokens + i];
      wsum[b] += wi;
      const double* row = x.data() + (b * tokens + i) * depth;
      for (std::size_t d = 0; d < depth; ++d) out[b * depth + d] += wi * row[d];
    }
    if (!(wsum[b] > 0.0)) {
      throw InputError("weighted_pool: non-positive weight sum in row " +
                       std::to_string(b));
    }
    for (std::size_t d = 0; d < depth; ++d) out[b * depth + d] /= wsum[b];
  }
  Tensor result({batch, depth}, std::move(out));

  Tape* tape = detail::common_tape(x, w);
  if (tape == nullptr) return result;
  const int node_x = x.requires_grad() ? x.node() : -1;
  const int node_w = w.requires_grad() ? w.node() : -1;
  auto vx = x.detached();
  auto vw = w.detached();
  auto pooled = result.detached();
  auto valid_copy = valid;
  auto wsum_copy = wsum;
  return tape->bind(
      std::move(result), "weighted_pool", {node_x, node_w},
      [=](Tape& t, const std::vector<double>& upstream) {
        if (node_x >= 0) {
          std::vector<double> gx(vx.size(), 0.0);
          for (std::size_t b = 0; b < batch; ++b) {
            const std::size_t nv = static_cast<std::size_t>(valid_copy[b]);
            for (std::size_t i = 0; i < nv; ++i) {
              const double c = vw.data()[b * tokens + i] / wsum_copy[b];
              double* row = gx.data() + (b * tokens + i) * depth;
              for (std::size_t d = 0; d < depth; ++d) {
                row[d] = c * upstream[b * depth + d];
              }
            }
          }
          t.accumulate(node_x, gx);
        }
        if (node_w >= 0) {
          // d out[b]/d w[b,i] = (x[b,i] - out[b]) / wsum[b]
          std::vector<double> gw(vw.size(), 0.0);
          for (std::size_t b = 0; b < batch; ++b) {
            const std::size_t nv = static_cast<std::size_t>(valid_copy[b]);
            for (std::size_t i = 0; i < nv; ++i) {
              const double* row = vx.data() + (b * tokens + i) * depth;
              double acc = 0.0;
              for (std::size_t d = 0; d < depth; ++d) {
                acc += upstream[b * depth + d] *
                       (row[d] - pooled.data()[b * depth + d]);
              }
              gw[b * tokens + i] = acc / wsum_copy[b];
            }
          }
          t.accumulate(node_w, gw);
        }
      });
}

// Mean of x[B, N] over valid positions of every row, as a scalar.
inline Tensor masked_mean_all(const Tensor& x, const std::vector<int>& valid) {
  if (x.ndim() != 2) {
    throw DimensionError("masked_mean_all: expected 2-D tensor, got " +
                         shape_to_string(x.shape()));
  }
  const std::size_t batch = x.dim(0), cols = x.dim(1);
  if (valid.size() != batch) {
    throw DimensionError("masked_mean_all: valid-length count mismatch");
  }
  std::size_t total = 0;
  double acc = 0.0;
  for (std::size_t b = 0; b < batch; ++b) {
    const std::size_t nv = static_cast<std::size_t>(valid[b]);
    total += nv;
    for (std::size_t j = 0; j < nv; ++j) acc += x.data()[b * cols + j];
  }
  if (total == 0) throw InputError("masked_mean_all: no valid positions");
  Tensor result = Tensor::scalar(acc / static_cast<double>(total));

  Tape* tape = detail::common_tape(x);
  if (tape == nullptr) return result;
  const int node = x.node();
  auto valid_copy = valid;
  const double inv = 1.0 / static_cast<double>(total);
  return tape->bind(std::move(result), "masked_mean_all", {node},
                    [=](Tape& t, const std::vector<double>& upstream) {
                      std::vector<double> g(batch * cols, 0.0);
                      for (std::size_t b = 0; b < batch; ++b) {
                        const std::size_t nv =
                            static_cast<std::size_t>(valid_copy[b]);
                        for (std::size_t j = 0; j < nv; ++j) {
                          g[b * cols + j] = upstream[0] * inv;
                        }
                      }
                      t.accumulate(node, g);
                    });
}

// Mean cross-entropy of logits[B, C] against integer labels, computed through
// a max-shifted log-sum-exp. Backward is the usual softmax-minus-onehot form.
inline Tensor cross_entropy(const Tensor& logits, const std::vector<int>& labels) {
  if (logits.ndim() != 2) {
    throw DimensionError("cross_entropy: expected 2-D logits, got " +
                         shape_to_string(logits.shape()));
  }
  const std::size_t batch = logits.dim(0), classes = logits.dim(1);
  if (labels.size() != batch) {
    throw DimensionError("cross_entropy: label count mismatch");
  }
  for (int label : labels) {
    if (label < 0 || static_cast<std::size_t>(label) >= classes) {
      throw InputError("cross_entropy: label " + std::to_string(label) +
                       " outside [0, " + std::to_string(classes) + ")");
    }
  }

  std::vector<double> softmax(batch * classes);
  double loss = 0.0;
  for (std::size_t b = 0; b < batch; ++b) {
    const double* row = logits.data() + b * classes;
    double hi = row[0];
    for (std::size_t c = 1; c < classes; ++c) hi = std::max(hi, row[c]);
    double z = 0.0;
    for (std::size_t c = 0; c < classes; ++c) {
      softmax[b * classes + c] = std::exp(row[c] - hi);
      z += softmax[b * classes + c];
    }
    for (std::size_t c = 0; c < classes; ++c) softmax[b * classes + c] /= z;
    const double log_z = std::log(z) + hi;
    loss += log_z - row[static_cast<std::size_t>(labels[b])];
  }
  loss /= static_cast<double>(batch);
  Tensor result = Tensor::scalar(loss);

  Tape* tape = detail::common_tape(logits);
  if (tape == nullptr) return result;
  const int node = logits.node();
  auto labels_copy = labels;
  auto soft = std::make_shared<std::vector<double>>(std::move(softmax));
  return tape->bind(std::move(result), "cross_entropy", {node},
                    [=](Tape& t, const std::vector<double>& upstream) {
                      std::vector<double> g(*soft);
                      const double w = upstream[0] / static_cast<double>(batch);
                      for (std::size_t b = 0; b < batch; ++b) {
                        g[b * classes + static_cast<std::size_t>(labels_copy[b])] -=
                            1.0;
                        for (std::size_t c = 0; c < classes; ++c) {
                          g[b * classes + c] *= w;
                        }
                      }
                      t.accumulate(node, g);
                    });
}

}  // namespace tokensel
