// Copyright (C) 2026 The tokensel authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

#include "tokensel/errors.hpp"
#include "tokensel/log.hpp"
#include "tokensel/ops.hpp"
#include "tokensel/tensor.hpp"

// Differentiable Top-K selection.
//
// Forward: for each row of a score matrix, a scalar threshold t is solved by
// bisection so that sum_i sigmoid(s_i + t) == k over the row's valid region,
// giving a soft mask M = sigmoid(s + t) whose entries inherit the ordering of
// the scores. Backward applies the closed-form vector-Jacobian product of the
// implicit constraint instead of tracing the solver:
//   v = M * (1 - M),  grad_s = v .* g - (sum(v .* g) / sum(v)) * v.
// A hard Top-K path serves inference.

namespace tokensel {

// Fixed iteration count of the threshold bisection. The bracket shrinks by
// 2^-64, so the mask-sum constraint lands far inside its 1e-3 tolerance at
// constant cost.
inline constexpr int kBisectionIterations = 64;

// Bracket padding around the score extrema; the threshold always lies in
// [-max(s) - 10, -min(s) + 10].
inline constexpr double kBisectionPadding = 10.0;

struct SoftMaskResult {
  Tensor scores;          // [B, N], as passed in (may be tape-bound)
  Tensor threshold;       // [B], one solved scalar per row
  Tensor soft_mask;       // [B, N], entries in (0,1); exactly 0 at padding
  std::vector<int> k;     // per-row retained count
  std::vector<int> valid; // per-row valid length
};

struct HardMask {
  Tensor mask;            // [B, N], entries in {0,1}; 0 at padding
  std::vector<int> k;
};

// Counts rows whose backward pass hit a fully saturated mask (sum of
// sigmoid derivatives underflowed); those rows receive zero gradient.
inline std::atomic<std::uint64_t>& saturation_warning_count() {
  static std::atomic<std::uint64_t> count{0};
  return count;
}

// Retained count for a row: k = round(valid_len * b), half away from zero,
// clamped into [1, valid_len - 1] so the threshold stays solvable in both
// directions.
inline int budget_to_k(int valid_len, double budget) {
  if (!(budget > 0.0 && budget < 1.0)) {
    throw BudgetError("budget " + std::to_string(budget) +
                      " outside the open interval (0, 1)");
  }
  if (valid_len < 2) {
    throw BudgetError("valid length " + std::to_string(valid_len) +
                      " leaves no room for selection (need >= 2 tokens)");
  }
  long long k = std::llround(static_cast<double>(valid_len) * budget);
  k = std::max(1ll, std::min(static_cast<long long>(valid_len) - 1, k));
  return static_cast<int>(k);
}

namespace detail {

inline void check_difftopk_args(const Tensor& scores, const std::vector<int>& k,
                                const std::vector<int>& valid, bool allow_full_k) {
  if (scores.ndim() != 2) {
    throw DimensionError("diff-topk scores must be 2-D, got " +
                         shape_to_string(scores.shape()));
  }
  const std::size_t batch = scores.dim(0);
  const std::size_t width = scores.dim(1);
  if (k.size() != batch || valid.size() != batch) {
    throw DimensionError("diff-topk: per-row k/valid counts do not match batch");
  }
  for (std::size_t b = 0; b < batch; ++b) {
    if (valid[b] < 1 || static_cast<std::size_t>(valid[b]) > width) {
      throw InputError("diff-topk: valid length " + std::to_string(valid[b]) +
                       " outside [1, " + std::to_string(width) + "]");
    }
    const int hi = allow_full_k ? valid[b] : valid[b] - 1;
    if (k[b] < 1 || k[b] > hi) {
      throw BudgetError("diff-topk: k=" + std::to_string(k[b]) +
                        " outside [1, " + std::to_string(hi) + "] for row " +
                        std::to_string(b));
    }
    for (int j = 0; j < valid[b]; ++j) {
      const double v = scores.data()[b * width + static_cast<std::size_t>(j)];
      if (!std::isfinite(v)) {
        throw InputError("diff-topk: non-finite score at row " +
                         std::to_string(b) + ", position " + std::to_string(j));
      }
    }
  }
}

inline double sigmoid_scalar(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace detail

// Solves the per-row sigmoid threshold by bisection over the valid region.
// Exactly kBisectionIterations halvings of the initial bracket
// [-max(s) - 10, -min(s) + 10]; the result is the midpoint of the final
// bracket.
inline Tensor find_threshold(const Tensor& scores, const std::vector<int>& k,
                             const std::vector<int>& valid) {
  detail::check_difftopk_args(scores, k, valid, /*allow_full_k=*/false);
  const std::size_t batch = scores.dim(0);
  const std::size_t width = scores.dim(1);

  std::vector<double> threshold(batch);
  for (std::size_t b = 0; b < batch; ++b) {
    const double* row = scores.data() + b * width;
    const std::size_t nv = static_cast<std::size_t>(valid[b]);
    double lo = row[0], hi = row[0];
    for (std::size_t j = 1; j < nv; ++j) {
      lo = std::min(lo, row[j]);
      hi = std::max(hi, row[j]);
    }
    double lower = -hi - kBisectionPadding;
    double upper = -lo + kBisectionPadding;
    const double target = static_cast<double>(k[b]);
    for (int iter = 0; iter < kBisectionIterations; ++iter) {
      const double mid = 0.5 * (lower + upper);
      double mask_sum = 0.0;
      for (std::size_t j = 0; j < nv; ++j) {
        mask_sum += detail::sigmoid_scalar(row[j] + mid);
      }
      if (mask_sum < target) {
        lower = mid;
      } else {
        upper = mid;
      }
    }
    threshold[b] = 0.5 * (lower + upper);
  }
  return Tensor({batch}, std::move(threshold));
}

// Closed-form VJP of the soft mask with respect to the scores. Public so the
// gradient checker can exercise (and deliberately sabotage) it in isolation.
inline Tensor diff_topk_backward(const Tensor& soft_mask,
                                 const std::vector<int>& valid,
                                 const Tensor& upstream) {
  if (soft_mask.shape() != upstream.shape() || soft_mask.ndim() != 2) {
    throw DimensionError("diff_topk_backward: shape mismatch " +
                         shape_to_string(soft_mask.shape()) + " vs " +
                         shape_to_string(upstream.shape()));
  }
  const std::size_t batch = soft_mask.dim(0);
  const std::size_t width = soft_mask.dim(1);
  Tensor grad = Tensor::zeros(soft_mask.shape());

  bool warned = false;
  for (std::size_t b = 0; b < batch; ++b) {
    const double* m = soft_mask.data() + b * width;
    const double* g = upstream.data() + b * width;
    const std::size_t nv = static_cast<std::size_t>(valid[b]);

    double v_sum = 0.0, uv_sum = 0.0;
    for (std::size_t j = 0; j < nv; ++j) {
      const double v = m[j] * (1.0 - m[j]);
      v_sum += v;
      uv_sum += v * g[j];
    }
    if (v_sum < 1e-300) {
      // Fully saturated row: the implicit constraint carries no usable
      // derivative, so the row gets zero gradient.
      saturation_warning_count().fetch_add(1, std::memory_order_relaxed);
      if (!warned) {
        log_warn("saturated soft mask in backward pass, returning zero "
                 "gradient for the row");
        warned = true;
      }
      continue;
    }
    const double ratio = uv_sum / v_sum;
    double* out = grad.data() + b * width;
    for (std::size_t j = 0; j < nv; ++j) {
      const double v = m[j] * (1.0 - m[j]);
      out[j] = v * g[j] - ratio * v;
    }
  }
  return grad;
}

namespace detail {

// DiffTopK registered as a custom operator: inputs (scores, k, valid) with
// gradients only for the scores; saved values (soft mask, valid mask,
// threshold). The bisection runs on detached values and leaves no tape nodes.
inline int difftopk_op_id() {
  static const int id = register_custom_op(CustomOp{
      "diff_topk",
      [](const std::vector<Tensor>& inputs) -> CustomOpResult {
        const Tensor& scores = inputs[0];
        const std::size_t batch = scores.dim(0);
        const std::size_t width = scores.dim(1);
        std::vector<int> k(batch), valid(batch);
        for (std::size_t b = 0; b < batch; ++b) {
          k[b] = static_cast<int>(inputs[1].data()[b]);
          valid[b] = static_cast<int>(inputs[2].data()[b]);
        }

        Tensor threshold = find_threshold(scores, k, valid);

        // Keep entries inside the open interval even for extreme score gaps.
        const double mask_floor = std::numeric_limits<double>::denorm_min();
        const double mask_ceil = std::nextafter(1.0, 0.0);
        Tensor mask = Tensor::zeros(scores.shape());
        Tensor valid_mask = Tensor::zeros(scores.shape());
        for (std::size_t b = 0; b < batch; ++b) {
          const double t = threshold.data()[b];
          for (int j = 0; j < valid[b]; ++j) {
            const std::size_t idx = b * width + static_cast<std::size_t>(j);
            const double m = sigmoid_scalar(scores.data()[idx] + t);
            mask.data()[idx] = std::min(std::max(m, mask_floor), mask_ceil);
            valid_mask.data()[idx] = 1.0;
          }
        }
        return CustomOpResult{mask, {mask.detached(), valid_mask, threshold}};
      },
      [](const std::vector<Tensor>& saved,
         const Tensor& upstream) -> std::vector<Tensor> {
        const Tensor& mask = saved[0];
        const Tensor& valid_mask = saved[1];
        const std::size_t batch = mask.dim(0);
        const std::size_t width = mask.dim(1);
        std::vector<int> valid(batch, 0);
        for (std::size_t b = 0; b < batch; ++b) {
          int nv = 0;
          while (static_cast<std::size_t>(nv) < width &&
                 valid_mask.data()[b * width + static_cast<std::size_t>(nv)] > 0.5) {
            ++nv;
          }
          valid[b] = nv;
        }
        return {diff_topk_backward(mask, valid, upstream), Tensor(), Tensor()};
      }});
  return id;
}

}  // namespace detail

// Relaxed Top-K forward pass. The soft mask is sigma(s + t) on valid
// positions and exactly zero at padding; gradients flow to the scores through
// the implicit-differentiation rule.
inline SoftMaskResult diff_topk_forward(const Tensor& scores,
                                        const std::vector<int>& k,
                                        const std::vector<int>& valid) {
  detail::check_difftopk_args(scores, k, valid, /*allow_full_k=*/false);
  const std::size_t batch = scores.dim(0);

  Tensor k_t({batch});
  Tensor valid_t({batch});
  for (std::size_t b = 0; b < batch; ++b) {
    k_t.data()[b] = static_cast<double>(k[b]);
    valid_t.data()[b] = static_cast<double>(valid[b]);
  }

  AppliedCustomOp applied =
      apply_custom_op_with_saved(detail::difftopk_op_id(), {scores, k_t, valid_t});

  SoftMaskResult result;
  result.scores = scores;
  result.soft_mask = std::move(applied.output);
  result.threshold = applied.saved.at(2);
  result.k = k;
  result.valid = valid;
  return result;
}

// Convenience wrapper: single budget applied to every row.
inline SoftMaskResult diff_topk_forward_budget(const Tensor& scores, double budget,
                                               const std::vector<int>& valid) {
  std::vector<int> k(valid.size());
  for (std::size_t b = 0; b < valid.size(); ++b) k[b] = budget_to_k(valid[b], budget);
  return diff_topk_forward(scores, k, valid);
}

// Standard Top-K over the valid region: exactly k ones per row, ties broken
// toward the lowest index. No gradient path.
inline HardMask hard_topk(const Tensor& scores, const std::vector<int>& k,
                          const std::vector<int>& valid) {
  detail::check_difftopk_args(scores, k, valid, /*allow_full_k=*/true);
  const std::size_t batch = scores.dim(0);
  const std::size_t width = scores.dim(1);

  HardMask result;
  result.mask = Tensor::zeros(scores.shape());
  result.k = k;
  std::vector<int> order;
  for (std::size_t b = 0; b < batch; ++b) {
    const double* row = scores.data() + b * width;
    order.resize(static_cast<std::size_t>(valid[b]));
    std::iota(order.begin(), order.end(), 0);
    const auto by_score = [row](int lhs, int rhs) {
      if (row[lhs] != row[rhs]) return row[lhs] > row[rhs];
      return lhs < rhs;
    };
    std::partial_sort(order.begin(), order.begin() + k[b], order.end(), by_score);
    for (int i = 0; i < k[b]; ++i) {
      result.mask.data()[b * width + static_cast<std::size_t>(order[static_cast<std::size_t>(i)])] = 1.0;
    }
  }
  return result;
}

inline HardMask hard_topk_budget(const Tensor& scores, double budget,
                                 const std::vector<int>& valid) {
  std::vector<int> k(valid.size());
  for (std::size_t b = 0; b < valid.size(); ++b) k[b] = budget_to_k(valid[b], budget);
  return hard_topk(scores, k, valid);
}

// Indices selected by a hard mask, in increasing order.
inline std::vector<int> selected_indices(const HardMask& mask, std::size_t row) {
  const std::size_t width = mask.mask.dim(1);
  std::vector<int> indices;
  indices.reserve(static_cast<std::size_t>(mask.k[row]));
  for (std::size_t j = 0; j < width; ++j) {
    if (mask.mask.data()[row * width + j] > 0.5) {
      indices.push_back(static_cast<int>(j));
    }
  }
  return indices;
}

}  // namespace tokensel
