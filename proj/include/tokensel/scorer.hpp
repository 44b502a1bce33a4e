// Copyright (C) 2026 The tokensel authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "tokensel/errors.hpp"
#include "tokensel/ops.hpp"
#include "tokensel/rng.hpp"
#include "tokensel/tensor.hpp"

// Learnable importance scorer: two linear projections, a scaled interaction
// matrix, and a row mean producing one importance score per token.

namespace tokensel {

// Near-zero initialization keeps the initial soft mask uniform (scores ~ 0)
// without parking the bilinear form on an exactly-zero gradient plateau.
inline constexpr double kScorerInitStd = 1e-4;

// Sentinel written at padded score positions so they can never be selected.
inline constexpr double kPadScoreSentinel = -1e9;

struct ScorerParams {
  Tensor w_q;  // [D, d]
  Tensor w_k;  // [D, d]

  std::size_t input_dim() const { return w_q.dim(0); }
  std::size_t proj_dim() const { return w_q.dim(1); }
};

inline std::size_t scorer_param_count(std::size_t input_dim, std::size_t proj_dim) {
  return 2 * input_dim * proj_dim;
}

inline ScorerParams init_scorer(std::size_t input_dim, std::size_t proj_dim,
                                std::uint64_t seed) {
  if (input_dim < 1 || proj_dim < 1) {
    throw DimensionError("init_scorer: dimensions must be >= 1");
  }
  Rng rng(derive_seed(seed, "init"));
  ScorerParams params{Tensor({input_dim, proj_dim}), Tensor({input_dim, proj_dim})};
  for (Tensor* w : {&params.w_q, &params.w_k}) {
    for (std::size_t i = 0; i < w->size(); ++i) {
      w->data()[i] = rng.normal(0.0, kScorerInitStd);
    }
  }
  return params;
}

// Per-token importance scores for a padded batch of token features.
//   Q = V W_q, K = V W_k, A = Q K^T / sqrt(d), s_i = mean_j A_ij over valid j.
// Padded positions receive the sentinel and take no gradient. Differentiable
// with respect to both the features and the projections.
inline Tensor score(const Tensor& features, const ScorerParams& params,
                    const std::vector<int>& valid) {
  if (features.ndim() != 3 || features.dim(2) != params.input_dim()) {
    throw DimensionError("score: feature dim " + shape_to_string(features.shape()) +
                         " does not match scorer input dim " +
                         std::to_string(params.input_dim()));
  }
  Tensor queries = matmul(features, params.w_q);
  Tensor keys = matmul(features, params.w_k);
  Tensor interactions = scale(matmul_nt(queries, keys),
                              1.0 / std::sqrt(static_cast<double>(params.proj_dim())));
  Tensor scores = row_mean_valid(interactions, valid);
  return pad_sentinel(scores, valid, kPadScoreSentinel);
}

}  // namespace tokensel
