// Copyright (C) 2026 The tokensel authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <string>
#include <vector>

#include "tokensel/difftopk.hpp"
#include "tokensel/errors.hpp"
#include "tokensel/ops.hpp"
#include "tokensel/tensor.hpp"

// Composite training objective: downstream cross-entropy plus a constraint
// term that pulls the soft mask toward the hard Top-K target, weighted by a
// linearly annealed coefficient.

namespace tokensel {

// Soft-mask values are clamped into [eps, 1 - eps] before the logs.
inline constexpr double kBceEpsilon = 1e-7;

struct AnnealSchedule {
  double lambda_start = 0.1;
  double lambda_end = 2.0;
  long long total_steps = 1;
};

// lambda_t = lambda_start + (lambda_end - lambda_start) * min(t / t_total, 1).
inline double lambda_at(const AnnealSchedule& schedule, long long step) {
  if (schedule.total_steps < 1) {
    throw ConfigError("anneal schedule needs total_steps >= 1");
  }
  if (schedule.lambda_start > schedule.lambda_end) {
    throw ConfigError("anneal schedule needs lambda_start <= lambda_end");
  }
  if (step < 0) throw InputError("lambda_at: negative step");
  const double progress =
      std::min(static_cast<double>(step) / static_cast<double>(schedule.total_steps),
               1.0);
  return schedule.lambda_start +
         (schedule.lambda_end - schedule.lambda_start) * progress;
}

// Binary cross-entropy between the soft mask and the (detached) hard mask,
// averaged over valid positions. Differentiable through the soft mask only;
// the hard targets are constants.
inline Tensor constraint_loss(const Tensor& soft_mask, const HardMask& hard,
                              const std::vector<int>& valid) {
  if (soft_mask.shape() != hard.mask.shape()) {
    throw DimensionError("constraint_loss: mask shape mismatch " +
                         shape_to_string(soft_mask.shape()) + " vs " +
                         shape_to_string(hard.mask.shape()));
  }
  Tensor clamped = clamp(soft_mask, kBceEpsilon, 1.0 - kBceEpsilon);
  Tensor targets = hard.mask.detached();
  Tensor inverse_targets = sub(Tensor::scalar(1.0), targets);
  Tensor miss = sub(Tensor::scalar(1.0), clamped);
  Tensor log_likelihood =
      add(mul(targets, log(clamped)), mul(inverse_targets, log(miss)));
  return neg(masked_mean_all(log_likelihood, valid));
}

// Mean cross-entropy over the batch.
inline Tensor task_loss(const Tensor& logits, const std::vector<int>& labels) {
  return cross_entropy(logits, labels);
}

inline Tensor total_loss(const Tensor& task, const Tensor& constraint,
                         double lambda) {
  if (task.size() != 1 || constraint.size() != 1) {
    throw DimensionError("total_loss: both terms must be scalar");
  }
  return add(task, scale(constraint, lambda));
}

// Mean |M_soft - M_hard| over valid positions; the gap the curriculum closes.
inline double soft_hard_gap(const Tensor& soft_mask, const HardMask& hard,
                            const std::vector<int>& valid) {
  const std::size_t batch = soft_mask.dim(0);
  const std::size_t width = soft_mask.dim(1);
  double acc = 0.0;
  std::size_t total = 0;
  for (std::size_t b = 0; b < batch; ++b) {
    for (int j = 0; j < valid[b]; ++j) {
      const std::size_t idx = b * width + static_cast<std::size_t>(j);
      acc += std::abs(soft_mask.data()[idx] - hard.mask.data()[idx]);
      ++total;
    }
  }
  return acc / static_cast<double>(total);
}

}  // namespace tokensel
