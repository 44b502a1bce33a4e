// Copyright (C) 2026 The tokensel authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "tokensel/difftopk.hpp"
#include "tokensel/objective.hpp"
#include "tokensel/ops.hpp"
#include "tokensel/pipeline.hpp"
#include "tokensel/rng.hpp"
#include "tokensel/scorer.hpp"
#include "tokensel/tensor.hpp"

// Finite-difference verification of the analytic gradients. The checks here
// never reuse the backward implementation they validate: expected gradients
// come from central differences through the full forward computation,
// bisection included.

namespace tokensel {

inline constexpr double kFiniteDiffStep = 1e-6;

// max|a - b| / max(1, max|a|, max|b|): relative for O(1) gradients, absolute
// for vanishing ones.
inline double gradient_relative_error(const std::vector<double>& analytic,
                                      const std::vector<double>& numeric) {
  if (analytic.size() != numeric.size()) {
    throw DimensionError("gradient_relative_error: size mismatch");
  }
  double diff = 0.0, norm = 1.0;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    diff = std::max(diff, std::abs(analytic[i] - numeric[i]));
    norm = std::max({norm, std::abs(analytic[i]), std::abs(numeric[i])});
  }
  return diff / norm;
}

// Central finite differences of a scalar function of a flat parameter vector.
template <typename F>
std::vector<double> central_difference(F&& fn, std::vector<double> x,
                                       double step = kFiniteDiffStep) {
  std::vector<double> grad(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double saved = x[i];
    x[i] = saved + step;
    const double hi = fn(x);
    x[i] = saved - step;
    const double lo = fn(x);
    x[i] = saved;
    grad[i] = (hi - lo) / (2.0 * step);
  }
  return grad;
}

struct GradcheckCase {
  std::string name;
  double max_rel_err = 0.0;
  double tolerance = 0.0;
  bool passed = false;
};

struct GradcheckReport {
  std::vector<GradcheckCase> cases;

  bool all_passed() const {
    for (const auto& c : cases) {
      if (!c.passed) return false;
    }
    return true;
  }
};

// Pluggable VJP so tests can verify that a sabotaged backward rule is caught.
using DiffTopkVjp = std::function<Tensor(const Tensor& soft_mask,
                                         const std::vector<int>& valid,
                                         const Tensor& upstream)>;

namespace detail {

// <g, M(s)> through the full forward pass, restricted to valid positions.
inline double difftopk_probe_loss(const std::vector<double>& flat_scores,
                                  const Shape& shape, const std::vector<int>& k,
                                  const std::vector<int>& valid,
                                  const Tensor& upstream) {
  Tensor scores(shape, flat_scores);
  SoftMaskResult soft = diff_topk_forward(scores, k, valid);
  const std::size_t width = shape[1];
  double loss = 0.0;
  for (std::size_t b = 0; b < shape[0]; ++b) {
    for (int j = 0; j < valid[b]; ++j) {
      const std::size_t idx = b * width + static_cast<std::size_t>(j);
      loss += upstream.data()[idx] * soft.soft_mask.data()[idx];
    }
  }
  return loss;
}

}  // namespace detail

// One randomized configuration: implicit-differentiation VJP against central
// differences through forward (bisection included). Returns the relative
// error.
inline double difftopk_config_error(Rng& rng, std::size_t batch, std::size_t width,
                                    const std::vector<int>& k,
                                    const std::vector<int>& valid,
                                    const DiffTopkVjp& vjp) {
  Tensor scores({batch, width});
  for (std::size_t i = 0; i < scores.size(); ++i) scores.data()[i] = rng.normal(0.0, 1.5);
  Tensor upstream({batch, width});
  for (std::size_t i = 0; i < upstream.size(); ++i) upstream.data()[i] = rng.normal();

  SoftMaskResult soft = diff_topk_forward(scores, k, valid);
  Tensor analytic = vjp(soft.soft_mask, valid, upstream);

  auto fd = central_difference(
      [&](const std::vector<double>& x) {
        return detail::difftopk_probe_loss(x, scores.shape(), k, valid, upstream);
      },
      scores.values());
  return gradient_relative_error(analytic.values(), fd);
}

inline DiffTopkVjp default_difftopk_vjp() {
  return [](const Tensor& mask, const std::vector<int>& valid, const Tensor& g) {
    return diff_topk_backward(mask, valid, g);
  };
}

// Worst relative error over `num_configs` random (B, N, k) configurations
// with N in {4..64} and per-row k in [1, N-1]; one in four configurations
// carries padded tail positions.
inline double difftopk_gradcheck(std::uint64_t seed, int num_configs,
                                 const DiffTopkVjp& vjp = default_difftopk_vjp()) {
  Rng rng(derive_seed(seed, "gradcheck-difftopk"));
  double worst = 0.0;
  for (int c = 0; c < num_configs; ++c) {
    const std::size_t batch = 1 + rng.integer(3);
    const std::size_t n = 4 + rng.integer(61);  // N in {4..64}
    const bool padded = c % 4 == 3;
    const std::size_t width = padded ? n + 1 + rng.integer(8) : n;
    std::vector<int> k(batch), valid(batch);
    for (std::size_t b = 0; b < batch; ++b) {
      valid[b] = static_cast<int>(n);
      k[b] = 1 + static_cast<int>(rng.integer(n - 1));  // [1, N-1]
    }
    worst = std::max(worst, difftopk_config_error(rng, batch, width, k, valid, vjp));
  }
  return worst;
}

// Scorer projections against finite differences of <g, score(V)> over valid
// positions.
inline double scorer_gradcheck(std::uint64_t seed) {
  Rng rng(derive_seed(seed, "gradcheck-scorer"));
  const std::size_t batch = 2, width = 6, dim = 8, proj = 4;
  Tensor features({batch, width, dim});
  for (std::size_t i = 0; i < features.size(); ++i) features.data()[i] = rng.normal();
  std::vector<int> valid{6, 4};
  Tensor upstream({batch, width});
  for (std::size_t i = 0; i < upstream.size(); ++i) upstream.data()[i] = rng.normal();

  ScorerParams params{Tensor({dim, proj}), Tensor({dim, proj})};
  for (Tensor* w : {&params.w_q, &params.w_k}) {
    for (std::size_t i = 0; i < w->size(); ++i) w->data()[i] = rng.normal(0.0, 0.3);
  }

  const auto probe = [&](const ScorerParams& p) {
    Tensor s = score(features, p, valid);
    double loss = 0.0;
    for (std::size_t b = 0; b < batch; ++b) {
      for (int j = 0; j < valid[b]; ++j) {
        const std::size_t idx = b * width + static_cast<std::size_t>(j);
        loss += upstream.data()[idx] * s.data()[idx];
      }
    }
    return loss;
  };

  double worst = 0.0;
  for (int which = 0; which < 2; ++which) {
    Tensor& target = which == 0 ? params.w_q : params.w_k;

    Tape tape;
    ScorerParams bound = params;
    (which == 0 ? bound.w_q : bound.w_k) = tape.watch(target);
    Tensor s = score(features, bound, valid);
    Tensor masked = pad_sentinel(mul(s, upstream), valid, 0.0);
    // pad_sentinel zeroes the padded terms, so the sum sees valid ones only.
    Tensor loss = sum(masked);
    tape.backward(loss);
    Tensor analytic = tape.grad(which == 0 ? bound.w_q : bound.w_k);

    auto fd = central_difference(
        [&](const std::vector<double>& x) {
          ScorerParams p = params;
          (which == 0 ? p.w_q : p.w_k) = Tensor(target.shape(), x);
          return probe(p);
        },
        target.values());
    worst = std::max(worst, gradient_relative_error(analytic.values(), fd));
  }
  return worst;
}

// Full composite loss (cross-entropy + annealed constraint) through scorer,
// DiffTopK, pooling and backbone, against finite differences over the scorer
// parameters. The hard-mask target is frozen at the base point, matching its
// detached role in the objective.
inline double end_to_end_gradcheck(std::uint64_t seed) {
  Rng rng(derive_seed(seed, "gradcheck-e2e"));
  const std::size_t batch = 2, width = 8, dim = 8, proj = 4;
  const std::size_t hidden = 6, classes = 3;
  const double budget = 0.25, lambda = 0.7;

  TokenBatch data;
  data.features = Tensor({batch, width, dim});
  for (std::size_t i = 0; i < data.features.size(); ++i) {
    data.features.data()[i] = rng.normal();
  }
  data.valid_len = {8, 6};
  data.label = {1, 2};

  FrozenBackbone backbone;
  backbone.w1 = Tensor({dim, hidden});
  backbone.b1 = Tensor({hidden});
  backbone.w2 = Tensor({hidden, classes});
  backbone.b2 = Tensor({classes});
  for (Tensor* t : {&backbone.w1, &backbone.b1, &backbone.w2, &backbone.b2}) {
    for (std::size_t i = 0; i < t->size(); ++i) t->data()[i] = rng.normal(0.0, 0.4);
  }

  ScorerParams params{Tensor({dim, proj}), Tensor({dim, proj})};
  for (Tensor* w : {&params.w_q, &params.w_k}) {
    for (std::size_t i = 0; i < w->size(); ++i) w->data()[i] = rng.normal(0.0, 0.2);
  }

  std::vector<int> k(batch);
  for (std::size_t b = 0; b < batch; ++b) {
    k[b] = budget_to_k(data.valid_len[b], budget);
  }
  // Frozen constraint target from the base-point scores.
  HardMask target =
      hard_topk(score(data.features, params, data.valid_len), k, data.valid_len);

  const auto loss_value = [&](const ScorerParams& p) {
    Tensor s = score(data.features, p, data.valid_len);
    SoftMaskResult soft = diff_topk_forward(s, k, data.valid_len);
    Tensor pooled = weighted_pool(data.features, soft.soft_mask, data.valid_len);
    Tensor logits = backbone_logits(backbone, pooled);
    Tensor task = task_loss(logits, data.label);
    Tensor constraint = constraint_loss(soft.soft_mask, target, data.valid_len);
    return total_loss(task, constraint, lambda);
  };

  Tape tape;
  ScorerParams bound{tape.watch(params.w_q), tape.watch(params.w_k)};
  Tensor loss = loss_value(bound);
  tape.backward(loss);

  double worst = 0.0;
  for (int which = 0; which < 2; ++which) {
    const Tensor& base = which == 0 ? params.w_q : params.w_k;
    Tensor analytic = tape.grad(which == 0 ? bound.w_q : bound.w_k);
    auto fd = central_difference(
        [&](const std::vector<double>& x) {
          ScorerParams p = params;
          (which == 0 ? p.w_q : p.w_k) = Tensor(base.shape(), x);
          return loss_value(p).item();
        },
        base.values());
    worst = std::max(worst, gradient_relative_error(analytic.values(), fd));
  }
  return worst;
}

// The suite behind the `gradcheck` CLI command and acceptance criterion:
// DiffTopK isolated (including the minimal N=2, k=1 case), the scorer, and
// the end-to-end composite loss.
inline GradcheckReport run_gradcheck_suite(std::uint64_t seed,
                                           int difftopk_configs = 100) {
  GradcheckReport report;
  const auto add = [&report](std::string name, double err, double tol) {
    report.cases.push_back({std::move(name), err, tol, err < tol});
  };

  {
    Rng rng(derive_seed(seed, "gradcheck-minimal"));
    const double err = difftopk_config_error(rng, 1, 2, {1}, {2},
                                             default_difftopk_vjp());
    add("difftopk_minimal_n2_k1", err, 1e-5);
  }
  add("difftopk_vjp_random_configs",
      difftopk_gradcheck(seed, difftopk_configs), 1e-5);
  add("scorer_projections", scorer_gradcheck(seed), 1e-5);
  add("end_to_end_loss", end_to_end_gradcheck(seed), 1e-4);
  return report;
}

}  // namespace tokensel
