// Copyright (C) 2026 The tokensel authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "tokensel/difftopk.hpp"
#include "tokensel/errors.hpp"
#include "tokensel/objective.hpp"
#include "tokensel/ops.hpp"
#include "tokensel/rng.hpp"
#include "tokensel/scorer.hpp"
#include "tokensel/serialize.hpp"
#include "tokensel/synth_data.hpp"
#include "tokensel/tensor.hpp"

// Selection pipeline: score tokens, soft-mask them during training
// (full-length sequence, features scaled by the mask) or physically gather
// the hard-selected subset at inference, then classify with a small frozen
// backbone that stands in for the downstream model.

namespace tokensel {

// Mask-weighted mean pooling followed by a two-layer tanh MLP.
struct FrozenBackbone {
  Tensor w1;  // [D, H]
  Tensor b1;  // [H]
  Tensor w2;  // [H, C]
  Tensor b2;  // [C]
  bool frozen = true;

  std::size_t input_dim() const { return w1.dim(0); }
  std::size_t hidden_dim() const { return w1.dim(1); }
  std::size_t classes() const { return w2.dim(1); }
};

struct PipelineOutput {
  Tensor logits;            // [B, C]
  SoftMaskResult selection; // soft path (scores shared with `hard`)
  HardMask hard;
};

// Counts multiply-accumulate FLOPs (2 per MAC) on the instrumented inference
// path. Bias adds and activations are outside the model by convention.
struct FlopCounter {
  std::uint64_t flops = 0;
};

inline Tensor backbone_logits(const FrozenBackbone& backbone, const Tensor& pooled) {
  Tensor hidden = tanh(add_rowvec(matmul(pooled, backbone.w1), backbone.b1));
  return add_rowvec(matmul(hidden, backbone.w2), backbone.b2);
}

inline std::uint64_t backbone_checksum(const FrozenBackbone& backbone) {
  ByteWriter w;
  for (const Tensor* t : {&backbone.w1, &backbone.b1, &backbone.w2, &backbone.b2}) {
    w.tensor(*t);
  }
  return checksum_bytes(w.bytes());
}

// Training path: soft mask scales the full-length sequence; the pooled vector
// is the mask-weighted mean, so a uniform mask reproduces the full-token
// forward exactly. Gradients reach only whatever the scorer parameters are
// bound to; backbone tensors stay plain.
inline PipelineOutput forward_train(const TokenBatch& batch,
                                    const ScorerParams& scorer,
                                    const FrozenBackbone& backbone, double budget) {
  Tensor scores = score(batch.features, scorer, batch.valid_len);

  std::vector<int> k(batch.valid_len.size());
  for (std::size_t b = 0; b < k.size(); ++b) {
    k[b] = budget_to_k(batch.valid_len[b], budget);
  }

  PipelineOutput out;
  out.selection = diff_topk_forward(scores, k, batch.valid_len);
  out.hard = hard_topk(scores.detached(), k, batch.valid_len);
  Tensor pooled =
      weighted_pool(batch.features, out.selection.soft_mask, batch.valid_len);
  out.logits = backbone_logits(backbone, pooled);
  return out;
}

// Inference path from an explicit hard selection: the sequence is physically
// reduced to the selected tokens before pooling, so downstream cost scales
// with k. Plain loops, instrumentable, no tape.
inline Tensor infer_from_mask(const TokenBatch& batch, const HardMask& hard,
                              const FrozenBackbone& backbone,
                              FlopCounter* flops = nullptr) {
  const std::size_t batch_size = batch.valid_len.size();
  const std::size_t width = batch.features.dim(1);
  const std::size_t dim = batch.features.dim(2);
  const std::size_t hidden = backbone.hidden_dim();
  const std::size_t classes = backbone.classes();
  if (dim != backbone.input_dim()) {
    throw DimensionError("infer_from_mask: feature dim does not match backbone");
  }

  Tensor logits({batch_size, classes});
  std::vector<double> pooled(dim);
  std::vector<double> act(hidden);
  std::uint64_t macs = 0;

  for (std::size_t b = 0; b < batch_size; ++b) {
    const std::vector<int> kept = selected_indices(hard, b);
    if (kept.empty()) throw BudgetError("infer_from_mask: empty selection");
    const double inv_k = 1.0 / static_cast<double>(kept.size());

    // Gather + mask-weighted mean (weights 1/k); one MAC per token coordinate.
    std::fill(pooled.begin(), pooled.end(), 0.0);
    for (int idx : kept) {
      const double* token =
          batch.features.data() + (b * width + static_cast<std::size_t>(idx)) * dim;
      for (std::size_t c = 0; c < dim; ++c) pooled[c] += inv_k * token[c];
    }
    macs += kept.size() * dim;

    for (std::size_t h = 0; h < hidden; ++h) {
      double acc = backbone.b1.data()[h];
      for (std::size_t c = 0; c < dim; ++c) {
        acc += pooled[c] * backbone.w1.data()[c * hidden + h];
      }
      act[h] = std::tanh(acc);
    }
    macs += dim * hidden;

    for (std::size_t j = 0; j < classes; ++j) {
      double acc = backbone.b2.data()[j];
      for (std::size_t h = 0; h < hidden; ++h) {
        acc += act[h] * backbone.w2.data()[h * classes + j];
      }
      logits.data()[b * classes + j] = acc;
    }
    macs += hidden * classes;
  }
  if (flops != nullptr) flops->flops += 2 * macs;
  return logits;
}

// Inference path with learned selection: hard Top-K of the scores. The soft
// mask is also solved (threshold only, no tape) so callers can report the
// soft/hard gap.
inline PipelineOutput forward_infer(const TokenBatch& batch,
                                    const ScorerParams& scorer,
                                    const FrozenBackbone& backbone, double budget,
                                    FlopCounter* flops = nullptr) {
  Tensor scores = score(batch.features, scorer, batch.valid_len).detached();

  std::vector<int> k(batch.valid_len.size());
  for (std::size_t b = 0; b < k.size(); ++b) {
    k[b] = budget_to_k(batch.valid_len[b], budget);
  }

  PipelineOutput out;
  out.selection = diff_topk_forward(scores, k, batch.valid_len);
  out.hard = hard_topk(scores, k, batch.valid_len);
  out.logits = infer_from_mask(batch, out.hard, backbone, flops);
  return out;
}

// Analytic FLOP model of the inference path for one sequence with n_kept
// retained tokens: pooling 2*n_kept*D plus the MLP 2*(D*H + H*C). Matches the
// instrumented tally exactly by construction.
inline std::uint64_t flop_count(std::size_t n_kept, std::size_t input_dim,
                                const FrozenBackbone& backbone) {
  return 2 * (n_kept * input_dim +
              input_dim * backbone.hidden_dim() +
              backbone.hidden_dim() * backbone.classes());
}

inline int argmax_row(const Tensor& logits, std::size_t row) {
  const std::size_t classes = logits.dim(1);
  int best = 0;
  for (std::size_t c = 1; c < classes; ++c) {
    if (logits.data()[row * classes + c] > logits.data()[row * classes + best]) {
      best = static_cast<int>(c);
    }
  }
  return best;
}

// Accuracy of the backbone on full token sequences (mask of ones).
inline double full_token_accuracy(const Dataset& dataset,
                                  const FrozenBackbone& backbone,
                                  std::size_t batch_size = 256) {
  std::size_t correct = 0;
  for (std::size_t begin = 0; begin < dataset.size(); begin += batch_size) {
    const std::size_t end = std::min(dataset.size(), begin + batch_size);
    TokenBatch batch = make_batch(dataset, begin, end);
    Tensor ones({batch.valid_len.size(), batch.features.dim(1)});
    for (std::size_t b = 0; b < batch.valid_len.size(); ++b) {
      for (int j = 0; j < batch.valid_len[b]; ++j) {
        ones.data()[b * batch.features.dim(1) + static_cast<std::size_t>(j)] = 1.0;
      }
    }
    Tensor pooled = weighted_pool(batch.features, ones, batch.valid_len);
    Tensor logits = backbone_logits(backbone, pooled);
    for (std::size_t b = 0; b < batch.valid_len.size(); ++b) {
      if (argmax_row(logits, b) == batch.label[b]) ++correct;
    }
  }
  return static_cast<double>(correct) / static_cast<double>(dataset.size());
}

struct PretrainOptions {
  int epochs = 12;
  double lr = 3e-3;
  int batch_size = 64;
  int hidden_dim = 64;
  double min_accuracy = 0.95;
};

// Trains the stand-in backbone on full token sequences, checks it against the
// noise-free rendition of the validation split, then freezes it. With
// epochs = 0 the untrained (chance-level) backbone is returned unchecked.
inline FrozenBackbone pretrain_backbone(const Dataset& train,
                                        const Dataset& clean_val,
                                        const PretrainOptions& options,
                                        std::uint64_t seed) {
  const std::size_t dim = static_cast<std::size_t>(train.spec.feature_dim);
  const std::size_t hidden = static_cast<std::size_t>(options.hidden_dim);
  const std::size_t classes = static_cast<std::size_t>(train.spec.classes);

  Rng rng(derive_seed(seed, "backbone-init"));
  FrozenBackbone backbone;
  backbone.w1 = Tensor({dim, hidden});
  backbone.b1 = Tensor({hidden});
  backbone.w2 = Tensor({hidden, classes});
  backbone.b2 = Tensor({classes});
  for (std::size_t i = 0; i < backbone.w1.size(); ++i) {
    backbone.w1.data()[i] = rng.normal(0.0, 1.0 / std::sqrt(static_cast<double>(dim)));
  }
  for (std::size_t i = 0; i < backbone.w2.size(); ++i) {
    backbone.w2.data()[i] =
        rng.normal(0.0, 1.0 / std::sqrt(static_cast<double>(hidden)));
  }
  backbone.frozen = false;

  const std::size_t batch_size = static_cast<std::size_t>(options.batch_size);
  const std::size_t steps_per_epoch = train.size() / batch_size;
  if (options.epochs > 0 && steps_per_epoch == 0) {
    throw ConfigError("pretrain: batch size exceeds dataset size");
  }

  // Plain Adam-style updates; moments per parameter tensor.
  struct Moments {
    std::vector<double> m, v;
  };
  std::vector<Tensor*> params{&backbone.w1, &backbone.b1, &backbone.w2, &backbone.b2};
  std::vector<Moments> moments(params.size());
  for (std::size_t p = 0; p < params.size(); ++p) {
    moments[p].m.assign(params[p]->size(), 0.0);
    moments[p].v.assign(params[p]->size(), 0.0);
  }
  long long updates = 0;

  for (int epoch = 0; epoch < options.epochs; ++epoch) {
    std::vector<int> order(train.size());
    for (std::size_t i = 0; i < train.size(); ++i) order[i] = static_cast<int>(i);
    Rng shuffle_rng(derive_seed(seed, "backbone-shuffle", static_cast<std::uint64_t>(epoch)));
    shuffle_rng.shuffle(order);

    for (std::size_t step = 0; step < steps_per_epoch; ++step) {
      std::vector<int> indices(order.begin() + static_cast<std::ptrdiff_t>(step * batch_size),
                               order.begin() + static_cast<std::ptrdiff_t>((step + 1) * batch_size));
      TokenBatch batch = make_batch(train, indices);

      Tape tape;
      Tensor w1 = tape.watch(backbone.w1);
      Tensor b1 = tape.watch(backbone.b1);
      Tensor w2 = tape.watch(backbone.w2);
      Tensor b2 = tape.watch(backbone.b2);

      Tensor ones({batch.valid_len.size(), batch.features.dim(1)});
      for (std::size_t b = 0; b < batch.valid_len.size(); ++b) {
        for (int j = 0; j < batch.valid_len[b]; ++j) {
          ones.data()[b * batch.features.dim(1) + static_cast<std::size_t>(j)] = 1.0;
        }
      }
      Tensor pooled = weighted_pool(batch.features, ones, batch.valid_len);
      Tensor hidden_act = tanh(add_rowvec(matmul(pooled, w1), b1));
      Tensor logits = add_rowvec(matmul(hidden_act, w2), b2);
      Tensor loss = cross_entropy(logits, batch.label);
      tape.backward(loss);

      ++updates;
      const double bc1 = 1.0 - std::pow(0.9, static_cast<double>(updates));
      const double bc2 = 1.0 - std::pow(0.999, static_cast<double>(updates));
      const Tensor* watched[] = {&w1, &b1, &w2, &b2};
      for (std::size_t p = 0; p < params.size(); ++p) {
        Tensor grad = tape.grad(*watched[p]);
        double* value = params[p]->data();
        for (std::size_t i = 0; i < grad.size(); ++i) {
          const double g = grad.data()[i];
          moments[p].m[i] = 0.9 * moments[p].m[i] + 0.1 * g;
          moments[p].v[i] = 0.999 * moments[p].v[i] + 0.001 * g * g;
          value[i] -= options.lr * (moments[p].m[i] / bc1) /
                      (std::sqrt(moments[p].v[i] / bc2) + 1e-8);
        }
      }
    }
  }

  backbone.frozen = true;
  if (options.epochs > 0) {
    const double accuracy = full_token_accuracy(clean_val, backbone);
    if (accuracy < options.min_accuracy) {
      throw PretrainError("backbone pretraining reached only " +
                          std::to_string(accuracy) +
                          " accuracy on the clean validation split (need " +
                          std::to_string(options.min_accuracy) + ")");
    }
  }
  return backbone;
}

}  // namespace tokensel
