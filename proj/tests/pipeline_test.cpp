// Copyright (C) 2026 The tokensel authors
// SPDX-License-Identifier: Apache-2.0

#include "tokensel/pipeline.hpp"

#include <gtest/gtest.h>

#include <cmath>

#include "tokensel/gradcheck.hpp"
#include "tokensel/rng.hpp"
#include "tokensel/training.hpp"

using namespace tokensel;

namespace {

TaskSpec tiny_spec() {
  TaskSpec spec;
  spec.n_min = 12;
  spec.n_max = 16;
  spec.feature_dim = 16;
  spec.classes = 3;
  spec.signal_count = 3;
  spec.sink_count = 2;
  spec.sink_scale = 8.0;
  spec.noise_std = 0.3;
  spec.duplicate_frac = 0.2;
  spec.seed = 7;
  return spec;
}

FrozenBackbone random_backbone(std::size_t dim, std::size_t hidden,
                               std::size_t classes, std::uint64_t seed) {
  Rng rng(seed);
  FrozenBackbone backbone;
  backbone.w1 = Tensor({dim, hidden});
  backbone.b1 = Tensor({hidden});
  backbone.w2 = Tensor({hidden, classes});
  backbone.b2 = Tensor({classes});
  for (Tensor* t : {&backbone.w1, &backbone.b1, &backbone.w2, &backbone.b2}) {
    for (std::size_t i = 0; i < t->size(); ++i) t->data()[i] = rng.normal(0.0, 0.4);
  }
  return backbone;
}

}  // namespace

TEST(Pipeline, UniformMaskEqualsFullTokenForward) {
  // A constant soft mask makes the weighted pool a plain mean, so the logits
  // must match the full-token backbone output.
  Rng rng(61);
  const std::size_t batch = 3, width = 10, dim = 8;
  Tensor features({batch, width, dim});
  for (std::size_t i = 0; i < features.size(); ++i) features.data()[i] = rng.normal();
  std::vector<int> valid{10, 7, 9};
  FrozenBackbone backbone = random_backbone(dim, 6, 4, 62);

  Tensor uniform = Tensor::zeros({batch, width});
  Tensor ones = Tensor::zeros({batch, width});
  for (std::size_t b = 0; b < batch; ++b) {
    for (int j = 0; j < valid[b]; ++j) {
      uniform.data()[b * width + static_cast<std::size_t>(j)] = 0.37;
      ones.data()[b * width + static_cast<std::size_t>(j)] = 1.0;
    }
  }
  Tensor from_uniform =
      backbone_logits(backbone, weighted_pool(features, uniform, valid));
  Tensor from_full = backbone_logits(backbone, weighted_pool(features, ones, valid));
  for (std::size_t i = 0; i < from_full.size(); ++i) {
    EXPECT_NEAR(from_uniform.data()[i], from_full.data()[i], 1e-9);
  }
}

TEST(Pipeline, FreshScorerStaysCloseToFullForward) {
  Dataset data = generate(tiny_spec(), 8, 0);
  TokenBatch batch = make_batch(data, 0, 8);
  FrozenBackbone backbone = random_backbone(16, 8, 3, 63);
  ScorerParams scorer = init_scorer(16, 8, 64);

  PipelineOutput out = forward_train(batch, scorer, backbone, 0.25);

  Tensor ones = Tensor::zeros({batch.valid_len.size(), batch.features.dim(1)});
  for (std::size_t b = 0; b < batch.valid_len.size(); ++b) {
    for (int j = 0; j < batch.valid_len[b]; ++j) {
      ones.data()[b * batch.features.dim(1) + static_cast<std::size_t>(j)] = 1.0;
    }
  }
  Tensor full = backbone_logits(
      backbone, weighted_pool(batch.features, ones, batch.valid_len));
  for (std::size_t i = 0; i < full.size(); ++i) {
    EXPECT_NEAR(out.logits.data()[i], full.data()[i], 1e-4);
  }
}

TEST(Pipeline, SaturatedSingleTokenMaskPoolsThatToken) {
  Rng rng(65);
  const std::size_t width = 6, dim = 5;
  Tensor features({1, width, dim});
  for (std::size_t i = 0; i < features.size(); ++i) features.data()[i] = rng.normal();
  Tensor mask({1, width}, {1e-9, 1.0 - 1e-9, 1e-9, 1e-9, 1e-9, 1e-9});
  Tensor pooled = weighted_pool(features, mask, {6});
  for (std::size_t c = 0; c < dim; ++c) {
    EXPECT_NEAR(pooled.data()[c], features.data()[1 * dim + c], 1e-7);
  }
}

TEST(Pipeline, EndToEndGradientMatchesFiniteDifferences) {
  EXPECT_LT(end_to_end_gradcheck(42), 1e-4);
}

TEST(Pipeline, InferenceIsDeterministic) {
  Dataset data = generate(tiny_spec(), 16, 0);
  TokenBatch batch = make_batch(data, 0, 16);
  FrozenBackbone backbone = random_backbone(16, 8, 3, 66);
  ScorerParams scorer = init_scorer(16, 8, 67);
  PipelineOutput a = forward_infer(batch, scorer, backbone, 0.25);
  PipelineOutput b = forward_infer(batch, scorer, backbone, 0.25);
  EXPECT_EQ(a.logits.values(), b.logits.values());
  EXPECT_EQ(a.hard.mask.values(), b.hard.mask.values());
}

TEST(Pipeline, DroppingARedundantTokenPreservesLogits) {
  // One token constructed as the mean of the others: removing it leaves the
  // pooled vector (and therefore the logits) unchanged.
  Rng rng(68);
  const std::size_t width = 5, dim = 6;
  TokenBatch batch;
  batch.features = Tensor({1, width, dim});
  for (std::size_t t = 0; t + 1 < width; ++t) {
    for (std::size_t c = 0; c < dim; ++c) {
      batch.features.data()[t * dim + c] = rng.normal();
    }
  }
  for (std::size_t c = 0; c < dim; ++c) {
    double mean = 0.0;
    for (std::size_t t = 0; t + 1 < width; ++t) mean += batch.features.data()[t * dim + c];
    batch.features.data()[(width - 1) * dim + c] = mean / static_cast<double>(width - 1);
  }
  batch.valid_len = {static_cast<int>(width)};
  batch.label = {0};
  batch.signal_idx = {{0, 1}};

  FrozenBackbone backbone = random_backbone(dim, 7, 3, 69);

  HardMask full;
  full.mask = Tensor::ones({1, width});
  full.k = {static_cast<int>(width)};
  HardMask drop_last;
  drop_last.mask = Tensor::ones({1, width});
  drop_last.mask.data()[width - 1] = 0.0;
  drop_last.k = {static_cast<int>(width) - 1};

  Tensor logits_full = infer_from_mask(batch, full, backbone);
  Tensor logits_drop = infer_from_mask(batch, drop_last, backbone);
  for (std::size_t i = 0; i < logits_full.size(); ++i) {
    EXPECT_NEAR(logits_full.data()[i], logits_drop.data()[i], 1e-9);
  }
}

TEST(Pipeline, FlopCounterSeesExactlyKTokens) {
  Dataset data = generate(tiny_spec(), 8, 0);
  TokenBatch batch = make_batch(data, 0, 8);
  FrozenBackbone backbone = random_backbone(16, 8, 3, 70);
  ScorerParams scorer = init_scorer(16, 8, 71);

  FlopCounter counter;
  PipelineOutput out = forward_infer(batch, scorer, backbone, 0.25, &counter);
  std::uint64_t expect = 0;
  for (std::size_t b = 0; b < batch.valid_len.size(); ++b) {
    expect += flop_count(static_cast<std::size_t>(out.hard.k[b]), 16, backbone);
  }
  EXPECT_EQ(counter.flops, expect);
}

TEST(Pretrain, ReachesCleanAccuracyAndFreezes) {
  const TaskSpec spec = tiny_spec();
  Dataset train = generate(spec, 512, 0);
  Dataset clean_val = generate_clean(spec, 256, 1);
  PretrainOptions options;
  options.epochs = 8;
  options.hidden_dim = 32;
  FrozenBackbone backbone = pretrain_backbone(train, clean_val, options, 7);
  EXPECT_TRUE(backbone.frozen);
  EXPECT_GE(full_token_accuracy(clean_val, backbone), 0.95);
}

TEST(Pretrain, ZeroEpochsIsChanceLevel) {
  const TaskSpec spec = tiny_spec();
  Dataset train = generate(spec, 128, 0);
  Dataset clean_val = generate_clean(spec, 256, 1);
  PretrainOptions options;
  options.epochs = 0;
  FrozenBackbone backbone = pretrain_backbone(train, clean_val, options, 7);
  const double accuracy = full_token_accuracy(clean_val, backbone);
  EXPECT_NEAR(accuracy, 1.0 / spec.classes, 0.15);
}

TEST(Pretrain, FrozenBackboneSurvivesScorerTraining) {
  const TaskSpec spec = tiny_spec();
  Dataset train = generate(spec, 256, 0);
  Dataset val = generate(spec, 64, 1);
  Dataset clean_val = generate_clean(spec, 128, 1);
  PretrainOptions options;
  options.epochs = 6;
  options.hidden_dim = 32;
  FrozenBackbone backbone = pretrain_backbone(train, clean_val, options, 7);
  const std::uint64_t checksum_before = backbone_checksum(backbone);

  TrainConfig config;
  config.budget = 0.25;
  config.epochs = 1;
  config.batch_size = 64;
  config.seed = 7;
  config.eval_every = 0;
  train_scorer(config, train, val, backbone);
  EXPECT_EQ(backbone_checksum(backbone), checksum_before);
}
