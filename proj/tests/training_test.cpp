// Copyright (C) 2026 The tokensel authors
// SPDX-License-Identifier: Apache-2.0

#include "tokensel/training.hpp"

#include <gtest/gtest.h>

#include <cmath>

#include "json.hpp"
#include "tokensel/rng.hpp"

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
  spec.seed = 17;
  return spec;
}

FrozenBackbone tiny_backbone(const TaskSpec& spec, const Dataset& train) {
  // Mechanics-level fixture: a lightly trained backbone is enough, so the
  // accuracy gate is relaxed relative to the production default.
  Dataset clean_val = generate_clean(spec, 128, 1);
  PretrainOptions options;
  options.epochs = 10;
  options.batch_size = 32;
  options.hidden_dim = 32;
  options.min_accuracy = 0.5;
  return pretrain_backbone(train, clean_val, options, spec.seed);
}

TrainConfig tiny_train_config() {
  TrainConfig config;
  config.budget = 0.25;
  config.lr_peak = 2e-3;
  config.epochs = 2;
  config.batch_size = 32;
  config.seed = 17;
  config.eval_every = 0;
  return config;
}

}  // namespace

TEST(LrSchedule, WarmupThenCosine) {
  TrainConfig config;
  config.lr_peak = 1e-3;
  config.warmup_frac = 0.1;
  const long long total = 200;  // warmup = 20 steps
  EXPECT_DOUBLE_EQ(lr_at(config, 0, total), 0.0);
  EXPECT_DOUBLE_EQ(lr_at(config, 20, total), config.lr_peak);
  EXPECT_NEAR(lr_at(config, total, total), 0.0, 1e-18);
  // Ramp is linear and the cosine tail decreases.
  EXPECT_NEAR(lr_at(config, 10, total), 0.5 * config.lr_peak, 1e-15);
  EXPECT_GT(lr_at(config, 100, total), lr_at(config, 150, total));
}

TEST(AdamW, ZeroGradientZeroDecayLeavesParamsAlone) {
  Tensor param({3}, {1.0, -2.0, 0.5});
  const std::vector<double> before = param.values();
  AdamWState state = make_adamw_state(param);
  adamw_step(param, Tensor::zeros({3}), state, 1e-2, AdamWConfig{});
  EXPECT_EQ(param.values(), before);
}

TEST(AdamW, ConstantGradientStepBounded) {
  // With a constant gradient the bias-corrected update approaches a sign
  // step: |update| <= lr * (1 + margin).
  Tensor param({1}, {0.0});
  AdamWState state = make_adamw_state(param);
  const AdamWConfig config;
  const double lr = 1e-2;
  double previous = 0.0;
  for (int i = 0; i < 50; ++i) {
    previous = param.item();
    adamw_step(param, Tensor::scalar(3.7), state, lr, config);
    EXPECT_LE(std::abs(param.item() - previous), lr * 1.10);
  }
}

TEST(AdamW, QuadraticConvergesToMinimum) {
  // f(x) = (x - 3)^2, gradient 2(x - 3); the known minimizer is the oracle.
  Tensor param({1}, {-4.0});
  AdamWState state = make_adamw_state(param);
  const AdamWConfig config;
  for (int i = 0; i < 500; ++i) {
    const double g = 2.0 * (param.item() - 3.0);
    adamw_step(param, Tensor::scalar(g), state, 0.1, config);
  }
  EXPECT_NEAR(param.item(), 3.0, 1e-4);
}

TEST(AdamW, ShapeMismatchRejected) {
  Tensor param({3});
  AdamWState state = make_adamw_state(param);
  EXPECT_THROW(adamw_step(param, Tensor::zeros({4}), state, 1e-3, AdamWConfig{}),
               DimensionError);
}

TEST(TrainScorer, DeterministicReplay) {
  const TaskSpec spec = tiny_spec();
  Dataset train = generate(spec, 256, 0);
  Dataset val = generate(spec, 64, 1);
  FrozenBackbone backbone = tiny_backbone(spec, train);
  const TrainConfig config = tiny_train_config();

  MetricLog log_a, log_b;
  TrainResult a = train_scorer(config, train, val, backbone, &log_a);
  TrainResult b = train_scorer(config, train, val, backbone, &log_b);
  EXPECT_EQ(a.state.scorer.w_q.values(), b.state.scorer.w_q.values());
  EXPECT_EQ(a.state.scorer.w_k.values(), b.state.scorer.w_k.values());
  ASSERT_EQ(log_a.lines().size(), log_b.lines().size());
  for (std::size_t i = 0; i < log_a.lines().size(); ++i) {
    EXPECT_EQ(log_a.lines()[i], log_b.lines()[i]);
  }
}

TEST(TrainScorer, LambdaTraceMatchesSchedule) {
  const TaskSpec spec = tiny_spec();
  Dataset train = generate(spec, 128, 0);
  Dataset val = generate(spec, 32, 1);
  FrozenBackbone backbone = tiny_backbone(spec, train);
  TrainConfig config = tiny_train_config();
  config.epochs = 1;

  MetricLog log;
  train_scorer(config, train, val, backbone, &log);
  const long long total =
      static_cast<long long>(train.size() / static_cast<std::size_t>(config.batch_size)) *
      config.epochs;
  const AnnealSchedule schedule{config.lambda_start, config.lambda_end, total};
  for (const std::string& line : log.lines()) {
    const auto record = nlohmann::json::parse(line);
    if (record["type"] != "step") continue;
    const long long step = record["step"].get<long long>();
    EXPECT_DOUBLE_EQ(record["lambda"].get<double>(), lambda_at(schedule, step));
    EXPECT_DOUBLE_EQ(record["lr"].get<double>(), lr_at(config, step, total));
  }
}

TEST(TrainScorer, ResumeReproducesUninterruptedRun) {
  const TaskSpec spec = tiny_spec();
  Dataset train = generate(spec, 256, 0);
  Dataset val = generate(spec, 64, 1);
  FrozenBackbone backbone = tiny_backbone(spec, train);
  const TrainConfig config = tiny_train_config();

  MetricLog log_full;
  TrainResult full = train_scorer(config, train, val, backbone, &log_full);

  MetricLog log_half;
  TrainResult half =
      train_scorer(config, train, val, backbone, &log_half, nullptr, 7);
  EXPECT_EQ(half.state.step, 7);
  MetricLog log_rest;
  TrainResult resumed =
      train_scorer(config, train, val, backbone, &log_rest, &half.state);

  EXPECT_EQ(resumed.state.step, full.state.step);
  EXPECT_EQ(resumed.state.scorer.w_q.values(), full.state.scorer.w_q.values());
  EXPECT_EQ(resumed.state.scorer.w_k.values(), full.state.scorer.w_k.values());
  EXPECT_EQ(resumed.state.opt_q.m.values(), full.state.opt_q.m.values());
  EXPECT_EQ(resumed.state.opt_q.v.values(), full.state.opt_q.v.values());
  EXPECT_EQ(resumed.final_val_accuracy, full.final_val_accuracy);
  EXPECT_EQ(resumed.final_signal_recall, full.final_signal_recall);

  // Post-resume step records equal the uninterrupted run's suffix.
  std::vector<std::string> full_steps, resumed_steps;
  for (const std::string& line : log_full.lines()) {
    const auto record = nlohmann::json::parse(line);
    if (record["type"] == "step" && record["step"].get<long long>() >= 7) {
      full_steps.push_back(line);
    }
  }
  for (const std::string& line : log_rest.lines()) {
    const auto record = nlohmann::json::parse(line);
    if (record["type"] == "step") resumed_steps.push_back(line);
  }
  EXPECT_EQ(full_steps, resumed_steps);
}

TEST(TrainScorer, RequiresFrozenBackbone) {
  const TaskSpec spec = tiny_spec();
  Dataset train = generate(spec, 64, 0);
  Dataset val = generate(spec, 32, 1);
  FrozenBackbone backbone = tiny_backbone(spec, train);
  backbone.frozen = false;
  EXPECT_THROW(train_scorer(tiny_train_config(), train, val, backbone),
               ConfigError);
}

TEST(TrainScorer, SkipsStepsWithNumericBlowups) {
  const TaskSpec spec = tiny_spec();
  Dataset train = generate(spec, 64, 0);
  Dataset val = generate(spec, 32, 1);
  FrozenBackbone backbone = tiny_backbone(spec, train);
  TrainConfig config = tiny_train_config();
  config.epochs = 1;

  // Resume from a deliberately exploded state: every step overflows, gets
  // skipped, and training still runs to completion.
  TrainState exploded;
  exploded.scorer = init_scorer(16, 8, 1);
  for (Tensor* w : {&exploded.scorer.w_q, &exploded.scorer.w_k}) {
    for (std::size_t i = 0; i < w->size(); ++i) w->data()[i] = 1e200;
  }
  exploded.opt_q = make_adamw_state(exploded.scorer.w_q);
  exploded.opt_k = make_adamw_state(exploded.scorer.w_k);

  TrainResult result =
      train_scorer(config, train, val, backbone, nullptr, &exploded);
  EXPECT_EQ(result.state.skipped, result.state.step);
  EXPECT_EQ(result.state.scorer.w_q.values(), exploded.scorer.w_q.values());
}

TEST(Checkpoint, RoundTripsBitwise) {
  const std::string path = ::testing::TempDir() + "ckpt.dtkc";
  Rng rng(73);
  Checkpoint checkpoint;
  checkpoint.config_echo = "[run]\nseed = 17\n";
  checkpoint.backbone.w1 = Tensor({4, 5});
  checkpoint.backbone.b1 = Tensor({5});
  checkpoint.backbone.w2 = Tensor({5, 3});
  checkpoint.backbone.b2 = Tensor({3});
  for (Tensor* t : {&checkpoint.backbone.w1, &checkpoint.backbone.b1,
                    &checkpoint.backbone.w2, &checkpoint.backbone.b2}) {
    for (std::size_t i = 0; i < t->size(); ++i) t->data()[i] = rng.normal();
  }
  checkpoint.has_train_state = true;
  checkpoint.train.scorer = init_scorer(4, 2, 5);
  checkpoint.train.opt_q = make_adamw_state(checkpoint.train.scorer.w_q);
  checkpoint.train.opt_k = make_adamw_state(checkpoint.train.scorer.w_k);
  checkpoint.train.opt_q.updates = 12;
  checkpoint.train.step = 34;
  checkpoint.train.skipped = 2;

  save_checkpoint(checkpoint, path);
  Checkpoint loaded = load_checkpoint(path);
  EXPECT_EQ(loaded.config_echo, checkpoint.config_echo);
  EXPECT_EQ(loaded.backbone.w1.values(), checkpoint.backbone.w1.values());
  EXPECT_EQ(loaded.backbone.b2.values(), checkpoint.backbone.b2.values());
  EXPECT_TRUE(loaded.backbone.frozen);
  ASSERT_TRUE(loaded.has_train_state);
  EXPECT_EQ(loaded.train.scorer.w_q.values(), checkpoint.train.scorer.w_q.values());
  EXPECT_EQ(loaded.train.opt_q.updates, 12);
  EXPECT_EQ(loaded.train.step, 34);
  EXPECT_EQ(loaded.train.skipped, 2);

  // Saving the loaded checkpoint reproduces the file byte for byte.
  const std::string path2 = ::testing::TempDir() + "ckpt2.dtkc";
  save_checkpoint(loaded, path2);
  EXPECT_EQ(read_file(path), read_file(path2));
}

TEST(Checkpoint, CorruptionDetected) {
  const std::string path = ::testing::TempDir() + "corrupt.dtkc";
  Checkpoint checkpoint;
  checkpoint.config_echo = "x";
  checkpoint.backbone.w1 = Tensor({2, 2}, {1, 2, 3, 4});
  checkpoint.backbone.b1 = Tensor({2});
  checkpoint.backbone.w2 = Tensor({2, 2}, {5, 6, 7, 8});
  checkpoint.backbone.b2 = Tensor({2});
  save_checkpoint(checkpoint, path);

  std::string bytes = read_file(path);
  bytes[bytes.size() / 2] = static_cast<char>(bytes[bytes.size() / 2] ^ 0x40);
  write_file(path, bytes);
  EXPECT_THROW(load_checkpoint(path), IntegrityError);
}

TEST(Checkpoint, BackboneOnlyHasNoTrainState) {
  const std::string path = ::testing::TempDir() + "backbone.dtkc";
  Checkpoint checkpoint;
  checkpoint.config_echo = "y";
  checkpoint.backbone.w1 = Tensor({2, 3});
  checkpoint.backbone.b1 = Tensor({3});
  checkpoint.backbone.w2 = Tensor({3, 2});
  checkpoint.backbone.b2 = Tensor({2});
  save_checkpoint(checkpoint, path);
  Checkpoint loaded = load_checkpoint(path);
  EXPECT_FALSE(loaded.has_train_state);
  const std::string bytes = read_file(path);
  EXPECT_EQ(bytes.substr(0, 4), "DTKC");
}

TEST(MetricLog, KeepsNonMetaLinesOnly) {
  MetricLog log;
  log.meta({{"type", "meta"}, {"timestamp", 123}});
  log.line({{"type", "step"}, {"step", 0}});
  log.line({{"type", "eval"}, {"step", 0}});
  ASSERT_EQ(log.lines().size(), 2u);
  EXPECT_NE(log.lines()[0].find("step"), std::string::npos);
}
