// Copyright (C) 2026 The tokensel authors
// SPDX-License-Identifier: Apache-2.0

#include "tokensel/evaluation.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

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
  spec.seed = 23;
  return spec;
}

FrozenBackbone random_backbone(std::uint64_t seed) {
  Rng rng(seed);
  FrozenBackbone backbone;
  backbone.w1 = Tensor({16, 8});
  backbone.b1 = Tensor({8});
  backbone.w2 = Tensor({8, 3});
  backbone.b2 = Tensor({3});
  for (Tensor* t : {&backbone.w1, &backbone.b1, &backbone.w2, &backbone.b2}) {
    for (std::size_t i = 0; i < t->size(); ++i) t->data()[i] = rng.normal(0.0, 0.3);
  }
  return backbone;
}

}  // namespace

TEST(FlopModel, PoolingTermScalesLinearly) {
  FrozenBackbone backbone = random_backbone(81);
  const std::uint64_t base = flop_count(0, 16, backbone);
  const std::uint64_t at_10 = flop_count(10, 16, backbone);
  const std::uint64_t at_20 = flop_count(20, 16, backbone);
  EXPECT_EQ(at_10 - base, 2u * 10u * 16u);
  EXPECT_EQ(at_20 - base, 2u * (at_10 - base));  // halving k halves the term
}

TEST(FlopModel, AnalyticEqualsInstrumentedExactly) {
  const TaskSpec spec = tiny_spec();
  Dataset data = generate(spec, 32, 0);
  TokenBatch batch = make_batch(data, 0, 32);
  FrozenBackbone backbone = random_backbone(82);

  for (double budget : {0.1, 0.25, 0.5}) {
    HardMask mask = oracle_mask(batch, budget, 0.5 * spec.sink_scale);
    FlopCounter counter;
    infer_from_mask(batch, mask, backbone, &counter);
    std::uint64_t analytic = 0;
    for (std::size_t b = 0; b < batch.valid_len.size(); ++b) {
      analytic += flop_count(static_cast<std::size_t>(mask.k[b]), 16, backbone);
    }
    EXPECT_EQ(counter.flops, analytic);
  }
}

TEST(FlopModel, FullSelectionMatchesFullCount) {
  const TaskSpec spec = tiny_spec();
  Dataset data = generate(spec, 4, 0);
  TokenBatch batch = make_batch(data, 0, 4);
  FrozenBackbone backbone = random_backbone(83);

  HardMask full;
  full.mask = Tensor::zeros({4, batch.features.dim(1)});
  full.k.resize(4);
  for (std::size_t b = 0; b < 4; ++b) {
    full.k[b] = batch.valid_len[b];
    for (int j = 0; j < batch.valid_len[b]; ++j) {
      full.mask.data()[b * batch.features.dim(1) + static_cast<std::size_t>(j)] = 1.0;
    }
  }
  FlopCounter counter;
  infer_from_mask(batch, full, backbone, &counter);
  std::uint64_t analytic = 0;
  for (std::size_t b = 0; b < 4; ++b) {
    analytic += flop_count(static_cast<std::size_t>(batch.valid_len[b]), 16, backbone);
  }
  EXPECT_EQ(counter.flops, analytic);
}

TEST(Evaluate, OracleRecallIsPerfectWhenBudgetCoversSignal) {
  const TaskSpec spec = tiny_spec();
  Dataset val = generate(spec, 128, 1);
  FrozenBackbone backbone = random_backbone(84);
  EvalRow row = evaluate(Selector::kOracle, 0.3, val, nullptr, backbone, 23, 1.0);
  EXPECT_DOUBLE_EQ(row.recall, 1.0);
  EXPECT_DOUBLE_EQ(row.budget, 0.3);
  EXPECT_TRUE(std::isnan(row.soft_hard_gap));
}

TEST(Evaluate, RandomSelectorRecallWithinBinomialBounds) {
  // E[hits] per row is hypergeometric: k * m / n. Aggregate mean over the
  // split must land within three standard errors.
  const TaskSpec spec = tiny_spec();
  Dataset val = generate(spec, 512, 1);
  FrozenBackbone backbone = random_backbone(85);
  const double budget = 0.3;
  EvalRow row = evaluate(Selector::kRandom, budget, val, nullptr, backbone, 23, 1.0);

  double expected_sum = 0.0, variance_sum = 0.0;
  for (const Sequence& seq : val.sequences) {
    const int n = seq.valid_len;
    const int k = budget_to_k(n, budget);
    const double m = static_cast<double>(seq.signal_idx.size());
    const double denom = static_cast<double>(std::min<int>(static_cast<int>(m), k));
    const double mean_hits = k * m / n;
    const double var_hits = k * (m / n) * (1.0 - m / n) *
                            (static_cast<double>(n - k) / (n - 1));
    expected_sum += mean_hits / denom;
    variance_sum += var_hits / (denom * denom);
  }
  const double n_rows = static_cast<double>(val.size());
  const double expected = expected_sum / n_rows;
  const double sigma = std::sqrt(variance_sum) / n_rows;
  EXPECT_NEAR(row.recall, expected, 3.0 * sigma);
}

TEST(Evaluate, LearnedSelectorRequiresScorer) {
  const TaskSpec spec = tiny_spec();
  Dataset val = generate(spec, 16, 1);
  FrozenBackbone backbone = random_backbone(86);
  EXPECT_THROW(
      evaluate(Selector::kLearned, 0.2, val, nullptr, backbone, 23, 1.0),
      ConfigError);
}

TEST(Evaluate, TokensKeptTracksBudget) {
  const TaskSpec spec = tiny_spec();
  Dataset val = generate(spec, 64, 1);
  FrozenBackbone backbone = random_backbone(87);
  EvalRow row = evaluate(Selector::kRandom, 0.25, val, nullptr, backbone, 23, 1.0);
  double expect = 0.0;
  for (const Sequence& seq : val.sequences) {
    expect += budget_to_k(seq.valid_len, 0.25);
  }
  EXPECT_DOUBLE_EQ(row.tokens_kept_mean, expect / static_cast<double>(val.size()));
}

TEST(Sweep, ReportStructureAndDeterminism) {
  const TaskSpec spec = tiny_spec();
  Dataset val = generate(spec, 64, 1);
  FrozenBackbone backbone = random_backbone(88);
  ScorerParams scorer = init_scorer(16, 8, 88);

  SweepReport a = budget_sweep(scorer, {0.1, 0.25}, val, backbone, 23, "cfg");
  SweepReport b = budget_sweep(scorer, {0.1, 0.25}, val, backbone, 23, "cfg");
  ASSERT_EQ(a.rows.size(), 8u);  // 2 budgets x 4 selectors
  EXPECT_EQ(sweep_to_csv(a), sweep_to_csv(b));  // wall time excluded from CSV

  const nlohmann::json doc = sweep_to_json(a);
  EXPECT_TRUE(doc.contains("rows"));
  EXPECT_TRUE(doc.contains("timing_ms"));
  EXPECT_EQ(doc["rows"].size(), 8u);
  // Non-learned rows carry null soft/hard gap.
  for (const auto& row : doc["rows"]) {
    if (row["selector"] != "learned") {
      EXPECT_TRUE(row["soft_hard_gap"].is_null());
    }
  }
}

TEST(Sweep, RejectsBadBudgets) {
  const TaskSpec spec = tiny_spec();
  Dataset val = generate(spec, 16, 1);
  FrozenBackbone backbone = random_backbone(89);
  ScorerParams scorer = init_scorer(16, 8, 89);
  EXPECT_THROW(budget_sweep(scorer, {0.2, 1.0}, val, backbone, 23), BudgetError);
}

TEST(Bench, RequiresTenRepeats) {
  BenchConfig config;
  config.repeats = 9;
  EXPECT_THROW(bench_forward(0.2, config), ConfigError);
}

TEST(Bench, FlopRatioMatchesAnalyticExactly) {
  BenchConfig config;
  config.tokens = 256;
  config.batch = 4;
  config.repeats = 10;
  BenchResult result = bench_forward(0.2, config);
  EXPECT_EQ(result.full_flops_measured, result.full_flops_per_seq);
  EXPECT_EQ(result.pruned_flops_measured, result.pruned_flops_per_seq);
  EXPECT_EQ(result.k, budget_to_k(256, 0.2));
  EXPECT_GT(result.speedup, 0.0);
}

TEST(DumpScores, SchemaAndHardCounts) {
  const TaskSpec spec = tiny_spec();
  Dataset val = generate(spec, 24, 1);
  ScorerParams scorer = init_scorer(16, 8, 90);
  const double budget = 0.25;
  const std::string csv = dump_scores_csv(scorer, val, budget);

  std::istringstream in(csv);
  std::string header;
  std::getline(in, header);
  EXPECT_EQ(header, "sequence,token,score,soft_mask,hard_selected,is_signal");

  std::vector<int> hard_counts(val.size(), 0);
  std::vector<int> token_counts(val.size(), 0);
  std::string line;
  while (std::getline(in, line)) {
    std::istringstream fields(line);
    std::string seq, token, score_s, soft_s, hard_s, signal_s;
    std::getline(fields, seq, ',');
    std::getline(fields, token, ',');
    std::getline(fields, score_s, ',');
    std::getline(fields, soft_s, ',');
    std::getline(fields, hard_s, ',');
    std::getline(fields, signal_s, ',');
    const std::size_t row = static_cast<std::size_t>(std::stoul(seq));
    ASSERT_LT(row, val.size());
    ++token_counts[row];
    hard_counts[row] += std::stoi(hard_s);
    // Values round-trip through a plain CSV parser.
    const double soft = std::stod(soft_s);
    EXPECT_GT(soft, 0.0);
    EXPECT_LT(soft, 1.0);
  }
  for (std::size_t i = 0; i < val.size(); ++i) {
    EXPECT_EQ(token_counts[i], val.sequences[i].valid_len);
    EXPECT_EQ(hard_counts[i], budget_to_k(val.sequences[i].valid_len, budget));
  }
}
