// Copyright (C) 2026 The tokensel authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <limits>
#include <string>
#include <vector>

#include "json.hpp"
#include "tokensel/difftopk.hpp"
#include "tokensel/errors.hpp"
#include "tokensel/pipeline.hpp"
#include "tokensel/rng.hpp"
#include "tokensel/scorer.hpp"
#include "tokensel/synth_data.hpp"

// Budget-sweep evaluation: one scorer trained at a single budget, measured at
// many budgets against baseline selectors, with selection-quality metrics and
// an efficiency proxy (analytic FLOPs plus wall-clock of the token-consuming
// stage).

namespace tokensel {

enum class Selector { kLearned, kRandom, kNorm, kOracle };

inline const char* selector_name(Selector s) {
  switch (s) {
    case Selector::kLearned: return "learned";
    case Selector::kRandom: return "random";
    case Selector::kNorm: return "norm";
    case Selector::kOracle: return "oracle";
  }
  return "?";
}

struct EvalRow {
  std::string selector;
  double budget = 0.0;
  double accuracy = 0.0;
  double retention = 0.0;
  double recall = 0.0;
  double precision = 0.0;
  // NaN for selectors that have no soft mask.
  double soft_hard_gap = std::numeric_limits<double>::quiet_NaN();
  double tokens_kept_mean = 0.0;
  std::uint64_t analytic_flops = 0;  // total over the evaluated split
  // Wall-clock of the token-consuming stage. Measured, therefore excluded
  // from byte-level reproducibility comparisons.
  double wall_ms = 0.0;
};

struct SweepReport {
  double full_token_accuracy = 0.0;
  std::string config_echo;
  std::vector<EvalRow> rows;
};

namespace detail {

inline HardMask norm_selection(const TokenBatch& batch, double budget) {
  const std::size_t batch_size = batch.valid_len.size();
  const std::size_t width = batch.features.dim(1);
  const std::size_t dim = batch.features.dim(2);
  Tensor norms = Tensor::zeros({batch_size, width});
  for (std::size_t b = 0; b < batch_size; ++b) {
    for (int i = 0; i < batch.valid_len[b]; ++i) {
      const double* tok =
          batch.features.data() + (b * width + static_cast<std::size_t>(i)) * dim;
      double acc = 0.0;
      for (std::size_t c = 0; c < dim; ++c) acc += tok[c] * tok[c];
      norms.data()[b * width + static_cast<std::size_t>(i)] = std::sqrt(acc);
    }
  }
  return hard_topk_budget(norms, budget, batch.valid_len);
}

inline HardMask random_selection(const TokenBatch& batch, double budget,
                                 std::uint64_t seed, std::size_t row_offset) {
  const std::size_t batch_size = batch.valid_len.size();
  const std::size_t width = batch.features.dim(1);
  HardMask mask;
  mask.mask = Tensor::zeros({batch_size, width});
  mask.k.resize(batch_size);
  for (std::size_t b = 0; b < batch_size; ++b) {
    const int k = budget_to_k(batch.valid_len[b], budget);
    mask.k[b] = k;
    // Seeded per sequence, so batching cannot change the draw.
    Rng rng(derive_seed(seed, "eval-random", row_offset + b));
    for (int idx : rng.sample_without_replacement(batch.valid_len[b], k)) {
      mask.mask.data()[b * width + static_cast<std::size_t>(idx)] = 1.0;
    }
  }
  return mask;
}

inline double overlap_with_signal(const HardMask& mask, std::size_t row,
                                  const std::vector<int>& signal) {
  const std::size_t width = mask.mask.dim(1);
  double hits = 0.0;
  for (int idx : signal) {
    if (mask.mask.data()[row * width + static_cast<std::size_t>(idx)] > 0.5) {
      hits += 1.0;
    }
  }
  return hits;
}

}  // namespace detail

// Evaluates one (selector, budget) cell over a validation dataset.
// `full_accuracy` is the full-token backbone accuracy used for retention.
inline EvalRow evaluate(Selector selector, double budget, const Dataset& val,
                        const ScorerParams* scorer, const FrozenBackbone& backbone,
                        std::uint64_t seed, double full_accuracy,
                        std::size_t batch_size = 256) {
  if (selector == Selector::kLearned && scorer == nullptr) {
    throw ConfigError("learned selector requires scorer parameters");
  }

  EvalRow row;
  row.selector = selector_name(selector);
  row.budget = budget;

  std::size_t correct = 0;
  double recall_sum = 0.0, precision_sum = 0.0, gap_sum = 0.0;
  double kept_sum = 0.0;
  std::size_t gap_rows = 0;
  double wall_seconds = 0.0;

  for (std::size_t begin = 0; begin < val.size(); begin += batch_size) {
    const std::size_t end = std::min(val.size(), begin + batch_size);
    TokenBatch batch = make_batch(val, begin, end);

    HardMask selection;
    switch (selector) {
      case Selector::kLearned: {
        Tensor scores = score(batch.features, *scorer, batch.valid_len);
        std::vector<int> k(batch.valid_len.size());
        for (std::size_t b = 0; b < k.size(); ++b) {
          k[b] = budget_to_k(batch.valid_len[b], budget);
        }
        selection = hard_topk(scores, k, batch.valid_len);
        SoftMaskResult soft = diff_topk_forward(scores, k, batch.valid_len);
        gap_sum += soft_hard_gap(soft.soft_mask, selection, batch.valid_len) *
                   static_cast<double>(end - begin);
        gap_rows += end - begin;
        break;
      }
      case Selector::kRandom:
        selection = detail::random_selection(batch, budget, seed, begin);
        break;
      case Selector::kNorm:
        selection = detail::norm_selection(batch, budget);
        break;
      case Selector::kOracle:
        selection = oracle_mask(batch, budget, 0.5 * val.spec.sink_scale);
        break;
    }

    const auto t0 = std::chrono::steady_clock::now();
    Tensor logits = infer_from_mask(batch, selection, backbone);
    wall_seconds += std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
                        .count();

    for (std::size_t b = 0; b < batch.valid_len.size(); ++b) {
      if (argmax_row(logits, b) == batch.label[b]) ++correct;
      const double hits = detail::overlap_with_signal(selection, b, batch.signal_idx[b]);
      const int m = static_cast<int>(batch.signal_idx[b].size());
      recall_sum += hits / static_cast<double>(std::min(m, selection.k[b]));
      precision_sum += hits / static_cast<double>(selection.k[b]);
      kept_sum += static_cast<double>(selection.k[b]);
      row.analytic_flops += flop_count(static_cast<std::size_t>(selection.k[b]),
                                       static_cast<std::size_t>(val.spec.feature_dim),
                                       backbone);
    }
  }

  const double n = static_cast<double>(val.size());
  row.accuracy = static_cast<double>(correct) / n;
  row.retention = full_accuracy > 0.0 ? row.accuracy / full_accuracy : 0.0;
  row.recall = recall_sum / n;
  row.precision = precision_sum / n;
  row.tokens_kept_mean = kept_sum / n;
  if (gap_rows > 0) row.soft_hard_gap = gap_sum / static_cast<double>(gap_rows);
  row.wall_ms = wall_seconds * 1e3;
  return row;
}

// Full grid: every selector at every budget for one trained scorer.
inline SweepReport budget_sweep(const ScorerParams& scorer,
                                const std::vector<double>& budgets,
                                const Dataset& val, const FrozenBackbone& backbone,
                                std::uint64_t seed, std::string config_echo = "") {
  for (double b : budgets) {
    if (!(b > 0.0 && b < 1.0)) {
      throw BudgetError("sweep budget " + std::to_string(b) + " outside (0, 1)");
    }
  }
  SweepReport report;
  report.config_echo = std::move(config_echo);
  report.full_token_accuracy = full_token_accuracy(val, backbone);
  for (double budget : budgets) {
    for (Selector sel : {Selector::kLearned, Selector::kRandom, Selector::kNorm,
                         Selector::kOracle}) {
      report.rows.push_back(evaluate(sel, budget, val, &scorer, backbone, seed,
                                     report.full_token_accuracy));
    }
  }
  return report;
}

// --- report serialization ----------------------------------------------------

namespace detail {

inline std::string format_double(double v) {
  if (std::isnan(v)) return "";
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace detail

// Deterministic projection of the report: everything except wall-clock times.
inline std::string sweep_to_csv(const SweepReport& report) {
  std::string csv =
      "selector,budget,accuracy,retention,recall,precision,soft_hard_gap,"
      "tokens_kept_mean,analytic_flops\n";
  for (const EvalRow& row : report.rows) {
    csv += row.selector;
    csv += ',';
    csv += detail::format_double(row.budget) + ',';
    csv += detail::format_double(row.accuracy) + ',';
    csv += detail::format_double(row.retention) + ',';
    csv += detail::format_double(row.recall) + ',';
    csv += detail::format_double(row.precision) + ',';
    csv += detail::format_double(row.soft_hard_gap) + ',';
    csv += detail::format_double(row.tokens_kept_mean) + ',';
    csv += std::to_string(row.analytic_flops) + '\n';
  }
  return csv;
}

// JSON form: deterministic rows plus a separate "timing_ms" object holding
// the measured wall-clock numbers (strip it before byte comparisons).
inline nlohmann::json sweep_to_json(const SweepReport& report) {
  nlohmann::json doc;
  doc["full_token_accuracy"] = report.full_token_accuracy;
  doc["config"] = report.config_echo;
  doc["rows"] = nlohmann::json::array();
  doc["timing_ms"] = nlohmann::json::object();
  for (const EvalRow& row : report.rows) {
    nlohmann::json r;
    r["selector"] = row.selector;
    r["budget"] = row.budget;
    r["accuracy"] = row.accuracy;
    r["retention"] = row.retention;
    r["recall"] = row.recall;
    r["precision"] = row.precision;
    if (std::isnan(row.soft_hard_gap)) {
      r["soft_hard_gap"] = nullptr;
    } else {
      r["soft_hard_gap"] = row.soft_hard_gap;
    }
    r["tokens_kept_mean"] = row.tokens_kept_mean;
    r["analytic_flops"] = row.analytic_flops;
    doc["rows"].push_back(std::move(r));
    doc["timing_ms"][row.selector + "@" + detail::format_double(row.budget)] =
        row.wall_ms;
  }
  return doc;
}

// --- efficiency proxy harness --------------------------------------------------

struct BenchConfig {
  int tokens = 2048;
  int batch = 64;
  int repeats = 20;
  int feature_dim = 96;
  int hidden_dim = 64;
  int classes = 4;
  std::uint64_t seed = 42;
};

struct BenchResult {
  double budget = 0.0;
  int k = 0;
  int tokens = 0;
  double full_median_ms = 0.0;
  double full_iqr_ms = 0.0;
  double pruned_median_ms = 0.0;
  double pruned_iqr_ms = 0.0;
  double speedup = 0.0;
  std::uint64_t full_flops_per_seq = 0;    // analytic
  std::uint64_t pruned_flops_per_seq = 0;  // analytic
  std::uint64_t full_flops_measured = 0;   // instrumented, per sequence
  std::uint64_t pruned_flops_measured = 0;
};

namespace detail {

inline double median_of(std::vector<double> xs) {
  std::sort(xs.begin(), xs.end());
  const std::size_t n = xs.size();
  return n % 2 == 1 ? xs[n / 2] : 0.5 * (xs[n / 2 - 1] + xs[n / 2]);
}

inline double iqr_of(std::vector<double> xs) {
  std::sort(xs.begin(), xs.end());
  const std::size_t n = xs.size();
  return xs[(3 * n) / 4] - xs[n / 4];
}

}  // namespace detail

// Times the token-consuming stage (gather + pooling + MLP) of the inference
// path at a budget versus full tokens. Selection itself runs outside the
// timed region: the proxy mirrors how retained-token count drives downstream
// cost, which is where compression pays off.
inline BenchResult bench_forward(double budget, const BenchConfig& config) {
  if (config.repeats < 10) {
    throw ConfigError("bench: need at least 10 repeats, got " +
                      std::to_string(config.repeats));
  }
  if (config.tokens < 2 || config.batch < 1) {
    throw ConfigError("bench: invalid token/batch configuration");
  }

  Rng rng(derive_seed(config.seed, "bench"));
  const std::size_t batch_size = static_cast<std::size_t>(config.batch);
  const std::size_t width = static_cast<std::size_t>(config.tokens);
  const std::size_t dim = static_cast<std::size_t>(config.feature_dim);

  TokenBatch batch;
  batch.features = Tensor({batch_size, width, dim});
  for (std::size_t i = 0; i < batch.features.size(); ++i) {
    batch.features.data()[i] = rng.normal();
  }
  batch.valid_len.assign(batch_size, config.tokens);
  batch.label.assign(batch_size, 0);
  batch.signal_idx.assign(batch_size, {});

  FrozenBackbone backbone;
  backbone.w1 = Tensor({dim, static_cast<std::size_t>(config.hidden_dim)});
  backbone.b1 = Tensor({static_cast<std::size_t>(config.hidden_dim)});
  backbone.w2 = Tensor({static_cast<std::size_t>(config.hidden_dim),
                        static_cast<std::size_t>(config.classes)});
  backbone.b2 = Tensor({static_cast<std::size_t>(config.classes)});
  for (Tensor* t : {&backbone.w1, &backbone.b1, &backbone.w2, &backbone.b2}) {
    for (std::size_t i = 0; i < t->size(); ++i) t->data()[i] = rng.normal(0.0, 0.2);
  }

  BenchResult result;
  result.budget = budget;
  result.tokens = config.tokens;
  result.k = budget_to_k(config.tokens, budget);

  HardMask full_mask;
  full_mask.mask = Tensor::zeros({batch_size, width});
  full_mask.k.assign(batch_size, config.tokens);
  for (std::size_t i = 0; i < full_mask.mask.size(); ++i) {
    full_mask.mask.data()[i] = 1.0;
  }

  HardMask pruned_mask;
  pruned_mask.mask = Tensor::zeros({batch_size, width});
  pruned_mask.k.assign(batch_size, result.k);
  for (std::size_t b = 0; b < batch_size; ++b) {
    for (int idx : rng.sample_without_replacement(config.tokens, result.k)) {
      pruned_mask.mask.data()[b * width + static_cast<std::size_t>(idx)] = 1.0;
    }
  }

  const auto time_path = [&](const HardMask& mask) {
    std::vector<double> times;
    times.reserve(static_cast<std::size_t>(config.repeats));
    for (int r = 0; r < config.repeats; ++r) {
      const auto t0 = std::chrono::steady_clock::now();
      Tensor logits = infer_from_mask(batch, mask, backbone);
      const auto t1 = std::chrono::steady_clock::now();
      // Fold a value into the result so the pass cannot be optimized out.
      volatile double sink = logits.data()[0];
      (void)sink;
      times.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
    }
    return times;
  };

  auto full_times = time_path(full_mask);
  auto pruned_times = time_path(pruned_mask);
  result.full_median_ms = detail::median_of(full_times);
  result.full_iqr_ms = detail::iqr_of(full_times);
  result.pruned_median_ms = detail::median_of(pruned_times);
  result.pruned_iqr_ms = detail::iqr_of(pruned_times);
  result.speedup = result.full_median_ms / result.pruned_median_ms;

  result.full_flops_per_seq =
      flop_count(static_cast<std::size_t>(config.tokens), dim, backbone);
  result.pruned_flops_per_seq =
      flop_count(static_cast<std::size_t>(result.k), dim, backbone);
  FlopCounter counter;
  infer_from_mask(batch, full_mask, backbone, &counter);
  result.full_flops_measured = counter.flops / batch_size;
  counter.flops = 0;
  infer_from_mask(batch, pruned_mask, backbone, &counter);
  result.pruned_flops_measured = counter.flops / batch_size;
  return result;
}

inline nlohmann::json bench_to_json(const BenchResult& r) {
  nlohmann::json doc;
  doc["budget"] = r.budget;
  doc["tokens"] = r.tokens;
  doc["k"] = r.k;
  doc["full_median_ms"] = r.full_median_ms;
  doc["full_iqr_ms"] = r.full_iqr_ms;
  doc["pruned_median_ms"] = r.pruned_median_ms;
  doc["pruned_iqr_ms"] = r.pruned_iqr_ms;
  doc["speedup"] = r.speedup;
  doc["full_flops_per_seq"] = r.full_flops_per_seq;
  doc["pruned_flops_per_seq"] = r.pruned_flops_per_seq;
  doc["full_flops_measured"] = r.full_flops_measured;
  doc["pruned_flops_measured"] = r.pruned_flops_measured;
  return doc;
}

// --- score dumps ---------------------------------------------------------------

// Per-token CSV: sequence id, token index, raw score, soft-mask value, hard
// selection flag, planted-signal flag. Rendering heatmaps from this file is
// external.
inline std::string dump_scores_csv(const ScorerParams& scorer, const Dataset& data,
                                   double budget, std::size_t batch_size = 256) {
  std::string csv = "sequence,token,score,soft_mask,hard_selected,is_signal\n";
  for (std::size_t begin = 0; begin < data.size(); begin += batch_size) {
    const std::size_t end = std::min(data.size(), begin + batch_size);
    TokenBatch batch = make_batch(data, begin, end);
    Tensor scores = score(batch.features, scorer, batch.valid_len);
    std::vector<int> k(batch.valid_len.size());
    for (std::size_t b = 0; b < k.size(); ++b) {
      k[b] = budget_to_k(batch.valid_len[b], budget);
    }
    SoftMaskResult soft = diff_topk_forward(scores, k, batch.valid_len);
    HardMask hard = hard_topk(scores, k, batch.valid_len);

    const std::size_t width = batch.features.dim(1);
    for (std::size_t b = 0; b < batch.valid_len.size(); ++b) {
      std::vector<bool> is_signal(width, false);
      for (int idx : batch.signal_idx[b]) {
        is_signal[static_cast<std::size_t>(idx)] = true;
      }
      for (int j = 0; j < batch.valid_len[b]; ++j) {
        const std::size_t idx = b * width + static_cast<std::size_t>(j);
        csv += std::to_string(begin + b) + ',' + std::to_string(j) + ',';
        csv += detail::format_double(scores.data()[idx]) + ',';
        csv += detail::format_double(soft.soft_mask.data()[idx]) + ',';
        csv += hard.mask.data()[idx] > 0.5 ? "1," : "0,";
        csv += is_signal[static_cast<std::size_t>(j)] ? "1\n" : "0\n";
      }
    }
  }
  return csv;
}

}  // namespace tokensel
