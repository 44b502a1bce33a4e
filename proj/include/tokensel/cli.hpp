// Copyright (C) 2026 The tokensel authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <chrono>
#include <cstdint>
#include <cstdio>
#include <ctime>
#include <iostream>
#include <string>
#include <vector>

#include "json.hpp"
#include "tokensel/config.hpp"
#include "tokensel/errors.hpp"
#include "tokensel/evaluation.hpp"
#include "tokensel/gradcheck.hpp"
#include "tokensel/log.hpp"
#include "tokensel/pipeline.hpp"
#include "tokensel/synth_data.hpp"
#include "tokensel/training.hpp"

// Command implementations behind the `tokensel` binary. Functions throw typed
// errors; main() maps them onto the exit-code contract (1 usage/config,
// 2 I/O, 3 numeric).

namespace tokensel {

// Split seeds: the train split is stream 0, validation stream 1.
inline constexpr std::uint64_t kTrainSplit = 0;
inline constexpr std::uint64_t kValSplit = 1;

// data.dtks -> data.val.dtks
inline std::string sibling_val_path(const std::string& train_path) {
  const auto dot = train_path.rfind('.');
  const auto slash = train_path.rfind('/');
  if (dot == std::string::npos || (slash != std::string::npos && dot < slash)) {
    return train_path + ".val";
  }
  return train_path.substr(0, dot) + ".val" + train_path.substr(dot);
}

namespace detail {

inline Dataset load_dataset_checked(const std::string& path) {
  try {
    return load_dataset(path);
  } catch (const IoError&) {
    throw IoError("dataset not found or unreadable: " + path);
  }
}

inline Checkpoint load_checkpoint_checked(const std::string& path) {
  try {
    return load_checkpoint(path);
  } catch (const IoError&) {
    throw IoError("checkpoint not found or unreadable: " + path);
  }
}

inline nlohmann::json meta_line(const RunConfig& config) {
  nlohmann::json meta;
  meta["type"] = "meta";
  meta["timestamp"] = static_cast<long long>(std::time(nullptr));
  meta["config"] = config_echo(config);
  return meta;
}

// Debug-level wall-clock note around a pipeline stage.
class StageTimer {
 public:
  explicit StageTimer(std::string name)
      : name_(std::move(name)), start_(std::chrono::steady_clock::now()) {}
  ~StageTimer() {
    const double seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start_)
            .count();
    log_debug(name_ + " took " + format_double(seconds) + " s");
  }

 private:
  std::string name_;
  std::chrono::steady_clock::time_point start_;
};

}  // namespace detail

// Generates the train split at `out_path` and the validation split at the
// derived sibling path.
inline int cmd_gen_data(const RunConfig& config, const std::string& out_path) {
  detail::StageTimer timer("gen-data");
  if (out_path.empty()) throw ConfigError("gen-data: --out is required");
  validate(config);

  Dataset train = generate(config.task, config.train_sequences, kTrainSplit);
  Dataset val = generate(config.task, config.val_sequences, kValSplit);
  save_dataset(train, out_path);
  const std::string val_path = sibling_val_path(out_path);
  save_dataset(val, val_path);

  std::cout << "wrote " << train.size() << " train sequences to " << out_path
            << "\n";
  std::cout << "wrote " << val.size() << " val sequences to " << val_path << "\n";
  return 0;
}

// Trains the frozen-backbone stand-in on full tokens and stores it as a
// backbone-only checkpoint.
inline int cmd_pretrain(const RunConfig& config, const std::string& dataset_path,
                        const std::string& out_path) {
  detail::StageTimer timer("pretrain-backbone");
  if (dataset_path.empty()) throw ConfigError("pretrain-backbone: --dataset is required");
  if (out_path.empty()) throw ConfigError("pretrain-backbone: --out is required");
  validate(config);

  Dataset train = detail::load_dataset_checked(dataset_path);
  Dataset clean_val = generate_clean(train.spec, config.val_sequences, kValSplit);
  FrozenBackbone backbone =
      pretrain_backbone(train, clean_val, config.pretrain, config.seed);

  Checkpoint checkpoint;
  checkpoint.config_echo = config_echo(config);
  checkpoint.backbone = backbone;
  save_checkpoint(checkpoint, out_path);

  const double clean_accuracy = full_token_accuracy(clean_val, backbone);
  std::cout << "backbone pretrained: clean val accuracy "
            << detail::format_double(clean_accuracy) << ", checkpoint " << out_path
            << "\n";
  return 0;
}

// Trains the scorer against a frozen backbone checkpoint. When the input
// checkpoint already contains training state, the run resumes from it.
inline int cmd_train(const RunConfig& config, const std::string& dataset_path,
                     const std::string& checkpoint_path, const std::string& out_path,
                     long long stop_after_step = -1) {
  detail::StageTimer timer("train-scorer");
  if (dataset_path.empty()) throw ConfigError("train-scorer: --dataset is required");
  if (checkpoint_path.empty()) {
    throw ConfigError("train-scorer: --checkpoint (backbone) is required");
  }
  if (out_path.empty()) throw ConfigError("train-scorer: --out is required");
  validate(config);

  Dataset train = detail::load_dataset_checked(dataset_path);
  Dataset val = detail::load_dataset_checked(sibling_val_path(dataset_path));
  Checkpoint input = detail::load_checkpoint_checked(checkpoint_path);

  MetricLog log(out_path + ".log.jsonl");
  log.meta(detail::meta_line(config));

  TrainResult result = train_scorer(config.train, train, val, input.backbone, &log,
                                    input.has_train_state ? &input.train : nullptr,
                                    stop_after_step);

  Checkpoint output;
  output.config_echo = config_echo(config);
  output.backbone = input.backbone;
  output.has_train_state = true;
  output.train = result.state;
  save_checkpoint(output, out_path);

  std::cout << "trained to step " << result.state.step << ": val accuracy "
            << detail::format_double(result.final_val_accuracy) << ", signal recall "
            << detail::format_double(result.final_signal_recall) << ", checkpoint "
            << out_path << "\n";
  return 0;
}

inline Selector parse_selector(const std::string& name) {
  if (name == "learned") return Selector::kLearned;
  if (name == "random") return Selector::kRandom;
  if (name == "norm") return Selector::kNorm;
  if (name == "oracle") return Selector::kOracle;
  throw ConfigError("unknown selector '" + name +
                    "' (expected learned|random|norm|oracle)");
}

// Evaluates one selector at one budget on the given dataset file.
inline int cmd_eval(const RunConfig& config, const std::string& checkpoint_path,
                    const std::string& dataset_path, double budget,
                    const std::string& selector_name, const std::string& out_path) {
  if (checkpoint_path.empty()) throw ConfigError("eval: --checkpoint is required");
  if (dataset_path.empty()) throw ConfigError("eval: --dataset is required");
  validate(config);

  Dataset data = detail::load_dataset_checked(dataset_path);
  Checkpoint checkpoint = detail::load_checkpoint_checked(checkpoint_path);
  const Selector selector = parse_selector(selector_name);
  if (selector == Selector::kLearned && !checkpoint.has_train_state) {
    throw ConfigError("eval: checkpoint has no trained scorer");
  }

  const double use_budget = budget > 0.0 ? budget : config.train.budget;
  const double full_accuracy = full_token_accuracy(data, checkpoint.backbone);
  EvalRow row = evaluate(selector, use_budget, data,
                         checkpoint.has_train_state ? &checkpoint.train.scorer : nullptr,
                         checkpoint.backbone, config.seed, full_accuracy);

  nlohmann::json doc;
  doc["selector"] = row.selector;
  doc["budget"] = row.budget;
  doc["accuracy"] = row.accuracy;
  doc["retention"] = row.retention;
  doc["recall"] = row.recall;
  doc["precision"] = row.precision;
  doc["tokens_kept_mean"] = row.tokens_kept_mean;
  doc["analytic_flops"] = row.analytic_flops;
  doc["full_token_accuracy"] = full_accuracy;
  doc["config"] = config_echo(config);
  const std::string text = doc.dump(2);
  if (!out_path.empty()) write_file(out_path, text + "\n");
  std::cout << text << "\n";
  return 0;
}

// Full selector x budget grid; writes <out>.csv and <out>.json.
inline int cmd_sweep(const RunConfig& config, const std::string& checkpoint_path,
                     const std::string& dataset_path, const std::string& out_prefix) {
  detail::StageTimer timer("sweep");
  if (checkpoint_path.empty()) throw ConfigError("sweep: --checkpoint is required");
  if (dataset_path.empty()) throw ConfigError("sweep: --dataset is required");
  validate(config);

  Dataset data = detail::load_dataset_checked(dataset_path);
  Checkpoint checkpoint = detail::load_checkpoint_checked(checkpoint_path);
  if (!checkpoint.has_train_state) {
    throw ConfigError("sweep: checkpoint has no trained scorer");
  }

  SweepReport report = budget_sweep(checkpoint.train.scorer, config.eval_budgets,
                                    data, checkpoint.backbone, config.seed,
                                    config_echo(config));
  if (!out_prefix.empty()) {
    write_file(out_prefix + ".csv", sweep_to_csv(report));
    write_file(out_prefix + ".json", sweep_to_json(report).dump(2) + "\n");
  }

  std::printf("full-token accuracy: %.4f\n", report.full_token_accuracy);
  std::printf("%-8s %8s %10s %10s %8s\n", "selector", "budget", "accuracy",
              "retention", "recall");
  for (const EvalRow& row : report.rows) {
    std::printf("%-8s %8.2f %10.4f %10.4f %8.4f\n", row.selector.c_str(), row.budget,
                row.accuracy, row.retention, row.recall);
  }
  if (!out_prefix.empty()) {
    std::cout << "wrote " << out_prefix << ".csv and " << out_prefix << ".json\n";
  }
  return 0;
}

// Finite-difference verification of every gradient path; exit 3 on failure.
inline int cmd_gradcheck(const RunConfig& config, int difftopk_configs = 100) {
  GradcheckReport report = run_gradcheck_suite(config.seed, difftopk_configs);
  for (const GradcheckCase& c : report.cases) {
    std::printf("%-28s max rel err %.3e (tolerance %.0e) %s\n", c.name.c_str(),
                c.max_rel_err, c.tolerance, c.passed ? "PASS" : "FAIL");
  }
  return report.all_passed() ? 0 : 3;
}

// Efficiency proxy: wall-clock and FLOPs of the token-consuming stage at one
// budget versus full tokens.
inline int cmd_bench(const RunConfig& config, double budget,
                     const std::string& out_path) {
  validate(config);
  const double use_budget = budget > 0.0 ? budget : config.train.budget;
  BenchResult result = bench_forward(use_budget, config.bench);
  const std::string text = bench_to_json(result).dump(2);
  if (!out_path.empty()) write_file(out_path, text + "\n");
  std::cout << text << "\n";
  return 0;
}

// Per-token score dump for external visualization.
inline int cmd_dump_scores(const RunConfig& config, const std::string& checkpoint_path,
                           const std::string& dataset_path, double budget,
                           const std::string& out_path) {
  if (checkpoint_path.empty()) throw ConfigError("dump-scores: --checkpoint is required");
  if (dataset_path.empty()) throw ConfigError("dump-scores: --dataset is required");
  if (out_path.empty()) throw ConfigError("dump-scores: --out is required");
  validate(config);

  Dataset data = detail::load_dataset_checked(dataset_path);
  Checkpoint checkpoint = detail::load_checkpoint_checked(checkpoint_path);
  if (!checkpoint.has_train_state) {
    throw ConfigError("dump-scores: checkpoint has no trained scorer");
  }
  const double use_budget = budget > 0.0 ? budget : config.train.budget;
  write_file(out_path,
             dump_scores_csv(checkpoint.train.scorer, data, use_budget));
  std::cout << "wrote per-token scores to " << out_path << "\n";
  return 0;
}

}  // namespace tokensel
