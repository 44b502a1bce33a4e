// Copyright (C) 2026 The tokensel authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "tokensel/errors.hpp"
#include "tokensel/evaluation.hpp"
#include "tokensel/pipeline.hpp"
#include "tokensel/synth_data.hpp"
#include "tokensel/training.hpp"

// Run configuration: flat typed key-value text with [sections]. Every key is
// known and validated before any module runs; command-line flags override
// file values; the effective merged configuration is echoed into every
// output artifact.

namespace tokensel {

struct RunConfig {
  std::uint64_t seed = 42;
  TaskSpec task;
  int train_sequences = 8192;
  int val_sequences = 1024;
  PretrainOptions pretrain;
  TrainConfig train;
  std::vector<double> eval_budgets{0.05, 0.10, 0.20, 0.30};
  BenchConfig bench;
};

inline RunConfig default_config() { return RunConfig{}; }

namespace detail {

inline std::string trim(const std::string& s) {
  const auto begin = s.find_first_not_of(" \t\r");
  if (begin == std::string::npos) return "";
  const auto end = s.find_last_not_of(" \t\r");
  return s.substr(begin, end - begin + 1);
}

inline double parse_double(const std::string& key, const std::string& value) {
  try {
    std::size_t used = 0;
    const double v = std::stod(value, &used);
    if (used != value.size()) throw std::invalid_argument(value);
    return v;
  } catch (const std::exception&) {
    throw ConfigError("key '" + key + "': cannot parse '" + value + "' as number");
  }
}

inline long long parse_int(const std::string& key, const std::string& value) {
  try {
    std::size_t used = 0;
    const long long v = std::stoll(value, &used);
    if (used != value.size()) throw std::invalid_argument(value);
    return v;
  } catch (const std::exception&) {
    throw ConfigError("key '" + key + "': cannot parse '" + value + "' as integer");
  }
}

inline std::vector<double> parse_double_list(const std::string& key,
                                             const std::string& value) {
  std::vector<double> out;
  std::stringstream ss(value);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (item.empty()) continue;
    out.push_back(parse_double(key, item));
  }
  if (out.empty()) throw ConfigError("key '" + key + "': empty list");
  return out;
}

inline void apply_key(RunConfig& config, const std::string& section,
                      const std::string& key, const std::string& value) {
  const std::string where = section + "." + key;
  const auto as_double = [&] { return parse_double(where, value); };
  const auto as_int = [&] { return static_cast<int>(parse_int(where, value)); };

  if (section == "run") {
    if (key == "seed") {
      config.seed = static_cast<std::uint64_t>(parse_int(where, value));
      return;
    }
  } else if (section == "task") {
    if (key == "n_min") { config.task.n_min = as_int(); return; }
    if (key == "n_max") { config.task.n_max = as_int(); return; }
    if (key == "feature_dim") { config.task.feature_dim = as_int(); return; }
    if (key == "classes") { config.task.classes = as_int(); return; }
    if (key == "signal_tokens") { config.task.signal_count = as_int(); return; }
    if (key == "sink_count") { config.task.sink_count = as_int(); return; }
    if (key == "sink_scale") { config.task.sink_scale = as_double(); return; }
    if (key == "noise_std") { config.task.noise_std = as_double(); return; }
    if (key == "duplicate_frac") { config.task.duplicate_frac = as_double(); return; }
    if (key == "train_sequences") { config.train_sequences = as_int(); return; }
    if (key == "val_sequences") { config.val_sequences = as_int(); return; }
  } else if (section == "pretrain") {
    if (key == "epochs") { config.pretrain.epochs = as_int(); return; }
    if (key == "lr") { config.pretrain.lr = as_double(); return; }
    if (key == "batch_size") { config.pretrain.batch_size = as_int(); return; }
    if (key == "hidden_dim") { config.pretrain.hidden_dim = as_int(); return; }
    if (key == "min_accuracy") { config.pretrain.min_accuracy = as_double(); return; }
  } else if (section == "train") {
    if (key == "budget") { config.train.budget = as_double(); return; }
    if (key == "lr_peak") { config.train.lr_peak = as_double(); return; }
    if (key == "warmup_frac") { config.train.warmup_frac = as_double(); return; }
    if (key == "epochs") { config.train.epochs = as_int(); return; }
    if (key == "batch_size") { config.train.batch_size = as_int(); return; }
    if (key == "lambda_start") { config.train.lambda_start = as_double(); return; }
    if (key == "lambda_end") { config.train.lambda_end = as_double(); return; }
    if (key == "beta1") { config.train.adamw.beta1 = as_double(); return; }
    if (key == "beta2") { config.train.adamw.beta2 = as_double(); return; }
    if (key == "eps") { config.train.adamw.eps = as_double(); return; }
    if (key == "weight_decay") { config.train.adamw.weight_decay = as_double(); return; }
    if (key == "eval_every") { config.train.eval_every = as_int(); return; }
    if (key == "proj_dim") { config.train.proj_dim = as_int(); return; }
  } else if (section == "eval") {
    if (key == "budgets") {
      config.eval_budgets = parse_double_list(where, value);
      return;
    }
  } else if (section == "bench") {
    if (key == "tokens") { config.bench.tokens = as_int(); return; }
    if (key == "batch") { config.bench.batch = as_int(); return; }
    if (key == "repeats") { config.bench.repeats = as_int(); return; }
    if (key == "hidden_dim") { config.bench.hidden_dim = as_int(); return; }
  } else {
    throw ConfigError("unknown config section [" + section + "]");
  }
  throw ConfigError("unknown key '" + key + "' in section [" + section + "]");
}

}  // namespace detail

inline void validate(const RunConfig& config) {
  validate(config.task);
  if (config.train_sequences < 1 || config.val_sequences < 1) {
    throw ConfigError("need at least one train and one val sequence");
  }
  if (!(config.train.budget > 0.0 && config.train.budget < 1.0)) {
    throw ConfigError("train budget outside (0, 1)");
  }
  if (config.train.lr_peak <= 0.0) throw ConfigError("lr_peak must be positive");
  if (config.train.warmup_frac < 0.0 || config.train.warmup_frac >= 1.0) {
    throw ConfigError("warmup_frac outside [0, 1)");
  }
  if (config.train.epochs < 1 || config.train.batch_size < 1) {
    throw ConfigError("train epochs/batch_size must be >= 1");
  }
  if (config.train.lambda_start > config.train.lambda_end) {
    throw ConfigError("lambda_start must not exceed lambda_end");
  }
  if (config.pretrain.epochs < 0) throw ConfigError("pretrain epochs must be >= 0");
  for (double b : config.eval_budgets) {
    if (!(b > 0.0 && b < 1.0)) throw ConfigError("eval budget outside (0, 1)");
  }
  if (config.bench.repeats < 10) throw ConfigError("bench repeats must be >= 10");
}

// Parses a config file and applies it on top of the defaults. '#' starts a
// comment; unknown sections or keys are rejected.
inline RunConfig parse_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config file '" + path + "'");

  RunConfig config = default_config();
  std::string line, section;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') {
        throw ConfigError(path + ":" + std::to_string(line_no) + ": malformed section");
      }
      section = detail::trim(line.substr(1, line.size() - 2));
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(path + ":" + std::to_string(line_no) + ": expected key = value");
    }
    const std::string key = detail::trim(line.substr(0, eq));
    const std::string value = detail::trim(line.substr(eq + 1));
    if (section.empty()) {
      throw ConfigError(path + ":" + std::to_string(line_no) + ": key outside a section");
    }
    detail::apply_key(config, section, key, value);
  }
  return config;
}

// The master seed fans out into the stream seeds used by each module.
inline void propagate_seed(RunConfig& config) {
  config.task.seed = config.seed;
  config.train.seed = config.seed;
  config.bench.seed = config.seed;
}

// Canonical text rendering of the effective configuration, embedded into
// checkpoints, logs and reports for provenance.
inline std::string config_echo(const RunConfig& config) {
  std::ostringstream os;
  os.precision(17);
  os << "[run]\nseed = " << config.seed << "\n";
  os << "[task]\n";
  os << "n_min = " << config.task.n_min << "\n";
  os << "n_max = " << config.task.n_max << "\n";
  os << "feature_dim = " << config.task.feature_dim << "\n";
  os << "classes = " << config.task.classes << "\n";
  os << "signal_tokens = " << config.task.signal_count << "\n";
  os << "sink_count = " << config.task.sink_count << "\n";
  os << "sink_scale = " << config.task.sink_scale << "\n";
  os << "noise_std = " << config.task.noise_std << "\n";
  os << "duplicate_frac = " << config.task.duplicate_frac << "\n";
  os << "train_sequences = " << config.train_sequences << "\n";
  os << "val_sequences = " << config.val_sequences << "\n";
  os << "[pretrain]\n";
  os << "epochs = " << config.pretrain.epochs << "\n";
  os << "lr = " << config.pretrain.lr << "\n";
  os << "batch_size = " << config.pretrain.batch_size << "\n";
  os << "hidden_dim = " << config.pretrain.hidden_dim << "\n";
  os << "min_accuracy = " << config.pretrain.min_accuracy << "\n";
  os << "[train]\n";
  os << "budget = " << config.train.budget << "\n";
  os << "lr_peak = " << config.train.lr_peak << "\n";
  os << "warmup_frac = " << config.train.warmup_frac << "\n";
  os << "epochs = " << config.train.epochs << "\n";
  os << "batch_size = " << config.train.batch_size << "\n";
  os << "lambda_start = " << config.train.lambda_start << "\n";
  os << "lambda_end = " << config.train.lambda_end << "\n";
  os << "beta1 = " << config.train.adamw.beta1 << "\n";
  os << "beta2 = " << config.train.adamw.beta2 << "\n";
  os << "eps = " << config.train.adamw.eps << "\n";
  os << "weight_decay = " << config.train.adamw.weight_decay << "\n";
  os << "eval_every = " << config.train.eval_every << "\n";
  os << "proj_dim = " << config.train.proj_dim << "\n";
  os << "[eval]\nbudgets = ";
  for (std::size_t i = 0; i < config.eval_budgets.size(); ++i) {
    if (i) os << ",";
    os << config.eval_budgets[i];
  }
  os << "\n[bench]\n";
  os << "tokens = " << config.bench.tokens << "\n";
  os << "batch = " << config.bench.batch << "\n";
  os << "repeats = " << config.bench.repeats << "\n";
  os << "hidden_dim = " << config.bench.hidden_dim << "\n";
  return os.str();
}

}  // namespace tokensel
