// Copyright (C) 2026 The tokensel authors
// SPDX-License-Identifier: Apache-2.0

#include <cstdint>
#include <iostream>
#include <string>

#include "CLI11.hpp"
#include "tokensel/cli.hpp"
#include "tokensel/config.hpp"
#include "tokensel/errors.hpp"

namespace {

// Shared flags; every subcommand takes the same configuration surface.
struct Flags {
  std::string config_path;
  std::string out;
  std::string checkpoint;
  std::string dataset;
  std::string selector = "learned";
  double budget = -1.0;  // <= 0: use the configured training budget
  std::int64_t seed = -1;
  int gradcheck_configs = 100;
};

void add_common(CLI::App* cmd, Flags& flags) {
  cmd->add_option("--config", flags.config_path, "configuration file");
  cmd->add_option("--seed", flags.seed, "master seed (overrides config)");
  cmd->add_option("--budget", flags.budget, "retention budget (overrides config)");
  cmd->add_option("--out", flags.out, "output path");
  cmd->add_option("--checkpoint", flags.checkpoint, "checkpoint path");
  cmd->add_option("--dataset", flags.dataset, "dataset path");
}

tokensel::RunConfig make_config(const Flags& flags) {
  tokensel::RunConfig config = flags.config_path.empty()
                                   ? tokensel::default_config()
                                   : tokensel::parse_config_file(flags.config_path);
  if (flags.seed >= 0) config.seed = static_cast<std::uint64_t>(flags.seed);
  if (flags.budget > 0.0) config.train.budget = flags.budget;
  tokensel::propagate_seed(config);
  tokensel::validate(config);
  return config;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{
      "tokensel: learnable token selection with a differentiable Top-K "
      "operator.\n"
      "Exit codes: 0 success, 1 usage/config error, 2 I/O error, 3 numeric "
      "failure."};
  app.require_subcommand(1);

  Flags flags;
  CLI::App* gen = app.add_subcommand("gen-data", "generate the synthetic task");
  CLI::App* pretrain =
      app.add_subcommand("pretrain-backbone", "train and freeze the backbone");
  CLI::App* train = app.add_subcommand("train-scorer", "train the importance scorer");
  CLI::App* eval = app.add_subcommand("eval", "evaluate one selector at one budget");
  CLI::App* sweep = app.add_subcommand("sweep", "selector x budget evaluation grid");
  CLI::App* gradcheck =
      app.add_subcommand("gradcheck", "finite-difference gradient verification");
  CLI::App* bench = app.add_subcommand("bench", "efficiency proxy benchmark");
  CLI::App* dump = app.add_subcommand("dump-scores", "per-token score dump (CSV)");

  for (CLI::App* cmd : {gen, pretrain, train, eval, sweep, gradcheck, bench, dump}) {
    add_common(cmd, flags);
  }
  eval->add_option("--selector", flags.selector, "learned|random|norm|oracle");
  gradcheck->add_option("--configs", flags.gradcheck_configs,
                        "number of random DiffTopK configurations");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    const tokensel::RunConfig config = make_config(flags);
    if (gen->parsed()) return tokensel::cmd_gen_data(config, flags.out);
    if (pretrain->parsed()) {
      return tokensel::cmd_pretrain(config, flags.dataset, flags.out);
    }
    if (train->parsed()) {
      return tokensel::cmd_train(config, flags.dataset, flags.checkpoint, flags.out);
    }
    if (eval->parsed()) {
      return tokensel::cmd_eval(config, flags.checkpoint, flags.dataset, flags.budget,
                                flags.selector, flags.out);
    }
    if (sweep->parsed()) {
      return tokensel::cmd_sweep(config, flags.checkpoint, flags.dataset, flags.out);
    }
    if (gradcheck->parsed()) {
      return tokensel::cmd_gradcheck(config, flags.gradcheck_configs);
    }
    if (bench->parsed()) return tokensel::cmd_bench(config, flags.budget, flags.out);
    if (dump->parsed()) {
      return tokensel::cmd_dump_scores(config, flags.checkpoint, flags.dataset,
                                       flags.budget, flags.out);
    }
    std::cerr << "no command given\n";
    return 1;
  } catch (const tokensel::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 1;
  } catch (const tokensel::SpecError& e) {
    std::cerr << "spec error: " << e.what() << "\n";
    return 1;
  } catch (const tokensel::BudgetError& e) {
    std::cerr << "budget error: " << e.what() << "\n";
    return 1;
  } catch (const tokensel::IoError& e) {
    std::cerr << "i/o error: " << e.what() << "\n";
    return 2;
  } catch (const tokensel::IntegrityError& e) {
    std::cerr << "integrity error: " << e.what() << "\n";
    return 2;
  } catch (const tokensel::Error& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  }
}
