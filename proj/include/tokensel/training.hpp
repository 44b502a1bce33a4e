// Copyright (C) 2026 The tokensel authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "tokensel/errors.hpp"
#include "tokensel/evaluation.hpp"
#include "tokensel/objective.hpp"
#include "tokensel/pipeline.hpp"
#include "tokensel/scorer.hpp"
#include "tokensel/serialize.hpp"
#include "tokensel/synth_data.hpp"

// Scorer-only training: frozen backbone, fixed budget, AdamW with linear
// warmup + cosine-annealed learning rate, curriculum-annealed constraint
// weight, JSON-lines metric logging and resumable checkpoints.

namespace tokensel {

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

struct TrainConfig {
  double budget = 0.2;
  double lr_peak = 1e-3;
  double warmup_frac = 0.03;
  int epochs = 5;
  int batch_size = 64;
  double lambda_start = 0.1;
  double lambda_end = 2.0;
  AdamWConfig adamw;
  std::uint64_t seed = 42;
  int eval_every = 128;  // steps between validation passes; 0 = final only
  int proj_dim = 0;      // 0 -> feature_dim / 2
};

// Linear ramp to lr_peak over the warmup steps, then cosine annealing to zero
// at total_steps.
inline double lr_at(const TrainConfig& config, long long step, long long total_steps) {
  if (step < 0 || total_steps < 1) throw ConfigError("lr_at: bad step/total");
  const long long warmup =
      std::llround(config.warmup_frac * static_cast<double>(total_steps));
  if (step < warmup) {
    return config.lr_peak * static_cast<double>(step) / static_cast<double>(warmup);
  }
  if (total_steps <= warmup) return config.lr_peak;
  const double progress = std::min(
      1.0, static_cast<double>(step - warmup) / static_cast<double>(total_steps - warmup));
  return config.lr_peak * 0.5 * (1.0 + std::cos(3.14159265358979323846 * progress));
}

struct AdamWState {
  Tensor m;
  Tensor v;
  long long updates = 0;
};

inline AdamWState make_adamw_state(const Tensor& param) {
  return AdamWState{Tensor::zeros(param.shape()), Tensor::zeros(param.shape()), 0};
}

// Decoupled-weight-decay Adam update with bias correction.
inline void adamw_step(Tensor& param, const Tensor& grad, AdamWState& state,
                       double lr, const AdamWConfig& config) {
  if (param.shape() != grad.shape() || param.shape() != state.m.shape()) {
    throw DimensionError("adamw_step: parameter/gradient/moment shape mismatch");
  }
  ++state.updates;
  const double bc1 = 1.0 - std::pow(config.beta1, static_cast<double>(state.updates));
  const double bc2 = 1.0 - std::pow(config.beta2, static_cast<double>(state.updates));
  for (std::size_t i = 0; i < param.size(); ++i) {
    const double g = grad.data()[i];
    state.m.data()[i] = config.beta1 * state.m.data()[i] + (1.0 - config.beta1) * g;
    state.v.data()[i] = config.beta2 * state.v.data()[i] + (1.0 - config.beta2) * g * g;
    const double m_hat = state.m.data()[i] / bc1;
    const double v_hat = state.v.data()[i] / bc2;
    param.data()[i] -= lr * (m_hat / (std::sqrt(v_hat) + config.eps) +
                             config.weight_decay * param.data()[i]);
  }
}

// JSON-lines metric log. The first line is metadata (and the only place a
// timestamp appears); every further line is one step or eval record, byte
// reproducible for identical runs.
class MetricLog {
 public:
  MetricLog() = default;

  explicit MetricLog(const std::string& path) {
    if (!path.empty()) {
      file_.open(path, std::ios::trunc);
      if (!file_) throw IoError("cannot open metric log '" + path + "'");
    }
  }

  void meta(const nlohmann::json& object) { write(object, /*is_meta=*/true); }
  void line(const nlohmann::json& object) { write(object, /*is_meta=*/false); }

  // All non-meta lines, for reproducibility comparisons and tests.
  const std::vector<std::string>& lines() const { return lines_; }

 private:
  void write(const nlohmann::json& object, bool is_meta) {
    const std::string text = object.dump();
    if (file_.is_open()) {
      file_ << text << '\n';
      file_.flush();
    }
    if (!is_meta) lines_.push_back(text);
  }

  std::ofstream file_;
  std::vector<std::string> lines_;
};

struct TrainState {
  ScorerParams scorer;
  AdamWState opt_q;
  AdamWState opt_k;
  long long step = 0;
  long long skipped = 0;  // steps dropped due to non-finite gradients
};

struct TrainResult {
  TrainState state;
  double final_val_accuracy = 0.0;
  double final_signal_recall = 0.0;
  std::vector<double> gap_trace;  // per-step mean |M_soft - M_hard|
};

namespace detail {

inline bool all_finite(const Tensor& t) {
  for (std::size_t i = 0; i < t.size(); ++i) {
    if (!std::isfinite(t.data()[i])) return false;
  }
  return true;
}

// Mean |logits_train - logits_infer| on a fixed probe batch: the gap the
// curriculum is meant to close.
inline double train_infer_gap(const TokenBatch& probe, const ScorerParams& scorer,
                              const FrozenBackbone& backbone, double budget) {
  PipelineOutput train_out = forward_train(probe, scorer, backbone, budget);
  PipelineOutput infer_out = forward_infer(probe, scorer, backbone, budget);
  double acc = 0.0;
  for (std::size_t i = 0; i < train_out.logits.size(); ++i) {
    acc += std::abs(train_out.logits.data()[i] - infer_out.logits.data()[i]);
  }
  return acc / static_cast<double>(train_out.logits.size());
}

}  // namespace detail

// One pass per epoch over shuffled fixed-size batches, updating only the
// scorer parameters. Shuffles are re-derivable from (seed, epoch), so a
// resumed run replays the exact batch order of an uninterrupted one.
// `stop_after_step` (>= 0) halts early for checkpoint/resume workflows.
inline TrainResult train_scorer(const TrainConfig& config, const Dataset& train,
                                const Dataset& val, const FrozenBackbone& backbone,
                                MetricLog* log = nullptr,
                                const TrainState* resume = nullptr,
                                long long stop_after_step = -1) {
  if (!backbone.frozen) throw ConfigError("train_scorer: backbone must be frozen");
  if (static_cast<int>(backbone.input_dim()) != train.spec.feature_dim) {
    throw ConfigError("train_scorer: backbone dim does not match dataset");
  }
  if (!(config.budget > 0.0 && config.budget < 1.0)) {
    throw ConfigError("train_scorer: budget outside (0, 1)");
  }
  const std::size_t batch_size = static_cast<std::size_t>(config.batch_size);
  const long long steps_per_epoch =
      static_cast<long long>(train.size() / batch_size);
  if (steps_per_epoch < 1) {
    throw ConfigError("train_scorer: batch size exceeds dataset size");
  }
  const long long total_steps = steps_per_epoch * config.epochs;
  const AnnealSchedule schedule{config.lambda_start, config.lambda_end, total_steps};

  const std::size_t dim = static_cast<std::size_t>(train.spec.feature_dim);
  const std::size_t proj =
      config.proj_dim > 0 ? static_cast<std::size_t>(config.proj_dim)
                          : std::max<std::size_t>(1, dim / 2);

  TrainResult result;
  if (resume != nullptr) {
    result.state.scorer = ScorerParams{resume->scorer.w_q.clone(),
                                       resume->scorer.w_k.clone()};
    result.state.opt_q = AdamWState{resume->opt_q.m.clone(), resume->opt_q.v.clone(),
                                    resume->opt_q.updates};
    result.state.opt_k = AdamWState{resume->opt_k.m.clone(), resume->opt_k.v.clone(),
                                    resume->opt_k.updates};
    result.state.step = resume->step;
    result.state.skipped = resume->skipped;
  } else {
    result.state.scorer = init_scorer(dim, proj, config.seed);
    result.state.opt_q = make_adamw_state(result.state.scorer.w_q);
    result.state.opt_k = make_adamw_state(result.state.scorer.w_k);
  }
  TrainState& state = result.state;

  const TokenBatch probe =
      make_batch(val, 0, std::min<std::size_t>(val.size(), 64));

  std::vector<int> order(train.size());
  long long order_epoch = -1;
  const auto reshuffle = [&](long long epoch) {
    for (std::size_t i = 0; i < train.size(); ++i) order[i] = static_cast<int>(i);
    Rng rng(derive_seed(config.seed, "shuffle", static_cast<std::uint64_t>(epoch)));
    rng.shuffle(order);
    order_epoch = epoch;
  };

  const auto run_eval = [&](long long step) {
    nlohmann::json j;
    j["type"] = "eval";
    j["step"] = step;
    j["budget"] = config.budget;
    try {
      EvalRow row = evaluate(Selector::kLearned, config.budget, val, &state.scorer,
                             backbone, config.seed, /*full_accuracy=*/1.0);
      result.final_val_accuracy = row.accuracy;
      result.final_signal_recall = row.recall;
      j["val_accuracy"] = row.accuracy;
      j["signal_recall"] = row.recall;
      j["soft_hard_gap"] = row.soft_hard_gap;
      j["train_infer_gap"] =
          detail::train_infer_gap(probe, state.scorer, backbone, config.budget);
    } catch (const Error& e) {
      j["error"] = e.what();  // evaluation on a blown-up scorer
    }
    if (log != nullptr) log->line(j);
  };

  const long long stop =
      stop_after_step >= 0 ? std::min(stop_after_step, total_steps) : total_steps;

  for (long long step = state.step; step < stop; ++step) {
    const long long epoch = step / steps_per_epoch;
    const long long pos = step % steps_per_epoch;
    if (epoch != order_epoch) reshuffle(epoch);

    std::vector<int> indices(
        order.begin() + static_cast<std::ptrdiff_t>(pos * static_cast<long long>(batch_size)),
        order.begin() +
            static_cast<std::ptrdiff_t>((pos + 1) * static_cast<long long>(batch_size)));
    TokenBatch batch = make_batch(train, indices);
    const double lambda = lambda_at(schedule, step);
    const double lr = lr_at(config, step, total_steps);

    double loss_total = 0.0, loss_task = 0.0, loss_constraint = 0.0, gap = 0.0;
    // A numeric blowup (overflowed scores, non-finite gradients) aborts the
    // step without an update; unattended runs keep going.
    try {
      Tape tape;
      ScorerParams bound{tape.watch(state.scorer.w_q), tape.watch(state.scorer.w_k)};
      PipelineOutput out = forward_train(batch, bound, backbone, config.budget);
      Tensor task = task_loss(out.logits, batch.label);
      Tensor constraint =
          constraint_loss(out.selection.soft_mask, out.hard, batch.valid_len);
      Tensor loss = total_loss(task, constraint, lambda);
      tape.backward(loss);

      Tensor grad_q = tape.grad(bound.w_q);
      Tensor grad_k = tape.grad(bound.w_k);
      if (detail::all_finite(grad_q) && detail::all_finite(grad_k)) {
        adamw_step(state.scorer.w_q, grad_q, state.opt_q, lr, config.adamw);
        adamw_step(state.scorer.w_k, grad_k, state.opt_k, lr, config.adamw);
      } else {
        ++state.skipped;
      }
      loss_total = loss.item();
      loss_task = task.item();
      loss_constraint = constraint.item();
      gap = soft_hard_gap(out.selection.soft_mask, out.hard, batch.valid_len);
    } catch (const InputError&) {
      ++state.skipped;
    } catch (const DomainError&) {
      ++state.skipped;
    }

    result.gap_trace.push_back(gap);
    state.step = step + 1;

    if (log != nullptr) {
      nlohmann::json j;
      j["type"] = "step";
      j["step"] = step;
      j["epoch"] = epoch;
      j["lr"] = lr;
      j["lambda"] = lambda;
      j["loss_total"] = loss_total;
      j["loss_task"] = loss_task;
      j["loss_constraint"] = loss_constraint;
      j["soft_hard_gap"] = gap;
      j["skipped_total"] = state.skipped;
      log->line(j);
    }

    const bool is_last = step + 1 == stop;
    if ((config.eval_every > 0 && (step + 1) % config.eval_every == 0) || is_last) {
      run_eval(step);
    }
  }
  return result;
}

// --- checkpoint format ---------------------------------------------------------
//
// magic "DTKC", u32 version, u32 section count, section table (4-char tag,
// u64 offset, u64 size), payload sections, trailing u64 fnv-1a checksum over
// everything before it. Sections: CONF (config echo), BACK (backbone), and
// for training checkpoints SCOR / OPTM / STEP.

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  std::string config_echo;
  FrozenBackbone backbone;
  bool has_train_state = false;
  TrainState train;
};

inline void save_checkpoint(const Checkpoint& checkpoint, const std::string& path) {
  struct Section {
    const char* tag;
    std::string payload;
  };
  std::vector<Section> sections;

  {
    ByteWriter w;
    w.str(checkpoint.config_echo);
    sections.push_back({"CONF", w.bytes()});
  }
  {
    ByteWriter w;
    w.tensor(checkpoint.backbone.w1);
    w.tensor(checkpoint.backbone.b1);
    w.tensor(checkpoint.backbone.w2);
    w.tensor(checkpoint.backbone.b2);
    w.u32(checkpoint.backbone.frozen ? 1 : 0);
    sections.push_back({"BACK", w.bytes()});
  }
  if (checkpoint.has_train_state) {
    {
      ByteWriter w;
      w.tensor(checkpoint.train.scorer.w_q);
      w.tensor(checkpoint.train.scorer.w_k);
      sections.push_back({"SCOR", w.bytes()});
    }
    {
      ByteWriter w;
      w.tensor(checkpoint.train.opt_q.m);
      w.tensor(checkpoint.train.opt_q.v);
      w.u64(static_cast<std::uint64_t>(checkpoint.train.opt_q.updates));
      w.tensor(checkpoint.train.opt_k.m);
      w.tensor(checkpoint.train.opt_k.v);
      w.u64(static_cast<std::uint64_t>(checkpoint.train.opt_k.updates));
      sections.push_back({"OPTM", w.bytes()});
    }
    {
      ByteWriter w;
      w.u64(static_cast<std::uint64_t>(checkpoint.train.step));
      w.u64(static_cast<std::uint64_t>(checkpoint.train.skipped));
      sections.push_back({"STEP", w.bytes()});
    }
  }

  ByteWriter file;
  file.magic("DTKC");
  file.u32(kCheckpointVersion);
  file.u32(static_cast<std::uint32_t>(sections.size()));
  std::size_t offset = 4 + 4 + 4 + sections.size() * 20;  // header + table
  for (const Section& s : sections) {
    file.magic(s.tag);
    file.u64(offset);
    file.u64(s.payload.size());
    offset += s.payload.size();
  }
  for (const Section& s : sections) file.append(s.payload);
  const std::uint64_t checksum = checksum_bytes(file.bytes());
  ByteWriter full;
  full.append(file.bytes());
  full.u64(checksum);
  write_file(path, full.bytes());
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::string bytes = read_file(path);
  if (bytes.size() < 8 + 4 + 4 + 4) {
    throw IntegrityError("checkpoint file too short: " + path);
  }
  std::uint64_t stored = 0;
  std::memcpy(&stored, bytes.data() + bytes.size() - 8, 8);
  const std::string_view payload(bytes.data(), bytes.size() - 8);
  if (checksum_bytes(payload) != stored) {
    throw IntegrityError("checkpoint checksum mismatch: " + path);
  }

  ByteReader r{std::string(payload)};
  r.expect_magic("DTKC");
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion) {
    throw IntegrityError("unsupported checkpoint version " + std::to_string(version));
  }
  const std::uint32_t count = r.u32();
  struct Entry {
    std::string tag;
    std::uint64_t offset = 0;
    std::uint64_t size = 0;
  };
  std::vector<Entry> table(count);
  for (Entry& e : table) {
    e.tag = r.chars(4);
    e.offset = r.u64();
    e.size = r.u64();
    if (e.offset + e.size > payload.size()) {
      throw IntegrityError("checkpoint section '" + e.tag + "' out of bounds");
    }
  }
  const auto find = [&table](const std::string& tag) -> const Entry* {
    for (const Entry& e : table) {
      if (e.tag == tag) return &e;
    }
    return nullptr;
  };

  Checkpoint checkpoint;
  const Entry* conf = find("CONF");
  const Entry* back = find("BACK");
  if (conf == nullptr || back == nullptr) {
    throw IntegrityError("checkpoint missing CONF/BACK sections");
  }
  r.seek(conf->offset);
  checkpoint.config_echo = r.str();

  r.seek(back->offset);
  checkpoint.backbone.w1 = r.tensor();
  checkpoint.backbone.b1 = r.tensor();
  checkpoint.backbone.w2 = r.tensor();
  checkpoint.backbone.b2 = r.tensor();
  checkpoint.backbone.frozen = r.u32() != 0;

  const Entry* scor = find("SCOR");
  const Entry* optm = find("OPTM");
  const Entry* step = find("STEP");
  if (scor != nullptr) {
    if (optm == nullptr || step == nullptr) {
      throw IntegrityError("checkpoint has scorer but no optimizer/step sections");
    }
    checkpoint.has_train_state = true;
    r.seek(scor->offset);
    checkpoint.train.scorer.w_q = r.tensor();
    checkpoint.train.scorer.w_k = r.tensor();
    r.seek(optm->offset);
    checkpoint.train.opt_q.m = r.tensor();
    checkpoint.train.opt_q.v = r.tensor();
    checkpoint.train.opt_q.updates = static_cast<long long>(r.u64());
    checkpoint.train.opt_k.m = r.tensor();
    checkpoint.train.opt_k.v = r.tensor();
    checkpoint.train.opt_k.updates = static_cast<long long>(r.u64());
    r.seek(step->offset);
    checkpoint.train.step = static_cast<long long>(r.u64());
    checkpoint.train.skipped = static_cast<long long>(r.u64());
  }
  return checkpoint;
}

}  // namespace tokensel
