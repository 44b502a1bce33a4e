// Copyright (C) 2026 The tokensel authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "tokensel/difftopk.hpp"
#include "tokensel/errors.hpp"
#include "tokensel/rng.hpp"
#include "tokensel/serialize.hpp"
#include "tokensel/tensor.hpp"

// Planted-signal token task. Each sequence carries a handful of signal tokens
// that determine the class label, a few large-norm class-independent "sink"
// tokens that trap norm-based selectors, and filler noise (some of it
// duplicated verbatim). Ground-truth signal positions ship with the data so
// selection quality can be scored exactly.

namespace tokensel {

struct TaskSpec {
  int n_min = 48;
  int n_max = 64;
  int feature_dim = 96;   // D
  int classes = 4;        // C
  int signal_count = 6;   // m signal tokens per sequence
  int sink_count = 4;
  double sink_scale = 8.0;
  double noise_std = 0.17;
  double duplicate_frac = 0.2;
  std::uint64_t seed = 42;
};

inline void validate(const TaskSpec& spec) {
  if (spec.n_min < 2 || spec.n_max < spec.n_min) {
    throw SpecError("task spec: need 2 <= n_min <= n_max");
  }
  if (spec.classes < 2) throw SpecError("task spec: need at least 2 classes");
  if (spec.signal_count < 1 || spec.sink_count < 0) {
    throw SpecError("task spec: signal/sink counts out of range");
  }
  if (spec.signal_count + spec.sink_count > spec.n_min) {
    throw SpecError("task spec: signal_count + sink_count exceeds n_min (" +
                    std::to_string(spec.signal_count) + " + " +
                    std::to_string(spec.sink_count) + " > " +
                    std::to_string(spec.n_min) + ")");
  }
  if (spec.feature_dim < spec.classes + 1) {
    throw SpecError("task spec: feature_dim must exceed classes (orthogonal "
                    "class directions plus a sink direction)");
  }
  if (spec.noise_std < 0.0 || spec.duplicate_frac < 0.0 ||
      spec.duplicate_frac >= 1.0) {
    throw SpecError("task spec: noise_std >= 0 and duplicate_frac in [0, 1) required");
  }
}

struct Sequence {
  int valid_len = 0;
  int label = 0;
  std::vector<int> signal_idx;    // sorted ascending, subset of [0, valid_len)
  std::vector<double> features;   // valid_len * D, row-major, f32-quantized
};

struct Dataset {
  TaskSpec spec;
  std::vector<Sequence> sequences;

  std::size_t size() const { return sequences.size(); }
};

// Padded batch of sequences: the unit the pipeline consumes.
struct TokenBatch {
  Tensor features;                     // [B, N_max, D], padded positions zero
  std::vector<int> valid_len;
  std::vector<int> label;
  std::vector<std::vector<int>> signal_idx;
};

namespace detail {

// Fixed orthonormal directions derived from the task seed: one per class plus
// one shared class-independent sink direction, via Gram-Schmidt on Gaussian
// draws.
inline std::vector<std::vector<double>> class_and_sink_directions(const TaskSpec& spec) {
  const int want = spec.classes + 1;
  const std::size_t dim = static_cast<std::size_t>(spec.feature_dim);
  Rng rng(derive_seed(spec.seed, "directions"));
  std::vector<std::vector<double>> basis;
  basis.reserve(static_cast<std::size_t>(want));
  while (basis.size() < static_cast<std::size_t>(want)) {
    std::vector<double> v(dim);
    for (double& x : v) x = rng.normal();
    for (const auto& b : basis) {
      double dot = 0.0;
      for (std::size_t i = 0; i < dim; ++i) dot += v[i] * b[i];
      for (std::size_t i = 0; i < dim; ++i) v[i] -= dot * b[i];
    }
    double norm = 0.0;
    for (double x : v) norm += x * x;
    norm = std::sqrt(norm);
    if (norm < 1e-6) continue;  // retry a degenerate draw
    for (double& x : v) x /= norm;
    basis.push_back(std::move(v));
  }
  return basis;
}

inline double quantize_f32(double x) { return static_cast<double>(static_cast<float>(x)); }

}  // namespace detail

// Deterministic dataset generation. Every sequence is produced from its own
// derived seed, so generation order (or parallel generation) cannot change
// the result. Features are quantized to f32 at generation time to match the
// on-disk format exactly.
inline Dataset generate(const TaskSpec& spec, int count, std::uint64_t split_seed) {
  validate(spec);
  if (count < 1) throw SpecError("generate: count must be >= 1");

  const auto directions = detail::class_and_sink_directions(spec);
  const std::vector<double>& sink_dir = directions.back();
  const std::size_t dim = static_cast<std::size_t>(spec.feature_dim);
  const std::uint64_t split_root = derive_seed(spec.seed, "split", split_seed);

  // Balanced class assignment: a seeded shuffle of the evenly repeated label
  // multiset, so per-class counts never drift more than one sequence apart.
  std::vector<int> labels(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) labels[static_cast<std::size_t>(i)] = i % spec.classes;
  {
    Rng label_rng(derive_seed(split_root, "labels"));
    label_rng.shuffle(labels);
  }

  Dataset dataset;
  dataset.spec = spec;
  dataset.sequences.resize(static_cast<std::size_t>(count));

  for (int i = 0; i < count; ++i) {
    Rng rng(derive_seed(split_root, "sequence", static_cast<std::uint64_t>(i)));
    Sequence& seq = dataset.sequences[static_cast<std::size_t>(i)];
    seq.label = labels[static_cast<std::size_t>(i)];
    seq.valid_len =
        spec.n_min + static_cast<int>(rng.integer(
                         static_cast<std::uint64_t>(spec.n_max - spec.n_min + 1)));

    const int n = seq.valid_len;
    const int noise_count = n - spec.signal_count - spec.sink_count;
    const int duplicate_count =
        static_cast<int>(std::floor(spec.duplicate_frac * noise_count));
    const int fresh_noise = noise_count - duplicate_count;

    // Token list before shuffling: signal, sinks, fresh noise, duplicates.
    std::vector<std::vector<double>> tokens;
    tokens.reserve(static_cast<std::size_t>(n));
    const std::vector<double>& mu = directions[static_cast<std::size_t>(seq.label)];
    for (int t = 0; t < spec.signal_count; ++t) {
      std::vector<double> v(dim);
      for (std::size_t c = 0; c < dim; ++c) {
        v[c] = mu[c] + rng.normal(0.0, spec.noise_std);
      }
      tokens.push_back(std::move(v));
    }
    for (int t = 0; t < spec.sink_count; ++t) {
      std::vector<double> v(dim);
      for (std::size_t c = 0; c < dim; ++c) {
        v[c] = spec.sink_scale * sink_dir[c] + rng.normal(0.0, 0.1 * spec.noise_std);
      }
      tokens.push_back(std::move(v));
    }
    const std::size_t noise_base = tokens.size();
    for (int t = 0; t < fresh_noise; ++t) {
      std::vector<double> v(dim);
      for (std::size_t c = 0; c < dim; ++c) v[c] = rng.normal(0.0, spec.noise_std);
      tokens.push_back(std::move(v));
    }
    for (int t = 0; t < duplicate_count; ++t) {
      const std::size_t source =
          noise_base + static_cast<std::size_t>(
                           rng.integer(static_cast<std::uint64_t>(fresh_noise)));
      tokens.push_back(tokens[source]);  // verbatim copy
    }

    std::vector<int> position(static_cast<std::size_t>(n));
    for (int t = 0; t < n; ++t) position[static_cast<std::size_t>(t)] = t;
    rng.shuffle(position);

    seq.features.assign(static_cast<std::size_t>(n) * dim, 0.0);
    for (int t = 0; t < n; ++t) {
      const int where = position[static_cast<std::size_t>(t)];
      const auto& v = tokens[static_cast<std::size_t>(t)];
      for (std::size_t c = 0; c < dim; ++c) {
        seq.features[static_cast<std::size_t>(where) * dim + c] =
            detail::quantize_f32(v[c]);
      }
      if (t < spec.signal_count) seq.signal_idx.push_back(where);
    }
    std::sort(seq.signal_idx.begin(), seq.signal_idx.end());
  }
  return dataset;
}

// The noise-free rendition of a split: identical structure and seeds, zero
// feature noise. Used as the held-out sanity gate for backbone pretraining.
inline Dataset generate_clean(const TaskSpec& spec, int count,
                              std::uint64_t split_seed) {
  TaskSpec clean = spec;
  clean.noise_std = 0.0;
  return generate(clean, count, split_seed);
}

// Upper-bound selector: all signal tokens first (lowest index when k < m),
// then the lowest-index noise tokens. Sink tokens are recognized by their
// norm (anything above sink_norm_cut) and used only when no noise is left.
inline HardMask oracle_mask(const TokenBatch& batch, double budget,
                            double sink_norm_cut = 4.0) {
  const std::size_t batch_size = batch.valid_len.size();
  const std::size_t width = batch.features.dim(1);
  const std::size_t dim = batch.features.dim(2);
  HardMask result;
  result.mask = Tensor::zeros({batch_size, width});
  result.k.resize(batch_size);

  for (std::size_t b = 0; b < batch_size; ++b) {
    const int n = batch.valid_len[b];
    const int k = budget_to_k(n, budget);
    result.k[b] = k;

    std::vector<bool> taken(static_cast<std::size_t>(n), false);
    std::vector<int> chosen;
    chosen.reserve(static_cast<std::size_t>(k));
    for (int idx : batch.signal_idx[b]) {
      if (static_cast<int>(chosen.size()) >= k) break;
      chosen.push_back(idx);
      taken[static_cast<std::size_t>(idx)] = true;
    }

    const double* row = batch.features.data() + b * width * dim;
    const auto token_norm = [&](int i) {
      double acc = 0.0;
      const double* tok = row + static_cast<std::size_t>(i) * dim;
      for (std::size_t c = 0; c < dim; ++c) acc += tok[c] * tok[c];
      return std::sqrt(acc);
    };
    for (int pass = 0; pass < 2 && static_cast<int>(chosen.size()) < k; ++pass) {
      for (int i = 0; i < n && static_cast<int>(chosen.size()) < k; ++i) {
        if (taken[static_cast<std::size_t>(i)]) continue;
        if (pass == 0 && token_norm(i) > sink_norm_cut) continue;
        chosen.push_back(i);
        taken[static_cast<std::size_t>(i)] = true;
      }
    }
    for (int idx : chosen) {
      result.mask.data()[b * width + static_cast<std::size_t>(idx)] = 1.0;
    }
  }
  return result;
}

// Assembles a padded batch from dataset sequences.
inline TokenBatch make_batch(const Dataset& dataset, const std::vector<int>& indices) {
  const std::size_t batch_size = indices.size();
  const std::size_t width = static_cast<std::size_t>(dataset.spec.n_max);
  const std::size_t dim = static_cast<std::size_t>(dataset.spec.feature_dim);

  TokenBatch batch;
  batch.features = Tensor::zeros({batch_size, width, dim});
  batch.valid_len.resize(batch_size);
  batch.label.resize(batch_size);
  batch.signal_idx.resize(batch_size);
  for (std::size_t b = 0; b < batch_size; ++b) {
    const Sequence& seq = dataset.sequences.at(static_cast<std::size_t>(indices[b]));
    batch.valid_len[b] = seq.valid_len;
    batch.label[b] = seq.label;
    batch.signal_idx[b] = seq.signal_idx;
    std::copy(seq.features.begin(), seq.features.end(),
              batch.features.data() + b * width * dim);
  }
  return batch;
}

inline TokenBatch make_batch(const Dataset& dataset, std::size_t begin,
                             std::size_t end) {
  std::vector<int> indices;
  indices.reserve(end - begin);
  for (std::size_t i = begin; i < end; ++i) indices.push_back(static_cast<int>(i));
  return make_batch(dataset, indices);
}

// --- dataset file format -----------------------------------------------------
//
// magic "DTKS", u32 version, task spec echo, u64 sequence count, then one
// record per sequence: u32 valid_len, u32 label, u32 signal count + u32
// indices, row-major f32 features. Little-endian throughout.

inline constexpr std::uint32_t kDatasetVersion = 1;

inline void save_dataset(const Dataset& dataset, const std::string& path) {
  ByteWriter w;
  w.magic("DTKS");
  w.u32(kDatasetVersion);
  const TaskSpec& s = dataset.spec;
  w.u32(static_cast<std::uint32_t>(s.n_min));
  w.u32(static_cast<std::uint32_t>(s.n_max));
  w.u32(static_cast<std::uint32_t>(s.feature_dim));
  w.u32(static_cast<std::uint32_t>(s.classes));
  w.u32(static_cast<std::uint32_t>(s.signal_count));
  w.u32(static_cast<std::uint32_t>(s.sink_count));
  w.f64(s.sink_scale);
  w.f64(s.noise_std);
  w.f64(s.duplicate_frac);
  w.u64(s.seed);
  w.u64(dataset.sequences.size());
  for (const Sequence& seq : dataset.sequences) {
    w.u32(static_cast<std::uint32_t>(seq.valid_len));
    w.u32(static_cast<std::uint32_t>(seq.label));
    w.u32(static_cast<std::uint32_t>(seq.signal_idx.size()));
    for (int idx : seq.signal_idx) w.u32(static_cast<std::uint32_t>(idx));
    for (double v : seq.features) w.f32(static_cast<float>(v));
  }
  write_file(path, w.bytes());
}

inline Dataset load_dataset(const std::string& path) {
  ByteReader r(read_file(path));
  r.expect_magic("DTKS");
  const std::uint32_t version = r.u32();
  if (version != kDatasetVersion) {
    throw IntegrityError("unsupported dataset version " + std::to_string(version));
  }
  Dataset dataset;
  TaskSpec& s = dataset.spec;
  s.n_min = static_cast<int>(r.u32());
  s.n_max = static_cast<int>(r.u32());
  s.feature_dim = static_cast<int>(r.u32());
  s.classes = static_cast<int>(r.u32());
  s.signal_count = static_cast<int>(r.u32());
  s.sink_count = static_cast<int>(r.u32());
  s.sink_scale = r.f64();
  s.noise_std = r.f64();
  s.duplicate_frac = r.f64();
  s.seed = r.u64();
  validate(s);

  const std::uint64_t count = r.u64();
  dataset.sequences.resize(count);
  for (std::uint64_t i = 0; i < count; ++i) {
    Sequence& seq = dataset.sequences[i];
    seq.valid_len = static_cast<int>(r.u32());
    seq.label = static_cast<int>(r.u32());
    if (seq.valid_len < s.n_min || seq.valid_len > s.n_max ||
        seq.label >= s.classes) {
      throw IntegrityError("dataset record " + std::to_string(i) +
                           " inconsistent with its spec");
    }
    const std::uint32_t signal = r.u32();
    seq.signal_idx.resize(signal);
    for (auto& idx : seq.signal_idx) idx = static_cast<int>(r.u32());
    seq.features.resize(static_cast<std::size_t>(seq.valid_len) *
                        static_cast<std::size_t>(s.feature_dim));
    for (double& v : seq.features) v = static_cast<double>(r.f32());
  }
  if (r.remaining() != 0) throw IntegrityError("trailing bytes in dataset file");
  return dataset;
}

}  // namespace tokensel
