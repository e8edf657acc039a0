#pragma once

// Synthetic tasks: labeled vMF representations and two-class Markov token data.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "../dataio.hpp"
#include "../errors.hpp"
#include "../sphere.hpp"
#include "../trainer.hpp"

namespace s2d::simlab {

/// Two class-conditional vMF models on a shared sphere. Index 0 is the null (human) class.
struct SyntheticRepTask {
  VmfModel class0;
  VmfModel class1;

  SyntheticRepTask(VmfModel c0, VmfModel c1) : class0(std::move(c0)), class1(std::move(c1)) {
    require_same_dim(class0.dim(), class1.dim(), "SyntheticRepTask");
  }
  int dim() const { return class0.dim(); }
  const VmfModel& model(int label) const { return label == 1 ? class1 : class0; }
};

/// Class 0 records first, then class 1; deterministic per seed.
inline RepresentationDataset gen_representations(const SyntheticRepTask& task, std::size_t n_per_class,
                                                 std::uint64_t seed) {
  if (n_per_class < 1) throw DomainError("gen_representations: n_per_class must be >= 1");
  std::mt19937_64 rng(seed);
  RepresentationDataset ds{task.dim(), {}};
  ds.records.reserve(2 * n_per_class);
  for (int c = 0; c < 2; ++c)
    for (std::size_t i = 0; i < n_per_class; ++i) ds.records.push_back({c, sample_vmf(task.model(c), rng).coords()});
  return ds;
}

using TransitionTable = std::vector<std::vector<double>>;

/// Per-class first-order Markov chains over a shared vocabulary. The first
/// token is uniform; lengths are uniform on [min_len, max_len].
struct SyntheticTokenTask {
  int vocab = 0;
  TransitionTable table[2];
  int min_len = 8;
  int max_len = 24;

  void validate() const {
    if (vocab < 1) throw ConfigError("token task: vocab must be >= 1");
    if (min_len < 1 || max_len < min_len) throw ConfigError("token task: need 1 <= min_len <= max_len");
    for (int c = 0; c < 2; ++c) {
      if (static_cast<int>(table[c].size()) != vocab)
        throw ConfigError("token task: table " + std::to_string(c) + " must have vocab rows");
      for (int r = 0; r < vocab; ++r) {
        const auto& row = table[c][static_cast<std::size_t>(r)];
        if (static_cast<int>(row.size()) != vocab)
          throw ConfigError("token task: table " + std::to_string(c) + " row " + std::to_string(r) + " has wrong length");
        double sum = 0.0;
        for (double p : row) {
          if (!(p >= 0.0) || !std::isfinite(p))
            throw ConfigError("token task: table " + std::to_string(c) + " row " + std::to_string(r) +
                              " has a negative or non-finite entry");
          sum += p;
        }
        if (std::abs(sum - 1.0) > 1e-9)
          throw ConfigError("token task: table " + std::to_string(c) + " row " + std::to_string(r) +
                            " does not sum to 1");
      }
    }
  }
};

inline TransitionTable random_table(int vocab, double concentration, std::mt19937_64& rng) {
  std::gamma_distribution<double> gamma(concentration, 1.0);
  TransitionTable t(static_cast<std::size_t>(vocab), std::vector<double>(static_cast<std::size_t>(vocab)));
  for (auto& row : t) {
    double s = 0.0;
    for (auto& p : row) s += (p = gamma(rng));
    for (auto& p : row) p /= s;
  }
  return t;
}

/// Classes share a random base chain and differ by a `mix`-weighted private
/// chain each: P_c = (1 - mix) P_base + mix Q_c. Q_c only moves to tokens in
/// a class-specific half of the vocabulary (a random partition), so the
/// classes differ in token frequencies. Small `mix` gives heavily
/// overlapping classes; mix = 0 makes them identical.
inline SyntheticTokenTask overlapping_token_task(int vocab, double mix, std::uint64_t seed, int min_len = 8,
                                                 int max_len = 24, double concentration = 0.5) {
  if (!(mix >= 0.0 && mix <= 1.0)) throw ConfigError("token task: mix must lie in [0, 1]");
  if (vocab < 2) throw ConfigError("token task: vocab must be >= 2");
  std::mt19937_64 rng(seed);
  const auto base = random_table(vocab, concentration, rng);
  std::vector<int> perm(static_cast<std::size_t>(vocab));
  for (int k = 0; k < vocab; ++k) perm[static_cast<std::size_t>(k)] = k;
  std::shuffle(perm.begin(), perm.end(), rng);
  SyntheticTokenTask task;
  task.vocab = vocab;
  task.min_len = min_len;
  task.max_len = max_len;
  for (int c = 0; c < 2; ++c) {
    auto own = random_table(vocab, concentration, rng);
    std::vector<bool> allowed(static_cast<std::size_t>(vocab), false);
    for (int k = c; k < vocab; k += 2) allowed[static_cast<std::size_t>(perm[static_cast<std::size_t>(k)])] = true;
    for (auto& row : own) {
      double s = 0.0;
      for (std::size_t k = 0; k < row.size(); ++k) s += (row[k] = allowed[k] ? row[k] : 0.0);
      for (auto& p : row) p /= s;
    }
    task.table[c] = base;
    for (int r = 0; r < vocab; ++r) {
      auto& row = task.table[c][static_cast<std::size_t>(r)];
      double s = 0.0;
      for (int k = 0; k < vocab; ++k) {
        auto& p = row[static_cast<std::size_t>(k)];
        p = (1.0 - mix) * p + mix * own[static_cast<std::size_t>(r)][static_cast<std::size_t>(k)];
        s += p;
      }
      for (auto& p : row) p /= s;
    }
  }
  return task;
}

/// n_per_class sequences of each class, interleaved 0,1,0,1,...; deterministic per seed.
inline TokenDataset gen_token_sequences(const SyntheticTokenTask& task, std::size_t n_per_class, std::uint64_t seed) {
  task.validate();
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> start(0, task.vocab - 1);
  std::uniform_int_distribution<int> length(task.min_len, task.max_len);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  auto next = [&](const std::vector<double>& row) {
    const double u = unif(rng);
    double acc = 0.0;
    for (std::size_t k = 0; k < row.size(); ++k) {
      acc += row[k];
      if (u < acc) return static_cast<std::uint32_t>(k);
    }
    // u landed in the rounding slack at the top; take the last positive entry
    for (std::size_t k = row.size(); k-- > 0;)
      if (row[k] > 0.0) return static_cast<std::uint32_t>(k);
    return static_cast<std::uint32_t>(row.size() - 1);
  };
  TokenDataset out;
  out.reserve(2 * n_per_class);
  for (std::size_t i = 0; i < n_per_class; ++i) {
    for (int c = 0; c < 2; ++c) {
      const int len = length(rng);
      LabeledSeq item{{}, c};
      item.x.ids.reserve(static_cast<std::size_t>(len));
      item.x.ids.push_back(static_cast<std::uint32_t>(start(rng)));
      while (static_cast<int>(item.x.size()) < len) item.x.ids.push_back(next(task.table[c][item.x.ids.back()]));
      out.push_back(std::move(item));
    }
  }
  return out;
}

} // namespace s2d::simlab
