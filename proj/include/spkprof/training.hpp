#pragma once

// Training loop for the four system variants. Every random draw is derived
// from (train_seed, epoch) for plans and (train_seed, step) for
// reparameterization noise, so a run can stop and resume at any step and
// continue bit-identically.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <vector>

#include "spkprof/corpus.hpp"
#include "spkprof/ndcore.hpp"
#include "spkprof/random.hpp"
#include "spkprof/sampler.hpp"
#include "spkprof/vae.hpp"

namespace spkprof {

struct TrainConfig {
  SystemVariant variant = SystemVariant::vae_triplet_shuffle;
  ModelDims dims;
  LossWeights weights;
  double kl_warmup_fraction = 0.2;
  std::size_t epochs = 100;
  std::size_t batch_size = 16;
  AdamConfig adam;
  std::uint64_t train_seed = 1;
};

struct HistoryRow {
  long step = 0;
  double l1 = 0.0;
  double kl = 0.0;
  double triplet = 0.0;
  double total = 0.0;
};

struct TrainState {
  ModelParams params;
  AdamState optimizer;
  long step = 0;
  std::vector<HistoryRow> history;
};

inline std::size_t steps_per_epoch(const Corpus& corpus, const TrainConfig& cfg) {
  const std::size_t n = corpus.train_utterances().size();
  return (n + cfg.batch_size - 1) / cfg.batch_size;
}

inline long total_steps(const Corpus& corpus, const TrainConfig& cfg) {
  return static_cast<long>(cfg.epochs * steps_per_epoch(corpus, cfg));
}

inline ModelDims dims_for_corpus(const Corpus& corpus, ModelDims d) {
  d.feature_dim = corpus.config.feature_dim;
  d.frames = corpus.config.frames;
  d.n_contents = corpus.config.n_contents;
  return d;
}

inline TrainState init_training(const Corpus& corpus, const TrainConfig& cfg) {
  if (!corpus.has_split()) throw ContractError("training needs a corpus with a speaker split");
  if (cfg.batch_size == 0) throw ConfigError("batch_size must be positive");
  TrainState st;
  st.params = make_model(dims_for_corpus(corpus, cfg.dims), corpus.train_speakers, cfg.train_seed);
  st.optimizer = make_adam_state(st.params);
  return st;
}

/// KL weight at a given step: linear warm-up to `beta_kl`.
inline double kl_weight_at(const TrainConfig& cfg, long step, long total) {
  const double warm = cfg.kl_warmup_fraction * static_cast<double>(total);
  if (warm <= 0.0) return cfg.weights.beta_kl;
  return cfg.weights.beta_kl * std::min(1.0, static_cast<double>(step + 1) / warm);
}

/// Batch `step` of the run, with its recorded reparameterization noise.
inline std::vector<TrainExample> batch_for_step(const Corpus& corpus, const TrainConfig& cfg, const EpochPlan& plan,
                                                long step) {
  const std::size_t spe = steps_per_epoch(corpus, cfg);
  const std::size_t b = static_cast<std::size_t>(step) % spe;
  const std::size_t begin = b * cfg.batch_size;
  const std::size_t end = std::min(plan.entries.size(), begin + cfg.batch_size);
  Rng noise(substream_seed(cfg.train_seed, 0x455053ULL, static_cast<std::uint64_t>(step)));
  std::vector<TrainExample> batch;
  for (std::size_t i = begin; i < end; ++i) {
    const auto& e = plan.entries[i];
    TrainExample ex;
    ex.target = e.target;
    ex.reference = e.reference;
    ex.triplet = e.triplet;
    ex.use_triplet = e.has_triplet;
    ex.eps = noise.normal_vector(cfg.dims.latent_dim);
    batch.push_back(std::move(ex));
  }
  return batch;
}

/// Runs until `stop_at` (or the end of training). `on_step` sees every update.
inline void run_training(TrainState& st, const Corpus& corpus, const TrainConfig& cfg,
                         std::optional<long> stop_at = std::nullopt,
                         const std::function<void(const TrainState&)>& on_step = {}) {
  const long total = total_steps(corpus, cfg);
  const long end = stop_at ? std::min(*stop_at, total) : total;
  const std::size_t spe = steps_per_epoch(corpus, cfg);
  std::optional<std::size_t> plan_epoch;
  EpochPlan plan;
  while (st.step < end) {
    const std::size_t epoch = static_cast<std::size_t>(st.step) / spe;
    if (plan_epoch != epoch) {
      plan = make_epoch_plan(corpus, epoch, cfg.train_seed, uses_shuffle(cfg.variant));
      plan_epoch = epoch;
    }
    auto batch = batch_for_step(corpus, cfg, plan, st.step);
    LossWeights w = cfg.weights;
    w.beta_kl = kl_weight_at(cfg, st.step, total);
    const LossBreakdown lb = train_step(st.params, corpus, batch, st.optimizer, w, cfg.variant, cfg.adam);
    st.history.push_back({st.step, lb.l1_recon, lb.kl, lb.triplet, lb.total});
    ++st.step;
    if (on_step) on_step(st);
  }
}

inline TrainState train_system(const Corpus& corpus, const TrainConfig& cfg) {
  TrainState st = init_training(corpus, cfg);
  run_training(st, corpus, cfg);
  return st;
}

}  // namespace spkprof
