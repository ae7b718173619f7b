#pragma once

// Independent speaker-verification scorer: a small time-pooled embedding
// network trained with a triplet objective, plus the scoring utilities used
// by the evaluation protocols (cosine scores, FAR, percentile thresholds, EER).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "spkprof/corpus.hpp"
#include "spkprof/ndcore.hpp"
#include "spkprof/random.hpp"
#include "spkprof/sampler.hpp"
#include "spkprof/vae.hpp"

namespace spkprof {

class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline double cosine_similarity(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw ShapeError("cosine_similarity: length mismatch");
  const double na = std::sqrt(squared_norm(a));
  const double nb = std::sqrt(squared_norm(b));
  if (na == 0.0 || nb == 0.0) throw DomainError("cosine_similarity: zero vector");
  if (std::equal(a.begin(), a.end(), b.begin())) return 1.0;
  return std::clamp(dot(a, b) / (na * nb), -1.0, 1.0);
}

struct Trial {
  double score = 0.0;
  bool same_speaker = false;
};

struct TrialSet {
  std::vector<Trial> trials;

  std::vector<double> scores(bool same) const {
    std::vector<double> out;
    for (const auto& t : trials)
      if (t.same_speaker == same) out.push_back(t.score);
    return out;
  }
};

/// Fraction of different-speaker trials scoring at or above `threshold`.
inline double far_at_threshold(const TrialSet& set, double threshold) {
  std::size_t n = 0, accepted = 0;
  for (const auto& t : set.trials) {
    if (t.same_speaker) continue;
    ++n;
    if (t.score >= threshold) ++accepted;
  }
  if (n == 0) throw DomainError("far_at_threshold: no different-speaker trials");
  return static_cast<double>(accepted) / static_cast<double>(n);
}

/// Nearest-rank percentile: the smallest score with at least p% of scores at or below it.
inline double threshold_from_percentile(std::vector<double> scores, double percentile) {
  if (scores.empty()) throw DomainError("threshold_from_percentile: empty score list");
  if (!(percentile > 0.0 && percentile < 100.0)) {
    throw DomainError("threshold_from_percentile: percentile must be in (0, 100)");
  }
  std::sort(scores.begin(), scores.end());
  const double n = static_cast<double>(scores.size());
  auto rank = static_cast<std::size_t>(std::ceil(percentile * n / 100.0));
  rank = std::clamp<std::size_t>(rank, 1, scores.size());
  return scores[rank - 1];
}

/// Equal error rate: the operating point where false accepts and false rejects balance.
inline double equal_error_rate(const TrialSet& set) {
  auto gen = set.scores(true);
  auto imp = set.scores(false);
  if (gen.empty() || imp.empty()) throw DomainError("equal_error_rate: need both trial classes");
  std::sort(gen.begin(), gen.end());
  std::sort(imp.begin(), imp.end());
  std::vector<double> cand = gen;
  cand.insert(cand.end(), imp.begin(), imp.end());
  std::sort(cand.begin(), cand.end());
  double best_gap = 2.0, eer = 1.0;
  for (double thr : cand) {
    const double frr = static_cast<double>(std::lower_bound(gen.begin(), gen.end(), thr) - gen.begin()) /
                       static_cast<double>(gen.size());
    const double far = static_cast<double>(imp.end() - std::lower_bound(imp.begin(), imp.end(), thr)) /
                       static_cast<double>(imp.size());
    const double gap = std::abs(far - frr);
    if (gap < best_gap) {
      best_gap = gap;
      eer = 0.5 * (far + frr);
    }
  }
  return eer;
}

// ---------------------------------------------------------------------------
// Verifier network

struct VerifierConfig {
  std::vector<std::size_t> hidden{32};
  std::size_t embedding_dim = 16;
  double margin = 0.4;
  std::size_t epochs = 30;
  std::size_t batch_size = 16;
  double lr = 2e-3;
  double held_out_fraction = 0.2;
  double max_eer = 0.10;
};

struct VerifierParams {
  std::vector<DenseLayer> frame_layers;
  DenseLayer projection;
  std::vector<int> train_speakers;
  std::vector<int> held_out_speakers;
  double held_out_eer = 1.0;

  template <class F>
  void visit(F&& f) {
    for (std::size_t i = 0; i < frame_layers.size(); ++i) visit_layer("verifier." + std::to_string(i), frame_layers[i], f);
    visit_layer("verifier.projection", projection, f);
  }
  template <class F>
  void visit(F&& f) const {
    for (std::size_t i = 0; i < frame_layers.size(); ++i) visit_layer("verifier." + std::to_string(i), frame_layers[i], f);
    visit_layer("verifier.projection", projection, f);
  }

  bool operator==(const VerifierParams&) const = default;
};

struct EmbedTrace {
  std::vector<LayerCache> frame_layers;
  LayerCache projection;
  Vec raw;
  double norm = 0.0;
  std::size_t frames = 0;
};

inline std::pair<Vec, EmbedTrace> embed_traced(const VerifierParams& v, const Matrix& frames) {
  if (frames.rows() < 1) throw ShapeError("verifier: need at least one frame");
  EmbedTrace tr;
  tr.frames = frames.rows();
  Matrix h = frames;
  for (const auto& l : v.frame_layers) {
    tr.frame_layers.push_back(layer_forward_rows(l, std::move(h)));
    h = tr.frame_layers.back().out;
  }
  Vec pooled(h.cols(), 0.0);
  for (std::size_t t = 0; t < h.rows(); ++t)
    for (std::size_t j = 0; j < h.cols(); ++j) pooled[j] += h(t, j);
  for (double& x : pooled) x /= static_cast<double>(h.rows());
  auto [raw, pc] = layer_forward(v.projection, pooled);
  tr.projection = std::move(pc);
  tr.norm = std::sqrt(squared_norm(raw));
  if (tr.norm == 0.0) throw NumericError("verifier: zero embedding");
  Vec e(raw.size());
  for (std::size_t i = 0; i < e.size(); ++i) e[i] = raw[i] / tr.norm;
  tr.raw = std::move(raw);
  return {std::move(e), std::move(tr)};
}

/// Unit-norm speaker embedding of an utterance.
inline Vec embed(const VerifierParams& v, const Matrix& frames) { return embed_traced(v, frames).first; }

inline void embed_backward(const VerifierParams& v, const EmbedTrace& tr, std::span<const double> de,
                           VerifierParams& g) {
  const std::size_t n = tr.raw.size();
  double e_de = 0.0;
  for (std::size_t i = 0; i < n; ++i) e_de += tr.raw[i] / tr.norm * de[i];
  Matrix draw(1, n);
  for (std::size_t i = 0; i < n; ++i) draw(0, i) = (de[i] - tr.raw[i] / tr.norm * e_de) / tr.norm;
  Matrix dpooled = layer_backward_rows(v.projection, tr.projection, draw, g.projection);
  const double inv_t = 1.0 / static_cast<double>(tr.frames);
  Matrix dh(tr.frames, dpooled.cols());
  for (std::size_t t = 0; t < tr.frames; ++t)
    for (std::size_t j = 0; j < dpooled.cols(); ++j) dh(t, j) = dpooled(0, j) * inv_t;
  for (std::size_t i = v.frame_layers.size(); i-- > 0;)
    dh = layer_backward_rows(v.frame_layers[i], tr.frame_layers[i], dh, g.frame_layers[i]);
}

/// Scores every unordered pair of the given utterances.
inline TrialSet natural_trials(const VerifierParams& v, const Corpus& corpus, const std::vector<std::size_t>& utts) {
  std::vector<Vec> emb;
  emb.reserve(utts.size());
  for (std::size_t u : utts) emb.push_back(embed(v, corpus.utterances[u].frames));
  TrialSet set;
  for (std::size_t i = 0; i < utts.size(); ++i)
    for (std::size_t j = i + 1; j < utts.size(); ++j)
      set.trials.push_back({cosine_similarity(emb[i], emb[j]),
                            corpus.utterances[utts[i]].speaker_id == corpus.utterances[utts[j]].speaker_id});
  return set;
}

/// Triplet loss on unit embeddings for a batch of (anchor, positive, negative)
/// utterance indices; accumulates gradients into `g` when given.
inline double verifier_batch_loss(const VerifierParams& v, const Corpus& corpus, std::span<const Triplet> batch,
                                  double margin, VerifierParams* g) {
  double total = 0.0;
  const double inv_b = 1.0 / static_cast<double>(batch.size());
  for (const auto& t : batch) {
    auto [ea, ta] = embed_traced(v, corpus.utterances.at(t.anchor).frames);
    auto [ep, tp] = embed_traced(v, corpus.utterances.at(t.positive).frames);
    auto [en, tn] = embed_traced(v, corpus.utterances.at(t.negative).frames);
    const double l = squared_distance(ea, ep) - squared_distance(ea, en) + margin;
    if (l <= 0.0) continue;
    total += l * inv_b;
    if (!g) continue;
    const std::size_t d = ea.size();
    Vec da(d), dp(d), dn(d);
    for (std::size_t i = 0; i < d; ++i) {
      da[i] = inv_b * 2.0 * (en[i] - ep[i]);
      dp[i] = inv_b * -2.0 * (ea[i] - ep[i]);
      dn[i] = inv_b * 2.0 * (ea[i] - en[i]);
    }
    embed_backward(v, ta, da, *g);
    embed_backward(v, tp, dp, *g);
    embed_backward(v, tn, dn, *g);
  }
  return total;
}

inline VerifierParams make_verifier(std::size_t feature_dim, const VerifierConfig& cfg, std::uint64_t seed) {
  VerifierParams v;
  Rng rng(substream_seed(seed, 0x564552ULL));
  std::size_t in = feature_dim;
  for (std::size_t h : cfg.hidden) {
    v.frame_layers.emplace_back(in, h, Activation::tanh);
    glorot_init(v.frame_layers.back(), rng);
    in = h;
  }
  v.projection = DenseLayer(in, cfg.embedding_dim, Activation::identity);
  glorot_init(v.projection, rng);
  return v;
}

/// Trains on a speaker split of its own (drawn from `seed`, independent of any
/// split already stored in `corpus`) and checks the held-out EER.
inline VerifierParams train_verifier(const Corpus& corpus, std::uint64_t seed, const VerifierConfig& cfg = {}) {
  if (corpus.speakers.size() < 8) {
    throw ConfigError("train_verifier: need at least 8 speakers, got " + std::to_string(corpus.speakers.size()));
  }
  Corpus own = corpus;
  own.train_speakers.clear();
  own.held_out_speakers.clear();
  own = split_speakers(std::move(own), cfg.held_out_fraction, substream_seed(seed, 0x53504CULL));

  VerifierParams v = make_verifier(corpus.config.feature_dim, cfg, seed);
  v.train_speakers = own.train_speakers;
  v.held_out_speakers = own.held_out_speakers;
  AdamState opt = make_adam_state(v);
  AdamConfig adam;
  adam.lr = cfg.lr;

  const auto train_utts = own.train_utterances();
  const auto by_speaker = detail::utterances_by_speaker(own, own.train_speakers);
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    Rng rng(substream_seed(seed, 0x45504FULL, epoch));
    std::vector<Triplet> triplets;
    for (std::size_t u : train_utts) triplets.push_back(detail::mine_triplet(own, by_speaker, u, rng));
    rng.shuffle(triplets);
    for (std::size_t s = 0; s < triplets.size(); s += cfg.batch_size) {
      const std::size_t e = std::min(triplets.size(), s + cfg.batch_size);
      VerifierParams g = v;
      zero_fill(g);
      verifier_batch_loss(v, own, std::span<const Triplet>(triplets).subspan(s, e - s), cfg.margin, &g);
      adam_update(v, g, opt, adam);
    }
  }
  v.held_out_eer = equal_error_rate(natural_trials(v, own, own.held_out_utterances()));
  if (!(v.held_out_eer < cfg.max_eer)) {
    throw TrainingError("train_verifier: held-out EER " + std::to_string(v.held_out_eer) + " is not below " +
                        std::to_string(cfg.max_eer) + "; use a larger corpus or more epochs");
  }
  return v;
}

}  // namespace spkprof
