#pragma once

// Evaluation protocols: distinctiveness (FAR of synthetic-profile pairs at
// thresholds calibrated on natural genuine pairs), similarity along a latent
// interpolation, an intelligibility proxy (content-probe error on decoded
// frames) and linear disentanglement probes.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "spkprof/corpus.hpp"
#include "spkprof/latent.hpp"
#include "spkprof/ndcore.hpp"
#include "spkprof/random.hpp"
#include "spkprof/vae.hpp"
#include "spkprof/verify.hpp"

namespace spkprof {

enum class BaselineSampling { table_rows, fitted_gaussian };

struct EvalConfig {
  std::size_t n_synthetic_profiles = 200;
  std::vector<double> percentiles{60.0, 70.0, 80.0};
  std::vector<double> interpolation_grid{0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0};
  std::vector<std::size_t> profile_counts{1, 50, 100};
  std::size_t n_eval_seeds = 5;
  std::size_t n_interpolation_pairs = 10;
  BaselineSampling baseline_sampling = BaselineSampling::table_rows;
  double probe_min_accuracy = 0.90;
  double probe_ridge = 1e-3;
};

inline void validate(const EvalConfig& c) {
  if (c.n_synthetic_profiles < 2) throw ConfigError("eval: n_synthetic_profiles must be >= 2");
  for (double p : c.percentiles)
    if (!(p > 0.0 && p < 100.0)) throw ConfigError("eval: percentiles must lie in (0, 100)");
  if (c.interpolation_grid.empty()) throw ConfigError("eval: interpolation_grid is empty");
  for (double w : c.interpolation_grid)
    if (!(w >= 0.0 && w <= 1.0)) throw ConfigError("eval: interpolation_grid values must lie in [0, 1]");
  if (!std::is_sorted(c.interpolation_grid.begin(), c.interpolation_grid.end()))
    throw ConfigError("eval: interpolation_grid must be sorted");
  if (c.n_eval_seeds == 0) throw ConfigError("eval: n_eval_seeds must be positive");
  for (std::size_t k : c.profile_counts)
    if (k == 0) throw ConfigError("eval: profile_counts must be positive");
}

/// A trained system under evaluation.
struct EvalSystem {
  SystemVariant variant;
  const ModelParams* params;
  bool trained = true;
};

inline void require_trained(const EvalSystem& s) {
  if (!s.params || !s.trained) throw ContractError("evaluation needs a trained system (" + to_string(s.variant) + ")");
}

/// Speaker latent a system assigns to a natural utterance: the posterior mean
/// for encoder systems, the speaker's table row for the lookup baseline.
inline Vec profile_of(const EvalSystem& s, const Corpus& corpus, std::size_t utt) {
  const auto& u = corpus.utterances.at(utt);
  if (uses_encoder(s.variant)) return encode(*s.params, u.frames).mu;
  return baseline_embed(*s.params, u.speaker_id);
}

/// New speaker profiles. Encoder systems sample the N(0, I) prior; the lookup
/// baseline can only reuse its table rows (or, optionally, sample a Gaussian
/// fitted to them).
inline std::vector<Vec> synthetic_profiles(const EvalSystem& s, std::size_t n, Rng& rng,
                                           BaselineSampling mode = BaselineSampling::table_rows) {
  const std::size_t d = s.params->dims.latent_dim;
  std::vector<Vec> out;
  out.reserve(n);
  if (uses_encoder(s.variant)) {
    for (std::size_t i = 0; i < n; ++i) out.push_back(rng.normal_vector(d));
    return out;
  }
  const Matrix& tab = s.params->baseline_table;
  if (tab.rows() == 0) throw ContractError("baseline has an empty lookup table");
  if (mode == BaselineSampling::table_rows) {
    for (std::size_t i = 0; i < n; ++i) {
      auto r = tab.row(rng.index(tab.rows()));
      out.emplace_back(r.begin(), r.end());
    }
    return out;
  }
  Vec mean(d, 0.0), sd(d, 0.0);
  for (std::size_t r = 0; r < tab.rows(); ++r)
    for (std::size_t j = 0; j < d; ++j) mean[j] += tab(r, j) / static_cast<double>(tab.rows());
  for (std::size_t r = 0; r < tab.rows(); ++r)
    for (std::size_t j = 0; j < d; ++j) sd[j] += (tab(r, j) - mean[j]) * (tab(r, j) - mean[j]);
  for (double& x : sd) x = std::sqrt(x / static_cast<double>(std::max<std::size_t>(tab.rows() - 1, 1)));
  for (std::size_t i = 0; i < n; ++i) {
    Vec z(d);
    for (std::size_t j = 0; j < d; ++j) z[j] = mean[j] + sd[j] * rng.normal();
    out.push_back(std::move(z));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Distinctiveness

/// Genuine (same-speaker) scores over all pairs of the given natural utterances.
inline std::vector<double> natural_genuine_scores(const VerifierParams& v, const Corpus& corpus,
                                                  const std::vector<std::size_t>& utts) {
  return natural_trials(v, corpus, utts).scores(true);
}

struct DistinctivenessResult {
  std::vector<double> thresholds;
  std::vector<double> far;
  std::vector<double> synthetic_scores;  // all unordered pairs, row-major over (i < j)
};

/// Scores of all unordered pairs of already-embedded synthetic utterances.
inline std::vector<double> pairwise_scores(const std::vector<Vec>& emb) {
  std::vector<double> s;
  s.reserve(emb.size() * (emb.size() - 1) / 2);
  for (std::size_t i = 0; i < emb.size(); ++i)
    for (std::size_t j = i + 1; j < emb.size(); ++j) s.push_back(cosine_similarity(emb[i], emb[j]));
  return s;
}

inline double far_of_scores(const std::vector<double>& impostor, double threshold) {
  TrialSet set;
  set.trials.reserve(impostor.size());
  for (double s : impostor) set.trials.push_back({s, false});
  return far_at_threshold(set, threshold);
}

inline DistinctivenessResult eval_distinctiveness(const EvalSystem& sys, const VerifierParams& verifier,
                                                  const std::vector<double>& genuine_scores, const EvalConfig& cfg,
                                                  std::uint64_t eval_seed) {
  require_trained(sys);
  DistinctivenessResult r;
  for (double p : cfg.percentiles) r.thresholds.push_back(threshold_from_percentile(genuine_scores, p));
  Rng rng(substream_seed(eval_seed, 0x44495354ULL));
  const auto profiles = synthetic_profiles(sys, cfg.n_synthetic_profiles, rng, cfg.baseline_sampling);
  std::vector<Vec> emb;
  for (const auto& z : profiles) {
    const int content = static_cast<int>(rng.index(sys.params->dims.n_contents));
    emb.push_back(embed(verifier, decode(*sys.params, z, content)));
  }
  r.synthetic_scores = pairwise_scores(emb);
  for (double t : r.thresholds) r.far.push_back(far_of_scores(r.synthetic_scores, t));
  return r;
}

// ---------------------------------------------------------------------------
// Similarity along an interpolation

struct CurvePoint {
  double w = 0.0;
  double score = 0.0;
};

/// For each w: z_w = w z1 + (1-w) z2, decode with the first utterance's
/// content, embed, and score against the decoded w = 1 endpoint.
inline std::vector<CurvePoint> eval_similarity_curve(const EvalSystem& sys, const VerifierParams& verifier,
                                                     const Corpus& corpus, std::size_t utt1, std::size_t utt2,
                                                     const EvalConfig& cfg) {
  require_trained(sys);
  if (corpus.utterances.at(utt1).speaker_id == corpus.utterances.at(utt2).speaker_id) {
    throw DomainError("eval_similarity_curve: utterances share a speaker, the curve is degenerate");
  }
  const Vec z1 = profile_of(sys, corpus, utt1);
  const Vec z2 = profile_of(sys, corpus, utt2);
  const int content = corpus.utterances[utt1].content_id;
  const Vec ref = embed(verifier, decode(*sys.params, z1, content));
  std::vector<CurvePoint> curve;
  for (double w : cfg.interpolation_grid) {
    const Vec e = embed(verifier, decode(*sys.params, interpolate(z1, z2, w), content));
    curve.push_back({w, cosine_similarity(e, ref)});
  }
  return curve;
}

/// Largest drop between adjacent grid points walking from w = 1 down to w = 0.
inline double max_adjacent_drop(const std::vector<CurvePoint>& curve) {
  double m = 0.0;
  for (std::size_t i = 1; i < curve.size(); ++i) m = std::max(m, curve[i].score - curve[i - 1].score);
  return m;
}

/// Largest rise walking from w = 1 down to w = 0 (a monotonicity violation).
inline double max_adjacent_rise(const std::vector<CurvePoint>& curve) {
  double m = 0.0;
  for (std::size_t i = 1; i < curve.size(); ++i) m = std::max(m, curve[i - 1].score - curve[i].score);
  return m;
}

/// Pairs of training-speaker utterances from distinct speakers.
inline std::vector<std::pair<std::size_t, std::size_t>> cross_speaker_pairs(const Corpus& corpus, std::size_t n,
                                                                            Rng& rng) {
  const auto utts = corpus.train_utterances();
  if (corpus.train_speakers.size() < 2) throw DomainError("cross_speaker_pairs: need two training speakers");
  std::vector<std::pair<std::size_t, std::size_t>> out;
  while (out.size() < n) {
    const std::size_t a = utts[rng.index(utts.size())];
    const std::size_t b = utts[rng.index(utts.size())];
    if (corpus.utterances[a].speaker_id == corpus.utterances[b].speaker_id) continue;
    out.emplace_back(a, b);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Linear probes

/// Ridge regression with intercept: returns (d+1) x k weights, last row the intercept.
inline Matrix fit_linear(const std::vector<Vec>& x, const std::vector<Vec>& y, double ridge) {
  if (x.empty() || x.size() != y.size()) throw ShapeError("fit_linear: need matching non-empty samples");
  const std::size_t d = x.front().size() + 1;
  const std::size_t k = y.front().size();
  Matrix xtx(d, d), xty(d, k);
  Vec row(d);
  for (std::size_t n = 0; n < x.size(); ++n) {
    std::copy(x[n].begin(), x[n].end(), row.begin());
    row[d - 1] = 1.0;
    for (std::size_t i = 0; i < d; ++i) {
      if (row[i] == 0.0) continue;
      for (std::size_t j = 0; j < d; ++j) xtx(i, j) += row[i] * row[j];
      for (std::size_t j = 0; j < k; ++j) xty(i, j) += row[i] * y[n][j];
    }
  }
  // The intercept is not shrunk.
  const double scale = static_cast<double>(x.size());
  for (std::size_t i = 0; i + 1 < d; ++i) xtx(i, i) += ridge * scale;
  xtx(d - 1, d - 1) += 1e-12 * scale;
  return solve_spd(std::move(xtx), std::move(xty));
}

inline Vec predict_linear(const Matrix& w, std::span<const double> x) {
  if (x.size() + 1 != w.rows()) throw ShapeError("predict_linear: input length mismatch");
  Vec y(w.cols(), 0.0);
  for (std::size_t j = 0; j < w.cols(); ++j) {
    double s = w(w.rows() - 1, j);
    for (std::size_t i = 0; i < x.size(); ++i) s += x[i] * w(i, j);
    y[j] = s;
  }
  return y;
}

inline std::size_t argmax(std::span<const double> v) {
  return static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
}

inline Vec one_hot(std::size_t k, std::size_t n) {
  Vec v(n, 0.0);
  v.at(k) = 1.0;
  return v;
}

/// Pooled coefficient of determination over all output columns.
inline double r_squared(const std::vector<Vec>& truth, const std::vector<Vec>& pred) {
  if (truth.empty() || truth.size() != pred.size()) throw ShapeError("r_squared: sample mismatch");
  const std::size_t k = truth.front().size();
  Vec mean(k, 0.0);
  for (const auto& t : truth)
    for (std::size_t j = 0; j < k; ++j) mean[j] += t[j] / static_cast<double>(truth.size());
  double ss_res = 0.0, ss_tot = 0.0;
  for (std::size_t n = 0; n < truth.size(); ++n)
    for (std::size_t j = 0; j < k; ++j) {
      ss_res += (truth[n][j] - pred[n][j]) * (truth[n][j] - pred[n][j]);
      ss_tot += (truth[n][j] - mean[j]) * (truth[n][j] - mean[j]);
    }
  if (ss_tot == 0.0) throw DomainError("r_squared: constant targets");
  return 1.0 - ss_res / ss_tot;
}

/// Content classifier over single frames: one ridge classifier per time index,
/// so each frame is an independent decision (a token-error analog).
struct ContentProbe {
  std::vector<Matrix> per_frame;  // T entries, each (F+1) x C
  std::size_t n_contents = 0;
  double held_out_error = 1.0;

  std::vector<std::size_t> predict(const Matrix& frames) const {
    if (frames.rows() != per_frame.size()) throw ShapeError("content probe: frame count mismatch");
    std::vector<std::size_t> out(frames.rows());
    for (std::size_t t = 0; t < frames.rows(); ++t) out[t] = argmax(predict_linear(per_frame[t], frames.row(t)));
    return out;
  }

  /// Fraction of frames whose predicted content differs from `content_id`.
  double error(const Matrix& frames, int content_id) const {
    const auto p = predict(frames);
    std::size_t wrong = 0;
    for (std::size_t c : p)
      if (c != static_cast<std::size_t>(content_id)) ++wrong;
    return static_cast<double>(wrong) / static_cast<double>(p.size());
  }
};

inline double probe_error(const ContentProbe& probe, const Corpus& corpus, const std::vector<std::size_t>& utts) {
  double e = 0.0;
  for (std::size_t u : utts) e += probe.error(corpus.utterances[u].frames, corpus.utterances[u].content_id);
  return e / static_cast<double>(utts.size());
}

/// Trains on natural training-speaker utterances; the held-out error is measured
/// on held-out speakers and must stay below 1 - min_accuracy.
inline ContentProbe train_content_probe(const Corpus& corpus, double ridge = 1e-3, double min_accuracy = 0.90) {
  if (!corpus.has_split()) throw ContractError("train_content_probe: corpus needs a speaker split");
  ContentProbe probe;
  probe.n_contents = corpus.config.n_contents;
  const auto train = corpus.train_utterances();
  for (std::size_t t = 0; t < corpus.config.frames; ++t) {
    std::vector<Vec> x, y;
    for (std::size_t u : train) {
      auto r = corpus.utterances[u].frames.row(t);
      x.emplace_back(r.begin(), r.end());
      y.push_back(one_hot(static_cast<std::size_t>(corpus.utterances[u].content_id), probe.n_contents));
    }
    probe.per_frame.push_back(fit_linear(x, y, ridge));
  }
  probe.held_out_error = probe_error(probe, corpus, corpus.held_out_utterances());
  if (1.0 - probe.held_out_error < min_accuracy) {
    throw ContractError("content probe held-out accuracy " + std::to_string(1.0 - probe.held_out_error) +
                        " is below " + std::to_string(min_accuracy));
  }
  return probe;
}

/// Adds the corpus channel (per-utterance session offset plus white noise) to
/// clean decoded frames, so synthetic and natural frames are judged alike.
inline Matrix render_channel(Matrix frames, const Corpus& corpus, Rng& rng) {
  const auto& cc = corpus.config;
  if (cc.session_rank > 0 && cc.session_sigma > 0.0) {
    const Vec s = rng.normal_vector(cc.session_rank);
    for (std::size_t f = 0; f < frames.cols(); ++f) {
      const double off = dot(corpus.g_session.row(f), s);
      for (std::size_t t = 0; t < frames.rows(); ++t) frames(t, f) += off;
    }
  }
  if (cc.noise_sigma > 0.0)
    for (double& x : frames.flat()) x += cc.noise_sigma * rng.normal();
  return frames;
}

/// Probe error on decoded frames for k synthetic profiles, each decoded with
/// every content id and passed through the corpus channel. Channel noise for
/// (profile i, content c) depends only on eval_seed, so every system is judged
/// under the same draws.
inline double eval_intelligibility_proxy(const EvalSystem& sys, const ContentProbe& probe, const Corpus& corpus,
                                         std::size_t k, std::uint64_t eval_seed,
                                         BaselineSampling mode = BaselineSampling::table_rows) {
  require_trained(sys);
  if (k == 0) throw DomainError("intelligibility proxy needs at least one profile");
  Rng prof_rng(substream_seed(eval_seed, 0x50524FULL, k));
  const auto profiles = synthetic_profiles(sys, k, prof_rng, mode);
  double e = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < profiles.size(); ++i)
    for (std::size_t c = 0; c < sys.params->dims.n_contents; ++c, ++n) {
      Rng ch(substream_seed(eval_seed, i, c));
      const Matrix frames = render_channel(decode(*sys.params, profiles[i], static_cast<int>(c)), corpus, ch);
      e += probe.error(frames, static_cast<int>(c));
    }
  return e / static_cast<double>(n);
}

struct DisentanglementResult {
  double speaker_r2 = 0.0;
  double content_accuracy = 0.0;
  bool collapsed = false;
};

/// Linear read-outs from latents: fit on training-speaker utterances, score on
/// held-out speakers. `latents[i]` belongs to corpus utterance i.
inline DisentanglementResult disentanglement_from_latents(const Corpus& corpus, const std::vector<Vec>& latents,
                                                          double ridge = 1e-3) {
  DisentanglementResult r;
  if (latents.size() != corpus.utterances.size()) throw ShapeError("disentanglement: one latent per utterance");
  const std::size_t d = latents.front().size();
  Vec mean(d, 0.0);
  for (const auto& z : latents)
    for (std::size_t j = 0; j < d; ++j) mean[j] += z[j] / static_cast<double>(latents.size());
  double var = 0.0;
  for (const auto& z : latents)
    for (std::size_t j = 0; j < d; ++j) var += (z[j] - mean[j]) * (z[j] - mean[j]);
  if (var / static_cast<double>(latents.size()) < 1e-12) {
    r.collapsed = true;
    r.content_accuracy = 1.0 / static_cast<double>(corpus.config.n_contents);
    return r;
  }
  std::vector<Vec> xs, ys, yc;
  for (std::size_t u : corpus.train_utterances()) {
    xs.push_back(latents[u]);
    ys.push_back(corpus.speaker(corpus.utterances[u].speaker_id).voice_params);
    yc.push_back(one_hot(static_cast<std::size_t>(corpus.utterances[u].content_id), corpus.config.n_contents));
  }
  const Matrix ws = fit_linear(xs, ys, ridge);
  const Matrix wc = fit_linear(xs, yc, ridge);
  std::vector<Vec> truth, pred;
  std::size_t correct = 0, n = 0;
  for (std::size_t u : corpus.held_out_utterances()) {
    truth.push_back(corpus.speaker(corpus.utterances[u].speaker_id).voice_params);
    pred.push_back(predict_linear(ws, latents[u]));
    if (argmax(predict_linear(wc, latents[u])) == static_cast<std::size_t>(corpus.utterances[u].content_id)) ++correct;
    ++n;
  }
  r.speaker_r2 = r_squared(truth, pred);
  r.content_accuracy = static_cast<double>(correct) / static_cast<double>(n);
  return r;
}

inline DisentanglementResult disentanglement_probe(const ModelParams& params, const Corpus& corpus,
                                                   double ridge = 1e-3) {
  std::vector<Vec> z;
  z.reserve(corpus.utterances.size());
  for (const auto& u : corpus.utterances) z.push_back(encode(params, u.frames).mu);
  return disentanglement_from_latents(corpus, z, ridge);
}

// ---------------------------------------------------------------------------
// Normalization

class NormalizationError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

/// Divides every cell by the baseline's cell in the same column.
inline std::map<std::string, std::vector<double>> normalize_rows(const std::map<std::string, std::vector<double>>& raw,
                                                                 const std::string& baseline) {
  auto it = raw.find(baseline);
  if (it == raw.end()) throw NormalizationError("normalize: baseline row '" + baseline + "' missing");
  const auto& base = it->second;
  for (std::size_t j = 0; j < base.size(); ++j)
    if (!(base[j] > 0.0)) throw NormalizationError("normalize: baseline cell " + std::to_string(j) + " is not positive");
  std::map<std::string, std::vector<double>> out;
  for (const auto& [name, row] : raw) {
    if (row.size() != base.size()) throw ShapeError("normalize: row '" + name + "' has wrong width");
    std::vector<double> r(row.size());
    for (std::size_t j = 0; j < row.size(); ++j) r[j] = name == baseline ? 1.0 : row[j] / base[j];
    out[name] = std::move(r);
  }
  return out;
}

inline double median(std::vector<double> v) {
  if (v.empty()) throw DomainError("median of empty list");
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace spkprof
