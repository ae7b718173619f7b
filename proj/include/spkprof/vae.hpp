#pragma once

// Speaker-profile VAE.
//
// Encoder: per-frame MLP, mean pooling over time, then a mean head and a
// softplus standard-deviation head. Decoder: MLP over [z ; content one-hot]
// emitting a full T x F frame matrix. The lookup-table baseline replaces the
// encoder with one learned row per training speaker.

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "spkprof/corpus.hpp"
#include "spkprof/ndcore.hpp"
#include "spkprof/random.hpp"

namespace spkprof {

enum class SystemVariant { baseline_lookup, vae, vae_triplet, vae_triplet_shuffle };

inline const std::vector<SystemVariant>& all_variants() {
  static const std::vector<SystemVariant> v{SystemVariant::baseline_lookup, SystemVariant::vae,
                                            SystemVariant::vae_triplet, SystemVariant::vae_triplet_shuffle};
  return v;
}

inline std::string to_string(SystemVariant v) {
  switch (v) {
    case SystemVariant::baseline_lookup: return "baseline_lookup";
    case SystemVariant::vae: return "vae";
    case SystemVariant::vae_triplet: return "vae_triplet";
    case SystemVariant::vae_triplet_shuffle: return "vae_triplet_shuffle";
  }
  return "?";
}

inline SystemVariant variant_from_string(const std::string& s) {
  for (auto v : all_variants())
    if (to_string(v) == s) return v;
  throw ConfigError("unknown system variant '" + s + "'");
}

inline bool uses_encoder(SystemVariant v) { return v != SystemVariant::baseline_lookup; }
inline bool uses_triplet(SystemVariant v) {
  return v == SystemVariant::vae_triplet || v == SystemVariant::vae_triplet_shuffle;
}
inline bool uses_shuffle(SystemVariant v) { return v == SystemVariant::vae_triplet_shuffle; }

struct ModelDims {
  std::size_t feature_dim = 32;
  std::size_t frames = 40;
  std::size_t n_contents = 20;
  std::size_t latent_dim = 32;
  std::vector<std::size_t> encoder_hidden{32};
  std::vector<std::size_t> decoder_hidden{64};

  bool operator==(const ModelDims&) const = default;
};

struct ModelParams {
  ModelDims dims;
  std::vector<DenseLayer> encoder;  // frame MLP, applied to every frame
  DenseLayer mu_head;
  DenseLayer sigma_head;            // softplus
  std::vector<DenseLayer> decoder;  // last layer is identity, width T*F
  Matrix baseline_table;            // one row per training speaker
  std::vector<int> table_speakers;  // speaker id of each table row

  template <class F>
  void visit(F&& f) {
    for (std::size_t i = 0; i < encoder.size(); ++i) visit_layer("encoder." + std::to_string(i), encoder[i], f);
    visit_layer("encoder.mu", mu_head, f);
    visit_layer("encoder.sigma", sigma_head, f);
    for (std::size_t i = 0; i < decoder.size(); ++i) visit_layer("decoder." + std::to_string(i), decoder[i], f);
    f(std::string("baseline.table"), baseline_table.flat());
  }
  template <class F>
  void visit(F&& f) const {
    for (std::size_t i = 0; i < encoder.size(); ++i) visit_layer("encoder." + std::to_string(i), encoder[i], f);
    visit_layer("encoder.mu", mu_head, f);
    visit_layer("encoder.sigma", sigma_head, f);
    for (std::size_t i = 0; i < decoder.size(); ++i) visit_layer("decoder." + std::to_string(i), decoder[i], f);
    f(std::string("baseline.table"), baseline_table.flat());
  }

  bool operator==(const ModelParams&) const = default;
};

inline double glorot_bound(std::size_t fan_in, std::size_t fan_out) {
  return std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
}

inline void glorot_init(DenseLayer& l, Rng& rng) {
  const double b = glorot_bound(l.in(), l.out());
  for (double& w : l.weights.flat()) w = rng.uniform(-b, b);
  std::fill(l.bias.begin(), l.bias.end(), 0.0);
}

inline ModelParams make_model(const ModelDims& d, std::vector<int> table_speakers, std::uint64_t seed) {
  if (d.latent_dim == 0 || d.feature_dim == 0 || d.frames == 0 || d.n_contents == 0) {
    throw ConfigError("make_model: dimensions must be positive");
  }
  ModelParams p;
  p.dims = d;
  Rng rng(substream_seed(seed, 0x4D4F44454CULL));
  std::size_t in = d.feature_dim;
  for (std::size_t h : d.encoder_hidden) {
    p.encoder.emplace_back(in, h, Activation::tanh);
    glorot_init(p.encoder.back(), rng);
    in = h;
  }
  p.mu_head = DenseLayer(in, d.latent_dim, Activation::identity);
  glorot_init(p.mu_head, rng);
  p.sigma_head = DenseLayer(in, d.latent_dim, Activation::softplus);
  glorot_init(p.sigma_head, rng);

  in = d.latent_dim + d.n_contents;
  for (std::size_t h : d.decoder_hidden) {
    p.decoder.emplace_back(in, h, Activation::tanh);
    glorot_init(p.decoder.back(), rng);
    in = h;
  }
  p.decoder.emplace_back(in, d.frames * d.feature_dim, Activation::identity);
  glorot_init(p.decoder.back(), rng);

  p.table_speakers = std::move(table_speakers);
  p.baseline_table = Matrix(p.table_speakers.size(), d.latent_dim);
  const double b = glorot_bound(p.table_speakers.size(), d.latent_dim);
  for (double& x : p.baseline_table.flat()) x = rng.uniform(-b, b);
  return p;
}

// ---------------------------------------------------------------------------
// Encoder

struct EncoderOutput {
  Vec mu;
  Vec sigma;
};

struct EncoderTrace {
  std::vector<LayerCache> frame_layers;
  LayerCache mu;
  LayerCache sigma;
  std::size_t frames = 0;
};

inline std::pair<EncoderOutput, EncoderTrace> encode_traced(const ModelParams& p, const Matrix& frames) {
  if (frames.rows() < 1) throw ShapeError("encode: need at least one frame");
  if (frames.cols() != p.dims.feature_dim) {
    throw ShapeError("encode: frames " + frames.shape_string() + " but encoder expects " +
                     std::to_string(p.dims.feature_dim) + " features");
  }
  EncoderTrace tr;
  tr.frames = frames.rows();
  Matrix h = frames;
  for (const auto& l : p.encoder) {
    tr.frame_layers.push_back(layer_forward_rows(l, std::move(h)));
    h = tr.frame_layers.back().out;
  }
  Vec pooled(h.cols(), 0.0);
  for (std::size_t t = 0; t < h.rows(); ++t) {
    auto r = h.row(t);
    for (std::size_t j = 0; j < r.size(); ++j) pooled[j] += r[j];
  }
  for (double& x : pooled) x /= static_cast<double>(h.rows());
  auto [mu, mu_cache] = layer_forward(p.mu_head, pooled);
  auto [sigma, sigma_cache] = layer_forward(p.sigma_head, pooled);
  tr.mu = std::move(mu_cache);
  tr.sigma = std::move(sigma_cache);
  return {EncoderOutput{std::move(mu), std::move(sigma)}, std::move(tr)};
}

/// Posterior mean and standard deviation for one utterance.
inline EncoderOutput encode(const ModelParams& p, const Matrix& frames) {
  return encode_traced(p, frames).first;
}

inline void encode_backward(const ModelParams& p, const EncoderTrace& tr, std::span<const double> dmu,
                            std::span<const double> dsigma, ModelParams& g) {
  Matrix dpooled(1, p.mu_head.in());
  {
    Matrix up(1, dmu.size(), Vec(dmu.begin(), dmu.end()));
    Matrix d = layer_backward_rows(p.mu_head, tr.mu, up, g.mu_head);
    for (std::size_t j = 0; j < d.cols(); ++j) dpooled(0, j) += d(0, j);
  }
  {
    Matrix up(1, dsigma.size(), Vec(dsigma.begin(), dsigma.end()));
    Matrix d = layer_backward_rows(p.sigma_head, tr.sigma, up, g.sigma_head);
    for (std::size_t j = 0; j < d.cols(); ++j) dpooled(0, j) += d(0, j);
  }
  if (p.encoder.empty()) return;
  const double inv_t = 1.0 / static_cast<double>(tr.frames);
  Matrix dh(tr.frames, dpooled.cols());
  for (std::size_t t = 0; t < tr.frames; ++t)
    for (std::size_t j = 0; j < dpooled.cols(); ++j) dh(t, j) = dpooled(0, j) * inv_t;
  for (std::size_t i = p.encoder.size(); i-- > 0;) {
    dh = layer_backward_rows(p.encoder[i], tr.frame_layers[i], dh, g.encoder[i]);
  }
}

// ---------------------------------------------------------------------------
// Latent terms

inline void require_positive(std::span<const double> sigma, const char* who) {
  for (double s : sigma)
    if (!(s > 0.0)) throw DomainError(std::string(who) + ": sigma must be strictly positive, got " + std::to_string(s));
}

/// z = mu + sigma * eps, element-wise.
inline Vec reparameterize(std::span<const double> mu, std::span<const double> sigma, std::span<const double> eps) {
  if (mu.size() != sigma.size() || mu.size() != eps.size()) throw ShapeError("reparameterize: length mismatch");
  require_positive(sigma, "reparameterize");
  Vec z(mu.size());
  for (std::size_t i = 0; i < z.size(); ++i) z[i] = mu[i] + sigma[i] * eps[i];
  return z;
}

/// KL(N(mu, diag sigma^2) || N(0, I)).
inline double kl_to_standard_normal(std::span<const double> mu, std::span<const double> sigma) {
  if (mu.size() != sigma.size()) throw ShapeError("kl_to_standard_normal: length mismatch");
  require_positive(sigma, "kl_to_standard_normal");
  double kl = 0.0;
  for (std::size_t i = 0; i < mu.size(); ++i) {
    const double s2 = sigma[i] * sigma[i];
    kl += -0.5 * (1.0 + std::log(s2) - mu[i] * mu[i] - s2);
  }
  // Rounding can leave a -1e-17 residue at the optimum.
  return kl > 0.0 ? kl : 0.0;
}

struct TripletConfig {
  double alpha = 0.5;
};

inline double triplet_loss(std::span<const double> za, std::span<const double> zp, std::span<const double> zn,
                           const TripletConfig& cfg = {}) {
  if (cfg.alpha < 0.0) throw DomainError("triplet_loss: alpha must be >= 0");
  const double v = squared_distance(za, zp) - squared_distance(za, zn) + cfg.alpha;
  return v > 0.0 ? v : 0.0;
}

inline double reconstruction_l1(const Matrix& predicted, const Matrix& target) {
  if (predicted.rows() != target.rows() || predicted.cols() != target.cols()) {
    throw ShapeError("reconstruction_l1: " + predicted.shape_string() + " vs " + target.shape_string());
  }
  double s = 0.0;
  auto a = predicted.flat();
  auto b = target.flat();
  for (std::size_t i = 0; i < a.size(); ++i) s += std::abs(a[i] - b[i]);
  return s / static_cast<double>(a.size());
}

// ---------------------------------------------------------------------------
// Decoder

struct DecoderTrace {
  std::vector<LayerCache> layers;
};

inline Vec decoder_input(const ModelParams& p, std::span<const double> z, int content_id) {
  if (z.size() != p.dims.latent_dim) {
    throw ShapeError("decode: latent has " + std::to_string(z.size()) + " dims, expected " +
                     std::to_string(p.dims.latent_dim));
  }
  if (content_id < 0 || static_cast<std::size_t>(content_id) >= p.dims.n_contents) {
    throw DomainError("decode: unknown content id " + std::to_string(content_id));
  }
  Vec in(p.dims.latent_dim + p.dims.n_contents, 0.0);
  std::copy(z.begin(), z.end(), in.begin());
  in[p.dims.latent_dim + static_cast<std::size_t>(content_id)] = 1.0;
  return in;
}

inline std::pair<Matrix, DecoderTrace> decode_traced(const ModelParams& p, std::span<const double> z, int content_id) {
  Vec in = decoder_input(p, z, content_id);
  DecoderTrace tr;
  const std::size_t width = in.size();
  Matrix h(1, width, std::move(in));
  for (const auto& l : p.decoder) {
    tr.layers.push_back(layer_forward_rows(l, std::move(h)));
    h = tr.layers.back().out;
  }
  return {Matrix(p.dims.frames, p.dims.feature_dim, h.data()), std::move(tr)};
}

inline Matrix decode(const ModelParams& p, std::span<const double> z, int content_id) {
  return decode_traced(p, z, content_id).first;
}

/// Accumulates decoder gradients and returns d(loss)/dz.
inline Vec decode_backward(const ModelParams& p, const DecoderTrace& tr, const Matrix& dout, ModelParams& g) {
  Matrix d(1, dout.size(), dout.data());
  for (std::size_t i = p.decoder.size(); i-- > 0;) {
    d = layer_backward_rows(p.decoder[i], tr.layers[i], d, g.decoder[i]);
  }
  return Vec(d.data().begin(), d.data().begin() + static_cast<std::ptrdiff_t>(p.dims.latent_dim));
}

// ---------------------------------------------------------------------------
// Lookup baseline

inline std::size_t table_row(const ModelParams& p, int speaker_id) {
  for (std::size_t r = 0; r < p.table_speakers.size(); ++r)
    if (p.table_speakers[r] == speaker_id) return r;
  throw DomainError("baseline_embed: speaker " + std::to_string(speaker_id) +
                    " has no embedding row (the lookup table only covers training speakers)");
}

inline Vec baseline_embed(const ModelParams& p, int speaker_id) {
  auto row = p.baseline_table.row(table_row(p, speaker_id));
  return Vec(row.begin(), row.end());
}

// ---------------------------------------------------------------------------
// Training objective

struct LossWeights {
  double beta_kl = 0.05;
  double lambda_triplet = 1.0;
  TripletConfig triplet;
};

struct LossBreakdown {
  double l1_recon = 0.0;
  double kl = 0.0;
  double triplet = 0.0;
  double total = 0.0;
  double beta_kl = 0.0;
  double lambda_triplet = 0.0;
};

struct Triplet {
  std::size_t anchor = 0;
  std::size_t positive = 0;
  std::size_t negative = 0;

  bool operator==(const Triplet&) const = default;
};

/// One element of a training batch. `eps` is the recorded reparameterization noise.
struct TrainExample {
  std::size_t target = 0;
  std::size_t reference = 0;
  Triplet triplet;
  bool use_triplet = true;
  Vec eps;
};

namespace detail {

inline void check_finite_term(double v, const char* term) {
  if (!std::isfinite(v)) throw NumericError(std::string("non-finite loss term '") + term + "'");
}

}  // namespace detail

/// Mean loss over the batch; when `grads` is non-null it receives the gradient
/// (accumulated, caller zeroes it).
inline LossBreakdown batch_loss(const ModelParams& p, const Corpus& corpus, std::span<const TrainExample> batch,
                                const LossWeights& w, SystemVariant variant, ModelParams* grads = nullptr) {
  if (batch.empty()) throw ContractError("train_step: empty batch");
  LossBreakdown lb;
  lb.beta_kl = uses_encoder(variant) ? w.beta_kl : 0.0;
  lb.lambda_triplet = uses_triplet(variant) ? w.lambda_triplet : 0.0;
  const double inv_b = 1.0 / static_cast<double>(batch.size());
  const std::size_t latent = p.dims.latent_dim;

  for (const auto& ex : batch) {
    const Utterance& target = corpus.utterances.at(ex.target);
    if (!uses_encoder(variant)) {
      const std::size_t row = table_row(p, target.speaker_id);
      auto zr = p.baseline_table.row(row);
      auto [pred, dtr] = decode_traced(p, zr, target.content_id);
      const double l1 = reconstruction_l1(pred, target.frames);
      lb.l1_recon += l1 * inv_b;
      if (grads) {
        Matrix dout(pred.rows(), pred.cols());
        const double scale = inv_b / static_cast<double>(pred.size());
        for (std::size_t i = 0; i < pred.size(); ++i) {
          const double d = pred.flat()[i] - target.frames.flat()[i];
          dout.flat()[i] = d > 0.0 ? scale : (d < 0.0 ? -scale : 0.0);
        }
        Vec dz = decode_backward(p, dtr, dout, *grads);
        auto gr = grads->baseline_table.row(row);
        for (std::size_t i = 0; i < latent; ++i) gr[i] += dz[i];
      }
      continue;
    }

    const Utterance& ref = corpus.utterances.at(ex.reference);
    if (ref.speaker_id != target.speaker_id) {
      throw ContractError("train_step: reference and target speakers differ");
    }
    auto [enc, etr] = encode_traced(p, ref.frames);
    if (ex.eps.size() != latent) throw ShapeError("train_step: eps has wrong length");
    Vec z = reparameterize(enc.mu, enc.sigma, ex.eps);
    auto [pred, dtr] = decode_traced(p, z, target.content_id);
    const double l1 = reconstruction_l1(pred, target.frames);
    const double kl = kl_to_standard_normal(enc.mu, enc.sigma);
    lb.l1_recon += l1 * inv_b;
    lb.kl += kl * inv_b;

    if (grads) {
      Matrix dout(pred.rows(), pred.cols());
      const double scale = inv_b / static_cast<double>(pred.size());
      for (std::size_t i = 0; i < pred.size(); ++i) {
        const double d = pred.flat()[i] - target.frames.flat()[i];
        dout.flat()[i] = d > 0.0 ? scale : (d < 0.0 ? -scale : 0.0);
      }
      Vec dz = decode_backward(p, dtr, dout, *grads);
      Vec dmu(latent), dsigma(latent);
      for (std::size_t i = 0; i < latent; ++i) {
        dmu[i] = dz[i] + lb.beta_kl * inv_b * enc.mu[i];
        dsigma[i] = dz[i] * ex.eps[i] + lb.beta_kl * inv_b * (enc.sigma[i] - 1.0 / enc.sigma[i]);
      }
      encode_backward(p, etr, dmu, dsigma, *grads);
    }

    if (lb.lambda_triplet > 0.0 && ex.use_triplet) {
      const Triplet& t = ex.triplet;
      auto [ea, atr] = encode_traced(p, corpus.utterances.at(t.anchor).frames);
      auto [ep, ptr] = encode_traced(p, corpus.utterances.at(t.positive).frames);
      auto [en, ntr] = encode_traced(p, corpus.utterances.at(t.negative).frames);
      const double tl = triplet_loss(ea.mu, ep.mu, en.mu, w.triplet);
      lb.triplet += tl * inv_b;
      if (grads && tl > 0.0) {
        const double s = lb.lambda_triplet * inv_b;
        Vec da(latent), dp(latent), dn(latent), zero(latent, 0.0);
        for (std::size_t i = 0; i < latent; ++i) {
          da[i] = s * 2.0 * (en.mu[i] - ep.mu[i]);
          dp[i] = s * -2.0 * (ea.mu[i] - ep.mu[i]);
          dn[i] = s * 2.0 * (ea.mu[i] - en.mu[i]);
        }
        encode_backward(p, atr, da, zero, *grads);
        encode_backward(p, ptr, dp, zero, *grads);
        encode_backward(p, ntr, dn, zero, *grads);
      }
    }
  }
  detail::check_finite_term(lb.l1_recon, "l1_recon");
  detail::check_finite_term(lb.kl, "kl");
  detail::check_finite_term(lb.triplet, "triplet");
  lb.total = lb.l1_recon + lb.beta_kl * lb.kl + lb.lambda_triplet * lb.triplet;
  detail::check_finite_term(lb.total, "total");
  return lb;
}

/// Parameters a variant is allowed to update.
inline bool is_trainable(SystemVariant v, const std::string& name) {
  const bool dec = name.rfind("decoder.", 0) == 0;
  if (v == SystemVariant::baseline_lookup) return dec || name.rfind("baseline.", 0) == 0;
  return dec || name.rfind("encoder.", 0) == 0;
}

/// One Adam update on the batch. Throws NumericError (naming the term) on a
/// non-finite loss; `p` and `opt` are untouched in that case.
inline LossBreakdown train_step(ModelParams& p, const Corpus& corpus, std::span<const TrainExample> batch,
                                AdamState& opt, const LossWeights& w, SystemVariant variant,
                                const AdamConfig& adam = {}) {
  ModelParams g = p;
  zero_fill(g);
  LossBreakdown lb = batch_loss(p, corpus, batch, w, variant, &g);
  if (!all_finite(flatten(g))) throw NumericError("non-finite gradient");
  adam_update(p, g, opt, adam, [variant](const std::string& n) { return is_trainable(variant, n); });
  return lb;
}

}  // namespace spkprof
