#pragma once

// Synthetic speaker profiles: prior samples, interpolations and encodings.

#include <cstdint>
#include <nlohmann/json.hpp>
#include <string>
#include <variant>

#include "spkprof/corpus.hpp"
#include "spkprof/random.hpp"
#include "spkprof/vae.hpp"

namespace spkprof {

struct PriorSample {
  std::uint64_t seed = 0;
  std::uint64_t index = 0;
};

struct Interpolation {
  std::string z1_ref;
  std::string z2_ref;
  double w = 0.0;
};

struct Encoded {
  std::string utterance_ref;
};

using Provenance = std::variant<PriorSample, Interpolation, Encoded>;

struct SyntheticProfile {
  Vec z;
  Provenance provenance;
};

/// z ~ N(0, I) drawn from `rng`.
inline SyntheticProfile sample_prior(Rng& rng, std::size_t latent_dim = 32, PriorSample tag = {}) {
  return {rng.normal_vector(latent_dim), tag};
}

/// Prior sample `index` of the stream named by `seed`; reproducible without shared state.
inline SyntheticProfile sample_prior(std::uint64_t seed, std::uint64_t index, std::size_t latent_dim = 32) {
  Rng rng(substream_seed(seed, index));
  return sample_prior(rng, latent_dim, PriorSample{seed, index});
}

/// z_w = w * z1 + (1 - w) * z2.
inline Vec interpolate(std::span<const double> z1, std::span<const double> z2, double w) {
  if (!(w >= 0.0 && w <= 1.0)) throw DomainError("interpolate: w must lie in [0, 1], got " + std::to_string(w));
  if (z1.size() != z2.size()) throw ShapeError("interpolate: length mismatch");
  Vec z(z1.size());
  for (std::size_t i = 0; i < z.size(); ++i) z[i] = w * z1[i] + (1.0 - w) * z2[i];
  return z;
}

inline SyntheticProfile interpolate_profiles(const SyntheticProfile& p1, const std::string& ref1,
                                             const SyntheticProfile& p2, const std::string& ref2, double w) {
  return {interpolate(p1.z, p2.z, w), Interpolation{ref1, ref2, w}};
}

/// Deterministic encoding: the posterior mean, no sampling noise.
inline SyntheticProfile encode_profile(const ModelParams& params, const Utterance& utt, std::string ref = {}) {
  return {encode(params, utt.frames).mu, Encoded{std::move(ref)}};
}

inline nlohmann::json to_json(const SyntheticProfile& p) {
  nlohmann::json prov = std::visit(
      [](const auto& v) -> nlohmann::json {
        using T = std::decay_t<decltype(v)>;
        if constexpr (std::is_same_v<T, PriorSample>) {
          return {{"kind", "prior_sample"}, {"seed", v.seed}, {"index", v.index}};
        } else if constexpr (std::is_same_v<T, Interpolation>) {
          return {{"kind", "interpolation"}, {"z1_ref", v.z1_ref}, {"z2_ref", v.z2_ref}, {"w", v.w}};
        } else {
          return {{"kind", "encoded"}, {"utterance_ref", v.utterance_ref}};
        }
      },
      p.provenance);
  return {{"provenance", prov}, {"z", p.z}};
}

inline SyntheticProfile profile_from_json(const nlohmann::json& j) {
  SyntheticProfile p;
  p.z = j.at("z").get<Vec>();
  const auto& pr = j.at("provenance");
  const auto kind = pr.at("kind").get<std::string>();
  if (kind == "prior_sample") {
    p.provenance = PriorSample{pr.at("seed").get<std::uint64_t>(), pr.at("index").get<std::uint64_t>()};
  } else if (kind == "interpolation") {
    p.provenance = Interpolation{pr.at("z1_ref").get<std::string>(), pr.at("z2_ref").get<std::string>(),
                                 pr.at("w").get<double>()};
  } else if (kind == "encoded") {
    p.provenance = Encoded{pr.at("utterance_ref").get<std::string>()};
  } else {
    throw DomainError("unknown profile provenance '" + kind + "'");
  }
  return p;
}

}  // namespace spkprof
