#pragma once

// Run configuration: one flat JSON object with an explicit format version.
// Every random stream is named by a seed field; nothing reads the clock.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <nlohmann/json.hpp>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "spkprof/checkpoint.hpp"
#include "spkprof/corpus.hpp"
#include "spkprof/metrics.hpp"
#include "spkprof/training.hpp"
#include "spkprof/verify.hpp"

namespace spkprof {

inline constexpr int kConfigFormat = 1;
inline constexpr const char* kToolVersion = "0.1.0";

struct RunConfig {
  // corpus
  std::uint64_t corpus_seed = 1;
  std::size_t n_speakers = 64;
  std::size_t utts_per_speaker = 20;
  CorpusConfig corpus;
  double held_out_fraction = 0.2;
  std::uint64_t split_seed = 2;
  // model and training
  SystemVariant variant = SystemVariant::vae_triplet_shuffle;
  ModelDims dims;
  double beta_kl = 0.05;
  double kl_warmup_fraction = 0.2;
  double lambda_triplet = 1.0;
  double triplet_alpha = 0.5;
  std::size_t epochs = 100;
  std::size_t batch_size = 16;
  double learning_rate = 1e-3;
  std::uint64_t train_seed = 3;
  std::size_t checkpoint_every = 500;  // steps between checkpoints, 0 = only at the end
  // evaluation
  std::uint64_t verifier_seed = 4;
  std::uint64_t eval_seed = 5;
  std::size_t verifier_epochs = 30;
  EvalConfig eval;
};

/// Fields a config file must spell out; everything else has a default.
inline const std::vector<std::string>& required_config_fields() {
  static const std::vector<std::string> f{"format_version", "corpus_seed", "n_speakers", "utts_per_speaker",
                                          "train_seed",     "eval_seed"};
  return f;
}

namespace detail {

template <class T>
void read_field(const nlohmann::json& j, const char* name, T& out) {
  auto it = j.find(name);
  if (it == j.end()) return;
  try {
    out = it->get<T>();
  } catch (const nlohmann::json::exception&) {
    throw ConfigError(std::string("config field '") + name + "' has the wrong type");
  }
}

inline std::string sampling_to_string(BaselineSampling b) {
  return b == BaselineSampling::table_rows ? "table_rows" : "fitted_gaussian";
}

}  // namespace detail

inline void validate(const RunConfig& c) {
  if (c.n_speakers < 8) throw ConfigError("config field 'n_speakers' must be >= 8");
  if (c.utts_per_speaker < 2) throw ConfigError("config field 'utts_per_speaker' must be >= 2");
  if (!(c.held_out_fraction > 0.0 && c.held_out_fraction < 0.5))
    throw ConfigError("config field 'held_out_fraction' must lie in (0, 0.5)");
  if (!(c.beta_kl >= 0.0)) throw ConfigError("config field 'beta_kl' must be >= 0");
  if (!(c.kl_warmup_fraction >= 0.0 && c.kl_warmup_fraction <= 1.0))
    throw ConfigError("config field 'kl_warmup_fraction' must lie in [0, 1]");
  if (!(c.lambda_triplet >= 0.0)) throw ConfigError("config field 'lambda_triplet' must be >= 0");
  if (!(c.triplet_alpha >= 0.0)) throw ConfigError("config field 'triplet_alpha' must be >= 0");
  if (c.variant == SystemVariant::vae && c.lambda_triplet != 0.0)
    throw ConfigError("config field 'lambda_triplet' must be 0 for variant vae");
  if (c.epochs == 0) throw ConfigError("config field 'epochs' must be positive");
  if (c.batch_size == 0) throw ConfigError("config field 'batch_size' must be positive");
  if (!(c.learning_rate > 0.0)) throw ConfigError("config field 'learning_rate' must be positive");
  if (c.dims.latent_dim == 0) throw ConfigError("config field 'latent_dim' must be positive");
  if (c.corpus.voice_dim == 0 || c.corpus.n_contents == 0 || c.corpus.frames == 0 || c.corpus.feature_dim == 0)
    throw ConfigError("corpus dimensions must be positive");
  if (!(c.corpus.noise_sigma >= 0.0)) throw ConfigError("config field 'noise_sigma' must be >= 0");
  if (!(c.corpus.session_sigma >= 0.0)) throw ConfigError("config field 'session_sigma' must be >= 0");
  if (c.verifier_epochs == 0) throw ConfigError("config field 'verifier_epochs' must be positive");
  validate(c.eval);
}

/// Parses and validates. Unknown fields are rejected so typos cannot pass silently.
inline RunConfig config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  for (const auto& f : required_config_fields())
    if (!j.contains(f)) throw ConfigError("config is missing required field '" + f + "'");
  static const std::set<std::string> known{
      "format_version", "corpus_seed", "n_speakers", "utts_per_speaker", "voice_dim", "n_contents", "frames",
      "feature_dim", "noise_sigma", "session_rank", "session_sigma", "speaker_scale", "content_scale",
      "held_out_fraction", "split_seed", "variant", "shuffle", "latent_dim", "encoder_hidden", "decoder_hidden",
      "beta_kl", "kl_warmup_fraction", "lambda_triplet", "triplet_alpha", "epochs", "batch_size", "learning_rate",
      "train_seed", "checkpoint_every", "verifier_seed", "eval_seed", "verifier_epochs", "n_synthetic_profiles",
      "percentiles", "interpolation_grid", "profile_counts", "n_eval_seeds", "n_interpolation_pairs",
      "baseline_sampling", "probe_min_accuracy"};
  for (const auto& [k, v] : j.items())
    if (!known.count(k)) throw ConfigError("config has unknown field '" + k + "'");

  int version = 0;
  detail::read_field(j, "format_version", version);
  if (version != kConfigFormat)
    throw ConfigError("config field 'format_version' must be " + std::to_string(kConfigFormat));

  RunConfig c;
  detail::read_field(j, "corpus_seed", c.corpus_seed);
  detail::read_field(j, "n_speakers", c.n_speakers);
  detail::read_field(j, "utts_per_speaker", c.utts_per_speaker);
  detail::read_field(j, "voice_dim", c.corpus.voice_dim);
  detail::read_field(j, "n_contents", c.corpus.n_contents);
  detail::read_field(j, "frames", c.corpus.frames);
  detail::read_field(j, "feature_dim", c.corpus.feature_dim);
  detail::read_field(j, "noise_sigma", c.corpus.noise_sigma);
  detail::read_field(j, "session_rank", c.corpus.session_rank);
  detail::read_field(j, "session_sigma", c.corpus.session_sigma);
  detail::read_field(j, "speaker_scale", c.corpus.speaker_scale);
  detail::read_field(j, "content_scale", c.corpus.content_scale);
  detail::read_field(j, "held_out_fraction", c.held_out_fraction);
  detail::read_field(j, "split_seed", c.split_seed);

  std::string variant = to_string(c.variant);
  detail::read_field(j, "variant", variant);
  c.variant = variant_from_string(variant);
  if (c.variant == SystemVariant::vae) c.lambda_triplet = 0.0;
  if (j.contains("shuffle")) {
    bool shuffle = false;
    detail::read_field(j, "shuffle", shuffle);
    if (shuffle != uses_shuffle(c.variant))
      throw ConfigError("config field 'shuffle' contradicts variant '" + variant + "'");
  }
  detail::read_field(j, "latent_dim", c.dims.latent_dim);
  detail::read_field(j, "encoder_hidden", c.dims.encoder_hidden);
  detail::read_field(j, "decoder_hidden", c.dims.decoder_hidden);
  detail::read_field(j, "beta_kl", c.beta_kl);
  detail::read_field(j, "kl_warmup_fraction", c.kl_warmup_fraction);
  detail::read_field(j, "lambda_triplet", c.lambda_triplet);
  detail::read_field(j, "triplet_alpha", c.triplet_alpha);
  detail::read_field(j, "epochs", c.epochs);
  detail::read_field(j, "batch_size", c.batch_size);
  detail::read_field(j, "learning_rate", c.learning_rate);
  detail::read_field(j, "train_seed", c.train_seed);
  detail::read_field(j, "checkpoint_every", c.checkpoint_every);
  detail::read_field(j, "verifier_seed", c.verifier_seed);
  detail::read_field(j, "eval_seed", c.eval_seed);
  detail::read_field(j, "verifier_epochs", c.verifier_epochs);
  detail::read_field(j, "n_synthetic_profiles", c.eval.n_synthetic_profiles);
  detail::read_field(j, "percentiles", c.eval.percentiles);
  detail::read_field(j, "interpolation_grid", c.eval.interpolation_grid);
  detail::read_field(j, "profile_counts", c.eval.profile_counts);
  detail::read_field(j, "n_eval_seeds", c.eval.n_eval_seeds);
  detail::read_field(j, "n_interpolation_pairs", c.eval.n_interpolation_pairs);
  detail::read_field(j, "probe_min_accuracy", c.eval.probe_min_accuracy);
  std::string sampling = detail::sampling_to_string(c.eval.baseline_sampling);
  detail::read_field(j, "baseline_sampling", sampling);
  if (sampling == "table_rows") {
    c.eval.baseline_sampling = BaselineSampling::table_rows;
  } else if (sampling == "fitted_gaussian") {
    c.eval.baseline_sampling = BaselineSampling::fitted_gaussian;
  } else {
    throw ConfigError("config field 'baseline_sampling' must be table_rows or fitted_gaussian");
  }
  validate(c);
  return c;
}

inline nlohmann::json to_json(const RunConfig& c) {
  return {{"format_version", kConfigFormat},
          {"corpus_seed", c.corpus_seed},
          {"n_speakers", c.n_speakers},
          {"utts_per_speaker", c.utts_per_speaker},
          {"voice_dim", c.corpus.voice_dim},
          {"n_contents", c.corpus.n_contents},
          {"frames", c.corpus.frames},
          {"feature_dim", c.corpus.feature_dim},
          {"noise_sigma", c.corpus.noise_sigma},
          {"session_rank", c.corpus.session_rank},
          {"session_sigma", c.corpus.session_sigma},
          {"speaker_scale", c.corpus.speaker_scale},
          {"content_scale", c.corpus.content_scale},
          {"held_out_fraction", c.held_out_fraction},
          {"split_seed", c.split_seed},
          {"variant", to_string(c.variant)},
          {"shuffle", uses_shuffle(c.variant)},
          {"latent_dim", c.dims.latent_dim},
          {"encoder_hidden", c.dims.encoder_hidden},
          {"decoder_hidden", c.dims.decoder_hidden},
          {"beta_kl", c.beta_kl},
          {"kl_warmup_fraction", c.kl_warmup_fraction},
          {"lambda_triplet", c.lambda_triplet},
          {"triplet_alpha", c.triplet_alpha},
          {"epochs", c.epochs},
          {"batch_size", c.batch_size},
          {"learning_rate", c.learning_rate},
          {"train_seed", c.train_seed},
          {"checkpoint_every", c.checkpoint_every},
          {"verifier_seed", c.verifier_seed},
          {"eval_seed", c.eval_seed},
          {"verifier_epochs", c.verifier_epochs},
          {"n_synthetic_profiles", c.eval.n_synthetic_profiles},
          {"percentiles", c.eval.percentiles},
          {"interpolation_grid", c.eval.interpolation_grid},
          {"profile_counts", c.eval.profile_counts},
          {"n_eval_seeds", c.eval.n_eval_seeds},
          {"n_interpolation_pairs", c.eval.n_interpolation_pairs},
          {"baseline_sampling", detail::sampling_to_string(c.eval.baseline_sampling)},
          {"probe_min_accuracy", c.eval.probe_min_accuracy}};
}

/// Adds `delta` to every seed, for quick replicate runs.
inline void apply_seed_override(RunConfig& c, std::uint64_t delta) {
  c.corpus_seed += delta;
  c.split_seed += delta;
  c.train_seed += delta;
  c.verifier_seed += delta;
  c.eval_seed += delta;
}

inline TrainConfig train_config(const RunConfig& c) {
  TrainConfig t;
  t.variant = c.variant;
  t.dims = c.dims;
  t.weights.beta_kl = c.beta_kl;
  t.weights.lambda_triplet = c.variant == SystemVariant::vae ? 0.0 : c.lambda_triplet;
  t.weights.triplet.alpha = c.triplet_alpha;
  t.kl_warmup_fraction = c.kl_warmup_fraction;
  t.epochs = c.epochs;
  t.batch_size = c.batch_size;
  t.adam.lr = c.learning_rate;
  t.train_seed = c.train_seed;
  return t;
}

inline VerifierConfig verifier_config(const RunConfig& c) {
  VerifierConfig v;
  v.epochs = c.verifier_epochs;
  return v;
}

inline std::uint64_t fnv1a(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : bytes) h = (h ^ ch) * 0x100000001b3ULL;
  return h;
}

inline std::string read_file_bytes(const std::filesystem::path& p) {
  std::ifstream is(p, std::ios::binary);
  if (!is) throw IoError("cannot read " + p.string());
  std::ostringstream os;
  os << is.rdbuf();
  return os.str();
}

struct LoadedConfig {
  RunConfig config;
  std::string bytes;  // the file exactly as read
  std::string hash;   // fnv1a of `bytes`
};

inline LoadedConfig load_config(const std::filesystem::path& path) {
  LoadedConfig lc;
  lc.bytes = read_file_bytes(path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(lc.bytes);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(path.string() + ": not valid JSON (" + e.what() + ")");
  }
  lc.config = config_from_json(j);
  lc.hash = hex64(fnv1a(lc.bytes));
  return lc;
}

// ---------------------------------------------------------------------------
// Manifest: what a command produced, from which config bytes.

struct RunManifest {
  std::string config_hash;
  std::string tool_version = kToolVersion;
  std::map<std::string, std::string> stages;     // stage -> "running" | "complete"
  std::map<std::string, std::string> artifacts;  // name -> path relative to the output dir
};

inline nlohmann::json to_json(const RunManifest& m) {
  return {{"config_hash", m.config_hash}, {"tool_version", m.tool_version}, {"stages", m.stages},
          {"artifacts", m.artifacts}};
}

inline RunManifest manifest_from_json(const nlohmann::json& j) {
  RunManifest m;
  m.config_hash = j.at("config_hash").get<std::string>();
  m.tool_version = j.at("tool_version").get<std::string>();
  m.stages = j.at("stages").get<std::map<std::string, std::string>>();
  m.artifacts = j.at("artifacts").get<std::map<std::string, std::string>>();
  return m;
}

inline void save_manifest(const std::filesystem::path& dir, const RunManifest& m) {
  detail::write_text_atomic(dir / "run_manifest.json", to_json(m).dump(2) + "\n");
}

}  // namespace spkprof
