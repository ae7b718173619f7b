#pragma once

// JSON checkpoints for trained models and verifiers. Doubles are written in
// shortest round-trip form, so a save/load cycle is bit-exact.

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <nlohmann/json.hpp>
#include <sstream>
#include <string>
#include <vector>

#include "spkprof/corpus.hpp"
#include "spkprof/ndcore.hpp"
#include "spkprof/vae.hpp"
#include "spkprof/verify.hpp"

namespace spkprof {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr int kCheckpointFormat = 1;

/// FNV-1a over the raw bytes of every parameter, in visit order.
template <class P>
std::uint64_t parameter_digest(const P& params) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  params.visit([&](const std::string& name, std::span<const double> s) {
    for (unsigned char c : name) h = (h ^ c) * 0x100000001b3ULL;
    for (double x : s) {
      std::uint64_t bits;
      std::memcpy(&bits, &x, sizeof bits);
      for (int k = 0; k < 8; ++k) h = (h ^ ((bits >> (8 * k)) & 0xff)) * 0x100000001b3ULL;
    }
  });
  return h;
}

inline std::string hex64(std::uint64_t x) {
  std::ostringstream os;
  os << std::hex;
  os.width(16);
  os.fill('0');
  os << x;
  return os.str();
}

namespace detail {

inline void add_layer_shapes(std::map<std::string, std::vector<std::size_t>>& m, const std::string& prefix,
                             const DenseLayer& l) {
  m[prefix + ".weight"] = {l.out(), l.in()};
  m[prefix + ".bias"] = {l.out()};
}

inline std::map<std::string, std::vector<std::size_t>> shapes_of(const ModelParams& p) {
  std::map<std::string, std::vector<std::size_t>> m;
  for (std::size_t i = 0; i < p.encoder.size(); ++i) add_layer_shapes(m, "encoder." + std::to_string(i), p.encoder[i]);
  add_layer_shapes(m, "encoder.mu", p.mu_head);
  add_layer_shapes(m, "encoder.sigma", p.sigma_head);
  for (std::size_t i = 0; i < p.decoder.size(); ++i) add_layer_shapes(m, "decoder." + std::to_string(i), p.decoder[i]);
  m["baseline.table"] = {p.baseline_table.rows(), p.baseline_table.cols()};
  return m;
}

inline std::map<std::string, std::vector<std::size_t>> shapes_of(const VerifierParams& v) {
  std::map<std::string, std::vector<std::size_t>> m;
  for (std::size_t i = 0; i < v.frame_layers.size(); ++i)
    add_layer_shapes(m, "verifier." + std::to_string(i), v.frame_layers[i]);
  add_layer_shapes(m, "verifier.projection", v.projection);
  return m;
}

template <class P>
nlohmann::json params_to_json(const P& p) {
  const auto shapes = shapes_of(p);
  nlohmann::json arr = nlohmann::json::array();
  p.visit([&](const std::string& name, std::span<const double> s) {
    arr.push_back({{"name", name}, {"shape", shapes.at(name)}, {"data", std::vector<double>(s.begin(), s.end())}});
  });
  return arr;
}

/// Fills `p` (already built with the right architecture) from the stored arrays.
template <class P>
void params_from_json(P& p, const nlohmann::json& arr) {
  const auto shapes = shapes_of(p);
  std::map<std::string, const nlohmann::json*> by_name;
  for (const auto& e : arr) by_name[e.at("name").get<std::string>()] = &e;
  if (by_name.size() != shapes.size()) {
    throw CheckpointError("checkpoint holds " + std::to_string(by_name.size()) + " parameter arrays, the model has " +
                          std::to_string(shapes.size()));
  }
  p.visit([&](const std::string& name, std::span<double> s) {
    auto it = by_name.find(name);
    if (it == by_name.end()) throw CheckpointError("checkpoint is missing parameter '" + name + "'");
    const auto shape = it->second->at("shape").get<std::vector<std::size_t>>();
    if (shape != shapes.at(name)) throw CheckpointError("parameter '" + name + "' has the wrong shape");
    const auto& data = it->second->at("data");
    if (data.size() != s.size()) throw CheckpointError("parameter '" + name + "' has the wrong length");
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (!data[i].is_number()) throw CheckpointError("parameter '" + name + "' holds a non-finite value");
      s[i] = data[i].get<double>();
    }
  });
}

inline nlohmann::json dims_to_json(const ModelDims& d) {
  return {{"feature_dim", d.feature_dim}, {"frames", d.frames},
          {"n_contents", d.n_contents},   {"latent_dim", d.latent_dim},
          {"encoder_hidden", d.encoder_hidden}, {"decoder_hidden", d.decoder_hidden}};
}

inline ModelDims dims_from_json(const nlohmann::json& j) {
  ModelDims d;
  d.feature_dim = j.at("feature_dim").get<std::size_t>();
  d.frames = j.at("frames").get<std::size_t>();
  d.n_contents = j.at("n_contents").get<std::size_t>();
  d.latent_dim = j.at("latent_dim").get<std::size_t>();
  d.encoder_hidden = j.at("encoder_hidden").get<std::vector<std::size_t>>();
  d.decoder_hidden = j.at("decoder_hidden").get<std::vector<std::size_t>>();
  return d;
}

inline void write_text_atomic(const std::filesystem::path& path, const std::string& text) {
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot write " + tmp);
    os << text;
    if (!os) throw IoError("write failed for " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

inline nlohmann::json read_json_file(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot read " + path.string());
  try {
    return nlohmann::json::parse(is);
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(path.string() + ": " + e.what());
  }
}

}  // namespace detail

struct ModelCheckpoint {
  nlohmann::json config;  // the run config that produced it
  SystemVariant variant = SystemVariant::vae_triplet_shuffle;
  ModelParams params;
  AdamState optimizer;
  long step = 0;
  std::string rng_state;  // noise stream positioned for the next step
  bool trained = false;   // true once the planned step count was reached

  bool operator==(const ModelCheckpoint&) const = default;
};

inline nlohmann::json to_json(const ModelCheckpoint& c) {
  return {{"format_version", kCheckpointFormat},
          {"kind", "model"},
          {"variant", to_string(c.variant)},
          {"config", c.config},
          {"dims", detail::dims_to_json(c.params.dims)},
          {"table_speakers", c.params.table_speakers},
          {"rng_state", c.rng_state},
          {"params", detail::params_to_json(c.params)},
          {"digest", hex64(parameter_digest(c.params))},
          {"optimizer", {{"step", c.optimizer.step}, {"m", c.optimizer.m}, {"v", c.optimizer.v}}},
          {"step", c.step},
          {"trained", c.trained}};
}

inline ModelCheckpoint model_checkpoint_from_json(const nlohmann::json& j) {
  try {
    if (j.at("format_version").get<int>() != kCheckpointFormat) throw CheckpointError("unsupported checkpoint format");
    if (j.at("kind").get<std::string>() != "model") throw CheckpointError("not a model checkpoint");
    ModelCheckpoint c;
    c.variant = variant_from_string(j.at("variant").get<std::string>());
    c.config = j.at("config");
    c.params = make_model(detail::dims_from_json(j.at("dims")), j.at("table_speakers").get<std::vector<int>>(), 0);
    detail::params_from_json(c.params, j.at("params"));
    if (hex64(parameter_digest(c.params)) != j.at("digest").get<std::string>())
      throw CheckpointError("parameter digest mismatch, the checkpoint is corrupt");
    c.rng_state = j.at("rng_state").get<std::string>();
    const auto& o = j.at("optimizer");
    c.optimizer.step = o.at("step").get<long>();
    c.optimizer.m = o.at("m").get<Vec>();
    c.optimizer.v = o.at("v").get<Vec>();
    const std::size_t n = parameter_count(c.params);
    if (c.optimizer.m.size() != n || c.optimizer.v.size() != n)
      throw CheckpointError("optimizer moments do not match the parameter count");
    c.step = j.at("step").get<long>();
    c.trained = j.at("trained").get<bool>();
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("malformed model checkpoint: ") + e.what());
  } catch (const ConfigError& e) {
    throw CheckpointError(std::string("malformed model checkpoint: ") + e.what());
  }
}

struct VerifierCheckpoint {
  nlohmann::json config;
  VerifierConfig verifier_config;
  std::uint64_t seed = 0;
  VerifierParams params;

  bool operator==(const VerifierCheckpoint&) const = default;
};

inline nlohmann::json to_json(const VerifierCheckpoint& c) {
  const auto& vc = c.verifier_config;
  return {{"format_version", kCheckpointFormat},
          {"kind", "verifier"},
          {"config", c.config},
          {"seed", c.seed},
          {"architecture",
           {{"feature_dim", c.params.frame_layers.empty() ? 0 : c.params.frame_layers.front().in()},
            {"hidden", vc.hidden},
            {"embedding_dim", vc.embedding_dim}}},
          {"rng_state", ""},
          {"params", detail::params_to_json(c.params)},
          {"digest", hex64(parameter_digest(c.params))},
          {"optimizer", nullptr},
          {"step", static_cast<long>(vc.epochs)},
          {"train_speakers", c.params.train_speakers},
          {"held_out_speakers", c.params.held_out_speakers},
          {"held_out_eer", c.params.held_out_eer}};
}

inline VerifierCheckpoint verifier_checkpoint_from_json(const nlohmann::json& j) {
  try {
    if (j.at("format_version").get<int>() != kCheckpointFormat) throw CheckpointError("unsupported checkpoint format");
    if (j.at("kind").get<std::string>() != "verifier") throw CheckpointError("not a verifier checkpoint");
    VerifierCheckpoint c;
    c.config = j.at("config");
    c.seed = j.at("seed").get<std::uint64_t>();
    const auto& a = j.at("architecture");
    c.verifier_config.hidden = a.at("hidden").get<std::vector<std::size_t>>();
    c.verifier_config.embedding_dim = a.at("embedding_dim").get<std::size_t>();
    c.verifier_config.epochs = j.at("step").get<std::size_t>();
    c.params = make_verifier(a.at("feature_dim").get<std::size_t>(), c.verifier_config, 0);
    detail::params_from_json(c.params, j.at("params"));
    if (hex64(parameter_digest(c.params)) != j.at("digest").get<std::string>())
      throw CheckpointError("parameter digest mismatch, the checkpoint is corrupt");
    c.params.train_speakers = j.at("train_speakers").get<std::vector<int>>();
    c.params.held_out_speakers = j.at("held_out_speakers").get<std::vector<int>>();
    c.params.held_out_eer = j.at("held_out_eer").get<double>();
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("malformed verifier checkpoint: ") + e.what());
  }
}

inline void save_checkpoint(const std::filesystem::path& path, const nlohmann::json& j) {
  detail::write_text_atomic(path, j.dump(1) + "\n");
}

inline ModelCheckpoint load_model_checkpoint(const std::filesystem::path& path) {
  return model_checkpoint_from_json(detail::read_json_file(path));
}

inline VerifierCheckpoint load_verifier_checkpoint(const std::filesystem::path& path) {
  return verifier_checkpoint_from_json(detail::read_json_file(path));
}

}  // namespace spkprof
