#pragma once

// Synthetic multi-speaker corpus with known ground truth.
//
// Each utterance is a T x F frame matrix:
//   frame[t] = G_speaker * voice + G_content[content][t]
//              + G_session * s + noise_sigma * N(0, I)
// G_speaker and G_content are random maps frozen by the corpus seed, so the
// speaker part is constant over time and the content part is a fixed
// temporal pattern. s ~ N(0, I) is drawn once per utterance (a channel or
// prosody offset shared by all of its frames) and G_session maps it into a
// low-rank subspace of its own.

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <nlohmann/json.hpp>
#include <string>
#include <vector>

#include "spkprof/ndcore.hpp"
#include "spkprof/random.hpp"

namespace spkprof {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct CorpusConfig {
  std::size_t voice_dim = 8;
  std::size_t n_contents = 20;
  std::size_t frames = 40;        // T
  std::size_t feature_dim = 32;   // F
  double noise_sigma = 0.1;
  std::size_t session_rank = 32;  // rank of the per-utterance offset
  double session_sigma = 0.5;     // per-feature std of that offset
  double speaker_scale = 1.0;     // per-feature std of the speaker term
  double content_scale = 0.5;     // per-element std of the content patterns

  bool operator==(const CorpusConfig&) const = default;
};

struct SpeakerGroundTruth {
  int speaker_id = 0;
  Vec voice_params;
};

struct Utterance {
  int speaker_id = 0;
  int content_id = 0;
  int instance = 0;
  Matrix frames;
};

struct Corpus {
  CorpusConfig config;
  std::uint64_t seed = 0;
  std::size_t utts_per_speaker = 0;
  Matrix g_speaker;              // F x V
  std::vector<Matrix> g_content; // C patterns of T x F
  Matrix g_session;              // F x session_rank
  std::vector<SpeakerGroundTruth> speakers;
  std::vector<Utterance> utterances;
  std::vector<int> train_speakers;     // sorted; empty until split
  std::vector<int> held_out_speakers;  // sorted
  std::uint64_t split_seed = 0;
  double held_out_fraction = 0.0;

  bool has_split() const { return !train_speakers.empty(); }

  const SpeakerGroundTruth& speaker(int id) const {
    auto it = std::find_if(speakers.begin(), speakers.end(),
                           [&](const SpeakerGroundTruth& s) { return s.speaker_id == id; });
    if (it == speakers.end()) throw DomainError("unknown speaker id " + std::to_string(id));
    return *it;
  }

  bool is_train_speaker(int id) const {
    return std::binary_search(train_speakers.begin(), train_speakers.end(), id);
  }

  /// Indices of utterances spoken by `speaker_id`, in corpus order.
  std::vector<std::size_t> utterances_of(int speaker_id) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < utterances.size(); ++i)
      if (utterances[i].speaker_id == speaker_id) out.push_back(i);
    return out;
  }

  std::vector<std::size_t> utterances_of(const std::vector<int>& speaker_ids) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < utterances.size(); ++i)
      if (std::find(speaker_ids.begin(), speaker_ids.end(), utterances[i].speaker_id) != speaker_ids.end())
        out.push_back(i);
    return out;
  }

  std::vector<std::size_t> train_utterances() const { return utterances_of(train_speakers); }
  std::vector<std::size_t> held_out_utterances() const { return utterances_of(held_out_speakers); }
};

/// Noise-free frames for a (voice, content) pair.
inline Matrix clean_frames(const Corpus& c, std::span<const double> voice, int content_id) {
  const auto& cfg = c.config;
  Matrix base(cfg.frames, cfg.feature_dim);
  Vec spk(cfg.feature_dim, 0.0);
  for (std::size_t f = 0; f < cfg.feature_dim; ++f) spk[f] = dot(c.g_speaker.row(f), voice);
  const Matrix& pat = c.g_content.at(static_cast<std::size_t>(content_id));
  for (std::size_t t = 0; t < cfg.frames; ++t)
    for (std::size_t f = 0; f < cfg.feature_dim; ++f) base(t, f) = spk[f] + pat(t, f);
  return base;
}

inline Corpus generate_corpus(std::size_t n_speakers, std::size_t utts_per_speaker, std::uint64_t seed,
                              const CorpusConfig& cfg = {}) {
  if (n_speakers < 4) throw ConfigError("generate_corpus: n_speakers must be >= 4, got " + std::to_string(n_speakers));
  if (utts_per_speaker < 2) {
    throw ConfigError("generate_corpus: utts_per_speaker must be >= 2 to form positive pairs, got " +
                      std::to_string(utts_per_speaker));
  }
  if (cfg.frames < 1 || cfg.feature_dim < 1 || cfg.voice_dim < 1 || cfg.n_contents < 1) {
    throw ConfigError("generate_corpus: dimensions must be positive");
  }
  if (!(cfg.noise_sigma >= 0.0)) throw ConfigError("generate_corpus: noise_sigma must be >= 0");
  if (!(cfg.session_sigma >= 0.0)) throw ConfigError("generate_corpus: session_sigma must be >= 0");

  Corpus c;
  c.config = cfg;
  c.seed = seed;
  c.utts_per_speaker = utts_per_speaker;

  Rng maps(substream_seed(seed, 0));
  const double gs = cfg.speaker_scale / std::sqrt(static_cast<double>(cfg.voice_dim));
  c.g_speaker = Matrix(cfg.feature_dim, cfg.voice_dim);
  for (double& x : c.g_speaker.flat()) x = gs * maps.normal();
  Rng content_maps(substream_seed(seed, 1));
  for (std::size_t k = 0; k < cfg.n_contents; ++k) {
    Matrix p(cfg.frames, cfg.feature_dim);
    for (double& x : p.flat()) x = cfg.content_scale * content_maps.normal();
    c.g_content.push_back(std::move(p));
  }
  c.g_session = Matrix(cfg.feature_dim, cfg.session_rank);
  if (cfg.session_rank > 0) {
    Rng session_maps(substream_seed(seed, 3));
    const double ss = cfg.session_sigma / std::sqrt(static_cast<double>(cfg.session_rank));
    for (double& x : c.g_session.flat()) x = ss * session_maps.normal();
  }

  // Speaker s draws everything from its own substream, so generation order
  // across speakers does not matter.
  for (std::size_t s = 0; s < n_speakers; ++s) {
    Rng rng(substream_seed(seed, 2, s));
    SpeakerGroundTruth spk{static_cast<int>(s), rng.normal_vector(cfg.voice_dim)};
    std::vector<int> order(cfg.n_contents);
    for (std::size_t k = 0; k < order.size(); ++k) order[k] = static_cast<int>(k);
    rng.shuffle(order);
    for (std::size_t i = 0; i < utts_per_speaker; ++i) {
      Utterance u;
      u.speaker_id = spk.speaker_id;
      u.content_id = order[i % order.size()];
      u.instance = static_cast<int>(i);
      u.frames = clean_frames(c, spk.voice_params, u.content_id);
      if (cfg.session_rank > 0 && cfg.session_sigma > 0.0) {
        const Vec s = rng.normal_vector(cfg.session_rank);
        for (std::size_t f = 0; f < cfg.feature_dim; ++f) {
          const double off = dot(c.g_session.row(f), s);
          for (std::size_t t = 0; t < cfg.frames; ++t) u.frames(t, f) += off;
        }
      }
      if (cfg.noise_sigma > 0.0)
        for (double& x : u.frames.flat()) x += cfg.noise_sigma * rng.normal();
      c.utterances.push_back(std::move(u));
    }
    c.speakers.push_back(std::move(spk));
  }
  return c;
}

inline Corpus split_speakers(Corpus c, double held_out_fraction, std::uint64_t seed) {
  if (!(held_out_fraction > 0.0 && held_out_fraction < 0.5)) {
    throw ConfigError("split_speakers: held_out_fraction must be in (0, 0.5), got " +
                      std::to_string(held_out_fraction));
  }
  const std::size_t n = c.speakers.size();
  auto n_held = static_cast<std::size_t>(std::llround(static_cast<double>(n) * held_out_fraction));
  n_held = std::max<std::size_t>(n_held, 1);
  if (n < 3 || n_held >= n - 1) {
    throw ConfigError("split_speakers: too few speakers (" + std::to_string(n) + ") to split");
  }
  std::vector<int> ids;
  for (const auto& s : c.speakers) ids.push_back(s.speaker_id);
  Rng rng(substream_seed(seed, 0x53504C4954ULL));
  rng.shuffle(ids);
  c.held_out_speakers.assign(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(n_held));
  c.train_speakers.assign(ids.begin() + static_cast<std::ptrdiff_t>(n_held), ids.end());
  std::sort(c.held_out_speakers.begin(), c.held_out_speakers.end());
  std::sort(c.train_speakers.begin(), c.train_speakers.end());
  c.split_seed = seed;
  c.held_out_fraction = held_out_fraction;
  return c;
}

// ---------------------------------------------------------------------------
// On-disk format: corpus.json plus frames/uNNNNN.bin per utterance. Frame files
// hold two little-endian uint32 dims (T, F) followed by T*F little-endian
// float64 values in row-major order.

namespace detail {

template <class T>
void write_le(std::ostream& os, T v) {
  static_assert(std::endian::native == std::endian::little, "big-endian hosts are not supported");
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T read_le(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw IoError("unexpected end of frame file");
  return v;
}

inline nlohmann::json matrix_to_json(const Matrix& m) {
  return {{"rows", m.rows()}, {"cols", m.cols()}, {"data", m.data()}};
}

inline Matrix matrix_from_json(const nlohmann::json& j) {
  return Matrix(j.at("rows").get<std::size_t>(), j.at("cols").get<std::size_t>(), j.at("data").get<Vec>());
}

}  // namespace detail

inline void write_frames(const std::filesystem::path& path, const Matrix& m) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot write " + path.string());
  detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(m.rows()));
  detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(m.cols()));
  for (double x : m.flat()) detail::write_le<double>(os, x);
}

inline Matrix read_frames(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot read " + path.string());
  const auto t = detail::read_le<std::uint32_t>(is);
  const auto f = detail::read_le<std::uint32_t>(is);
  Matrix m(t, f);
  for (double& x : m.flat()) x = detail::read_le<double>(is);
  return m;
}

inline nlohmann::json corpus_config_to_json(const CorpusConfig& c) {
  return {{"voice_dim", c.voice_dim},         {"n_contents", c.n_contents},
          {"frames", c.frames},               {"feature_dim", c.feature_dim},
          {"noise_sigma", c.noise_sigma},     {"session_rank", c.session_rank},
          {"session_sigma", c.session_sigma},
          {"speaker_scale", c.speaker_scale},
          {"content_scale", c.content_scale}};
}

inline CorpusConfig corpus_config_from_json(const nlohmann::json& j) {
  CorpusConfig c;
  c.voice_dim = j.value("voice_dim", c.voice_dim);
  c.n_contents = j.value("n_contents", c.n_contents);
  c.frames = j.value("frames", c.frames);
  c.feature_dim = j.value("feature_dim", c.feature_dim);
  c.noise_sigma = j.value("noise_sigma", c.noise_sigma);
  c.session_rank = j.value("session_rank", c.session_rank);
  c.session_sigma = j.value("session_sigma", c.session_sigma);
  c.speaker_scale = j.value("speaker_scale", c.speaker_scale);
  c.content_scale = j.value("content_scale", c.content_scale);
  return c;
}

inline std::string frame_file_name(std::size_t index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "u%05zu.bin", index);
  return buf;
}

inline nlohmann::json corpus_manifest(const Corpus& c) {
  nlohmann::json j;
  j["format_version"] = 1;
  j["seed"] = c.seed;
  j["config"] = corpus_config_to_json(c.config);
  j["n_speakers"] = c.speakers.size();
  j["utts_per_speaker"] = c.utts_per_speaker;
  j["generator"] = {{"g_speaker", detail::matrix_to_json(c.g_speaker)},
                    {"g_session", detail::matrix_to_json(c.g_session)},
                    {"g_content", nlohmann::json::array()}};
  for (const auto& p : c.g_content) j["generator"]["g_content"].push_back(detail::matrix_to_json(p));
  j["speakers"] = nlohmann::json::array();
  for (const auto& s : c.speakers) j["speakers"].push_back({{"id", s.speaker_id}, {"voice_params", s.voice_params}});
  j["split"] = {{"train", c.train_speakers},
                {"held_out", c.held_out_speakers},
                {"seed", c.split_seed},
                {"held_out_fraction", c.held_out_fraction}};
  j["utterances"] = nlohmann::json::array();
  for (std::size_t i = 0; i < c.utterances.size(); ++i) {
    const auto& u = c.utterances[i];
    j["utterances"].push_back({{"index", i},
                               {"speaker_id", u.speaker_id},
                               {"content_id", u.content_id},
                               {"instance", u.instance},
                               {"frames", "frames/" + frame_file_name(i)}});
  }
  return j;
}

inline void save_corpus(const Corpus& c, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir / "frames");
  for (std::size_t i = 0; i < c.utterances.size(); ++i)
    write_frames(dir / "frames" / frame_file_name(i), c.utterances[i].frames);
  std::ofstream os(dir / "corpus.json");
  if (!os) throw IoError("cannot write " + (dir / "corpus.json").string());
  os << corpus_manifest(c).dump(1) << '\n';
}

inline Corpus load_corpus(const std::filesystem::path& dir) {
  std::ifstream is(dir / "corpus.json");
  if (!is) throw IoError("missing corpus manifest " + (dir / "corpus.json").string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(is);
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("corpus.json: ") + e.what());
  }
  Corpus c;
  c.seed = j.at("seed").get<std::uint64_t>();
  c.config = corpus_config_from_json(j.at("config"));
  c.utts_per_speaker = j.at("utts_per_speaker").get<std::size_t>();
  c.g_speaker = detail::matrix_from_json(j.at("generator").at("g_speaker"));
  c.g_session = detail::matrix_from_json(j.at("generator").at("g_session"));
  for (const auto& p : j.at("generator").at("g_content")) c.g_content.push_back(detail::matrix_from_json(p));
  for (const auto& s : j.at("speakers"))
    c.speakers.push_back({s.at("id").get<int>(), s.at("voice_params").get<Vec>()});
  const auto& sp = j.at("split");
  c.train_speakers = sp.at("train").get<std::vector<int>>();
  c.held_out_speakers = sp.at("held_out").get<std::vector<int>>();
  c.split_seed = sp.at("seed").get<std::uint64_t>();
  c.held_out_fraction = sp.at("held_out_fraction").get<double>();
  for (const auto& u : j.at("utterances")) {
    Utterance utt;
    utt.speaker_id = u.at("speaker_id").get<int>();
    utt.content_id = u.at("content_id").get<int>();
    utt.instance = u.at("instance").get<int>();
    utt.frames = read_frames(dir / u.at("frames").get<std::string>());
    if (utt.frames.rows() != c.config.frames || utt.frames.cols() != c.config.feature_dim) {
      throw IoError("frame file for utterance " + std::to_string(u.at("index").get<std::size_t>()) +
                    " has shape " + utt.frames.shape_string() + ", manifest expects (" +
                    std::to_string(c.config.frames) + "x" + std::to_string(c.config.feature_dim) + ")");
    }
    c.utterances.push_back(std::move(utt));
  }
  if (c.utterances.size() != c.speakers.size() * c.utts_per_speaker) {
    throw IoError("corpus.json: utterance count does not match n_speakers x utts_per_speaker");
  }
  return c;
}

}  // namespace spkprof
