#pragma once

// Helpers shared by the unit tests and the acceptance runner.

#include <sys/wait.h>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>

#include <nlohmann/json.hpp>

#include "spkprof/training.hpp"

namespace spkprof::support {

inline std::filesystem::path fresh_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("spkprof_test_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

inline std::string slurp(const std::filesystem::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::ostringstream os;
  os << is.rdbuf();
  return os.str();
}

/// Runs a shell command and returns its exit status (not the raw wait status).
inline int run(const std::string& cmd) {
  const int st = std::system((cmd + " >/dev/null 2>&1").c_str());
  if (st == -1) return -1;
  return WIFEXITED(st) ? WEXITSTATUS(st) : -1;
}

struct Captured {
  int status = -1;
  std::string output;  // stdout and stderr interleaved
};

inline Captured capture(const std::string& cmd) {
  Captured c;
  FILE* f = popen((cmd + " 2>&1").c_str(), "r");
  if (!f) return c;
  char buf[4096];
  std::size_t n;
  while ((n = std::fread(buf, 1, sizeof buf, f)) > 0) c.output.append(buf, n);
  const int st = pclose(f);
  c.status = WIFEXITED(st) ? WEXITSTATUS(st) : -1;
  return c;
}

inline std::string quoted(const std::filesystem::path& p) { return "'" + p.string() + "'"; }

/// Writes `base` with the variant field set, one file per system, and returns the paths.
inline std::map<SystemVariant, std::filesystem::path> write_variant_configs(nlohmann::json base,
                                                                           const std::filesystem::path& dir) {
  std::map<SystemVariant, std::filesystem::path> out;
  std::filesystem::create_directories(dir);
  base.erase("shuffle");
  for (auto v : all_variants()) {
    auto j = base;
    j["variant"] = to_string(v);
    if (v == SystemVariant::vae) j.erase("lambda_triplet");
    const auto p = dir / (to_string(v) + ".json");
    std::ofstream(p) << j.dump(2) << "\n";
    out[v] = p;
  }
  return out;
}

/// Six speakers, F = 8, T = 5; small enough for exhaustive finite differences.
inline Corpus tiny_corpus(std::uint64_t seed = 3) {
  CorpusConfig cc;
  cc.feature_dim = 8;
  cc.frames = 5;
  cc.n_contents = 3;
  cc.voice_dim = 2;
  cc.session_rank = 2;
  return split_speakers(generate_corpus(6, 4, seed, cc), 0.2, seed + 1);
}

inline ModelDims tiny_dims(const Corpus& c) {
  ModelDims d;
  d.latent_dim = 2;
  d.encoder_hidden = {5};
  d.decoder_hidden = {6};
  return dims_for_corpus(c, d);
}

/// Max relative error between the analytic gradient of the full loss and
/// central differences, over every parameter of a freshly initialized tiny model.
inline GradCheckResult tiny_model_grad_check(std::uint64_t seed, SystemVariant v) {
  const Corpus corpus = tiny_corpus(seed + 100);
  const ModelParams p = make_model(tiny_dims(corpus), corpus.train_speakers, seed);
  TrainConfig tc;
  tc.variant = v;
  tc.dims = p.dims;
  tc.batch_size = 4;
  tc.train_seed = seed;
  const auto plan = make_epoch_plan(corpus, 0, seed, uses_shuffle(v));
  const auto batch = batch_for_step(corpus, tc, plan, 0);
  LossWeights w;
  w.beta_kl = 0.3;
  w.lambda_triplet = uses_triplet(v) ? 1.0 : 0.0;
  ModelParams g = p;
  zero_fill(g);
  batch_loss(p, corpus, batch, w, v, &g);
  auto f = [&](std::span<const double> x) {
    ModelParams q = p;
    unflatten(q, x);
    return batch_loss(q, corpus, batch, w, v).total;
  };
  return grad_check(f, flatten(p), flatten(g));
}

}  // namespace spkprof::support
