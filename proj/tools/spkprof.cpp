// spkprof: corpus generation, training, synthesis, evaluation and reports.
//
// Exit codes: 0 ok, 2 config or usage error, 3 filesystem conflict,
// 4 numeric failure (the last good checkpoint is kept).

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "spkprof/checkpoint.hpp"
#include "spkprof/config.hpp"
#include "spkprof/corpus.hpp"
#include "spkprof/latent.hpp"
#include "spkprof/metrics.hpp"
#include "spkprof/report.hpp"
#include "spkprof/training.hpp"
#include "spkprof/verify.hpp"

namespace fs = std::filesystem;
using namespace spkprof;

namespace {

constexpr int kOk = 0;
constexpr int kUsage = 2;
constexpr int kConflict = 3;
constexpr int kNumeric = 4;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ConflictError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

bool is_nonempty_dir(const fs::path& p) { return fs::is_directory(p) && !fs::is_empty(p); }

bool looks_like_our_output(const fs::path& p) {
  return fs::exists(p / "run_manifest.json") || fs::exists(p / "corpus.json");
}

/// Creates `out`; an existing non-empty directory needs --force, and --force
/// only clears directories this tool wrote.
void prepare_out_dir(const fs::path& out, bool force) {
  if (fs::exists(out) && !fs::is_directory(out)) throw ConflictError(out.string() + " exists and is not a directory");
  if (is_nonempty_dir(out)) {
    if (!force) throw ConflictError(out.string() + " is not empty (use --force to overwrite)");
    if (!looks_like_our_output(out))
      throw ConflictError(out.string() + " was not written by spkprof; refusing to clear it");
    fs::remove_all(out);
  }
  fs::create_directories(out);
}

LoadedConfig load_run_config(const std::string& path, std::optional<std::uint64_t> seed_override) {
  if (path.empty()) throw UsageError("--config is required");
  if (!fs::exists(path)) throw UsageError("config file " + path + " does not exist");
  LoadedConfig lc = load_config(path);
  if (seed_override) {
    apply_seed_override(lc.config, *seed_override);
    lc.hash = hex64(fnv1a(lc.bytes + "|seed-override=" + std::to_string(*seed_override)));
  }
  return lc;
}

Corpus load_corpus_dir(const std::string& dir) {
  if (dir.empty()) throw UsageError("--corpus is required");
  if (!fs::exists(fs::path(dir) / "corpus.json")) throw UsageError("no corpus at " + dir);
  return load_corpus(dir);
}

void write_config_copy(const fs::path& out, const LoadedConfig& lc) {
  detail::write_text_atomic(out / "config.json", lc.bytes);
}

// ---------------------------------------------------------------------------

int cmd_gen_corpus(const std::string& config, const std::string& out, bool force,
                   std::optional<std::uint64_t> seed_override) {
  const auto lc = load_run_config(config, seed_override);
  const auto& c = lc.config;
  Corpus corpus = generate_corpus(c.n_speakers, c.utts_per_speaker, c.corpus_seed, c.corpus);
  corpus = split_speakers(std::move(corpus), c.held_out_fraction, c.split_seed);
  if (out.empty()) throw UsageError("--out is required");
  prepare_out_dir(out, force);
  RunManifest m;
  m.config_hash = lc.hash;
  m.stages["gen-corpus"] = "running";
  m.artifacts["corpus"] = "corpus.json";
  m.artifacts["frames"] = "frames/";
  m.artifacts["config"] = "config.json";
  save_manifest(out, m);
  write_config_copy(out, lc);
  save_corpus(corpus, out);
  m.stages["gen-corpus"] = "complete";
  save_manifest(out, m);
  std::printf("wrote %zu utterances (%zu speakers, %zu held out) to %s\n", corpus.utterances.size(),
              corpus.speakers.size(), corpus.held_out_speakers.size(), out.c_str());
  return kOk;
}

// ---------------------------------------------------------------------------

std::string history_csv(const std::vector<HistoryRow>& rows) {
  std::ostringstream os;
  os << "step,l1,kl,triplet,total\n";
  char buf[160];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%ld,%.17g,%.17g,%.17g,%.17g\n", r.step, r.l1, r.kl, r.triplet, r.total);
    os << buf;
  }
  return os.str();
}

std::vector<HistoryRow> read_history(const fs::path& p, long before_step) {
  std::vector<HistoryRow> rows;
  std::ifstream is(p);
  if (!is) return rows;
  std::string line;
  std::getline(is, line);
  while (std::getline(is, line)) {
    HistoryRow r;
    if (std::sscanf(line.c_str(), "%ld,%lf,%lf,%lf,%lf", &r.step, &r.l1, &r.kl, &r.triplet, &r.total) == 5 &&
        r.step < before_step)
      rows.push_back(r);
  }
  return rows;
}

ModelCheckpoint make_checkpoint(const TrainState& st, const LoadedConfig& lc, const TrainConfig& tc, bool trained) {
  ModelCheckpoint ck;
  ck.config = nlohmann::json::parse(lc.bytes);
  ck.config["config_hash"] = lc.hash;
  ck.variant = tc.variant;
  ck.params = st.params;
  ck.optimizer = st.optimizer;
  ck.step = st.step;
  ck.rng_state = Rng(substream_seed(tc.train_seed, 0x455053ULL, static_cast<std::uint64_t>(st.step))).state();
  ck.trained = trained;
  return ck;
}

int cmd_train(const std::string& config, const std::string& corpus_dir, const std::string& out, bool force,
              bool resume, std::optional<long> stop_at, std::optional<std::uint64_t> seed_override) {
  const auto lc = load_run_config(config, seed_override);
  const Corpus corpus = load_corpus_dir(corpus_dir);
  const TrainConfig tc = train_config(lc.config);
  if (out.empty()) throw UsageError("--out is required");
  const fs::path dir(out);
  const fs::path ck_path = dir / "checkpoint.json";

  TrainState st;
  RunManifest m;
  if (resume) {
    if (!fs::exists(ck_path)) throw UsageError("--resume: no checkpoint at " + ck_path.string());
    m = manifest_from_json(detail::read_json_file(dir / "run_manifest.json"));
    if (m.config_hash != lc.hash) throw UsageError("--resume: config differs from the one the run started with");
    auto ck = load_model_checkpoint(ck_path);
    if (ck.variant != tc.variant) throw UsageError("--resume: checkpoint variant does not match the config");
    st.params = std::move(ck.params);
    st.optimizer = std::move(ck.optimizer);
    st.step = ck.step;
    st.history = read_history(dir / "loss_history.csv", st.step);
  } else {
    prepare_out_dir(dir, force);
    st = init_training(corpus, tc);
    m.config_hash = lc.hash;
    m.artifacts["checkpoint"] = "checkpoint.json";
    m.artifacts["loss_history"] = "loss_history.csv";
    m.artifacts["config"] = "config.json";
    write_config_copy(dir, lc);
  }
  m.stages["train"] = "running";
  save_manifest(dir, m);

  const long total = total_steps(corpus, tc);
  const std::size_t every = lc.config.checkpoint_every;
  auto save = [&](const TrainState& s, bool done) {
    save_checkpoint(ck_path, to_json(make_checkpoint(s, lc, tc, done)));
    detail::write_text_atomic(dir / "loss_history.csv", history_csv(s.history));
  };
  if (!resume) save(st, false);
  try {
    run_training(st, corpus, tc, stop_at, [&](const TrainState& s) {
      if (every > 0 && s.step % static_cast<long>(every) == 0 && s.step < total) save(s, false);
    });
  } catch (const NumericError& e) {
    // `st` still holds the parameters from before the failing step.
    detail::write_text_atomic(dir / "loss_history.csv", history_csv(st.history));
    m.stages["train"] = "failed: numeric";
    save_manifest(dir, m);
    std::fprintf(stderr, "error: %s at step %ld; last good checkpoint kept at %s\n", e.what(), st.step,
                 ck_path.c_str());
    return kNumeric;
  }
  const bool done = st.step >= total;
  save(st, done);
  m.stages["train"] = done ? "complete" : "stopped";
  save_manifest(dir, m);
  const auto& last = st.history.empty() ? HistoryRow{} : st.history.back();
  std::printf("%s: step %ld/%ld  l1 %.4f  kl %.4f  triplet %.4f  total %.4f\n", to_string(tc.variant).c_str(),
              st.step, total, last.l1, last.kl, last.triplet, last.total);
  return kOk;
}

// ---------------------------------------------------------------------------

std::size_t parse_utterance(const std::string& s, const Corpus& corpus) {
  std::size_t pos = 0;
  unsigned long long v = 0;
  try {
    v = std::stoull(s, &pos);
  } catch (const std::exception&) {
    throw UsageError("bad utterance index '" + s + "'");
  }
  if (pos != s.size() || v >= corpus.utterances.size()) throw UsageError("utterance index '" + s + "' out of range");
  return static_cast<std::size_t>(v);
}

int cmd_synthesize(const std::string& ck_path, const std::string& mode, const std::string& out, bool force,
                   const std::string& corpus_dir, std::uint64_t seed, std::size_t count, const std::string& ref1,
                   const std::string& ref2, std::vector<double> weights, const std::string& utterance,
                   std::vector<int> contents) {
  if (ck_path.empty()) throw UsageError("--checkpoint is required");
  if (!fs::exists(ck_path)) throw UsageError("no checkpoint at " + ck_path);
  const auto ck = load_model_checkpoint(ck_path);
  const auto& p = ck.params;
  if (contents.empty()) contents = {0};
  for (int c : contents)
    if (c < 0 || static_cast<std::size_t>(c) >= p.dims.n_contents) throw UsageError("content id out of range");

  std::vector<SyntheticProfile> profiles;
  const EvalSystem sys{ck.variant, &p};
  if (mode == "prior") {
    if (count == 0) throw UsageError("--count must be positive");
    if (uses_encoder(ck.variant)) {
      for (std::size_t i = 0; i < count; ++i) profiles.push_back(sample_prior(seed, i, p.dims.latent_dim));
    } else {
      Rng rng(seed);
      for (auto& z : synthetic_profiles(sys, count, rng)) profiles.push_back({std::move(z), PriorSample{seed, 0}});
      for (std::size_t i = 0; i < profiles.size(); ++i) profiles[i].provenance = PriorSample{seed, i};
    }
  } else if (mode == "interpolate") {
    if (ref1.empty() || ref2.empty()) throw UsageError("interpolate needs --ref1 and --ref2 utterance indices");
    const Corpus corpus = load_corpus_dir(corpus_dir);
    const std::size_t a = parse_utterance(ref1, corpus), b = parse_utterance(ref2, corpus);
    if (weights.empty()) weights = EvalConfig{}.interpolation_grid;
    const SyntheticProfile p1{profile_of(sys, corpus, a), Encoded{"utt:" + ref1}};
    const SyntheticProfile p2{profile_of(sys, corpus, b), Encoded{"utt:" + ref2}};
    for (double w : weights) {
      if (!(w >= 0.0 && w <= 1.0)) throw UsageError("--weights must lie in [0, 1]");
      profiles.push_back(interpolate_profiles(p1, "utt:" + ref1, p2, "utt:" + ref2, w));
    }
  } else if (mode == "encode") {
    if (utterance.empty()) throw UsageError("encode needs --utterance");
    const Corpus corpus = load_corpus_dir(corpus_dir);
    const std::size_t u = parse_utterance(utterance, corpus);
    if (uses_encoder(ck.variant)) {
      profiles.push_back(encode_profile(p, corpus.utterances[u], "utt:" + utterance));
    } else {
      profiles.push_back({profile_of(sys, corpus, u), Encoded{"utt:" + utterance}});
    }
  } else {
    throw UsageError("--mode must be prior, interpolate or encode");
  }

  if (out.empty()) throw UsageError("--out is required");
  prepare_out_dir(out, force);
  nlohmann::json j = {{"checkpoint_digest", hex64(parameter_digest(p))},
                      {"variant", to_string(ck.variant)},
                      {"mode", mode},
                      {"contents", contents},
                      {"profiles", nlohmann::json::array()}};
  fs::create_directories(fs::path(out) / "frames");
  for (std::size_t i = 0; i < profiles.size(); ++i) {
    auto pj = to_json(profiles[i]);
    pj["frames"] = nlohmann::json::array();
    for (int c : contents) {
      char name[48];
      std::snprintf(name, sizeof name, "p%04zu_c%02d.bin", i, c);
      write_frames(fs::path(out) / "frames" / name, decode(p, profiles[i].z, c));
      pj["frames"].push_back(std::string("frames/") + name);
    }
    j["profiles"].push_back(std::move(pj));
  }
  detail::write_text_atomic(fs::path(out) / "profiles.json", j.dump(1) + "\n");
  RunManifest m;
  m.config_hash = ck.config.value("config_hash", std::string());
  m.stages["synthesize"] = "complete";
  m.artifacts["profiles"] = "profiles.json";
  m.artifacts["frames"] = "frames/";
  save_manifest(out, m);
  std::printf("wrote %zu profiles x %zu contents to %s\n", profiles.size(), contents.size(), out.c_str());
  return kOk;
}

// ---------------------------------------------------------------------------

void print_report_summary(const nlohmann::json& rep) {
  auto cell = [](const nlohmann::json& x) { return x.is_null() ? std::string("   n/a") : std::to_string(x.get<double>()); };
  std::printf("verifier held-out EER %.4f, content probe held-out error %.4f\n",
              rep.at("verifier").at("held_out_eer").get<double>(),
              rep.at("content_probe").at("held_out_error").get<double>());
  std::printf("normalized FAR (percentiles");
  for (const auto& p : rep.at("config").at("percentiles")) std::printf(" %g", p.get<double>());
  std::printf(")\n");
  for (const auto& s : rep.at("systems")) {
    std::printf("  %-22s", s.get<std::string>().c_str());
    for (const auto& x : rep.at("far_table").at("normalized").at(s.get<std::string>())) std::printf(" %s", cell(x).c_str());
    std::printf("\n");
  }
  std::printf("normalized intelligibility-proxy error (profiles");
  for (const auto& k : rep.at("config").at("profile_counts")) std::printf(" %zu", k.get<std::size_t>());
  std::printf(")\n");
  for (const auto& s : rep.at("systems")) {
    std::printf("  %-22s", s.get<std::string>().c_str());
    for (const auto& x : rep.at("intelligibility_table").at("normalized").at(s.get<std::string>()))
      std::printf(" %s", cell(x).c_str());
    std::printf("\n");
  }
  for (const auto& [name, d] : rep.at("disentanglement").items())
    std::printf("  %-22s speaker R2 %.4f  content accuracy %.4f\n", name.c_str(), d.at("speaker_r2").get<double>(),
                d.at("content_accuracy").get<double>());
}

int cmd_eval(const std::string& config, const std::string& corpus_dir, const std::string& runs,
             const std::vector<std::string>& system_args, const std::string& verifier_path, const std::string& out,
             bool force, std::optional<std::uint64_t> seed_override) {
  const auto lc = load_run_config(config, seed_override);
  const Corpus corpus = load_corpus_dir(corpus_dir);

  std::map<SystemVariant, std::string> paths;
  if (!runs.empty())
    for (auto v : all_variants()) {
      const fs::path p = fs::path(runs) / to_string(v) / "checkpoint.json";
      if (fs::exists(p)) paths[v] = p.string();
    }
  for (const auto& s : system_args) {
    const auto eq = s.find('=');
    if (eq == std::string::npos) throw UsageError("--system expects NAME=PATH, got '" + s + "'");
    try {
      paths[variant_from_string(s.substr(0, eq))] = s.substr(eq + 1);
    } catch (const ConfigError& e) {
      throw UsageError(e.what());
    }
  }
  std::string missing;
  for (auto v : all_variants())
    if (!paths.count(v) || !fs::exists(paths[v])) missing += (missing.empty() ? "" : ", ") + to_string(v);
  if (!missing.empty()) throw UsageError("missing checkpoints for: " + missing);

  std::map<SystemVariant, ModelCheckpoint> cks;
  for (const auto& [v, path] : paths) {
    auto ck = load_model_checkpoint(path);
    if (ck.variant != v) throw UsageError(path + " holds variant " + to_string(ck.variant) + ", expected " + to_string(v));
    if (!ck.trained) throw UsageError(path + " is not fully trained");
    cks.emplace(v, std::move(ck));
  }
  if (out.empty()) throw UsageError("--out is required");
  prepare_out_dir(out, force);
  RunManifest m;
  m.config_hash = lc.hash;
  m.stages["eval"] = "running";
  for (const auto& [v, path] : paths) m.artifacts["checkpoint:" + to_string(v)] = fs::absolute(path).string();
  for (const char* a : {"report.json", "far_table.csv", "intelligibility_table.csv", "similarity_curve.csv",
                        "similarity_curve.svg", "trial_scores.csv", "curve_embeddings.csv", "verifier.json"})
    m.artifacts[a] = a;
  save_manifest(out, m);
  write_config_copy(out, lc);

  VerifierParams verifier;
  if (!verifier_path.empty()) {
    verifier = load_verifier_checkpoint(verifier_path).params;
  } else {
    verifier = train_verifier(corpus, lc.config.verifier_seed, verifier_config(lc.config));
  }
  VerifierCheckpoint vck;
  vck.config = nlohmann::json::parse(lc.bytes);
  vck.verifier_config = verifier_config(lc.config);
  vck.seed = lc.config.verifier_seed;
  vck.params = verifier;
  save_checkpoint(fs::path(out) / "verifier.json", to_json(vck));

  const ContentProbe probe = train_content_probe(corpus, lc.config.eval.probe_ridge, lc.config.eval.probe_min_accuracy);
  EvalInputs in;
  in.corpus = &corpus;
  in.verifier = &verifier;
  in.probe = &probe;
  for (const auto& [v, ck] : cks) in.systems[v] = &ck.params;
  in.cfg = lc.config.eval;
  in.eval_seed = lc.config.eval_seed;
  const EvalOutput res = run_evaluation(in);
  write_report(out, res);
  m.stages["eval"] = "complete";
  save_manifest(out, m);
  print_report_summary(res.report);
  return kOk;
}

int cmd_report(const std::string& in, const std::string& out) {
  if (in.empty()) throw UsageError("--in is required");
  const fs::path src = fs::path(in) / "report.json";
  if (!fs::exists(src)) throw UsageError("no report.json in " + in);
  const auto rep = detail::read_json_file(src);
  const fs::path dst = out.empty() ? fs::path(in) : fs::path(out);
  fs::create_directories(dst);
  write_report_views(dst, rep);
  print_report_summary(rep);
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Speaker-profile VAE toolkit: corpus, training, synthesis, evaluation"};
  app.require_subcommand(1);
  std::string config, out, corpus_dir;
  bool force = false;
  std::optional<std::uint64_t> seed_override;
  auto common = [&](CLI::App* sc, bool with_config) {
    if (with_config) sc->add_option("--config", config, "run config (flat JSON)");
    sc->add_option("--out", out, "output directory");
    sc->add_flag("--force", force, "overwrite an existing output directory written by this tool");
    if (with_config) sc->add_option("--seed-override", seed_override, "add this value to every seed in the config");
  };

  auto* gen = app.add_subcommand("gen-corpus", "generate the synthetic corpus");
  common(gen, true);

  auto* train = app.add_subcommand("train", "train one system variant");
  common(train, true);
  bool resume = false;
  std::optional<long> stop_at;
  train->add_option("--corpus", corpus_dir, "corpus directory");
  train->add_flag("--resume", resume, "continue from the checkpoint in --out");
  train->add_option("--stop-at", stop_at, "stop after this many steps (checkpoint is marked unfinished)");

  auto* syn = app.add_subcommand("synthesize", "create synthetic speaker profiles and decode them");
  common(syn, false);
  std::string ck_path, mode = "prior", ref1, ref2, utterance;
  std::uint64_t seed = 0;
  std::size_t count = 10;
  std::vector<double> weights;
  std::vector<int> contents;
  syn->add_option("--checkpoint", ck_path, "model checkpoint");
  syn->add_option("--mode", mode, "prior | interpolate | encode");
  syn->add_option("--corpus", corpus_dir, "corpus directory (interpolate, encode)");
  syn->add_option("--seed", seed, "prior sampling seed");
  syn->add_option("--count", count, "number of prior samples");
  syn->add_option("--ref1", ref1, "first reference utterance index");
  syn->add_option("--ref2", ref2, "second reference utterance index");
  syn->add_option("--weights", weights, "interpolation weights w (z = w z1 + (1 - w) z2)");
  syn->add_option("--utterance", utterance, "utterance index to encode");
  syn->add_option("--contents", contents, "content ids to decode");

  auto* ev = app.add_subcommand("eval", "evaluate all four systems and write the report");
  common(ev, true);
  std::string runs, verifier_path;
  std::vector<std::string> systems;
  ev->add_option("--corpus", corpus_dir, "corpus directory");
  ev->add_option("--runs", runs, "directory with one <variant>/checkpoint.json per system");
  ev->add_option("--system", systems, "NAME=PATH checkpoint for one variant (repeatable)");
  ev->add_option("--verifier", verifier_path, "verifier checkpoint; trained from the config when absent");

  auto* rep = app.add_subcommand("report", "rebuild CSV and SVG views from report.json");
  std::string rep_in;
  rep->add_option("--in", rep_in, "evaluation output directory");
  rep->add_option("--out", out, "where to write the views (default: --in)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kUsage;
  }

  try {
    if (*gen) return cmd_gen_corpus(config, out, force, seed_override);
    if (*train) return cmd_train(config, corpus_dir, out, force, resume, stop_at, seed_override);
    if (*syn)
      return cmd_synthesize(ck_path, mode, out, force, corpus_dir, seed, count, ref1, ref2, weights, utterance,
                            contents);
    if (*ev) return cmd_eval(config, corpus_dir, runs, systems, verifier_path, out, force, seed_override);
    if (*rep) return cmd_report(rep_in, out);
  } catch (const ConflictError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kConflict;
  } catch (const UsageError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kUsage;
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return kUsage;
  } catch (const CheckpointError& e) {
    std::fprintf(stderr, "checkpoint error: %s\n", e.what());
    return kUsage;
  } catch (const DomainError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kUsage;
  } catch (const NumericError& e) {
    std::fprintf(stderr, "numeric error: %s\n", e.what());
    return kNumeric;
  } catch (const TrainingError& e) {
    std::fprintf(stderr, "training error: %s\n", e.what());
    return kNumeric;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return kUsage;
}
