#pragma once

// Full evaluation of the four systems and the report files built from it.
// Everything in report.json is a function of the checkpoints, the corpus and
// the seeds; no timings or paths leak in, so reruns are byte-identical.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <nlohmann/json.hpp>
#include <sstream>
#include <string>
#include <vector>

#include "spkprof/checkpoint.hpp"
#include "spkprof/metrics.hpp"

namespace spkprof {

inline constexpr int kReportFormat = 1;

struct EvalInputs {
  const Corpus* corpus = nullptr;
  const VerifierParams* verifier = nullptr;
  const ContentProbe* probe = nullptr;
  std::map<SystemVariant, const ModelParams*> systems;
  EvalConfig cfg;
  std::uint64_t eval_seed = 0;
};

/// Raw trial scores kept next to the report so every number can be recomputed.
struct TrialDump {
  std::vector<double> genuine;
  // (system, eval seed index) -> synthetic pair scores
  std::map<std::pair<std::string, std::size_t>, std::vector<double>> synthetic;
  // (system, pair) -> embeddings along the grid, aligned with interpolation_grid
  std::map<std::pair<std::string, std::size_t>, std::vector<Vec>> curve_embeddings;
};

struct EvalOutput {
  nlohmann::json report;
  TrialDump dump;
};

inline std::uint64_t eval_seed_at(std::uint64_t eval_seed, std::size_t i) { return substream_seed(eval_seed, 0x5345ULL, i); }

namespace detail {

inline nlohmann::json number_or_null(double x) { return std::isfinite(x) ? nlohmann::json(x) : nlohmann::json(nullptr); }

inline nlohmann::json row_json(const std::vector<double>& row) {
  nlohmann::json a = nlohmann::json::array();
  for (double x : row) a.push_back(number_or_null(x));
  return a;
}

/// Normalizes by the baseline row; a zero baseline cell leaves that column undefined.
inline std::map<std::string, std::vector<double>> normalize_table(const std::map<std::string, std::vector<double>>& raw,
                                                                  const std::string& baseline,
                                                                  std::vector<std::string>& notes) {
  const auto& base = raw.at(baseline);
  std::map<std::string, std::vector<double>> out;
  for (const auto& [name, row] : raw) {
    std::vector<double> r(row.size());
    for (std::size_t j = 0; j < row.size(); ++j) {
      if (name == baseline) {
        r[j] = base[j] > 0.0 ? 1.0 : std::numeric_limits<double>::quiet_NaN();
      } else {
        r[j] = base[j] > 0.0 ? row[j] / base[j] : std::numeric_limits<double>::quiet_NaN();
      }
    }
    out[name] = std::move(r);
  }
  for (std::size_t j = 0; j < base.size(); ++j)
    if (!(base[j] > 0.0)) notes.push_back("baseline cell " + std::to_string(j) + " is zero; column not normalizable");
  return out;
}

inline std::vector<double> column_medians(const std::vector<std::vector<double>>& rows) {
  std::vector<double> m(rows.front().size());
  for (std::size_t j = 0; j < m.size(); ++j) {
    std::vector<double> col;
    for (const auto& r : rows) col.push_back(r[j]);
    m[j] = median(col);
  }
  return m;
}

}  // namespace detail

inline EvalOutput run_evaluation(const EvalInputs& in) {
  validate(in.cfg);
  for (auto v : all_variants())
    if (!in.systems.count(v) || !in.systems.at(v)) throw ContractError("evaluation needs system " + to_string(v));
  const Corpus& corpus = *in.corpus;
  const auto& cfg = in.cfg;
  const std::string base = to_string(SystemVariant::baseline_lookup);
  EvalOutput out;
  auto& rep = out.report;
  std::vector<std::string> notes;

  out.dump.genuine = natural_genuine_scores(*in.verifier, corpus, corpus.held_out_utterances());
  std::vector<std::uint64_t> seeds;
  for (std::size_t i = 0; i < cfg.n_eval_seeds; ++i) seeds.push_back(eval_seed_at(in.eval_seed, i));

  // Distinctiveness and intelligibility, per eval seed.
  std::map<std::string, std::vector<std::vector<double>>> far_runs, intel_runs;
  std::vector<double> thresholds;
  for (std::size_t i = 0; i < seeds.size(); ++i) {
    for (auto v : all_variants()) {
      const EvalSystem sys{v, in.systems.at(v)};
      auto d = eval_distinctiveness(sys, *in.verifier, out.dump.genuine, cfg, seeds[i]);
      thresholds = d.thresholds;
      far_runs[to_string(v)].push_back(d.far);
      out.dump.synthetic[{to_string(v), i}] = std::move(d.synthetic_scores);
      std::vector<double> ie;
      for (std::size_t k : cfg.profile_counts)
        ie.push_back(eval_intelligibility_proxy(sys, *in.probe, corpus, k, seeds[i], cfg.baseline_sampling));
      intel_runs[to_string(v)].push_back(ie);
    }
  }
  std::map<std::string, std::vector<double>> far_raw, intel_raw;
  for (const auto& [name, runs] : far_runs) far_raw[name] = detail::column_medians(runs);
  for (const auto& [name, runs] : intel_runs) intel_raw[name] = detail::column_medians(runs);
  const auto far_norm = detail::normalize_table(far_raw, base, notes);
  const auto intel_norm = detail::normalize_table(intel_raw, base, notes);

  // Interpolation curves over shared cross-speaker pairs.
  Rng pair_rng(substream_seed(in.eval_seed, 0x50414952ULL));
  const auto pairs = cross_speaker_pairs(corpus, cfg.n_interpolation_pairs, pair_rng);
  nlohmann::json curves = nlohmann::json::object();
  for (auto v : all_variants()) {
    const EvalSystem sys{v, in.systems.at(v)};
    nlohmann::json per_pair = nlohmann::json::array();
    std::vector<double> mean(cfg.interpolation_grid.size(), 0.0);
    for (std::size_t p = 0; p < pairs.size(); ++p) {
      const auto [a, b] = pairs[p];
      const Vec z1 = profile_of(sys, corpus, a);
      const Vec z2 = profile_of(sys, corpus, b);
      const int content = corpus.utterances[a].content_id;
      std::vector<Vec> emb;
      for (double w : cfg.interpolation_grid) emb.push_back(embed(*in.verifier, decode(*sys.params, interpolate(z1, z2, w), content)));
      const Vec ref = embed(*in.verifier, decode(*sys.params, z1, content));
      std::vector<CurvePoint> curve;
      for (std::size_t g = 0; g < emb.size(); ++g) curve.push_back({cfg.interpolation_grid[g], cosine_similarity(emb[g], ref)});
      nlohmann::json scores = nlohmann::json::array();
      for (std::size_t g = 0; g < curve.size(); ++g) {
        scores.push_back(curve[g].score);
        mean[g] += curve[g].score / static_cast<double>(pairs.size());
      }
      per_pair.push_back({{"utt1", a}, {"utt2", b}, {"scores", scores},
                          {"max_adjacent_drop", max_adjacent_drop(curve)},
                          {"max_adjacent_rise", max_adjacent_rise(curve)}});
      emb.push_back(ref);
      out.dump.curve_embeddings[{to_string(v), p}] = std::move(emb);
    }
    curves[to_string(v)] = {{"mean", mean}, {"pairs", per_pair}};
  }

  // Disentanglement of the encoder systems.
  nlohmann::json dis = nlohmann::json::object();
  for (auto v : all_variants()) {
    if (!uses_encoder(v)) continue;
    const auto r = disentanglement_probe(*in.systems.at(v), corpus, cfg.probe_ridge);
    dis[to_string(v)] = {{"speaker_r2", r.speaker_r2}, {"content_accuracy", r.content_accuracy}, {"collapsed", r.collapsed}};
  }

  rep["format_version"] = kReportFormat;
  rep["eval_seed"] = in.eval_seed;
  rep["eval_seeds"] = seeds;
  rep["config"] = {{"n_synthetic_profiles", cfg.n_synthetic_profiles},
                   {"percentiles", cfg.percentiles},
                   {"interpolation_grid", cfg.interpolation_grid},
                   {"profile_counts", cfg.profile_counts},
                   {"n_eval_seeds", cfg.n_eval_seeds},
                   {"n_interpolation_pairs", cfg.n_interpolation_pairs},
                   {"baseline_sampling", cfg.baseline_sampling == BaselineSampling::table_rows ? "table_rows"
                                                                                             : "fitted_gaussian"}};
  rep["systems"] = nlohmann::json::array();
  for (auto v : all_variants()) rep["systems"].push_back(to_string(v));
  rep["baseline"] = base;
  rep["verifier"] = {{"held_out_eer", in.verifier->held_out_eer}, {"n_genuine_trials", out.dump.genuine.size()}};
  rep["content_probe"] = {{"held_out_error", in.probe->held_out_error}};
  rep["thresholds"] = thresholds;

  nlohmann::json ft = {{"raw", nlohmann::json::object()}, {"normalized", nlohmann::json::object()},
                       {"per_seed", nlohmann::json::object()}};
  nlohmann::json it = ft;
  for (auto v : all_variants()) {
    const auto n = to_string(v);
    ft["raw"][n] = detail::row_json(far_raw[n]);
    ft["normalized"][n] = detail::row_json(far_norm.at(n));
    it["raw"][n] = detail::row_json(intel_raw[n]);
    it["normalized"][n] = detail::row_json(intel_norm.at(n));
    ft["per_seed"][n] = nlohmann::json::array();
    it["per_seed"][n] = nlohmann::json::array();
    for (const auto& r : far_runs[n]) ft["per_seed"][n].push_back(detail::row_json(r));
    for (const auto& r : intel_runs[n]) it["per_seed"][n].push_back(detail::row_json(r));
  }
  rep["far_table"] = ft;
  rep["intelligibility_table"] = it;
  rep["similarity_curve"] = curves;
  rep["disentanglement"] = dis;
  rep["notes"] = notes;
  return out;
}

// ---------------------------------------------------------------------------
// Files

namespace detail {

inline std::string fmt17(double x) {
  if (!std::isfinite(x)) return "nan";
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

inline std::string fmt_json_cell(const nlohmann::json& x) { return x.is_null() ? "nan" : fmt17(x.get<double>()); }

}  // namespace detail

inline std::string far_table_csv(const nlohmann::json& rep) {
  std::ostringstream os;
  os << "system";
  for (double p : rep.at("config").at("percentiles")) os << ",p" << detail::fmt17(p) << "_raw";
  for (double p : rep.at("config").at("percentiles")) os << ",p" << detail::fmt17(p) << "_normalized";
  os << "\n";
  for (const auto& s : rep.at("systems")) {
    const auto name = s.get<std::string>();
    os << name;
    for (const auto& x : rep.at("far_table").at("raw").at(name)) os << ',' << detail::fmt_json_cell(x);
    for (const auto& x : rep.at("far_table").at("normalized").at(name)) os << ',' << detail::fmt_json_cell(x);
    os << "\n";
  }
  return os.str();
}

inline std::string intelligibility_csv(const nlohmann::json& rep) {
  std::ostringstream os;
  os << "system";
  for (const auto& k : rep.at("config").at("profile_counts")) os << ",k" << k.get<std::size_t>() << "_raw";
  for (const auto& k : rep.at("config").at("profile_counts")) os << ",k" << k.get<std::size_t>() << "_normalized";
  os << "\n";
  for (const auto& s : rep.at("systems")) {
    const auto name = s.get<std::string>();
    os << name;
    for (const auto& x : rep.at("intelligibility_table").at("raw").at(name)) os << ',' << detail::fmt_json_cell(x);
    for (const auto& x : rep.at("intelligibility_table").at("normalized").at(name)) os << ',' << detail::fmt_json_cell(x);
    os << "\n";
  }
  return os.str();
}

inline std::string similarity_curve_csv(const nlohmann::json& rep) {
  std::ostringstream os;
  os << "system,pair,w,score\n";
  const auto& grid = rep.at("config").at("interpolation_grid");
  for (const auto& s : rep.at("systems")) {
    const auto name = s.get<std::string>();
    const auto& c = rep.at("similarity_curve").at(name);
    for (std::size_t g = 0; g < grid.size(); ++g)
      os << name << ",mean," << detail::fmt17(grid[g].get<double>()) << ',' << detail::fmt17(c.at("mean")[g].get<double>()) << "\n";
    for (std::size_t p = 0; p < c.at("pairs").size(); ++p)
      for (std::size_t g = 0; g < grid.size(); ++g)
        os << name << ',' << p << ',' << detail::fmt17(grid[g].get<double>()) << ','
           << detail::fmt17(c.at("pairs")[p].at("scores")[g].get<double>()) << "\n";
  }
  return os.str();
}

/// Mean similarity curve per system as a standalone SVG line plot.
inline std::string similarity_curve_svg(const nlohmann::json& rep) {
  const double W = 640, H = 420, L = 70, R = 170, T = 30, B = 60;
  const double pw = W - L - R, ph = H - T - B;
  const auto& grid = rep.at("config").at("interpolation_grid");
  double lo = 1.0;
  for (const auto& s : rep.at("systems"))
    for (const auto& y : rep.at("similarity_curve").at(s.get<std::string>()).at("mean")) lo = std::min(lo, y.get<double>());
  lo = std::floor(std::min(lo, 0.0) * 10.0) / 10.0;
  const double hi = 1.0;
  auto X = [&](double w) { return L + w * pw; };
  auto Y = [&](double y) { return T + (hi - y) / (hi - lo) * ph; };
  static const char* colors[] = {"#d62728", "#1f77b4", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"};

  std::ostringstream os;
  os.setf(std::ios::fixed);
  os.precision(2);
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\" viewBox=\"0 0 " << W
     << ' ' << H << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  os << "<rect x=\"0\" y=\"0\" width=\"" << W << "\" height=\"" << H << "\" fill=\"white\"/>\n";
  os << "<line x1=\"" << L << "\" y1=\"" << T + ph << "\" x2=\"" << L + pw << "\" y2=\"" << T + ph << "\" stroke=\"black\"/>\n";
  os << "<line x1=\"" << L << "\" y1=\"" << T << "\" x2=\"" << L << "\" y2=\"" << T + ph << "\" stroke=\"black\"/>\n";
  for (int i = 0; i <= 10; ++i) {
    const double w = i / 10.0;
    os << "<line x1=\"" << X(w) << "\" y1=\"" << T + ph << "\" x2=\"" << X(w) << "\" y2=\"" << T + ph + 5
       << "\" stroke=\"black\"/>\n";
    os << "<text x=\"" << X(w) << "\" y=\"" << T + ph + 18 << "\" text-anchor=\"middle\">" << w << "</text>\n";
  }
  const int nticks = static_cast<int>(std::lround((hi - lo) / 0.1));
  for (int i = 0; i <= nticks; i += std::max(1, nticks / 10)) {
    const double y = lo + 0.1 * i;
    os << "<line x1=\"" << L - 5 << "\" y1=\"" << Y(y) << "\" x2=\"" << L << "\" y2=\"" << Y(y) << "\" stroke=\"black\"/>\n";
    os << "<text x=\"" << L - 8 << "\" y=\"" << Y(y) + 4 << "\" text-anchor=\"end\">" << y << "</text>\n";
  }
  os << "<text x=\"" << L + pw / 2 << "\" y=\"" << H - 15 << "\" text-anchor=\"middle\">w</text>\n";
  os << "<text x=\"18\" y=\"" << T + ph / 2 << "\" text-anchor=\"middle\" transform=\"rotate(-90 18 " << T + ph / 2
     << ")\">cosine similarity</text>\n";
  std::size_t k = 0;
  for (const auto& s : rep.at("systems")) {
    const auto name = s.get<std::string>();
    const auto& mean = rep.at("similarity_curve").at(name).at("mean");
    const char* col = colors[k % 6];
    os << "<polyline fill=\"none\" stroke=\"" << col << "\" stroke-width=\"2\" points=\"";
    for (std::size_t g = 0; g < grid.size(); ++g)
      os << (g ? " " : "") << X(grid[g].get<double>()) << ',' << Y(mean[g].get<double>());
    os << "\"/>\n";
    const double ly = T + 10 + 18.0 * static_cast<double>(k);
    os << "<line x1=\"" << L + pw + 15 << "\" y1=\"" << ly << "\" x2=\"" << L + pw + 35 << "\" y2=\"" << ly
       << "\" stroke=\"" << col << "\" stroke-width=\"2\"/>\n";
    os << "<text x=\"" << L + pw + 40 << "\" y=\"" << ly + 4 << "\">" << name << "</text>\n";
    ++k;
  }
  os << "</svg>\n";
  return os.str();
}

inline std::string trial_scores_csv(const TrialDump& d) {
  std::ostringstream os;
  os << "kind,system,seed_index,score\n";
  for (double s : d.genuine) os << "genuine,natural,0," << detail::fmt17(s) << "\n";
  for (const auto& [key, scores] : d.synthetic)
    for (double s : scores) os << "synthetic," << key.first << ',' << key.second << ',' << detail::fmt17(s) << "\n";
  return os.str();
}

/// One row per curve point; the last row of each pair (w = "ref") is the w = 1 reference.
inline std::string curve_embeddings_csv(const TrialDump& d, const std::vector<double>& grid) {
  std::ostringstream os;
  os << "system,pair,w,embedding\n";
  for (const auto& [key, embs] : d.curve_embeddings)
    for (std::size_t g = 0; g < embs.size(); ++g) {
      os << key.first << ',' << key.second << ',' << (g < grid.size() ? detail::fmt17(grid[g]) : std::string("ref")) << ',';
      for (std::size_t i = 0; i < embs[g].size(); ++i) os << (i ? " " : "") << detail::fmt17(embs[g][i]);
      os << "\n";
    }
  return os.str();
}

/// Derived files that depend on report.json alone.
inline void write_report_views(const std::filesystem::path& dir, const nlohmann::json& rep) {
  detail::write_text_atomic(dir / "far_table.csv", far_table_csv(rep));
  detail::write_text_atomic(dir / "intelligibility_table.csv", intelligibility_csv(rep));
  detail::write_text_atomic(dir / "similarity_curve.csv", similarity_curve_csv(rep));
  detail::write_text_atomic(dir / "similarity_curve.svg", similarity_curve_svg(rep));
}

inline void write_report(const std::filesystem::path& dir, const EvalOutput& out) {
  detail::write_text_atomic(dir / "report.json", out.report.dump(2) + "\n");
  detail::write_text_atomic(dir / "trial_scores.csv", trial_scores_csv(out.dump));
  detail::write_text_atomic(dir / "curve_embeddings.csv",
                            curve_embeddings_csv(out.dump, out.report.at("config").at("interpolation_grid").get<std::vector<double>>()));
  write_report_views(dir, out.report);
}

}  // namespace spkprof
