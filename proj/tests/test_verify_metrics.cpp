#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "spkprof/metrics.hpp"
#include "spkprof/report.hpp"
#include "spkprof/training.hpp"
#include "spkprof/verify.hpp"
#include "support.hpp"

using namespace spkprof;

namespace {

const Corpus& small_corpus() {
  static const Corpus c = split_speakers(generate_corpus(16, 8, 31), 0.25, 32);
  return c;
}

const VerifierParams& small_verifier() {
  static const VerifierParams v = [] {
    VerifierConfig cfg;
    cfg.epochs = 15;
    return train_verifier(small_corpus(), 33, cfg);
  }();
  return v;
}

TrialSet impostors(std::vector<double> s) {
  TrialSet t;
  for (double x : s) t.trials.push_back({x, false});
  return t;
}

}  // namespace

// --- scoring primitives ------------------------------------------------------------

TEST(Cosine, ClosedFormCases) {
  EXPECT_EQ(cosine_similarity(Vec{1, 2, 3}, Vec{1, 2, 3}), 1.0);
  EXPECT_EQ(cosine_similarity(Vec{1, 0}, Vec{0, 5}), 0.0);
  EXPECT_NEAR(cosine_similarity(Vec{1, -2}, Vec{-1, 2}), -1.0, 1e-15);
  EXPECT_THROW(cosine_similarity(Vec{0, 0}, Vec{1, 0}), DomainError);
}

TEST(Cosine, ScaleInvariant) {
  Rng rng(1);
  for (int k = 0; k < 100; ++k) {
    const Vec a = rng.normal_vector(16), b = rng.normal_vector(16);
    Vec ca = a;
    const double c = 1e-3 + 10 * rng.uniform();
    for (double& x : ca) x *= c;
    EXPECT_NEAR(cosine_similarity(a, b), cosine_similarity(ca, b), 1e-12);
  }
}

TEST(Far, CountArithmetic) {
  const auto t = impostors({0.1, 0.3, 0.6, 0.9});
  EXPECT_EQ(far_at_threshold(t, 0.5), 0.5);
  EXPECT_EQ(far_at_threshold(t, 0.95), 0.0);
  EXPECT_EQ(far_at_threshold(t, 0.1), 1.0);
  EXPECT_EQ(far_at_threshold(t, -1.0), 1.0);
}

TEST(Far, NonIncreasingInThreshold) {
  Rng rng(2);
  TrialSet t;
  for (int k = 0; k < 300; ++k) t.trials.push_back({rng.uniform(-1, 1), rng.index(2) == 0});
  double prev = 1.0;
  for (double th = -1.0; th <= 1.0; th += 0.01) {
    const double f = far_at_threshold(t, th);
    EXPECT_LE(f, prev);
    prev = f;
  }
}

TEST(Far, NoImpostorTrialsIsDomainError) {
  TrialSet t;
  t.trials.push_back({0.5, true});
  EXPECT_THROW(far_at_threshold(t, 0.0), DomainError);
}

TEST(Percentile, NearestRank) {
  const std::vector<double> s{1.0, 0.4, 0.8, 0.2, 0.6};
  EXPECT_EQ(threshold_from_percentile(s, 60), 0.6);
  EXPECT_EQ(threshold_from_percentile(s, 99.9), 1.0);
  EXPECT_EQ(threshold_from_percentile(std::vector<double>(7, 0.25), 70), 0.25);
  EXPECT_THROW(threshold_from_percentile({}, 60), DomainError);
}

TEST(Eer, SeparatedClassesGiveZero) {
  TrialSet t;
  for (double s : {0.9, 0.8, 0.95}) t.trials.push_back({s, true});
  for (double s : {0.1, 0.2, 0.3}) t.trials.push_back({s, false});
  EXPECT_EQ(equal_error_rate(t), 0.0);
}

// --- trained verifier ---------------------------------------------------------------

TEST(Verifier, HeldOutEerBelowTenPercent) { EXPECT_LT(small_verifier().held_out_eer, 0.10); }

TEST(Verifier, EerOnTrainSpeakersBelowThreshold) {
  const auto& v = small_verifier();
  const auto utts = small_corpus().utterances_of(v.train_speakers);
  EXPECT_LT(equal_error_rate(natural_trials(v, small_corpus(), utts)), 0.10);
}

TEST(Verifier, EmbeddingsAreUnitNorm) {
  for (const auto& u : small_corpus().utterances)
    EXPECT_NEAR(squared_norm(embed(small_verifier(), u.frames)), 1.0, 1e-10);
}

TEST(Verifier, SameSpeakerScoresHigherOnAverage) {
  const auto t = natural_trials(small_verifier(), small_corpus(), small_corpus().held_out_utterances());
  auto mean = [](const std::vector<double>& v) { return std::accumulate(v.begin(), v.end(), 0.0) / v.size(); };
  EXPECT_GT(mean(t.scores(true)), mean(t.scores(false)));
}

TEST(Verifier, SameSeedSameParameters) {
  VerifierConfig cfg;
  cfg.epochs = 15;
  EXPECT_EQ(train_verifier(small_corpus(), 33, cfg), small_verifier());
}

TEST(Verifier, SplitIsIndependentOfCorpusSplit) {
  const auto& v = small_verifier();
  EXPECT_FALSE(v.held_out_speakers.empty());
  EXPECT_NE(v.held_out_speakers, small_corpus().held_out_speakers);
}

TEST(Verifier, NeedsEightSpeakers) {
  const Corpus c = split_speakers(generate_corpus(6, 4, 1), 0.2, 1);
  EXPECT_THROW(train_verifier(c, 1), ConfigError);
}

TEST(Verifier, UnreachableEerIsTrainingError) {
  VerifierConfig cfg;
  cfg.epochs = 0;
  cfg.max_eer = 0.0;
  EXPECT_THROW(train_verifier(small_corpus(), 1, cfg), TrainingError);
}

// --- distinctiveness -----------------------------------------------------------------

// A decoder whose weights are all zero emits its last bias for every profile
// and content, so every synthetic pair scores exactly 1.
TEST(Distinctiveness, ConstantOutputSystemHasFarOne) {
  const Corpus& c = small_corpus();
  ModelParams p = make_model(dims_for_corpus(c, ModelDims{}), c.train_speakers, 4);
  for (auto& l : p.decoder) {
    std::fill(l.weights.flat().begin(), l.weights.flat().end(), 0.0);
    std::fill(l.bias.begin(), l.bias.end(), 0.0);
  }
  Rng rng(8);
  p.decoder.back().bias = rng.normal_vector(p.decoder.back().bias.size());
  const auto genuine = natural_genuine_scores(small_verifier(), c, c.held_out_utterances());
  EvalConfig cfg;
  cfg.n_synthetic_profiles = 12;
  for (auto v : {SystemVariant::vae, SystemVariant::baseline_lookup}) {
    const auto d = eval_distinctiveness({v, &p}, small_verifier(), genuine, cfg, 1);
    for (double t : d.thresholds) ASSERT_LT(t, 1.0 - 1e-9);
    for (double s : d.synthetic_scores) EXPECT_NEAR(s, 1.0, 1e-12);
    for (double f : d.far) EXPECT_EQ(f, 1.0);
  }
}

TEST(Distinctiveness, HandEnumeratedThreeProfiles) {
  const std::vector<Vec> e{{1, 0}, {0.6, 0.8}, {0, 1}};
  const auto s = pairwise_scores(e);
  ASSERT_EQ(s.size(), 3u);
  EXPECT_NEAR(s[0], 0.6, 1e-15);
  EXPECT_NEAR(s[1], 0.0, 1e-15);
  EXPECT_NEAR(s[2], 0.8, 1e-15);
  EXPECT_DOUBLE_EQ(far_of_scores(s, 0.5), 2.0 / 3.0);
  EXPECT_DOUBLE_EQ(far_of_scores(s, 0.7), 1.0 / 3.0);
}

TEST(Distinctiveness, UntrainedSystemIsContractError) {
  const Corpus& c = small_corpus();
  ModelParams p = make_model(dims_for_corpus(c, ModelDims{}), c.train_speakers, 4);
  EvalSystem sys{SystemVariant::vae, &p, false};
  EXPECT_THROW(eval_distinctiveness(sys, small_verifier(), {0.5}, EvalConfig{}, 1), ContractError);
}

// --- similarity curve ------------------------------------------------------------------

TEST(SimilarityCurve, EndpointIsOneAndSameSpeakerRejected) {
  const Corpus& c = small_corpus();
  ModelParams p = make_model(dims_for_corpus(c, ModelDims{}), c.train_speakers, 5);
  const EvalSystem sys{SystemVariant::vae, &p};
  const auto a = c.utterances_of(c.train_speakers[0]), b = c.utterances_of(c.train_speakers[1]);
  const auto curve = eval_similarity_curve(sys, small_verifier(), c, a[0], b[0], EvalConfig{});
  ASSERT_EQ(curve.size(), 11u);
  EXPECT_EQ(curve.back().w, 1.0);
  EXPECT_NEAR(curve.back().score, 1.0, 1e-15);
  EXPECT_THROW(eval_similarity_curve(sys, small_verifier(), c, a[0], a[1], EvalConfig{}), DomainError);
}

// Swapping the pair and mapping w to 1 - w traverses the same latents.
TEST(SimilarityCurve, ReversedPairMirrorsForward) {
  const Corpus& c = small_corpus();
  const auto& v = small_verifier();
  for (auto variant : {SystemVariant::vae, SystemVariant::baseline_lookup}) {
    ModelParams p = make_model(dims_for_corpus(c, ModelDims{}), c.train_speakers, 6);
    const EvalSystem sys{variant, &p};
    // Two speakers' utterances with the same content id.
    std::size_t a = 0, b = 0;
    bool found = false;
    for (std::size_t i : c.train_utterances())
      for (std::size_t j : c.train_utterances())
        if (!found && c.utterances[i].speaker_id != c.utterances[j].speaker_id &&
            c.utterances[i].content_id == c.utterances[j].content_id) {
          a = i;
          b = j;
          found = true;
        }
    ASSERT_TRUE(found);
    const EvalConfig cfg;
    const auto rev = eval_similarity_curve(sys, v, c, b, a, cfg);
    const Vec z1 = profile_of(sys, c, a), z2 = profile_of(sys, c, b);
    const int content = c.utterances[a].content_id;
    const Vec end2 = embed(v, decode(p, z2, content));
    const std::size_t n = cfg.interpolation_grid.size();
    for (std::size_t g = 0; g < n; ++g) {
      const double w = cfg.interpolation_grid[n - 1 - g];
      const Vec e = embed(v, decode(p, interpolate(z1, z2, w), content));
      EXPECT_NEAR(rev[g].score, cosine_similarity(e, end2), 1e-9) << to_string(variant) << " w=" << w;
    }
  }
}

TEST(SimilarityCurve, AdjacentDropAndRise) {
  const std::vector<CurvePoint> c{{0.0, 0.2}, {0.5, 0.3}, {1.0, 1.0}};
  EXPECT_DOUBLE_EQ(max_adjacent_drop(c), 0.7);
  EXPECT_EQ(max_adjacent_rise(c), 0.0);
  const std::vector<CurvePoint> bumpy{{0.0, 0.5}, {0.5, 0.3}, {1.0, 1.0}};
  EXPECT_DOUBLE_EQ(max_adjacent_rise(bumpy), 0.2);
}

TEST(SimilarityCurve, CrossSpeakerPairsAreFromTrainingSpeakers) {
  Rng rng(3);
  const auto pairs = cross_speaker_pairs(small_corpus(), 50, rng);
  ASSERT_EQ(pairs.size(), 50u);
  for (auto [a, b] : pairs) {
    EXPECT_NE(small_corpus().utterances[a].speaker_id, small_corpus().utterances[b].speaker_id);
    EXPECT_TRUE(small_corpus().is_train_speaker(small_corpus().utterances[a].speaker_id));
  }
}

// --- intelligibility proxy -------------------------------------------------------------

TEST(ContentProbe, HeldOutErrorIsItsOwnSelfTest) {
  const Corpus& c = small_corpus();
  const ContentProbe probe = train_content_probe(c, 1e-3, 0.0);
  EXPECT_EQ(probe_error(probe, c, c.held_out_utterances()), probe.held_out_error);
  EXPECT_LE(probe_error(probe, c, c.train_utterances()), probe.held_out_error + 0.05);
}

TEST(ContentProbe, ConstantFramesScoreChance) {
  const Corpus& c = small_corpus();
  const ContentProbe probe = train_content_probe(c, 1e-3, 0.0);
  Matrix constant(c.config.frames, c.config.feature_dim);
  for (double& x : constant.flat()) x = 0.3;
  double e = 0.0;
  for (std::size_t k = 0; k < c.config.n_contents; ++k) e += probe.error(constant, static_cast<int>(k));
  const double n = static_cast<double>(c.config.n_contents);
  EXPECT_NEAR(e / n, 1.0 - 1.0 / n, 1e-12);
}

TEST(ContentProbe, AccuracyFloorIsEnforced) {
  EXPECT_THROW(train_content_probe(small_corpus(), 1e-3, 1.01), ContractError);
}

TEST(Intelligibility, RequiresProfilesAndTrainedSystem) {
  const Corpus& c = small_corpus();
  const ContentProbe probe = train_content_probe(c, 1e-3, 0.0);
  ModelParams p = make_model(dims_for_corpus(c, ModelDims{}), c.train_speakers, 7);
  EXPECT_THROW(eval_intelligibility_proxy({SystemVariant::vae, &p}, probe, c, 0, 1), DomainError);
  EXPECT_THROW(eval_intelligibility_proxy({SystemVariant::vae, &p, false}, probe, c, 1, 1), ContractError);
  const double e = eval_intelligibility_proxy({SystemVariant::vae, &p}, probe, c, 2, 1);
  EXPECT_GE(e, 0.0);
  EXPECT_LE(e, 1.0);
  EXPECT_EQ(e, eval_intelligibility_proxy({SystemVariant::vae, &p}, probe, c, 2, 1));
}

// --- normalization ------------------------------------------------------------------------

TEST(Normalize, BaselineRowIsExactlyOne) {
  const std::map<std::string, std::vector<double>> raw{{"base", {4.0, 0.3, 1e-7}}, {"x", {2.0, 0.6, 1e-8}}};
  const auto n = normalize_rows(raw, "base");
  EXPECT_EQ(n.at("base"), (std::vector<double>{1.0, 1.0, 1.0}));
  EXPECT_EQ(n.at("x")[0], 0.5);
}

TEST(Normalize, RoundTripRecoversRaw) {
  Rng rng(4);
  std::map<std::string, std::vector<double>> raw;
  for (const char* s : {"base", "a", "b"}) raw[s] = {rng.uniform(0.01, 1), rng.uniform(0.01, 1), rng.uniform(0.01, 1)};
  const auto n = normalize_rows(raw, "base");
  for (const auto& [name, row] : raw)
    for (std::size_t j = 0; j < row.size(); ++j) EXPECT_NEAR(n.at(name)[j] * raw.at("base")[j], row[j], 1e-12);
}

TEST(Normalize, ZeroBaselineCellIsError) {
  EXPECT_THROW(normalize_rows({{"base", {0.0}}, {"a", {1.0}}}, "base"), NormalizationError);
  EXPECT_THROW(normalize_rows({{"a", {1.0}}}, "base"), NormalizationError);
}

// --- disentanglement ------------------------------------------------------------------------

TEST(Disentanglement, GroundTruthVoiceGivesPerfectR2) {
  const Corpus& c = small_corpus();
  std::vector<Vec> z;
  for (const auto& u : c.utterances) z.push_back(c.speaker(u.speaker_id).voice_params);
  EXPECT_GT(disentanglement_from_latents(c, z).speaker_r2, 0.999);
}

TEST(Disentanglement, NoiseLatentsGiveChance) {
  const Corpus c = split_speakers(generate_corpus(64, 20, 1), 0.2, 2);
  Rng rng(5);
  std::vector<Vec> z;
  for (std::size_t i = 0; i < c.utterances.size(); ++i) z.push_back(rng.normal_vector(32));
  const auto r = disentanglement_from_latents(c, z);
  EXPECT_NEAR(r.content_accuracy, 1.0 / 20.0, 0.04);
  EXPECT_LT(r.speaker_r2, 0.05);
}

// Measured baseline: time pooling keeps the voice term linear in the features,
// so a random encoder is already linearly informative about the speaker while
// noise latents are not.
TEST(Disentanglement, UntrainedEncoderMeasurement) {
  const Corpus c = split_speakers(generate_corpus(64, 20, 1), 0.2, 2);
  const ModelParams p = make_model(dims_for_corpus(c, ModelDims{}), c.train_speakers, 0);
  const auto r = disentanglement_probe(p, c);
  EXPECT_FALSE(r.collapsed);
  EXPECT_GT(r.speaker_r2, 0.5);
  EXPECT_LT(r.speaker_r2, 1.0);
}

TEST(Disentanglement, ConstantLatentsAreReportedAsCollapse) {
  const Corpus& c = small_corpus();
  const std::vector<Vec> z(c.utterances.size(), Vec(4, 0.25));
  const auto r = disentanglement_from_latents(c, z);
  EXPECT_TRUE(r.collapsed);
  EXPECT_EQ(r.speaker_r2, 0.0);
}

TEST(Median, OddAndEven) {
  EXPECT_EQ(median({3, 1, 2}), 2.0);
  EXPECT_EQ(median({4, 1, 2, 3}), 2.5);
  EXPECT_THROW(median({}), DomainError);
}

// --- trained encoder geometry ------------------------------------------------------

TEST(TrainedEncoder, SameSpeakerLatentsAreCloser) {
  CorpusConfig cc;
  cc.feature_dim = 16;
  cc.frames = 10;
  cc.n_contents = 4;
  const Corpus c = split_speakers(generate_corpus(8, 8, 41, cc), 0.25, 42);
  TrainConfig tc;
  tc.variant = SystemVariant::vae_triplet;
  tc.dims = dims_for_corpus(c, ModelDims{});
  tc.batch_size = 8;
  tc.epochs = 60;
  tc.train_seed = 43;
  const ModelParams p = train_system(c, tc).params;

  std::vector<EncoderOutput> enc;
  for (const auto& u : c.utterances) enc.push_back(encode(p, u.frames));
  double intra_d = 0, inter_d = 0, intra_cos = 0, inter_cos = 0;
  std::size_t n_intra = 0, n_inter = 0;
  for (std::size_t i = 0; i < enc.size(); ++i)
    for (std::size_t j = i + 1; j < enc.size(); ++j) {
      double d = 0;
      for (std::size_t k = 0; k < enc[i].mu.size(); ++k) d += std::pow(enc[i].mu[k] - enc[j].mu[k], 2);
      const double cs = cosine_similarity(enc[i].mu, enc[j].mu);
      if (c.utterances[i].speaker_id == c.utterances[j].speaker_id) {
        intra_d += std::sqrt(d), intra_cos += cs, ++n_intra;
      } else {
        inter_d += std::sqrt(d), inter_cos += cs, ++n_inter;
      }
    }
  EXPECT_LT(intra_d / n_intra, inter_d / n_inter);
  EXPECT_GT(intra_cos / n_intra, inter_cos / n_inter);
}
