#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <set>

#include "spkprof/corpus.hpp"
#include "spkprof/metrics.hpp"
#include "support.hpp"

using namespace spkprof;

namespace {

void expect_same_corpus(const Corpus& a, const Corpus& b) {
  EXPECT_EQ(a.config, b.config);
  EXPECT_EQ(a.seed, b.seed);
  EXPECT_EQ(a.g_speaker, b.g_speaker);
  EXPECT_EQ(a.g_session, b.g_session);
  EXPECT_EQ(a.g_content, b.g_content);
  ASSERT_EQ(a.speakers.size(), b.speakers.size());
  for (std::size_t i = 0; i < a.speakers.size(); ++i) {
    EXPECT_EQ(a.speakers[i].speaker_id, b.speakers[i].speaker_id);
    EXPECT_EQ(a.speakers[i].voice_params, b.speakers[i].voice_params);
  }
  ASSERT_EQ(a.utterances.size(), b.utterances.size());
  for (std::size_t i = 0; i < a.utterances.size(); ++i) {
    EXPECT_EQ(a.utterances[i].speaker_id, b.utterances[i].speaker_id);
    EXPECT_EQ(a.utterances[i].content_id, b.utterances[i].content_id);
    EXPECT_EQ(a.utterances[i].instance, b.utterances[i].instance);
    EXPECT_EQ(a.utterances[i].frames, b.utterances[i].frames);
  }
  EXPECT_EQ(a.train_speakers, b.train_speakers);
  EXPECT_EQ(a.held_out_speakers, b.held_out_speakers);
}

// Rank by Gaussian elimination with partial pivoting.
std::size_t numeric_rank(Matrix m, double tol = 1e-9) {
  std::size_t rank = 0;
  for (std::size_t c = 0; c < m.cols() && rank < m.rows(); ++c) {
    std::size_t piv = rank;
    for (std::size_t r = rank; r < m.rows(); ++r)
      if (std::abs(m(r, c)) > std::abs(m(piv, c))) piv = r;
    if (std::abs(m(piv, c)) < tol) continue;
    for (std::size_t k = 0; k < m.cols(); ++k) std::swap(m(piv, k), m(rank, k));
    for (std::size_t r = rank + 1; r < m.rows(); ++r) {
      const double f = m(r, c) / m(rank, c);
      for (std::size_t k = c; k < m.cols(); ++k) m(r, k) -= f * m(rank, k);
    }
    ++rank;
  }
  return rank;
}

}  // namespace

TEST(GenerateCorpus, SameSeedIsBitIdentical) {
  expect_same_corpus(generate_corpus(8, 4, 7), generate_corpus(8, 4, 7));
}

TEST(GenerateCorpus, DifferentSeedsDiffer) {
  EXPECT_NE(generate_corpus(8, 4, 7).utterances[0].frames, generate_corpus(8, 4, 8).utterances[0].frames);
}

TEST(GenerateCorpus, NoiseFreeRepeatsAreIdentical) {
  CorpusConfig cc;
  cc.n_contents = 3;
  cc.noise_sigma = 0.0;
  cc.session_sigma = 0.0;
  const Corpus c = generate_corpus(4, 6, 1, cc);
  std::size_t pairs = 0;
  for (std::size_t i = 0; i < c.utterances.size(); ++i)
    for (std::size_t j = i + 1; j < c.utterances.size(); ++j) {
      const auto &a = c.utterances[i], &b = c.utterances[j];
      if (a.speaker_id == b.speaker_id && a.content_id == b.content_id) {
        EXPECT_EQ(a.frames, b.frames);
        ++pairs;
      }
    }
  EXPECT_GT(pairs, 0u);
}

TEST(GenerateCorpus, CountsAndShapes) {
  const Corpus c = generate_corpus(5, 3, 2);
  EXPECT_EQ(c.utterances.size(), 15u);
  std::set<std::tuple<int, int, int>> keys;
  for (const auto& u : c.utterances) {
    EXPECT_EQ(u.frames.rows(), 40u);
    EXPECT_EQ(u.frames.cols(), 32u);
    EXPECT_TRUE(all_finite(u.frames.flat()));
    keys.insert({u.speaker_id, u.content_id, u.instance});
  }
  EXPECT_EQ(keys.size(), c.utterances.size());
}

TEST(GenerateCorpus, RejectsTooFewUtterances) {
  EXPECT_THROW(generate_corpus(8, 1, 1), ConfigError);
  EXPECT_THROW(generate_corpus(3, 4, 1), ConfigError);
}

// Least-squares oracle: time-averaged frames regressed on the voice parameters
// recover the speaker map when there is no noise.
TEST(GenerateCorpus, SpeakerMapRecoverableByRegression) {
  CorpusConfig cc;
  cc.noise_sigma = 0.0;
  cc.session_sigma = 0.0;
  const Corpus c = generate_corpus(50, 2, 9, cc);
  std::vector<Vec> x, y;
  for (const auto& u : c.utterances) {
    Vec m(cc.feature_dim, 0.0);
    for (std::size_t t = 0; t < u.frames.rows(); ++t)
      for (std::size_t f = 0; f < cc.feature_dim; ++f) m[f] += u.frames(t, f) / static_cast<double>(u.frames.rows());
    x.push_back(c.speaker(u.speaker_id).voice_params);
    y.push_back(std::move(m));
  }
  const Matrix w = fit_linear(x, y, 0.0);
  std::vector<Vec> pred;
  for (const auto& v : x) pred.push_back(predict_linear(w, v));
  EXPECT_GT(r_squared(y, pred), 0.99);
  // Coefficients are the columns of G_speaker.
  double err = 0.0, norm = 0.0;
  for (std::size_t f = 0; f < cc.feature_dim; ++f)
    for (std::size_t v = 0; v < cc.voice_dim; ++v) {
      err += std::pow(w(v, f) - c.g_speaker(f, v), 2);
      norm += std::pow(c.g_speaker(f, v), 2);
    }
  EXPECT_LT(std::sqrt(err / norm), 0.1);
}

TEST(GenerateCorpus, SpeakerAndContentMapsAreLinearlyIndependent) {
  const Corpus c = generate_corpus(4, 2, 11);
  const auto& cc = c.config;
  // Columns: G_speaker (F x V) followed by each content's time-mean pattern.
  Matrix stacked(cc.feature_dim, cc.voice_dim + cc.n_contents);
  for (std::size_t f = 0; f < cc.feature_dim; ++f) {
    for (std::size_t v = 0; v < cc.voice_dim; ++v) stacked(f, v) = c.g_speaker(f, v);
    for (std::size_t k = 0; k < cc.n_contents; ++k) {
      double m = 0.0;
      for (std::size_t t = 0; t < cc.frames; ++t) m += c.g_content[k](t, f) / static_cast<double>(cc.frames);
      stacked(f, cc.voice_dim + k) = m;
    }
  }
  EXPECT_EQ(numeric_rank(stacked), cc.voice_dim + cc.n_contents);
}

TEST(SplitSpeakers, ArithmeticAndPartition) {
  const Corpus c = split_speakers(generate_corpus(10, 2, 1), 0.2, 5);
  EXPECT_EQ(c.train_speakers.size(), 8u);
  EXPECT_EQ(c.held_out_speakers.size(), 2u);
  std::vector<int> all = c.train_speakers;
  all.insert(all.end(), c.held_out_speakers.begin(), c.held_out_speakers.end());
  std::sort(all.begin(), all.end());
  std::vector<int> ids;
  for (const auto& s : c.speakers) ids.push_back(s.speaker_id);
  EXPECT_EQ(all, ids);
  for (int h : c.held_out_speakers) EXPECT_FALSE(c.is_train_speaker(h));
}

TEST(SplitSpeakers, DeterministicPerSeed) {
  const Corpus base = generate_corpus(20, 2, 1);
  EXPECT_EQ(split_speakers(base, 0.2, 5).held_out_speakers, split_speakers(base, 0.2, 5).held_out_speakers);
  EXPECT_NE(split_speakers(base, 0.2, 5).held_out_speakers, split_speakers(base, 0.2, 6).held_out_speakers);
}

TEST(SplitSpeakers, RejectsBadFractions) {
  const Corpus base = generate_corpus(10, 2, 1);
  EXPECT_THROW(split_speakers(base, 0.0, 1), ConfigError);
  EXPECT_THROW(split_speakers(base, 0.5, 1), ConfigError);
}

TEST(CorpusFiles, FrameFileLayout) {
  const auto dir = support::fresh_dir("frames");
  Matrix m = Matrix::from_rows({{1.5, -2.0, 3.0}, {0.0, 1e-300, 7.25}});
  write_frames(dir / "x.bin", m);
  const std::string bytes = support::slurp(dir / "x.bin");
  ASSERT_EQ(bytes.size(), 8u + 6u * 8u);
  std::uint32_t t, f;
  std::memcpy(&t, bytes.data(), 4);
  std::memcpy(&f, bytes.data() + 4, 4);
  EXPECT_EQ(t, 2u);
  EXPECT_EQ(f, 3u);
  double third;
  std::memcpy(&third, bytes.data() + 8 + 2 * 8, 8);
  EXPECT_EQ(third, 3.0);
  EXPECT_EQ(read_frames(dir / "x.bin"), m);
}

TEST(CorpusFiles, SaveLoadRoundTripIsExact) {
  const auto dir = support::fresh_dir("corpus_rt");
  const Corpus c = split_speakers(generate_corpus(6, 3, 4), 0.2, 1);
  save_corpus(c, dir);
  expect_same_corpus(c, load_corpus(dir));
  const auto j = nlohmann::json::parse(support::slurp(dir / "corpus.json"));
  EXPECT_EQ(j.at("utterances").size(), 18u);
}

TEST(CorpusFiles, TruncatedFrameFileIsRejected) {
  const auto dir = support::fresh_dir("corpus_bad");
  save_corpus(split_speakers(generate_corpus(4, 2, 4), 0.25, 1), dir);
  std::filesystem::resize_file(dir / "frames" / frame_file_name(3), 20);
  EXPECT_THROW(load_corpus(dir), IoError);
}
