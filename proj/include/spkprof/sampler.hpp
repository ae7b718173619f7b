#pragma once

// Epoch plans: which reference utterance feeds the encoder for each target,
// plus a randomly mined triplet per target.

#include <cstdint>
#include <map>
#include <stdexcept>
#include <vector>

#include "spkprof/corpus.hpp"
#include "spkprof/random.hpp"
#include "spkprof/vae.hpp"

namespace spkprof {

class MiningError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct PlanEntry {
  std::size_t target = 0;
  std::size_t reference = 0;
  Triplet triplet;
  bool has_triplet = true;  // false only for single-utterance speakers

  bool operator==(const PlanEntry&) const = default;
};

struct EpochPlan {
  std::vector<PlanEntry> entries;
  std::uint64_t epoch_seed = 0;
  std::size_t single_utterance_fallbacks = 0;  // shuffle ON but the speaker had one utterance

  bool operator==(const EpochPlan&) const = default;
};

namespace detail {

inline std::vector<int> training_pool(const Corpus& c) {
  if (c.has_split()) return c.train_speakers;
  std::vector<int> ids;
  for (const auto& s : c.speakers) ids.push_back(s.speaker_id);
  return ids;
}

inline std::map<int, std::vector<std::size_t>> utterances_by_speaker(const Corpus& c, const std::vector<int>& pool) {
  std::map<int, std::vector<std::size_t>> by;
  for (int id : pool) by[id];
  for (std::size_t i = 0; i < c.utterances.size(); ++i) {
    auto it = by.find(c.utterances[i].speaker_id);
    if (it != by.end()) it->second.push_back(i);
  }
  return by;
}

inline Triplet mine_triplet(const Corpus& corpus, const std::map<int, std::vector<std::size_t>>& by_speaker,
                            std::size_t anchor, Rng& rng) {
  if (by_speaker.size() < 2) throw MiningError("mine_triplet: need at least two speakers to draw a negative");
  const int spk = corpus.utterances.at(anchor).speaker_id;
  auto it = by_speaker.find(spk);
  if (it == by_speaker.end()) throw MiningError("mine_triplet: anchor speaker is not in the training pool");
  const auto& own = it->second;
  if (own.size() < 2) {
    throw MiningError("mine_triplet: speaker " + std::to_string(spk) + " has a single utterance, no positive exists");
  }
  Triplet t;
  t.anchor = anchor;
  // Uniform over the speaker's other utterances.
  std::size_t k = rng.index(own.size() - 1);
  for (std::size_t u : own) {
    if (u == anchor) continue;
    if (k-- == 0) {
      t.positive = u;
      break;
    }
  }
  std::size_t neg_spk = rng.index(by_speaker.size() - 1);
  auto nit = by_speaker.begin();
  for (std::size_t seen = 0;; ++nit) {
    if (nit->first == spk) continue;
    if (seen++ == neg_spk) break;
  }
  t.negative = nit->second.at(rng.index(nit->second.size()));
  return t;
}

}  // namespace detail

/// Draws (anchor, positive, negative): positive from the anchor's speaker
/// (never the anchor itself), negative from a uniformly chosen other speaker.
inline Triplet mine_triplet(const Corpus& corpus, std::size_t anchor_index, Rng& rng) {
  const auto pool = detail::training_pool(corpus);
  return detail::mine_triplet(corpus, detail::utterances_by_speaker(corpus, pool), anchor_index, rng);
}

/// One entry per training utterance, in a seeded random order. With
/// `shuffle_on` the reference is drawn uniformly from the target speaker's
/// utterances; otherwise it is the target itself. Depends only on
/// (corpus, epoch, base_seed, shuffle_on).
inline EpochPlan make_epoch_plan(const Corpus& corpus, std::uint64_t epoch, std::uint64_t base_seed, bool shuffle_on) {
  EpochPlan plan;
  plan.epoch_seed = substream_seed(base_seed, epoch);
  Rng rng(plan.epoch_seed);
  const auto pool = detail::training_pool(corpus);
  const auto by = detail::utterances_by_speaker(corpus, pool);
  for (const auto& [spk, utts] : by) {
    for (std::size_t target : utts) {
      PlanEntry e;
      e.target = target;
      e.reference = target;
      if (shuffle_on) {
        if (utts.size() < 2) ++plan.single_utterance_fallbacks;
        e.reference = utts[rng.index(utts.size())];
      }
      if (utts.size() >= 2) {
        e.triplet = detail::mine_triplet(corpus, by, target, rng);
      } else {
        e.has_triplet = false;
      }
      plan.entries.push_back(e);
    }
  }
  rng.shuffle(plan.entries);
  return plan;
}

}  // namespace spkprof
