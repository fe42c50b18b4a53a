#pragma once

// Synthetic speaker corpus, speaker splits, verification trials and their
// on-disk formats.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "lms/numkit.hpp"

namespace lms {

struct CorpusSpec {
  std::size_t n_speakers = 30;
  std::size_t utts_per_speaker = 20;
  std::size_t frames_min = 60;
  std::size_t frames_max = 100;
  std::size_t feature_dim = 10;
  double within_speaker_noise = 0.3;  // sigma_w, per frame
  double channel_noise = 0.1;         // sigma_c, per utterance
  double speaker_gain = 1.0;
  std::uint64_t seed = 1;

  void validate() const;
};

struct Utterance {
  std::string id;
  Matrix frames;  // T x feature_dim

  friend bool operator==(const Utterance&, const Utterance&) = default;
};

struct Speaker {
  std::string name;
  std::vector<Utterance> utterances;

  friend bool operator==(const Speaker&, const Speaker&) = default;
};

/// Speakers are labelled by their position, so labels are dense.
struct Corpus {
  std::size_t feature_dim = 0;
  std::vector<Speaker> speakers;

  std::size_t num_speakers() const { return speakers.size(); }
  std::size_t num_utterances() const;
  /// Looks an utterance up by id; throws std::out_of_range if absent.
  const Utterance& find(const std::string& id) const;
  /// Speaker label of an utterance id, or -1.
  int speaker_of(const std::string& id) const;

  friend bool operator==(const Corpus&, const Corpus&) = default;
};

/// Speaker directions are uniform on the unit sphere; each utterance adds a
/// channel offset ~ N(0, sigma_c^2 I) and every frame adds N(0, sigma_w^2 I)
/// to gain * direction.
Corpus generate_corpus(const CorpusSpec& spec);

/// Text header then little-endian doubles. Throws std::runtime_error on any
/// malformed or truncated input.
void write_corpus(const Corpus& corpus, const std::filesystem::path& path,
                  const std::string& config_digest = "");
Corpus read_corpus(const std::filesystem::path& path);

struct SplitSpec {
  std::size_t n_train_speakers = 20;
  std::size_t n_test_speakers = 10;
  std::size_t val_utts_per_speaker = 2;
};

/// Train and validation share the training speakers (utterance-disjoint);
/// test speakers are disjoint from both.
struct CorpusSplit {
  Corpus train;
  Corpus validation;
  Corpus test;
};

CorpusSplit split_corpus(const Corpus& corpus, const SplitSpec& spec);

struct Trial {
  std::string enroll;
  std::string test;
  bool target = false;

  friend bool operator==(const Trial&, const Trial&) = default;
};

using TrialSet = std::vector<Trial>;

/// Samples distinct unordered pairs: n_target same-speaker, n_nontarget
/// cross-speaker. Throws if either count exceeds the available pairs.
TrialSet generate_trials(const Corpus& split, RngStream& rng, std::size_t n_target,
                         std::size_t n_nontarget);

/// Lines starting with '#' are comments; the writer records the digest there.
void write_trials(const TrialSet& trials, const std::filesystem::path& path,
                  const std::string& config_digest = "");
TrialSet read_trials(const std::filesystem::path& path);

}  // namespace lms
