#pragma once

// Experiment configuration and the end-to-end pipeline behind the CLI:
// corpus -> split -> trials -> training -> scoring -> analysis.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include <json.hpp>

#include "lms/data.hpp"
#include "lms/eval.hpp"
#include "lms/losses.hpp"
#include "lms/model.hpp"

namespace lms {

struct TrialSpec {
  std::size_t n_target = 1000;
  std::size_t n_nontarget = 5000;
};

struct EvalSpec {
  DcfParams dcf08 = DcfParams::sre08();
  DcfParams dcf10 = DcfParams::sre10();
  std::size_t histogram_bins = 20;
};

struct ExperimentConfig {
  CorpusSpec corpus;
  SplitSpec split;
  TrialSpec trials;
  NetworkConfig network;  // input_dim and num_classes follow corpus and split
  TrainConfig train;
  LossConfig loss;
  EvalSpec eval;
  std::uint64_t seed = 1;  // network init and batch sampling
  std::string output_dir = "runs/default";

  /// Throws std::invalid_argument with a "section.field: reason" message.
  void validate() const;
  /// Canonical form with every field spelled out.
  nlohmann::json to_json() const;
  /// Digest of everything except output_dir.
  std::string digest() const;
};

/// Desk-scale annealing: the reference decay shapes compressed so lambda
/// reaches ~1 within the first few hundred of ~1000 steps.
AnnealSchedule desk_anneal(LossKind kind);

ExperimentConfig default_experiment_config();

/// Missing fields take their defaults. For the loss section, omitted
/// normalize_weights and anneal follow the chosen kind. Unknown fields and
/// wrongly typed values are errors naming the field.
ExperimentConfig experiment_config_from_json(const nlohmann::json& json);

/// Applies one "a.b.c=value" override; value is parsed as JSON when
/// possible and taken as a string otherwise.
void apply_override(nlohmann::json& json, const std::string& assignment);

/// Reads `path` (empty means defaults only), applies overrides in order,
/// then parses and validates.
ExperimentConfig load_experiment_config(const std::filesystem::path& path,
                                        const std::vector<std::string>& overrides = {});

/// Output directory, under $LMS_OUTPUT_ROOT when that is set and the
/// configured directory is relative.
std::filesystem::path resolve_output_dir(const ExperimentConfig& config);

struct Dataset {
  Corpus corpus;
  CorpusSplit split;
  TrialSet trials;
};

/// Corpus from corpus.seed; trials drawn from the test split on the trials
/// stream of the same seed, so runs with equal corpus settings share data.
Dataset build_dataset(const ExperimentConfig& config);
Dataset dataset_from_corpus(const ExperimentConfig& config, Corpus corpus, TrialSet trials);

EmbeddingNet initial_network(const ExperimentConfig& config);

struct RunResult {
  EmbeddingNet net;
  TrainerState state;
  std::vector<StepLog> log;
  std::vector<ScoredTrial> scores;
  MetricsReport metrics;
  DistributionStats feature_norms;     // test split
  DistributionStats weight_distances;  // output layer
};

/// Trains from scratch and evaluates in memory.
RunResult run_experiment(const ExperimentConfig& config, const Dataset& data,
                         const std::function<void(const StepLog&)>& on_step = {});

// Serialized artifacts. Every one carries the config digest.
std::string loss_log_csv(const std::vector<StepLog>& log, const std::string& digest);
std::string scores_text(const std::vector<ScoredTrial>& scores, const std::string& digest);
nlohmann::json metrics_json(const MetricsReport& metrics, const std::string& digest);
nlohmann::json analysis_json(const DistributionStats& norms, const DistributionStats& distances,
                             const std::string& digest);

/// One line per field that differs, used by compare.
struct MetricDelta {
  std::string name;
  double a = 0.0;
  double b = 0.0;
  double delta() const { return b - a; }
};
std::vector<MetricDelta> metric_deltas(const RunResult& a, const RunResult& b);

}  // namespace lms
