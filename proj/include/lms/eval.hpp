#pragma once

// Trial scoring, verification metrics and distribution summaries.

#include <map>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "lms/data.hpp"
#include "lms/model.hpp"
#include "lms/numkit.hpp"

namespace lms {

double cosine_score(std::span<const double> a, std::span<const double> b);

struct ScoredTrial {
  Trial trial;
  double score = 0.0;
};

/// Eval-mode embedding of every utterance, keyed by utterance id.
std::map<std::string, Vector> extract_embeddings(const EmbeddingNet& net, const Corpus& corpus);
/// Eval-mode loss-input feature x of every utterance, in corpus order.
Matrix extract_features(const EmbeddingNet& net, const Corpus& corpus);

std::vector<ScoredTrial> score_trials(const EmbeddingNet& net, const Corpus& corpus, const TrialSet& trials);
std::vector<ScoredTrial> score_trials(const std::map<std::string, Vector>& embeddings, const TrialSet& trials);

/// Accept iff score >= threshold.
struct OperatingPoint {
  double threshold = 0.0;
  std::size_t misses = 0;
  std::size_t false_alarms = 0;
  double p_miss = 0.0;
  double p_fa = 0.0;
};

/// One point per distinct score (ascending) plus +inf, where everything is
/// rejected.
std::vector<OperatingPoint> operating_points(std::span<const double> targets,
                                             std::span<const double> nontargets);

struct EerResult {
  double eer = 0.0;
  double threshold = 0.0;
};

/// Exact crossing when one exists, else linear interpolation between the
/// two adjacent operating points around the crossing. The threshold is that
/// of the first point with P_miss >= P_fa.
EerResult compute_eer(std::span<const double> targets, std::span<const double> nontargets);
EerResult compute_eer(const std::vector<ScoredTrial>& scores);

struct DcfParams {
  double c_miss = 10.0;
  double c_fa = 1.0;
  double p_target = 0.01;
  bool normalize = true;

  static DcfParams sre08() { return {10.0, 1.0, 0.01, true}; }
  static DcfParams sre10() { return {1.0, 1.0, 0.001, true}; }
  void validate() const;
};

double detection_cost(const OperatingPoint& op, const DcfParams& params);
double compute_min_dcf(std::span<const double> targets, std::span<const double> nontargets,
                       const DcfParams& params);
double compute_min_dcf(const std::vector<ScoredTrial>& scores, const DcfParams& params);

struct MetricsReport {
  double eer = 0.0;
  double eer_threshold = 0.0;
  double min_dcf08 = 0.0;
  double min_dcf10 = 0.0;
  std::size_t score_count = 0;
  std::size_t target_count = 0;
  std::size_t nontarget_count = 0;
  DcfParams dcf08 = DcfParams::sre08();
  DcfParams dcf10 = DcfParams::sre10();
};

MetricsReport evaluate_scores(const std::vector<ScoredTrial>& scores,
                              const DcfParams& dcf08 = DcfParams::sre08(),
                              const DcfParams& dcf10 = DcfParams::sre10());

struct DistributionStats {
  std::size_t count = 0;
  double mean = 0.0;
  double stddev = 0.0;  // population
  double variance = 0.0;
  std::vector<double> bin_edges;  // bins + 1 edges over [min, max]
  std::vector<std::size_t> bin_counts;
};

DistributionStats describe_distribution(std::span<const double> values, std::size_t bins = 20);

/// Norms of the loss-input features over a split.
DistributionStats embedding_norm_stats(const EmbeddingNet& net, const Corpus& split, std::size_t bins = 20);

/// All C(C-1)/2 squared distances between L2-normalized weight columns.
Vector pairwise_weight_distances(const Matrix& weights);
DistributionStats weight_distance_stats(const Matrix& weights, std::size_t bins = 20);

nlohmann::json to_json(const MetricsReport& report);
nlohmann::json to_json(const DistributionStats& stats);
/// threshold,misses,false_alarms,p_miss,p_fa
std::string operating_points_csv(const std::vector<OperatingPoint>& points);
/// bin_lo,bin_hi,count
std::string histogram_csv(const DistributionStats& stats);

}  // namespace lms
