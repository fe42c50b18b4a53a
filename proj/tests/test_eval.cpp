#include <algorithm>
#include <cmath>
#include <limits>
#include <set>

#include <gtest/gtest.h>

#include "lms/eval.hpp"

namespace lms {
namespace {

const Vector kTargets{0.9, 0.8, 0.7};
const Vector kNontargets{0.75, 0.3, 0.2};

// Brute-force sweep: for every candidate threshold count directly.
struct NaivePoint {
  double threshold, p_miss, p_fa;
  std::size_t misses, fas;
};

std::vector<NaivePoint> naive_sweep(const Vector& tar, const Vector& non) {
  std::set<double> cands(tar.begin(), tar.end());
  cands.insert(non.begin(), non.end());
  cands.insert(std::numeric_limits<double>::infinity());
  std::vector<NaivePoint> pts;
  for (double t : cands) {
    std::size_t m = 0, f = 0;
    for (double s : tar) m += s < t;
    for (double s : non) f += s >= t;
    pts.push_back({t, static_cast<double>(m) / tar.size(), static_cast<double>(f) / non.size(), m, f});
  }
  return pts;
}

double naive_eer(const Vector& tar, const Vector& non) {
  const auto pts = naive_sweep(tar, non);
  for (std::size_t k = 0; k < pts.size(); ++k) {
    const long double lhs = static_cast<long double>(pts[k].misses) * non.size();
    const long double rhs = static_cast<long double>(pts[k].fas) * tar.size();
    if (lhs < rhs) continue;
    if (lhs == rhs || k == 0) return pts[k].p_miss;
    const double d1 = pts[k - 1].p_miss - pts[k - 1].p_fa;
    const double d2 = pts[k].p_miss - pts[k].p_fa;
    const double a = -d1 / (d2 - d1);
    return pts[k - 1].p_miss + a * (pts[k].p_miss - pts[k - 1].p_miss);
  }
  return 1.0;
}

double naive_min_dcf(const Vector& tar, const Vector& non, const DcfParams& p) {
  double best = std::numeric_limits<double>::infinity();
  for (const NaivePoint& pt : naive_sweep(tar, non)) {
    double c = p.c_miss * pt.p_miss * p.p_target + p.c_fa * pt.p_fa * (1.0 - p.p_target);
    if (p.normalize) c /= std::min(p.c_miss * p.p_target, p.c_fa * (1.0 - p.p_target));
    best = std::min(best, c);
  }
  return best;
}

TEST(Cosine, Examples) {
  EXPECT_DOUBLE_EQ(cosine_score(Vector{1, 2, 3}, Vector{1, 2, 3}), 1.0);
  EXPECT_EQ(cosine_score(Vector{1, 0}, Vector{0, 1}), 0.0);
  EXPECT_NEAR(cosine_score(Vector{1, 0}, Vector{1, 1}), std::sqrt(0.5), 1e-15);
  EXPECT_THROW(cosine_score(Vector{0, 0}, Vector{1, 1}), std::invalid_argument);
}

TEST(Eer, HandExample) {
  const EerResult r = compute_eer(kTargets, kNontargets);
  EXPECT_DOUBLE_EQ(r.eer, 1.0 / 3.0);
  EXPECT_EQ(r.threshold, 0.75);
}

TEST(Eer, SeparatedAndFlipped) {
  EXPECT_EQ(compute_eer(Vector{0.9, 0.8}, Vector{0.1, 0.2}).eer, 0.0);
  const EerResult flipped = compute_eer(kNontargets, kTargets);
  EXPECT_GE(flipped.eer, 0.5);
  EXPECT_EQ(flipped.eer, naive_eer(kNontargets, kTargets));
  EXPECT_THROW(compute_eer(Vector{}, Vector{1.0}), std::invalid_argument);
}

TEST(MinDcf, HandExample) {
  DcfParams raw = DcfParams::sre08();
  raw.normalize = false;
  EXPECT_NEAR(compute_min_dcf(kTargets, kNontargets, raw), 10.0 * (1.0 / 3.0) * 0.01, 1e-15);
  EXPECT_NEAR(compute_min_dcf(kTargets, kNontargets, raw), 0.03333, 5e-6);
  EXPECT_NEAR(compute_min_dcf(kTargets, kNontargets, DcfParams::sre08()), 1.0 / 3.0, 1e-14);
  EXPECT_EQ(compute_min_dcf(Vector{0.9, 0.8}, Vector{0.1, 0.2}, DcfParams::sre10()), 0.0);
}

TEST(Metrics, MatchNaiveSweepOnRandomTrialSets) {
  RngStream rng(21, streams::kTest);
  for (int trial = 0; trial < 1000; ++trial) {
    Vector tar(1 + rng.uniform_int(60)), non(1 + rng.uniform_int(200));
    // Coarse quantisation forces ties and exact crossings.
    const double q = trial % 2 ? 0.05 : 1e-9;
    for (double& s : tar) s = std::round((rng.gaussian() + 1.0) / q) * q;
    for (double& s : non) s = std::round(rng.gaussian() / q) * q;
    EXPECT_EQ(compute_eer(tar, non).eer, naive_eer(tar, non));
    for (DcfParams p : {DcfParams::sre08(), DcfParams::sre10()}) {
      EXPECT_EQ(compute_min_dcf(tar, non, p), naive_min_dcf(tar, non, p));
      p.normalize = false;
      EXPECT_EQ(compute_min_dcf(tar, non, p), naive_min_dcf(tar, non, p));
    }
  }
}

TEST(OperatingPoints, EndsRejectingEverything) {
  const auto pts = operating_points(kTargets, kNontargets);
  EXPECT_EQ(pts.size(), 7u);
  EXPECT_EQ(pts.front().p_miss, 0.0);
  EXPECT_EQ(pts.front().p_fa, 1.0);
  EXPECT_TRUE(std::isinf(pts.back().threshold));
  EXPECT_EQ(pts.back().p_miss, 1.0);
  EXPECT_EQ(pts.back().p_fa, 0.0);
  const std::string csv = operating_points_csv(pts);
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "threshold,misses,false_alarms,p_miss,p_fa");
}

TEST(Distribution, NormExample) {
  const Vector v{3, 4, 5};
  const DistributionStats s = describe_distribution(v, 4);
  EXPECT_DOUBLE_EQ(s.mean, 4.0);
  EXPECT_NEAR(s.stddev, std::sqrt(2.0 / 3.0), 1e-15);
  EXPECT_EQ(s.bin_counts.size(), 4u);
  std::size_t total = 0;
  for (auto c : s.bin_counts) total += c;
  EXPECT_EQ(total, 3u);
  EXPECT_EQ(describe_distribution(Vector{2, 2, 2}).stddev, 0.0);
}

TEST(WeightDistances, Examples) {
  const DistributionStats anti = weight_distance_stats(Matrix(2, 2, Vector{1, -3, 0, 0}));
  EXPECT_EQ(anti.count, 1u);
  EXPECT_DOUBLE_EQ(anti.mean, 4.0);
  EXPECT_EQ(anti.variance, 0.0);
  Matrix eye(3, 3, 0.0);
  for (int i = 0; i < 3; ++i) eye(i, i) = 2.0;
  const DistributionStats ortho = weight_distance_stats(eye);
  EXPECT_EQ(ortho.count, 3u);
  EXPECT_DOUBLE_EQ(ortho.mean, 2.0);
  EXPECT_NEAR(ortho.variance, 0.0, 1e-30);
  EXPECT_THROW(weight_distance_stats(Matrix(2, 2, Vector{1, 0, 0, 0})), std::invalid_argument);
}

TEST(WeightDistances, RandomHighDimensionMeanNearTwo) {
  RngStream rng(22, streams::kTest);
  Matrix w(64, 50);
  for (double& v : w.storage()) v = rng.gaussian();
  EXPECT_EQ(pairwise_weight_distances(w).size(), 50u * 49u / 2u);
  EXPECT_NEAR(weight_distance_stats(w).mean, 2.0, 0.1);
}

TEST(Scoring, SelfTrialScoresOneAndRepeats) {
  CorpusSpec spec;
  spec.n_speakers = 3;
  spec.utts_per_speaker = 2;
  spec.feature_dim = 4;
  const Corpus c = generate_corpus(spec);
  NetworkConfig nc;
  nc.input_dim = 4;
  nc.frame_kernel_sizes = {3};
  nc.frame_widths = {8};
  nc.segment_widths = {6, 5};
  nc.num_classes = 3;
  RngStream rng(1, streams::kInit);
  const EmbeddingNet net = init_network(nc, rng);
  const std::string a = c.speakers[0].utterances[0].id, b = c.speakers[1].utterances[1].id;
  const TrialSet trials{{a, a, true}, {a, b, false}};
  const auto s1 = score_trials(net, c, trials);
  EXPECT_NEAR(s1[0].score, 1.0, 1e-12);
  const auto s2 = score_trials(net, c, trials);
  EXPECT_EQ(s1[1].score, s2[1].score);
  EXPECT_THROW(score_trials(net, c, TrialSet{{a, "ghost", false}}), std::out_of_range);
  const DistributionStats norms = embedding_norm_stats(net, c, 5);
  std::size_t total = 0;
  for (auto k : norms.bin_counts) total += k;
  EXPECT_EQ(total, c.num_utterances());
}

TEST(Serialization, JsonAndCsv) {
  const MetricsReport r = evaluate_scores({{{"a", "b", true}, 0.9}, {{"a", "c", false}, 0.1}});
  const nlohmann::json j = to_json(r);
  EXPECT_EQ(j.at("eer").get<double>(), 0.0);
  EXPECT_TRUE(j.contains("min_dcf08"));
  const std::string h = histogram_csv(describe_distribution(Vector{1, 2, 3}, 2));
  EXPECT_EQ(h.substr(0, h.find('\n')), "bin_lo,bin_hi,count");
}

}  // namespace
}  // namespace lms
