#include "lms/eval.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>
#include <stdexcept>

namespace lms {

namespace {

void split_scores(const std::vector<ScoredTrial>& scores, Vector& targets, Vector& nontargets) {
  for (const ScoredTrial& s : scores) (s.trial.target ? targets : nontargets).push_back(s.score);
}

void require_both(std::span<const double> targets, std::span<const double> nontargets) {
  if (targets.empty() || nontargets.empty()) {
    throw std::invalid_argument("metrics need at least one target and one nontarget trial");
  }
}

std::string format_double(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

}  // namespace

double cosine_score(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw std::invalid_argument("cosine of vectors with different lengths");
  const double na = norm2(a);
  const double nb = norm2(b);
  if (!(na > 1e-12) || !(nb > 1e-12)) throw std::invalid_argument("cosine of a zero vector");
  return std::clamp(dot(a, b) / (na * nb), -1.0, 1.0);
}

std::map<std::string, Vector> extract_embeddings(const EmbeddingNet& net, const Corpus& corpus) {
  std::map<std::string, Vector> out;
  for (const Speaker& s : corpus.speakers) {
    for (const Utterance& u : s.utterances) {
      const NetForward fwd = net_forward(net, {u.frames}, Mode::kEval);
      out.emplace(u.id, Vector(fwd.embeddings.row(0).begin(), fwd.embeddings.row(0).end()));
    }
  }
  return out;
}

Matrix extract_features(const EmbeddingNet& net, const Corpus& corpus) {
  Matrix out(corpus.num_utterances(), net.config.feature_dim());
  std::size_t r = 0;
  for (const Speaker& s : corpus.speakers) {
    for (const Utterance& u : s.utterances) {
      const NetForward fwd = net_forward(net, {u.frames}, Mode::kEval);
      std::copy(fwd.features.row(0).begin(), fwd.features.row(0).end(), out.row(r++).begin());
    }
  }
  return out;
}

std::vector<ScoredTrial> score_trials(const std::map<std::string, Vector>& embeddings, const TrialSet& trials) {
  std::vector<ScoredTrial> out;
  out.reserve(trials.size());
  for (const Trial& t : trials) {
    const auto a = embeddings.find(t.enroll);
    const auto b = embeddings.find(t.test);
    if (a == embeddings.end()) throw std::out_of_range("trial utterance '" + t.enroll + "' not found");
    if (b == embeddings.end()) throw std::out_of_range("trial utterance '" + t.test + "' not found");
    out.push_back({t, cosine_score(a->second, b->second)});
  }
  return out;
}

std::vector<ScoredTrial> score_trials(const EmbeddingNet& net, const Corpus& corpus, const TrialSet& trials) {
  for (const Trial& t : trials) {
    if (corpus.speaker_of(t.enroll) < 0) throw std::out_of_range("trial utterance '" + t.enroll + "' not found");
    if (corpus.speaker_of(t.test) < 0) throw std::out_of_range("trial utterance '" + t.test + "' not found");
  }
  return score_trials(extract_embeddings(net, corpus), trials);
}

std::vector<OperatingPoint> operating_points(std::span<const double> targets,
                                             std::span<const double> nontargets) {
  require_both(targets, nontargets);
  Vector tgt(targets.begin(), targets.end());
  Vector non(nontargets.begin(), nontargets.end());
  std::sort(tgt.begin(), tgt.end());
  std::sort(non.begin(), non.end());
  Vector thresholds = tgt;
  thresholds.insert(thresholds.end(), non.begin(), non.end());
  std::sort(thresholds.begin(), thresholds.end());
  thresholds.erase(std::unique(thresholds.begin(), thresholds.end()), thresholds.end());
  thresholds.push_back(std::numeric_limits<double>::infinity());

  const double nt = static_cast<double>(tgt.size());
  const double nn = static_cast<double>(non.size());
  std::vector<OperatingPoint> points;
  points.reserve(thresholds.size());
  std::size_t ti = 0;  // targets below the threshold
  std::size_t ni = 0;  // nontargets below the threshold
  for (double t : thresholds) {
    while (ti < tgt.size() && tgt[ti] < t) ++ti;
    while (ni < non.size() && non[ni] < t) ++ni;
    OperatingPoint op;
    op.threshold = t;
    op.misses = ti;
    op.false_alarms = non.size() - ni;
    op.p_miss = static_cast<double>(op.misses) / nt;
    op.p_fa = static_cast<double>(op.false_alarms) / nn;
    points.push_back(op);
  }
  return points;
}

EerResult compute_eer(std::span<const double> targets, std::span<const double> nontargets) {
  const auto points = operating_points(targets, nontargets);
  const auto nt = static_cast<long double>(targets.size());
  const auto nn = static_cast<long double>(nontargets.size());
  for (std::size_t k = 0; k < points.size(); ++k) {
    const OperatingPoint& p2 = points[k];
    // Sign of P_miss - P_fa from integer counts; exact.
    const long double cross = static_cast<long double>(p2.misses) * nn - static_cast<long double>(p2.false_alarms) * nt;
    if (cross < 0) continue;
    if (cross == 0 || k == 0) return {p2.p_miss, p2.threshold};
    const OperatingPoint& p1 = points[k - 1];
    const double d1 = p1.p_miss - p1.p_fa;
    const double d2 = p2.p_miss - p2.p_fa;
    const double alpha = -d1 / (d2 - d1);
    return {p1.p_miss + alpha * (p2.p_miss - p1.p_miss), p2.threshold};
  }
  // Unreachable: the +inf point has P_miss = 1 >= P_fa = 0.
  return {points.back().p_miss, points.back().threshold};
}

EerResult compute_eer(const std::vector<ScoredTrial>& scores) {
  Vector t, n;
  split_scores(scores, t, n);
  return compute_eer(t, n);
}

void DcfParams::validate() const {
  if (!(c_miss > 0.0) || !(c_fa > 0.0)) throw std::invalid_argument("DCF costs must be positive");
  if (!(p_target > 0.0 && p_target < 1.0)) throw std::invalid_argument("DCF p_target must be in (0, 1)");
}

double detection_cost(const OperatingPoint& op, const DcfParams& params) {
  const double cost = params.c_miss * op.p_miss * params.p_target + params.c_fa * op.p_fa * (1.0 - params.p_target);
  if (!params.normalize) return cost;
  return cost / std::min(params.c_miss * params.p_target, params.c_fa * (1.0 - params.p_target));
}

double compute_min_dcf(std::span<const double> targets, std::span<const double> nontargets,
                       const DcfParams& params) {
  params.validate();
  double best = std::numeric_limits<double>::infinity();
  for (const OperatingPoint& op : operating_points(targets, nontargets)) {
    best = std::min(best, detection_cost(op, params));
  }
  return best;
}

double compute_min_dcf(const std::vector<ScoredTrial>& scores, const DcfParams& params) {
  Vector t, n;
  split_scores(scores, t, n);
  return compute_min_dcf(t, n, params);
}

MetricsReport evaluate_scores(const std::vector<ScoredTrial>& scores, const DcfParams& dcf08,
                              const DcfParams& dcf10) {
  Vector t, n;
  split_scores(scores, t, n);
  MetricsReport r;
  const EerResult eer = compute_eer(t, n);
  r.eer = eer.eer;
  r.eer_threshold = eer.threshold;
  r.min_dcf08 = compute_min_dcf(t, n, dcf08);
  r.min_dcf10 = compute_min_dcf(t, n, dcf10);
  r.score_count = scores.size();
  r.target_count = t.size();
  r.nontarget_count = n.size();
  r.dcf08 = dcf08;
  r.dcf10 = dcf10;
  return r;
}

DistributionStats describe_distribution(std::span<const double> values, std::size_t bins) {
  if (bins == 0) throw std::invalid_argument("histogram needs at least one bin");
  DistributionStats s;
  s.count = values.size();
  s.bin_counts.assign(bins, 0);
  if (values.empty()) {
    s.bin_edges.assign(bins + 1, 0.0);
    return s;
  }
  double sum = 0.0;
  for (double v : values) sum += v;
  s.mean = sum / static_cast<double>(values.size());
  double sq = 0.0;
  for (double v : values) sq += (v - s.mean) * (v - s.mean);
  s.variance = sq / static_cast<double>(values.size());
  s.stddev = std::sqrt(s.variance);

  const auto [lo_it, hi_it] = std::minmax_element(values.begin(), values.end());
  const double lo = *lo_it;
  const double hi = *hi_it;
  const double width = (hi - lo) / static_cast<double>(bins);
  s.bin_edges.resize(bins + 1);
  for (std::size_t k = 0; k <= bins; ++k) s.bin_edges[k] = lo + width * static_cast<double>(k);
  s.bin_edges.back() = hi;
  for (double v : values) {
    std::size_t k = width > 0.0 ? static_cast<std::size_t>((v - lo) / width) : 0;
    s.bin_counts[std::min(k, bins - 1)] += 1;
  }
  return s;
}

DistributionStats embedding_norm_stats(const EmbeddingNet& net, const Corpus& split, std::size_t bins) {
  const Matrix features = extract_features(net, split);
  Vector norms(features.rows());
  for (std::size_t i = 0; i < features.rows(); ++i) norms[i] = norm2(features.row(i));
  return describe_distribution(norms, bins);
}

Vector pairwise_weight_distances(const Matrix& weights) {
  const std::size_t classes = weights.cols();
  if (classes < 2) throw std::invalid_argument("weight distances need at least two columns");
  std::vector<Vector> unit(classes);
  for (std::size_t j = 0; j < classes; ++j) {
    unit[j] = weights.column(j);
    const double n = norm2(unit[j]);
    if (!(n > 1e-12)) throw std::invalid_argument("weight column " + std::to_string(j) + " is zero");
    for (double& v : unit[j]) v /= n;
  }
  Vector d;
  d.reserve(classes * (classes - 1) / 2);
  for (std::size_t i = 0; i < classes; ++i)
    for (std::size_t j = i + 1; j < classes; ++j) d.push_back(squared_distance(unit[i], unit[j]));
  return d;
}

DistributionStats weight_distance_stats(const Matrix& weights, std::size_t bins) {
  return describe_distribution(pairwise_weight_distances(weights), bins);
}

nlohmann::json to_json(const MetricsReport& r) {
  auto dcf = [](const DcfParams& p) {
    return nlohmann::json{{"c_miss", p.c_miss}, {"c_fa", p.c_fa}, {"p_target", p.p_target}, {"normalize", p.normalize}};
  };
  return {{"eer", r.eer},
          {"eer_threshold", r.eer_threshold},
          {"min_dcf08", r.min_dcf08},
          {"min_dcf10", r.min_dcf10},
          {"score_count", r.score_count},
          {"target_count", r.target_count},
          {"nontarget_count", r.nontarget_count},
          {"dcf08", dcf(r.dcf08)},
          {"dcf10", dcf(r.dcf10)}};
}

nlohmann::json to_json(const DistributionStats& s) {
  return {{"count", s.count},       {"mean", s.mean},           {"stddev", s.stddev},
          {"variance", s.variance}, {"bin_edges", s.bin_edges}, {"bin_counts", s.bin_counts}};
}

std::string operating_points_csv(const std::vector<OperatingPoint>& points) {
  std::ostringstream os;
  os << "threshold,misses,false_alarms,p_miss,p_fa\n";
  for (const OperatingPoint& p : points) {
    os << (std::isinf(p.threshold) ? std::string("inf") : format_double(p.threshold)) << ',' << p.misses << ','
       << p.false_alarms << ',' << format_double(p.p_miss) << ',' << format_double(p.p_fa) << '\n';
  }
  return os.str();
}

std::string histogram_csv(const DistributionStats& s) {
  std::ostringstream os;
  os << "bin_lo,bin_hi,count\n";
  for (std::size_t k = 0; k < s.bin_counts.size(); ++k) {
    os << format_double(s.bin_edges[k]) << ',' << format_double(s.bin_edges[k + 1]) << ',' << s.bin_counts[k] << '\n';
  }
  return os.str();
}

}  // namespace lms
