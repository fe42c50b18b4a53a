#include "lms/experiment.hpp"

#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <set>
#include <sstream>
#include <stdexcept>

namespace lms {

using nlohmann::json;

namespace {

[[noreturn]] void field_error(const std::string& path, const std::string& what) {
  throw std::invalid_argument(path + ": " + what);
}

// Typed, path-aware access to one JSON object. Every key must be consumed.
class Section {
 public:
  Section(const json& j, std::string path) : path_(std::move(path)) {
    if (j.is_null()) return;
    if (!j.is_object()) field_error(path_.empty() ? "config" : path_, "expected an object");
    j_ = &j;
  }

  bool has(const std::string& key) const { return j_ != nullptr && j_->contains(key); }

  void get(const std::string& key, std::size_t& out) {
    const json* v = take(key);
    if (v == nullptr) return;
    if (!v->is_number_unsigned()) field_error(at(key), "expected a non-negative integer");
    out = v->get<std::size_t>();
  }
  void get(const std::string& key, double& out) {
    const json* v = take(key);
    if (v == nullptr) return;
    if (!v->is_number()) field_error(at(key), "expected a number");
    out = v->get<double>();
  }
  void get(const std::string& key, bool& out) {
    const json* v = take(key);
    if (v == nullptr) return;
    if (!v->is_boolean()) field_error(at(key), "expected true or false");
    out = v->get<bool>();
  }
  void get(const std::string& key, std::string& out) {
    const json* v = take(key);
    if (v == nullptr) return;
    if (!v->is_string()) field_error(at(key), "expected a string");
    out = v->get<std::string>();
  }
  void get(const std::string& key, std::vector<std::size_t>& out) {
    const json* v = take(key);
    if (v == nullptr) return;
    if (!v->is_array()) field_error(at(key), "expected an array of non-negative integers");
    std::vector<std::size_t> values;
    for (const json& e : *v) {
      if (!e.is_number_unsigned()) field_error(at(key), "expected an array of non-negative integers");
      values.push_back(e.get<std::size_t>());
    }
    out = std::move(values);
  }

  Section child(const std::string& key) {
    const json* v = take(key);
    return Section(v == nullptr ? null_ : *v, at(key));
  }

  /// Rejects keys that no getter asked for.
  void finish() const {
    if (j_ == nullptr) return;
    for (auto it = j_->begin(); it != j_->end(); ++it) {
      if (!used_.count(it.key())) field_error(at(it.key()), "unknown field");
    }
  }

 private:
  const json* take(const std::string& key) {
    used_.insert(key);
    if (j_ == nullptr) return nullptr;
    auto it = j_->find(key);
    return it == j_->end() ? nullptr : &*it;
  }
  std::string at(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

  inline static const json null_{};
  const json* j_ = nullptr;
  std::string path_;
  std::set<std::string> used_;
};

std::size_t pairs(std::size_t n) { return n * (n - 1) / 2; }

json dcf_json(const DcfParams& p) {
  return {{"c_miss", p.c_miss}, {"c_fa", p.c_fa}, {"p_target", p.p_target}, {"normalize", p.normalize}};
}

void read_dcf(Section s, DcfParams& p) {
  s.get("c_miss", p.c_miss);
  s.get("c_fa", p.c_fa);
  s.get("p_target", p.p_target);
  s.get("normalize", p.normalize);
  s.finish();
}

std::string fmt(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

}  // namespace

AnnealSchedule desk_anneal(LossKind kind) {
  switch (kind) {
    case LossKind::kAMSoftmax: return {0.0, 1000.0, 0.02, 5.0};
    case LossKind::kArcSoftmax: return {0.0, 1000.0, 0.005, 5.0};
    case LossKind::kASoftmax: return {10.0, 1000.0, 0.005, 5.0};
    default: return {};
  }
}

ExperimentConfig default_experiment_config() {
  ExperimentConfig cfg;
  cfg.network.input_dim = cfg.corpus.feature_dim;
  cfg.network.num_classes = cfg.split.n_train_speakers;
  cfg.loss = make_loss_config(LossKind::kSoftmax);
  cfg.loss.anneal = desk_anneal(cfg.loss.kind);
  return cfg;
}

void ExperimentConfig::validate() const {
  corpus.validate();
  if (split.n_train_speakers < 2) field_error("split.n_train_speakers", "must be >= 2");
  if (split.n_test_speakers < 2) field_error("split.n_test_speakers", "must be >= 2");
  if (split.n_train_speakers + split.n_test_speakers > corpus.n_speakers) {
    field_error("split.n_test_speakers", "train + test speakers exceed corpus.n_speakers (" +
                                             std::to_string(corpus.n_speakers) + ")");
  }
  if (split.val_utts_per_speaker >= corpus.utts_per_speaker) {
    field_error("split.val_utts_per_speaker", "must leave training utterances for every speaker");
  }
  const std::size_t u = corpus.utts_per_speaker;
  const std::size_t target_pairs = split.n_test_speakers * pairs(u);
  const std::size_t nontarget_pairs = pairs(split.n_test_speakers) * u * u;
  if (trials.n_target == 0 || trials.n_target > target_pairs)
    field_error("trials.n_target", "must be in [1, " + std::to_string(target_pairs) + "]");
  if (trials.n_nontarget == 0 || trials.n_nontarget > nontarget_pairs)
    field_error("trials.n_nontarget", "must be in [1, " + std::to_string(nontarget_pairs) + "]");

  network.validate();
  if (network.input_dim != corpus.feature_dim) field_error("network.input_dim", "must equal corpus.feature_dim");
  if (network.num_classes != split.n_train_speakers)
    field_error("network.num_classes", "must equal split.n_train_speakers");
  if (corpus.frames_min < network.min_segment_length()) {
    field_error("corpus.frames_min", "utterances must have at least " +
                                         std::to_string(network.min_segment_length()) +
                                         " frames for this network");
  }

  train.validate();
  if (train.speakers_per_batch > split.n_train_speakers)
    field_error("train.speakers_per_batch", "exceeds split.n_train_speakers");
  if (train.frames_min < network.min_segment_length()) {
    field_error("train.frames_min", "must be >= " + std::to_string(network.min_segment_length()) +
                                        " (network receptive field + 1)");
  }

  loss.validate();
  if (loss.kind == LossKind::kGE2E && train.segments_per_speaker < 2)
    field_error("train.segments_per_speaker", "ge2e needs at least 2 segments per speaker");

  try {
    eval.dcf08.validate();
  } catch (const std::invalid_argument& e) {
    field_error("eval.dcf08", e.what());
  }
  try {
    eval.dcf10.validate();
  } catch (const std::invalid_argument& e) {
    field_error("eval.dcf10", e.what());
  }
  if (eval.histogram_bins == 0) field_error("eval.histogram_bins", "must be >= 1");
  if (output_dir.empty()) field_error("output_dir", "must not be empty");
}

json ExperimentConfig::to_json() const {
  json j;
  j["seed"] = seed;
  j["output_dir"] = output_dir;
  j["corpus"] = {{"n_speakers", corpus.n_speakers},
                 {"utts_per_speaker", corpus.utts_per_speaker},
                 {"frames_min", corpus.frames_min},
                 {"frames_max", corpus.frames_max},
                 {"feature_dim", corpus.feature_dim},
                 {"within_speaker_noise", corpus.within_speaker_noise},
                 {"channel_noise", corpus.channel_noise},
                 {"speaker_gain", corpus.speaker_gain},
                 {"seed", corpus.seed}};
  j["split"] = {{"n_train_speakers", split.n_train_speakers},
                {"n_test_speakers", split.n_test_speakers},
                {"val_utts_per_speaker", split.val_utts_per_speaker}};
  j["trials"] = {{"n_target", trials.n_target}, {"n_nontarget", trials.n_nontarget}};
  j["network"] = {{"frame_kernel_sizes", network.frame_kernel_sizes},
                  {"frame_widths", network.frame_widths},
                  {"segment_widths", network.segment_widths},
                  {"embedding_layer_index", network.embedding_layer_index},
                  {"use_batchnorm", network.use_batchnorm},
                  {"remove_last_relu", network.remove_last_relu},
                  {"bn_before_relu", network.bn_before_relu},
                  {"last_layer_batchnorm", network.last_layer_batchnorm},
                  {"bn_momentum", network.bn_momentum},
                  {"bn_epsilon", network.bn_epsilon}};
  j["train"] = {{"steps", train.steps},
                {"speakers_per_batch", train.speakers_per_batch},
                {"segments_per_speaker", train.segments_per_speaker},
                {"frames_min", train.frames_min},
                {"frames_max", train.frames_max},
                {"learning_rate", train.learning_rate},
                {"weight_decay", train.weight_decay},
                {"decay_bn_scale", train.decay_bn_scale},
                {"validate_every", train.validate_every},
                {"lr_halving_patience", train.lr_halving_patience},
                {"lr_stop_threshold", train.lr_stop_threshold},
                {"min_improvement", train.min_improvement}};
  j["loss"] = {{"kind", std::string(lms::to_string(loss.kind))},
               {"scale", loss.scale},
               {"normalize_weights", loss.normalize_weights},
               {"normalize_features", loss.normalize_features},
               {"margins", {{"m1", loss.margins.m1}, {"m2", loss.margins.m2}, {"m3", loss.margins.m3}}},
               {"ring_weight", loss.ring_weight},
               {"ring_target", loss.ring_target},
               {"mhe_weight", loss.mhe_weight},
               {"ge2e_bias", loss.ge2e_bias},
               {"anneal",
                {{"lambda_floor", loss.anneal.lambda_floor},
                 {"lambda_base", loss.anneal.lambda_base},
                 {"gamma", loss.anneal.gamma},
                 {"alpha", loss.anneal.alpha}}}};
  j["eval"] = {{"dcf08", dcf_json(eval.dcf08)},
               {"dcf10", dcf_json(eval.dcf10)},
               {"histogram_bins", eval.histogram_bins}};
  return j;
}

std::string ExperimentConfig::digest() const {
  json j = to_json();
  j.erase("output_dir");
  return hex64(fnv1a64(j.dump()));
}

ExperimentConfig experiment_config_from_json(const json& j) {
  ExperimentConfig cfg = default_experiment_config();
  Section root(j, "");
  std::size_t seed = cfg.seed;
  root.get("seed", seed);
  cfg.seed = seed;
  root.get("output_dir", cfg.output_dir);

  {
    Section s = root.child("corpus");
    CorpusSpec& c = cfg.corpus;
    std::size_t cseed = c.seed;
    s.get("n_speakers", c.n_speakers);
    s.get("utts_per_speaker", c.utts_per_speaker);
    s.get("frames_min", c.frames_min);
    s.get("frames_max", c.frames_max);
    s.get("feature_dim", c.feature_dim);
    s.get("within_speaker_noise", c.within_speaker_noise);
    s.get("channel_noise", c.channel_noise);
    s.get("speaker_gain", c.speaker_gain);
    s.get("seed", cseed);
    c.seed = cseed;
    s.finish();
  }
  {
    Section s = root.child("split");
    s.get("n_train_speakers", cfg.split.n_train_speakers);
    s.get("n_test_speakers", cfg.split.n_test_speakers);
    s.get("val_utts_per_speaker", cfg.split.val_utts_per_speaker);
    s.finish();
  }
  {
    Section s = root.child("trials");
    s.get("n_target", cfg.trials.n_target);
    s.get("n_nontarget", cfg.trials.n_nontarget);
    s.finish();
  }
  {
    Section s = root.child("network");
    NetworkConfig& n = cfg.network;
    s.get("frame_kernel_sizes", n.frame_kernel_sizes);
    s.get("frame_widths", n.frame_widths);
    s.get("segment_widths", n.segment_widths);
    s.get("embedding_layer_index", n.embedding_layer_index);
    s.get("use_batchnorm", n.use_batchnorm);
    s.get("remove_last_relu", n.remove_last_relu);
    s.get("bn_before_relu", n.bn_before_relu);
    s.get("last_layer_batchnorm", n.last_layer_batchnorm);
    s.get("bn_momentum", n.bn_momentum);
    s.get("bn_epsilon", n.bn_epsilon);
    s.finish();
    n.input_dim = cfg.corpus.feature_dim;
    n.num_classes = cfg.split.n_train_speakers;
  }
  {
    Section s = root.child("train");
    TrainConfig& t = cfg.train;
    s.get("steps", t.steps);
    s.get("speakers_per_batch", t.speakers_per_batch);
    s.get("segments_per_speaker", t.segments_per_speaker);
    s.get("frames_min", t.frames_min);
    s.get("frames_max", t.frames_max);
    s.get("learning_rate", t.learning_rate);
    s.get("weight_decay", t.weight_decay);
    s.get("decay_bn_scale", t.decay_bn_scale);
    s.get("validate_every", t.validate_every);
    s.get("lr_halving_patience", t.lr_halving_patience);
    s.get("lr_stop_threshold", t.lr_stop_threshold);
    s.get("min_improvement", t.min_improvement);
    s.finish();
  }
  {
    Section s = root.child("loss");
    std::string kind(to_string(cfg.loss.kind));
    s.get("kind", kind);
    LossConfig& l = cfg.loss;
    l = make_loss_config(parse_loss_kind(kind));
    l.anneal = desk_anneal(l.kind);
    s.get("scale", l.scale);
    s.get("normalize_weights", l.normalize_weights);
    s.get("normalize_features", l.normalize_features);
    {
      Section m = s.child("margins");
      m.get("m1", l.margins.m1);
      m.get("m2", l.margins.m2);
      m.get("m3", l.margins.m3);
      m.finish();
    }
    s.get("ring_weight", l.ring_weight);
    s.get("ring_target", l.ring_target);
    s.get("mhe_weight", l.mhe_weight);
    s.get("ge2e_bias", l.ge2e_bias);
    {
      Section a = s.child("anneal");
      a.get("lambda_floor", l.anneal.lambda_floor);
      a.get("lambda_base", l.anneal.lambda_base);
      a.get("gamma", l.anneal.gamma);
      a.get("alpha", l.anneal.alpha);
      a.finish();
    }
    s.finish();
  }
  {
    Section s = root.child("eval");
    read_dcf(s.child("dcf08"), cfg.eval.dcf08);
    read_dcf(s.child("dcf10"), cfg.eval.dcf10);
    s.get("histogram_bins", cfg.eval.histogram_bins);
    s.finish();
  }
  root.finish();
  return cfg;
}

void apply_override(json& j, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) {
    throw std::invalid_argument("override '" + assignment + "': expected key=value");
  }
  const std::string key = assignment.substr(0, eq);
  const std::string raw = assignment.substr(eq + 1);
  json value = json::parse(raw, nullptr, false);
  if (value.is_discarded()) value = raw;

  json* node = &j;
  std::size_t start = 0;
  while (true) {
    const auto dot = key.find('.', start);
    const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (part.empty()) throw std::invalid_argument("override '" + assignment + "': empty key segment");
    if (!node->is_object()) {
      if (!node->is_null()) throw std::invalid_argument("override '" + assignment + "': " + key.substr(0, start - 1) + " is not a section");
      *node = json::object();
    }
    node = &(*node)[part];
    if (dot == std::string::npos) break;
    start = dot + 1;
  }
  *node = std::move(value);
}

ExperimentConfig load_experiment_config(const std::filesystem::path& path,
                                        const std::vector<std::string>& overrides) {
  json j = json::object();
  if (!path.empty()) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open config file " + path.string());
    j = json::parse(in, nullptr, false);
    if (j.is_discarded()) throw std::invalid_argument("config file " + path.string() + " is not valid JSON");
  }
  for (const std::string& o : overrides) apply_override(j, o);
  ExperimentConfig cfg = experiment_config_from_json(j);
  cfg.validate();
  return cfg;
}

std::filesystem::path resolve_output_dir(const ExperimentConfig& config) {
  std::filesystem::path dir(config.output_dir);
  const char* root = std::getenv("LMS_OUTPUT_ROOT");
  if (root != nullptr && *root != '\0' && dir.is_relative()) return std::filesystem::path(root) / dir;
  return dir;
}

Dataset dataset_from_corpus(const ExperimentConfig& config, Corpus corpus, TrialSet trials) {
  Dataset d;
  d.corpus = std::move(corpus);
  d.split = split_corpus(d.corpus, config.split);
  if (trials.empty()) {
    RngStream rng(config.corpus.seed, streams::kTrials);
    trials = generate_trials(d.split.test, rng, config.trials.n_target, config.trials.n_nontarget);
  }
  d.trials = std::move(trials);
  return d;
}

Dataset build_dataset(const ExperimentConfig& config) {
  return dataset_from_corpus(config, generate_corpus(config.corpus), {});
}

EmbeddingNet initial_network(const ExperimentConfig& config) {
  RngStream rng(config.seed, streams::kInit);
  return init_network(config.network, rng, config.loss.ring_target);
}

RunResult run_experiment(const ExperimentConfig& config, const Dataset& data,
                         const std::function<void(const StepLog&)>& on_step) {
  config.validate();
  RunResult r;
  Trainer trainer(initial_network(config), config.train, config.loss, data.split.train,
                  &data.split.validation, config.seed);
  trainer.run([&](const StepLog& log) {
    r.log.push_back(log);
    if (on_step) on_step(log);
  });
  r.net = trainer.net();
  r.state = trainer.state();
  r.scores = score_trials(r.net, data.split.test, data.trials);
  r.metrics = evaluate_scores(r.scores, config.eval.dcf08, config.eval.dcf10);
  r.feature_norms = embedding_norm_stats(r.net, data.split.test, config.eval.histogram_bins);
  r.weight_distances = weight_distance_stats(r.net.params.output_weights, config.eval.histogram_bins);
  return r;
}

std::string loss_log_csv(const std::vector<StepLog>& log, const std::string& digest) {
  std::ostringstream os;
  os << "# config_digest " << digest << '\n';
  os << "step,primary_loss,ring_loss,mhe_loss,lambda,learning_rate,feature_norm_mean,validation_loss\n";
  for (const StepLog& s : log) {
    os << s.step << ',' << fmt(s.primary_loss) << ',' << fmt(s.ring_loss) << ',' << fmt(s.mhe_loss) << ','
       << fmt(s.lambda) << ',' << fmt(s.learning_rate) << ',' << fmt(s.feature_norm_mean) << ',';
    if (s.validation_loss) os << fmt(*s.validation_loss);
    os << '\n';
  }
  return os.str();
}

std::string scores_text(const std::vector<ScoredTrial>& scores, const std::string& digest) {
  std::ostringstream os;
  os << "# config_digest " << digest << '\n';
  for (const ScoredTrial& s : scores) {
    os << s.trial.enroll << ' ' << s.trial.test << ' ' << fmt(s.score) << ' '
       << (s.trial.target ? "target" : "nontarget") << '\n';
  }
  return os.str();
}

json metrics_json(const MetricsReport& metrics, const std::string& digest) {
  json j = to_json(metrics);
  j["config_digest"] = digest;
  return j;
}

json analysis_json(const DistributionStats& norms, const DistributionStats& distances, const std::string& digest) {
  return {{"config_digest", digest}, {"feature_norms", to_json(norms)}, {"weight_distances", to_json(distances)}};
}

std::vector<MetricDelta> metric_deltas(const RunResult& a, const RunResult& b) {
  return {
      {"eer", a.metrics.eer, b.metrics.eer},
      {"min_dcf08", a.metrics.min_dcf08, b.metrics.min_dcf08},
      {"min_dcf10", a.metrics.min_dcf10, b.metrics.min_dcf10},
      {"feature_norm_mean", a.feature_norms.mean, b.feature_norms.mean},
      {"feature_norm_variance", a.feature_norms.variance, b.feature_norms.variance},
      {"weight_distance_mean", a.weight_distances.mean, b.weight_distances.mean},
      {"weight_distance_variance", a.weight_distances.variance, b.weight_distances.variance},
  };
}

}  // namespace lms
