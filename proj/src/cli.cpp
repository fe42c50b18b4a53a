#include "lms/cli.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <sstream>
#include <stdexcept>

#include <CLI11.hpp>

#include "lms/experiment.hpp"
#include "lms/gradcheck.hpp"

namespace lms {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct MissingInput : std::runtime_error {
  using std::runtime_error::runtime_error;
};

const fs::path& require(const fs::path& p) {
  if (!fs::exists(p)) throw MissingInput("missing input: " + p.string());
  return p;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

std::string with_digest(const std::string& csv, const std::string& digest) {
  return "# config_digest " + digest + "\n" + csv;
}

struct Common {
  std::string config_path;
  std::vector<std::string> overrides;
  std::string data_dir;

  ExperimentConfig load() const { return load_experiment_config(config_path, overrides); }
  fs::path data(const ExperimentConfig& cfg) const {
    return data_dir.empty() ? resolve_output_dir(cfg) : fs::path(data_dir);
  }
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("-c,--config", c.config_path, "Experiment config (JSON)");
  cmd->add_option("--set", c.overrides, "Override a config field: section.field=value")->take_all();
}

void add_data_dir(CLI::App* cmd, Common& c) {
  cmd->add_option("--data-dir", c.data_dir, "Directory holding corpus.bin and trials.txt (default: output dir)");
}

fs::path prepare_output(const ExperimentConfig& cfg) {
  const fs::path dir = resolve_output_dir(cfg);
  fs::create_directories(dir);
  json j = cfg.to_json();
  j["config_digest"] = cfg.digest();
  write_text(dir / "config.json", j.dump(2) + "\n");
  return dir;
}

Dataset load_dataset(const ExperimentConfig& cfg, const fs::path& dir, bool with_trials) {
  Corpus corpus = read_corpus(require(dir / "corpus.bin"));
  if (corpus.feature_dim != cfg.corpus.feature_dim || corpus.num_speakers() != cfg.corpus.n_speakers) {
    throw std::invalid_argument("corpus: " + (dir / "corpus.bin").string() +
                                " does not match corpus.feature_dim / corpus.n_speakers");
  }
  TrialSet trials;
  if (with_trials) {
    trials = read_trials(require(dir / "trials.txt"));
    if (trials.empty()) throw std::invalid_argument("trials: " + (dir / "trials.txt").string() + " is empty");
  }
  Dataset d;
  d.corpus = std::move(corpus);
  d.split = split_corpus(d.corpus, cfg.split);
  d.trials = std::move(trials);
  return d;
}

int cmd_gen_data(const Common& c, std::ostream& out) {
  const ExperimentConfig cfg = c.load();
  const fs::path dir = prepare_output(cfg);
  const std::string digest = cfg.digest();
  const Dataset d = build_dataset(cfg);
  write_corpus(d.corpus, dir / "corpus.bin", digest);
  write_trials(d.trials, dir / "trials.txt", digest);
  out << "wrote " << d.corpus.num_utterances() << " utterances and " << d.trials.size() << " trials to "
      << dir.string() << '\n';
  return exit_code::kOk;
}

int cmd_train(const Common& c, std::size_t checkpoint_every, const std::string& resume, std::ostream& out) {
  const ExperimentConfig cfg = c.load();
  const Dataset d = load_dataset(cfg, c.data(cfg), false);
  const fs::path dir = prepare_output(cfg);
  const std::string digest = cfg.digest();

  std::optional<Trainer> trainer;
  if (resume.empty()) {
    trainer.emplace(initial_network(cfg), cfg.train, cfg.loss, d.split.train, &d.split.validation, cfg.seed);
  } else {
    Checkpoint ck = checkpoint_load(require(resume), cfg.network);
    trainer.emplace(std::move(ck), cfg.train, cfg.loss, d.split.train, &d.split.validation);
  }
  if (checkpoint_every > 0) fs::create_directories(dir / "checkpoints");

  std::vector<StepLog> log;
  trainer->run([&](const StepLog& s) {
    log.push_back(s);
    const auto done = s.step + 1;
    if (checkpoint_every > 0 && done % static_cast<std::int64_t>(checkpoint_every) == 0) {
      std::ostringstream name;
      name << "step-" << std::setw(6) << std::setfill('0') << done << ".ckpt";
      checkpoint_save(trainer->checkpoint(digest), dir / "checkpoints" / name.str());
    }
  });
  checkpoint_save(trainer->checkpoint(digest), dir / "model.ckpt");
  write_text(dir / "loss_log.csv", loss_log_csv(log, digest));
  out << "trained " << trainer->state().step << " steps, final lr " << trainer->state().learning_rate
      << ", checkpoint " << (dir / "model.ckpt").string() << '\n';
  return exit_code::kOk;
}

int cmd_evaluate(const Common& c, const std::string& model, std::ostream& out) {
  const ExperimentConfig cfg = c.load();
  const Dataset d = load_dataset(cfg, c.data(cfg), true);
  const fs::path dir = prepare_output(cfg);
  const std::string digest = cfg.digest();
  const fs::path model_path = model.empty() ? dir / "model.ckpt" : fs::path(model);
  const Checkpoint ck = checkpoint_load(require(model_path), cfg.network);

  const std::vector<ScoredTrial> scores = score_trials(ck.net, d.split.test, d.trials);
  const MetricsReport report = evaluate_scores(scores, cfg.eval.dcf08, cfg.eval.dcf10);
  std::vector<double> tar, non;
  for (const ScoredTrial& s : scores) (s.trial.target ? tar : non).push_back(s.score);

  write_text(dir / "scores.txt", scores_text(scores, digest));
  write_text(dir / "metrics.json", metrics_json(report, digest).dump(2) + "\n");
  write_text(dir / "operating_points.csv", with_digest(operating_points_csv(operating_points(tar, non)), digest));
  out << std::fixed << std::setprecision(4) << "EER " << 100.0 * report.eer << "%  minDCF08 " << report.min_dcf08
      << "  minDCF10 " << report.min_dcf10 << "  (" << report.target_count << " target / "
      << report.nontarget_count << " nontarget)\n";
  return exit_code::kOk;
}

int cmd_analyze(const Common& c, const std::string& model, std::ostream& out) {
  const ExperimentConfig cfg = c.load();
  const Dataset d = load_dataset(cfg, c.data(cfg), false);
  const fs::path dir = prepare_output(cfg);
  const std::string digest = cfg.digest();
  const fs::path model_path = model.empty() ? dir / "model.ckpt" : fs::path(model);
  const Checkpoint ck = checkpoint_load(require(model_path), cfg.network);

  const DistributionStats norms = embedding_norm_stats(ck.net, d.split.test, cfg.eval.histogram_bins);
  const DistributionStats dists = weight_distance_stats(ck.net.params.output_weights, cfg.eval.histogram_bins);
  write_text(dir / "analysis.json", analysis_json(norms, dists, digest).dump(2) + "\n");
  write_text(dir / "feature_norm_hist.csv", with_digest(histogram_csv(norms), digest));
  write_text(dir / "weight_distance_hist.csv", with_digest(histogram_csv(dists), digest));
  out << std::setprecision(6) << "feature norm mean " << norms.mean << " var " << norms.variance
      << "\nweight distance mean " << dists.mean << " var " << dists.variance << '\n';
  return exit_code::kOk;
}

int cmd_gradcheck(const Common& c, std::size_t instances, std::ostream& out) {
  const ExperimentConfig cfg = c.load();
  GradCheckOptions opts;
  opts.instances = instances;
  opts.seed = cfg.seed;
  const std::vector<GradCheckResult> results = run_gradcheck_suite(opts);
  const std::string table = format_gradcheck_table(results);
  out << table;
  const fs::path dir = prepare_output(cfg);
  write_text(dir / "gradcheck.txt", "# config_digest " + cfg.digest() + "\n" + table);
  const bool ok = std::all_of(results.begin(), results.end(), [](const GradCheckResult& r) { return r.passed(); });
  return ok ? exit_code::kOk : exit_code::kCheckFailed;
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

int cmd_compare(const Common& a, const std::string& config_b, const std::vector<std::string>& overrides_b,
                std::size_t seeds, std::ostream& out) {
  const ExperimentConfig cfg_a = a.load();
  std::vector<std::string> ob = config_b.empty() ? a.overrides : std::vector<std::string>{};
  ob.insert(ob.end(), overrides_b.begin(), overrides_b.end());
  const ExperimentConfig cfg_b = load_experiment_config(config_b.empty() ? a.config_path : config_b, ob);
  const json ja = cfg_a.to_json(), jb = cfg_b.to_json();
  for (const char* section : {"corpus", "split", "trials"}) {
    if (ja[section] != jb[section]) {
      throw std::invalid_argument(std::string(section) + ": A and B must share data settings to compare");
    }
  }
  if (seeds == 0) throw std::invalid_argument("--seeds must be >= 1");

  const fs::path dir = prepare_output(cfg_a);
  json report = {{"config_digest_a", cfg_a.digest()}, {"config_digest_b", cfg_b.digest()}, {"runs", json::array()}};
  std::map<std::string, std::vector<double>> deltas;
  for (std::size_t k = 0; k < seeds; ++k) {
    ExperimentConfig ra = cfg_a, rb = cfg_b;
    ra.seed += k;
    rb.seed += k;
    ra.corpus.seed += k;
    rb.corpus.seed += k;
    const Dataset data = build_dataset(ra);
    const RunResult res_a = run_experiment(ra, data);
    const RunResult res_b = run_experiment(rb, data);
    json run = {{"seed", ra.seed}, {"corpus_seed", ra.corpus.seed}};
    out << "seed " << ra.seed << " (corpus " << ra.corpus.seed << ")\n";
    for (const MetricDelta& m : metric_deltas(res_a, res_b)) {
      run[m.name] = {{"a", m.a}, {"b", m.b}, {"delta", m.delta()}};
      deltas[m.name].push_back(m.delta());
      out << "  " << std::left << std::setw(26) << m.name << std::right << std::setprecision(6)
          << std::setw(14) << m.a << std::setw(14) << m.b << std::setw(14) << m.delta() << '\n';
    }
    report["runs"].push_back(run);
  }
  out << "median delta (B - A)\n";
  for (const auto& [name, values] : deltas) {
    report["median_delta"][name] = median(values);
    out << "  " << std::left << std::setw(26) << name << std::right << std::setw(14) << median(values) << '\n';
  }
  write_text(dir / "compare.json", report.dump(2) + "\n");
  return exit_code::kOk;
}

}  // namespace

int run_command(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Large-margin softmax speaker embedding toolkit", args.empty() ? "lms" : args.front()};
  app.require_subcommand(1);

  Common common;
  std::size_t checkpoint_every = 0;
  std::string resume, model, config_b;
  std::vector<std::string> overrides_b;
  std::size_t instances = 100, seeds = 1;

  CLI::App* gen = app.add_subcommand("gen-data", "Generate the synthetic corpus and trial list");
  add_common(gen, common);
  CLI::App* train = app.add_subcommand("train", "Train a network and write checkpoints and the loss log");
  add_common(train, common);
  add_data_dir(train, common);
  train->add_option("--checkpoint-every", checkpoint_every, "Also save a checkpoint every N steps");
  train->add_option("--resume", resume, "Continue from a checkpoint");
  CLI::App* evaluate = app.add_subcommand("evaluate", "Score the trial list and report EER / minDCF");
  add_common(evaluate, common);
  add_data_dir(evaluate, common);
  evaluate->add_option("--model", model, "Checkpoint (default: <output>/model.ckpt)");
  CLI::App* analyze = app.add_subcommand("analyze", "Feature-norm and weight-distance statistics");
  add_common(analyze, common);
  add_data_dir(analyze, common);
  analyze->add_option("--model", model, "Checkpoint (default: <output>/model.ckpt)");
  CLI::App* gradcheck = app.add_subcommand("gradcheck", "Finite-difference check of every gradient");
  add_common(gradcheck, common);
  gradcheck->add_option("--instances", instances, "Random instances per check")->check(CLI::PositiveNumber);
  CLI::App* compare = app.add_subcommand("compare", "Train and evaluate configs A and B on shared data");
  add_common(compare, common);
  compare->add_option("--config-b", config_b, "Config for B (default: same file as A)");
  compare->add_option("--set-b", overrides_b, "Override applied to B only")->take_all();
  compare->add_option("--seeds", seeds, "Number of consecutive seeds");

  std::vector<std::string> rev(args.size() > 1 ? args.begin() + 1 : args.end(), args.end());
  std::reverse(rev.begin(), rev.end());
  try {
    app.parse(rev);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? exit_code::kOk : exit_code::kUsage;
  }

  try {
    if (gen->parsed()) return cmd_gen_data(common, out);
    if (train->parsed()) return cmd_train(common, checkpoint_every, resume, out);
    if (evaluate->parsed()) return cmd_evaluate(common, model, out);
    if (analyze->parsed()) return cmd_analyze(common, model, out);
    if (gradcheck->parsed()) return cmd_gradcheck(common, instances, out);
    if (compare->parsed()) return cmd_compare(common, config_b, overrides_b, seeds, out);
  } catch (const MissingInput& e) {
    err << "error: " << e.what() << '\n';
    return exit_code::kMissingInput;
  } catch (const std::invalid_argument& e) {
    err << "invalid config: " << e.what() << '\n';
    return exit_code::kUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return exit_code::kMissingInput;
  }
  return exit_code::kUsage;
}

}  // namespace lms
