#include <filesystem>
#include <fstream>
#include <iterator>
#include <sstream>

#include <gtest/gtest.h>
#include <json.hpp>

#include "lms/cli.hpp"

namespace lms {
namespace {

namespace fs = std::filesystem;

const std::vector<std::string> kTiny = {
    "--set", "corpus.n_speakers=8", "corpus.utts_per_speaker=6", "split.n_train_speakers=4",
    "split.n_test_speakers=4", "split.val_utts_per_speaker=1", "trials.n_target=20", "trials.n_nontarget=40",
    "train.steps=20", "train.speakers_per_batch=4", "train.validate_every=10"};

struct CliRun {
  int code;
  std::string out, err;
};

CliRun cli(std::vector<std::string> args, const fs::path& dir, bool tiny = true) {
  args.insert(args.begin(), "lms");
  if (tiny) {
    args.insert(args.end(), kTiny.begin(), kTiny.end());
    args.push_back("output_dir=" + dir.string());
  }
  std::ostringstream out, err;
  const int code = run_command(args, out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

fs::path fresh(const std::string& name) {
  const fs::path d = fs::temp_directory_path() / "lms_test_cli" / name;
  fs::remove_all(d);
  return d;
}

TEST(Cli, FullPipelineIsReproducible) {
  const fs::path a = fresh("a"), b = fresh("b");
  for (const fs::path& d : {a, b}) {
    ASSERT_EQ(cli({"gen-data"}, d).code, 0);
    ASSERT_EQ(cli({"train", "--checkpoint-every", "10"}, d).code, 0);
    ASSERT_EQ(cli({"evaluate"}, d).code, 0);
    ASSERT_EQ(cli({"analyze"}, d).code, 0);
  }
  for (const char* f : {"corpus.bin", "trials.txt", "loss_log.csv", "model.ckpt", "checkpoints/step-000010.ckpt",
                        "scores.txt", "metrics.json", "operating_points.csv", "analysis.json"}) {
    ASSERT_TRUE(fs::exists(a / f)) << f;
    EXPECT_EQ(slurp(a / f), slurp(b / f)) << f;
  }
  const auto cfg = nlohmann::json::parse(slurp(a / "config.json"));
  const std::string digest = cfg.at("config_digest");
  for (const char* f : {"corpus.bin", "trials.txt", "loss_log.csv", "model.ckpt", "scores.txt", "metrics.json",
                        "operating_points.csv", "analysis.json", "feature_norm_hist.csv",
                        "weight_distance_hist.csv"}) {
    EXPECT_NE(slurp(a / f).find(digest), std::string::npos) << f;
  }
}

TEST(Cli, ResumeContinuesTraining) {
  const fs::path d = fresh("resume");
  ASSERT_EQ(cli({"gen-data"}, d).code, 0);
  ASSERT_EQ(cli({"train", "--checkpoint-every", "10"}, d).code, 0);
  const std::string full = slurp(d / "model.ckpt");
  ASSERT_EQ(cli({"train", "--resume", (d / "checkpoints/step-000010.ckpt").string()}, d).code, 0);
  EXPECT_EQ(slurp(d / "model.ckpt"), full);
}

TEST(Cli, InvalidConfigAndMissingInputs) {
  const fs::path d = fresh("bad");
  CliRun r = cli({"gen-data", "--set", "loss.kind=amsoftmax", "loss.normalize_features=true", "loss.ring_weight=0.1"}, d);
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("loss.ring_weight"), std::string::npos) << r.err;
  r = cli({"train"}, d);
  EXPECT_EQ(r.code, 3);
  EXPECT_NE(r.err.find("corpus.bin"), std::string::npos);
  r = cli({"train", "--config", "/nonexistent/config.json"}, d);
  EXPECT_NE(r.code, 0);
  EXPECT_EQ(cli({"frobnicate"}, d, false).code, 2);
  EXPECT_EQ(cli({}, d, false).code, 2);
  ASSERT_EQ(cli({"gen-data"}, d).code, 0);
  EXPECT_EQ(cli({"evaluate"}, d).code, 3);  // no model yet
}

TEST(Cli, ConfigFileWithOverrides) {
  const fs::path d = fresh("file");
  fs::create_directories(d);
  std::ofstream(d / "cfg.json") << R"({"loss": {"kind": "amsoftmax", "margins": {"m3": 0.25}}, "seed": 4})";
  ASSERT_EQ(cli({"gen-data", "--config", (d / "cfg.json").string()}, d).code, 0);
  const auto cfg = nlohmann::json::parse(slurp(d / "config.json"));
  EXPECT_EQ(cfg["loss"]["kind"], "amsoftmax");
  EXPECT_EQ(cfg["seed"], 4);
  EXPECT_EQ(cfg["corpus"]["n_speakers"], 8);
}

TEST(Cli, GradcheckPasses) {
  const fs::path d = fresh("gc");
  const CliRun r = cli({"gradcheck", "--instances", "5"}, d);
  EXPECT_EQ(r.code, 0) << r.out << r.err;
  EXPECT_NE(r.out.find("network end-to-end"), std::string::npos);
  EXPECT_EQ(r.out.find("FAIL"), std::string::npos);
}

TEST(Cli, CompareReportsDeltas) {
  const fs::path d = fresh("cmp");
  const CliRun r = cli({"compare", "--seeds", "2", "--set-b", "loss.kind=amsoftmax", "loss.margins.m3=0.2"}, d);
  ASSERT_EQ(r.code, 0) << r.err;
  const auto report = nlohmann::json::parse(slurp(d / "compare.json"));
  EXPECT_EQ(report["runs"].size(), 2u);
  EXPECT_TRUE(report["median_delta"].contains("eer"));
  EXPECT_NE(report["config_digest_a"], report["config_digest_b"]);
  const CliRun bad = cli({"compare", "--set-b", "corpus.seed=5"}, d);
  EXPECT_EQ(bad.code, 2);
}

}  // namespace
}  // namespace lms
