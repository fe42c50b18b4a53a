#include <cmath>
#include <filesystem>
#include <fstream>
#include <iterator>

#include <gtest/gtest.h>

#include "lms/model.hpp"

namespace lms {
namespace {

namespace fs = std::filesystem;

fs::path temp_path(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "lms_test_model";
  fs::create_directories(dir);
  return dir / name;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

NetworkConfig small_config() {
  NetworkConfig c;
  c.input_dim = 3;
  c.frame_kernel_sizes = {3, 1};
  c.frame_widths = {6, 5};
  c.segment_widths = {7, 4};
  c.num_classes = 4;
  return c;
}

Matrix random_matrix(RngStream& rng, std::size_t r, std::size_t c) {
  Matrix m(r, c);
  for (double& v : m.storage()) v = rng.gaussian();
  return m;
}

Corpus small_corpus() {
  CorpusSpec spec;
  spec.n_speakers = 4;
  spec.utts_per_speaker = 3;
  spec.feature_dim = 3;
  spec.frames_min = 12;
  spec.frames_max = 20;
  return generate_corpus(spec);
}

TrainConfig small_train() {
  TrainConfig tc;
  tc.steps = 20;
  tc.speakers_per_batch = 3;
  tc.frames_min = 5;
  tc.frames_max = 9;
  tc.validate_every = 5;
  return tc;
}

TEST(StatsPool, TwoPointExample) {
  EXPECT_EQ(stats_pool(Matrix(2, 2, Vector{1, 2, 3, 4})), (Vector{2, 3, 1, 1}));
  const Matrix constant(5, 2, 0.7);
  const Vector p = stats_pool(constant);
  EXPECT_NEAR(p[2], std::sqrt(1e-10), 1e-20);
  for (double g : stats_pool_backward(constant, Vector{1, 1, 1, 1}).data()) EXPECT_TRUE(std::isfinite(g));
  EXPECT_THROW(stats_pool(Matrix(1, 2, 1.0)), std::invalid_argument);
}

TEST(Network, IdentityLayersPassPooledStats) {
  NetworkConfig c;
  c.input_dim = 2;
  c.frame_kernel_sizes = {1};
  c.frame_widths = {2};
  c.segment_widths = {4};
  c.num_classes = 2;
  c.use_batchnorm = false;
  RngStream rng(1, streams::kTest);
  EmbeddingNet net = init_network(c, rng);
  net.params.frame[0].weight = Matrix(2, 2, Vector{1, 0, 0, 1});
  Matrix eye(4, 4, 0.0);
  for (int i = 0; i < 4; ++i) eye(i, i) = 1.0;
  net.params.segment[0].weight = eye;
  const Matrix seg(4, 2, Vector{1, 5, 2, 6, 3, 7, 4, 8});
  const NetForward f = net_forward(net, {seg}, Mode::kEval);
  const Vector expected = stats_pool(seg);
  for (std::size_t d = 0; d < 4; ++d) EXPECT_NEAR(f.features(0, d), expected[d], 1e-15);
}

TEST(Network, ShortSegmentNamesMinimum) {
  RngStream rng(1, streams::kTest);
  const EmbeddingNet net = init_network(small_config(), rng);
  EXPECT_EQ(small_config().min_segment_length(), 4u);
  try {
    net_forward(net, {Matrix(3, 3, 1.0)}, Mode::kTrain);
    FAIL();
  } catch (const std::invalid_argument& e) {
    EXPECT_NE(std::string(e.what()).find('4'), std::string::npos);
  }
}

TEST(Network, TrainAndEvalBatchNormDiffer) {
  RngStream rng(2, streams::kTest);
  const EmbeddingNet net = init_network(small_config(), rng);
  std::vector<Matrix> segs;
  for (int i = 0; i < 4; ++i) segs.push_back(random_matrix(rng, 8 + i, 3));
  const NetForward train = net_forward(net, segs, Mode::kTrain);
  const NetForward eval = net_forward(net, segs, Mode::kEval);
  EXPECT_NE(train.features, eval.features);
  EXPECT_EQ(train.features, net_forward(net, segs, Mode::kTrain).features);
  EXPECT_EQ(train.embeddings.cols(), 7u);
  EXPECT_THROW(net_backward(net, eval.cache, Matrix(4, 4, 1.0)), std::logic_error);
}

TEST(Network, ZeroUpstreamGivesZeroGradients) {
  RngStream rng(3, streams::kTest);
  const EmbeddingNet net = init_network(small_config(), rng);
  std::vector<Matrix> segs;
  for (int i = 0; i < 3; ++i) segs.push_back(random_matrix(rng, 9, 3));
  const NetForward f = net_forward(net, segs, Mode::kTrain);
  const NetParams g = net_backward(net, f.cache, Matrix(3, 4, 0.0));
  for (double v : flatten(g)) EXPECT_EQ(v, 0.0);
}

TEST(Sgd, Examples) {
  RngStream rng(4, streams::kTest);
  EmbeddingNet net = init_network(small_config(), rng);
  const NetParams before = net.params;
  NetParams grads = zeros_like(net.params);
  for (double& v : grads.output_weights.storage()) v = 1.0;
  sgd_apply(net.params, grads, 0.0, 0.01);
  EXPECT_EQ(net.params, before);

  for (auto& l : net.params.frame) for (double& v : l.bn_shift) v = 0.3;
  const NetParams shifted = net.params;
  sgd_apply(net.params, zeros_like(net.params), 1.0, 0.01);
  for (std::size_t k = 0; k < before.output_weights.size(); ++k)
    EXPECT_DOUBLE_EQ(net.params.output_weights.data()[k], 0.99 * shifted.output_weights.data()[k]);
  EXPECT_DOUBLE_EQ(net.params.frame[0].weight(1, 2), 0.99 * shifted.frame[0].weight(1, 2));
  EXPECT_EQ(net.params.frame[0].bn_shift, shifted.frame[0].bn_shift);
  EXPECT_EQ(net.params.ring_target, shifted.ring_target);

  net.params.ring_target = 1.0;
  grads = zeros_like(net.params);
  grads.ring_target = 0.5;
  sgd_apply(net.params, grads, 0.1, 0.0);
  EXPECT_DOUBLE_EQ(net.params.ring_target, 0.95);
}

TEST(Sgd, DecayShrinksWeightNorm) {
  RngStream rng(5, streams::kTest);
  EmbeddingNet net = init_network(small_config(), rng);
  const double before = norm2(net.params.output_weights.data());
  sgd_apply(net.params, zeros_like(net.params), 0.1, 0.01);
  EXPECT_LT(norm2(net.params.output_weights.data()), before);
}

TEST(Plateau, Examples) {
  const std::vector<double> falling{5, 4, 3, 2, 1};
  PlateauDecision d = plateau_scheduler_step(falling, 0.01, 3, 1e-5);
  EXPECT_EQ(d.lr, 0.01);
  EXPECT_FALSE(d.halved);
  const std::vector<double> flat{1, 1, 1, 1};
  d = plateau_scheduler_step(flat, 0.01, 3, 1e-5);
  EXPECT_DOUBLE_EQ(d.lr, 0.005);
  EXPECT_TRUE(d.halved);
  EXPECT_FALSE(d.stop);
  d = plateau_scheduler_step(flat, 1.6e-5, 3, 1e-5);
  EXPECT_DOUBLE_EQ(d.lr, 8e-6);
  EXPECT_TRUE(d.stop);
  // Improvements below the threshold count as stuck.
  const std::vector<double> creeping{1, 1 - 5e-5, 1 - 9e-5, 1 - 9.9e-5};
  EXPECT_TRUE(plateau_scheduler_step(creeping, 0.01, 3, 1e-5).halved);
}

TEST(Sampler, FullCorpusAndDeterminism) {
  const Corpus c = small_corpus();
  TrainConfig tc = small_train();
  tc.speakers_per_batch = 4;
  RngStream a(9, streams::kSampler), b(9, streams::kSampler);
  const SegmentBatch x = sample_batch(c, a, tc);
  const SegmentBatch y = sample_batch(c, b, tc);
  EXPECT_EQ(x.segments, y.segments);
  EXPECT_EQ(x.labels, y.labels);
  std::vector<int> sorted = x.labels;
  std::sort(sorted.begin(), sorted.end());
  EXPECT_EQ(sorted, (std::vector<int>{0, 1, 2, 3}));
  for (const Matrix& s : x.segments) {
    EXPECT_GE(s.rows(), tc.frames_min);
    EXPECT_LE(s.rows(), tc.frames_max);
  }
  tc.speakers_per_batch = 5;
  EXPECT_THROW(sample_batch(c, a, tc), std::invalid_argument);
}

TEST(Sampler, SelectionFrequency) {
  CorpusSpec spec;
  spec.n_speakers = 20;
  spec.utts_per_speaker = 2;
  spec.frames_min = spec.frames_max = 45;
  const Corpus c = generate_corpus(spec);
  TrainConfig tc;
  tc.speakers_per_batch = 8;
  RngStream rng(10, streams::kSampler);
  std::vector<int> counts(20, 0);
  const int batches = 10000;
  for (int i = 0; i < batches; ++i)
    for (int y : sample_batch(c, rng, tc).labels) ++counts[y];
  const double se = std::sqrt(0.4 * 0.6 / batches);
  for (int k : counts) EXPECT_NEAR(k / static_cast<double>(batches), 0.4, 3 * se);
}

TEST(Checkpoint, SaveLoadSaveIsIdentical) {
  const Corpus c = small_corpus();
  RngStream rng(11, streams::kInit);
  Trainer t(init_network(small_config(), rng), small_train(), make_loss_config(LossKind::kAMSoftmax, 0.2), c, &c, 3);
  for (int i = 0; i < 7; ++i) t.step();
  const fs::path p1 = temp_path("a.ckpt"), p2 = temp_path("b.ckpt");
  checkpoint_save(t.checkpoint("feed"), p1);
  const Checkpoint loaded = checkpoint_load(p1, small_config());
  EXPECT_EQ(loaded.net, t.net());
  EXPECT_EQ(loaded.state, t.state());
  EXPECT_EQ(loaded.config_digest, "feed");
  checkpoint_save(loaded, p2);
  EXPECT_EQ(slurp(p1), slurp(p2));
}

TEST(Checkpoint, MismatchNamesTensor) {
  RngStream rng(12, streams::kInit);
  checkpoint_save({init_network(small_config(), rng), {}, ""}, temp_path("m.ckpt"));
  NetworkConfig other = small_config();
  other.frame_widths = {6, 8};
  try {
    checkpoint_load(temp_path("m.ckpt"), other);
    FAIL();
  } catch (const std::runtime_error& e) {
    EXPECT_NE(std::string(e.what()).find("frame.1.weight"), std::string::npos) << e.what();
  }
  std::ofstream(temp_path("junk.ckpt")) << "junk";
  EXPECT_THROW(checkpoint_load(temp_path("junk.ckpt"), small_config()), std::runtime_error);
}

TEST(Trainer, ResumeMatchesUninterrupted) {
  const Corpus c = small_corpus();
  const LossConfig loss = make_loss_config(LossKind::kAMSoftmax, 0.2);
  RngStream r1(13, streams::kInit);
  const EmbeddingNet init = init_network(small_config(), r1);

  Trainer straight(init, small_train(), loss, c, &c, 5);
  straight.run();

  Trainer first(init, small_train(), loss, c, &c, 5);
  for (int i = 0; i < 11; ++i) first.step();
  checkpoint_save(first.checkpoint(), temp_path("resume.ckpt"));
  Trainer second(checkpoint_load(temp_path("resume.ckpt"), small_config()), small_train(), loss, c, &c);
  second.run();

  EXPECT_EQ(second.net(), straight.net());
  EXPECT_EQ(second.state(), straight.state());
}

TEST(Trainer, LossDecreasesOnToyTask) {
  const Corpus c = small_corpus();
  RngStream rng(14, streams::kInit);
  TrainConfig tc = small_train();
  tc.steps = 300;
  tc.speakers_per_batch = 4;
  Trainer t(init_network(small_config(), rng), tc, make_loss_config(LossKind::kSoftmax), c, &c, 1);
  const double before = t.validation_loss();
  t.run();
  EXPECT_LT(t.validation_loss(), 0.5 * before);
}

}  // namespace
}  // namespace lms
