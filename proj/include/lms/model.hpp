#pragma once

// Toy x-vector style embedding network with hand-written backprop: a stack
// of valid temporal convolutions, statistics pooling, then segment-level
// affine layers. Every hidden layer is affine -> [BN] -> ReLU (or ReLU -> BN);
// the final segment layer can drop its ReLU. The output-layer weights W and
// the Ring-loss target R are stored with the network.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "lms/data.hpp"
#include "lms/losses.hpp"
#include "lms/numkit.hpp"

namespace lms {

struct NetworkConfig {
  std::size_t input_dim = 10;
  std::vector<std::size_t> frame_kernel_sizes{5, 5, 7, 1, 1};
  std::vector<std::size_t> frame_widths{32, 32, 32, 32, 32};
  std::vector<std::size_t> segment_widths{64, 64};
  std::size_t embedding_layer_index = 0;
  std::size_t num_classes = 20;
  bool use_batchnorm = true;
  bool remove_last_relu = true;
  bool last_layer_batchnorm = true;  // BN on the final segment layer
  bool bn_before_relu = true;
  double bn_momentum = 0.99;
  double bn_epsilon = 1e-5;

  void validate() const;
  /// Frames consumed by the convolution stack: sum(k - 1) + 1.
  std::size_t receptive_field() const;
  /// Shortest segment the network accepts (two frames must reach pooling).
  std::size_t min_segment_length() const { return receptive_field() + 1; }
  std::size_t feature_dim() const { return segment_widths.back(); }
  std::size_t embedding_dim() const { return segment_widths.at(embedding_layer_index); }
  /// Stable textual description used for digests.
  std::string describe() const;

  friend bool operator==(const NetworkConfig&, const NetworkConfig&) = default;
};

/// One affine (kernel 1) or valid temporal-convolution layer. The weight is
/// (kernel * in) x out so a window of `kernel` consecutive frames, read as a
/// flat row, multiplies it directly.
struct Layer {
  std::size_t kernel = 1;
  std::size_t in = 0;
  std::size_t out = 0;
  Matrix weight;
  Vector bias;
  Vector bn_scale;  // empty without batch norm
  Vector bn_shift;

  friend bool operator==(const Layer&, const Layer&) = default;
};

struct BatchNormStats {
  Vector mean;
  Vector var;

  friend bool operator==(const BatchNormStats&, const BatchNormStats&) = default;
};

/// All trainable tensors. Doubles as the gradient container.
struct NetParams {
  std::vector<Layer> frame;
  std::vector<Layer> segment;
  Matrix output_weights;  // feature_dim x num_classes, column j is w_j
  double ring_target = 20.0;

  friend bool operator==(const NetParams&, const NetParams&) = default;
};

enum class ParamRole { kWeight, kBias, kBnScale, kBnShift, kOutputWeight, kRingTarget };

/// Weight decay applies to weights and the output layer, and optionally to
/// BN scales.
bool decays(ParamRole role, bool decay_bn_scale = true);

/// Visits every trainable tensor in declaration order.
void for_each_tensor(NetParams& params,
                     const std::function<void(const std::string&, std::span<double>, ParamRole)>& fn);
void for_each_tensor(const NetParams& params,
                     const std::function<void(const std::string&, std::span<const double>, ParamRole)>& fn);

NetParams zeros_like(const NetParams& params);
std::size_t parameter_count(const NetParams& params);
Vector flatten(const NetParams& params);
void unflatten(NetParams& params, std::span<const double> values);

struct EmbeddingNet {
  NetworkConfig config;
  NetParams params;
  std::vector<BatchNormStats> frame_stats;
  std::vector<BatchNormStats> segment_stats;

  friend bool operator==(const EmbeddingNet&, const EmbeddingNet&) = default;
};

/// Fan-in scaled Gaussian init for conv/affine and output weights, zero
/// biases, BN scale 1 / shift 0, running mean 0 / var 1.
EmbeddingNet init_network(const NetworkConfig& config, RngStream& init, double ring_target = 20.0);

/// Per-dimension mean and population std (variance floored at 1e-10).
Vector stats_pool(const Matrix& frames);
/// Gradient w.r.t. frames of <grad_output, stats_pool(frames)>.
Matrix stats_pool_backward(const Matrix& frames, std::span<const double> grad_output);

enum class Mode { kTrain, kEval };

struct BlockCache {
  Matrix input;      // layer input (stacked frames or segment rows)
  Matrix affine;     // pre-activation z
  Matrix bn_input;
  Matrix bn_unit;    // (v - mean) / sqrt(var + eps)
  Vector bn_mean;
  Vector bn_var;
  Vector bn_inv_std;
  Matrix relu_input;
  Matrix output;
  bool has_bn = false;
  bool has_relu = false;
};

struct NetCache {
  Mode mode = Mode::kTrain;
  // offsets[l][b] is the first row of segment b in the input of frame layer
  // l; offsets.back() indexes the frames that reach pooling.
  std::vector<std::vector<std::size_t>> offsets;
  std::vector<BlockCache> frame;
  Matrix pooled;  // B x 2H
  std::vector<BlockCache> segment;
};

struct NetForward {
  Matrix features;    // B x feature_dim, the loss input x
  Matrix embeddings;  // B x embedding_dim, affine output of the embedding layer
  NetCache cache;
};

/// Runs a batch of variable-length segments. In train mode BN uses batch
/// statistics (over all frames of all segments for frame layers); eval mode
/// uses the running statistics. Pure: running statistics are updated only by
/// update_running_stats.
NetForward net_forward(const EmbeddingNet& net, const std::vector<Matrix>& segments, Mode mode);

/// Parameter gradients for an upstream gradient on the features. Output
/// weights and ring target receive zero.
NetParams net_backward(const EmbeddingNet& net, const NetCache& cache, const Matrix& grad_features);

void update_running_stats(EmbeddingNet& net, const NetCache& cache);

/// p <- p - lr * (g + decay * p), decay only where decays(role).
void sgd_apply(NetParams& params, const NetParams& grads, double lr, double weight_decay,
               bool decay_bn_scale = true);

struct TrainConfig {
  std::size_t steps = 1000;
  std::size_t speakers_per_batch = 8;
  std::size_t segments_per_speaker = 1;
  std::size_t frames_min = 20;
  std::size_t frames_max = 40;
  double learning_rate = 0.01;
  double weight_decay = 0.01;
  bool decay_bn_scale = true;
  std::size_t validate_every = 100;
  std::size_t lr_halving_patience = 3;
  double lr_stop_threshold = 1e-5;
  double min_improvement = 1e-4;

  void validate() const;
};

struct PlateauState {
  double best = 0.0;
  bool has_best = false;
  std::size_t since_improvement = 0;

  friend bool operator==(const PlateauState&, const PlateauState&) = default;
};

struct PlateauDecision {
  double lr = 0.0;
  bool halved = false;
  bool stop = false;
};

/// Records one validation loss. The rate halves once `patience` evaluations
/// in a row fail to beat the best loss by more than `min_improvement`; the
/// counter then restarts. `stop` is set once the rate is below the threshold.
PlateauDecision plateau_scheduler_step(PlateauState& state, double validation_loss,
                                       double current_lr, std::size_t patience,
                                       double stop_threshold, double min_improvement = 1e-4);

/// Replays a whole history through a fresh state.
PlateauDecision plateau_scheduler_step(std::span<const double> history, double current_lr,
                                       std::size_t patience, double stop_threshold,
                                       double min_improvement = 1e-4);

struct SegmentBatch {
  std::vector<Matrix> segments;
  std::vector<int> labels;
  std::size_t num_classes = 0;
};

/// Distinct speakers, each contributing `segments_per_speaker` slices of
/// uniform length in [frames_min, frames_max] (capped by the utterance) at a
/// uniform position in a uniformly chosen utterance.
SegmentBatch sample_batch(const Corpus& corpus, RngStream& rng, const TrainConfig& tc);

struct TrainerState {
  std::int64_t step = 0;
  double learning_rate = 0.01;
  PlateauState plateau;
  bool stopped = false;
  RngStream sampler;

  friend bool operator==(const TrainerState&, const TrainerState&) = default;
};

struct Checkpoint {
  EmbeddingNet net;
  TrainerState state;
  std::string config_digest;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

void checkpoint_save(const Checkpoint& checkpoint, const std::filesystem::path& path);
/// Loads into the shape implied by `config`; throws naming the first tensor
/// whose name or size disagrees.
Checkpoint checkpoint_load(const std::filesystem::path& path, const NetworkConfig& config);

struct StepLog {
  std::int64_t step = 0;
  double primary_loss = 0.0;
  double ring_loss = 0.0;
  double mhe_loss = 0.0;
  double lambda = 0.0;
  double learning_rate = 0.0;
  double feature_norm_mean = 0.0;
  std::optional<double> validation_loss;
};

/// Single-writer SGD loop over a training corpus.
class Trainer {
 public:
  Trainer(EmbeddingNet net, TrainConfig train, LossConfig loss, const Corpus& train_corpus,
          const Corpus* validation, std::uint64_t seed);
  Trainer(Checkpoint checkpoint, TrainConfig train, LossConfig loss, const Corpus& train_corpus,
          const Corpus* validation);

  /// One sampled batch, forward, backward and SGD update.
  StepLog step();
  bool finished() const;
  /// Steps until finished, reporting each step.
  void run(const std::function<void(const StepLog&)>& on_step = {});

  double validation_loss() const;

  const EmbeddingNet& net() const { return net_; }
  const TrainerState& state() const { return state_; }
  Checkpoint checkpoint(const std::string& digest = "") const { return {net_, state_, digest}; }

 private:
  EmbeddingNet net_;
  TrainConfig train_;
  LossConfig loss_;
  const Corpus* corpus_;
  const Corpus* validation_;
  TrainerState state_;
};

/// Loss of a whole segment batch under `config` (train-mode BN), used by
/// gradient checks: returns the total loss and all parameter gradients,
/// including the output weights and ring target.
struct NetLoss {
  LossOutput loss;
  NetParams grads;
  NetCache cache;
};
NetLoss network_loss(const EmbeddingNet& net, const SegmentBatch& batch, const LossConfig& config,
                     std::int64_t step);

}  // namespace lms
