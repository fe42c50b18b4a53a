#pragma once

// Forward and backward passes for the softmax loss family and its
// auxiliaries. Every gradient here is derived by hand; tests check each one
// against finite differences.

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "lms/margins.hpp"
#include "lms/numkit.hpp"

namespace lms {

enum class LossKind { kSoftmax, kModifiedSoftmax, kASoftmax, kArcSoftmax, kAMSoftmax, kGE2E };

std::string_view to_string(LossKind kind);
/// Accepts "softmax", "modified-softmax", "asoftmax", "arcsoftmax",
/// "amsoftmax", "ge2e".
LossKind parse_loss_kind(std::string_view name);

struct LossConfig {
  LossKind kind = LossKind::kSoftmax;
  double scale = 30.0;
  bool normalize_weights = false;
  bool normalize_features = false;
  MarginSet margins;
  double ring_weight = 0.0;
  double ring_target = 20.0;  // initial value; the trained value lives in the network
  double mhe_weight = 0.0;
  double ge2e_bias = 0.0;
  AnnealSchedule anneal;

  /// Throws std::invalid_argument naming the offending field.
  void validate() const;
};

/// Config for `kind` with the weight normalization the kind implies, the
/// margin placed in the slot the kind uses, and that kind's annealing
/// defaults from the reference training recipe (fast decay for AMSoftmax,
/// slow decay for ASoftmax/ArcSoftmax, floor 10 for ASoftmax).
LossConfig make_loss_config(LossKind kind, double margin = 0.0);
AnnealSchedule reference_anneal(LossKind kind);

struct Batch {
  Matrix features;           // N x D, row i is x_i
  std::vector<int> labels;   // y_i in [0, num_classes)
  std::size_t num_classes = 0;

  void validate() const;
};

struct LossDiagnostics {
  double target_cos_mean = 0.0;
  double target_logit_mean = 0.0;
  double feature_norm_mean = 0.0;
  double lambda = 0.0;
};

struct LossOutput {
  double loss = 0.0;
  double primary_loss = 0.0;
  double ring_loss = 0.0;
  double mhe_loss = 0.0;
  Matrix grad_features;  // N x D
  Matrix grad_weights;   // D x C
  double grad_ring_target = 0.0;
  LossDiagnostics diagnostics;
};

/// Row-wise s * x / |x| together with its backward map.
class FeatureNormalization {
 public:
  FeatureNormalization(const Matrix& features, double scale);

  const Matrix& output() const { return output_; }
  /// Applies s (I - x_hat x_hat^T) / |x| to each row of `grad_output`.
  Matrix backward(const Matrix& grad_output) const;

 private:
  Matrix unit_;
  Vector norms_;
  double scale_;
  Matrix output_;
};

Matrix normalize_features(const Matrix& features, double scale);

/// Everything the backward pass needs from a softmax-family forward pass.
struct MarginSoftmaxCache {
  LossKind kind = LossKind::kSoftmax;
  bool normalize_features = false;
  MarginSet margins;
  double lambda = 0.0;
  std::vector<int> labels;
  Matrix features;      // N x D raw inputs
  Matrix weights;       // D x C raw weights
  Matrix unit_features; // N x D (normalized kinds only)
  Vector feature_norms;
  Vector row_scales;    // r_i: s or |x_i|
  Matrix unit_weights;  // D x C (normalized kinds only)
  Vector weight_norms;
  Matrix cosines;       // N x C (normalized kinds only)
  Matrix probabilities; // N x C softmax of the logits
};

struct MarginSoftmaxForward {
  double loss = 0.0;
  LossDiagnostics diagnostics;
  MarginSoftmaxCache cache;
};

/// Mean negative log-likelihood where non-target logits are r_i cos theta_j
/// and the target logit is r_i psi_train(cos theta_y) with lambda taken from
/// the annealing schedule at `step`. r_i is the fixed scale when features are
/// normalized and |x_i| otherwise. kind = softmax uses raw w_j^T x_i.
MarginSoftmaxForward margin_softmax_forward(const Batch& batch, const Matrix& weights,
                                            const LossConfig& config, std::int64_t step);

/// Fills loss, grad_features, grad_weights and diagnostics.
LossOutput margin_softmax_backward(const MarginSoftmaxForward& forward);

struct RingLossResult {
  double loss = 0.0;
  Matrix grad_features;
  double grad_target = 0.0;
};

/// lambda_R / N * sum_i (|x_i| - R)^2.
RingLossResult ring_loss(const Matrix& features, double target, double weight);

struct MheLossResult {
  double loss = 0.0;
  Matrix grad_weights;
};

/// lambda_M / (N (C - 1)) * sum_i sum_{j != y_i} 1 / |w_hat_{y_i} - w_hat_j|^2.
MheLossResult mhe_loss(const Matrix& weights, const std::vector<int>& labels, double weight);

struct Ge2eResult {
  double loss = 0.0;
  Matrix grad_features;
  Matrix grad_centers;  // D x C' (explicit-center form only)
  double grad_bias = 0.0;
};

/// Batch-softmax over explicit centers: logits s * cos(x_i, c_j) + b, where
/// c_j is column j of `centers` and labels index those columns.
Ge2eResult ge2e_loss_with_centers(const Matrix& features, const std::vector<int>& labels,
                                  const Matrix& centers, double scale, double bias);

/// Centers are the means of each in-batch speaker's rows (the row itself
/// included); gradients flow through the centers back to the features.
/// In-batch speakers are numbered in order of first appearance.
Ge2eResult ge2e_loss(const Batch& batch, double scale, double bias);

/// Primary loss plus ring (on raw features) and MHE terms, gradients summed
/// in the order primary, ring, MHE.
LossOutput total_loss(const Batch& batch, const Matrix& weights, const LossConfig& config,
                      std::int64_t step, double ring_target);
LossOutput total_loss(const Batch& batch, const Matrix& weights, const LossConfig& config,
                      std::int64_t step);

}  // namespace lms
