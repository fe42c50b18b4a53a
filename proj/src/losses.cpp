#include "lms/losses.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <sstream>
#include <stdexcept>

namespace lms {

namespace {

constexpr double kMinNorm = 1e-12;

[[noreturn]] void config_error(const std::string& field, const std::string& what) {
  throw std::invalid_argument("loss." + field + ": " + what);
}

bool normalized_kind(LossKind kind) { return kind != LossKind::kSoftmax; }

void axpy(std::span<double> y, double a, std::span<const double> x) {
  for (std::size_t i = 0; i < y.size(); ++i) y[i] += a * x[i];
}

// Column j of a D x C matrix into `out`.
void load_column(const Matrix& m, std::size_t j, std::span<double> out) {
  for (std::size_t d = 0; d < m.rows(); ++d) out[d] = m(d, j);
}

struct UnitColumns {
  Matrix unit;
  Vector norms;
};

UnitColumns unit_columns(const Matrix& weights, const char* what) {
  UnitColumns out{Matrix(weights.rows(), weights.cols()), Vector(weights.cols(), 0.0)};
  for (std::size_t j = 0; j < weights.cols(); ++j) {
    double sq = 0.0;
    for (std::size_t d = 0; d < weights.rows(); ++d) sq += weights(d, j) * weights(d, j);
    const double n = std::sqrt(sq);
    if (!(n > kMinNorm)) {
      throw NumericError(std::string(what) + " column " + std::to_string(j) + " has zero norm");
    }
    out.norms[j] = n;
    for (std::size_t d = 0; d < weights.rows(); ++d) out.unit(d, j) = weights(d, j) / n;
  }
  return out;
}

// Backward of w_hat = w / |w| applied column-wise: (I - w_hat w_hat^T) g / |w|.
Matrix unit_columns_backward(const UnitColumns& cols, const Matrix& grad_unit) {
  Matrix grad(grad_unit.rows(), grad_unit.cols());
  for (std::size_t j = 0; j < grad_unit.cols(); ++j) {
    double radial = 0.0;
    for (std::size_t d = 0; d < grad_unit.rows(); ++d) radial += grad_unit(d, j) * cols.unit(d, j);
    for (std::size_t d = 0; d < grad_unit.rows(); ++d) {
      grad(d, j) = (grad_unit(d, j) - radial * cols.unit(d, j)) / cols.norms[j];
    }
  }
  return grad;
}

double row_norm_checked(const Matrix& m, std::size_t r, const char* what) {
  const double n = norm2(m.row(r));
  if (!(n > kMinNorm)) {
    throw NumericError(std::string(what) + " row " + std::to_string(r) + " has zero norm");
  }
  return n;
}

void check_shapes(const Batch& batch, const Matrix& weights) {
  batch.validate();
  if (weights.rows() != batch.features.cols() || weights.cols() != batch.num_classes) {
    std::ostringstream os;
    os << "weights are " << weights.rows() << "x" << weights.cols() << ", expected "
       << batch.features.cols() << "x" << batch.num_classes;
    throw std::invalid_argument(os.str());
  }
}

}  // namespace

std::string_view to_string(LossKind kind) {
  switch (kind) {
    case LossKind::kSoftmax: return "softmax";
    case LossKind::kModifiedSoftmax: return "modified-softmax";
    case LossKind::kASoftmax: return "asoftmax";
    case LossKind::kArcSoftmax: return "arcsoftmax";
    case LossKind::kAMSoftmax: return "amsoftmax";
    case LossKind::kGE2E: return "ge2e";
  }
  return "unknown";
}

LossKind parse_loss_kind(std::string_view name) {
  for (LossKind k : {LossKind::kSoftmax, LossKind::kModifiedSoftmax, LossKind::kASoftmax,
                     LossKind::kArcSoftmax, LossKind::kAMSoftmax, LossKind::kGE2E}) {
    if (to_string(k) == name) return k;
  }
  throw std::invalid_argument("loss.kind: unknown loss kind '" + std::string(name) + "'");
}

void LossConfig::validate() const {
  if (!(scale > 0.0) || !std::isfinite(scale)) config_error("scale", "must be positive");
  try {
    margins.validate();
  } catch (const std::invalid_argument& e) {
    config_error("margins", e.what());
  }
  try {
    anneal.validate();
  } catch (const std::invalid_argument& e) {
    config_error("anneal", e.what());
  }
  const std::string kind_name(to_string(kind));
  switch (kind) {
    case LossKind::kSoftmax:
      if (normalize_weights || normalize_features)
        config_error("kind", "softmax uses raw logits; disable normalization");
      if (!margins.trivial()) config_error("margins", "softmax takes no margin");
      break;
    case LossKind::kModifiedSoftmax:
    case LossKind::kGE2E:
      if (!margins.trivial()) config_error("margins", kind_name + " takes no margin");
      break;
    case LossKind::kASoftmax:
      if (margins.m2 != 0.0 || margins.m3 != 0.0)
        config_error("margins", "asoftmax uses only m1");
      break;
    case LossKind::kArcSoftmax:
      if (margins.m1 != 1.0 || margins.m3 != 0.0)
        config_error("margins", "arcsoftmax uses only m2");
      break;
    case LossKind::kAMSoftmax:
      if (margins.m1 != 1.0 || margins.m2 != 0.0)
        config_error("margins", "amsoftmax uses only m3");
      break;
  }
  if (kind != LossKind::kSoftmax && kind != LossKind::kGE2E && !normalize_weights) {
    config_error("normalize_weights", kind_name + " requires normalized weights");
  }
  if (!(ring_weight >= 0.0)) config_error("ring_weight", "must be >= 0");
  if (!(ring_target > 0.0)) config_error("ring_target", "must be positive");
  if (!(mhe_weight >= 0.0)) config_error("mhe_weight", "must be >= 0");
  if (normalize_features && ring_weight > 0.0) {
    config_error("ring_weight", "ring loss and feature normalization are mutually exclusive");
  }
}

AnnealSchedule reference_anneal(LossKind kind) {
  switch (kind) {
    case LossKind::kAMSoftmax: return {0.0, 1000.0, 1e-4, 5.0};
    case LossKind::kArcSoftmax: return {0.0, 1000.0, 1e-5, 5.0};
    case LossKind::kASoftmax: return {10.0, 1000.0, 1e-5, 5.0};
    default: return {};
  }
}

LossConfig make_loss_config(LossKind kind, double margin) {
  LossConfig cfg;
  cfg.kind = kind;
  cfg.normalize_weights = kind != LossKind::kSoftmax && kind != LossKind::kGE2E;
  switch (kind) {
    case LossKind::kASoftmax: cfg.margins.m1 = margin; break;
    case LossKind::kArcSoftmax: cfg.margins.m2 = margin; break;
    case LossKind::kAMSoftmax: cfg.margins.m3 = margin; break;
    default: break;
  }
  cfg.anneal = reference_anneal(kind);
  return cfg;
}

void Batch::validate() const {
  if (features.rows() == 0) throw std::invalid_argument("batch is empty");
  if (labels.size() != features.rows()) {
    throw std::invalid_argument("batch has " + std::to_string(features.rows()) + " rows but " +
                                std::to_string(labels.size()) + " labels");
  }
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= num_classes) {
      throw std::invalid_argument("label " + std::to_string(labels[i]) + " at row " +
                                  std::to_string(i) + " outside [0, " +
                                  std::to_string(num_classes) + ")");
    }
  }
  if (!features.all_finite()) throw std::invalid_argument("batch features are not finite");
}

FeatureNormalization::FeatureNormalization(const Matrix& features, double scale)
    : unit_(features.rows(), features.cols()),
      norms_(features.rows()),
      scale_(scale),
      output_(features.rows(), features.cols()) {
  if (!(scale > 0.0)) throw std::invalid_argument("normalization scale must be positive");
  for (std::size_t i = 0; i < features.rows(); ++i) {
    norms_[i] = row_norm_checked(features, i, "feature");
    for (std::size_t d = 0; d < features.cols(); ++d) {
      unit_(i, d) = features(i, d) / norms_[i];
      output_(i, d) = scale * unit_(i, d);
    }
  }
}

Matrix FeatureNormalization::backward(const Matrix& grad_output) const {
  Matrix grad(grad_output.rows(), grad_output.cols());
  for (std::size_t i = 0; i < grad_output.rows(); ++i) {
    const double radial = dot(grad_output.row(i), unit_.row(i));
    const double k = scale_ / norms_[i];
    for (std::size_t d = 0; d < grad_output.cols(); ++d) {
      grad(i, d) = k * (grad_output(i, d) - radial * unit_(i, d));
    }
  }
  return grad;
}

Matrix normalize_features(const Matrix& features, double scale) {
  return FeatureNormalization(features, scale).output();
}

MarginSoftmaxForward margin_softmax_forward(const Batch& batch, const Matrix& weights,
                                            const LossConfig& config, std::int64_t step) {
  config.validate();
  check_shapes(batch, weights);
  if (config.kind == LossKind::kGE2E) {
    throw std::invalid_argument("ge2e is not a softmax-over-weights loss");
  }
  const std::size_t n = batch.features.rows();
  const std::size_t dim = batch.features.cols();
  const std::size_t classes = batch.num_classes;

  MarginSoftmaxForward out;
  MarginSoftmaxCache& cache = out.cache;
  cache.kind = config.kind;
  cache.normalize_features = config.normalize_features;
  cache.margins = config.margins;
  cache.lambda = anneal_lambda(step, config.anneal);
  cache.labels = batch.labels;
  cache.features = batch.features;
  cache.weights = weights;
  cache.probabilities = Matrix(n, classes);
  cache.feature_norms.resize(n);

  const bool normalized = normalized_kind(config.kind);
  if (normalized) {
    UnitColumns cols = unit_columns(weights, "weight");
    cache.unit_weights = std::move(cols.unit);
    cache.weight_norms = std::move(cols.norms);
    cache.unit_features = Matrix(n, dim);
    cache.row_scales.resize(n);
    cache.cosines = Matrix(n, classes);
  }

  Vector logits(classes);
  Vector column(dim);
  double total = 0.0;
  LossDiagnostics& diag = out.diagnostics;
  diag.lambda = cache.lambda;
  for (std::size_t i = 0; i < n; ++i) {
    const auto x = batch.features.row(i);
    const auto y = static_cast<std::size_t>(batch.labels[i]);
    const double xnorm = normalized ? row_norm_checked(batch.features, i, "feature") : norm2(x);
    cache.feature_norms[i] = xnorm;
    diag.feature_norm_mean += xnorm;

    if (!normalized) {
      for (std::size_t j = 0; j < classes; ++j) {
        load_column(weights, j, column);
        logits[j] = dot(x, column);
      }
      const double wy = norm2(weights.column(y));
      diag.target_cos_mean += (xnorm > 0.0 && wy > 0.0) ? logits[y] / (xnorm * wy) : 0.0;
    } else {
      auto xhat = cache.unit_features.row(i);
      for (std::size_t d = 0; d < dim; ++d) xhat[d] = x[d] / xnorm;
      const double r = config.normalize_features ? config.scale : xnorm;
      cache.row_scales[i] = r;
      for (std::size_t j = 0; j < classes; ++j) {
        load_column(cache.unit_weights, j, column);
        const double c = dot(xhat, column);
        cache.cosines(i, j) = c;
        logits[j] = r * c;
      }
      const double cy = cache.cosines(i, y);
      logits[y] = r * blended_target_logit(cy, config.margins, cache.lambda).value;
      diag.target_cos_mean += cy;
    }
    diag.target_logit_mean += logits[y];
    total += log_sum_exp(logits) - logits[y];
    const Vector p = stable_softmax(logits);
    std::copy(p.begin(), p.end(), cache.probabilities.row(i).begin());
  }
  const double inv_n = 1.0 / static_cast<double>(n);
  out.loss = total * inv_n;
  diag.feature_norm_mean *= inv_n;
  diag.target_cos_mean *= inv_n;
  diag.target_logit_mean *= inv_n;
  return out;
}

LossOutput margin_softmax_backward(const MarginSoftmaxForward& forward) {
  const MarginSoftmaxCache& cache = forward.cache;
  const std::size_t n = cache.features.rows();
  const std::size_t dim = cache.features.cols();
  const std::size_t classes = cache.probabilities.cols();
  const double inv_n = 1.0 / static_cast<double>(n);

  LossOutput out;
  out.loss = forward.loss;
  out.primary_loss = forward.loss;
  out.diagnostics = forward.diagnostics;
  out.grad_features = Matrix(n, dim);
  out.grad_weights = Matrix(dim, classes);

  Vector g(classes);
  if (!normalized_kind(cache.kind)) {
    for (std::size_t i = 0; i < n; ++i) {
      const auto y = static_cast<std::size_t>(cache.labels[i]);
      for (std::size_t j = 0; j < classes; ++j) g[j] = cache.probabilities(i, j) * inv_n;
      g[y] -= inv_n;
      const auto x = cache.features.row(i);
      auto gx = out.grad_features.row(i);
      for (std::size_t d = 0; d < dim; ++d) {
        double acc = 0.0;
        for (std::size_t j = 0; j < classes; ++j) {
          acc += cache.weights(d, j) * g[j];
          out.grad_weights(d, j) += x[d] * g[j];
        }
        gx[d] = acc;
      }
    }
    return out;
  }

  // Gradient w.r.t. the unit weight columns, accumulated over rows.
  Matrix grad_unit_w(dim, classes);
  Vector grad_unit_x(dim);
  for (std::size_t i = 0; i < n; ++i) {
    const auto y = static_cast<std::size_t>(cache.labels[i]);
    const double r = cache.row_scales[i];
    for (std::size_t j = 0; j < classes; ++j) g[j] = cache.probabilities(i, j) * inv_n;
    g[y] -= inv_n;

    // dL/dc_j and dL/dr.
    const BlendedLogit target = blended_target_logit(cache.cosines(i, y), cache.margins, cache.lambda);
    double grad_r = 0.0;
    for (std::size_t j = 0; j < classes; ++j) {
      grad_r += g[j] * (j == y ? target.value : cache.cosines(i, j));
    }
    const auto xhat = cache.unit_features.row(i);
    std::fill(grad_unit_x.begin(), grad_unit_x.end(), 0.0);
    for (std::size_t j = 0; j < classes; ++j) {
      const double gc = g[j] * r * (j == y ? target.derivative : 1.0);
      for (std::size_t d = 0; d < dim; ++d) {
        grad_unit_x[d] += gc * cache.unit_weights(d, j);
        grad_unit_w(d, j) += gc * xhat[d];
      }
    }
    const double radial = dot(grad_unit_x, xhat);
    const double inv_norm = 1.0 / cache.feature_norms[i];
    const double scale_term = cache.normalize_features ? 0.0 : grad_r;
    auto gx = out.grad_features.row(i);
    for (std::size_t d = 0; d < dim; ++d) {
      gx[d] = (grad_unit_x[d] - radial * xhat[d]) * inv_norm + scale_term * xhat[d];
    }
  }
  out.grad_weights =
      unit_columns_backward(UnitColumns{cache.unit_weights, cache.weight_norms}, grad_unit_w);
  return out;
}

RingLossResult ring_loss(const Matrix& features, double target, double weight) {
  if (!(weight >= 0.0)) throw std::invalid_argument("ring weight must be >= 0");
  if (!(target > 0.0)) throw std::invalid_argument("ring target must be positive");
  const std::size_t n = features.rows();
  if (n == 0) throw std::invalid_argument("ring loss of an empty batch");
  RingLossResult out{0.0, Matrix(n, features.cols()), 0.0};
  const double inv_n = 1.0 / static_cast<double>(n);
  double sum_sq = 0.0;
  double sum_dev = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double norm = row_norm_checked(features, i, "feature");
    const double dev = norm - target;
    sum_sq += dev * dev;
    sum_dev += dev;
    const double k = 2.0 * weight * dev * inv_n / norm;
    const auto x = features.row(i);
    auto gx = out.grad_features.row(i);
    for (std::size_t d = 0; d < x.size(); ++d) gx[d] = k * x[d];
  }
  out.loss = weight * inv_n * sum_sq;
  out.grad_target = -2.0 * weight * inv_n * sum_dev;
  return out;
}

MheLossResult mhe_loss(const Matrix& weights, const std::vector<int>& labels, double weight) {
  const std::size_t classes = weights.cols();
  const std::size_t dim = weights.rows();
  if (classes < 2) throw std::invalid_argument("MHE needs at least two classes");
  if (labels.empty()) throw std::invalid_argument("MHE of an empty batch");
  const UnitColumns cols = unit_columns(weights, "weight");

  std::vector<std::size_t> counts(classes, 0);
  for (int y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= classes) {
      throw std::invalid_argument("MHE label " + std::to_string(y) + " out of range");
    }
    ++counts[static_cast<std::size_t>(y)];
  }
  const double norm = weight / (static_cast<double>(labels.size()) * static_cast<double>(classes - 1));

  Matrix grad_unit(dim, classes);
  Vector a(dim), b(dim);
  double energy = 0.0;
  for (std::size_t y = 0; y < classes; ++y) {
    if (counts[y] == 0) continue;
    const double w = norm * static_cast<double>(counts[y]);
    load_column(cols.unit, y, a);
    for (std::size_t j = 0; j < classes; ++j) {
      if (j == y) continue;
      load_column(cols.unit, j, b);
      const double d2 = squared_distance(a, b);
      if (!(d2 > 1e-12)) {
        throw NumericError("normalized weight columns " + std::to_string(y) + " and " +
                           std::to_string(j) + " coincide");
      }
      energy += static_cast<double>(counts[y]) / d2;
      // d(1/d2)/da = -2 (a - b) / d2^2
      const double k = -2.0 * w / (d2 * d2);
      for (std::size_t d = 0; d < dim; ++d) {
        const double diff = a[d] - b[d];
        grad_unit(d, y) += k * diff;
        grad_unit(d, j) -= k * diff;
      }
    }
  }
  return {norm * energy, unit_columns_backward(cols, grad_unit)};
}

Ge2eResult ge2e_loss_with_centers(const Matrix& features, const std::vector<int>& labels,
                                  const Matrix& centers, double scale, double bias) {
  const std::size_t n = features.rows();
  const std::size_t dim = features.cols();
  const std::size_t speakers = centers.cols();
  if (n == 0) throw std::invalid_argument("GE2E of an empty batch");
  if (labels.size() != n) throw std::invalid_argument("GE2E label count mismatch");
  if (centers.rows() != dim) throw std::invalid_argument("GE2E center dimension mismatch");
  if (speakers < 2) throw std::invalid_argument("GE2E needs at least two speakers in the batch");
  for (int y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= speakers) {
      throw std::invalid_argument("GE2E label " + std::to_string(y) + " out of range");
    }
  }
  const UnitColumns cols = unit_columns(centers, "center");
  const double inv_n = 1.0 / static_cast<double>(n);

  Ge2eResult out{0.0, Matrix(n, dim), Matrix(dim, speakers), 0.0};
  Matrix grad_unit_c(dim, speakers);
  Vector logits(speakers), cosines(speakers), grad_unit_x(dim), column(dim), xhat(dim);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const auto x = features.row(i);
    const double xnorm = row_norm_checked(features, i, "feature");
    for (std::size_t d = 0; d < dim; ++d) xhat[d] = x[d] / xnorm;
    for (std::size_t j = 0; j < speakers; ++j) {
      load_column(cols.unit, j, column);
      cosines[j] = dot(xhat, column);
      logits[j] = scale * cosines[j] + bias;
    }
    const auto y = static_cast<std::size_t>(labels[i]);
    total += log_sum_exp(logits) - logits[y];
    Vector p = stable_softmax(logits);
    p[y] -= 1.0;
    std::fill(grad_unit_x.begin(), grad_unit_x.end(), 0.0);
    for (std::size_t j = 0; j < speakers; ++j) {
      const double gc = p[j] * inv_n * scale;
      out.grad_bias += p[j] * inv_n;
      for (std::size_t d = 0; d < dim; ++d) {
        grad_unit_x[d] += gc * cols.unit(d, j);
        grad_unit_c(d, j) += gc * xhat[d];
      }
    }
    const double radial = dot(grad_unit_x, xhat);
    auto gx = out.grad_features.row(i);
    for (std::size_t d = 0; d < dim; ++d) gx[d] = (grad_unit_x[d] - radial * xhat[d]) / xnorm;
  }
  out.loss = total * inv_n;
  out.grad_centers = unit_columns_backward(cols, grad_unit_c);
  return out;
}

Ge2eResult ge2e_loss(const Batch& batch, double scale, double bias) {
  batch.validate();
  const std::size_t n = batch.features.rows();
  const std::size_t dim = batch.features.cols();
  std::map<int, int> slot;
  std::vector<int> local(n);
  for (std::size_t i = 0; i < n; ++i) {
    auto [it, inserted] = slot.try_emplace(batch.labels[i], static_cast<int>(slot.size()));
    local[i] = it->second;
  }
  const std::size_t speakers = slot.size();
  if (speakers < 2) throw std::invalid_argument("GE2E needs at least two speakers in the batch");

  Matrix centers(dim, speakers);
  Vector counts(speakers, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    const auto s = static_cast<std::size_t>(local[i]);
    counts[s] += 1.0;
    for (std::size_t d = 0; d < dim; ++d) centers(d, s) += batch.features(i, d);
  }
  for (std::size_t s = 0; s < speakers; ++s)
    for (std::size_t d = 0; d < dim; ++d) centers(d, s) /= counts[s];

  Ge2eResult out = ge2e_loss_with_centers(batch.features, local, centers, scale, bias);
  for (std::size_t i = 0; i < n; ++i) {
    const auto s = static_cast<std::size_t>(local[i]);
    for (std::size_t d = 0; d < dim; ++d) out.grad_features(i, d) += out.grad_centers(d, s) / counts[s];
  }
  out.grad_centers = Matrix();
  return out;
}

LossOutput total_loss(const Batch& batch, const Matrix& weights, const LossConfig& config,
                      std::int64_t step, double ring_target) {
  config.validate();
  LossOutput out;
  if (config.kind == LossKind::kGE2E) {
    const Ge2eResult ge2e = ge2e_loss(batch, config.scale, config.ge2e_bias);
    out.primary_loss = ge2e.loss;
    out.grad_features = ge2e.grad_features;
    out.grad_weights = Matrix(weights.rows(), weights.cols());
    out.diagnostics.lambda = anneal_lambda(step, config.anneal);
    double norms = 0.0;
    for (std::size_t i = 0; i < batch.features.rows(); ++i) norms += norm2(batch.features.row(i));
    out.diagnostics.feature_norm_mean = norms / static_cast<double>(batch.features.rows());
  } else {
    out = margin_softmax_backward(margin_softmax_forward(batch, weights, config, step));
  }
  out.loss = out.primary_loss;
  if (config.ring_weight > 0.0) {
    const RingLossResult ring = ring_loss(batch.features, ring_target, config.ring_weight);
    out.ring_loss = ring.loss;
    out.loss += ring.loss;
    out.grad_ring_target = ring.grad_target;
    axpy(out.grad_features.data(), 1.0, ring.grad_features.data());
  }
  if (config.mhe_weight > 0.0) {
    const MheLossResult mhe = mhe_loss(weights, batch.labels, config.mhe_weight);
    out.mhe_loss = mhe.loss;
    out.loss += mhe.loss;
    axpy(out.grad_weights.data(), 1.0, mhe.grad_weights.data());
  }
  return out;
}

LossOutput total_loss(const Batch& batch, const Matrix& weights, const LossConfig& config,
                      std::int64_t step) {
  return total_loss(batch, weights, config, step, config.ring_target);
}

}  // namespace lms
