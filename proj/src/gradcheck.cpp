#include "lms/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <limits>
#include <sstream>

#include "lms/losses.hpp"
#include "lms/model.hpp"
#include "lms/numkit.hpp"

namespace lms {

namespace {

constexpr double kLossStep = 1e-6;
constexpr double kNetStep = 1e-6;

Matrix random_matrix(RngStream& rng, std::size_t rows, std::size_t cols, double scale = 1.0) {
  Matrix m(rows, cols);
  for (double& v : m.storage()) v = scale * rng.gaussian();
  return m;
}

std::vector<int> random_labels(RngStream& rng, std::size_t n, std::size_t classes) {
  std::vector<int> labels(n);
  for (int& y : labels) y = static_cast<int>(rng.uniform_int(classes));
  return labels;
}

Vector concat(const Matrix& a, const Matrix& b) {
  Vector v(a.data().begin(), a.data().end());
  v.insert(v.end(), b.data().begin(), b.data().end());
  return v;
}

void split_into(std::span<const double> p, Matrix& a, Matrix& b) {
  std::copy(p.begin(), p.begin() + static_cast<std::ptrdiff_t>(a.size()), a.storage().begin());
  std::copy(p.begin() + static_cast<std::ptrdiff_t>(a.size()), p.end(), b.storage().begin());
}

// Gradient of a softmax-family loss w.r.t. (features, weights).
double check_margin_loss(RngStream& rng, LossConfig cfg, bool normalize_features) {
  constexpr std::size_t n = 8, dim = 5, classes = 4;
  cfg.normalize_features = normalize_features && cfg.kind != LossKind::kSoftmax;
  cfg.scale = 30.0 * (0.2 + rng.uniform());
  Batch batch{random_matrix(rng, n, dim), random_labels(rng, n, classes), classes};
  Matrix weights = random_matrix(rng, dim, classes);
  const std::int64_t step = static_cast<std::int64_t>(rng.uniform_int(400));

  const LossOutput analytic = margin_softmax_backward(margin_softmax_forward(batch, weights, cfg, step));
  const Vector point = concat(batch.features, weights);
  const Vector numeric = finite_difference_grad(
      [&](std::span<const double> p) {
        Batch b = batch;
        Matrix w = weights;
        split_into(p, b.features, w);
        return margin_softmax_forward(b, w, cfg, step).loss;
      },
      point, kLossStep);
  return max_relative_error(concat(analytic.grad_features, analytic.grad_weights), numeric);
}

double check_ring(RngStream& rng) {
  const Matrix x = random_matrix(rng, 6, 5, 3.0);
  const double target = 1.0 + 10.0 * rng.uniform();
  const double weight = 0.01 + rng.uniform();
  const RingLossResult r = ring_loss(x, target, weight);
  Vector point(x.data().begin(), x.data().end());
  point.push_back(target);
  const Vector numeric = finite_difference_grad(
      [&](std::span<const double> p) {
        Matrix m(x.rows(), x.cols(), Vector(p.begin(), p.end() - 1));
        return ring_loss(m, p.back(), weight).loss;
      },
      point, kLossStep);
  Vector analytic(r.grad_features.data().begin(), r.grad_features.data().end());
  analytic.push_back(r.grad_target);
  return max_relative_error(analytic, numeric);
}

double check_mhe(RngStream& rng) {
  const Matrix w = random_matrix(rng, 5, 4);
  const std::vector<int> labels = random_labels(rng, 7, 4);
  const double weight = 0.01 + rng.uniform();
  const MheLossResult r = mhe_loss(w, labels, weight);
  const Vector numeric = finite_difference_grad(
      [&](std::span<const double> p) {
        return mhe_loss(Matrix(w.rows(), w.cols(), Vector(p.begin(), p.end())), labels, weight).loss;
      },
      w.data(), kLossStep);
  return max_relative_error(r.grad_weights.data(), numeric);
}

double check_ge2e(RngStream& rng) {
  constexpr std::size_t speakers = 3, per = 3, dim = 5;
  Batch batch{random_matrix(rng, speakers * per, dim), {}, speakers};
  for (std::size_t s = 0; s < speakers; ++s)
    for (std::size_t k = 0; k < per; ++k) batch.labels.push_back(static_cast<int>(s));
  const double scale = 1.0 + 10.0 * rng.uniform();
  const double bias = rng.gaussian();
  const Ge2eResult r = ge2e_loss(batch, scale, bias);
  const Vector numeric = finite_difference_grad(
      [&](std::span<const double> p) {
        Batch b = batch;
        std::copy(p.begin(), p.end(), b.features.storage().begin());
        return ge2e_loss(b, scale, bias).loss;
      },
      batch.features.data(), kLossStep);
  return max_relative_error(r.grad_features.data(), numeric);
}

double check_normalization(RngStream& rng) {
  const Matrix x = random_matrix(rng, 4, 5);
  const Matrix probe = random_matrix(rng, 4, 5);
  const double scale = 0.5 + 30.0 * rng.uniform();
  const FeatureNormalization norm(x, scale);
  const Matrix analytic = norm.backward(probe);
  const Vector numeric = finite_difference_grad(
      [&](std::span<const double> p) {
        const Matrix y = normalize_features(Matrix(x.rows(), x.cols(), Vector(p.begin(), p.end())), scale);
        return dot(y.data(), probe.data());
      },
      x.data(), kLossStep);
  return max_relative_error(analytic.data(), numeric);
}

double check_stats_pool(RngStream& rng) {
  const Matrix frames = random_matrix(rng, 7, 4);
  const Vector probe = rng_draw_gaussian(rng, 8);
  const Matrix analytic = stats_pool_backward(frames, probe);
  const Vector numeric = finite_difference_grad(
      [&](std::span<const double> p) {
        return dot(stats_pool(Matrix(frames.rows(), frames.cols(), Vector(p.begin(), p.end()))), probe);
      },
      frames.data(), kLossStep);
  return max_relative_error(analytic.data(), numeric);
}

double min_relu_margin(const NetCache& cache) {
  double m = std::numeric_limits<double>::infinity();
  auto scan = [&](const BlockCache& bc) {
    if (!bc.has_relu) return;
    for (double v : bc.relu_input.data()) m = std::min(m, std::abs(v));
  };
  for (const BlockCache& bc : cache.frame) scan(bc);
  for (const BlockCache& bc : cache.segment) scan(bc);
  return m;
}

// Tiny network: 3-dim input, two frame layers [3, 3] of width 4, segment
// widths [4, 4], 3 classes, 4 segments of 9-11 frames.
double check_network(RngStream& rng, std::size_t instance) {
  NetworkConfig nc;
  nc.input_dim = 3;
  nc.frame_kernel_sizes = {3, 3};
  nc.frame_widths = {4, 4};
  nc.segment_widths = {4, 4};
  nc.embedding_layer_index = 0;
  nc.num_classes = 3;
  nc.bn_before_relu = instance % 4 != 1;
  nc.use_batchnorm = instance % 4 != 2;
  nc.remove_last_relu = instance % 4 != 3;

  LossConfig cfg;
  switch (instance % 5) {
    case 0: cfg = make_loss_config(LossKind::kAMSoftmax, 0.2); break;
    case 1: cfg = make_loss_config(LossKind::kSoftmax); break;
    case 2: cfg = make_loss_config(LossKind::kArcSoftmax, 0.3); break;
    case 3: cfg = make_loss_config(LossKind::kASoftmax, 4.0); break;
    default: cfg = make_loss_config(LossKind::kModifiedSoftmax); break;
  }
  cfg.anneal = {0.0, 5.0, 0.1, 2.0};
  if (instance % 2 == 0) {
    cfg.ring_weight = 0.01 + rng.uniform();
    cfg.mhe_weight = 0.01 + rng.uniform();
  } else if (cfg.kind != LossKind::kSoftmax) {
    cfg.normalize_features = true;
    cfg.scale = 5.0;
  }

  while (true) {
    EmbeddingNet net = init_network(nc, rng, 1.0 + rng.uniform());
    // Non-trivial BN parameters so their gradients are exercised.
    for (Layer* layer : {&net.params.frame[0], &net.params.segment[1]}) {
      for (double& v : layer->bn_scale) v = 0.5 + rng.uniform();
      for (double& v : layer->bn_shift) v = 0.3 * rng.gaussian();
      for (double& v : layer->bias) v = 0.3 * rng.gaussian();
    }
    SegmentBatch batch;
    batch.num_classes = nc.num_classes;
    for (std::size_t b = 0; b < 4; ++b) {
      batch.segments.push_back(random_matrix(rng, 9 + rng.uniform_int(3), nc.input_dim));
      batch.labels.push_back(static_cast<int>(b % nc.num_classes));
    }
    const std::int64_t step = static_cast<std::int64_t>(rng.uniform_int(50));
    // A trailing ReLU can zero a whole feature row, where normalization is undefined.
    const Matrix features = net_forward(net, batch.segments, Mode::kTrain).features;
    bool degenerate = false;
    for (std::size_t i = 0; i < features.rows(); ++i) degenerate |= norm2(features.row(i)) < 0.1;
    if (degenerate) continue;
    const NetLoss analytic = network_loss(net, batch, cfg, step);
    // Central differences are only valid away from ReLU kinks.
    if (min_relu_margin(analytic.cache) < 1e-4) continue;

    const Vector point = flatten(net.params);
    const Vector numeric = finite_difference_grad(
        [&](std::span<const double> p) {
          EmbeddingNet probe = net;
          unflatten(probe.params, p);
          return network_loss(probe, batch, cfg, step).loss.loss;
        },
        point, kNetStep);
    return max_relative_error(flatten(analytic.grads), numeric);
  }
}

}  // namespace

std::vector<GradCheckResult> run_gradcheck_suite(const GradCheckOptions& options) {
  std::vector<GradCheckResult> results;
  std::uint64_t stream = 100;
  auto run = [&](const std::string& name, double tol, const std::function<double(RngStream&, std::size_t)>& check) {
    RngStream rng(options.seed, stream++);
    GradCheckResult r{name, 0, 0.0, tol};
    for (std::size_t i = 0; i < options.instances; ++i) {
      r.max_relative_error = std::max(r.max_relative_error, check(rng, i));
      ++r.instances;
    }
    results.push_back(r);
  };
  const double tol = options.loss_tolerance;
  auto margin_check = [&](LossConfig cfg) {
    return [cfg](RngStream& rng, std::size_t i) { return check_margin_loss(rng, cfg, i % 2 == 1); };
  };

  run("softmax", tol, margin_check(make_loss_config(LossKind::kSoftmax)));
  run("modified-softmax", tol, margin_check(make_loss_config(LossKind::kModifiedSoftmax)));
  for (double m1 : {2.0, 4.0}) {
    LossConfig cfg = make_loss_config(LossKind::kASoftmax, m1);
    cfg.anneal = {0.0, 0.0, 0.0, 0.0};
    std::ostringstream name;
    name << "asoftmax m1=" << m1;
    run(name.str(), tol, margin_check(cfg));
    cfg.anneal = {10.0, 1000.0, 0.01, 5.0};
    run(name.str() + " annealed", tol, margin_check(cfg));
  }
  for (double m2 : {0.20, 0.25, 0.30, 0.35}) {
    LossConfig cfg = make_loss_config(LossKind::kArcSoftmax, m2);
    cfg.anneal = {0.0, 2.0, 0.01, 1.0};
    std::ostringstream name;
    name << "arcsoftmax m2=" << std::fixed << std::setprecision(2) << m2;
    run(name.str(), tol, margin_check(cfg));
  }
  for (double m3 : {0.15, 0.20, 0.25, 0.30}) {
    LossConfig cfg = make_loss_config(LossKind::kAMSoftmax, m3);
    cfg.anneal = {0.0, 2.0, 0.01, 1.0};
    std::ostringstream name;
    name << "amsoftmax m3=" << std::fixed << std::setprecision(2) << m3;
    run(name.str(), tol, margin_check(cfg));
  }
  run("ring", tol, [](RngStream& rng, std::size_t) { return check_ring(rng); });
  run("mhe", tol, [](RngStream& rng, std::size_t) { return check_mhe(rng); });
  run("ge2e", tol, [](RngStream& rng, std::size_t) { return check_ge2e(rng); });
  run("feature-normalization", tol, [](RngStream& rng, std::size_t) { return check_normalization(rng); });
  run("stats-pool", tol, [](RngStream& rng, std::size_t) { return check_stats_pool(rng); });
  run("network end-to-end", options.network_tolerance, check_network);
  return results;
}

std::string format_gradcheck_table(const std::vector<GradCheckResult>& results) {
  std::ostringstream os;
  os << std::left << std::setw(28) << "check" << std::right << std::setw(10) << "instances" << std::setw(14)
     << "max rel err" << std::setw(12) << "tolerance" << "  status\n";
  for (const GradCheckResult& r : results) {
    os << std::left << std::setw(28) << r.name << std::right << std::setw(10) << r.instances << std::setw(14)
       << std::scientific << std::setprecision(3) << r.max_relative_error << std::setw(12) << r.tolerance
       << std::defaultfloat << "  " << (r.passed() ? "ok" : "FAIL") << '\n';
  }
  return os.str();
}

}  // namespace lms
