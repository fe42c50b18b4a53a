#include "lms/model.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>
#include <stdexcept>

namespace lms {

namespace {

constexpr double kStdFloorVariance = 1e-10;

std::string layer_name(const char* stack, std::size_t l) {
  return std::string(stack) + "." + std::to_string(l);
}

Layer make_layer(std::size_t kernel, std::size_t in, std::size_t out, bool bn) {
  Layer layer;
  layer.kernel = kernel;
  layer.in = in;
  layer.out = out;
  layer.weight = Matrix(kernel * in, out);
  layer.bias.assign(out, 0.0);
  if (bn) {
    layer.bn_scale.assign(out, 1.0);
    layer.bn_shift.assign(out, 0.0);
  }
  return layer;
}

BatchNormStats make_stats(std::size_t width, bool bn) {
  if (!bn) return {};
  return {Vector(width, 0.0), Vector(width, 1.0)};
}

// z = window(t) * W + b over every valid position of every segment.
Matrix conv_forward(const Layer& layer, const Matrix& input, const std::vector<std::size_t>& in_off,
                    std::vector<std::size_t>& out_off) {
  const std::size_t segments = in_off.size() - 1;
  out_off.assign(segments + 1, 0);
  for (std::size_t b = 0; b < segments; ++b) {
    out_off[b + 1] = out_off[b] + (in_off[b + 1] - in_off[b]) - (layer.kernel - 1);
  }
  Matrix z(out_off.back(), layer.out);
  const std::size_t width = layer.kernel * layer.in;
  for (std::size_t b = 0; b < segments; ++b) {
    for (std::size_t t = 0; t < out_off[b + 1] - out_off[b]; ++t) {
      const double* window = input.data().data() + (in_off[b] + t) * layer.in;
      double* row = z.row(out_off[b] + t).data();
      std::copy(layer.bias.begin(), layer.bias.end(), row);
      for (std::size_t k = 0; k < width; ++k) {
        const double v = window[k];
        const double* w = layer.weight.row(k).data();
        for (std::size_t o = 0; o < layer.out; ++o) row[o] += v * w[o];
      }
    }
  }
  return z;
}

// Accumulates dW, db and returns d input. Transposed correlation over the
// valid range, written window by window.
Matrix conv_backward(const Layer& layer, const Matrix& input, const std::vector<std::size_t>& in_off,
                     const std::vector<std::size_t>& out_off, const Matrix& grad_z, Layer& grad) {
  Matrix grad_in(input.rows(), input.cols());
  const std::size_t width = layer.kernel * layer.in;
  const std::size_t segments = in_off.size() - 1;
  for (std::size_t b = 0; b < segments; ++b) {
    for (std::size_t t = 0; t < out_off[b + 1] - out_off[b]; ++t) {
      const std::size_t r = out_off[b] + t;
      const double* g = grad_z.row(r).data();
      const double* window = input.data().data() + (in_off[b] + t) * layer.in;
      double* gwin = grad_in.data().data() + (in_off[b] + t) * layer.in;
      for (std::size_t o = 0; o < layer.out; ++o) grad.bias[o] += g[o];
      for (std::size_t k = 0; k < width; ++k) {
        const double* w = layer.weight.row(k).data();
        double* gw = grad.weight.row(k).data();
        const double v = window[k];
        double acc = 0.0;
        for (std::size_t o = 0; o < layer.out; ++o) {
          gw[o] += v * g[o];
          acc += w[o] * g[o];
        }
        gwin[k] += acc;
      }
    }
  }
  return grad_in;
}

Matrix relu(const Matrix& in) {
  Matrix out = in;
  for (double& v : out.storage()) v = v > 0.0 ? v : 0.0;
  return out;
}

Matrix relu_backward(const Matrix& in, Matrix grad) {
  for (std::size_t i = 0; i < grad.size(); ++i)
    if (!(in.storage()[i] > 0.0)) grad.storage()[i] = 0.0;
  return grad;
}

Matrix batchnorm_forward(const Layer& layer, const BatchNormStats& stats, const Matrix& in,
                         Mode mode, double eps, BlockCache& cache) {
  const std::size_t rows = in.rows();
  const std::size_t width = in.cols();
  cache.bn_mean.assign(width, 0.0);
  cache.bn_var.assign(width, 0.0);
  if (mode == Mode::kTrain) {
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < width; ++c) cache.bn_mean[c] += in(r, c);
    for (double& m : cache.bn_mean) m /= static_cast<double>(rows);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < width; ++c) {
        const double d = in(r, c) - cache.bn_mean[c];
        cache.bn_var[c] += d * d;
      }
    for (double& v : cache.bn_var) v /= static_cast<double>(rows);
  } else {
    cache.bn_mean = stats.mean;
    cache.bn_var = stats.var;
  }
  cache.bn_inv_std.resize(width);
  for (std::size_t c = 0; c < width; ++c) cache.bn_inv_std[c] = 1.0 / std::sqrt(cache.bn_var[c] + eps);
  cache.bn_unit = Matrix(rows, width);
  Matrix out(rows, width);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < width; ++c) {
      const double u = (in(r, c) - cache.bn_mean[c]) * cache.bn_inv_std[c];
      cache.bn_unit(r, c) = u;
      out(r, c) = layer.bn_scale[c] * u + layer.bn_shift[c];
    }
  return out;
}

Matrix batchnorm_backward(const Layer& layer, const BlockCache& cache, const Matrix& grad_out,
                          Layer& grad) {
  const std::size_t rows = grad_out.rows();
  const std::size_t width = grad_out.cols();
  const double n = static_cast<double>(rows);
  Vector sum_g(width, 0.0), sum_gu(width, 0.0);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < width; ++c) {
      const double g = grad_out(r, c);
      grad.bn_shift[c] += g;
      grad.bn_scale[c] += g * cache.bn_unit(r, c);
      const double gu = g * layer.bn_scale[c];
      sum_g[c] += gu;
      sum_gu[c] += gu * cache.bn_unit(r, c);
    }
  Matrix grad_in(rows, width);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < width; ++c) {
      const double gu = grad_out(r, c) * layer.bn_scale[c];
      grad_in(r, c) =
          cache.bn_inv_std[c] * (n * gu - sum_g[c] - cache.bn_unit(r, c) * sum_gu[c]) / n;
    }
  return grad_in;
}

BlockCache block_forward(const Layer& layer, const BatchNormStats& stats, Matrix input, Matrix z,
                         Mode mode, bool has_relu, const NetworkConfig& cfg) {
  BlockCache cache;
  cache.input = std::move(input);
  cache.affine = std::move(z);
  cache.has_bn = !layer.bn_scale.empty();
  cache.has_relu = has_relu;
  if (cache.has_bn && cache.has_relu && !cfg.bn_before_relu) {
    cache.relu_input = cache.affine;
    cache.bn_input = relu(cache.affine);
    cache.output = batchnorm_forward(layer, stats, cache.bn_input, mode, cfg.bn_epsilon, cache);
    return cache;
  }
  Matrix h = cache.affine;
  if (cache.has_bn) {
    cache.bn_input = cache.affine;
    h = batchnorm_forward(layer, stats, cache.bn_input, mode, cfg.bn_epsilon, cache);
  }
  if (cache.has_relu) {
    cache.relu_input = h;
    cache.output = relu(h);
  } else {
    cache.output = std::move(h);
  }
  return cache;
}

// Gradient w.r.t. the affine output z; accumulates BN parameter gradients.
Matrix block_backward(const Layer& layer, const BlockCache& cache, Matrix grad, bool bn_before_relu,
                      Layer& grad_layer) {
  if (cache.has_bn && cache.has_relu && !bn_before_relu) {
    grad = batchnorm_backward(layer, cache, grad, grad_layer);
    return relu_backward(cache.relu_input, std::move(grad));
  }
  if (cache.has_relu) grad = relu_backward(cache.relu_input, std::move(grad));
  if (cache.has_bn) grad = batchnorm_backward(layer, cache, grad, grad_layer);
  return grad;
}

Matrix affine_forward(const Layer& layer, const Matrix& input) {
  Matrix z(input.rows(), layer.out);
  for (std::size_t r = 0; r < input.rows(); ++r) {
    double* row = z.row(r).data();
    std::copy(layer.bias.begin(), layer.bias.end(), row);
    for (std::size_t k = 0; k < layer.in; ++k) {
      const double v = input(r, k);
      const double* w = layer.weight.row(k).data();
      for (std::size_t o = 0; o < layer.out; ++o) row[o] += v * w[o];
    }
  }
  return z;
}

Matrix affine_backward(const Layer& layer, const Matrix& input, const Matrix& grad_z, Layer& grad) {
  Matrix grad_in(input.rows(), layer.in);
  for (std::size_t r = 0; r < input.rows(); ++r) {
    const double* g = grad_z.row(r).data();
    for (std::size_t o = 0; o < layer.out; ++o) grad.bias[o] += g[o];
    for (std::size_t k = 0; k < layer.in; ++k) {
      const double* w = layer.weight.row(k).data();
      double* gw = grad.weight.row(k).data();
      const double v = input(r, k);
      double acc = 0.0;
      for (std::size_t o = 0; o < layer.out; ++o) {
        gw[o] += v * g[o];
        acc += w[o] * g[o];
      }
      grad_in(r, k) = acc;
    }
  }
  return grad_in;
}

Matrix rows_of(const Matrix& m, std::size_t begin, std::size_t end) {
  Matrix out(end - begin, m.cols());
  std::copy(m.data().begin() + static_cast<std::ptrdiff_t>(begin * m.cols()),
            m.data().begin() + static_cast<std::ptrdiff_t>(end * m.cols()), out.storage().begin());
  return out;
}

template <typename Params, typename Span, typename Fn>
void visit_tensors(Params& params, Fn&& fn) {
  auto visit_stack = [&](auto& stack, const char* name) {
    for (std::size_t l = 0; l < stack.size(); ++l) {
      auto& layer = stack[l];
      const std::string base = layer_name(name, l);
      fn(base + ".weight", Span(layer.weight.data()), ParamRole::kWeight);
      fn(base + ".bias", Span(layer.bias), ParamRole::kBias);
      if (!layer.bn_scale.empty()) {
        fn(base + ".bn_scale", Span(layer.bn_scale), ParamRole::kBnScale);
        fn(base + ".bn_shift", Span(layer.bn_shift), ParamRole::kBnShift);
      }
    }
  };
  visit_stack(params.frame, "frame");
  visit_stack(params.segment, "segment");
  fn(std::string("output.weight"), Span(params.output_weights.data()), ParamRole::kOutputWeight);
  fn(std::string("ring_target"), Span(&params.ring_target, 1), ParamRole::kRingTarget);
}

}  // namespace

void NetworkConfig::validate() const {
  auto fail = [](const std::string& field, const std::string& what) {
    throw std::invalid_argument("network." + field + ": " + what);
  };
  if (input_dim == 0) fail("input_dim", "must be positive");
  if (frame_kernel_sizes.empty()) fail("frame_kernel_sizes", "need at least one frame layer");
  if (frame_kernel_sizes.size() != frame_widths.size())
    fail("frame_widths", "must have one entry per frame kernel");
  for (std::size_t k : frame_kernel_sizes)
    if (k == 0 || k % 2 == 0) fail("frame_kernel_sizes", "kernel sizes must be odd and positive");
  for (std::size_t w : frame_widths)
    if (w == 0) fail("frame_widths", "widths must be positive");
  if (segment_widths.empty()) fail("segment_widths", "need at least one segment layer");
  for (std::size_t w : segment_widths)
    if (w == 0) fail("segment_widths", "widths must be positive");
  if (embedding_layer_index >= segment_widths.size())
    fail("embedding_layer_index", "must index a segment layer");
  if (num_classes < 2) fail("num_classes", "must be >= 2");
  if (!(bn_momentum >= 0.0 && bn_momentum < 1.0)) fail("bn_momentum", "must be in [0, 1)");
  if (!(bn_epsilon > 0.0)) fail("bn_epsilon", "must be positive");
}

std::size_t NetworkConfig::receptive_field() const {
  std::size_t rf = 1;
  for (std::size_t k : frame_kernel_sizes) rf += k - 1;
  return rf;
}

std::string NetworkConfig::describe() const {
  std::ostringstream os;
  auto list = [&](const std::vector<std::size_t>& v) {
    os << '[';
    for (std::size_t i = 0; i < v.size(); ++i) os << (i ? "," : "") << v[i];
    os << ']';
  };
  os << "input_dim=" << input_dim << ";kernels=";
  list(frame_kernel_sizes);
  os << ";frame_widths=";
  list(frame_widths);
  os << ";segment_widths=";
  list(segment_widths);
  os << ";embedding=" << embedding_layer_index << ";classes=" << num_classes
     << ";bn=" << use_batchnorm << ";no_last_relu=" << remove_last_relu
     << ";bn_first=" << bn_before_relu << ";last_bn=" << last_layer_batchnorm;
  os.precision(17);
  os << ";momentum=" << bn_momentum << ";eps=" << bn_epsilon;
  return os.str();
}

bool decays(ParamRole role, bool decay_bn_scale) {
  return role == ParamRole::kWeight || role == ParamRole::kOutputWeight ||
         (decay_bn_scale && role == ParamRole::kBnScale);
}

void for_each_tensor(NetParams& params,
                     const std::function<void(const std::string&, std::span<double>, ParamRole)>& fn) {
  visit_tensors<NetParams, std::span<double>>(params, fn);
}

void for_each_tensor(
    const NetParams& params,
    const std::function<void(const std::string&, std::span<const double>, ParamRole)>& fn) {
  visit_tensors<const NetParams, std::span<const double>>(params, fn);
}

NetParams zeros_like(const NetParams& params) {
  NetParams out = params;
  for_each_tensor(out, [](const std::string&, std::span<double> t, ParamRole) {
    std::fill(t.begin(), t.end(), 0.0);
  });
  return out;
}

std::size_t parameter_count(const NetParams& params) {
  std::size_t n = 0;
  for_each_tensor(params, [&](const std::string&, std::span<const double> t, ParamRole) { n += t.size(); });
  return n;
}

Vector flatten(const NetParams& params) {
  Vector out;
  for_each_tensor(params, [&](const std::string&, std::span<const double> t, ParamRole) {
    out.insert(out.end(), t.begin(), t.end());
  });
  return out;
}

void unflatten(NetParams& params, std::span<const double> values) {
  std::size_t pos = 0;
  for_each_tensor(params, [&](const std::string& name, std::span<double> t, ParamRole) {
    if (pos + t.size() > values.size()) throw std::invalid_argument("too few values for " + name);
    std::copy(values.begin() + static_cast<std::ptrdiff_t>(pos),
              values.begin() + static_cast<std::ptrdiff_t>(pos + t.size()), t.begin());
    pos += t.size();
  });
  if (pos != values.size()) throw std::invalid_argument("too many values for the network");
}

EmbeddingNet init_network(const NetworkConfig& config, RngStream& init, double ring_target) {
  config.validate();
  EmbeddingNet net;
  net.config = config;
  const bool bn = config.use_batchnorm;
  std::size_t in = config.input_dim;
  for (std::size_t l = 0; l < config.frame_widths.size(); ++l) {
    net.params.frame.push_back(make_layer(config.frame_kernel_sizes[l], in, config.frame_widths[l], bn));
    net.frame_stats.push_back(make_stats(config.frame_widths[l], bn));
    in = config.frame_widths[l];
  }
  in *= 2;
  for (std::size_t l = 0; l < config.segment_widths.size(); ++l) {
    const std::size_t w = config.segment_widths[l];
    const bool layer_bn = bn && (l + 1 < config.segment_widths.size() || config.last_layer_batchnorm);
    net.params.segment.push_back(make_layer(1, in, w, layer_bn));
    net.segment_stats.push_back(make_stats(w, layer_bn));
    in = w;
  }
  net.params.output_weights = Matrix(config.feature_dim(), config.num_classes);
  net.params.ring_target = ring_target;

  auto fill = [&](Matrix& m, double stddev) {
    for (double& v : m.storage()) v = stddev * init.gaussian();
  };
  for (Layer& layer : net.params.frame) fill(layer.weight, std::sqrt(2.0 / static_cast<double>(layer.weight.rows())));
  for (Layer& layer : net.params.segment) fill(layer.weight, std::sqrt(2.0 / static_cast<double>(layer.weight.rows())));
  fill(net.params.output_weights, std::sqrt(1.0 / static_cast<double>(config.feature_dim())));
  return net;
}

Vector stats_pool(const Matrix& frames) {
  const std::size_t t = frames.rows();
  const std::size_t h = frames.cols();
  if (t < 2) throw std::invalid_argument("statistics pooling needs at least 2 frames, got " + std::to_string(t));
  Vector out(2 * h, 0.0);
  for (std::size_t r = 0; r < t; ++r)
    for (std::size_t c = 0; c < h; ++c) out[c] += frames(r, c);
  for (std::size_t c = 0; c < h; ++c) out[c] /= static_cast<double>(t);
  for (std::size_t c = 0; c < h; ++c) {
    double var = 0.0;
    for (std::size_t r = 0; r < t; ++r) {
      const double d = frames(r, c) - out[c];
      var += d * d;
    }
    out[h + c] = std::sqrt(std::max(var / static_cast<double>(t), kStdFloorVariance));
  }
  return out;
}

Matrix stats_pool_backward(const Matrix& frames, std::span<const double> grad_output) {
  const std::size_t t = frames.rows();
  const std::size_t h = frames.cols();
  if (t < 2) throw std::invalid_argument("statistics pooling needs at least 2 frames");
  if (grad_output.size() != 2 * h) throw std::invalid_argument("pooled gradient has the wrong size");
  const double inv_t = 1.0 / static_cast<double>(t);
  Vector mean(h, 0.0);
  for (std::size_t r = 0; r < t; ++r)
    for (std::size_t c = 0; c < h; ++c) mean[c] += frames(r, c);
  for (double& m : mean) m *= inv_t;
  Vector std_coeff(h, 0.0);
  for (std::size_t c = 0; c < h; ++c) {
    double var = 0.0;
    for (std::size_t r = 0; r < t; ++r) {
      const double d = frames(r, c) - mean[c];
      var += d * d;
    }
    var *= inv_t;
    // Floored variance is constant, so no gradient flows through it.
    if (var > kStdFloorVariance) std_coeff[c] = grad_output[h + c] * inv_t / std::sqrt(var);
  }
  Matrix grad(t, h);
  for (std::size_t r = 0; r < t; ++r)
    for (std::size_t c = 0; c < h; ++c) {
      grad(r, c) = grad_output[c] * inv_t + std_coeff[c] * (frames(r, c) - mean[c]);
    }
  return grad;
}

NetForward net_forward(const EmbeddingNet& net, const std::vector<Matrix>& segments, Mode mode) {
  const NetworkConfig& cfg = net.config;
  if (segments.empty()) throw std::invalid_argument("net_forward on an empty batch");
  NetForward out;
  NetCache& cache = out.cache;
  cache.mode = mode;

  std::vector<std::size_t> offsets(segments.size() + 1, 0);
  for (std::size_t b = 0; b < segments.size(); ++b) {
    const Matrix& s = segments[b];
    if (s.cols() != cfg.input_dim) {
      throw std::invalid_argument("segment " + std::to_string(b) + " has dimension " +
                                  std::to_string(s.cols()) + ", expected " + std::to_string(cfg.input_dim));
    }
    if (s.rows() < cfg.min_segment_length()) {
      throw std::invalid_argument("segment " + std::to_string(b) + " has " + std::to_string(s.rows()) +
                                  " frames; the network needs at least " +
                                  std::to_string(cfg.min_segment_length()));
    }
    offsets[b + 1] = offsets[b] + s.rows();
  }
  Matrix current(offsets.back(), cfg.input_dim);
  for (std::size_t b = 0; b < segments.size(); ++b) {
    std::copy(segments[b].data().begin(), segments[b].data().end(),
              current.storage().begin() + static_cast<std::ptrdiff_t>(offsets[b] * cfg.input_dim));
  }
  cache.offsets.push_back(offsets);

  for (std::size_t l = 0; l < net.params.frame.size(); ++l) {
    const Layer& layer = net.params.frame[l];
    std::vector<std::size_t> next;
    Matrix z = conv_forward(layer, current, cache.offsets.back(), next);
    cache.offsets.push_back(std::move(next));
    cache.frame.push_back(block_forward(layer, net.frame_stats[l], std::move(current), std::move(z), mode, true, cfg));
    current = cache.frame.back().output;
  }

  const auto& pool_off = cache.offsets.back();
  const std::size_t h = current.cols();
  cache.pooled = Matrix(segments.size(), 2 * h);
  for (std::size_t b = 0; b < segments.size(); ++b) {
    const Vector stats = stats_pool(rows_of(current, pool_off[b], pool_off[b + 1]));
    std::copy(stats.begin(), stats.end(), cache.pooled.row(b).begin());
  }

  current = cache.pooled;
  for (std::size_t l = 0; l < net.params.segment.size(); ++l) {
    const Layer& layer = net.params.segment[l];
    const bool last = l + 1 == net.params.segment.size();
    Matrix z = affine_forward(layer, current);
    cache.segment.push_back(block_forward(layer, net.segment_stats[l], std::move(current), std::move(z), mode,
                                          !(last && cfg.remove_last_relu), cfg));
    current = cache.segment.back().output;
  }
  out.features = current;
  out.embeddings = cache.segment[cfg.embedding_layer_index].affine;
  return out;
}

NetParams net_backward(const EmbeddingNet& net, const NetCache& cache, const Matrix& grad_features) {
  if (cache.mode != Mode::kTrain) throw std::logic_error("net_backward needs a train-mode forward cache");
  if (grad_features.rows() != cache.pooled.rows() || grad_features.cols() != net.config.feature_dim()) {
    throw std::invalid_argument("feature gradient shape does not match the forward batch");
  }
  NetParams grads = zeros_like(net.params);
  const bool bn_first = net.config.bn_before_relu;

  Matrix grad = grad_features;
  for (std::size_t l = net.params.segment.size(); l-- > 0;) {
    const Layer& layer = net.params.segment[l];
    const BlockCache& bc = cache.segment[l];
    Matrix gz = block_backward(layer, bc, std::move(grad), bn_first, grads.segment[l]);
    grad = affine_backward(layer, bc.input, gz, grads.segment[l]);
  }

  const BlockCache& last_frame = cache.frame.back();
  const auto& pool_off = cache.offsets.back();
  Matrix grad_frames(last_frame.output.rows(), last_frame.output.cols());
  for (std::size_t b = 0; b + 1 < pool_off.size(); ++b) {
    const Matrix g = stats_pool_backward(rows_of(last_frame.output, pool_off[b], pool_off[b + 1]), grad.row(b));
    std::copy(g.data().begin(), g.data().end(),
              grad_frames.storage().begin() + static_cast<std::ptrdiff_t>(pool_off[b] * g.cols()));
  }

  grad = std::move(grad_frames);
  for (std::size_t l = net.params.frame.size(); l-- > 0;) {
    const Layer& layer = net.params.frame[l];
    const BlockCache& bc = cache.frame[l];
    Matrix gz = block_backward(layer, bc, std::move(grad), bn_first, grads.frame[l]);
    grad = conv_backward(layer, bc.input, cache.offsets[l], cache.offsets[l + 1], gz, grads.frame[l]);
  }
  return grads;
}

void update_running_stats(EmbeddingNet& net, const NetCache& cache) {
  if (cache.mode != Mode::kTrain) return;
  const double m = net.config.bn_momentum;
  auto update = [m](BatchNormStats& stats, const BlockCache& bc) {
    if (!bc.has_bn) return;
    for (std::size_t c = 0; c < stats.mean.size(); ++c) {
      stats.mean[c] = m * stats.mean[c] + (1.0 - m) * bc.bn_mean[c];
      stats.var[c] = m * stats.var[c] + (1.0 - m) * bc.bn_var[c];
    }
  };
  for (std::size_t l = 0; l < cache.frame.size(); ++l) update(net.frame_stats[l], cache.frame[l]);
  for (std::size_t l = 0; l < cache.segment.size(); ++l) update(net.segment_stats[l], cache.segment[l]);
}

void sgd_apply(NetParams& params, const NetParams& grads, double lr, double weight_decay,
               bool decay_bn_scale) {
  std::vector<std::span<const double>> g;
  for_each_tensor(grads, [&](const std::string&, std::span<const double> t, ParamRole) { g.push_back(t); });
  std::size_t idx = 0;
  for_each_tensor(params, [&](const std::string& name, std::span<double> p, ParamRole role) {
    const std::span<const double> gt = g.at(idx++);
    if (gt.size() != p.size()) throw std::invalid_argument("gradient shape mismatch for " + name);
    const double decay = decays(role, decay_bn_scale) ? weight_decay : 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) p[i] -= lr * (gt[i] + decay * p[i]);
  });
}

void TrainConfig::validate() const {
  auto fail = [](const std::string& field, const std::string& what) {
    throw std::invalid_argument("train." + field + ": " + what);
  };
  if (speakers_per_batch < 1) fail("speakers_per_batch", "must be positive");
  if (segments_per_speaker < 1) fail("segments_per_speaker", "must be positive");
  if (frames_min < 1 || frames_min > frames_max) fail("frames_min", "must be in [1, frames_max]");
  if (!(learning_rate > 0.0)) fail("learning_rate", "must be positive");
  if (!(weight_decay >= 0.0)) fail("weight_decay", "must be >= 0");
  if (lr_halving_patience < 1) fail("lr_halving_patience", "must be >= 1");
  if (!(lr_stop_threshold > 0.0)) fail("lr_stop_threshold", "must be positive");
}

PlateauDecision plateau_scheduler_step(PlateauState& state, double validation_loss, double current_lr,
                                       std::size_t patience, double stop_threshold,
                                       double min_improvement) {
  if (patience < 1) throw std::invalid_argument("plateau patience must be >= 1");
  PlateauDecision d{current_lr, false, false};
  if (!state.has_best || validation_loss < state.best - min_improvement) {
    state.best = validation_loss;
    state.has_best = true;
    state.since_improvement = 0;
  } else if (++state.since_improvement >= patience) {
    d.lr = current_lr * 0.5;
    d.halved = true;
    state.since_improvement = 0;
  }
  d.stop = d.lr < stop_threshold;
  return d;
}

PlateauDecision plateau_scheduler_step(std::span<const double> history, double current_lr,
                                       std::size_t patience, double stop_threshold,
                                       double min_improvement) {
  PlateauState state;
  PlateauDecision d{current_lr, false, current_lr < stop_threshold};
  for (double v : history) {
    d = plateau_scheduler_step(state, v, d.lr, patience, stop_threshold, min_improvement);
  }
  return d;
}

SegmentBatch sample_batch(const Corpus& corpus, RngStream& rng, const TrainConfig& tc) {
  const std::size_t n = corpus.num_speakers();
  if (tc.speakers_per_batch > n) {
    throw std::invalid_argument("batch needs " + std::to_string(tc.speakers_per_batch) +
                                " speakers but the corpus has " + std::to_string(n));
  }
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  SegmentBatch batch;
  batch.num_classes = n;
  const std::size_t span = tc.frames_max - tc.frames_min + 1;
  for (std::size_t i = 0; i < tc.speakers_per_batch; ++i) {
    const std::size_t j = i + static_cast<std::size_t>(rng.uniform_int(n - i));
    std::swap(order[i], order[j]);
    const Speaker& speaker = corpus.speakers[order[i]];
    if (speaker.utterances.empty()) throw std::invalid_argument("speaker " + speaker.name + " has no utterances");
    for (std::size_t k = 0; k < tc.segments_per_speaker; ++k) {
      const Utterance& utt = speaker.utterances[rng.uniform_int(speaker.utterances.size())];
      const std::size_t want = tc.frames_min + static_cast<std::size_t>(rng.uniform_int(span));
      const std::size_t length = std::min(want, utt.frames.rows());
      const std::size_t start = static_cast<std::size_t>(rng.uniform_int(utt.frames.rows() - length + 1));
      batch.segments.push_back(rows_of(utt.frames, start, start + length));
      batch.labels.push_back(static_cast<int>(order[i]));
    }
  }
  return batch;
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

constexpr char kCheckpointMagic[8] = {'L', 'M', 'S', 'C', 'K', 'P', 'T', '\0'};

class ByteWriter {
 public:
  void u8(std::uint8_t v) { bytes_.push_back(static_cast<char>(v)); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) u8(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) u8(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  void str(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    bytes_.append(s);
  }
  void tensor(const std::string& name, std::span<const double> values) {
    str(name);
    u64(values.size());
    for (double v : values) f64(v);
  }
  const std::string& bytes() const { return bytes_; }
  void raw(const char* p, std::size_t n) { bytes_.append(p, n); }

 private:
  std::string bytes_;
};

class ByteReader {
 public:
  ByteReader(std::string bytes, std::string origin) : bytes_(std::move(bytes)), origin_(std::move(origin)) {}

  std::uint8_t u8() {
    need(1);
    return static_cast<std::uint8_t>(bytes_[pos_++]);
  }
  std::uint32_t u32() {
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(u8()) << (8 * i);
    return v;
  }
  std::uint64_t u64() {
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(u8()) << (8 * i);
    return v;
  }
  double f64() { return std::bit_cast<double>(u64()); }
  std::string str() {
    const std::uint32_t n = u32();
    need(n);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  void raw(char* out, std::size_t n) {
    need(n);
    std::copy(bytes_.begin() + static_cast<std::ptrdiff_t>(pos_),
              bytes_.begin() + static_cast<std::ptrdiff_t>(pos_ + n), out);
    pos_ += n;
  }
  void tensor(const std::string& expected, std::span<double> out) {
    const std::string name = str();
    const std::uint64_t count = u64();
    if (name != expected || count != out.size()) {
      throw std::runtime_error("checkpoint " + origin_ + ": tensor mismatch at '" + expected + "' (expects " +
                               std::to_string(out.size()) + " values, file has '" + name + "' with " +
                               std::to_string(count) + ")");
    }
    for (double& v : out) v = f64();
  }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > bytes_.size()) throw std::runtime_error("checkpoint " + origin_ + " is truncated");
  }
  std::string bytes_;
  std::string origin_;
  std::size_t pos_ = 0;
};

template <typename Net, typename Fn>
void visit_running_stats(Net& net, Fn&& fn) {
  for (std::size_t l = 0; l < net.frame_stats.size(); ++l) {
    if (net.frame_stats[l].mean.empty()) continue;
    fn(layer_name("frame", l) + ".bn_running_mean", net.frame_stats[l].mean);
    fn(layer_name("frame", l) + ".bn_running_var", net.frame_stats[l].var);
  }
  for (std::size_t l = 0; l < net.segment_stats.size(); ++l) {
    if (net.segment_stats[l].mean.empty()) continue;
    fn(layer_name("segment", l) + ".bn_running_mean", net.segment_stats[l].mean);
    fn(layer_name("segment", l) + ".bn_running_var", net.segment_stats[l].var);
  }
}

}  // namespace

void checkpoint_save(const Checkpoint& checkpoint, const std::filesystem::path& path) {
  ByteWriter w;
  w.raw(kCheckpointMagic, sizeof kCheckpointMagic);
  w.u32(kCheckpointVersion);
  w.str(checkpoint.config_digest);
  w.u64(fnv1a64(checkpoint.net.config.describe()));
  w.u32(static_cast<std::uint32_t>(parameter_count(checkpoint.net.params)));
  for_each_tensor(checkpoint.net.params,
                  [&](const std::string& name, std::span<const double> t, ParamRole) { w.tensor(name, t); });
  visit_running_stats(checkpoint.net, [&](const std::string& name, const Vector& v) { w.tensor(name, v); });
  const TrainerState& s = checkpoint.state;
  w.u64(static_cast<std::uint64_t>(s.step));
  w.f64(s.learning_rate);
  w.f64(s.plateau.best);
  w.u8(s.plateau.has_best ? 1 : 0);
  w.u64(s.plateau.since_improvement);
  w.u8(s.stopped ? 1 : 0);
  w.u64(s.sampler.seed());
  w.u64(s.sampler.stream_id());
  w.u64(s.sampler.counter());

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  out.write(w.bytes().data(), static_cast<std::streamsize>(w.bytes().size()));
  if (!out) throw std::runtime_error("failed writing checkpoint " + path.string());
}

Checkpoint checkpoint_load(const std::filesystem::path& path, const NetworkConfig& config) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  ByteReader r(buf.str(), path.string());

  char magic[sizeof kCheckpointMagic];
  r.raw(magic, sizeof magic);
  if (!std::equal(magic, magic + sizeof magic, kCheckpointMagic)) {
    throw std::runtime_error("checkpoint " + path.string() + ": bad magic, not a checkpoint file");
  }
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion) {
    throw std::runtime_error("checkpoint " + path.string() + ": format version " + std::to_string(version) +
                             ", this build reads version " + std::to_string(kCheckpointVersion));
  }
  Checkpoint ck;
  ck.config_digest = r.str();
  const std::uint64_t net_digest = r.u64();
  r.u32();  // total parameter count, informational

  RngStream shape_only(0, 0);
  ck.net = init_network(config, shape_only);
  for_each_tensor(ck.net.params, [&](const std::string& name, std::span<double> t, ParamRole) { r.tensor(name, t); });
  visit_running_stats(ck.net, [&](const std::string& name, Vector& v) { r.tensor(name, v); });
  if (net_digest != fnv1a64(config.describe())) {
    throw std::runtime_error("checkpoint " + path.string() +
                             ": tensors match but the network configuration differs (" + config.describe() + ")");
  }
  TrainerState& s = ck.state;
  s.step = static_cast<std::int64_t>(r.u64());
  s.learning_rate = r.f64();
  s.plateau.best = r.f64();
  s.plateau.has_best = r.u8() != 0;
  s.plateau.since_improvement = r.u64();
  s.stopped = r.u8() != 0;
  const std::uint64_t seed = r.u64();
  const std::uint64_t stream = r.u64();
  s.sampler = RngStream(seed, stream);
  s.sampler.set_counter(r.u64());
  if (!r.done()) throw std::runtime_error("checkpoint " + path.string() + " has trailing bytes");
  return ck;
}

// ---------------------------------------------------------------------------
// Training

NetLoss network_loss(const EmbeddingNet& net, const SegmentBatch& batch, const LossConfig& config,
                     std::int64_t step) {
  NetForward fwd = net_forward(net, batch.segments, Mode::kTrain);
  Batch lb{fwd.features, batch.labels, batch.num_classes};
  NetLoss out;
  out.loss = total_loss(lb, net.params.output_weights, config, step, net.params.ring_target);
  out.grads = net_backward(net, fwd.cache, out.loss.grad_features);
  out.grads.output_weights = out.loss.grad_weights;
  out.grads.ring_target = out.loss.grad_ring_target;
  out.cache = std::move(fwd.cache);
  return out;
}

Trainer::Trainer(EmbeddingNet net, TrainConfig train, LossConfig loss, const Corpus& train_corpus,
                 const Corpus* validation, std::uint64_t seed)
    : net_(std::move(net)),
      train_(train),
      loss_(loss),
      corpus_(&train_corpus),
      validation_(validation) {
  train_.validate();
  loss_.validate();
  if (train_corpus.num_speakers() != net_.config.num_classes) {
    throw std::invalid_argument("network has " + std::to_string(net_.config.num_classes) +
                                " output classes but the training corpus has " +
                                std::to_string(train_corpus.num_speakers()) + " speakers");
  }
  state_.learning_rate = train_.learning_rate;
  state_.sampler = RngStream(seed, streams::kSampler);
}

Trainer::Trainer(Checkpoint checkpoint, TrainConfig train, LossConfig loss, const Corpus& train_corpus,
                 const Corpus* validation)
    : net_(std::move(checkpoint.net)),
      train_(train),
      loss_(loss),
      corpus_(&train_corpus),
      validation_(validation),
      state_(checkpoint.state) {
  train_.validate();
  loss_.validate();
}

bool Trainer::finished() const {
  return state_.stopped || state_.step >= static_cast<std::int64_t>(train_.steps);
}

double Trainer::validation_loss() const {
  if (validation_ == nullptr || validation_->num_utterances() == 0) return 0.0;
  std::vector<Matrix> segments;
  std::vector<int> labels;
  for (std::size_t s = 0; s < validation_->num_speakers(); ++s) {
    for (const Utterance& u : validation_->speakers[s].utterances) {
      segments.push_back(u.frames);
      labels.push_back(static_cast<int>(s));
    }
  }
  const NetForward fwd = net_forward(net_, segments, Mode::kEval);
  const Batch batch{fwd.features, labels, net_.config.num_classes};
  return total_loss(batch, net_.params.output_weights, loss_, state_.step, net_.params.ring_target).primary_loss;
}

StepLog Trainer::step() {
  const SegmentBatch batch = sample_batch(*corpus_, state_.sampler, train_);
  NetLoss result = network_loss(net_, batch, loss_, state_.step);

  StepLog log;
  log.step = state_.step;
  log.primary_loss = result.loss.primary_loss;
  log.ring_loss = result.loss.ring_loss;
  log.mhe_loss = result.loss.mhe_loss;
  log.lambda = result.loss.diagnostics.lambda;
  log.learning_rate = state_.learning_rate;
  log.feature_norm_mean = result.loss.diagnostics.feature_norm_mean;

  sgd_apply(net_.params, result.grads, state_.learning_rate, train_.weight_decay,
            train_.decay_bn_scale);
  update_running_stats(net_, result.cache);
  ++state_.step;

  if (validation_ != nullptr && train_.validate_every > 0 &&
      state_.step % static_cast<std::int64_t>(train_.validate_every) == 0) {
    const double v = validation_loss();
    log.validation_loss = v;
    const PlateauDecision d = plateau_scheduler_step(state_.plateau, v, state_.learning_rate,
                                                     train_.lr_halving_patience, train_.lr_stop_threshold,
                                                     train_.min_improvement);
    state_.learning_rate = d.lr;
    state_.stopped = d.stop;
  }
  return log;
}

void Trainer::run(const std::function<void(const StepLog&)>& on_step) {
  while (!finished()) {
    const StepLog log = step();
    if (on_step) on_step(log);
  }
}

}  // namespace lms
