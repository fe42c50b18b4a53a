#include "lms/numkit.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace lms {

Matrix::Matrix(std::size_t rows, std::size_t cols, double fill)
    : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

Matrix::Matrix(std::size_t rows, std::size_t cols, Vector data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
  if (data_.size() != rows * cols) {
    throw NumericError("matrix data length " + std::to_string(data_.size()) + " != " +
                       std::to_string(rows) + "x" + std::to_string(cols));
  }
}

Vector Matrix::column(std::size_t c) const {
  Vector out(rows_);
  for (std::size_t r = 0; r < rows_; ++r) out[r] = (*this)(r, c);
  return out;
}

bool Matrix::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

Matrix Matrix::transposed() const {
  Matrix t(cols_, rows_);
  for (std::size_t r = 0; r < rows_; ++r)
    for (std::size_t c = 0; c < cols_; ++c) t(c, r) = (*this)(r, c);
  return t;
}

double dot(std::span<const double> a, std::span<const double> b) {
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
  return acc;
}

double norm2(std::span<const double> a) { return std::sqrt(dot(a, a)); }

double squared_distance(std::span<const double> a, std::span<const double> b) {
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    acc += d * d;
  }
  return acc;
}

namespace {

void check_logits(std::span<const double> logits) {
  if (logits.empty()) throw NumericError("softmax of an empty vector");
  for (double v : logits) {
    if (!std::isfinite(v)) throw NumericError("softmax input contains a non-finite entry");
  }
}

}  // namespace

Vector stable_softmax(std::span<const double> logits) {
  check_logits(logits);
  const double peak = *std::max_element(logits.begin(), logits.end());
  Vector out(logits.size());
  double total = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    out[i] = std::exp(logits[i] - peak);
    total += out[i];
  }
  for (double& v : out) v /= total;
  return out;
}

double log_sum_exp(std::span<const double> logits) {
  check_logits(logits);
  const double peak = *std::max_element(logits.begin(), logits.end());
  double total = 0.0;
  for (double v : logits) total += std::exp(v - peak);
  return peak + std::log(total);
}

namespace {

constexpr std::uint64_t kGolden = 0x9E3779B97F4A7C15ULL;

constexpr std::uint64_t mix64(std::uint64_t z) {
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

}  // namespace

std::uint64_t RngStream::next_u64() {
  const std::uint64_t key = mix64(seed_ ^ kGolden) ^ mix64(stream_id_ + 0x632BE59BD9B4E019ULL);
  const std::uint64_t n = counter_++;
  return mix64(mix64(key + (n + 1) * kGolden) ^ key);
}

double RngStream::uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

std::uint64_t RngStream::uniform_int(std::uint64_t n) {
  if (n == 0) throw NumericError("uniform_int over an empty range");
  const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
  while (true) {
    const std::uint64_t v = next_u64();
    if (v < limit) return v % n;
  }
}

double RngStream::gaussian() {
  // 1 - uniform() lies in (0, 1], so the log is finite.
  const double u1 = 1.0 - uniform();
  const double u2 = uniform();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

Vector rng_draw_gaussian(RngStream& stream, std::size_t n) {
  Vector out(n);
  for (double& v : out) v = stream.gaussian();
  return out;
}

Vector finite_difference_grad(const ScalarFn& f, std::span<const double> point, double h) {
  if (!(h > 0.0)) throw NumericError("finite difference step must be positive");
  Vector probe(point.begin(), point.end());
  Vector grad(point.size());
  for (std::size_t k = 0; k < probe.size(); ++k) {
    const double saved = probe[k];
    probe[k] = saved + h;
    const double up = f(probe);
    probe[k] = saved - h;
    const double down = f(probe);
    probe[k] = saved;
    if (!std::isfinite(up) || !std::isfinite(down)) {
      throw NumericError("non-finite function value at coordinate " + std::to_string(k));
    }
    grad[k] = (up - down) / (2.0 * h);
  }
  return grad;
}

double max_relative_error(std::span<const double> actual, std::span<const double> reference,
                          double floor) {
  if (actual.size() != reference.size()) throw NumericError("gradient length mismatch");
  double scale = floor;
  double worst = 0.0;
  for (std::size_t i = 0; i < actual.size(); ++i) {
    scale = std::max(scale, std::abs(reference[i]));
    worst = std::max(worst, std::abs(actual[i] - reference[i]));
  }
  return worst / scale;
}

std::uint64_t fnv1a64(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string hex64(std::uint64_t value) {
  static constexpr char kDigits[] = "0123456789abcdef";
  std::string out(16, '0');
  for (int i = 15; i >= 0; --i) {
    out[static_cast<std::size_t>(i)] = kDigits[value & 0xF];
    value >>= 4;
  }
  return out;
}

}  // namespace lms
