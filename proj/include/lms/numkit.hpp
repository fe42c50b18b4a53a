#pragma once

// Small deterministic numeric kernel: dense row-major matrices, a
// counter-based random stream, stable reductions and a central-difference
// gradient oracle.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace lms {

using Vector = std::vector<double>;

class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Dense row-major matrix of doubles.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0);
  Matrix(std::size_t rows, std::size_t cols, Vector data);

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  Vector column(std::size_t c) const;

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  Vector& storage() { return data_; }
  const Vector& storage() const { return data_; }

  bool all_finite() const;
  Matrix transposed() const;

  friend bool operator==(const Matrix&, const Matrix&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  Vector data_;
};

double dot(std::span<const double> a, std::span<const double> b);
double norm2(std::span<const double> a);

/// Sum of squared differences, accumulated left to right.
double squared_distance(std::span<const double> a, std::span<const double> b);

/// Numerically stable softmax via max subtraction.
Vector stable_softmax(std::span<const double> logits);

/// log(sum(exp(logits))) via max subtraction.
double log_sum_exp(std::span<const double> logits);

/// Named, counter-based random stream. The n-th draw is a pure function of
/// (seed, stream_id, n), so streams never interfere with each other and the
/// first k draws are identical on every platform.
class RngStream {
 public:
  RngStream() = default;
  RngStream(std::uint64_t seed, std::uint64_t stream_id) : seed_(seed), stream_id_(stream_id) {}

  std::uint64_t seed() const { return seed_; }
  std::uint64_t stream_id() const { return stream_id_; }
  std::uint64_t counter() const { return counter_; }
  void set_counter(std::uint64_t counter) { counter_ = counter; }

  std::uint64_t next_u64();
  /// Uniform on [0, 1) with 53 bits of resolution.
  double uniform();
  /// Uniform integer in [0, n). Rejection sampling, so exactly unbiased.
  std::uint64_t uniform_int(std::uint64_t n);
  /// Standard normal via Box-Muller (two uniforms per draw, no caching).
  double gaussian();

  friend bool operator==(const RngStream&, const RngStream&) = default;

 private:
  std::uint64_t seed_ = 0;
  std::uint64_t stream_id_ = 0;
  std::uint64_t counter_ = 0;
};

/// Well-known stream ids, so each consumer draws from its own sequence.
namespace streams {
inline constexpr std::uint64_t kData = 1;
inline constexpr std::uint64_t kInit = 2;
inline constexpr std::uint64_t kSampler = 3;
inline constexpr std::uint64_t kTrials = 4;
inline constexpr std::uint64_t kTest = 99;
}  // namespace streams

Vector rng_draw_gaussian(RngStream& stream, std::size_t n);

using ScalarFn = std::function<double(std::span<const double>)>;

/// Central differences (f(p + h e_k) - f(p - h e_k)) / 2h for every k.
Vector finite_difference_grad(const ScalarFn& f, std::span<const double> point, double h);

/// max_k |a_k - b_k| / max(max_k |b_k|, floor). Used by all gradient checks.
double max_relative_error(std::span<const double> actual, std::span<const double> reference,
                          double floor = 1e-8);

/// 64-bit FNV-1a, used for config digests.
std::uint64_t fnv1a64(std::string_view bytes);
std::string hex64(std::uint64_t value);

}  // namespace lms
