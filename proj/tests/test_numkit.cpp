#include <cmath>
#include <limits>
#include <numeric>

#include <gtest/gtest.h>

#include "lms/numkit.hpp"

namespace lms {
namespace {

TEST(StableSoftmax, UniformForEqualLogits) {
  const Vector p = stable_softmax(Vector{0.0, 0.0, 0.0});
  for (double v : p) EXPECT_DOUBLE_EQ(v, 1.0 / 3.0);
}

TEST(StableSoftmax, LargeLogitsDoNotOverflow) {
  const Vector p = stable_softmax(Vector{1000.0, 0.0});
  EXPECT_DOUBLE_EQ(p[0], 1.0);
  EXPECT_GE(p[1], 0.0);
  EXPECT_LT(p[1], 1e-300);
}

TEST(StableSoftmax, MatchesLongDoubleEvaluation) {
  const Vector p = stable_softmax(Vector{1.0, 2.0, 3.0});
  const long double z = std::exp(1.0L) + std::exp(2.0L) + std::exp(3.0L);
  for (int k = 0; k < 3; ++k) EXPECT_NEAR(p[k], static_cast<double>(std::exp(k + 1.0L) / z), 1e-15);
  EXPECT_NEAR(p[0], 0.09003, 5e-6);
  EXPECT_NEAR(p[1], 0.24473, 5e-6);
  EXPECT_NEAR(p[2], 0.66524, 5e-6);
}

TEST(StableSoftmax, RejectsBadInput) {
  EXPECT_THROW(stable_softmax(Vector{}), NumericError);
  EXPECT_THROW(stable_softmax(Vector{1.0, std::numeric_limits<double>::quiet_NaN()}), NumericError);
  EXPECT_THROW(stable_softmax(Vector{std::numeric_limits<double>::infinity()}), NumericError);
}

TEST(StableSoftmax, SumsToOneOnRandomLogits) {
  RngStream rng(3, streams::kTest);
  for (int t = 0; t < 200; ++t) {
    Vector logits = rng_draw_gaussian(rng, 1 + rng.uniform_int(20));
    for (double& v : logits) v *= 50.0;
    const Vector p = stable_softmax(logits);
    EXPECT_NEAR(std::accumulate(p.begin(), p.end(), 0.0), 1.0, 1e-12);
    EXPECT_NEAR(std::log(p[0]), logits[0] - log_sum_exp(logits), 1e-9);
  }
}

TEST(FiniteDifference, QuadraticIsExact) {
  const Vector g = finite_difference_grad([](std::span<const double> x) { return x[0] * x[0]; }, Vector{3.0}, 1e-5);
  EXPECT_NEAR(g[0], 6.0, 1e-8);
}

TEST(FiniteDifference, NormGradient) {
  const Vector g = finite_difference_grad([](std::span<const double> x) { return norm2(x); }, Vector{3.0, 4.0}, 1e-5);
  EXPECT_NEAR(g[0], 0.6, 1e-8);
  EXPECT_NEAR(g[1], 0.8, 1e-8);
}

TEST(FiniteDifference, ConstantGivesZero) {
  const Vector g = finite_difference_grad([](std::span<const double>) { return 7.0; }, Vector{1.0, 2.0, 3.0}, 1e-5);
  for (double v : g) EXPECT_EQ(v, 0.0);
}

TEST(FiniteDifference, RejectsNonFiniteValue) {
  auto f = [](std::span<const double> x) { return x[0] > 0.0 ? std::numeric_limits<double>::infinity() : 0.0; };
  EXPECT_THROW(finite_difference_grad(f, Vector{0.0}, 1e-3), NumericError);
}

TEST(RngStream, SameSeedAndStreamRepeat) {
  RngStream a(42, 7), b(42, 7);
  EXPECT_EQ(rng_draw_gaussian(a, 100), rng_draw_gaussian(b, 100));
  EXPECT_TRUE(rng_draw_gaussian(a, 0).empty());
}

TEST(RngStream, StreamsAreDistinct) {
  RngStream a(42, 1), b(42, 2), c(43, 1);
  const std::uint64_t x = a.next_u64();
  EXPECT_NE(x, b.next_u64());
  EXPECT_NE(x, c.next_u64());
}

TEST(RngStream, CounterAddressesDraws) {
  RngStream a(5, 9);
  for (int i = 0; i < 10; ++i) a.next_u64();
  const std::uint64_t eleventh = a.next_u64();
  RngStream b(5, 9);
  b.set_counter(10);
  EXPECT_EQ(b.next_u64(), eleventh);
}

TEST(RngStream, GaussianMoments) {
  RngStream rng(11, streams::kTest);
  const Vector v = rng_draw_gaussian(rng, 100000);
  double mean = std::accumulate(v.begin(), v.end(), 0.0) / v.size();
  double var = 0.0;
  for (double x : v) var += (x - mean) * (x - mean);
  var /= v.size();
  EXPECT_NEAR(mean, 0.0, 0.02);
  EXPECT_NEAR(var, 1.0, 0.02);
}

TEST(RngStream, UniformIntInRangeAndRoughlyFlat) {
  RngStream rng(1, streams::kTest);
  std::vector<int> counts(7, 0);
  for (int i = 0; i < 70000; ++i) {
    const auto k = rng.uniform_int(7);
    ASSERT_LT(k, 7u);
    ++counts[k];
  }
  // 5 standard deviations of a binomial(70000, 1/7).
  for (int c : counts) EXPECT_NEAR(c, 10000, 5 * std::sqrt(70000 * (1.0 / 7) * (6.0 / 7)));
}

TEST(MaxRelativeError, ScalesByReferenceMagnitude) {
  EXPECT_NEAR(max_relative_error(Vector{1.0, 2.1}, Vector{1.0, 2.0}), 0.05, 1e-15);
  EXPECT_EQ(max_relative_error(Vector{0.0}, Vector{0.0}), 0.0);
}

TEST(Matrix, TransposeAndRows) {
  Matrix m(2, 3, Vector{1, 2, 3, 4, 5, 6});
  const Matrix t = m.transposed();
  EXPECT_EQ(t.rows(), 3u);
  EXPECT_EQ(t(2, 1), 6.0);
  EXPECT_EQ(m.row(1)[0], 4.0);
  EXPECT_EQ(m.column(1), (Vector{2, 5}));
  EXPECT_EQ(t.transposed(), m);
}

TEST(Fnv, KnownVector) {
  // Published FNV-1a 64 test vectors.
  EXPECT_EQ(fnv1a64(""), 0xcbf29ce484222325ULL);
  EXPECT_EQ(fnv1a64("a"), 0xaf63dc4c8601ec8cULL);
  EXPECT_EQ(hex64(0xabcULL), "0000000000000abc");
}

}  // namespace
}  // namespace lms
