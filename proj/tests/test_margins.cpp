#include <cmath>
#include <numbers>

#include <gtest/gtest.h>

#include "lms/margins.hpp"
#include "lms/numkit.hpp"

namespace lms {
namespace {

constexpr double kPi = std::numbers::pi;

// Independent angle-space oracles.
double psi_theta_closed(double theta, const MarginSet& m) { return std::cos(m.m1 * theta + m.m2) - m.m3; }
double psi_theta_piecewise(double theta, int m1) {
  const int k = std::min(m1 - 1, static_cast<int>(std::floor(m1 * theta / kPi)));
  return ((k % 2) ? -1.0 : 1.0) * std::cos(m1 * theta) - 2.0 * k;
}

const std::vector<MarginSet>& table_margins() {
  static const std::vector<MarginSet> all = {
      {2, 0, 0}, {4, 0, 0}, {1, 0.20, 0}, {1, 0.25, 0}, {1, 0.30, 0}, {1, 0.35, 0},
      {1, 0, 0.15}, {1, 0, 0.20}, {1, 0, 0.25}, {1, 0, 0.30}};
  return all;
}

TEST(Psi, WorkedExamples) {
  const double u = std::cos(kPi / 3);
  EXPECT_NEAR(psi_of_cos(u, {1, 0, 0.2}), 0.3, 1e-12);
  EXPECT_NEAR(psi_of_cos(u, {1, 0.3, 0}), std::cos(kPi / 3 + 0.3), 1e-12);
  EXPECT_NEAR(psi_of_cos(u, {1, 0.3, 0}), 0.221740, 5e-6);
  EXPECT_NEAR(psi_of_cos(u, {4, 0, 0}), -1.5, 1e-12);
}

TEST(Psi, IdentityMarginIsExact) {
  RngStream rng(1, streams::kTest);
  for (int i = 0; i < 1000; ++i) {
    const double u = 2.0 * rng.uniform() - 1.0;
    EXPECT_EQ(psi_of_cos(u, {}), u);
    EXPECT_EQ(blended_target_logit(u, {}, 3.0).value, u);
  }
}

TEST(Psi, MatchesAngleSpaceOracle) {
  for (const MarginSet& m : table_margins()) {
    for (double theta = 0.01; theta < 1.9; theta += 0.01) {
      const double u = std::cos(theta);
      const double ref = m.piecewise() ? psi_theta_piecewise(theta, static_cast<int>(m.m1)) : psi_theta_closed(theta, m);
      EXPECT_NEAR(psi_of_cos(u, m), ref, 1e-9) << "m=(" << m.m1 << "," << m.m2 << "," << m.m3 << ") theta=" << theta;
    }
  }
}

TEST(Psi, PiecewiseContinuousAtKnots) {
  for (int m1 : {2, 3, 4}) {
    for (int k = 1; k < m1; ++k) {
      const double knot = kPi * k / m1;
      const double lo = psi_of_cos(std::cos(knot - 1e-12), {static_cast<double>(m1), 0, 0});
      const double hi = psi_of_cos(std::cos(knot + 1e-12), {static_cast<double>(m1), 0, 0});
      EXPECT_LT(std::abs(hi - lo), 1e-9) << "m1=" << m1 << " k=" << k;
    }
  }
}

TEST(Psi, MonotoneAndBelowCosine) {
  for (const MarginSet& m : table_margins()) {
    double prev = psi_of_cos(std::cos(0.35), m);
    for (double theta = 0.35; theta <= 1.75 + 1e-12; theta += 1e-3) {
      const double v = psi_of_cos(std::cos(theta), m);
      EXPECT_LE(v, prev + 1e-12);
      prev = v;
    }
    for (double u = -1.0; u <= 1.0; u += 1e-3) EXPECT_LE(psi_of_cos(u, m), u + 1e-12) << u;
  }
}

TEST(Psi, DerivativeMatchesFiniteDifference) {
  const MarginSet m4{4, 0, 0};
  const Vector g = finite_difference_grad([&](std::span<const double> x) { return psi_of_cos(x[0], m4); }, Vector{0.5}, 1e-6);
  EXPECT_NEAR(dpsi_du(0.5, m4), g[0], 1e-6 * std::abs(g[0]));
  for (const MarginSet& m : table_margins()) {
    for (double u = -0.95; u < 0.99; u += 0.0731) {
      const Vector fd = finite_difference_grad([&](std::span<const double> x) { return psi_of_cos(x[0], m); }, Vector{u}, 1e-7);
      EXPECT_NEAR(dpsi_du(u, m), fd[0], 1e-5 * std::max(1.0, std::abs(fd[0]))) << u;
    }
  }
  EXPECT_EQ(dpsi_du(0.3, {1, 0, 0.25}), 1.0);
}

TEST(Psi, NonIntegerPiecewiseRejected) {
  EXPECT_THROW(psi_of_cos(0.5, {2.5, 0, 0}), std::invalid_argument);
  EXPECT_THROW((MarginSet{2.5, 0, 0}.validate()), std::invalid_argument);
  EXPECT_THROW((MarginSet{4, 0.2, 0}.validate()), std::invalid_argument);
  EXPECT_THROW((MarginSet{0.5, 0, 0}.validate()), std::invalid_argument);
  EXPECT_THROW((MarginSet{1, -0.1, 0}.validate()), std::invalid_argument);
  EXPECT_NO_THROW((MarginSet{1, 0.35, 0}.validate()));
  EXPECT_NO_THROW((MarginSet{4, 0, 0}.validate()));
}

TEST(Chebyshev, MatchesCosineIdentity) {
  for (int n = 0; n <= 6; ++n) {
    for (double t = 0.0; t < kPi; t += 0.1) {
      EXPECT_NEAR(chebyshev_t(n, std::cos(t)), std::cos(n * t), 1e-12);
      if (t > 0.05) {
        EXPECT_NEAR(chebyshev_t_prime(n, std::cos(t)), n * std::sin(n * t) / std::sin(t), 1e-9);
      }
    }
  }
}

TEST(Anneal, WorkedExamples) {
  const AnnealSchedule am{0.0, 1000.0, 1e-4, 5.0};
  EXPECT_DOUBLE_EQ(anneal_lambda(0, am), 1000.0);
  EXPECT_NEAR(anneal_lambda(90000, am), 0.01, 1e-15);
  const AnnealSchedule as{10.0, 1000.0, 1e-5, 5.0};
  EXPECT_EQ(anneal_lambda(5'000'000, as), 10.0);
}

TEST(Anneal, NonincreasingAndFloored) {
  for (const AnnealSchedule& s : {AnnealSchedule{0, 1000, 1e-4, 5}, AnnealSchedule{10, 1000, 1e-5, 5},
                                  AnnealSchedule{2, 50, 0.3, 1.5}}) {
    double prev = anneal_lambda(0, s);
    EXPECT_EQ(prev, std::max(s.lambda_floor, s.lambda_base));
    for (std::int64_t step = 1; step < 3'000'000; step += 997) {
      const double v = anneal_lambda(step, s);
      EXPECT_LE(v, prev);
      EXPECT_GE(v, s.lambda_floor);
      prev = v;
    }
  }
}

TEST(Blend, LimitsAndSimilarity) {
  const MarginSet m4{4, 0, 0};
  for (double u = -1.0; u <= 1.0; u += 0.01) {
    EXPECT_EQ(blended_target_logit(u, m4, 0.0).value, psi_of_cos(u, m4));
    EXPECT_NEAR(blended_target_logit(u, m4, 1e9).value, u, 1e-8);
  }
  double worst = 0.0;
  for (double theta = 0.35; theta <= 1.75; theta += 1e-3) {
    worst = std::max(worst, std::abs(blended_target_logit(std::cos(theta), m4, 10.0).value - std::cos(1.2 * theta)));
  }
  EXPECT_LT(worst, 0.08);
}

TEST(Blend, DerivativeMatchesFiniteDifference) {
  for (const MarginSet& m : table_margins()) {
    for (double lambda : {0.0, 0.7, 10.0}) {
      for (double u = -0.9; u < 0.95; u += 0.137) {
        const Vector fd = finite_difference_grad(
            [&](std::span<const double> x) { return blended_target_logit(x[0], m, lambda).value; }, Vector{u}, 1e-7);
        EXPECT_NEAR(blended_target_logit(u, m, lambda).derivative, fd[0], 1e-5 * std::max(1.0, std::abs(fd[0])));
      }
    }
  }
}

}  // namespace
}  // namespace lms
