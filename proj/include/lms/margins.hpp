#pragma once

// Target-logit angle functions for the large-margin softmax family, written
// in terms of u = cos(theta), plus the lambda annealing schedule that blends
// the margin function with plain cos(theta) early in training.

#include <cstdint>
#include <string>

namespace lms {

/// Margin triple (m1, m2, m3): multiplicative angular, additive angular
/// (radians) and additive cosine margin.
struct MarginSet {
  double m1 = 1.0;
  double m2 = 0.0;
  double m3 = 0.0;

  /// True for the identity margin (1, 0, 0).
  bool trivial() const { return m1 == 1.0 && m2 == 0.0 && m3 == 0.0; }
  /// m1 > 1.5 selects the piecewise multiplicative form.
  bool piecewise() const { return m1 > 1.5; }

  /// Throws std::invalid_argument describing the violated constraint.
  void validate() const;

  friend bool operator==(const MarginSet&, const MarginSet&) = default;
};

inline constexpr double kCosClamp = 1e-7;

double clamp_cos(double u);

/// psi as a function of u = cos(theta).
///
/// For m1 <= 1.5: cos(m1 * theta + m2) - m3. While m1 * theta + m2 stays
/// below pi this is the textbook form. Past that point the closed form turns
/// back upward, so it is continued with slope 1 (psi = u - delta), which keeps
/// psi monotone and below u on the whole interval. The switch only happens at
/// theta >= (pi - m2) / m1 > 1.94 rad for any valid margin.
///
/// For integer m1 > 1.5: (-1)^k cos(m1 theta) - 2k with
/// k = floor(m1 theta / pi) clamped into [0, m1 - 1].
double psi_of_cos(double u, const MarginSet& margins);

/// d psi / du, evaluated at the clamped u.
double dpsi_du(double u, const MarginSet& margins);

/// Chebyshev polynomial T_n(u) and its derivative n * U_{n-1}(u).
double chebyshev_t(int n, double u);
double chebyshev_t_prime(int n, double u);

/// lambda(step) = max(floor, base * (1 + gamma * step)^-alpha).
struct AnnealSchedule {
  double lambda_floor = 0.0;
  double lambda_base = 0.0;
  double gamma = 0.0;
  double alpha = 0.0;

  void validate() const;
  friend bool operator==(const AnnealSchedule&, const AnnealSchedule&) = default;
};

double anneal_lambda(std::int64_t step, const AnnealSchedule& schedule);

struct BlendedLogit {
  double value;
  double derivative;  // d value / du
};

/// (psi(u) + lambda * u) / (1 + lambda) and its u-derivative. Trivial margins
/// return u and 1 exactly.
BlendedLogit blended_target_logit(double u, const MarginSet& margins, double lambda);

}  // namespace lms
