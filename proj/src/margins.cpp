#include "lms/margins.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>
#include <stdexcept>

namespace lms {

namespace {

constexpr double kPi = std::numbers::pi;

bool is_integer(double v) { return std::floor(v) == v; }

int sector_count(const MarginSet& m) {
  if (!is_integer(m.m1)) {
    std::ostringstream os;
    os << "m1 = " << m.m1 << " > 1.5 must be an integer sector count";
    throw std::invalid_argument(os.str());
  }
  return static_cast<int>(m.m1);
}

int sector_index(double u, int m1) {
  const double theta = std::acos(u);
  const int k = static_cast<int>(std::floor(m1 * theta / kPi));
  return std::clamp(k, 0, m1 - 1);
}

// cos(theta*) where m1 * theta* + m2 = pi, past which the closed form is
// continued linearly.
double fold_cos(const MarginSet& m) { return std::cos((kPi - m.m2) / m.m1); }

bool pure_cosine_margin(const MarginSet& m) { return m.m1 == 1.0 && m.m2 == 0.0; }

}  // namespace

void MarginSet::validate() const {
  std::ostringstream os;
  if (!(std::isfinite(m1) && std::isfinite(m2) && std::isfinite(m3))) {
    os << "margins must be finite";
  } else if (m1 < 1.0) {
    os << "m1 = " << m1 << " must be >= 1";
  } else if (m2 < 0.0 || m3 < 0.0) {
    os << "m2 and m3 must be >= 0";
  } else if (m1 > 1.5) {
    if (m2 != 0.0 || m3 != 0.0) os << "m1 = " << m1 << " > 1.5 requires m2 = m3 = 0";
    else if (!is_integer(m1)) os << "m1 = " << m1 << " > 1.5 must be an integer";
  } else if (m1 > 1.1) {
    os << "m1 = " << m1 << " must lie in [1, 1.1] or be an integer >= 2";
  } else if (m2 >= 1.0) {
    os << "m2 = " << m2 << " must be < 1";
  }
  const std::string msg = os.str();
  if (!msg.empty()) throw std::invalid_argument(msg);
}

double clamp_cos(double u) { return std::clamp(u, -1.0 + kCosClamp, 1.0 - kCosClamp); }

double chebyshev_t(int n, double u) {
  if (n == 0) return 1.0;
  double prev = 1.0;
  double cur = u;
  for (int i = 1; i < n; ++i) {
    const double next = 2.0 * u * cur - prev;
    prev = cur;
    cur = next;
  }
  return cur;
}

double chebyshev_t_prime(int n, double u) {
  // T_n' = n U_{n-1}; U_0 = 1, U_1 = 2u.
  if (n == 0) return 0.0;
  double prev = 1.0;
  double cur = 2.0 * u;
  if (n == 1) return 1.0;
  for (int i = 2; i < n; ++i) {
    const double next = 2.0 * u * cur - prev;
    prev = cur;
    cur = next;
  }
  return n * cur;
}

double psi_of_cos(double u, const MarginSet& margins) {
  if (!std::isfinite(u)) throw std::invalid_argument("psi_of_cos: non-finite cosine");
  if (margins.piecewise()) {
    const int m1 = sector_count(margins);
    const double c = clamp_cos(u);
    const int k = sector_index(c, m1);
    const double sign = (k % 2 == 0) ? 1.0 : -1.0;
    return sign * chebyshev_t(m1, c) - 2.0 * k;
  }
  if (pure_cosine_margin(margins)) return u - margins.m3;

  const double c = clamp_cos(u);
  const double fold = fold_cos(margins);
  if (c < fold) return c - (fold + 1.0 + margins.m3);
  if (margins.m1 == 1.0) {
    return c * std::cos(margins.m2) - std::sqrt(1.0 - c * c) * std::sin(margins.m2) - margins.m3;
  }
  return std::cos(margins.m1 * std::acos(c) + margins.m2) - margins.m3;
}

double dpsi_du(double u, const MarginSet& margins) {
  if (!std::isfinite(u)) throw std::invalid_argument("dpsi_du: non-finite cosine");
  if (margins.piecewise()) {
    const int m1 = sector_count(margins);
    const double c = clamp_cos(u);
    const int k = sector_index(c, m1);
    const double sign = (k % 2 == 0) ? 1.0 : -1.0;
    return sign * chebyshev_t_prime(m1, c);
  }
  if (pure_cosine_margin(margins)) return 1.0;

  const double c = clamp_cos(u);
  if (c < fold_cos(margins)) return 1.0;
  const double sine = std::sqrt(1.0 - c * c);
  if (margins.m1 == 1.0) return std::cos(margins.m2) + c * std::sin(margins.m2) / sine;
  return margins.m1 * std::sin(margins.m1 * std::acos(c) + margins.m2) / sine;
}

void AnnealSchedule::validate() const {
  if (!(lambda_floor >= 0.0 && lambda_base >= 0.0 && gamma >= 0.0 && alpha >= 0.0)) {
    throw std::invalid_argument("anneal schedule parameters must all be >= 0");
  }
}

double anneal_lambda(std::int64_t step, const AnnealSchedule& schedule) {
  const double s = static_cast<double>(std::max<std::int64_t>(step, 0));
  const double decayed = schedule.lambda_base * std::pow(1.0 + schedule.gamma * s, -schedule.alpha);
  return std::max(schedule.lambda_floor, decayed);
}

BlendedLogit blended_target_logit(double u, const MarginSet& margins, double lambda) {
  if (margins.trivial()) return {u, 1.0};
  const double inv = 1.0 / (1.0 + lambda);
  return {(psi_of_cos(u, margins) + lambda * u) * inv, (dpsi_du(u, margins) + lambda) * inv};
}

}  // namespace lms
