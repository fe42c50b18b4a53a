#pragma once

// Finite-difference verification of every hand-written backward pass.

#include <cstdint>
#include <string>
#include <vector>

namespace lms {

struct GradCheckResult {
  std::string name;
  std::size_t instances = 0;
  double max_relative_error = 0.0;
  double tolerance = 0.0;

  bool passed() const { return instances > 0 && max_relative_error < tolerance; }
};

struct GradCheckOptions {
  std::size_t instances = 100;
  std::uint64_t seed = 7;
  double loss_tolerance = 1e-5;
  double network_tolerance = 1e-4;
};

/// Softmax, modified softmax, every reference margin setting, Ring, MHE,
/// GE2E, feature normalization, statistics pooling and the full network.
std::vector<GradCheckResult> run_gradcheck_suite(const GradCheckOptions& options = {});

std::string format_gradcheck_table(const std::vector<GradCheckResult>& results);

}  // namespace lms
