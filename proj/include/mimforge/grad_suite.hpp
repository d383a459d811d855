#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mimforge/gradcheck.hpp"

namespace mimforge {

struct OpGradcheck {
  std::string op;
  std::string input;  // which argument was perturbed
  std::string shape;
  GradcheckReport report;
};

/// Finite-difference checks of every differentiable op (and the composite
/// losses built from them) on random f64 inputs with extents up to 8.
/// Each op is drawn `trials` times with fresh shapes; every tensor argument
/// is checked separately through a fixed random projection to a scalar.
std::vector<OpGradcheck> op_gradcheck_suite(std::uint64_t seed, int trials = 2, double tol = 1e-4, double h = 1e-5);

/// Names of the ops covered by op_gradcheck_suite.
std::vector<std::string> op_gradcheck_names();

}  // namespace mimforge
