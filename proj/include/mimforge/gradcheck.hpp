#pragma once

#include <functional>
#include <string>
#include <vector>

#include "mimforge/tensor.hpp"

namespace mimforge {

struct GradcheckReport {
  bool passed = false;
  bool aborted = false;
  std::string message;
  double max_rel_error = 0.0;
  std::vector<double> rel_errors;  // per element of x
  std::vector<double> analytic;
  std::vector<double> numeric;
};

/// Compares the reverse-mode gradient of a scalar function against central
/// differences (f(x+h) - f(x-h)) / 2h, element by element.
///
/// Relative error is |analytic - numeric| / max(|analytic|, |numeric|, floor);
/// the floor keeps exactly-zero gradients from reporting noise as error.
/// `f` must be deterministic; it is evaluated twice at x up front and the
/// check aborts if the two values differ bitwise.
GradcheckReport gradcheck(const std::function<TensorD(const TensorD&)>& f, const TensorD& x,
                          double h = 1e-5, double tol = 1e-4, double floor = 1e-6);

}  // namespace mimforge
