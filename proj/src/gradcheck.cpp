#include "mimforge/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <sstream>

#include "mimforge/errors.hpp"

namespace mimforge {

GradcheckReport gradcheck(const std::function<TensorD(const TensorD&)>& f, const TensorD& x, double h,
                          double tol, double floor) {
  GradcheckReport report;
  if (!(h > 0) || !(tol > 0)) throw ArgumentError("gradcheck: h and tol must be positive");

  TensorD probe = x.detach();
  double first, second;
  {
    NoGradGuard no_grad;
    first = f(probe).item();
    second = f(probe).item();
  }
  if (std::memcmp(&first, &second, sizeof(double)) != 0) {
    std::ostringstream os;
    os.precision(17);
    os << "function is not deterministic: two evaluations at x gave " << first << " and " << second
       << "; freeze every random stream it uses";
    report.aborted = true;
    report.message = os.str();
    return report;
  }

  TensorD leaf = x.detach();
  leaf.set_requires_grad(true);
  TensorD loss = f(leaf);
  if (loss.numel() != 1) throw GraphError("gradcheck: function must return a scalar");
  if (!loss.requires_grad()) {
    report.analytic.assign(static_cast<std::size_t>(x.numel()), 0.0);
  } else {
    loss.backward();
    if (leaf.has_grad())
      report.analytic.assign(leaf.grad().begin(), leaf.grad().end());
    else
      report.analytic.assign(static_cast<std::size_t>(x.numel()), 0.0);
  }

  NoGradGuard no_grad;
  auto values = probe.mutable_data();
  for (std::size_t i = 0; i < values.size(); ++i) {
    const double orig = values[i];
    values[i] = orig + h;
    const double fp = f(probe).item();
    values[i] = orig - h;
    const double fm = f(probe).item();
    values[i] = orig;
    const double num = (fp - fm) / (2.0 * h);
    const double ana = report.analytic[i];
    const double denom = std::max({std::abs(ana), std::abs(num), floor});
    const double rel = std::abs(ana - num) / denom;
    report.numeric.push_back(num);
    report.rel_errors.push_back(rel);
    report.max_rel_error = std::max(report.max_rel_error, std::isfinite(rel) ? rel : INFINITY);
  }
  report.passed = report.max_rel_error < tol;
  std::ostringstream os;
  os << "max relative error " << report.max_rel_error << " over " << values.size() << " elements (tol " << tol << ")";
  report.message = os.str();
  return report;
}

}  // namespace mimforge
