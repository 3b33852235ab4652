#pragma once

// Central finite-difference oracle shared by the gradient tests.

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "cpsprompt/autodiff.hpp"

namespace cpsp::testing {

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  // Split at `resolution`: below it a central difference carries round-off
  // near eps * |loss| / h, so only the absolute error is meaningful.
  double max_rel_resolved = 0.0;
  double max_abs_unresolved = 0.0;
  std::size_t resolved = 0;
};

inline double rel_error(double a, double b) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-8});
}

// `loss` must build a scalar on the given tape, watching every parameter in
// `params` as trainable. Analytic gradients come from one backward pass; each
// element is then perturbed by +-h. `stride` > 1 samples every stride-th
// element to bound runtime on larger graphs.
inline GradCheckResult grad_check(const std::vector<ad::Parameter*>& params,
                                  const std::function<ad::Var(ad::Tape&)>& loss, double h = 1e-5,
                                  std::size_t stride = 1, double resolution = 1e-6) {
  for (auto* p : params) p->zero_grad();
  {
    ad::Tape tape;
    tape.backward(loss(tape));
  }
  auto eval = [&] {
    ad::Tape tape;
    return loss(tape).value()[0];
  };
  GradCheckResult r;
  std::size_t counter = 0;
  for (auto* p : params) {
    for (std::size_t i = 0; i < p->numel(); ++i, ++counter) {
      if (counter % stride != 0) continue;
      const double orig = p->value[i];
      p->value[i] = orig + h;
      const double up = eval();
      p->value[i] = orig - h;
      const double down = eval();
      p->value[i] = orig;
      const double numeric = (up - down) / (2.0 * h);
      const double rel = rel_error(p->grad[i], numeric);
      r.max_rel_error = std::max(r.max_rel_error, rel);
      if (std::max(std::abs(p->grad[i]), std::abs(numeric)) >= resolution) {
        r.max_rel_resolved = std::max(r.max_rel_resolved, rel);
        ++r.resolved;
      } else {
        r.max_abs_unresolved = std::max(r.max_abs_unresolved, std::abs(p->grad[i] - numeric));
      }
      ++r.checked;
    }
  }
  return r;
}

}  // namespace cpsp::testing
