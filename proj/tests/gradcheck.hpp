#pragma once

// Central finite-difference oracle, kept independent of the tape: every
// numeric derivative is two plain forward evaluations with no Tape active.

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "petformer/tensor.hpp"

namespace petformer::testing {

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::string worst;  // leaf/element with the largest error
  std::size_t checked = 0;
};

// Relative error with a floor on the denominator so that gradients that are
// analytically ~0 compare on an absolute scale.
inline double rel_error(double analytic, double numeric, double floor = 1e-3) {
  return std::fabs(analytic - numeric) / std::max({std::fabs(analytic), std::fabs(numeric), floor});
}

// `leaves` must be requires_grad tensors read by `loss_fn`. `names` is
// optional and only used in the diagnostic.
inline GradCheckResult grad_check(std::vector<Tensor> leaves, const std::function<Tensor()>& loss_fn,
                                  const std::vector<std::string>& names = {}, double step = 1e-5) {
  for (auto& leaf : leaves) leaf.zero_grad();
  {
    Tape tape;
    Tensor loss = loss_fn();
    tape.backward(loss);
  }
  std::vector<std::vector<double>> analytic;
  for (auto& leaf : leaves) {
    const Tensor g = leaf.grad();
    analytic.emplace_back(g.data().begin(), g.data().end());
    leaf.zero_grad();
  }
  GradCheckResult res;
  for (std::size_t li = 0; li < leaves.size(); ++li) {
    auto values = leaves[li].mutable_data();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double saved = values[i];
      values[i] = saved + step;
      const double up = loss_fn().item();
      values[i] = saved - step;
      const double down = loss_fn().item();
      values[i] = saved;
      const double numeric = (up - down) / (2.0 * step);
      const double err = rel_error(analytic[li][i], numeric);
      ++res.checked;
      if (err > res.max_rel_error) {
        res.max_rel_error = err;
        res.worst = (li < names.size() ? names[li] : "leaf" + std::to_string(li)) + "[" + std::to_string(i) +
                    "] analytic=" + std::to_string(analytic[li][i]) + " numeric=" + std::to_string(numeric);
      }
    }
  }
  return res;
}

}  // namespace petformer::testing
