// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <string>
#include <vector>

#include "stripformer/tensor.hpp"

namespace stripformer {

struct GradCheckLeaf {
  std::string name;
  double max_rel_err = 0.0;
};

struct GradCheckReport {
  std::vector<GradCheckLeaf> leaves;
  double max_rel_err = 0.0;
};

// Central finite differences against reverse-mode gradients. make_loss must
// be a pure function of the leaf tensors' current values and return a scalar
// tensor; it is re-run with single elements perturbed, so keep the leaves
// tiny. Run at 64 bits: the difference quotient is the independent route.
template <typename MakeLoss>
GradCheckReport finite_difference_check(std::vector<std::pair<std::string, Tensor<double>>> leaves,
                                        MakeLoss&& make_loss, double step = 1e-5) {
  for (auto& [name, t] : leaves) {
    t.set_requires_grad(true);
    t.grad_mut();
    t.zero_grad();
  }
  GradTape<double> tape;
  {
    TapeScope<double> scope(tape);
    Tensor<double> loss = make_loss();
    tape.backward(loss);
  }
  GradCheckReport report;
  for (auto& [name, t] : leaves) {
    std::vector<double> autodiff(t.grad().begin(), t.grad().end());
    GradCheckLeaf leaf{name, 0.0};
    auto data = t.data_mut();
    for (int64_t i = 0; i < t.numel(); ++i) {
      const double orig = data[i];
      data[i] = orig + step;
      const double up = make_loss().item();
      data[i] = orig - step;
      const double down = make_loss().item();
      data[i] = orig;
      const double fd = (up - down) / (2.0 * step);
      // Denominator floor 1e-5: below it the quotient is truncation noise
      // of the difference itself (this is an absolute tolerance of 1e-9 at
      // the 1e-4 acceptance threshold), not information about the gradient.
      const double rel =
          std::abs(autodiff[i] - fd) / std::max({std::abs(autodiff[i]), std::abs(fd), 1e-5});
      leaf.max_rel_err = std::max(leaf.max_rel_err, rel);
    }
    report.max_rel_err = std::max(report.max_rel_err, leaf.max_rel_err);
    report.leaves.push_back(std::move(leaf));
  }
  return report;
}

}  // namespace stripformer
