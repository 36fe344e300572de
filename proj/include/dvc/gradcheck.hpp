#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "dvc/tensor.hpp"

namespace dvc {

struct GradCheckResult {
  float max_abs_diff = 0.0f;
  float ref_magnitude = 0.0f;
  float rel_error = 0.0f;
  std::size_t worst_index = 0;
};

// Central-difference check of d(loss)/d(input) for one input tensor.
// loss_fn must rebuild the graph from current tensor contents on every call.
// The error is the largest |ad - fd| normalized by the largest gradient
// magnitude seen, which stays meaningful when individual entries are ~0.
inline GradCheckResult grad_check(const std::function<Tensor()>& loss_fn,
                                  Tensor input, float h = 1e-3f) {
  input.set_requires_grad(true);
  input.zero_grad();
  Tensor loss = loss_fn();
  backward(loss);
  std::vector<float> analytic = input.grad();

  GradCheckResult res;
  std::vector<float> fd(analytic.size(), 0.0f);
  {
    NoGrad ng;
    for (std::size_t i = 0; i < input.data().size(); ++i) {
      float saved = input.data()[i];
      input.data()[i] = saved + h;
      float up = loss_fn().item();
      input.data()[i] = saved - h;
      float dn = loss_fn().item();
      input.data()[i] = saved;
      fd[i] = (up - dn) / (2.0f * h);
    }
  }
  for (std::size_t i = 0; i < fd.size(); ++i) {
    res.ref_magnitude = std::max(
        res.ref_magnitude, std::max(std::fabs(analytic[i]), std::fabs(fd[i])));
    float diff = std::fabs(analytic[i] - fd[i]);
    if (diff > res.max_abs_diff) {
      res.max_abs_diff = diff;
      res.worst_index = i;
    }
  }
  res.rel_error = res.max_abs_diff / (res.ref_magnitude + 1e-8f);
  return res;
}

}  // namespace dvc
