// Copyright (c) 2026 The caspr Authors.
// SPDX-License-Identifier: Apache-2.0
//
// Central finite-difference gradient oracle for tests. Independent of the
// reverse pass: it only re-evaluates the forward function.

#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "caspr/autodiff.hpp"

namespace caspr::oracle {

struct GradCheck {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
};

/// Compares analytic gradients of `loss_fn` w.r.t. every element of
/// `leaves` against central differences with step h. Error per element is
/// |analytic - numeric| / max(1, |numeric|).
inline GradCheck check_gradients(const std::function<ad::Tensor<double>()>& loss_fn,
                                 std::vector<ad::Tensor<double>> leaves, double h = 1e-5) {
  for (auto& l : leaves) l.zero_grad();
  ad::backward(loss_fn());
  GradCheck r;
  for (auto& leaf : leaves) {
    std::vector<double> analytic(leaf.size(), 0.0);
    if (leaf.has_grad()) std::copy(leaf.grad().begin(), leaf.grad().end(), analytic.begin());
    auto data = leaf.mutable_data();
    for (std::size_t i = 0; i < data.size(); ++i) {
      const double orig = data[i];
      data[i] = orig + h;
      const double up = loss_fn().item();
      data[i] = orig - h;
      const double down = loss_fn().item();
      data[i] = orig;
      const double numeric = (up - down) / (2 * h);
      r.max_rel_error = std::max(r.max_rel_error, std::abs(analytic[i] - numeric) / std::max(1.0, std::abs(numeric)));
      ++r.checked;
    }
  }
  return r;
}

}  // namespace caspr::oracle
