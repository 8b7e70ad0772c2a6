// Copyright 2026 The DKL Regression Authors
// SPDX-License-Identifier: Apache-2.0

// Adaptive-moment gradient descent.

#pragma once

#include <cstdint>
#include <vector>

#include "dkl/tensor.hpp"

namespace dkl {

struct AdamHyper {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Moment estimates for one parameter group; empty until the first step.
struct AdamState {
  std::vector<Tensor> m;
  std::vector<Tensor> v;
  std::uint64_t t = 0;
};

bool all_finite(const std::vector<Tensor>& tensors);

/// Minimisation step with bias correction. A non-finite gradient skips the
/// whole step (state untouched), logs a warning and returns false.
bool adam_step(std::vector<Tensor>& params, const std::vector<Tensor>& grads, AdamState& state, double lr,
               const AdamHyper& hyper = {});

}  // namespace dkl
