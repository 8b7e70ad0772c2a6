// Copyright 2026 The DKL Regression Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <optional>

#include "dkl/tensor.hpp"

// Value-level dense linear algebra on rank-2 tensors. These routines back the
// Cholesky and triangular-solve primitives and are reused by callers that need
// a factorisation outside of a graph (jitter probing, sampling).
namespace dkl::linalg {

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

/// Lower factor of (A + A^T) / 2. Throws NotPositiveDefiniteError naming the
/// first non-positive pivot.
Tensor cholesky(const Tensor& a);

/// Same as cholesky() but returns nullopt instead of throwing.
std::optional<Tensor> try_cholesky(const Tensor& a);

/// Solves T X = B reading only the lower (or upper) triangle of T. B is
/// either (n) or (n x k); the result has B's shape. Throws SingularError on a
/// zero diagonal entry.
Tensor solve_triangular(const Tensor& t, const Tensor& b, bool lower);

/// Returns A with `value` added to every diagonal entry.
Tensor add_diagonal(const Tensor& a, double value);

}  // namespace dkl::linalg
