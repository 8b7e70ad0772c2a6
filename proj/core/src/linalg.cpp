// Copyright 2026 The DKL Regression Authors
// SPDX-License-Identifier: Apache-2.0

#include "dkl/linalg.hpp"

#include <cmath>

#include "dkl/errors.hpp"

namespace dkl::linalg {
namespace {

void require_matrix(const Tensor& a, const char* what) {
  if (a.rank() != 2) {
    throw ShapeError(std::string(what) + " expects a matrix, got " + shape_to_string(a.shape()));
  }
}

void require_square(const Tensor& a, const char* what) {
  require_matrix(a, what);
  if (a.dim(0) != a.dim(1)) {
    throw ShapeError(std::string(what) + " expects a square matrix, got " + shape_to_string(a.shape()));
  }
}

// Returns the index of the failing pivot, or n on success.
std::size_t factor_in_place(Tensor& l, const Tensor& a) {
  const std::size_t n = a.dim(0);
  for (std::size_t j = 0; j < n; ++j) {
    double d = a.at(j, j);
    for (std::size_t k = 0; k < j; ++k) d -= l.at(j, k) * l.at(j, k);
    if (!(d > 0.0) || !std::isfinite(d)) {
      l.at(j, j) = d;
      return j;
    }
    const double ljj = std::sqrt(d);
    l.at(j, j) = ljj;
    for (std::size_t i = j + 1; i < n; ++i) {
      double s = 0.5 * (a.at(i, j) + a.at(j, i));
      for (std::size_t k = 0; k < j; ++k) s -= l.at(i, k) * l.at(j, k);
      l.at(i, j) = s / ljj;
    }
  }
  return n;
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_matrix(a, "matmul");
  require_matrix(b, "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw ShapeError("matmul inner dimensions differ: " + shape_to_string(a.shape()) + " x " +
                     shape_to_string(b.shape()));
  }
  Tensor c({m, n});
  const double* pa = a.data();
  const double* pb = b.data();
  double* pc = c.data();
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = pa[i * k + p];
      if (aip == 0.0) continue;
      const double* brow = pb + p * n;
      double* crow = pc + i * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += aip * brow[j];
    }
  }
  return c;
}

Tensor transpose(const Tensor& a) {
  require_matrix(a, "transpose");
  const std::size_t r = a.dim(0), c = a.dim(1);
  Tensor t({c, r});
  for (std::size_t i = 0; i < r; ++i) {
    for (std::size_t j = 0; j < c; ++j) t.at(j, i) = a.at(i, j);
  }
  return t;
}

Tensor cholesky(const Tensor& a) {
  require_square(a, "cholesky");
  Tensor l(a.shape());
  const std::size_t pivot = factor_in_place(l, a);
  if (pivot != a.dim(0)) throw NotPositiveDefiniteError(pivot, l.at(pivot, pivot));
  return l;
}

std::optional<Tensor> try_cholesky(const Tensor& a) {
  require_square(a, "cholesky");
  Tensor l(a.shape());
  if (factor_in_place(l, a) != a.dim(0)) return std::nullopt;
  return l;
}

Tensor solve_triangular(const Tensor& t, const Tensor& b, bool lower) {
  require_square(t, "triangular_solve");
  const std::size_t n = t.dim(0);
  if (b.rank() < 1 || b.rank() > 2 || b.dim(0) != n) {
    throw ShapeError("triangular_solve: right-hand side " + shape_to_string(b.shape()) +
                     " incompatible with " + shape_to_string(t.shape()));
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (t.at(i, i) == 0.0) {
      throw SingularError("triangular_solve: zero diagonal entry at index " + std::to_string(i));
    }
  }
  const std::size_t k = b.rank() == 2 ? b.dim(1) : 1;
  Tensor x = b;
  double* px = x.data();
  if (lower) {
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t p = 0; p < i; ++p) {
        const double tip = t.at(i, p);
        if (tip == 0.0) continue;
        for (std::size_t j = 0; j < k; ++j) px[i * k + j] -= tip * px[p * k + j];
      }
      const double inv = 1.0 / t.at(i, i);
      for (std::size_t j = 0; j < k; ++j) px[i * k + j] *= inv;
    }
  } else {
    for (std::size_t ii = n; ii-- > 0;) {
      for (std::size_t p = ii + 1; p < n; ++p) {
        const double tip = t.at(ii, p);
        if (tip == 0.0) continue;
        for (std::size_t j = 0; j < k; ++j) px[ii * k + j] -= tip * px[p * k + j];
      }
      const double inv = 1.0 / t.at(ii, ii);
      for (std::size_t j = 0; j < k; ++j) px[ii * k + j] *= inv;
    }
  }
  return x;
}

Tensor add_diagonal(const Tensor& a, double value) {
  require_square(a, "add_diagonal");
  Tensor out = a;
  for (std::size_t i = 0; i < a.dim(0); ++i) out.at(i, i) += value;
  return out;
}

}  // namespace dkl::linalg
