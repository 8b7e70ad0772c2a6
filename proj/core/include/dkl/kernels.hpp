// Copyright 2026 The DKL Regression Authors
// SPDX-License-Identifier: Apache-2.0

// Stationary kernels and the exact Gaussian process regressor.
//
// Hyperparameters are stored as logarithms: log_lengthscale is log(l),
// log_outputscale is log(s^2) and log_noise is log(sigma_obs^2). All three
// can therefore be optimised without constraints.

#pragma once

#include <cstddef>
#include <string>
#include <string_view>

#include "dkl/autodiff.hpp"
#include "dkl/tensor.hpp"

namespace dkl {

enum class KernelKind { RBF, Matern52 };

std::string_view kernel_kind_name(KernelKind kind);
KernelKind parse_kernel_kind(std::string_view name);

struct KernelParams {
  KernelKind kind = KernelKind::RBF;
  double log_lengthscale = 0.0;
  double log_outputscale = 0.0;
};

/// Per-output predictive moments, both (q x d).
struct PredictiveDistribution {
  Tensor mean;
  Tensor variance;
};

/// Relative diagonal jitter: the first attempt adds `initial * s^2`, each
/// failure multiplies by 10 until `max * s^2`. An initial value of 0 first
/// tries the matrix as is and then continues from 1e-6.
struct JitterPolicy {
  double initial = 1e-6;
  double max = 1e-2;
};

namespace gp {

/// Kernel matrix between the rows of a (a x h) and b (b x h).
ad::Var kernel_matrix(KernelKind kind, ad::Var log_lengthscale, ad::Var log_outputscale, ad::Var a, ad::Var b);

struct JitteredCholesky {
  ad::Var factor;
  double jitter;  // relative to s^2
};

/// Cholesky factor of a + jitter * outputscale * I for the smallest jitter in
/// the policy's schedule that factorises. Throws NotPositiveDefiniteError
/// when the schedule is exhausted.
JitteredCholesky jittered_cholesky(ad::Var a, ad::Var outputscale, JitterPolicy policy);

}  // namespace gp

Tensor kernel_matrix(const KernelParams& params, const Tensor& a, const Tensor& b);

struct ExactGPModel {
  Tensor train_inputs;   // n x h
  Tensor train_targets;  // n
  KernelParams kernel;
  double log_noise = 0.0;
  double jitter = 1e-6;

  void validate() const;
};

double gp_log_marginal_likelihood(const ExactGPModel& model);

struct HyperGradient {
  double log_lengthscale = 0.0;
  double log_outputscale = 0.0;
  double log_noise = 0.0;
};

/// Log marginal likelihood together with its gradient wrt the log
/// hyperparameters.
std::pair<double, HyperGradient> gp_log_marginal_likelihood_with_gradient(const ExactGPModel& model);

PredictiveDistribution gp_exact_predict(const ExactGPModel& model, const Tensor& queries);

struct ExactFitReport {
  ExactGPModel model;
  double initial_lml = 0.0;
  double final_lml = 0.0;
  std::size_t halvings = 0;
};

/// Gradient ascent on the log marginal likelihood. A step that lowers the
/// objective is rejected and the learning rate halved, so the trajectory is
/// monotone. Throws TrainingError on a non-finite objective.
ExactFitReport fit_exact_gp_with_report(const ExactGPModel& model, std::size_t steps, double learning_rate);

inline ExactGPModel fit_exact_gp(const ExactGPModel& model, std::size_t steps, double learning_rate) {
  return fit_exact_gp_with_report(model, steps, learning_rate).model;
}

}  // namespace dkl
