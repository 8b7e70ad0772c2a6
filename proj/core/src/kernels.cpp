// Copyright 2026 The DKL Regression Authors
// SPDX-License-Identifier: Apache-2.0

#include "dkl/kernels.hpp"

#include <cmath>
#include <limits>
#include <numbers>

#include "dkl/errors.hpp"
#include "dkl/linalg.hpp"

namespace dkl {

std::string_view kernel_kind_name(KernelKind kind) {
  return kind == KernelKind::RBF ? "rbf" : "matern52";
}

KernelKind parse_kernel_kind(std::string_view name) {
  if (name == "rbf" || name == "RBF") return KernelKind::RBF;
  if (name == "matern52" || name == "Matern52") return KernelKind::Matern52;
  throw ConfigError("unknown kernel '" + std::string(name) + "'");
}

namespace gp {

ad::Var kernel_matrix(KernelKind kind, ad::Var log_lengthscale, ad::Var log_outputscale, ad::Var a, ad::Var b) {
  const ad::Var outputscale = ad::exp(log_outputscale);
  const ad::Var inv_l2 = ad::exp(-2.0 * log_lengthscale);
  const ad::Var scaled = ad::pairwise_sqdist(a, b) * inv_l2;
  if (kind == KernelKind::RBF) return outputscale * ad::exp(-0.5 * scaled);
  return outputscale * ad::matern52_profile(scaled);
}

JitteredCholesky jittered_cholesky(ad::Var a, ad::Var outputscale, JitterPolicy policy) {
  const Tensor& av = a.value();
  if (av.rank() != 2 || av.dim(0) != av.dim(1)) {
    throw ShapeError("jittered_cholesky expects a square matrix, got " + shape_to_string(av.shape()));
  }
  const double s2 = outputscale.value().item();
  const std::size_t n = av.dim(0);
  double jitter = policy.initial;
  const double ceiling = policy.max * (1.0 + 1e-9);
  for (;;) {
    if (linalg::try_cholesky(linalg::add_diagonal(av, jitter * s2))) break;
    jitter = jitter == 0.0 ? 1e-6 : jitter * 10.0;
    if (jitter > ceiling) {
      // Re-run the last attempt to surface the failing pivot.
      linalg::cholesky(linalg::add_diagonal(av, policy.max * s2));
      throw NotPositiveDefiniteError(0, 0.0);
    }
  }
  ad::Var shifted = a;
  if (jitter > 0.0) {
    shifted = a + ad::constant(a.graph(), Tensor::eye(n)) * (outputscale * jitter);
  }
  return {ad::cholesky(shifted), jitter};
}

}  // namespace gp

Tensor kernel_matrix(const KernelParams& params, const Tensor& a, const Tensor& b) {
  ad::Graph g;
  return gp::kernel_matrix(params.kind, ad::constant(g, params.log_lengthscale),
                           ad::constant(g, params.log_outputscale), ad::constant(g, a), ad::constant(g, b))
      .value();
}

void ExactGPModel::validate() const {
  if (train_inputs.rank() != 2) {
    throw ShapeError("exact GP inputs must be (n x h), got " + shape_to_string(train_inputs.shape()));
  }
  if (train_targets.rank() != 1 || train_targets.dim(0) != train_inputs.dim(0)) {
    throw ShapeError("exact GP targets " + shape_to_string(train_targets.shape()) + " do not match inputs " +
                     shape_to_string(train_inputs.shape()));
  }
  if (!std::isfinite(std::exp(kernel.log_lengthscale)) || !std::isfinite(std::exp(kernel.log_outputscale)) ||
      !std::isfinite(std::exp(log_noise))) {
    throw NumericError("exact GP hyperparameters overflow");
  }
}

namespace {

struct ExactGraph {
  ad::Graph g;
  ad::Var log_ls, log_os, log_noise;
  ad::Var chol;   // of K + sigma^2 I (+ jitter)
  ad::Var alpha;  // L^-1 y
};

void build_factor(ExactGraph& eg, const ExactGPModel& model, bool trainable) {
  model.validate();
  auto leaf = [&](double v) { return trainable ? ad::parameter(eg.g, Tensor::scalar(v)) : ad::constant(eg.g, v); };
  eg.log_ls = leaf(model.kernel.log_lengthscale);
  eg.log_os = leaf(model.kernel.log_outputscale);
  eg.log_noise = leaf(model.log_noise);
  const ad::Var x = ad::constant(eg.g, model.train_inputs);
  const std::size_t n = model.train_inputs.dim(0);
  const ad::Var k = gp::kernel_matrix(model.kernel.kind, eg.log_ls, eg.log_os, x, x);
  const ad::Var c = k + ad::constant(eg.g, Tensor::eye(n)) * ad::exp(eg.log_noise);
  eg.chol = gp::jittered_cholesky(c, ad::exp(eg.log_os), JitterPolicy{model.jitter, 1e-2}).factor;
  const ad::Var y = ad::constant(eg.g, model.train_targets.reshaped({n, 1}));
  eg.alpha = ad::triangular_solve(eg.chol, y, /*lower=*/true);
}

ad::Var lml_node(ExactGraph& eg, std::size_t n) {
  return -0.5 * ad::sum(ad::square(eg.alpha)) - 0.5 * ad::log_det_from_cholesky(eg.chol) -
         0.5 * static_cast<double>(n) * std::log(2.0 * std::numbers::pi);
}

}  // namespace

double gp_log_marginal_likelihood(const ExactGPModel& model) {
  ExactGraph eg;
  build_factor(eg, model, false);
  return lml_node(eg, model.train_inputs.dim(0)).value().item();
}

std::pair<double, HyperGradient> gp_log_marginal_likelihood_with_gradient(const ExactGPModel& model) {
  ExactGraph eg;
  build_factor(eg, model, true);
  const ad::Var lml = lml_node(eg, model.train_inputs.dim(0));
  const ad::Gradients grads = eg.g.backward(lml.id());
  return {lml.value().item(),
          HyperGradient{grads.at(eg.log_ls.id()).item(), grads.at(eg.log_os.id()).item(),
                        grads.at(eg.log_noise.id()).item()}};
}

PredictiveDistribution gp_exact_predict(const ExactGPModel& model, const Tensor& queries) {
  ExactGraph eg;
  build_factor(eg, model, false);
  if (queries.rank() != 2 || queries.dim(1) != model.train_inputs.dim(1)) {
    throw ShapeError("queries " + shape_to_string(queries.shape()) + " do not match inputs " +
                     shape_to_string(model.train_inputs.shape()));
  }
  const std::size_t q = queries.dim(0);
  const ad::Var x = ad::constant(eg.g, model.train_inputs);
  const ad::Var xq = ad::constant(eg.g, queries);
  const ad::Var kxq = gp::kernel_matrix(model.kernel.kind, eg.log_ls, eg.log_os, x, xq);  // n x q
  const ad::Var a = ad::triangular_solve(eg.chol, kxq, true);                             // L^-1 k_*
  const ad::Var mean = ad::matmul(ad::transpose(a), eg.alpha);                             // q x 1
  const double s2 = std::exp(model.kernel.log_outputscale);
  const ad::Var reduction = ad::sum(ad::square(a), 0);
  PredictiveDistribution out{mean.value().reshaped({q, 1}), Tensor({q, 1})};
  for (std::size_t i = 0; i < q; ++i) out.variance[i] = std::max(0.0, s2 - reduction.value()[i]);
  return out;
}

ExactFitReport fit_exact_gp_with_report(const ExactGPModel& model, std::size_t steps, double learning_rate) {
  ExactFitReport report{model, 0.0, 0.0, 0};
  auto [lml, grad] = gp_log_marginal_likelihood_with_gradient(model);
  report.initial_lml = lml;
  report.final_lml = lml;
  if (!std::isfinite(lml)) throw TrainingError("exact GP objective is non-finite at step 0");
  double lr = learning_rate;
  ExactGPModel current = model;
  for (std::size_t step = 1; step <= steps; ++step) {
    ExactGPModel trial = current;
    trial.kernel.log_lengthscale += lr * grad.log_lengthscale;
    trial.kernel.log_outputscale += lr * grad.log_outputscale;
    trial.log_noise += lr * grad.log_noise;
    std::pair<double, HyperGradient> next;
    try {
      next = gp_log_marginal_likelihood_with_gradient(trial);
    } catch (const NotPositiveDefiniteError&) {
      next.first = -std::numeric_limits<double>::infinity();
    } catch (const NumericError&) {
      next.first = -std::numeric_limits<double>::infinity();
    }
    if (std::isnan(next.first)) {
      throw TrainingError("exact GP objective is non-finite at step " + std::to_string(step));
    }
    if (next.first >= lml) {
      current = trial;
      lml = next.first;
      grad = next.second;
    } else {
      lr *= 0.5;
      ++report.halvings;
      if (lr < 1e-300) {
        throw TrainingError("exact GP learning rate underflow at step " + std::to_string(step));
      }
    }
  }
  report.model = current;
  report.final_lml = lml;
  return report;
}

}  // namespace dkl
