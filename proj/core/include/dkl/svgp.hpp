// Copyright 2026 The DKL Regression Authors
// SPDX-License-Identifier: Apache-2.0

// Sparse variational GP output layer.
//
// The variational posterior over inducing outputs is q(u) = N(m, S) with
// S = L_S L_S^T. L_S is stored unconstrained in `chol_raw`: the strictly lower
// triangle holds the off-diagonal entries of L_S as is, the diagonal holds
// softplus^-1 of diag(L_S). The upper triangle is ignored.
//
// Two training objectives share the same predictive form:
//   SVGP: sum_i [log N(y_i | mu_i, sn2) - var_i / (2 sn2)] - KL(q(u) || p(u))
//   PPGP: sum_i  log N(y_i | mu_i, sn2 + var_i)           - KL(q(u) || p(u))
// For a mini-batch the likelihood sum is scaled by n_total / batch; the KL
// term is not scaled.

#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <string_view>
#include <vector>

#include "dkl/autodiff.hpp"
#include "dkl/kernels.hpp"
#include "dkl/tensor.hpp"

namespace dkl {

enum class ObjectiveKind { SVGP, PPGP };

std::string_view objective_kind_name(ObjectiveKind kind);

struct SVGPState {
  Tensor inducing;          // m x h
  Tensor variational_mean;  // m
  Tensor chol_raw;          // m x m
  KernelParams kernel;
  double log_noise = 0.0;   // log sigma_obs^2
  ObjectiveKind objective = ObjectiveKind::PPGP;
  double jitter = 1e-6;     // initial relative jitter on K_uu

  std::size_t num_inducing() const { return inducing.dim(0); }
  std::size_t input_dim() const { return inducing.dim(1); }
  void validate() const;
};

/// State with m_vec = 0 and L_S = I.
SVGPState make_svgp_state(Tensor inducing, KernelParams kernel, double log_noise,
                          ObjectiveKind objective = ObjectiveKind::PPGP);

double inverse_softplus(double y);

Tensor variational_chol(const SVGPState& state);
/// Stores a lower-triangular factor with strictly positive diagonal.
void set_variational_chol(SVGPState& state, const Tensor& chol);

/// K_uu plus the diagonal jitter the layer actually uses, i.e. the prior
/// covariance of u.
Tensor prior_covariance(const SVGPState& state);

namespace svgp {

/// Graph handles for the trainable set of one head.
struct Vars {
  ad::Var inducing, mean, chol_raw, log_lengthscale, log_outputscale, log_noise;
};

Vars bind(ad::Graph& g, const SVGPState& state, bool trainable);

/// Copies the current values of `vars` back into `state`.
void gather(const Vars& vars, SVGPState& state);

ad::Var variational_chol(const Vars& vars);

struct Moments {
  ad::Var mean;      // q
  ad::Var variance;  // q, unclamped
  ad::Var kl;        // scalar
};

/// Predictive moments at h (q x h) and KL(q(u) || p(u)), sharing one
/// factorisation of K_uu.
Moments evaluate(const Vars& vars, const SVGPState& state, ad::Var h);

ad::Var objective(const Vars& vars, const SVGPState& state, ad::Var h, const Tensor& y, std::size_t n_total,
                  ObjectiveKind kind);

}  // namespace svgp

PredictiveDistribution svgp_predict(const SVGPState& state, const Tensor& h);
double kl_qu_pu(const SVGPState& state);
double elbo_svgp(const SVGPState& state, const Tensor& h, const Tensor& y, std::size_t n_total);
double objective_ppgp(const SVGPState& state, const Tensor& h, const Tensor& y, std::size_t n_total);
/// Dispatches on state.objective.
double svgp_objective(const SVGPState& state, const Tensor& h, const Tensor& y, std::size_t n_total);

struct InducingInit {
  Tensor inducing;                   // m x h
  std::vector<std::size_t> indices;  // source image of each row
};

/// Embeds m images drawn uniformly without replacement. `embed` maps a batch
/// (b x C x H x W) to (b x h).
InducingInit init_inducing_from_embeddings(const std::function<Tensor(const Tensor&)>& embed,
                                           const Tensor& images, std::size_t m, std::uint64_t seed);

struct VariationalDistribution {
  Tensor mean;        // m
  Tensor covariance;  // m x m
};

/// Optimal q(u) of the collapsed bound for fixed hyperparameters:
/// S = K_uu Sigma^-1 K_uu, m = K_uu Sigma^-1 K_uf y / sn2 with
/// Sigma = K_uu + K_uf K_fu / sn2. `jitter` is relative to s^2 and is added
/// to K_uu, matching SVGPState::jitter.
VariationalDistribution optimal_variational_distribution(const Tensor& inducing, const Tensor& x, const Tensor& y,
                                                         const KernelParams& kernel, double noise_variance,
                                                         double jitter);

struct MultiOutputSVGP {
  std::vector<SVGPState> heads;

  std::size_t output_dim() const { return heads.size(); }
  void validate() const;
};

PredictiveDistribution multi_output_predict(const MultiOutputSVGP& model, const Tensor& h);
/// Sum of per-head objectives; y is (b x d).
double multi_output_objective(const MultiOutputSVGP& model, const Tensor& h, const Tensor& y, std::size_t n_total);

namespace svgp {

ad::Var multi_output_objective(const std::vector<Vars>& vars, const MultiOutputSVGP& model, ad::Var h,
                               const Tensor& y, std::size_t n_total);

}  // namespace svgp

}  // namespace dkl
