// Copyright 2026 The DKL Regression Authors
// SPDX-License-Identifier: Apache-2.0

#include "dkl/svgp.hpp"

#include <spdlog/spdlog.h>

#include <cmath>
#include <numbers>

#include "dkl/errors.hpp"
#include "dkl/linalg.hpp"
#include "dkl/random.hpp"

namespace dkl {
namespace {

constexpr double kMinNoise = 1e-12;

Tensor strict_lower_mask(std::size_t m) {
  Tensor t({m, m});
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < i; ++j) t.at(i, j) = 1.0;
  }
  return t;
}

void warn_negative_variance(const Tensor& variance) {
  double worst = 0.0;
  for (double v : variance.values()) worst = std::min(worst, v);
  if (worst < -1e-6) spdlog::warn("predictive variance {:.3e} below zero before clamping", worst);
}

}  // namespace

std::string_view objective_kind_name(ObjectiveKind kind) {
  return kind == ObjectiveKind::SVGP ? "svgp" : "ppgp";
}

double inverse_softplus(double y) {
  if (!(y > 0.0)) throw DomainError("inverse_softplus needs a positive argument");
  return y > 30.0 ? y + std::log(-std::expm1(-y)) : std::log(std::expm1(y));
}

void SVGPState::validate() const {
  if (inducing.rank() != 2) throw ShapeError("inducing inputs must be (m x h), got " + shape_to_string(inducing.shape()));
  const std::size_t m = inducing.dim(0);
  if (variational_mean.shape() != Shape{m}) {
    throw ShapeError("variational mean " + shape_to_string(variational_mean.shape()) + " does not match m = " +
                     std::to_string(m));
  }
  if (chol_raw.shape() != Shape{m, m}) {
    throw ShapeError("variational factor " + shape_to_string(chol_raw.shape()) + " does not match m = " +
                     std::to_string(m));
  }
  if (!inducing.all_finite() || !variational_mean.all_finite() || !chol_raw.all_finite()) {
    throw NumericError("SVGP state holds non-finite entries");
  }
}

SVGPState make_svgp_state(Tensor inducing, KernelParams kernel, double log_noise, ObjectiveKind objective) {
  if (inducing.rank() != 2) throw ShapeError("inducing inputs must be (m x h), got " + shape_to_string(inducing.shape()));
  const std::size_t m = inducing.dim(0);
  SVGPState s;
  s.inducing = std::move(inducing);
  s.variational_mean = Tensor({m});
  s.chol_raw = Tensor({m, m});
  const double diag = inverse_softplus(1.0);
  for (std::size_t i = 0; i < m; ++i) s.chol_raw.at(i, i) = diag;
  s.kernel = kernel;
  s.log_noise = log_noise;
  s.objective = objective;
  return s;
}

Tensor variational_chol(const SVGPState& state) {
  const std::size_t m = state.num_inducing();
  Tensor l({m, m});
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < i; ++j) l.at(i, j) = state.chol_raw.at(i, j);
    const double r = state.chol_raw.at(i, i);
    l.at(i, i) = r > 0 ? r + std::log1p(std::exp(-r)) : std::log1p(std::exp(r));
  }
  return l;
}

void set_variational_chol(SVGPState& state, const Tensor& chol) {
  const std::size_t m = state.num_inducing();
  if (chol.shape() != Shape{m, m}) {
    throw ShapeError("variational factor " + shape_to_string(chol.shape()) + " does not match m = " + std::to_string(m));
  }
  Tensor raw({m, m});
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < i; ++j) raw.at(i, j) = chol.at(i, j);
    raw.at(i, i) = inverse_softplus(chol.at(i, i));
  }
  state.chol_raw = std::move(raw);
}

Tensor prior_covariance(const SVGPState& state) {
  ad::Graph g;
  const svgp::Vars v = svgp::bind(g, state, false);
  const ad::Var kuu = gp::kernel_matrix(state.kernel.kind, v.log_lengthscale, v.log_outputscale, v.inducing, v.inducing);
  const double jitter = gp::jittered_cholesky(kuu, ad::exp(v.log_outputscale), {state.jitter, 1e-2}).jitter;
  return linalg::add_diagonal(kuu.value(), jitter * std::exp(state.kernel.log_outputscale));
}

namespace svgp {

Vars bind(ad::Graph& g, const SVGPState& state, bool trainable) {
  state.validate();
  auto leaf = [&](Tensor t) { return trainable ? ad::parameter(g, std::move(t)) : ad::constant(g, std::move(t)); };
  return Vars{leaf(state.inducing),
              leaf(state.variational_mean),
              leaf(state.chol_raw),
              leaf(Tensor::scalar(state.kernel.log_lengthscale)),
              leaf(Tensor::scalar(state.kernel.log_outputscale)),
              leaf(Tensor::scalar(state.log_noise))};
}

void gather(const Vars& vars, SVGPState& state) {
  state.inducing = vars.inducing.value();
  state.variational_mean = vars.mean.value();
  state.chol_raw = vars.chol_raw.value();
  state.kernel.log_lengthscale = vars.log_lengthscale.value().item();
  state.kernel.log_outputscale = vars.log_outputscale.value().item();
  state.log_noise = vars.log_noise.value().item();
}

ad::Var variational_chol(const Vars& vars) {
  ad::Graph& g = vars.chol_raw.graph();
  const std::size_t m = vars.chol_raw.shape()[0];
  return vars.chol_raw * ad::constant(g, strict_lower_mask(m)) +
         ad::softplus(vars.chol_raw) * ad::constant(g, Tensor::eye(m));
}

Moments evaluate(const Vars& vars, const SVGPState& state, ad::Var h) {
  const std::size_t m = vars.inducing.shape()[0];
  if (h.shape().size() != 2 || h.shape()[1] != vars.inducing.shape()[1]) {
    throw ShapeError("SVGP inputs " + shape_to_string(h.shape()) + " do not match inducing inputs " +
                     shape_to_string(vars.inducing.shape()));
  }
  const std::size_t q = h.shape()[0];
  const KernelKind kind = state.kernel.kind;
  const ad::Var s2 = ad::exp(vars.log_outputscale);

  const ad::Var kuu = gp::kernel_matrix(kind, vars.log_lengthscale, vars.log_outputscale, vars.inducing, vars.inducing);
  const ad::Var luu = gp::jittered_cholesky(kuu, s2, {state.jitter, 1e-2}).factor;
  const ad::Var kuf = gp::kernel_matrix(kind, vars.log_lengthscale, vars.log_outputscale, vars.inducing, h);
  const ad::Var ls = variational_chol(vars);

  const ad::Var a = ad::triangular_solve(luu, kuf, true);                      // L^-1 K_uf
  const ad::Var w = ad::triangular_solve(luu, ad::reshape(vars.mean, {m, 1}), true);  // L^-1 m
  const ad::Var mean = ad::reshape(ad::matmul(ad::transpose(a), w), {q});

  const ad::Var b = ad::triangular_solve(ad::transpose(luu), a, false);        // K_uu^-1 K_uf
  const ad::Var sb = ad::matmul(ad::transpose(ls), b);                         // L_S^T K_uu^-1 K_uf
  const ad::Var variance = ad::broadcast_to(s2, {q}) - ad::sum(ad::square(a), 0) + ad::sum(ad::square(sb), 0);

  const ad::Var lis = ad::triangular_solve(luu, ls, true);  // L^-1 L_S
  const ad::Var kl = 0.5 * (ad::sum(ad::square(lis)) + ad::sum(ad::square(w)) - static_cast<double>(m) +
                            ad::log_det_from_cholesky(luu) - ad::log_det_from_cholesky(ls));
  return {mean, variance, kl};
}

ad::Var objective(const Vars& vars, const SVGPState& state, ad::Var h, const Tensor& y, std::size_t n_total,
                  ObjectiveKind kind) {
  const std::size_t b = h.shape().empty() ? 0 : h.shape()[0];
  if (b == 0 || y.shape() != Shape{b}) {
    throw ShapeError("targets " + shape_to_string(y.shape()) + " do not match batch " + shape_to_string(h.shape()));
  }
  if (n_total < b) throw InvalidArgument("n_total must be at least the batch size");
  if (std::exp(vars.log_noise.value().item()) < kMinNoise) {
    throw NumericError("observation noise variance underflow: exp(log_noise) < 1e-12");
  }
  ad::Graph& g = h.graph();
  const Moments mo = evaluate(vars, state, h);
  const ad::Var noise = ad::broadcast_to(ad::exp(vars.log_noise), {b});
  const ad::Var resid2 = ad::square(ad::constant(g, y) - mo.mean);
  const double log2pi = std::log(2.0 * std::numbers::pi);
  ad::Var per_point;
  if (kind == ObjectiveKind::SVGP) {
    per_point = -0.5 * (log2pi + ad::log(noise)) - resid2 / (2.0 * noise) - mo.variance / (2.0 * noise);
  } else {
    const ad::Var total = noise + mo.variance;
    per_point = -0.5 * (log2pi + ad::log(total)) - resid2 / (2.0 * total);
  }
  const double scale = static_cast<double>(n_total) / static_cast<double>(b);
  return scale * ad::sum(per_point) - mo.kl;
}

ad::Var multi_output_objective(const std::vector<Vars>& vars, const MultiOutputSVGP& model, ad::Var h,
                               const Tensor& y, std::size_t n_total) {
  model.validate();
  const std::size_t d = model.output_dim();
  if (vars.size() != d) throw InvalidArgument("head variable count does not match model");
  if (y.rank() != 2 || y.dim(1) != d || h.shape().size() != 2 || y.dim(0) != h.shape()[0]) {
    throw ShapeError("targets " + shape_to_string(y.shape()) + " do not have " + std::to_string(d) +
                     " columns matching batch " + shape_to_string(h.shape()));
  }
  const std::size_t b = y.dim(0);
  ad::Var total;
  for (std::size_t j = 0; j < d; ++j) {
    Tensor col({b});
    for (std::size_t i = 0; i < b; ++i) col[i] = y.at(i, j);
    const ad::Var term = objective(vars[j], model.heads[j], h, col, n_total, model.heads[j].objective);
    total = j == 0 ? term : total + term;
  }
  return total;
}

}  // namespace svgp

PredictiveDistribution svgp_predict(const SVGPState& state, const Tensor& h) {
  ad::Graph g;
  const svgp::Vars v = svgp::bind(g, state, false);
  const svgp::Moments mo = svgp::evaluate(v, state, ad::constant(g, h));
  const std::size_t q = h.dim(0);
  PredictiveDistribution out{mo.mean.value().reshaped({q, 1}), mo.variance.value().reshaped({q, 1})};
  warn_negative_variance(out.variance);
  for (double& x : out.variance.values()) x = std::max(0.0, x);
  return out;
}

double kl_qu_pu(const SVGPState& state) {
  ad::Graph g;
  const svgp::Vars v = svgp::bind(g, state, false);
  return svgp::evaluate(v, state, v.inducing).kl.value().item();
}

namespace {

double objective_value(const SVGPState& state, const Tensor& h, const Tensor& y, std::size_t n_total,
                       ObjectiveKind kind) {
  ad::Graph g;
  const svgp::Vars v = svgp::bind(g, state, false);
  return svgp::objective(v, state, ad::constant(g, h), y, n_total, kind).value().item();
}

}  // namespace

double elbo_svgp(const SVGPState& state, const Tensor& h, const Tensor& y, std::size_t n_total) {
  return objective_value(state, h, y, n_total, ObjectiveKind::SVGP);
}

double objective_ppgp(const SVGPState& state, const Tensor& h, const Tensor& y, std::size_t n_total) {
  return objective_value(state, h, y, n_total, ObjectiveKind::PPGP);
}

double svgp_objective(const SVGPState& state, const Tensor& h, const Tensor& y, std::size_t n_total) {
  return objective_value(state, h, y, n_total, state.objective);
}

InducingInit init_inducing_from_embeddings(const std::function<Tensor(const Tensor&)>& embed, const Tensor& images,
                                           std::size_t m, std::uint64_t seed) {
  if (images.rank() == 0) throw ShapeError("image batch must have a leading sample axis");
  const std::size_t n = images.dim(0);
  if (m < 1 || m > n) {
    throw InvalidArgument("number of inducing points " + std::to_string(m) + " must lie in [1, " +
                          std::to_string(n) + "]");
  }
  Rng rng(seed);
  InducingInit init;
  init.indices = sample_without_replacement(n, m, rng);
  init.inducing = embed(images.gather_rows(init.indices));
  if (init.inducing.rank() != 2 || init.inducing.dim(0) != m) {
    throw ShapeError("embedding returned " + shape_to_string(init.inducing.shape()) + " for " + std::to_string(m) +
                     " images");
  }
  return init;
}

VariationalDistribution optimal_variational_distribution(const Tensor& inducing, const Tensor& x, const Tensor& y,
                                                         const KernelParams& kernel, double noise_variance,
                                                         double jitter) {
  if (!(noise_variance > 0.0)) throw DomainError("noise variance must be positive");
  if (y.rank() != 1 || x.rank() != 2 || y.dim(0) != x.dim(0)) {
    throw ShapeError("targets " + shape_to_string(y.shape()) + " do not match inputs " + shape_to_string(x.shape()));
  }
  const std::size_t m = inducing.dim(0);
  const std::size_t n = x.dim(0);
  SVGPState probe = make_svgp_state(inducing, kernel, std::log(noise_variance));
  probe.jitter = jitter;
  const Tensor kuu = prior_covariance(probe);
  const Tensor kuf = kernel_matrix(kernel, inducing, x);
  Tensor sigma = linalg::matmul(kuf, linalg::transpose(kuf));
  for (std::size_t i = 0; i < m * m; ++i) sigma[i] = kuu[i] + sigma[i] / noise_variance;
  const Tensor lsig = linalg::cholesky(sigma);
  auto sigma_solve = [&](const Tensor& rhs) {
    return linalg::solve_triangular(linalg::transpose(lsig), linalg::solve_triangular(lsig, rhs, true), false);
  };
  const Tensor cov = linalg::matmul(kuu, sigma_solve(kuu));
  const Tensor kuf_y = linalg::matmul(kuf, y.reshaped({n, 1}));
  Tensor mean = linalg::matmul(kuu, sigma_solve(kuf_y)).reshaped({m});
  for (double& v : mean.values()) v /= noise_variance;
  Tensor sym(cov.shape());
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < m; ++j) sym.at(i, j) = 0.5 * (cov.at(i, j) + cov.at(j, i));
  }
  return {std::move(mean), std::move(sym)};
}

void MultiOutputSVGP::validate() const {
  if (heads.empty()) throw InvalidArgument("multi-output SVGP needs at least one head");
  const std::size_t h = heads.front().input_dim();
  for (const SVGPState& s : heads) {
    if (s.input_dim() != h) throw ShapeError("all SVGP heads must share the input dimension");
  }
}

PredictiveDistribution multi_output_predict(const MultiOutputSVGP& model, const Tensor& h) {
  model.validate();
  const std::size_t q = h.dim(0);
  const std::size_t d = model.output_dim();
  PredictiveDistribution out{Tensor({q, d}), Tensor({q, d})};
  for (std::size_t j = 0; j < d; ++j) {
    const PredictiveDistribution p = svgp_predict(model.heads[j], h);
    for (std::size_t i = 0; i < q; ++i) {
      out.mean.at(i, j) = p.mean[i];
      out.variance.at(i, j) = p.variance[i];
    }
  }
  return out;
}

double multi_output_objective(const MultiOutputSVGP& model, const Tensor& h, const Tensor& y, std::size_t n_total) {
  ad::Graph g;
  std::vector<svgp::Vars> vars;
  for (const SVGPState& s : model.heads) vars.push_back(svgp::bind(g, s, false));
  return svgp::multi_output_objective(vars, model, ad::constant(g, h), y, n_total).value().item();
}

}  // namespace dkl
