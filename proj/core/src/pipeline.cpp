// Copyright 2026 The DKL Regression Authors
// SPDX-License-Identifier: Apache-2.0

#include "dkl/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>

#include <spdlog/spdlog.h>

#include "dkl/archive.hpp"
#include "dkl/errors.hpp"
#include "dkl/eval.hpp"
#include "dkl/optim.hpp"
#include "dkl/random.hpp"

namespace dkl {
namespace {

constexpr double kInitialNoiseVariance = 0.1;

std::vector<Tensor> svgp_tensors(const SVGPState& s) {
  return {s.inducing,
          s.variational_mean,
          s.chol_raw,
          Tensor::scalar(s.kernel.log_lengthscale),
          Tensor::scalar(s.kernel.log_outputscale),
          Tensor::scalar(s.log_noise)};
}

void set_svgp_tensors(SVGPState& s, const std::vector<Tensor>& t, std::size_t offset) {
  s.inducing = t[offset];
  s.variational_mean = t[offset + 1];
  s.chol_raw = t[offset + 2];
  s.kernel.log_lengthscale = t[offset + 3].item();
  s.kernel.log_outputscale = t[offset + 4].item();
  s.log_noise = t[offset + 5].item();
}

std::vector<Tensor> head_tensors(const Head& head) {
  if (const auto* lin = std::get_if<LinearHead>(&head)) return {lin->weight, lin->bias};
  std::vector<Tensor> out;
  for (const SVGPState& s : std::get<MultiOutputSVGP>(head).heads) {
    for (Tensor& t : svgp_tensors(s)) out.push_back(std::move(t));
  }
  return out;
}

void set_head_tensors(Head& head, const std::vector<Tensor>& t) {
  if (auto* lin = std::get_if<LinearHead>(&head)) {
    lin->weight = t[0];
    lin->bias = t[1];
    return;
  }
  auto& heads = std::get<MultiOutputSVGP>(head).heads;
  for (std::size_t k = 0; k < heads.size(); ++k) set_svgp_tensors(heads[k], t, 6 * k);
}

double median_pairwise_distance(const Tensor& z) {
  std::vector<double> d;
  for (std::size_t i = 0; i < z.dim(0); ++i) {
    for (std::size_t j = i + 1; j < z.dim(0); ++j) d.push_back(row_distance(z, i, j));
  }
  if (d.empty()) return 1.0;
  const auto mid = d.begin() + static_cast<long>(d.size() / 2);
  std::nth_element(d.begin(), mid, d.end());
  return *mid > 0.0 && std::isfinite(*mid) ? *mid : 1.0;
}

Tensor concat_rows(const Tensor& a, const Tensor& b) {
  Shape s = a.shape();
  s[0] += b.dim(0);
  std::vector<double> v(a.values().begin(), a.values().end());
  v.insert(v.end(), b.values().begin(), b.values().end());
  return Tensor(s, std::move(v));
}

PredictiveDistribution predict_raw(const EncoderParams& encoder, const Head& head, const TargetScaler& scaler,
                                   const Tensor& images) {
  const Tensor h = encode_batched(encoder, images);
  PredictiveDistribution p;
  if (const auto* lin = std::get_if<LinearHead>(&head)) {
    p.mean = apply_linear_head(*lin, h);
    p.variance = Tensor(p.mean.shape());
  } else {
    const MultiOutputSVGP& model = std::get<MultiOutputSVGP>(head);
    p = multi_output_predict(model, h);
    for (std::size_t i = 0; i < p.variance.dim(0); ++i) {
      for (std::size_t j = 0; j < p.variance.dim(1); ++j) p.variance.at(i, j) += std::exp(model.heads[j].log_noise);
    }
  }
  return {scaler.inverse_mean(p.mean), scaler.inverse_variance(p.variance)};
}

ObjectiveKind svgp_kind(HeadObjective o) { return o == HeadObjective::SVGP ? ObjectiveKind::SVGP : ObjectiveKind::PPGP; }

template <typename F>
void run_stage(TrainingLog& log, const std::string& name, F&& body) {
  log.stages.push_back(name);
  spdlog::info("stage {}", name);
  try {
    body();
  } catch (const std::exception& e) {
    throw TrainingError("stage '" + name + "' failed: " + e.what());
  }
}

Tensor augment_batch(const Tensor& images, Tensor& targets, TaskKind task, std::uint64_t seed) {
  const std::size_t b = images.dim(0), c = images.dim(1), h = images.dim(2), w = images.dim(3);
  const std::size_t d = targets.dim(1);
  Tensor out(images.shape());
  for (std::size_t i = 0; i < b; ++i) {
    const AugmentedSample s = augment(images.rows(i, i + 1).reshaped({c, h, w}),
                                      targets.rows(i, i + 1).reshaped({d}), task, derive_seed(seed, i));
    std::copy(s.image.values().begin(), s.image.values().end(), out.data() + i * c * h * w);
    for (std::size_t j = 0; j < d; ++j) targets.at(i, j) = s.target[j];
  }
  return out;
}

}  // namespace

std::string_view pretraining_name(Pretraining p) {
  switch (p) {
    case Pretraining::None: return "none";
    case Pretraining::DML: return "dml";
    case Pretraining::CAE: return "cae";
  }
  return "none";
}

Pretraining parse_pretraining(std::string_view name) {
  if (name == "none") return Pretraining::None;
  if (name == "dml") return Pretraining::DML;
  if (name == "cae") return Pretraining::CAE;
  throw ConfigError("unknown pretraining '" + std::string(name) + "' (expected none, dml or cae)");
}

std::string_view head_objective_name(HeadObjective o) {
  switch (o) {
    case HeadObjective::SVGP: return "svgp";
    case HeadObjective::PPGP: return "ppgp";
    case HeadObjective::LinearMSE: return "linear_mse";
  }
  return "ppgp";
}

HeadObjective parse_head_objective(std::string_view name) {
  if (name == "svgp") return HeadObjective::SVGP;
  if (name == "ppgp") return HeadObjective::PPGP;
  if (name == "linear_mse") return HeadObjective::LinearMSE;
  throw ConfigError("unknown objective '" + std::string(name) + "' (expected svgp, ppgp or linear_mse)");
}

void PipelineConfig::validate() const {
  if (transfer && transfer_path.empty()) throw ConfigError("transfer requires transfer_path");
  if (output_dim < 1) throw ConfigError("output_dim must be at least 1");
  if (num_inducing < 1) throw ConfigError("num_inducing must be at least 1");
  if (batch_size < 1) throw ConfigError("batch_size must be at least 1");
  if (!(backbone_learning_rate > 0.0) || !(head_learning_rate > 0.0)) {
    throw ConfigError("learning rates must be positive");
  }
  if (!(jitter >= 0.0)) throw ConfigError("jitter must be non-negative");
  if (histogram_bins < 1) throw ConfigError("histogram_bins must be at least 1");
  if (kmeans_k < 1) throw ConfigError("kmeans_k must be at least 1");
  if (!(cae_learning_rate > 0.0)) throw ConfigError("cae_learning_rate must be positive");
  backbone.validate();
  if (pretraining == Pretraining::DML) triplet.validate();
}

nlohmann::json PipelineConfig::to_json() const {
  return {{"transfer", transfer},
          {"transfer_path", transfer_path},
          {"pretraining", pretraining_name(pretraining)},
          {"objective", head_objective_name(objective)},
          {"output_dim", output_dim},
          {"num_inducing", num_inducing},
          {"backbone", backbone.to_json()},
          {"kernel", kernel_kind_name(kernel)},
          {"jitter", jitter},
          {"epochs", epochs},
          {"batch_size", batch_size},
          {"backbone_learning_rate", backbone_learning_rate},
          {"head_learning_rate", head_learning_rate},
          {"augment", augment},
          {"train_dropout", train_dropout},
          {"seed", seed},
          {"histogram_bins", histogram_bins},
          {"kmeans_k", kmeans_k},
          {"triplet",
           {{"margin", triplet.margin},
            {"batch_size", triplet.batch_size},
            {"patience", triplet.patience},
            {"max_epochs", triplet.max_epochs},
            {"learning_rate", triplet.learning_rate}}},
          {"cae_epochs", cae_epochs},
          {"cae_learning_rate", cae_learning_rate},
          {"random_inducing", random_inducing}};
}

PipelineConfig PipelineConfig::from_json(const nlohmann::json& j) {
  try {
    PipelineConfig c;
    c.transfer = j.at("transfer").get<bool>();
    c.transfer_path = j.at("transfer_path").get<std::string>();
    c.pretraining = parse_pretraining(j.at("pretraining").get<std::string>());
    c.objective = parse_head_objective(j.at("objective").get<std::string>());
    c.output_dim = j.at("output_dim").get<std::size_t>();
    c.num_inducing = j.at("num_inducing").get<std::size_t>();
    c.backbone = BackboneConfig::from_json(j.at("backbone"));
    c.kernel = parse_kernel_kind(j.at("kernel").get<std::string>());
    c.jitter = j.at("jitter").get<double>();
    c.epochs = j.at("epochs").get<std::size_t>();
    c.batch_size = j.at("batch_size").get<std::size_t>();
    c.backbone_learning_rate = j.at("backbone_learning_rate").get<double>();
    c.head_learning_rate = j.at("head_learning_rate").get<double>();
    c.augment = j.at("augment").get<bool>();
    c.train_dropout = j.at("train_dropout").get<bool>();
    c.seed = j.at("seed").get<std::uint64_t>();
    c.histogram_bins = j.at("histogram_bins").get<std::size_t>();
    c.kmeans_k = j.at("kmeans_k").get<std::size_t>();
    const auto& t = j.at("triplet");
    c.triplet.margin = t.at("margin").get<double>();
    c.triplet.batch_size = t.at("batch_size").get<std::size_t>();
    c.triplet.patience = t.at("patience").get<std::size_t>();
    c.triplet.max_epochs = t.at("max_epochs").get<std::size_t>();
    c.triplet.learning_rate = t.at("learning_rate").get<double>();
    c.cae_epochs = j.at("cae_epochs").get<std::size_t>();
    c.cae_learning_rate = j.at("cae_learning_rate").get<double>();
    c.random_inducing = j.at("random_inducing").get<bool>();
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed pipeline config: ") + e.what());
  }
}

TargetScaler TargetScaler::fit(const Tensor& targets) {
  if (targets.rank() != 2) throw ShapeError("targets must be (n x d), got " + shape_to_string(targets.shape()));
  const std::size_t n = targets.dim(0), d = targets.dim(1);
  TargetScaler s{std::vector<double>(d, 0.0), std::vector<double>(d, 0.0)};
  for (std::size_t j = 0; j < d; ++j) {
    for (std::size_t i = 0; i < n; ++i) s.mean[j] += targets.at(i, j);
    s.mean[j] /= static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) s.scale[j] += (targets.at(i, j) - s.mean[j]) * (targets.at(i, j) - s.mean[j]);
    s.scale[j] = std::sqrt(s.scale[j] / static_cast<double>(n));
    if (!(s.scale[j] > 0.0)) s.scale[j] = 1.0;
  }
  return s;
}

Tensor TargetScaler::transform(const Tensor& targets) const {
  if (targets.rank() != 2 || targets.dim(1) != mean.size()) {
    throw ShapeError("targets " + shape_to_string(targets.shape()) + " do not match scaler width " +
                     std::to_string(mean.size()));
  }
  Tensor out = targets;
  for (std::size_t i = 0; i < out.dim(0); ++i) {
    for (std::size_t j = 0; j < out.dim(1); ++j) out.at(i, j) = (out.at(i, j) - mean[j]) / scale[j];
  }
  return out;
}

Tensor TargetScaler::inverse_mean(const Tensor& m) const {
  Tensor out = m;
  for (std::size_t i = 0; i < out.dim(0); ++i) {
    for (std::size_t j = 0; j < out.dim(1); ++j) out.at(i, j) = out.at(i, j) * scale[j] + mean[j];
  }
  return out;
}

Tensor TargetScaler::inverse_variance(const Tensor& v) const {
  Tensor out = v;
  for (std::size_t i = 0; i < out.dim(0); ++i) {
    for (std::size_t j = 0; j < out.dim(1); ++j) out.at(i, j) *= scale[j] * scale[j];
  }
  return out;
}

nlohmann::json TrainingLog::to_json() const {
  return {{"stages", stages},
          {"labeling", labeling},
          {"epoch_objective", epoch_objective},
          {"val_rmse", val_rmse},
          {"best_epoch", best_epoch},
          {"inducing_indices", inducing_indices}};
}

TrainingLog TrainingLog::from_json(const nlohmann::json& j) {
  TrainingLog log;
  log.stages = j.at("stages").get<std::vector<std::string>>();
  log.labeling = j.at("labeling").get<std::string>();
  log.epoch_objective = j.at("epoch_objective").get<std::vector<double>>();
  log.val_rmse = j.at("val_rmse").get<std::vector<double>>();
  log.best_epoch = j.at("best_epoch").get<std::size_t>();
  log.inducing_indices = j.at("inducing_indices").get<std::vector<std::size_t>>();
  return log;
}

namespace {

void check_datasets(const PipelineConfig& config, const Dataset& train, const Dataset& val) {
  const BackboneConfig& bc = config.backbone;
  for (const Dataset* ds : {&train, &val}) {
    ds->validate();
    const Shape expected{ds->size(), bc.channels, bc.height, bc.width};
    if (ds->images.shape() != expected) {
      throw ShapeError("dataset images " + shape_to_string(ds->images.shape()) + " do not match backbone input " +
                       shape_to_string(expected));
    }
    if (ds->output_dim() != config.output_dim) {
      throw ShapeError("dataset has " + std::to_string(ds->output_dim()) + " target columns, config expects " +
                       std::to_string(config.output_dim));
    }
  }
}

EncoderParams run_encoder_stages(const PipelineConfig& config, const Dataset& train, const Dataset& val,
                                 TrainingLog& log) {
  const BackboneConfig& bc = config.backbone;
  const std::uint64_t seed = config.seed;
  const std::size_t n = train.size();
  EncoderParams encoder;
  if (config.transfer) {
    run_stage(log, "transfer", [&] { encoder = load_encoder(config.transfer_path, bc); });
  } else {
    encoder = init_encoder(bc, derive_seed(seed, "encoder-init"));
  }

  if (config.pretraining == Pretraining::DML) {
    run_stage(log, "dml-pretraining", [&] {
      const Tensor all_targets = concat_rows(train.targets, val.targets);
      const ClassLabeling labeling = config.output_dim == 1
                                         ? label_by_histogram(all_targets, config.histogram_bins)
                                         : label_by_kmeans(all_targets, config.kmeans_k, derive_seed(seed, "kmeans"));
      log.labeling = labeling.method == LabelMethod::Histogram ? "histogram" : "kmeans";
      const std::span<const std::size_t> labels(labeling.labels);
      TripletConfig tc = config.triplet;
      tc.seed = derive_seed(seed, "dml");
      encoder = train_dml(encoder, train.images, labels.first(n), val.images, labels.subspan(n), tc);
    });
  } else if (config.pretraining == Pretraining::CAE) {
    run_stage(log, "cae-pretraining", [&] {
      const CAEConfig cc{config.cae_epochs, config.batch_size, config.cae_learning_rate, derive_seed(seed, "cae")};
      encoder = train_cae(encoder, init_decoder(bc, derive_seed(seed, "decoder-init")), train.images, cc).encoder;
    });
  }
  return encoder;
}

}  // namespace

EncoderParams prepare_encoder(const PipelineConfig& config, const Dataset& train, const Dataset& val,
                              TrainingLog& log) {
  config.validate();
  check_datasets(config, train, val);
  return run_encoder_stages(config, train, val, log);
}

Checkpoint fine_tune_dkl(const PipelineConfig& config, const Dataset& train, const Dataset& val) {
  config.validate();
  check_datasets(config, train, val);
  const BackboneConfig& bc = config.backbone;
  const std::uint64_t seed = config.seed;
  const std::size_t n = train.size();

  Checkpoint cp;
  cp.config = config;
  TrainingLog& log = cp.log;
  cp.encoder = run_encoder_stages(config, train, val, log);

  cp.scaler = TargetScaler::fit(train.targets);
  const Tensor y_train = cp.scaler.transform(train.targets);

  if (config.objective == HeadObjective::LinearMSE) {
    cp.head = init_linear_head(bc.latent_dim, config.output_dim, derive_seed(seed, "linear-head"));
  } else {
    run_stage(log, "inducing-init", [&] {
      Tensor z;
      if (config.random_inducing) {
        Rng rng(derive_seed(seed, "random-inducing"));
        std::normal_distribution<double> normal(0.0, 1.0);
        z = Tensor({config.num_inducing, bc.latent_dim});
        for (double& v : z.values()) v = normal(rng);
      } else {
        InducingInit init = init_inducing_from_embeddings([&](const Tensor& x) { return encode_batched(cp.encoder, x); },
                                                          train.images, config.num_inducing,
                                                          derive_seed(seed, "inducing"));
        z = std::move(init.inducing);
        log.inducing_indices = std::move(init.indices);
      }
      const KernelParams kernel{config.kernel, std::log(median_pairwise_distance(z)), 0.0};
      MultiOutputSVGP model;
      for (std::size_t k = 0; k < config.output_dim; ++k) {
        SVGPState s = make_svgp_state(z, kernel, std::log(kInitialNoiseVariance), svgp_kind(config.objective));
        s.jitter = config.jitter;
        model.heads.push_back(std::move(s));
      }
      cp.head = std::move(model);
    });
  }

  run_stage(log, "fine-tuning", [&] {
    const TaskKind task = parse_task(train.task);
    EncoderParams encoder = cp.encoder;
    Head head = cp.head;
    std::vector<Tensor> head_params = head_tensors(head);
    AdamState backbone_state, head_state;
    double best = rmse(predict_raw(encoder, head, cp.scaler, val.images).mean, val.targets);
    log.val_rmse.push_back(best);
    log.best_epoch = 0;

    for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
      Rng shuffle(derive_seed(derive_seed(seed, "shuffle"), epoch));
      Rng dropout_rng(derive_seed(derive_seed(seed, "dropout"), epoch));
      const std::uint64_t augment_seed = derive_seed(derive_seed(seed, "augment"), epoch);
      const std::vector<std::size_t> perm = permutation(n, shuffle);
      double epoch_objective = 0.0;
      for (std::size_t begin = 0; begin < n; begin += config.batch_size) {
        const std::size_t end = std::min(n, begin + config.batch_size);
        const std::vector<std::size_t> idx(perm.begin() + static_cast<long>(begin),
                                           perm.begin() + static_cast<long>(end));
        Tensor x = train.images.gather_rows(idx);
        Tensor y;
        if (config.augment) {
          Tensor raw = train.targets.gather_rows(idx);
          x = augment_batch(x, raw, task, derive_seed(augment_seed, begin));
          y = cp.scaler.transform(raw);
        } else {
          y = y_train.gather_rows(idx);
        }

        ad::Graph g;
        const std::vector<ad::Var> ev = backbone::bind(g, encoder.params, true);
        const backbone::DropoutSampler dropout =
            config.train_dropout ? backbone::DropoutSampler{bc.dropout_rate, &dropout_rng} : backbone::DropoutSampler{};
        const ad::Var h = backbone::encode(bc, ev, ad::constant(g, x), dropout);
        std::vector<ad::Var> hv;
        ad::Var loss;
        double objective_value = 0.0;
        if (const auto* lin = std::get_if<LinearHead>(&head)) {
          hv = {ad::parameter(g, lin->weight), ad::parameter(g, lin->bias)};
          loss = ad::mean(ad::square(backbone::linear(hv[0], hv[1], h) - ad::constant(g, y)));
          objective_value = -loss.value().item();
        } else {
          const MultiOutputSVGP& model = std::get<MultiOutputSVGP>(head);
          std::vector<svgp::Vars> sv;
          for (const SVGPState& s : model.heads) {
            sv.push_back(svgp::bind(g, s, true));
            const svgp::Vars& v = sv.back();
            hv.insert(hv.end(), {v.inducing, v.mean, v.chol_raw, v.log_lengthscale, v.log_outputscale, v.log_noise});
          }
          const ad::Var obj = svgp::multi_output_objective(sv, model, h, y, n);
          loss = -obj / static_cast<double>(n);
          objective_value = -loss.value().item();
        }
        epoch_objective += objective_value * static_cast<double>(end - begin) / static_cast<double>(n);

        const ad::Gradients grads = g.backward(loss.id());
        const std::vector<Tensor> eg = ad::gradients_of(grads, ev);
        const std::vector<Tensor> hg = ad::gradients_of(grads, hv);
        if (!all_finite(eg) || !all_finite(hg)) {
          spdlog::warn("epoch {}: non-finite gradient, skipping step", epoch);
          continue;
        }
        adam_step(encoder.params.tensors, eg, backbone_state, config.backbone_learning_rate);
        adam_step(head_params, hg, head_state, config.head_learning_rate);
        set_head_tensors(head, head_params);
      }
      const double val_rmse = rmse(predict_raw(encoder, head, cp.scaler, val.images).mean, val.targets);
      log.epoch_objective.push_back(epoch_objective);
      log.val_rmse.push_back(val_rmse);
      spdlog::info("epoch {}: objective {:.6g}, validation RMSE {:.6g}", epoch, epoch_objective, val_rmse);
      if (val_rmse < best) {
        best = val_rmse;
        log.best_epoch = epoch;
        cp.encoder = encoder;
        cp.head = head;
      }
    }
  });
  return cp;
}

PredictiveDistribution predict(const Checkpoint& checkpoint, const Tensor& images) {
  return predict_raw(checkpoint.encoder, checkpoint.head, checkpoint.scaler, images);
}

PredictiveDistribution predict_mc_dropout(const Checkpoint& checkpoint, const Tensor& images, std::size_t passes,
                                          std::uint64_t base_seed) {
  const auto* lin = std::get_if<LinearHead>(&checkpoint.head);
  if (lin == nullptr) throw InvalidArgument("MC dropout prediction needs a checkpoint with a linear head");
  const PredictiveDistribution p = mc_dropout_predict(checkpoint.encoder, *lin, images, passes, base_seed);
  return {checkpoint.scaler.inverse_mean(p.mean), checkpoint.scaler.inverse_variance(p.variance)};
}

void save_checkpoint(const Checkpoint& cp, const std::filesystem::path& path) {
  Archive a;
  const nlohmann::json config = cp.config.to_json();
  nlohmann::json head_meta;
  if (std::holds_alternative<LinearHead>(cp.head)) {
    head_meta = {{"kind", "linear"}};
  } else {
    nlohmann::json heads = nlohmann::json::array();
    for (const SVGPState& s : std::get<MultiOutputSVGP>(cp.head).heads) {
      heads.push_back({{"kernel", kernel_kind_name(s.kernel.kind)},
                       {"objective", objective_kind_name(s.objective)},
                       {"jitter", s.jitter}});
    }
    head_meta = {{"kind", "svgp"}, {"heads", heads}};
  }
  a.meta = {{"kind", "checkpoint"},
            {"config", config},
            {"config_hash", json_hash(config)},
            {"head", head_meta},
            {"log", cp.log.to_json()}};
  for (std::size_t i = 0; i < cp.encoder.params.size(); ++i) {
    a.tensors.emplace_back("encoder/" + cp.encoder.params.names[i], cp.encoder.params.tensors[i]);
  }
  const std::size_t d = cp.scaler.mean.size();
  std::vector<double> scaler(cp.scaler.mean);
  scaler.insert(scaler.end(), cp.scaler.scale.begin(), cp.scaler.scale.end());
  a.tensors.emplace_back("scaler", Tensor({2, d}, scaler));
  if (const auto* lin = std::get_if<LinearHead>(&cp.head)) {
    a.tensors.emplace_back("linear/weight", lin->weight);
    a.tensors.emplace_back("linear/bias", lin->bias);
  } else {
    const auto& heads = std::get<MultiOutputSVGP>(cp.head).heads;
    for (std::size_t k = 0; k < heads.size(); ++k) {
      const std::string p = "head" + std::to_string(k) + "/";
      const SVGPState& s = heads[k];
      a.tensors.emplace_back(p + "inducing", s.inducing);
      a.tensors.emplace_back(p + "mean", s.variational_mean);
      a.tensors.emplace_back(p + "chol_raw", s.chol_raw);
      a.tensors.emplace_back(p + "hyper",
                             Tensor({3}, {s.kernel.log_lengthscale, s.kernel.log_outputscale, s.log_noise}));
    }
  }
  write_archive(path, a);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  Archive a = read_archive(path);
  Checkpoint cp;
  std::map<std::string, Tensor> tensors;
  for (auto& [name, t] : a.tensors) tensors.emplace(name, std::move(t));
  auto take = [&](const std::string& name) -> Tensor {
    const auto it = tensors.find(name);
    if (it == tensors.end()) throw CorruptFileError("checkpoint '" + path.string() + "' lacks tensor '" + name + "'");
    return it->second;
  };
  try {
    if (a.meta.at("kind").get<std::string>() != "checkpoint") {
      throw CorruptFileError("'" + path.string() + "' is not a checkpoint");
    }
    const nlohmann::json& config = a.meta.at("config");
    const std::uint64_t stored = a.meta.at("config_hash").get<std::uint64_t>();
    if (stored != json_hash(config)) {
      throw CorruptFileError("checkpoint '" + path.string() + "' config hash mismatch: stored " +
                             std::to_string(stored) + ", computed " + std::to_string(json_hash(config)));
    }
    cp.config = PipelineConfig::from_json(config);
    cp.log = TrainingLog::from_json(a.meta.at("log"));

    cp.encoder.config = cp.config.backbone;
    for (const auto& [name, shape] : encoder_layout(cp.config.backbone)) {
      cp.encoder.params.add(name, take("encoder/" + name));
    }
    check_layout(cp.encoder.params, encoder_layout(cp.config.backbone));

    const Tensor scaler = take("scaler");
    const std::size_t d = cp.config.output_dim;
    if (scaler.shape() != Shape{2, d}) throw CorruptFileError("checkpoint scaler has the wrong shape");
    cp.scaler.mean.assign(scaler.values().begin(), scaler.values().begin() + static_cast<long>(d));
    cp.scaler.scale.assign(scaler.values().begin() + static_cast<long>(d), scaler.values().end());

    const nlohmann::json& head = a.meta.at("head");
    if (head.at("kind").get<std::string>() == "linear") {
      LinearHead lin{take("linear/weight"), take("linear/bias")};
      if (lin.weight.shape() != Shape{cp.config.backbone.latent_dim, d} || lin.bias.shape() != Shape{d}) {
        throw CorruptFileError("checkpoint linear head has the wrong shape");
      }
      cp.head = std::move(lin);
    } else {
      MultiOutputSVGP model;
      const auto& heads = head.at("heads");
      if (heads.size() != d) throw CorruptFileError("checkpoint holds " + std::to_string(heads.size()) + " GP heads");
      for (std::size_t k = 0; k < d; ++k) {
        const std::string p = "head" + std::to_string(k) + "/";
        const Tensor hyper = take(p + "hyper");
        if (hyper.shape() != Shape{3}) throw CorruptFileError("checkpoint GP hyperparameters have the wrong shape");
        const KernelParams kernel{parse_kernel_kind(heads[k].at("kernel").get<std::string>()), hyper[0], hyper[1]};
        const std::string objective = heads[k].at("objective").get<std::string>();
        SVGPState s = make_svgp_state(take(p + "inducing"), kernel, hyper[2],
                                      objective == objective_kind_name(ObjectiveKind::SVGP) ? ObjectiveKind::SVGP
                                                                                             : ObjectiveKind::PPGP);
        s.variational_mean = take(p + "mean");
        s.chol_raw = take(p + "chol_raw");
        s.jitter = heads[k].at("jitter").get<double>();
        model.heads.push_back(std::move(s));
      }
      model.validate();
      cp.head = std::move(model);
    }
  } catch (const nlohmann::json::exception& e) {
    throw CorruptFileError("malformed checkpoint header in '" + path.string() + "': " + e.what());
  } catch (const ShapeError& e) {
    throw CorruptFileError("checkpoint '" + path.string() + "' is inconsistent: " + e.what());
  }
  return cp;
}

std::size_t objective_health_violations(const std::vector<double>& epoch_objective, std::size_t window,
                                        std::size_t max_consecutive) {
  if (window == 0) throw InvalidArgument("window must be positive");
  if (epoch_objective.size() <= window) return 0;
  std::vector<double> smooth;
  for (std::size_t i = 0; i + window <= epoch_objective.size(); ++i) {
    double s = 0.0;
    for (std::size_t j = i; j < i + window; ++j) s += epoch_objective[j];
    smooth.push_back(s / static_cast<double>(window));
  }
  std::size_t violations = 0, run = 0;
  for (std::size_t i = 1; i < smooth.size(); ++i) {
    if (smooth[i] < smooth[i - 1]) {
      ++run;
      if (run == max_consecutive + 1) ++violations;
    } else {
      run = 0;
    }
  }
  return violations;
}

}  // namespace dkl
