// Copyright 2026 The DKL Regression Authors
// SPDX-License-Identifier: Apache-2.0

#include "run_config.hpp"

#include <fstream>

#include "dkl/errors.hpp"

namespace dkl::cli {
namespace {

template <typename T>
T get(const nlohmann::json& j, const char* key) {
  try {
    return j.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw ConfigError("config key '" + std::string(key) + "' has an invalid value: " + j.at(key).dump());
  }
}

}  // namespace

void RunConfig::validate() const {
  if (dataset_dir.empty()) throw ConfigError("config key 'dataset_dir' must not be empty");
  if (output_dir.empty()) throw ConfigError("config key 'output_dir' must not be empty");
  if (n < 1) throw ConfigError("config key 'n' must be at least 1");
  if (!(noise_level >= 0.0)) throw ConfigError("config key 'noise_level' must be non-negative");
  if (folds < 2) throw ConfigError("config key 'folds' must be at least 2");
  if (fold >= folds) throw ConfigError("config key 'fold' must be below 'folds'");
  if (quantile_levels < 1) throw ConfigError("config key 'quantile_levels' must be at least 1");
  if (mc_passes < 2) throw ConfigError("config key 'mc_passes' must be at least 2");
  if (methods.empty()) throw ConfigError("config key 'methods' must name at least one method");
  for (const std::string& m : methods) {
    if (m != "model" && m != "mc_dropout") {
      throw ConfigError("config key 'methods' has unknown method '" + m + "' (expected model or mc_dropout)");
    }
  }
  pipeline_config().validate();
}

nlohmann::json RunConfig::to_json() const {
  const PipelineConfig& p = pipeline;
  const BackboneConfig& b = p.backbone;
  nlohmann::json stack = nlohmann::json::array();
  for (const ConvLayerSpec& l : b.conv_stack) stack.push_back({l.out_channels, l.kernel_size, l.stride});
  return {{"seed", seed},
          {"dataset_dir", dataset_dir},
          {"task", task_name(task)},
          {"n", n},
          {"image_size", image_size},
          {"noise_level", noise_level},
          {"heteroscedastic", heteroscedastic},
          {"folds", folds},
          {"fold", fold},
          {"output_dir", output_dir},
          {"checkpoint", checkpoint},
          {"quantile_levels", quantile_levels},
          {"mc_passes", mc_passes},
          {"methods", methods},
          {"transfer", p.transfer},
          {"transfer_path", p.transfer_path},
          {"pretraining", pretraining_name(p.pretraining)},
          {"objective", head_objective_name(p.objective)},
          {"num_inducing", p.num_inducing},
          {"kernel", kernel_kind_name(p.kernel)},
          {"jitter", p.jitter},
          {"epochs", p.epochs},
          {"batch_size", p.batch_size},
          {"backbone_learning_rate", p.backbone_learning_rate},
          {"head_learning_rate", p.head_learning_rate},
          {"augment", p.augment},
          {"train_dropout", p.train_dropout},
          {"histogram_bins", p.histogram_bins},
          {"kmeans_k", p.kmeans_k},
          {"triplet_margin", p.triplet.margin},
          {"triplet_batch_size", p.triplet.batch_size},
          {"triplet_patience", p.triplet.patience},
          {"triplet_max_epochs", p.triplet.max_epochs},
          {"triplet_learning_rate", p.triplet.learning_rate},
          {"cae_epochs", p.cae_epochs},
          {"cae_learning_rate", p.cae_learning_rate},
          {"random_inducing", p.random_inducing},
          {"conv_stack", stack},
          {"latent_dim", b.latent_dim},
          {"dropout_rate", b.dropout_rate},
          {"activation", b.to_json().at("activation")}};
}

RunConfig RunConfig::from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  nlohmann::json merged = RunConfig{}.to_json();
  for (const auto& [key, value] : j.items()) {
    if (!merged.contains(key)) throw ConfigError("unknown config key '" + key + "'");
    merged[key] = value;
  }

  RunConfig c;
  c.seed = get<std::uint64_t>(merged, "seed");
  c.dataset_dir = get<std::string>(merged, "dataset_dir");
  c.task = parse_task(get<std::string>(merged, "task"));
  c.n = get<std::size_t>(merged, "n");
  c.image_size = get<std::size_t>(merged, "image_size");
  c.noise_level = get<double>(merged, "noise_level");
  c.heteroscedastic = get<bool>(merged, "heteroscedastic");
  c.folds = get<std::size_t>(merged, "folds");
  c.fold = get<std::size_t>(merged, "fold");
  c.output_dir = get<std::string>(merged, "output_dir");
  c.checkpoint = get<std::string>(merged, "checkpoint");
  c.quantile_levels = get<std::size_t>(merged, "quantile_levels");
  c.mc_passes = get<std::size_t>(merged, "mc_passes");
  c.methods = get<std::vector<std::string>>(merged, "methods");

  PipelineConfig& p = c.pipeline;
  p.transfer = get<bool>(merged, "transfer");
  p.transfer_path = get<std::string>(merged, "transfer_path");
  p.pretraining = parse_pretraining(get<std::string>(merged, "pretraining"));
  p.objective = parse_head_objective(get<std::string>(merged, "objective"));
  p.num_inducing = get<std::size_t>(merged, "num_inducing");
  p.kernel = parse_kernel_kind(get<std::string>(merged, "kernel"));
  p.jitter = get<double>(merged, "jitter");
  p.epochs = get<std::size_t>(merged, "epochs");
  p.batch_size = get<std::size_t>(merged, "batch_size");
  p.backbone_learning_rate = get<double>(merged, "backbone_learning_rate");
  p.head_learning_rate = get<double>(merged, "head_learning_rate");
  p.augment = get<bool>(merged, "augment");
  p.train_dropout = get<bool>(merged, "train_dropout");
  p.histogram_bins = get<std::size_t>(merged, "histogram_bins");
  p.kmeans_k = get<std::size_t>(merged, "kmeans_k");
  p.triplet.margin = get<double>(merged, "triplet_margin");
  p.triplet.batch_size = get<std::size_t>(merged, "triplet_batch_size");
  p.triplet.patience = get<std::size_t>(merged, "triplet_patience");
  p.triplet.max_epochs = get<std::size_t>(merged, "triplet_max_epochs");
  p.triplet.learning_rate = get<double>(merged, "triplet_learning_rate");
  p.cae_epochs = get<std::size_t>(merged, "cae_epochs");
  p.cae_learning_rate = get<double>(merged, "cae_learning_rate");
  p.random_inducing = get<bool>(merged, "random_inducing");
  p.backbone = BackboneConfig::from_json({{"input_shape", {1, c.image_size, c.image_size}},
                                          {"conv_stack", merged.at("conv_stack")},
                                          {"latent_dim", merged.at("latent_dim")},
                                          {"dropout_rate", merged.at("dropout_rate")},
                                          {"activation", merged.at("activation")}});
  c.validate();
  return c;
}

PipelineConfig RunConfig::pipeline_config() const {
  PipelineConfig p = pipeline;
  p.seed = seed;
  p.output_dim = task_output_dim(task);
  p.backbone.channels = 1;
  p.backbone.height = image_size;
  p.backbone.width = image_size;
  return p;
}

SyntheticSpec RunConfig::synthetic_spec() const {
  SyntheticSpec s;
  s.n = n;
  s.image_size = image_size;
  s.task = task;
  s.noise_level = noise_level;
  s.heteroscedastic = heteroscedastic;
  s.seed = seed;
  return s;
}

std::filesystem::path RunConfig::checkpoint_path() const {
  return checkpoint.empty() ? std::filesystem::path(output_dir) / "checkpoint.dkla" : std::filesystem::path(checkpoint);
}

nlohmann::json read_config_file(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open config '" + path.string() + "'");
  try {
    return nlohmann::json::parse(is);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("config '" + path.string() + "' is not valid JSON: " + e.what());
  }
}

void apply_overrides(nlohmann::json& config, const std::vector<std::string>& args) {
  const nlohmann::json defaults = RunConfig{}.to_json();
  for (std::size_t i = 0; i < args.size(); ++i) {
    const std::string& flag = args[i];
    if (flag.rfind("--", 0) != 0 || flag.size() == 2) throw ConfigError("unexpected argument '" + flag + "'");
    std::string key = flag.substr(2);
    std::string value;
    if (const auto eq = key.find('='); eq != std::string::npos) {
      value = key.substr(eq + 1);
      key.resize(eq);
    } else {
      if (i + 1 >= args.size()) throw ConfigError("override '" + flag + "' needs a value");
      value = args[++i];
    }
    if (!defaults.contains(key)) throw ConfigError("unknown config key '" + key + "'");
    if (defaults.at(key).is_string()) {
      config[key] = value;
      continue;
    }
    try {
      config[key] = nlohmann::json::parse(value);
    } catch (const nlohmann::json::parse_error&) {
      throw ConfigError("config key '" + key + "' has an invalid value: " + value);
    }
  }
}

RunConfig resolve_config(const std::filesystem::path& file, const std::vector<std::string>& overrides) {
  nlohmann::json j = file.empty() ? nlohmann::json::object() : read_config_file(file);
  if (!j.is_object()) throw ConfigError("config '" + file.string() + "' must hold a JSON object");
  apply_overrides(j, overrides);
  return RunConfig::from_json(j);
}

}  // namespace dkl::cli
