// Copyright 2026 The DKL Regression Authors
// SPDX-License-Identifier: Apache-2.0

// End-to-end training of a convolutional backbone with a sparse GP (or
// linear) output layer: optional transfer, optional pre-training, inducing
// initialisation from embeddings and joint fine-tuning, plus checkpoints.
//
// Targets are standardised per column with training-set statistics before
// the head sees them; predictions are reported in the original units.

#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include <nlohmann/json.hpp>

#include "dkl/backbone.hpp"
#include "dkl/data.hpp"
#include "dkl/kernels.hpp"
#include "dkl/pretrain.hpp"
#include "dkl/svgp.hpp"

namespace dkl {

enum class Pretraining { None, DML, CAE };
enum class HeadObjective { SVGP, PPGP, LinearMSE };

std::string_view pretraining_name(Pretraining p);
Pretraining parse_pretraining(std::string_view name);
std::string_view head_objective_name(HeadObjective o);
HeadObjective parse_head_objective(std::string_view name);

struct PipelineConfig {
  bool transfer = false;
  std::string transfer_path;
  Pretraining pretraining = Pretraining::None;
  HeadObjective objective = HeadObjective::PPGP;
  std::size_t output_dim = 1;
  std::size_t num_inducing = 64;
  BackboneConfig backbone;
  KernelKind kernel = KernelKind::RBF;
  double jitter = 1e-6;
  std::size_t epochs = 200;
  std::size_t batch_size = 64;
  double backbone_learning_rate = 1e-3;
  double head_learning_rate = 1e-2;
  bool augment = true;
  bool train_dropout = false;  // dropout active while fine-tuning
  std::uint64_t seed = 0;

  // Pre-training.
  std::size_t histogram_bins = 10;
  std::size_t kmeans_k = 8;
  TripletConfig triplet;  // its seed is derived from `seed`
  std::size_t cae_epochs = 10;
  double cae_learning_rate = 1e-3;

  // Test-only: draw inducing inputs from N(0, I) instead of embeddings.
  bool random_inducing = false;

  void validate() const;
  nlohmann::json to_json() const;
  static PipelineConfig from_json(const nlohmann::json& j);
};

struct TargetScaler {
  std::vector<double> mean, scale;

  static TargetScaler fit(const Tensor& targets);
  Tensor transform(const Tensor& targets) const;
  Tensor inverse_mean(const Tensor& mean) const;
  Tensor inverse_variance(const Tensor& variance) const;
};

struct TrainingLog {
  std::vector<std::string> stages;
  std::string labeling;  // "histogram" or "kmeans" when DML ran
  std::vector<double> epoch_objective;  // mean per-sample objective (higher is better)
  std::vector<double> val_rmse;         // entry 0 before fine-tuning
  std::size_t best_epoch = 0;
  std::vector<std::size_t> inducing_indices;  // training rows behind Z at init

  nlohmann::json to_json() const;
  static TrainingLog from_json(const nlohmann::json& j);
};

using Head = std::variant<MultiOutputSVGP, LinearHead>;

struct Checkpoint {
  PipelineConfig config;
  EncoderParams encoder;
  Head head;
  TargetScaler scaler;
  TrainingLog log;
};

/// Runs the transfer and pre-training stages only and returns the encoder.
EncoderParams prepare_encoder(const PipelineConfig& config, const Dataset& train, const Dataset& val,
                              TrainingLog& log);

/// Runs transfer, pre-training, inducing initialisation and fine-tuning.
/// Selects the epoch with the lowest validation RMSE. A failing stage is
/// rethrown as TrainingError naming the stage.
Checkpoint fine_tune_dkl(const PipelineConfig& config, const Dataset& train, const Dataset& val);

/// Predictive mean and variance of y (noise included) in target units. The
/// linear head reports zero variance.
PredictiveDistribution predict(const Checkpoint& checkpoint, const Tensor& images);

/// T dropout passes through the encoder and linear head, in target units.
PredictiveDistribution predict_mc_dropout(const Checkpoint& checkpoint, const Tensor& images, std::size_t passes,
                                          std::uint64_t base_seed);

void save_checkpoint(const Checkpoint& checkpoint, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Smooths the per-epoch objective with a sliding mean over `window` epochs
/// and counts runs of more than `max_consecutive` successive decreases; zero
/// is healthy.
std::size_t objective_health_violations(const std::vector<double>& epoch_objective, std::size_t window = 10,
                                        std::size_t max_consecutive = 3);

}  // namespace dkl
