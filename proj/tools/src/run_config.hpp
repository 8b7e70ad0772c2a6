// Copyright 2026 The DKL Regression Authors
// SPDX-License-Identifier: Apache-2.0

// Flat JSON run configuration shared by every subcommand of the `dkl` tool.

#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "dkl/data.hpp"
#include "dkl/pipeline.hpp"

namespace dkl::cli {

struct RunConfig {
  std::uint64_t seed = 0;

  // Dataset.
  std::string dataset_dir = "data";
  TaskKind task = TaskKind::BlobRadius;
  std::size_t n = 1000;
  std::size_t image_size = 32;
  double noise_level = 0.02;
  bool heteroscedastic = false;
  std::size_t folds = 5;
  std::size_t fold = 0;

  // Outputs.
  std::string output_dir = "out";
  std::string checkpoint;  // empty means <output_dir>/checkpoint.dkla

  // Evaluation.
  std::size_t quantile_levels = 10;
  std::size_t mc_passes = 50;
  std::vector<std::string> methods{"model"};  // "model" and/or "mc_dropout"

  // Training; output_dim, seed and the image geometry follow the keys above.
  PipelineConfig pipeline;

  void validate() const;
  nlohmann::json to_json() const;
  static RunConfig from_json(const nlohmann::json& j);

  PipelineConfig pipeline_config() const;
  SyntheticSpec synthetic_spec() const;
  std::filesystem::path checkpoint_path() const;
};

/// Reads a JSON object from `path`; throws IoError or ConfigError.
nlohmann::json read_config_file(const std::filesystem::path& path);

/// Applies `--key value` pairs to a flat config object. Values of keys that
/// hold strings are taken verbatim; everything else is parsed as JSON.
void apply_overrides(nlohmann::json& config, const std::vector<std::string>& args);

/// File contents, defaults and overrides merged and validated.
RunConfig resolve_config(const std::filesystem::path& file, const std::vector<std::string>& overrides);

}  // namespace dkl::cli
