// Copyright 2026 The DKL Regression Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "run_config.hpp"

namespace dkl::cli {

/// Writes a synthetic dataset into `dataset_dir`.
void cmd_generate(const RunConfig& config);

/// Runs transfer and pre-training on the training folds and writes
/// `<output_dir>/encoder.dkla`.
void cmd_pretrain(const RunConfig& config);

/// Trains on the configured fold and writes the checkpoint and training log.
void cmd_train(const RunConfig& config);

/// Evaluates the checkpoint on the held-out test split and writes
/// summary.json and qp_table.csv into `output_dir`.
void cmd_eval(const RunConfig& config);

/// Writes `<output_dir>/predictions.csv` for every sample of the dataset.
void cmd_predict(const RunConfig& config);

/// Parses argv-style arguments (without the program name), runs the
/// subcommand and returns the exit status. Errors are reported as a single
/// JSON line on stderr.
int run(const std::vector<std::string>& args);

}  // namespace dkl::cli
