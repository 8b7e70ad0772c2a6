// Copyright 2026 The DKL Regression Authors
// SPDX-License-Identifier: Apache-2.0

// Point-estimate metrics, quantile-performance curves over predictive
// variance, the MC-Dropout predictor and report files.

#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dkl/backbone.hpp"
#include "dkl/kernels.hpp"
#include "dkl/tensor.hpp"

namespace dkl {

/// Root mean squared error over every entry of two (n x d) tensors.
double rmse(const Tensor& predictions, const Tensor& targets);

struct QPCurve {
  std::vector<double> quantile_levels;  // k / K, k = 1..K
  std::vector<double> rmse;
  std::vector<std::size_t> counts;
  bool constant_variance = false;
};

/// RMSE over the samples whose variance (mean over outputs) is at most the
/// k/K order statistic, at index ceil(n k / K) - 1 of the sorted variances.
QPCurve quantile_performance(const PredictiveDistribution& prediction, const Tensor& targets, std::size_t K = 10);

/// T stochastic passes with seeds base_seed .. base_seed + T - 1 at the
/// encoder's dropout rate; mean and unbiased variance per output.
PredictiveDistribution mc_dropout_predict(const EncoderParams& encoder, const LinearHead& head, const Tensor& x,
                                          std::size_t passes = 50, std::uint64_t base_seed = 0);

/// Spearman rank correlation with average ranks for ties.
double spearman(const std::vector<double>& a, const std::vector<double>& b);

struct MethodResult {
  std::string method;
  double rmse = 0.0;
  QPCurve curve;
  double seconds = 0.0;          // wall-clock inference time
  std::uint64_t encoder_passes = 0;
};

struct EvalReport {
  std::vector<MethodResult> methods;
  nlohmann::json config = nlohmann::json::object();

  nlohmann::json summary() const;
};

/// Writes summary.json and qp_table.csv into `dir`.
void export_report(const EvalReport& report, const std::filesystem::path& dir);

/// Parses a table written by export_report, keyed by method.
std::map<std::string, QPCurve> read_qp_table(const std::filesystem::path& path);

struct AggregatedCurve {
  std::vector<double> quantile_levels;
  std::vector<double> mean;
  std::vector<double> stddev;  // sample standard deviation across curves
};

/// Mean and standard deviation per level across folds with equal K.
AggregatedCurve aggregate_curves(const std::vector<QPCurve>& curves);

}  // namespace dkl
