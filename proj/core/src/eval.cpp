// Copyright 2026 The DKL Regression Authors
// SPDX-License-Identifier: Apache-2.0

#include "dkl/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>

#include "dkl/errors.hpp"

namespace dkl {
namespace {

constexpr const char* kQpHeader = "method,quantile_level,rmse,n_samples";

std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::vector<double> average_ranks(const std::vector<double>& v) {
  std::vector<std::size_t> order(v.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> ranks(v.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && v[order[j + 1]] == v[order[i]]) ++j;
    const double r = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = r;
    i = j + 1;
  }
  return ranks;
}

}  // namespace

double rmse(const Tensor& predictions, const Tensor& targets) {
  if (predictions.shape() != targets.shape()) {
    throw ShapeError("rmse shapes differ: " + shape_to_string(predictions.shape()) + " vs " +
                     shape_to_string(targets.shape()));
  }
  if (targets.rank() == 0 || targets.dim(0) == 0) throw InvalidArgument("rmse needs at least one sample");
  double s = 0.0;
  for (std::size_t i = 0; i < targets.size(); ++i) {
    const double e = predictions[i] - targets[i];
    s += e * e;
  }
  return std::sqrt(s / static_cast<double>(targets.size()));
}

QPCurve quantile_performance(const PredictiveDistribution& prediction, const Tensor& targets, std::size_t K) {
  if (prediction.mean.shape() != targets.shape() || prediction.variance.shape() != targets.shape() ||
      targets.rank() != 2) {
    throw ShapeError("prediction " + shape_to_string(prediction.mean.shape()) + " / " +
                     shape_to_string(prediction.variance.shape()) + " does not match targets " +
                     shape_to_string(targets.shape()));
  }
  const std::size_t n = targets.dim(0), d = targets.dim(1);
  if (K < 1 || n < K) {
    throw InvalidArgument("quantile performance needs 1 <= K <= n, got K = " + std::to_string(K) + " and n = " +
                          std::to_string(n));
  }
  std::vector<double> var(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < d; ++j) var[i] += prediction.variance.at(i, j);
    var[i] /= static_cast<double>(d);
  }
  std::vector<double> sorted = var;
  std::sort(sorted.begin(), sorted.end());

  QPCurve curve;
  curve.constant_variance = sorted.front() == sorted.back();
  for (std::size_t k = 1; k <= K; ++k) {
    const double threshold = sorted[(n * k + K - 1) / K - 1];
    double s = 0.0;
    std::size_t count = 0;
    for (std::size_t i = 0; i < n; ++i) {
      if (var[i] > threshold) continue;
      ++count;
      for (std::size_t j = 0; j < d; ++j) {
        const double e = prediction.mean.at(i, j) - targets.at(i, j);
        s += e * e;
      }
    }
    curve.quantile_levels.push_back(static_cast<double>(k) / static_cast<double>(K));
    curve.rmse.push_back(std::sqrt(s / static_cast<double>(count * d)));
    curve.counts.push_back(count);
  }
  return curve;
}

PredictiveDistribution mc_dropout_predict(const EncoderParams& encoder, const LinearHead& head, const Tensor& x,
                                          std::size_t passes, std::uint64_t base_seed) {
  if (passes < 2) throw InvalidArgument("MC dropout needs at least 2 passes, got " + std::to_string(passes));
  const double rate = encoder.config.dropout_rate;
  PredictiveDistribution out;
  Tensor m2;
  for (std::size_t t = 0; t < passes; ++t) {
    const Tensor y = apply_linear_head(head, encode_dropout_sample(encoder, x, rate, base_seed + t));
    if (t == 0) {
      out.mean = Tensor(y.shape());
      m2 = Tensor(y.shape());
    }
    const double count = static_cast<double>(t + 1);
    for (std::size_t i = 0; i < y.size(); ++i) {
      const double delta = y[i] - out.mean[i];
      out.mean[i] += delta / count;
      m2[i] += delta * (y[i] - out.mean[i]);
    }
  }
  out.variance = m2;
  for (double& v : out.variance.values()) v /= static_cast<double>(passes - 1);
  return out;
}

double spearman(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size() || a.size() < 2) throw InvalidArgument("spearman needs two equal-length series of size >= 2");
  const std::vector<double> ra = average_ranks(a), rb = average_ranks(b);
  const double n = static_cast<double>(a.size());
  const double ma = std::accumulate(ra.begin(), ra.end(), 0.0) / n;
  const double mb = std::accumulate(rb.begin(), rb.end(), 0.0) / n;
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < ra.size(); ++i) {
    sab += (ra[i] - ma) * (rb[i] - mb);
    saa += (ra[i] - ma) * (ra[i] - ma);
    sbb += (rb[i] - mb) * (rb[i] - mb);
  }
  if (saa == 0.0 || sbb == 0.0) return 0.0;
  return sab / std::sqrt(saa * sbb);
}

nlohmann::json EvalReport::summary() const {
  nlohmann::json methods_json = nlohmann::json::array();
  for (const MethodResult& m : methods) {
    methods_json.push_back({{"method", m.method},
                            {"rmse", m.rmse},
                            {"seconds", m.seconds},
                            {"encoder_passes", m.encoder_passes},
                            {"constant_variance", m.curve.constant_variance},
                            {"quantile_levels", m.curve.quantile_levels},
                            {"rmse_at_quantile", m.curve.rmse},
                            {"counts", m.curve.counts}});
  }
  return {{"config", config}, {"methods", methods_json}};
}

void export_report(const EvalReport& report, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create '" + dir.string() + "': " + ec.message());
  for (const MethodResult& m : report.methods) {
    if (m.method.empty() || m.method.find_first_of(",\n\r\"") != std::string::npos) {
      throw InvalidArgument("method name '" + m.method + "' cannot be written to a comma-separated table");
    }
  }
  {
    std::ofstream os(dir / "summary.json", std::ios::trunc);
    if (!os) throw IoError("cannot open '" + (dir / "summary.json").string() + "' for writing");
    os << report.summary().dump(2) << '\n';
    if (!os) throw IoError("write to '" + (dir / "summary.json").string() + "' failed");
  }
  std::ofstream os(dir / "qp_table.csv", std::ios::trunc);
  if (!os) throw IoError("cannot open '" + (dir / "qp_table.csv").string() + "' for writing");
  os << kQpHeader << '\n';
  for (const MethodResult& m : report.methods) {
    for (std::size_t k = 0; k < m.curve.rmse.size(); ++k) {
      os << m.method << ',' << format_double(m.curve.quantile_levels[k]) << ',' << format_double(m.curve.rmse[k])
         << ',' << m.curve.counts[k] << '\n';
    }
  }
  if (!os) throw IoError("write to '" + (dir / "qp_table.csv").string() + "' failed");
}

std::map<std::string, QPCurve> read_qp_table(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open '" + path.string() + "'");
  std::string line;
  if (!std::getline(is, line) || line != kQpHeader) {
    throw CorruptFileError("'" + path.string() + "' does not start with '" + kQpHeader + "'");
  }
  std::map<std::string, QPCurve> out;
  std::size_t line_no = 1;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::vector<std::string> fields;
    std::stringstream ss(line);
    std::string f;
    while (std::getline(ss, f, ',')) fields.push_back(f);
    if (fields.size() != 4) {
      throw CorruptFileError("line " + std::to_string(line_no) + " of '" + path.string() + "' has " +
                             std::to_string(fields.size()) + " fields");
    }
    try {
      QPCurve& c = out[fields[0]];
      c.quantile_levels.push_back(std::stod(fields[1]));
      c.rmse.push_back(std::stod(fields[2]));
      c.counts.push_back(static_cast<std::size_t>(std::stoull(fields[3])));
    } catch (const std::logic_error&) {
      throw CorruptFileError("line " + std::to_string(line_no) + " of '" + path.string() + "' is not numeric");
    }
  }
  return out;
}

AggregatedCurve aggregate_curves(const std::vector<QPCurve>& curves) {
  if (curves.empty()) throw InvalidArgument("no curves to aggregate");
  const std::size_t K = curves.front().rmse.size();
  for (const QPCurve& c : curves) {
    if (c.rmse.size() != K) throw InvalidArgument("curves have different numbers of quantile levels");
  }
  AggregatedCurve out;
  out.quantile_levels = curves.front().quantile_levels;
  const double n = static_cast<double>(curves.size());
  for (std::size_t k = 0; k < K; ++k) {
    double mean = 0.0;
    for (const QPCurve& c : curves) mean += c.rmse[k] / n;
    double ss = 0.0;
    for (const QPCurve& c : curves) ss += (c.rmse[k] - mean) * (c.rmse[k] - mean);
    out.mean.push_back(mean);
    out.stddev.push_back(curves.size() > 1 ? std::sqrt(ss / (n - 1.0)) : 0.0);
  }
  return out;
}

}  // namespace dkl
