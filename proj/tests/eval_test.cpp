// Copyright 2026 The DKL Regression Authors
// SPDX-License-Identifier: Apache-2.0

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include <gtest/gtest.h>

#include "dkl/errors.hpp"
#include "dkl/eval.hpp"
#include "dkl/random.hpp"

namespace dkl {
namespace {

std::filesystem::path temp_dir(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / "dkl_eval_test" / name;
  std::filesystem::remove_all(dir);
  return dir;
}

PredictiveDistribution make_prediction(std::vector<double> mean, std::vector<double> variance) {
  const std::size_t n = mean.size();
  return {Tensor({n, 1}, std::move(mean)), Tensor({n, 1}, std::move(variance))};
}

TEST(Rmse, HandExample) {
  const Tensor p({2, 2}, {1.0, 2.0, 3.0, 4.0});
  const Tensor t({2, 2}, {1.0, 0.0, 3.0, 0.0});
  // errors 0, 2, 0, 4: mean square 5
  EXPECT_DOUBLE_EQ(rmse(p, t), std::sqrt(5.0));
  EXPECT_THROW(rmse(p, Tensor({2, 1})), ShapeError);
}

TEST(Rmse, PermutationInvariant) {
  Rng rng(4);
  std::normal_distribution<double> normal;
  Tensor p({50, 2}), t({50, 2});
  for (std::size_t i = 0; i < p.size(); ++i) {
    p[i] = normal(rng);
    t[i] = normal(rng);
  }
  const std::vector<std::size_t> perm = permutation(50, rng);
  EXPECT_NEAR(rmse(p.gather_rows(perm), t.gather_rows(perm)), rmse(p, t), 1e-14);
}

TEST(QuantilePerformance, HandExample) {
  // Variances 1..4 with errors 0, 1, 1, 2.
  const PredictiveDistribution pred = make_prediction({0.0, 1.0, 1.0, 2.0}, {1.0, 2.0, 3.0, 4.0});
  const Tensor targets({4, 1}, {0.0, 0.0, 0.0, 0.0});
  const QPCurve c = quantile_performance(pred, targets, 2);
  ASSERT_EQ(c.rmse.size(), 2u);
  EXPECT_EQ(c.quantile_levels, (std::vector<double>{0.5, 1.0}));
  EXPECT_EQ(c.counts, (std::vector<std::size_t>{2, 4}));
  EXPECT_DOUBLE_EQ(c.rmse[0], std::sqrt(0.5));
  EXPECT_DOUBLE_EQ(c.rmse[1], std::sqrt(1.5));
  EXPECT_FALSE(c.constant_variance);
}

TEST(QuantilePerformance, SingleLevelEqualsRmse) {
  const PredictiveDistribution pred = make_prediction({0.0, 1.0, 1.0, 2.0}, {1.0, 2.0, 3.0, 4.0});
  const Tensor targets({4, 1}, {0.5, 0.0, -1.0, 0.0});
  const QPCurve c = quantile_performance(pred, targets, 1);
  EXPECT_DOUBLE_EQ(c.rmse[0], rmse(pred.mean, targets));
}

TEST(QuantilePerformance, LastLevelIsFullRmseAndCountsGrow) {
  Rng rng(5);
  std::normal_distribution<double> normal;
  const std::size_t n = 37;
  std::vector<double> m(n), v(n);
  Tensor t({n, 1});
  for (std::size_t i = 0; i < n; ++i) {
    m[i] = normal(rng);
    v[i] = std::exp(normal(rng));
    t[i] = normal(rng);
  }
  const PredictiveDistribution pred = make_prediction(m, v);
  const QPCurve c = quantile_performance(pred, t, 10);
  EXPECT_NEAR(c.rmse.back(), rmse(pred.mean, t), 1e-14);
  EXPECT_EQ(c.counts.back(), n);
  for (std::size_t k = 0; k < 10; ++k) {
    EXPECT_EQ(c.counts[k], (n * (k + 1) + 9) / 10);
    if (k > 0) EXPECT_GE(c.counts[k], c.counts[k - 1]);
  }
}

TEST(QuantilePerformance, InvariantToVarianceScaling) {
  const PredictiveDistribution pred = make_prediction({0.3, 1.0, -1.0, 2.0, 0.0}, {0.5, 2.0, 3.0, 0.1, 7.0});
  PredictiveDistribution scaled = pred;
  for (double& v : scaled.variance.values()) v *= 123.0;
  const Tensor t({5, 1}, {0.0, 0.0, 0.0, 0.0, 0.0});
  const QPCurve a = quantile_performance(pred, t, 5), b = quantile_performance(scaled, t, 5);
  EXPECT_EQ(a.rmse, b.rmse);
  EXPECT_EQ(a.counts, b.counts);
}

TEST(QuantilePerformance, ConstantVarianceIsFlat) {
  const PredictiveDistribution pred = make_prediction({0.0, 1.0, 2.0, 3.0}, {0.0, 0.0, 0.0, 0.0});
  const Tensor t({4, 1}, {1.0, 1.0, 1.0, 1.0});
  const QPCurve c = quantile_performance(pred, t, 4);
  EXPECT_TRUE(c.constant_variance);
  for (double r : c.rmse) EXPECT_DOUBLE_EQ(r, c.rmse.back());
  for (std::size_t k : c.counts) EXPECT_EQ(k, 4u);
}

TEST(QuantilePerformance, TiesIncludedTogether) {
  const PredictiveDistribution pred = make_prediction({1.0, 2.0, 3.0, 4.0}, {1.0, 1.0, 1.0, 5.0});
  const QPCurve c = quantile_performance(pred, Tensor({4, 1}), 4);
  EXPECT_EQ(c.counts, (std::vector<std::size_t>{3, 3, 3, 4}));
}

TEST(QuantilePerformance, CalibratedModelIsNonDecreasing) {
  Rng rng(6);
  std::normal_distribution<double> normal;
  const std::size_t n = 20000;
  std::vector<double> m(n, 0.0), v(n);
  Tensor t({n, 1});
  for (std::size_t i = 0; i < n; ++i) {
    v[i] = 0.01 + 4.0 * static_cast<double>(i) / static_cast<double>(n);
    t[i] = std::sqrt(v[i]) * normal(rng);
  }
  const QPCurve c = quantile_performance(make_prediction(m, v), t, 10);
  for (std::size_t k = 1; k < c.rmse.size(); ++k) EXPECT_GE(c.rmse[k], c.rmse[k - 1]);
}

TEST(QuantilePerformance, MultiOutputUsesMeanVariance) {
  const PredictiveDistribution pred{Tensor({2, 2}, {0.0, 0.0, 1.0, 1.0}), Tensor({2, 2}, {1.0, 3.0, 2.5, 2.5})};
  // mean variances 2 and 2.5
  const QPCurve c = quantile_performance(pred, Tensor({2, 2}), 2);
  EXPECT_EQ(c.counts, (std::vector<std::size_t>{1, 2}));
  EXPECT_DOUBLE_EQ(c.rmse[0], 0.0);
  EXPECT_DOUBLE_EQ(c.rmse[1], std::sqrt(0.5));
}

TEST(QuantilePerformance, RejectsBadArguments) {
  const PredictiveDistribution pred = make_prediction({0.0, 1.0}, {1.0, 2.0});
  EXPECT_THROW(quantile_performance(pred, Tensor({2, 1}), 0), InvalidArgument);
  EXPECT_THROW(quantile_performance(pred, Tensor({2, 1}), 3), InvalidArgument);
  EXPECT_THROW(quantile_performance(pred, Tensor({3, 1}), 1), ShapeError);
}

class McDropout : public ::testing::Test {
 protected:
  BackboneConfig config() const {
    BackboneConfig c;
    c.height = 8;
    c.width = 8;
    c.conv_stack = {{4, 3, 2}};
    c.latent_dim = 3;
    return c;
  }
  Tensor inputs() const {
    Rng rng(9);
    std::uniform_real_distribution<double> u;
    Tensor x({5, 1, 8, 8});
    for (double& v : x.values()) v = u(rng);
    return x;
  }
};

TEST_F(McDropout, ZeroRateGivesZeroVariance) {
  BackboneConfig c = config();
  c.dropout_rate = 0.0;
  const EncoderParams enc = init_encoder(c, 1);
  const LinearHead head = init_linear_head(3, 2, 2);
  const Tensor x = inputs();
  const PredictiveDistribution p = mc_dropout_predict(enc, head, x, 10, 0);
  const Tensor det = apply_linear_head(head, encode(enc, x));
  for (std::size_t i = 0; i < det.size(); ++i) {
    EXPECT_NEAR(p.mean[i], det[i], 1e-12);
    EXPECT_NEAR(p.variance[i], 0.0, 1e-20);
  }
}

TEST_F(McDropout, RunsExactlyTPasses) {
  const EncoderParams enc = init_encoder(config(), 1);
  const LinearHead head = init_linear_head(3, 1, 2);
  reset_encoder_pass_count();
  mc_dropout_predict(enc, head, inputs(), 7, 0);
  EXPECT_EQ(encoder_pass_count(), 7u);
  EXPECT_THROW(mc_dropout_predict(enc, head, inputs(), 1, 0), InvalidArgument);
}

TEST_F(McDropout, MatchesTwoPassOracleAndIsReproducible) {
  const EncoderParams enc = init_encoder(config(), 1);
  const LinearHead head = init_linear_head(3, 1, 2);
  const Tensor x = inputs();
  const PredictiveDistribution a = mc_dropout_predict(enc, head, x, 6, 42);
  const PredictiveDistribution b = mc_dropout_predict(enc, head, x, 6, 42);
  std::vector<Tensor> samples;
  for (std::uint64_t t = 0; t < 6; ++t) {
    samples.push_back(apply_linear_head(head, encode_dropout_sample(enc, x, 0.2, 42 + t)));
  }
  for (std::size_t i = 0; i < a.mean.size(); ++i) {
    EXPECT_EQ(a.mean[i], b.mean[i]);
    EXPECT_EQ(a.variance[i], b.variance[i]);
    double mean = 0.0;
    for (const Tensor& s : samples) mean += s[i] / 6.0;
    double ss = 0.0;
    for (const Tensor& s : samples) ss += (s[i] - mean) * (s[i] - mean);
    EXPECT_NEAR(a.mean[i], mean, 1e-12);
    EXPECT_NEAR(a.variance[i], ss / 5.0, 1e-12);
  }
}

TEST(Spearman, KnownValues) {
  EXPECT_DOUBLE_EQ(spearman({1, 2, 3, 4}, {10, 20, 30, 40}), 1.0);
  EXPECT_DOUBLE_EQ(spearman({1, 2, 3, 4}, {4, 3, 2, 1}), -1.0);
  // ranks (1.5, 1.5, 3) and (1, 2, 3): correlation sqrt(3)/2
  EXPECT_NEAR(spearman({5, 5, 7}, {1, 2, 3}), std::sqrt(3.0) / 2.0, 1e-15);
  EXPECT_EQ(spearman({1, 1, 1}, {1, 2, 3}), 0.0);
  EXPECT_THROW(spearman({1}, {1}), InvalidArgument);
}

TEST(Aggregate, MeanAndSampleStd) {
  QPCurve a, b;
  a.quantile_levels = b.quantile_levels = {0.5, 1.0};
  a.rmse = {1.0, 2.0};
  b.rmse = {3.0, 2.0};
  const AggregatedCurve agg = aggregate_curves({a, b});
  EXPECT_EQ(agg.mean, (std::vector<double>{2.0, 2.0}));
  EXPECT_DOUBLE_EQ(agg.stddev[0], std::sqrt(2.0));
  EXPECT_DOUBLE_EQ(agg.stddev[1], 0.0);
  b.rmse = {1.0};
  EXPECT_THROW(aggregate_curves({a, b}), InvalidArgument);
  EXPECT_THROW(aggregate_curves({}), InvalidArgument);
}

EvalReport sample_report() {
  EvalReport r;
  r.config = {{"seed", 3}};
  for (const char* name : {"dkl_ppgp", "mc_dropout"}) {
    MethodResult m;
    m.method = name;
    m.curve = quantile_performance(make_prediction({0.1, 1.0 / 3.0, 2.0}, {1.0, 2.0, 3.0}), Tensor({3, 1}), 3);
    m.rmse = m.curve.rmse.back();
    m.seconds = 0.25;
    m.encoder_passes = 3;
    r.methods.push_back(m);
  }
  return r;
}

TEST(Report, RoundTripsQpTable) {
  const auto dir = temp_dir("roundtrip");
  const EvalReport r = sample_report();
  export_report(r, dir);
  EXPECT_TRUE(std::filesystem::exists(dir / "summary.json"));
  const auto table = read_qp_table(dir / "qp_table.csv");
  ASSERT_EQ(table.size(), 2u);
  for (const MethodResult& m : r.methods) {
    const QPCurve& c = table.at(m.method);
    EXPECT_EQ(c.rmse, m.curve.rmse);
    EXPECT_EQ(c.quantile_levels, m.curve.quantile_levels);
    EXPECT_EQ(c.counts, m.curve.counts);
  }
  std::ifstream is(dir / "summary.json");
  const nlohmann::json j = nlohmann::json::parse(is);
  EXPECT_EQ(j["config"]["seed"], 3);
  EXPECT_EQ(j["methods"][1]["method"], "mc_dropout");
}

TEST(Report, RejectsBadInput) {
  EvalReport r = sample_report();
  r.methods[0].method = "a,b";
  EXPECT_THROW(export_report(r, temp_dir("comma")), InvalidArgument);
  const auto blocker = temp_dir("blocker");
  std::filesystem::create_directories(blocker.parent_path());
  std::ofstream(blocker) << "x";
  EXPECT_THROW(export_report(sample_report(), blocker / "sub"), IoError);
  const auto bad = temp_dir("bad");
  std::filesystem::create_directories(bad);
  std::ofstream(bad / "qp_table.csv") << "method,q\n";
  EXPECT_THROW(read_qp_table(bad / "qp_table.csv"), CorruptFileError);
  std::ofstream(bad / "qp_table.csv") << "method,quantile_level,rmse,n_samples\nx,0.1,abc,3\n";
  EXPECT_THROW(read_qp_table(bad / "qp_table.csv"), CorruptFileError);
}

}  // namespace
}  // namespace dkl
