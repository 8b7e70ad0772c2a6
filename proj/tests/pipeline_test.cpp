// Copyright 2026 The DKL Regression Authors
// SPDX-License-Identifier: Apache-2.0

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <limits>

#include <gtest/gtest.h>
#include <spdlog/spdlog.h>

#include "dkl/archive.hpp"
#include "dkl/errors.hpp"
#include "dkl/eval.hpp"
#include "dkl/optim.hpp"
#include "dkl/pipeline.hpp"
#include "dkl/random.hpp"

namespace dkl {
namespace {

std::filesystem::path temp_path(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / "dkl_pipeline_test";
  std::filesystem::create_directories(dir);
  return dir / name;
}

struct Splits {
  Dataset train, val, test;
};

Splits small_splits(TaskKind task, std::size_t n, std::uint64_t seed) {
  SyntheticSpec spec;
  spec.n = n;
  spec.image_size = 16;
  spec.task = task;
  spec.seed = seed;
  const Dataset ds = generate_blob_dataset(spec);
  const CVSplit split = split_cv(n, 4, seed);
  const auto [train, val] = split.fold(0);
  return {ds.subset(train), ds.subset(val), ds.subset(split.test)};
}

PipelineConfig small_config(std::size_t d = 1) {
  PipelineConfig c;
  c.backbone.height = 16;
  c.backbone.width = 16;
  c.backbone.conv_stack = {{8, 3, 2}, {16, 3, 2}};
  c.output_dim = d;
  c.num_inducing = 16;
  c.epochs = 2;
  c.batch_size = 32;
  c.triplet.max_epochs = 2;
  c.cae_epochs = 1;
  c.seed = 3;
  return c;
}

void expect_same(const Tensor& a, const Tensor& b) {
  ASSERT_EQ(a.shape(), b.shape());
  for (std::size_t i = 0; i < a.size(); ++i) ASSERT_EQ(a[i], b[i]) << "entry " << i;
}

class Quiet : public ::testing::Test {
 protected:
  void SetUp() override { spdlog::set_level(spdlog::level::warn); }
};

using Adam = Quiet;
using Pipeline = Quiet;
using CheckpointIo = Quiet;

TEST_F(Adam, ZeroGradientLeavesParameters) {
  std::vector<Tensor> p{Tensor({2}, {1.0, -2.0})};
  AdamState s;
  for (int i = 0; i < 3; ++i) EXPECT_TRUE(adam_step(p, {Tensor({2})}, s, 0.1));
  EXPECT_EQ(p[0][0], 1.0);
  EXPECT_EQ(p[0][1], -2.0);
}

TEST_F(Adam, FirstStepHasMagnitudeLr) {
  for (double g : {3.0, -0.25}) {
    std::vector<Tensor> p{Tensor::scalar(1.0)};
    AdamState s;
    adam_step(p, {Tensor::scalar(g)}, s, 0.01);
    // m_hat = g, v_hat = g^2, so the step is lr * g / (|g| + eps).
    EXPECT_NEAR(p[0].item(), 1.0 - 0.01 * g / (std::abs(g) + 1e-8), 1e-15);
    adam_step(p, {Tensor::scalar(g)}, s, 0.01);
    EXPECT_NEAR(p[0].item(), 1.0 - 2.0 * 0.01 * g / (std::abs(g) + 1e-8), 1e-12);
  }
}

TEST_F(Adam, NonFiniteGradientSkipsStep) {
  std::vector<Tensor> p{Tensor({2}, {1.0, 2.0})};
  AdamState s;
  EXPECT_FALSE(adam_step(p, {Tensor({2}, {1.0, std::numeric_limits<double>::quiet_NaN()})}, s, 0.1));
  EXPECT_EQ(s.t, 0u);
  EXPECT_EQ(p[0][0], 1.0);
  EXPECT_THROW(adam_step(p, {Tensor({3})}, s, 0.1), ShapeError);
  EXPECT_THROW(adam_step(p, {}, s, 0.1), ShapeError);
}

TEST_F(Adam, DeterministicTrajectory) {
  auto run = [] {
    std::vector<Tensor> p{Tensor({3}, {0.5, -1.0, 2.0})};
    AdamState s;
    for (int i = 0; i < 20; ++i) {
      Tensor g({3});
      for (std::size_t j = 0; j < 3; ++j) g[j] = 2.0 * p[0][j] - 1.0;
      adam_step(p, {g}, s, 0.05);
    }
    return p[0];
  };
  expect_same(run(), run());
}

TEST(PipelineConfig, JsonRoundTripAndValidation) {
  PipelineConfig c = small_config(4);
  c.pretraining = Pretraining::DML;
  c.objective = HeadObjective::SVGP;
  c.kernel = KernelKind::Matern52;
  const PipelineConfig back = PipelineConfig::from_json(c.to_json());
  EXPECT_EQ(back.to_json(), c.to_json());
  c.transfer = true;
  EXPECT_THROW(c.validate(), ConfigError);
  c = small_config();
  c.num_inducing = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = small_config();
  c.output_dim = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  EXPECT_THROW(parse_pretraining("imagenet"), ConfigError);
  EXPECT_THROW(parse_head_objective("mse"), ConfigError);
}

TEST(TargetScaler, StandardisesAndInverts) {
  const Tensor y({4, 2}, {1.0, 10.0, 3.0, 10.0, 5.0, 10.0, 7.0, 10.0});
  const TargetScaler s = TargetScaler::fit(y);
  EXPECT_DOUBLE_EQ(s.mean[0], 4.0);
  EXPECT_DOUBLE_EQ(s.scale[0], std::sqrt(5.0));
  EXPECT_DOUBLE_EQ(s.scale[1], 1.0);
  const Tensor z = s.transform(y);
  const Tensor back = s.inverse_mean(z);
  for (std::size_t i = 0; i < y.size(); ++i) EXPECT_NEAR(back[i], y[i], 1e-12);
  EXPECT_DOUBLE_EQ(s.inverse_variance(Tensor({1, 2}, {2.0, 3.0}))[0], 10.0);
}

TEST_F(Pipeline, NoPretrainingRunsInducingAndFineTuningOnly) {
  const Splits s = small_splits(TaskKind::BlobRadius, 120, 1);
  const Checkpoint cp = fine_tune_dkl(small_config(), s.train, s.val);
  EXPECT_EQ(cp.log.stages, (std::vector<std::string>{"inducing-init", "fine-tuning"}));
  EXPECT_TRUE(cp.log.labeling.empty());
  EXPECT_EQ(cp.log.epoch_objective.size(), 2u);
  EXPECT_EQ(cp.log.val_rmse.size(), 3u);
  ASSERT_TRUE(std::holds_alternative<MultiOutputSVGP>(cp.head));
  EXPECT_EQ(std::get<MultiOutputSVGP>(cp.head).heads[0].objective, ObjectiveKind::PPGP);
}

TEST_F(Pipeline, DmlWithFourOutputsUsesKMeans) {
  const Splits s = small_splits(TaskKind::BlobBbox, 120, 2);
  PipelineConfig c = small_config(4);
  c.pretraining = Pretraining::DML;
  const Checkpoint cp = fine_tune_dkl(c, s.train, s.val);
  EXPECT_EQ(cp.log.stages, (std::vector<std::string>{"dml-pretraining", "inducing-init", "fine-tuning"}));
  EXPECT_EQ(cp.log.labeling, "kmeans");
  EXPECT_EQ(std::get<MultiOutputSVGP>(cp.head).output_dim(), 4u);
  EXPECT_EQ(predict(cp, s.test.images).mean.shape(), (Shape{s.test.size(), 4}));
}

TEST_F(Pipeline, DmlWithOneOutputUsesHistogram) {
  const Splits s = small_splits(TaskKind::BlobRadius, 120, 2);
  PipelineConfig c = small_config();
  c.pretraining = Pretraining::DML;
  c.epochs = 0;
  EXPECT_EQ(fine_tune_dkl(c, s.train, s.val).log.labeling, "histogram");
}

TEST_F(Pipeline, CaePretrainingStage) {
  const Splits s = small_splits(TaskKind::BlobRadius, 120, 2);
  PipelineConfig c = small_config();
  c.pretraining = Pretraining::CAE;
  c.epochs = 1;
  const Checkpoint cp = fine_tune_dkl(c, s.train, s.val);
  EXPECT_EQ(cp.log.stages.front(), "cae-pretraining");
}

TEST_F(Pipeline, LinearObjectiveHasNoGpStages) {
  const Splits s = small_splits(TaskKind::BlobRadius, 120, 3);
  PipelineConfig c = small_config();
  c.objective = HeadObjective::LinearMSE;
  const Checkpoint cp = fine_tune_dkl(c, s.train, s.val);
  EXPECT_EQ(cp.log.stages, (std::vector<std::string>{"fine-tuning"}));
  ASSERT_TRUE(std::holds_alternative<LinearHead>(cp.head));
  const PredictiveDistribution p = predict(cp, s.test.images);
  for (double v : p.variance.values()) EXPECT_EQ(v, 0.0);
}

TEST_F(Pipeline, TransferLoadsEncoder) {
  const Splits s = small_splits(TaskKind::BlobRadius, 120, 4);
  PipelineConfig c = small_config();
  const EncoderParams source = init_encoder(c.backbone, 777);
  const auto path = temp_path("transfer.dkla");
  save_params(source, path);
  c.transfer = true;
  c.transfer_path = path.string();
  c.epochs = 0;
  const Checkpoint cp = fine_tune_dkl(c, s.train, s.val);
  EXPECT_EQ(cp.log.stages.front(), "transfer");
  for (std::size_t i = 0; i < source.params.size(); ++i) expect_same(cp.encoder.params.tensors[i], source.params.tensors[i]);
}

TEST_F(Pipeline, FailingStageIsNamed) {
  const Splits s = small_splits(TaskKind::BlobRadius, 120, 4);
  PipelineConfig c = small_config();
  c.transfer = true;
  c.transfer_path = temp_path("does_not_exist.dkla").string();
  try {
    fine_tune_dkl(c, s.train, s.val);
    FAIL() << "expected TrainingError";
  } catch (const TrainingError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("stage 'transfer'"), std::string::npos) << msg;
    EXPECT_NE(msg.find("does_not_exist.dkla"), std::string::npos) << msg;
  }
}

TEST_F(Pipeline, RejectsDatasetMismatch) {
  const Splits s = small_splits(TaskKind::BlobRadius, 120, 4);
  EXPECT_THROW(fine_tune_dkl(small_config(4), s.train, s.val), ShapeError);
  PipelineConfig c = small_config();
  c.backbone.height = 32;
  c.backbone.width = 32;
  EXPECT_THROW(fine_tune_dkl(c, s.train, s.val), ShapeError);
}

TEST_F(Pipeline, InducingInputsAreTrainingEmbeddings) {
  const Splits s = small_splits(TaskKind::BlobRadius, 120, 5);
  PipelineConfig c = small_config();
  c.epochs = 0;
  const Checkpoint cp = fine_tune_dkl(c, s.train, s.val);
  ASSERT_EQ(cp.log.inducing_indices.size(), c.num_inducing);
  const Tensor z = std::get<MultiOutputSVGP>(cp.head).heads[0].inducing;
  const Tensor all = encode_batched(cp.encoder, s.train.images);
  for (std::size_t r = 0; r < c.num_inducing; ++r) {
    const std::size_t src = cp.log.inducing_indices[r];
    for (std::size_t j = 0; j < c.backbone.latent_dim; ++j) ASSERT_EQ(z.at(r, j), all.at(src, j));
  }
}

TEST_F(Pipeline, RandomInducingFlagIsConstructible) {
  const Splits s = small_splits(TaskKind::BlobRadius, 120, 5);
  PipelineConfig c = small_config();
  c.random_inducing = true;
  c.epochs = 1;
  const Checkpoint cp = fine_tune_dkl(c, s.train, s.val);
  EXPECT_TRUE(cp.log.inducing_indices.empty());
  EXPECT_EQ(std::get<MultiOutputSVGP>(cp.head).heads[0].num_inducing(), c.num_inducing);
}

TEST_F(Pipeline, FirstEpochObjectiveReproducible) {
  const Splits s = small_splits(TaskKind::BlobRadius, 120, 6);
  PipelineConfig c = small_config();
  c.epochs = 1;
  const Checkpoint a = fine_tune_dkl(c, s.train, s.val);
  const Checkpoint b = fine_tune_dkl(c, s.train, s.val);
  EXPECT_EQ(a.log.epoch_objective[0], b.log.epoch_objective[0]);
  c.seed += 1;
  const Checkpoint other = fine_tune_dkl(c, s.train, s.val);
  EXPECT_NE(a.log.epoch_objective[0], other.log.epoch_objective[0]);
}

TEST_F(Pipeline, ReturnsBestValidationEpoch) {
  const Splits s = small_splits(TaskKind::BlobRadius, 160, 7);
  PipelineConfig c = small_config();
  c.epochs = 6;
  const Checkpoint cp = fine_tune_dkl(c, s.train, s.val);
  const double best = *std::min_element(cp.log.val_rmse.begin(), cp.log.val_rmse.end());
  EXPECT_EQ(cp.log.val_rmse[cp.log.best_epoch], best);
  EXPECT_EQ(rmse(predict(cp, s.val.images).mean, s.val.targets), best);
}

TEST_F(Pipeline, ObjectiveHealthOnBenchmark) {
  const Splits s = small_splits(TaskKind::BlobRadius, 300, 8);
  PipelineConfig c = small_config();
  c.epochs = 40;
  const Checkpoint cp = fine_tune_dkl(c, s.train, s.val);
  EXPECT_EQ(objective_health_violations(cp.log.epoch_objective), 0u);
  EXPECT_GT(cp.log.epoch_objective.back(), cp.log.epoch_objective.front());
}

TEST_F(Pipeline, FineTuningFromDmlEncoderImprovesValidation) {
  const Splits s = small_splits(TaskKind::BlobRadius, 400, 9);
  PipelineConfig c = small_config();
  c.epochs = 5;
  c.augment = false;
  c.pretraining = Pretraining::DML;
  c.triplet.max_epochs = 10;
  c.triplet.learning_rate = 3e-3;
  const Checkpoint cp = fine_tune_dkl(c, s.train, s.val);
  const EncoderParams scratch = init_encoder(c.backbone, derive_seed(c.seed, "encoder-init"));
  EXPECT_NE(cp.encoder.params.tensors[0][0], scratch.params.tensors[0][0]);
  EXPECT_LT(cp.log.val_rmse[cp.log.best_epoch], cp.log.val_rmse[0]);
}

TEST(Health, CountsLongDecreasingRuns) {
  std::vector<double> rising(30);
  for (std::size_t i = 0; i < 30; ++i) rising[i] = static_cast<double>(i);
  EXPECT_EQ(objective_health_violations(rising), 0u);
  std::vector<double> dip = rising;
  for (std::size_t i = 20; i < 30; ++i) dip[i] = 100.0 - 10.0 * static_cast<double>(i);
  EXPECT_EQ(objective_health_violations(dip), 1u);
  std::vector<double> short_dip = rising;
  short_dip[25] = -50.0;  // lowers three consecutive sliding windows only
  EXPECT_EQ(objective_health_violations(short_dip, 10, 3), 0u);
  EXPECT_EQ(objective_health_violations({1.0, 0.0}), 0u);
}

TEST_F(CheckpointIo, RoundTripBitExact) {
  for (HeadObjective o : {HeadObjective::PPGP, HeadObjective::LinearMSE}) {
    const Splits s = small_splits(TaskKind::BlobBbox, 120, 10);
    PipelineConfig c = small_config(4);
    c.objective = o;
    c.epochs = 1;
    const Checkpoint cp = fine_tune_dkl(c, s.train, s.val);
    const auto path = temp_path("cp.dkla");
    save_checkpoint(cp, path);
    const Checkpoint back = load_checkpoint(path);
    EXPECT_EQ(back.config.to_json(), cp.config.to_json());
    EXPECT_EQ(back.log.to_json(), cp.log.to_json());
    EXPECT_EQ(back.log.val_rmse, cp.log.val_rmse);
    EXPECT_EQ(back.scaler.mean, cp.scaler.mean);
    EXPECT_EQ(back.scaler.scale, cp.scaler.scale);
    for (std::size_t i = 0; i < cp.encoder.params.size(); ++i) {
      expect_same(back.encoder.params.tensors[i], cp.encoder.params.tensors[i]);
    }
    const PredictiveDistribution p = predict(cp, s.test.images);
    const PredictiveDistribution q = predict(back, s.test.images);
    expect_same(p.mean, q.mean);
    expect_same(p.variance, q.variance);
  }
}

TEST_F(CheckpointIo, TruncatedFileRejected) {
  const Splits s = small_splits(TaskKind::BlobRadius, 120, 11);
  PipelineConfig c = small_config();
  c.epochs = 0;
  const auto path = temp_path("cp_trunc.dkla");
  save_checkpoint(fine_tune_dkl(c, s.train, s.val), path);
  std::filesystem::resize_file(path, std::filesystem::file_size(path) / 2);
  EXPECT_THROW(load_checkpoint(path), CorruptFileError);
}

TEST_F(CheckpointIo, HashMismatchRefused) {
  const Splits s = small_splits(TaskKind::BlobRadius, 120, 12);
  PipelineConfig c = small_config();
  c.epochs = 0;
  const auto path = temp_path("cp_hash.dkla");
  save_checkpoint(fine_tune_dkl(c, s.train, s.val), path);
  Archive a = read_archive(path);
  a.meta["config"]["epochs"] = 99;
  write_archive(path, a);
  try {
    load_checkpoint(path);
    FAIL() << "expected CorruptFileError";
  } catch (const CorruptFileError& e) {
    EXPECT_NE(std::string(e.what()).find("hash mismatch"), std::string::npos) << e.what();
  }
}

TEST_F(CheckpointIo, McDropoutNeedsLinearHead) {
  const Splits s = small_splits(TaskKind::BlobRadius, 120, 13);
  PipelineConfig c = small_config();
  c.epochs = 0;
  const Checkpoint gp = fine_tune_dkl(c, s.train, s.val);
  EXPECT_THROW(predict_mc_dropout(gp, s.test.images, 5, 0), InvalidArgument);
  c.objective = HeadObjective::LinearMSE;
  c.train_dropout = true;
  c.epochs = 1;
  const Checkpoint lin = fine_tune_dkl(c, s.train, s.val);
  const PredictiveDistribution p = predict_mc_dropout(lin, s.test.images, 5, 0);
  EXPECT_EQ(p.mean.shape(), (Shape{s.test.size(), 1}));
  for (double v : p.variance.values()) EXPECT_GE(v, 0.0);
}

}  // namespace
}  // namespace dkl
