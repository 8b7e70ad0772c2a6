// Copyright 2026 The DKL Regression Authors
// SPDX-License-Identifier: Apache-2.0

#include <filesystem>
#include <fstream>
#include <sstream>

#include <gtest/gtest.h>

#include "commands.hpp"
#include "dkl/errors.hpp"
#include "run_config.hpp"

namespace dkl::cli {
namespace {

namespace fs = std::filesystem;

fs::path fresh_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "dkl_cli_test" / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

std::vector<std::string> small_run(const fs::path& dir, const std::string& task = "blob_radius") {
  return {"--dataset_dir", (dir / "data").string(), "--output_dir", (dir / "out").string(),
          "--task", task, "--n", "60", "--image_size", "16", "--conv_stack", "[[4,3,2],[8,3,2]]",
          "--num_inducing", "8", "--epochs", "2", "--batch_size", "16", "--quantile_levels", "3"};
}

std::vector<std::string> command(const std::string& name, std::vector<std::string> rest) {
  rest.insert(rest.begin(), name);
  rest.push_back("-q");
  return rest;
}

struct Result {
  int status;
  std::string err;
};

Result run_captured(const std::vector<std::string>& args) {
  testing::internal::CaptureStderr();
  const int status = run(args);
  return {status, testing::internal::GetCapturedStderr()};
}

TEST(RunConfig, DefaultsRoundTrip) {
  const RunConfig c = RunConfig::from_json(nlohmann::json::object());
  EXPECT_EQ(RunConfig::from_json(c.to_json()).to_json(), c.to_json());
  EXPECT_EQ(c.pipeline_config().output_dim, 1u);
  RunConfig bbox = c;
  bbox.task = TaskKind::BlobBbox;
  EXPECT_EQ(bbox.pipeline_config().output_dim, 4u);
}

TEST(RunConfig, RejectsUnknownKeysAndBadValues) {
  try {
    RunConfig::from_json({{"epochz", 3}});
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("epochz"), std::string::npos);
  }
  EXPECT_THROW(RunConfig::from_json({{"epochs", "many"}}), ConfigError);
  EXPECT_THROW(RunConfig::from_json({{"objective", "mse"}}), ConfigError);
  EXPECT_THROW(RunConfig::from_json({{"fold", 5}}), ConfigError);
  EXPECT_THROW(RunConfig::from_json({{"methods", {"ensemble"}}}), ConfigError);
  EXPECT_THROW(RunConfig::from_json({{"conv_stack", {{4, 3}}}}), ConfigError);
  EXPECT_THROW(RunConfig::from_json(nlohmann::json::array()), ConfigError);
}

TEST(RunConfig, OverridesKeepTypes) {
  nlohmann::json j = {{"epochs", 5}};
  apply_overrides(j, {"--epochs", "7", "--output_dir", "123", "--augment=false", "--noise_level", "0.5"});
  const RunConfig c = RunConfig::from_json(j);
  EXPECT_EQ(c.pipeline.epochs, 7u);
  EXPECT_EQ(c.output_dir, "123");
  EXPECT_FALSE(c.pipeline.augment);
  EXPECT_EQ(c.noise_level, 0.5);
  EXPECT_THROW(apply_overrides(j, {"--nope", "1"}), ConfigError);
  EXPECT_THROW(apply_overrides(j, {"--epochs"}), ConfigError);
  EXPECT_THROW(apply_overrides(j, {"epochs", "1"}), ConfigError);
}

TEST(RunConfig, FileAndOverridesMerge) {
  const fs::path dir = fresh_dir("file");
  std::ofstream(dir / "c.json") << R"({"epochs": 3, "seed": 9})";
  const RunConfig c = resolve_config(dir / "c.json", {"--epochs", "4"});
  EXPECT_EQ(c.pipeline.epochs, 4u);
  EXPECT_EQ(c.seed, 9u);
  std::ofstream(dir / "bad.json") << "{epochs: 3";
  EXPECT_THROW(resolve_config(dir / "bad.json", {}), ConfigError);
  EXPECT_THROW(resolve_config(dir / "missing.json", {}), IoError);
}

TEST(Cli, UnknownKeyExitsWithKeyName) {
  const Result r = run_captured({"train", "--bogus_key", "1"});
  EXPECT_EQ(r.status, 2);
  EXPECT_NE(r.err.find("bogus_key"), std::string::npos);
  EXPECT_EQ(std::count(r.err.begin(), r.err.end(), '\n'), 1);
  const nlohmann::json j = nlohmann::json::parse(r.err);
  EXPECT_EQ(j.at("error"), "config");
}

TEST(Cli, MissingCheckpointExitsWithPath) {
  const fs::path dir = fresh_dir("missing");
  ASSERT_EQ(run(command("generate", small_run(dir))), 0);
  const std::string cp = (dir / "nowhere.dkla").string();
  auto args = small_run(dir);
  args.insert(args.end(), {"--checkpoint", cp});
  const Result r = run_captured(command("predict", args));
  EXPECT_NE(r.status, 0);
  EXPECT_NE(r.err.find(cp), std::string::npos);
  EXPECT_EQ(nlohmann::json::parse(r.err).at("error"), "io");
}

TEST(Cli, UsageErrorIsOneJsonLine) {
  const Result r = run_captured({"fly"});
  EXPECT_EQ(r.status, 2);
  EXPECT_EQ(nlohmann::json::parse(r.err).at("error"), "usage");
}

TEST(Cli, EndToEndWritesArtifactsAndEchoesConfig) {
  const fs::path dir = fresh_dir("e2e");
  const auto args = small_run(dir);
  ASSERT_EQ(run(command("generate", args)), 0);
  ASSERT_EQ(run(command("train", args)), 0);
  auto eval_args = args;
  eval_args.insert(eval_args.end(), {"--quantile_levels", "3"});
  ASSERT_EQ(run(command("eval", eval_args)), 0);
  for (const char* f : {"checkpoint.dkla", "training_log.json", "summary.json", "qp_table.csv", "run_config.json"}) {
    EXPECT_TRUE(fs::exists(dir / "out" / f)) << f;
  }
  std::ifstream is(dir / "out" / "run_config.json");
  const RunConfig echoed = RunConfig::from_json(nlohmann::json::parse(is));
  EXPECT_EQ(echoed.quantile_levels, 3u);
  EXPECT_EQ(echoed.pipeline.epochs, 2u);
  std::ifstream summary(dir / "out" / "summary.json");
  EXPECT_EQ(RunConfig::from_json(nlohmann::json::parse(summary).at("config")).to_json(), echoed.to_json());
}

TEST(Cli, PretrainWritesEncoderUsableForTransfer) {
  const fs::path dir = fresh_dir("pretrain");
  auto args = small_run(dir);
  args.insert(args.end(), {"--pretraining", "cae", "--cae_epochs", "1"});
  ASSERT_EQ(run(command("generate", args)), 0);
  ASSERT_EQ(run(command("pretrain", args)), 0);
  ASSERT_TRUE(fs::exists(dir / "out" / "encoder.dkla"));
  auto transfer = small_run(dir);
  transfer.insert(transfer.end(), {"--transfer", "true", "--transfer_path", (dir / "out" / "encoder.dkla").string()});
  EXPECT_EQ(run(command("train", transfer)), 0);
  EXPECT_NE(run_captured(command("pretrain", small_run(dir))).status, 0);
}

TEST(Cli, PredictOneRowWithFourOutputsEmitsFourRows) {
  const fs::path dir = fresh_dir("bbox");
  auto args = small_run(dir, "blob_bbox");
  ASSERT_EQ(run(command("generate", args)), 0);
  ASSERT_EQ(run(command("train", args)), 0);
  auto one = args;
  one[1] = (dir / "one").string();
  one[7] = "1";
  ASSERT_EQ(run(command("generate", one)), 0);
  auto pred = args;
  pred[1] = (dir / "one").string();
  ASSERT_EQ(run(command("predict", pred)), 0);
  std::ifstream is(dir / "out" / "predictions.csv");
  std::string line;
  std::getline(is, line);
  EXPECT_EQ(line, "sample_id,output_index,mean,variance");
  std::vector<std::string> rows;
  while (std::getline(is, line)) rows.push_back(line);
  ASSERT_EQ(rows.size(), 4u);
  for (int j = 0; j < 4; ++j) EXPECT_EQ(rows[j].substr(0, 4), "0," + std::to_string(j) + ",");
}

TEST(Cli, EvalAndPredictLeaveInputsUntouched) {
  const fs::path dir = fresh_dir("readonly");
  const auto args = small_run(dir);
  ASSERT_EQ(run(command("generate", args)), 0);
  ASSERT_EQ(run(command("train", args)), 0);
  const fs::path data = dir / "data", cp = dir / "out" / "checkpoint.dkla";
  const std::string before_images = slurp(data / "images.bin"), before_meta = slurp(data / "meta.json");
  const std::string before_cp = slurp(cp);
  const auto before_time = fs::last_write_time(cp);
  ASSERT_EQ(run(command("eval", args)), 0);
  ASSERT_EQ(run(command("predict", args)), 0);
  EXPECT_EQ(slurp(data / "images.bin"), before_images);
  EXPECT_EQ(slurp(data / "meta.json"), before_meta);
  EXPECT_EQ(slurp(cp), before_cp);
  EXPECT_EQ(fs::last_write_time(cp), before_time);
}

TEST(Cli, McDropoutNeedsLinearCheckpoint) {
  const fs::path dir = fresh_dir("mcd");
  auto args = small_run(dir);
  ASSERT_EQ(run(command("generate", args)), 0);
  ASSERT_EQ(run(command("train", args)), 0);
  auto mc = args;
  mc.insert(mc.end(), {"--methods", R"(["model","mc_dropout"])", "--mc_passes", "4"});
  EXPECT_NE(run_captured(command("eval", mc)).status, 0);
  auto lin = args;
  lin.insert(lin.end(), {"--objective", "linear_mse", "--train_dropout", "true"});
  ASSERT_EQ(run(command("train", lin)), 0);
  lin.insert(lin.end(), {"--methods", R"(["model","mc_dropout"])", "--mc_passes", "4"});
  ASSERT_EQ(run(command("eval", lin)), 0);
  std::ifstream is(dir / "out" / "summary.json");
  const nlohmann::json s = nlohmann::json::parse(is);
  EXPECT_EQ(s.at("methods")[0].at("encoder_passes"), 1);
  EXPECT_EQ(s.at("methods")[1].at("encoder_passes"), 4);
}

}  // namespace
}  // namespace dkl::cli
