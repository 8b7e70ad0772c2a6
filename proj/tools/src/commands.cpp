// Copyright 2026 The DKL Regression Authors
// SPDX-License-Identifier: Apache-2.0

#include "commands.hpp"

#include <chrono>
#include <cstdio>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>
#include <spdlog/spdlog.h>

#include "dkl/backbone.hpp"
#include "dkl/errors.hpp"
#include "dkl/eval.hpp"
#include "dkl/random.hpp"

namespace dkl::cli {
namespace {

namespace fs = std::filesystem;

struct Splits {
  Dataset train, val, test;
};

Dataset load_checked(const RunConfig& config) {
  Dataset ds = load_dataset(config.dataset_dir);
  if (ds.task != task_name(config.task)) {
    throw ConfigError("dataset '" + config.dataset_dir + "' holds task " + ds.task + ", config says " +
                      std::string(task_name(config.task)));
  }
  return ds;
}

Splits split_dataset(const RunConfig& config, const Dataset& ds) {
  const CVSplit split = split_cv(ds.size(), config.folds, config.seed);
  const auto [train, val] = split.fold(config.fold);
  return {ds.subset(train), ds.subset(val), ds.subset(split.test)};
}

void make_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create '" + dir.string() + "': " + ec.message());
}

void write_json(const fs::path& path, const nlohmann::json& j) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IoError("cannot open '" + path.string() + "' for writing");
  os << j.dump(2) << '\n';
  if (!os) throw IoError("write to '" + path.string() + "' failed");
}

void echo_config(const RunConfig& config, const fs::path& dir) { write_json(dir / "run_config.json", config.to_json()); }

Checkpoint load_checked_checkpoint(const RunConfig& config) {
  const fs::path path = config.checkpoint_path();
  if (!fs::exists(path)) throw IoError("checkpoint '" + path.string() + "' does not exist");
  return load_checkpoint(path);
}

std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string error_kind(const std::exception& e) {
  if (dynamic_cast<const ConfigError*>(&e)) return "config";
  if (dynamic_cast<const CorruptFileError*>(&e)) return "corrupt_file";
  if (dynamic_cast<const IoError*>(&e)) return "io";
  if (dynamic_cast<const TrainingError*>(&e)) return "training";
  if (dynamic_cast<const ShapeError*>(&e)) return "shape";
  if (dynamic_cast<const InvalidArgument*>(&e)) return "invalid_argument";
  if (dynamic_cast<const NumericError*>(&e)) return "numeric";
  if (dynamic_cast<const Error*>(&e)) return "error";
  return "internal";
}

int exit_code(const std::string& kind) {
  if (kind == "config") return 2;
  if (kind == "io" || kind == "corrupt_file") return 3;
  return 1;
}

void report_error(const std::string& kind, const std::string& message) {
  std::cerr << nlohmann::json{{"error", kind}, {"message", message}}.dump() << std::endl;
}

}  // namespace

void cmd_generate(const RunConfig& config) {
  const Dataset ds = generate_blob_dataset(config.synthetic_spec());
  save_dataset(ds, config.dataset_dir);
  echo_config(config, config.dataset_dir);
  spdlog::info("wrote {} samples of {} to {}", ds.size(), ds.task, config.dataset_dir);
}

void cmd_pretrain(const RunConfig& config) {
  const PipelineConfig pc = config.pipeline_config();
  if (pc.pretraining == Pretraining::None && !pc.transfer) {
    throw ConfigError("config key 'pretraining' must be dml or cae for the pretrain command");
  }
  const Splits s = split_dataset(config, load_checked(config));
  TrainingLog log;
  const EncoderParams encoder = prepare_encoder(pc, s.train, s.val, log);
  make_dir(config.output_dir);
  save_params(encoder, fs::path(config.output_dir) / "encoder.dkla");
  write_json(fs::path(config.output_dir) / "pretrain_log.json", log.to_json());
  echo_config(config, config.output_dir);
}

void cmd_train(const RunConfig& config) {
  const Splits s = split_dataset(config, load_checked(config));
  const Checkpoint cp = fine_tune_dkl(config.pipeline_config(), s.train, s.val);
  make_dir(config.output_dir);
  const fs::path path = config.checkpoint_path();
  if (path.has_parent_path()) make_dir(path.parent_path());
  save_checkpoint(cp, path);
  write_json(fs::path(config.output_dir) / "training_log.json", cp.log.to_json());
  echo_config(config, config.output_dir);
  spdlog::info("best validation RMSE {:.4f} at epoch {}", cp.log.val_rmse[cp.log.best_epoch], cp.log.best_epoch);
}

void cmd_eval(const RunConfig& config) {
  const Checkpoint cp = load_checked_checkpoint(config);
  const Splits s = split_dataset(config, load_checked(config));
  EvalReport report;
  report.config = config.to_json();
  for (const std::string& method : config.methods) {
    reset_encoder_pass_count();
    const auto start = std::chrono::steady_clock::now();
    PredictiveDistribution p;
    MethodResult r;
    if (method == "mc_dropout") {
      p = predict_mc_dropout(cp, s.test.images, config.mc_passes, derive_seed(config.seed, "mc-dropout"));
      r.method = "mc_dropout";
    } else {
      p = predict(cp, s.test.images);
      r.method = std::string(head_objective_name(cp.config.objective));
    }
    r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    r.encoder_passes = encoder_pass_count();
    r.rmse = rmse(p.mean, s.test.targets);
    r.curve = quantile_performance(p, s.test.targets, config.quantile_levels);
    spdlog::info("{}: test RMSE {:.4f}", r.method, r.rmse);
    report.methods.push_back(std::move(r));
  }
  export_report(report, config.output_dir);
  echo_config(config, config.output_dir);
}

void cmd_predict(const RunConfig& config) {
  const Checkpoint cp = load_checked_checkpoint(config);
  const Dataset ds = load_checked(config);
  const PredictiveDistribution p = predict(cp, ds.images);
  make_dir(config.output_dir);
  const fs::path path = fs::path(config.output_dir) / "predictions.csv";
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IoError("cannot open '" + path.string() + "' for writing");
  os << "sample_id,output_index,mean,variance\n";
  for (std::size_t i = 0; i < p.mean.dim(0); ++i) {
    for (std::size_t j = 0; j < p.mean.dim(1); ++j) {
      os << i << ',' << j << ',' << format_double(p.mean.at(i, j)) << ',' << format_double(p.variance.at(i, j)) << '\n';
    }
  }
  if (!os) throw IoError("write to '" + path.string() + "' failed");
  echo_config(config, config.output_dir);
}

int run(const std::vector<std::string>& args) {
  CLI::App app{"Deep kernel learning regression on images", "dkl"};
  app.require_subcommand(1);
  bool quiet = false;
  app.add_flag("-q,--quiet", quiet, "Only log warnings and errors");

  struct Sub {
    const char* name;
    const char* help;
    void (*fn)(const RunConfig&);
  };
  const Sub subs[] = {{"generate", "Generate a synthetic dataset", cmd_generate},
                      {"pretrain", "Pre-train the encoder (dml or cae)", cmd_pretrain},
                      {"train", "Fine-tune a model and write a checkpoint", cmd_train},
                      {"eval", "Evaluate a checkpoint on the test split", cmd_eval},
                      {"predict", "Write per-sample predictive mean and variance", cmd_predict}};
  std::string config_file;
  std::vector<CLI::App*> apps;
  for (const Sub& s : subs) {
    CLI::App* sub = app.add_subcommand(s.name, s.help);
    sub->add_option("-c,--config", config_file, "JSON run configuration");
    sub->add_flag("-q,--quiet", quiet, "Only log warnings and errors");
    sub->allow_extras();
    sub->footer("Any config key may be overridden with --key value.");
    apps.push_back(sub);
  }

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    std::cout << app.help();
    return 0;
  } catch (const CLI::ParseError& e) {
    report_error("usage", e.what());
    return 2;
  }

  spdlog::set_level(quiet ? spdlog::level::warn : spdlog::level::info);
  for (std::size_t k = 0; k < apps.size(); ++k) {
    if (!apps[k]->parsed()) continue;
    try {
      const RunConfig config = resolve_config(config_file, apps[k]->remaining());
      subs[k].fn(config);
      return 0;
    } catch (const std::exception& e) {
      const std::string kind = error_kind(e);
      report_error(kind, e.what());
      return exit_code(kind);
    }
  }
  return 2;
}

}  // namespace dkl::cli
