// Copyright 2026 The DKL Regression Authors
// SPDX-License-Identifier: Apache-2.0

// Synthetic image-regression benchmark, augmentation, cross-validation splits
// and the on-disk dataset format.
//
// Each image holds one soft-edged elliptical blob on a noisy background. The
// blob_radius task regresses the radius in pixels of a circular blob; the
// blob_bbox task regresses the normalised bounding box (x1, y1, x2, y2) of an
// axis-aligned ellipse. Pixel (r, c) is sampled at (c + 0.5, r + 0.5).

#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "dkl/tensor.hpp"

namespace dkl {

enum class TaskKind { BlobRadius, BlobBbox };

std::string_view task_name(TaskKind task);
TaskKind parse_task(std::string_view name);
std::size_t task_output_dim(TaskKind task);

struct Dataset {
  Tensor images;   // n x C x H x W
  Tensor targets;  // n x d
  std::string task;
  std::vector<std::pair<double, double>> ranges;  // per target column

  std::size_t size() const { return images.dim(0); }
  std::size_t output_dim() const { return targets.dim(1); }
  void validate() const;
  Dataset subset(const std::vector<std::size_t>& indices) const;
};

struct SyntheticSpec {
  std::size_t n = 1000;
  std::size_t image_size = 32;
  TaskKind task = TaskKind::BlobRadius;
  double noise_level = 0.02;    // target noise, relative to the blob scale
  bool heteroscedastic = false; // noise std proportional to each blob's size
  std::uint64_t seed = 0;

  void validate() const;
};

/// Per-sample generator internals.
struct BlobDetails {
  std::vector<double> size;       // radius (circle) or mean semi-axis (ellipse), pixels
  std::vector<double> noise_std;  // std of the noise added to the targets
  std::vector<double> intensity;
};

Dataset generate_blob_dataset(const SyntheticSpec& spec);
Dataset generate_blob_dataset(const SyntheticSpec& spec, BlobDetails* details);

struct AugmentParams {
  int shift_x = 0;       // pixels, content moves right for positive values
  int shift_y = 0;       // pixels, content moves down for positive values
  double angle_deg = 0;  // counter-clockwise about the image centre
  bool flip = false;     // horizontal
};

/// Draws crop offsets in [-2, 2], an angle in [-10, 10] degrees and a fair flip.
AugmentParams sample_augment_params(std::uint64_t seed);

/// Applies crop, rotation and flip in that order to a (C x H x W) image.
Tensor apply_augmentation(const Tensor& image, const AugmentParams& params);

struct AugmentedSample {
  Tensor image;   // C x H x W
  Tensor target;  // d
};

/// Task-aware augmentation: the full pipeline for blob_radius; crop only with
/// the matching target shift for blob_bbox.
AugmentedSample augment(const Tensor& image, const Tensor& target, TaskKind task, std::uint64_t seed);

struct CVSplit {
  std::vector<std::size_t> test;
  std::vector<std::vector<std::size_t>> folds;

  /// Training indices (all other folds) and validation indices (fold k).
  std::pair<std::vector<std::size_t>, std::vector<std::size_t>> fold(std::size_t k) const;
};

/// Holds out round(n / 10) samples for testing and splits the rest into
/// `folds` near-equal folds.
CVSplit split_cv(std::size_t n, std::size_t folds, std::uint64_t seed);

void save_dataset(const Dataset& dataset, const std::filesystem::path& dir);
Dataset load_dataset(const std::filesystem::path& dir);

}  // namespace dkl
