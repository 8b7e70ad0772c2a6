// Copyright 2026 The DKL Regression Authors
// SPDX-License-Identifier: Apache-2.0

// Backbone pre-training: class labels for continuous targets, semi-hard
// triplet mining with a margin loss and MAP@R early stopping, and
// reconstruction training of a convolutional autoencoder.

#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "dkl/autodiff.hpp"
#include "dkl/backbone.hpp"
#include "dkl/tensor.hpp"

namespace dkl {

enum class LabelMethod { Histogram, KMeans };

struct ClassLabeling {
  std::vector<std::size_t> labels;
  LabelMethod method = LabelMethod::Histogram;
  std::size_t parameter = 0;  // bin count or k
  std::size_t num_classes = 0;
};

/// Equal-width bins over [min y, max y]; empty bins are dropped and labels
/// re-indexed densely. y is (n) or (n x 1).
ClassLabeling label_by_histogram(const Tensor& y, std::size_t bins);

struct KMeansResult {
  std::vector<std::size_t> labels;
  Tensor centers;  // k x d
  std::size_t iterations = 0;
};

/// Lloyd iterations from k-means++ seeding; stops when assignments are
/// stable or after 100 iterations.
KMeansResult kmeans(const Tensor& points, std::size_t k, std::uint64_t seed);

ClassLabeling label_by_kmeans(const Tensor& y, std::size_t k, std::uint64_t seed);

struct Triplet {
  std::size_t anchor, positive, negative;
  friend bool operator==(const Triplet&, const Triplet&) = default;
};

/// Euclidean distance between rows i and j of a (n x h) matrix.
double row_distance(const Tensor& x, std::size_t i, std::size_t j);

/// For every ordered same-class pair (A, P) the hardest negative N with
/// 0 < d(A, N) - d(A, P) < margin, ties broken by the lowest index.
std::vector<Triplet> mine_semihard_triplets(const Tensor& embeddings, std::span<const std::size_t> labels,
                                            double margin);

/// sum over triplets of max(d(A, P) - d(A, N) + margin, 0).
ad::Var triplet_margin_loss(const std::vector<Triplet>& triplets, ad::Var embeddings, double margin);
double triplet_margin_loss(const std::vector<Triplet>& triplets, const Tensor& embeddings, double margin);

/// Mean Average Precision at R over queries whose class has another member.
double map_at_r(const Tensor& embeddings, std::span<const std::size_t> labels);

struct TripletConfig {
  double margin = 0.2;
  std::size_t batch_size = 64;
  std::size_t patience = 3;
  std::size_t max_epochs = 30;
  double learning_rate = 1e-3;
  std::uint64_t seed = 0;

  void validate() const;
};

struct DMLReport {
  EncoderParams encoder;           // best-MAP@R parameters
  std::vector<double> val_map_at_r;  // entry 0 is the initial encoder
  std::vector<double> epoch_loss;    // summed triplet loss per trained epoch
  std::size_t best_epoch = 0;
  std::size_t epochs_trained = 0;
};

DMLReport train_dml_with_report(const EncoderParams& encoder, const Tensor& train_images,
                                std::span<const std::size_t> train_labels, const Tensor& val_images,
                                std::span<const std::size_t> val_labels, const TripletConfig& config);

inline EncoderParams train_dml(const EncoderParams& encoder, const Tensor& train_images,
                               std::span<const std::size_t> train_labels, const Tensor& val_images,
                               std::span<const std::size_t> val_labels, const TripletConfig& config) {
  return train_dml_with_report(encoder, train_images, train_labels, val_images, val_labels, config).encoder;
}

/// Mean over samples of the squared euclidean norm of X - X_hat.
ad::Var cae_loss(ad::Var x, ad::Var x_hat);
double cae_loss(const Tensor& x, const Tensor& x_hat);

struct CAEConfig {
  std::size_t epochs = 10;
  std::size_t batch_size = 64;
  double learning_rate = 1e-3;
  std::uint64_t seed = 0;
};

struct CAEReport {
  EncoderParams encoder;
  DecoderParams decoder;
  std::vector<double> loss;  // full-set loss, entry 0 before training
};

CAEReport train_cae(const EncoderParams& encoder, const DecoderParams& decoder, const Tensor& images,
                    const CAEConfig& config);

}  // namespace dkl
