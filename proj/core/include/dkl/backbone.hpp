// Copyright 2026 The DKL Regression Authors
// SPDX-License-Identifier: Apache-2.0

// Convolutional feature extractor, its mirrored transposed-convolution
// decoder, and a linear regression head.
//
// Encoder: for each layer of the conv stack, conv (padding k/2) + bias and an
// activation, optionally followed by inverted dropout; then flatten and a
// linear reduction to the latent width h. Decoder: linear expansion back to
// the last feature map, then one transposed convolution per encoder layer in
// reverse order. The last decoder layer has no activation.

#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dkl/autodiff.hpp"
#include "dkl/random.hpp"
#include "dkl/tensor.hpp"

namespace dkl {

enum class Activation { Relu, Identity };

struct ConvLayerSpec {
  std::size_t out_channels = 8;
  std::size_t kernel_size = 3;
  std::size_t stride = 2;

  friend bool operator==(const ConvLayerSpec&, const ConvLayerSpec&) = default;
};

struct BackboneConfig {
  std::size_t channels = 1;
  std::size_t height = 32;
  std::size_t width = 32;
  std::vector<ConvLayerSpec> conv_stack{{8, 3, 2}, {16, 3, 2}, {32, 3, 2}};
  std::size_t latent_dim = 8;
  double dropout_rate = 0.2;
  Activation activation = Activation::Relu;

  void validate() const;

  struct Spatial {
    std::size_t height, width;
  };
  /// Feature map size after each conv layer.
  std::vector<Spatial> feature_sizes() const;
  /// Length of the flattened last feature map.
  std::size_t flat_dim() const;

  nlohmann::json to_json() const;
  static BackboneConfig from_json(const nlohmann::json& j);

  friend bool operator==(const BackboneConfig&, const BackboneConfig&) = default;
};

/// Ordered, named parameter tensors.
struct ParamSet {
  std::vector<std::string> names;
  std::vector<Tensor> tensors;

  std::size_t size() const { return tensors.size(); }
  const Tensor& at(const std::string& name) const;
  Tensor& at(const std::string& name);
  void add(std::string name, Tensor t);
  bool all_finite() const;
};

struct EncoderParams {
  BackboneConfig config;
  ParamSet params;
};

struct DecoderParams {
  BackboneConfig config;
  ParamSet params;
};

/// Parameter names and shapes implied by a config, in storage order.
std::vector<std::pair<std::string, Shape>> encoder_layout(const BackboneConfig& config);
std::vector<std::pair<std::string, Shape>> decoder_layout(const BackboneConfig& config);

EncoderParams init_encoder(const BackboneConfig& config, std::uint64_t seed);
DecoderParams init_decoder(const BackboneConfig& config, std::uint64_t seed);

/// Linear map from embeddings (b x h) to outputs (b x d).
struct LinearHead {
  Tensor weight;  // h x d
  Tensor bias;    // d

  std::size_t input_dim() const { return weight.dim(0); }
  std::size_t output_dim() const { return weight.dim(1); }
};

LinearHead init_linear_head(std::size_t input_dim, std::size_t output_dim, std::uint64_t seed);
Tensor apply_linear_head(const LinearHead& head, const Tensor& h);

namespace backbone {

std::vector<ad::Var> bind(ad::Graph& g, const ParamSet& params, bool trainable);
void gather(const std::vector<ad::Var>& vars, ParamSet& params);

/// Dropout masks for one stochastic pass; empty means deterministic.
struct DropoutSampler {
  double rate = 0.0;
  Rng* rng = nullptr;
};

/// Counts one encoder pass.
ad::Var encode(const BackboneConfig& config, const std::vector<ad::Var>& params, ad::Var x,
               DropoutSampler dropout = {});
ad::Var decode(const BackboneConfig& config, const std::vector<ad::Var>& params, ad::Var h);
ad::Var linear(ad::Var weight, ad::Var bias, ad::Var h);

}  // namespace backbone

/// Deterministic embedding (dropout disabled).
Tensor encode(const EncoderParams& params, const Tensor& x);
Tensor decode(const DecoderParams& params, const Tensor& h);
/// One stochastic pass with fresh Bernoulli masks after every conv block.
Tensor encode_dropout_sample(const EncoderParams& params, const Tensor& x, double rate, std::uint64_t seed);

/// Encodes in chunks of `batch` rows to bound graph size.
Tensor encode_batched(const EncoderParams& params, const Tensor& x, std::size_t batch = 256);

/// Number of encoder passes since start-up or the last reset.
std::uint64_t encoder_pass_count();
void reset_encoder_pass_count();

void save_params(const EncoderParams& params, const std::filesystem::path& path);
void save_params(const DecoderParams& params, const std::filesystem::path& path);
/// Loads with the stored config. With `expected`, the stored shapes must match
/// the shapes that config implies.
EncoderParams load_encoder(const std::filesystem::path& path,
                           const std::optional<BackboneConfig>& expected = std::nullopt);
DecoderParams load_decoder(const std::filesystem::path& path,
                           const std::optional<BackboneConfig>& expected = std::nullopt);

/// Checks `params` against the layout of `config`; throws ConfigError naming
/// the first mismatched tensor.
void check_layout(const ParamSet& params, const std::vector<std::pair<std::string, Shape>>& layout);

}  // namespace dkl
