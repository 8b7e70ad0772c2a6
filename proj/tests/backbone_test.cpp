// Copyright 2026 The DKL Regression Authors
// SPDX-License-Identifier: Apache-2.0

#include <cmath>
#include <filesystem>
#include <fstream>

#include <gtest/gtest.h>

#include "dkl/archive.hpp"
#include "dkl/backbone.hpp"
#include "dkl/errors.hpp"
#include "test_support.hpp"

namespace dkl {
namespace {

using testing::max_gradient_error;
using testing::random_tensor;

BackboneConfig small_config() {
  BackboneConfig c;
  c.height = 8;
  c.width = 8;
  c.conv_stack = {{3, 3, 2}, {4, 3, 2}};
  c.latent_dim = 3;
  return c;
}

std::filesystem::path temp_path(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / "dkl_backbone_test";
  std::filesystem::create_directories(dir);
  return dir / name;
}

Tensor random_images(std::size_t n, const BackboneConfig& c, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return random_tensor({n, c.channels, c.height, c.width}, rng);
}

TEST(BackboneConfig, DefaultsValidate) {
  const BackboneConfig c;
  EXPECT_NO_THROW(c.validate());
  EXPECT_EQ(c.latent_dim, 8u);
  EXPECT_DOUBLE_EQ(c.dropout_rate, 0.2);
  const auto sizes = c.feature_sizes();
  ASSERT_EQ(sizes.size(), 3u);
  EXPECT_EQ(sizes[0].height, 16u);
  EXPECT_EQ(sizes[1].height, 8u);
  EXPECT_EQ(sizes[2].height, 4u);
  EXPECT_EQ(c.flat_dim(), 32u * 4 * 4);
}

TEST(BackboneConfig, RejectsInvalid) {
  BackboneConfig c;
  c.latent_dim = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = BackboneConfig{};
  c.dropout_rate = 1.0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = BackboneConfig{};
  c.conv_stack.clear();
  EXPECT_THROW(c.validate(), ConfigError);
  c = BackboneConfig{};
  c.conv_stack[0].kernel_size = 0;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(BackboneConfig, JsonRoundTrip) {
  BackboneConfig c = small_config();
  c.activation = Activation::Identity;
  c.dropout_rate = 0.3;
  EXPECT_EQ(BackboneConfig::from_json(c.to_json()), c);
}

TEST(Encoder, OutputShapeAndDeterminism) {
  const BackboneConfig c;
  const EncoderParams enc = init_encoder(c, 1);
  const Tensor x = random_images(5, c, 2);
  const Tensor a = encode(enc, x);
  const Tensor b = encode(enc, x);
  EXPECT_EQ(a.shape(), (Shape{5, 8}));
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i], b[i]);
}

TEST(Encoder, SupportsLatentFifty) {
  BackboneConfig c;
  c.latent_dim = 50;
  const EncoderParams enc = init_encoder(c, 3);
  EXPECT_EQ(encode(enc, random_images(2, c, 4)).shape(), (Shape{2, 50}));
}

TEST(Encoder, RejectsShapeMismatch) {
  const BackboneConfig c;
  const EncoderParams enc = init_encoder(c, 1);
  std::mt19937_64 rng(1);
  EXPECT_THROW(encode(enc, random_tensor({2, 1, 16, 16}, rng)), ShapeError);
  EXPECT_THROW(encode(enc, random_tensor({2, 32, 32}, rng)), ShapeError);
}

TEST(Encoder, BatchedMatchesSingle) {
  const BackboneConfig c = small_config();
  const EncoderParams enc = init_encoder(c, 5);
  const Tensor x = random_images(7, c, 6);
  const Tensor full = encode(enc, x);
  const Tensor chunked = encode_batched(enc, x, 3);
  for (std::size_t i = 0; i < full.size(); ++i) EXPECT_EQ(full[i], chunked[i]);
}

TEST(Encoder, PassCounter) {
  const BackboneConfig c = small_config();
  const EncoderParams enc = init_encoder(c, 5);
  reset_encoder_pass_count();
  encode(enc, random_images(2, c, 1));
  encode_dropout_sample(enc, random_images(2, c, 1), 0.2, 4);
  EXPECT_EQ(encoder_pass_count(), 2u);
}

TEST(Decoder, ShapeMirrorsInput) {
  for (const auto& [h, w] : {std::pair<std::size_t, std::size_t>{32, 32}, {28, 28}, {16, 16}, {32, 16}}) {
    BackboneConfig c;
    c.height = h;
    c.width = w;
    const EncoderParams enc = init_encoder(c, 1);
    const DecoderParams dec = init_decoder(c, 2);
    const Tensor x = random_images(3, c, 3);
    EXPECT_EQ(decode(dec, encode(enc, x)).shape(), x.shape()) << h << "x" << w;
  }
}

TEST(Decoder, RejectsWidthMismatch) {
  const BackboneConfig c = small_config();
  const DecoderParams dec = init_decoder(c, 2);
  EXPECT_THROW(decode(dec, Tensor({2, 4})), ShapeError);
}

TEST(Decoder, RejectsAsymmetricRemainders) {
  BackboneConfig c;
  c.height = 32;
  c.width = 31;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(Layout, NamesAndShapes) {
  const BackboneConfig c = small_config();
  const auto enc = encoder_layout(c);
  ASSERT_EQ(enc.size(), 6u);
  EXPECT_EQ(enc[0].first, "conv0.weight");
  EXPECT_EQ(enc[0].second, (Shape{3, 1, 3, 3}));
  EXPECT_EQ(enc[2].first, "conv1.weight");
  EXPECT_EQ(enc[2].second, (Shape{4, 3, 3, 3}));
  EXPECT_EQ(enc[4].first, "reduce.weight");
  EXPECT_EQ(enc[4].second, (Shape{c.flat_dim(), 3}));
  const auto dec = decoder_layout(c);
  ASSERT_EQ(dec.size(), 6u);
  EXPECT_EQ(dec[0].first, "expand.weight");
  EXPECT_EQ(dec[0].second, (Shape{3, c.flat_dim()}));
}

TEST(Gradients, EncoderMatchesFiniteDifferences) {
  const BackboneConfig c = small_config();
  const EncoderParams enc = init_encoder(c, 11);
  std::vector<Tensor> inputs = enc.params.tensors;
  std::mt19937_64 rng(12);
  // Non-zero biases so no activation sits exactly at a ReLU kink.
  for (Tensor& t : inputs) {
    if (t.rank() == 1) t = random_tensor(t.shape(), rng, -0.1, 0.1);
  }
  inputs.push_back(random_images(2, c, 13));
  const double err = max_gradient_error(
      [&](const std::vector<ad::Var>& v) {
        const std::vector<ad::Var> params(v.begin(), v.end() - 1);
        return testing::scalarise(backbone::encode(c, params, v.back()));
      },
      inputs);
  EXPECT_LT(err, 1e-4);
}

TEST(Gradients, DecoderMatchesFiniteDifferences) {
  const BackboneConfig c = small_config();
  const DecoderParams dec = init_decoder(c, 21);
  std::vector<Tensor> inputs = dec.params.tensors;
  std::mt19937_64 rng(22);
  for (Tensor& t : inputs) {
    if (t.rank() == 1) t = random_tensor(t.shape(), rng, -0.1, 0.1);
  }
  inputs.push_back(random_tensor({2, c.latent_dim}, rng));
  const double err = max_gradient_error(
      [&](const std::vector<ad::Var>& v) {
        const std::vector<ad::Var> params(v.begin(), v.end() - 1);
        return testing::scalarise(backbone::decode(c, params, v.back()));
      },
      inputs);
  EXPECT_LT(err, 1e-4);
}

TEST(Dropout, ZeroRateEqualsEncode) {
  const BackboneConfig c = small_config();
  const EncoderParams enc = init_encoder(c, 1);
  const Tensor x = random_images(3, c, 2);
  const Tensor a = encode(enc, x);
  const Tensor b = encode_dropout_sample(enc, x, 0.0, 99);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i], b[i]);
}

TEST(Dropout, SeededReproducible) {
  const BackboneConfig c;
  const EncoderParams enc = init_encoder(c, 1);
  const Tensor x = random_images(2, c, 2);
  const Tensor a = encode_dropout_sample(enc, x, 0.2, 5);
  const Tensor b = encode_dropout_sample(enc, x, 0.2, 5);
  const Tensor d = encode_dropout_sample(enc, x, 0.2, 6);
  bool differs = false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i], b[i]);
    differs = differs || a[i] != d[i];
  }
  EXPECT_TRUE(differs);
}

TEST(Dropout, RejectsRateAtLeastOne) {
  const BackboneConfig c = small_config();
  const EncoderParams enc = init_encoder(c, 1);
  const Tensor x = random_images(1, c, 2);
  EXPECT_THROW(encode_dropout_sample(enc, x, 1.0, 1), InvalidArgument);
  EXPECT_THROW(encode_dropout_sample(enc, x, -0.1, 1), InvalidArgument);
}

TEST(Dropout, ExpectationMatchesDeterministicOnLinearConfig) {
  BackboneConfig c = small_config();
  c.activation = Activation::Identity;
  EncoderParams enc = init_encoder(c, 31);
  // Positive weights and inputs keep every output coordinate well away from zero.
  for (Tensor& t : enc.params.tensors) {
    for (double& v : t.values()) v = std::abs(v);
  }
  std::mt19937_64 rng(32);
  const Tensor x = random_tensor({2, 1, 8, 8}, rng, 0.1, 1.0);
  const Tensor det = encode(enc, x);
  Tensor mean(det.shape());
  constexpr int kSamples = 1000;
  for (int s = 0; s < kSamples; ++s) {
    const Tensor sample = encode_dropout_sample(enc, x, 0.2, static_cast<std::uint64_t>(s));
    for (std::size_t i = 0; i < mean.size(); ++i) mean[i] += sample[i] / kSamples;
  }
  for (std::size_t i = 0; i < det.size(); ++i) {
    EXPECT_LT(std::abs(mean[i] - det[i]), 0.05 * std::abs(det[i])) << "coordinate " << i;
  }
}

TEST(Persistence, EncoderRoundTripBitExact) {
  const BackboneConfig c = small_config();
  const EncoderParams enc = init_encoder(c, 41);
  const auto path = temp_path("enc.dkla");
  save_params(enc, path);
  const EncoderParams back = load_encoder(path, c);
  EXPECT_EQ(back.config, c);
  ASSERT_EQ(back.params.names, enc.params.names);
  for (std::size_t i = 0; i < enc.params.size(); ++i) {
    const Tensor& a = enc.params.tensors[i];
    const Tensor& b = back.params.tensors[i];
    ASSERT_EQ(a.shape(), b.shape());
    for (std::size_t j = 0; j < a.size(); ++j) EXPECT_EQ(a[j], b[j]);
  }
}

TEST(Persistence, DecoderRoundTripBitExact) {
  const BackboneConfig c = small_config();
  const DecoderParams dec = init_decoder(c, 42);
  const auto path = temp_path("dec.dkla");
  save_params(dec, path);
  const DecoderParams back = load_decoder(path);
  ASSERT_EQ(back.params.size(), dec.params.size());
  for (std::size_t i = 0; i < dec.params.size(); ++i) {
    for (std::size_t j = 0; j < dec.params.tensors[i].size(); ++j) {
      EXPECT_EQ(dec.params.tensors[i][j], back.params.tensors[i][j]);
    }
  }
}

TEST(Persistence, MismatchedConfigNamesFirstShape) {
  const BackboneConfig c = small_config();
  const auto path = temp_path("enc_mismatch.dkla");
  save_params(init_encoder(c, 1), path);
  BackboneConfig other = c;
  other.conv_stack[1].out_channels = 5;
  try {
    load_encoder(path, other);
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("conv1.weight"), std::string::npos) << msg;
    EXPECT_NE(msg.find("(4, 3, 3, 3)"), std::string::npos) << msg;
  }
}

TEST(Persistence, DropoutRateDifferenceIsAccepted) {
  const BackboneConfig c = small_config();
  const auto path = temp_path("enc_dropout.dkla");
  save_params(init_encoder(c, 1), path);
  BackboneConfig other = c;
  other.dropout_rate = 0.5;
  EXPECT_NO_THROW(load_encoder(path, other));
}

TEST(Persistence, WrongKindRejected) {
  const BackboneConfig c = small_config();
  const auto path = temp_path("dec_as_enc.dkla");
  save_params(init_decoder(c, 1), path);
  EXPECT_THROW(load_encoder(path), ConfigError);
}

TEST(Persistence, CorruptHeaderRejected) {
  const auto path = temp_path("corrupt.dkla");
  {
    std::ofstream os(path, std::ios::binary);
    os << "NOPE and some bytes";
  }
  EXPECT_THROW(load_encoder(path), CorruptFileError);
  EXPECT_THROW(load_encoder(temp_path("missing.dkla")), IoError);
}

TEST(Persistence, TruncatedPayloadRejected) {
  const BackboneConfig c = small_config();
  const auto path = temp_path("trunc.dkla");
  save_params(init_encoder(c, 1), path);
  std::filesystem::resize_file(path, std::filesystem::file_size(path) - 8);
  EXPECT_THROW(load_encoder(path), CorruptFileError);
}

TEST(LinearHead, AppliesAffineMap) {
  LinearHead head{Tensor({2, 1}, {2.0, -1.0}), Tensor({1}, {0.5})};
  const Tensor out = apply_linear_head(head, Tensor({2, 2}, {1.0, 1.0, 3.0, 0.0}));
  EXPECT_DOUBLE_EQ(out[0], 1.5);
  EXPECT_DOUBLE_EQ(out[1], 6.5);
  EXPECT_EQ(init_linear_head(8, 4, 1).weight.shape(), (Shape{8, 4}));
}

}  // namespace
}  // namespace dkl
