// Copyright 2026 The DKL Regression Authors
// SPDX-License-Identifier: Apache-2.0

#include "dkl/backbone.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>

#include "dkl/archive.hpp"
#include "dkl/errors.hpp"
#include "dkl/linalg.hpp"

namespace dkl {
namespace {

std::atomic<std::uint64_t> g_encoder_passes{0};

std::size_t conv_out(std::size_t in, const ConvLayerSpec& l) {
  return (in + 2 * (l.kernel_size / 2) - l.kernel_size) / l.stride + 1;
}

std::string activation_name(Activation a) { return a == Activation::Relu ? "relu" : "identity"; }

Activation parse_activation(const std::string& s) {
  if (s == "relu") return Activation::Relu;
  if (s == "identity") return Activation::Identity;
  throw ConfigError("unknown activation '" + s + "'");
}

ad::Var activate(Activation a, ad::Var x) { return a == Activation::Relu ? ad::relu(x) : x; }

// Output padding so a transposed conv inverts the size map of `l`.
std::size_t output_padding(std::size_t in, std::size_t target, const ConvLayerSpec& l) {
  const std::size_t p = l.kernel_size / 2;
  return target + 2 * p - ((in - 1) * l.stride + l.kernel_size);
}

void fill_uniform(Tensor& t, double bound, Rng& rng) {
  std::uniform_real_distribution<double> u(-bound, bound);
  for (double& v : t.values()) v = u(rng);
}

bool same_architecture(const BackboneConfig& a, const BackboneConfig& b) {
  return a.channels == b.channels && a.height == b.height && a.width == b.width && a.conv_stack == b.conv_stack &&
         a.latent_dim == b.latent_dim && a.activation == b.activation;
}

}  // namespace

void BackboneConfig::validate() const {
  if (channels == 0 || height == 0 || width == 0) throw ConfigError("input shape entries must be positive");
  if (latent_dim == 0) throw ConfigError("latent_dim must be at least 1");
  if (!(dropout_rate >= 0.0 && dropout_rate < 1.0)) throw ConfigError("dropout_rate must lie in [0, 1)");
  if (conv_stack.empty()) throw ConfigError("conv_stack must hold at least one layer");
  std::size_t h = height, w = width;
  for (std::size_t i = 0; i < conv_stack.size(); ++i) {
    const ConvLayerSpec& l = conv_stack[i];
    if (l.out_channels == 0 || l.kernel_size == 0 || l.stride == 0) {
      throw ConfigError("conv layer " + std::to_string(i) + " has a zero entry");
    }
    if (h + 2 * (l.kernel_size / 2) < l.kernel_size || w + 2 * (l.kernel_size / 2) < l.kernel_size) {
      throw ConfigError("conv layer " + std::to_string(i) + " kernel exceeds its padded input");
    }
    const std::size_t oh = conv_out(h, l), ow = conv_out(w, l);
    if (output_padding(oh, h, l) != output_padding(ow, w, l)) {
      throw ConfigError("conv layer " + std::to_string(i) +
                        " leaves different remainders along height and width; the decoder cannot mirror it");
    }
    h = oh;
    w = ow;
  }
}

std::vector<BackboneConfig::Spatial> BackboneConfig::feature_sizes() const {
  std::vector<Spatial> out;
  std::size_t h = height, w = width;
  for (const ConvLayerSpec& l : conv_stack) {
    h = conv_out(h, l);
    w = conv_out(w, l);
    out.push_back({h, w});
  }
  return out;
}

std::size_t BackboneConfig::flat_dim() const {
  const Spatial last = feature_sizes().back();
  return conv_stack.back().out_channels * last.height * last.width;
}

nlohmann::json BackboneConfig::to_json() const {
  nlohmann::json stack = nlohmann::json::array();
  for (const ConvLayerSpec& l : conv_stack) stack.push_back({l.out_channels, l.kernel_size, l.stride});
  return {{"input_shape", {channels, height, width}},
          {"conv_stack", stack},
          {"latent_dim", latent_dim},
          {"dropout_rate", dropout_rate},
          {"activation", activation_name(activation)}};
}

BackboneConfig BackboneConfig::from_json(const nlohmann::json& j) {
  BackboneConfig c;
  try {
    const auto shape = j.at("input_shape").get<std::vector<std::size_t>>();
    if (shape.size() != 3) throw ConfigError("input_shape must have three entries (C, H, W)");
    c.channels = shape[0];
    c.height = shape[1];
    c.width = shape[2];
    c.conv_stack.clear();
    for (const auto& l : j.at("conv_stack")) {
      const auto v = l.get<std::vector<std::size_t>>();
      if (v.size() != 3) throw ConfigError("conv_stack entries are (out_channels, kernel_size, stride)");
      c.conv_stack.push_back({v[0], v[1], v[2]});
    }
    c.latent_dim = j.at("latent_dim").get<std::size_t>();
    c.dropout_rate = j.at("dropout_rate").get<double>();
    c.activation = parse_activation(j.at("activation").get<std::string>());
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("invalid backbone config: ") + e.what());
  }
  c.validate();
  return c;
}

const Tensor& ParamSet::at(const std::string& name) const {
  const auto it = std::find(names.begin(), names.end(), name);
  if (it == names.end()) throw InvalidArgument("no parameter named '" + name + "'");
  return tensors[static_cast<std::size_t>(it - names.begin())];
}

Tensor& ParamSet::at(const std::string& name) {
  return const_cast<Tensor&>(static_cast<const ParamSet&>(*this).at(name));
}

void ParamSet::add(std::string name, Tensor t) {
  names.push_back(std::move(name));
  tensors.push_back(std::move(t));
}

bool ParamSet::all_finite() const {
  return std::all_of(tensors.begin(), tensors.end(), [](const Tensor& t) { return t.all_finite(); });
}

std::vector<std::pair<std::string, Shape>> encoder_layout(const BackboneConfig& config) {
  config.validate();
  std::vector<std::pair<std::string, Shape>> out;
  std::size_t in = config.channels;
  for (std::size_t i = 0; i < config.conv_stack.size(); ++i) {
    const ConvLayerSpec& l = config.conv_stack[i];
    const std::string p = "conv" + std::to_string(i);
    out.emplace_back(p + ".weight", Shape{l.out_channels, in, l.kernel_size, l.kernel_size});
    out.emplace_back(p + ".bias", Shape{l.out_channels});
    in = l.out_channels;
  }
  out.emplace_back("reduce.weight", Shape{config.flat_dim(), config.latent_dim});
  out.emplace_back("reduce.bias", Shape{config.latent_dim});
  return out;
}

std::vector<std::pair<std::string, Shape>> decoder_layout(const BackboneConfig& config) {
  config.validate();
  std::vector<std::pair<std::string, Shape>> out;
  out.emplace_back("expand.weight", Shape{config.latent_dim, config.flat_dim()});
  out.emplace_back("expand.bias", Shape{config.flat_dim()});
  for (std::size_t i = config.conv_stack.size(); i-- > 0;) {
    const ConvLayerSpec& l = config.conv_stack[i];
    const std::size_t target = i == 0 ? config.channels : config.conv_stack[i - 1].out_channels;
    const std::string p = "deconv" + std::to_string(i);
    out.emplace_back(p + ".weight", Shape{l.out_channels, target, l.kernel_size, l.kernel_size});
    out.emplace_back(p + ".bias", Shape{target});
  }
  return out;
}

EncoderParams init_encoder(const BackboneConfig& config, std::uint64_t seed) {
  EncoderParams out{config, {}};
  Rng rng(derive_seed(seed, "encoder"));
  for (auto& [name, shape] : encoder_layout(config)) {
    Tensor t(shape);
    if (name == "reduce.weight") {
      fill_uniform(t, std::sqrt(6.0 / static_cast<double>(shape[0] + shape[1])), rng);
    } else if (shape.size() == 4) {
      fill_uniform(t, std::sqrt(6.0 / static_cast<double>(shape[1] * shape[2] * shape[3])), rng);
    }
    out.params.add(name, std::move(t));
  }
  return out;
}

DecoderParams init_decoder(const BackboneConfig& config, std::uint64_t seed) {
  DecoderParams out{config, {}};
  Rng rng(derive_seed(seed, "decoder"));
  for (auto& [name, shape] : decoder_layout(config)) {
    Tensor t(shape);
    if (name == "expand.weight") {
      fill_uniform(t, std::sqrt(6.0 / static_cast<double>(shape[0] + shape[1])), rng);
    } else if (shape.size() == 4) {
      fill_uniform(t, std::sqrt(6.0 / static_cast<double>(shape[0] * shape[2] * shape[3])), rng);
    }
    out.params.add(name, std::move(t));
  }
  return out;
}

LinearHead init_linear_head(std::size_t input_dim, std::size_t output_dim, std::uint64_t seed) {
  LinearHead head{Tensor({input_dim, output_dim}), Tensor({output_dim})};
  Rng rng(derive_seed(seed, "linear-head"));
  fill_uniform(head.weight, std::sqrt(6.0 / static_cast<double>(input_dim + output_dim)), rng);
  return head;
}

Tensor apply_linear_head(const LinearHead& head, const Tensor& h) {
  if (h.rank() != 2 || h.dim(1) != head.input_dim()) {
    throw ShapeError("linear head expects (b x " + std::to_string(head.input_dim()) + "), got " +
                     shape_to_string(h.shape()));
  }
  Tensor out = linalg::matmul(h, head.weight);
  const std::size_t d = head.output_dim();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += head.bias[i % d];
  return out;
}

namespace backbone {

std::vector<ad::Var> bind(ad::Graph& g, const ParamSet& params, bool trainable) {
  std::vector<ad::Var> out;
  out.reserve(params.size());
  for (const Tensor& t : params.tensors) out.push_back(trainable ? ad::parameter(g, t) : ad::constant(g, t));
  return out;
}

void gather(const std::vector<ad::Var>& vars, ParamSet& params) {
  if (vars.size() != params.size()) throw InvalidArgument("parameter count mismatch in gather");
  for (std::size_t i = 0; i < vars.size(); ++i) params.tensors[i] = vars[i].value();
}

ad::Var linear(ad::Var weight, ad::Var bias, ad::Var h) { return ad::matmul(h, weight) + bias; }

ad::Var encode(const BackboneConfig& config, const std::vector<ad::Var>& params, ad::Var x, DropoutSampler dropout) {
  const Shape& xs = x.shape();
  if (xs.size() != 4 || xs[1] != config.channels || xs[2] != config.height || xs[3] != config.width) {
    throw ShapeError("encoder expects (b, " + std::to_string(config.channels) + ", " + std::to_string(config.height) +
                     ", " + std::to_string(config.width) + "), got " + shape_to_string(xs));
  }
  if (params.size() != 2 * config.conv_stack.size() + 2) {
    throw ShapeError("encoder parameter count " + std::to_string(params.size()) + " does not match config");
  }
  if (!(dropout.rate >= 0.0 && dropout.rate < 1.0)) throw InvalidArgument("dropout rate must lie in [0, 1)");
  if (dropout.rate > 0.0 && dropout.rng == nullptr) throw InvalidArgument("dropout sampling needs a generator");
  g_encoder_passes.fetch_add(1, std::memory_order_relaxed);

  ad::Graph& g = x.graph();
  const std::size_t b = xs[0];
  ad::Var a = x;
  std::size_t idx = 0;
  for (const ConvLayerSpec& l : config.conv_stack) {
    const ad::Var w = params[idx++];
    const ad::Var bias = params[idx++];
    a = ad::conv2d(a, w, l.stride, l.kernel_size / 2) + ad::reshape(bias, {l.out_channels, 1, 1});
    a = activate(config.activation, a);
    if (dropout.rate > 0.0) {
      std::bernoulli_distribution keep(1.0 - dropout.rate);
      const double scale = 1.0 / (1.0 - dropout.rate);
      Tensor mask(a.shape());
      for (double& v : mask.values()) v = keep(*dropout.rng) ? scale : 0.0;
      a = a * ad::constant(g, std::move(mask));
    }
  }
  a = ad::reshape(a, {b, config.flat_dim()});
  return linear(params[idx], params[idx + 1], a);
}

ad::Var decode(const BackboneConfig& config, const std::vector<ad::Var>& params, ad::Var h) {
  const Shape& hs = h.shape();
  if (hs.size() != 2 || hs[1] != config.latent_dim) {
    throw ShapeError("decoder expects (b, " + std::to_string(config.latent_dim) + "), got " + shape_to_string(hs));
  }
  if (params.size() != 2 * config.conv_stack.size() + 2) {
    throw ShapeError("decoder parameter count " + std::to_string(params.size()) + " does not match config");
  }
  const auto sizes = config.feature_sizes();
  const std::size_t b = hs[0];
  const std::size_t layers = config.conv_stack.size();
  ad::Var a = linear(params[0], params[1], h);
  a = ad::reshape(a, {b, config.conv_stack.back().out_channels, sizes.back().height, sizes.back().width});
  a = activate(config.activation, a);
  std::size_t idx = 2;
  for (std::size_t i = layers; i-- > 0;) {
    const ConvLayerSpec& l = config.conv_stack[i];
    const std::size_t target_h = i == 0 ? config.height : sizes[i - 1].height;
    const std::size_t target_c = i == 0 ? config.channels : config.conv_stack[i - 1].out_channels;
    const ad::Var w = params[idx++];
    const ad::Var bias = params[idx++];
    a = ad::conv_transpose2d(a, w, l.stride, l.kernel_size / 2, output_padding(sizes[i].height, target_h, l)) +
        ad::reshape(bias, {target_c, 1, 1});
    if (i > 0) a = activate(config.activation, a);
  }
  return a;
}

}  // namespace backbone

Tensor encode(const EncoderParams& params, const Tensor& x) {
  ad::Graph g;
  return backbone::encode(params.config, backbone::bind(g, params.params, false), ad::constant(g, x)).value();
}

Tensor decode(const DecoderParams& params, const Tensor& h) {
  ad::Graph g;
  return backbone::decode(params.config, backbone::bind(g, params.params, false), ad::constant(g, h)).value();
}

Tensor encode_dropout_sample(const EncoderParams& params, const Tensor& x, double rate, std::uint64_t seed) {
  if (!(rate >= 0.0 && rate < 1.0)) throw InvalidArgument("dropout rate must lie in [0, 1)");
  Rng rng(seed);
  ad::Graph g;
  return backbone::encode(params.config, backbone::bind(g, params.params, false), ad::constant(g, x),
                          {rate, &rng})
      .value();
}

Tensor encode_batched(const EncoderParams& params, const Tensor& x, std::size_t batch) {
  if (batch == 0) throw InvalidArgument("batch size must be positive");
  const std::size_t n = x.dim(0);
  if (n <= batch) return encode(params, x);
  Tensor out({n, params.config.latent_dim});
  for (std::size_t begin = 0; begin < n; begin += batch) {
    const std::size_t end = std::min(n, begin + batch);
    const Tensor part = encode(params, x.rows(begin, end));
    std::copy(part.values().begin(), part.values().end(), out.data() + begin * params.config.latent_dim);
  }
  return out;
}

std::uint64_t encoder_pass_count() { return g_encoder_passes.load(std::memory_order_relaxed); }
void reset_encoder_pass_count() { g_encoder_passes.store(0, std::memory_order_relaxed); }

void check_layout(const ParamSet& params, const std::vector<std::pair<std::string, Shape>>& layout) {
  const std::size_t n = std::min(params.size(), layout.size());
  for (std::size_t i = 0; i < n; ++i) {
    if (params.names[i] != layout[i].first || params.tensors[i].shape() != layout[i].second) {
      throw ConfigError("parameter mismatch at '" + layout[i].first + "': expected shape " +
                        shape_to_string(layout[i].second) + ", found '" + params.names[i] + "' with shape " +
                        shape_to_string(params.tensors[i].shape()));
    }
  }
  if (params.size() != layout.size()) {
    throw ConfigError("parameter count mismatch: expected " + std::to_string(layout.size()) + ", found " +
                      std::to_string(params.size()));
  }
}

namespace {

void save_set(const std::string& kind, const BackboneConfig& config, const ParamSet& params,
              const std::filesystem::path& path) {
  Archive a;
  a.meta = {{"kind", kind}, {"config", config.to_json()}, {"config_hash", json_hash(config.to_json())}};
  for (std::size_t i = 0; i < params.size(); ++i) a.tensors.emplace_back(params.names[i], params.tensors[i]);
  write_archive(path, a);
}

std::pair<BackboneConfig, ParamSet> load_set(const std::string& kind, const std::filesystem::path& path,
                                             const std::optional<BackboneConfig>& expected, bool decoder) {
  Archive a = read_archive(path);
  BackboneConfig stored;
  try {
    if (a.meta.at("kind").get<std::string>() != kind) {
      throw ConfigError("'" + path.string() + "' holds " + a.meta.at("kind").get<std::string>() + " parameters, not " +
                        kind);
    }
    stored = BackboneConfig::from_json(a.meta.at("config"));
    if (a.meta.at("config_hash").get<std::uint64_t>() != json_hash(stored.to_json())) {
      throw CorruptFileError("config hash mismatch in '" + path.string() + "'");
    }
  } catch (const nlohmann::json::exception& e) {
    throw CorruptFileError("malformed parameter header in '" + path.string() + "': " + e.what());
  }
  ParamSet params;
  for (auto& [name, t] : a.tensors) params.add(name, std::move(t));
  const BackboneConfig& target = expected ? *expected : stored;
  check_layout(params, decoder ? decoder_layout(target) : encoder_layout(target));
  if (expected && !same_architecture(stored, *expected)) {
    throw ConfigError("stored backbone config " + stored.to_json().dump() + " differs from expected " +
                      expected->to_json().dump());
  }
  return {target, std::move(params)};
}

}  // namespace

void save_params(const EncoderParams& params, const std::filesystem::path& path) {
  save_set("encoder", params.config, params.params, path);
}

void save_params(const DecoderParams& params, const std::filesystem::path& path) {
  save_set("decoder", params.config, params.params, path);
}

EncoderParams load_encoder(const std::filesystem::path& path, const std::optional<BackboneConfig>& expected) {
  auto [config, params] = load_set("encoder", path, expected, false);
  return {config, std::move(params)};
}

DecoderParams load_decoder(const std::filesystem::path& path, const std::optional<BackboneConfig>& expected) {
  auto [config, params] = load_set("decoder", path, expected, true);
  return {config, std::move(params)};
}

}  // namespace dkl
