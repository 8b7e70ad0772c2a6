// Copyright 2026 The DKL Regression Authors
// SPDX-License-Identifier: Apache-2.0

#include <random>

#include <benchmark/benchmark.h>

#include "dkl/backbone.hpp"
#include "dkl/eval.hpp"
#include "dkl/linalg.hpp"
#include "dkl/random.hpp"
#include "dkl/svgp.hpp"

namespace dkl {
namespace {

Tensor random_images(std::size_t n, std::size_t s, std::uint64_t seed) {
  Rng rng(seed);
  std::uniform_real_distribution<double> u;
  Tensor x({n, 1, s, s});
  for (double& v : x.values()) v = u(rng);
  return x;
}

Tensor random_matrix(std::size_t r, std::size_t c, std::uint64_t seed) {
  Rng rng(seed);
  std::normal_distribution<double> normal;
  Tensor x({r, c});
  for (double& v : x.values()) v = normal(rng);
  return x;
}

void BM_Encode(benchmark::State& state) {
  const std::size_t n = static_cast<std::size_t>(state.range(0));
  const EncoderParams enc = init_encoder(BackboneConfig{}, 1);
  const Tensor x = random_images(n, 32, 2);
  for (auto _ : state) benchmark::DoNotOptimize(encode(enc, x));
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(n));
}
BENCHMARK(BM_Encode)->Arg(1)->Arg(64)->Unit(benchmark::kMillisecond);

void BM_SvgpPredict(benchmark::State& state) {
  const std::size_t m = static_cast<std::size_t>(state.range(0));
  const SVGPState s = make_svgp_state(random_matrix(m, 8, 3), KernelParams{}, std::log(0.1));
  const Tensor h = random_matrix(100, 8, 4);
  for (auto _ : state) benchmark::DoNotOptimize(svgp_predict(s, h));
}
BENCHMARK(BM_SvgpPredict)->Arg(16)->Arg(64)->Arg(128)->Unit(benchmark::kMicrosecond);

void BM_DklPredict(benchmark::State& state) {
  const EncoderParams enc = init_encoder(BackboneConfig{}, 1);
  const SVGPState s = make_svgp_state(random_matrix(64, 8, 3), KernelParams{}, std::log(0.1));
  const Tensor x = random_images(100, 32, 5);
  for (auto _ : state) benchmark::DoNotOptimize(svgp_predict(s, encode(enc, x)));
}
BENCHMARK(BM_DklPredict)->Unit(benchmark::kMillisecond);

void BM_McDropoutPredict(benchmark::State& state) {
  const std::size_t passes = static_cast<std::size_t>(state.range(0));
  const EncoderParams enc = init_encoder(BackboneConfig{}, 1);
  const LinearHead head = init_linear_head(8, 1, 2);
  const Tensor x = random_images(100, 32, 5);
  for (auto _ : state) benchmark::DoNotOptimize(mc_dropout_predict(enc, head, x, passes, 0));
}
BENCHMARK(BM_McDropoutPredict)->Arg(10)->Arg(50)->Unit(benchmark::kMillisecond);

void BM_Cholesky(benchmark::State& state) {
  const std::size_t n = static_cast<std::size_t>(state.range(0));
  const Tensor a = random_matrix(n, n, 6);
  Tensor spd = linalg::matmul(a, linalg::transpose(a));
  for (std::size_t i = 0; i < n; ++i) spd.at(i, i) += static_cast<double>(n);
  for (auto _ : state) benchmark::DoNotOptimize(linalg::cholesky(spd));
}
BENCHMARK(BM_Cholesky)->Arg(64)->Arg(256)->Unit(benchmark::kMicrosecond);

}  // namespace
}  // namespace dkl

BENCHMARK_MAIN();
