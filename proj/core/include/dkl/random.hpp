// Copyright 2026 The DKL Regression Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <string_view>
#include <vector>

namespace dkl {

using Rng = std::mt19937_64;

/// Child seed for a named sub-stream; stable across runs and platforms.
std::uint64_t derive_seed(std::uint64_t seed, std::string_view label);
/// Child seed for the `counter`-th item of a stream (per image, per run).
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t counter);

/// Uniform random permutation of [0, n).
std::vector<std::size_t> permutation(std::size_t n, Rng& rng);

/// `m` distinct indices from [0, n), in draw order.
std::vector<std::size_t> sample_without_replacement(std::size_t n, std::size_t m, Rng& rng);

/// FNV-1a over bytes.
std::uint64_t fnv1a64(std::string_view bytes);

}  // namespace dkl
