// Copyright 2026 The DKL Regression Authors
// SPDX-License-Identifier: Apache-2.0

// Binary tensor archive shared by parameter files and checkpoints.
//
// Layout: the magic bytes "DKLA", a little-endian u64 holding the header
// length, a JSON header, then the tensor payloads as little-endian float64 in
// header order. The header has the form
//   {"meta": {...}, "tensors": [{"name": ..., "shape": [...], "offset": ...}]}
// where offset counts float64 values from the start of the payload.

#pragma once

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "dkl/tensor.hpp"

namespace dkl {

using NamedTensor = std::pair<std::string, Tensor>;

struct Archive {
  nlohmann::json meta = nlohmann::json::object();
  std::vector<NamedTensor> tensors;
};

void write_archive(const std::filesystem::path& path, const Archive& archive);

/// Throws IoError when the file cannot be opened and CorruptFileError when the
/// header or payload is malformed or truncated.
Archive read_archive(const std::filesystem::path& path);

/// Stable 64-bit hash of a JSON value (FNV-1a over its compact dump).
std::uint64_t json_hash(const nlohmann::json& value);

}  // namespace dkl
