// Copyright 2026 The DKL Regression Authors
// SPDX-License-Identifier: Apache-2.0

#include "dkl/archive.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include "dkl/errors.hpp"
#include "dkl/random.hpp"

namespace dkl {
namespace {

constexpr char kMagic[4] = {'D', 'K', 'L', 'A'};

template <typename T>
T to_little(T v) {
  if constexpr (std::endian::native == std::endian::big) {
    unsigned char b[sizeof(T)];
    std::memcpy(b, &v, sizeof(T));
    for (std::size_t i = 0; i < sizeof(T) / 2; ++i) std::swap(b[i], b[sizeof(T) - 1 - i]);
    std::memcpy(&v, b, sizeof(T));
  }
  return v;
}

void write_u64(std::ostream& os, std::uint64_t v) {
  v = to_little(v);
  os.write(reinterpret_cast<const char*>(&v), sizeof v);
}

}  // namespace

std::uint64_t json_hash(const nlohmann::json& value) { return fnv1a64(value.dump()); }

void write_archive(const std::filesystem::path& path, const Archive& archive) {
  nlohmann::json header;
  header["meta"] = archive.meta;
  header["tensors"] = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const auto& [name, t] : archive.tensors) {
    header["tensors"].push_back({{"name", name}, {"shape", t.shape()}, {"offset", offset}});
    offset += t.size();
  }
  const std::string text = header.dump();

  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open '" + path.string() + "' for writing");
  os.write(kMagic, sizeof kMagic);
  write_u64(os, text.size());
  os.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& [name, t] : archive.tensors) {
    for (double v : t.values()) {
      const double le = to_little(v);
      os.write(reinterpret_cast<const char*>(&le), sizeof le);
    }
  }
  if (!os) throw IoError("write to '" + path.string() + "' failed");
}

Archive read_archive(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open '" + path.string() + "'");
  const std::string where = " in '" + path.string() + "'";

  char magic[4];
  if (!is.read(magic, sizeof magic) || std::memcmp(magic, kMagic, sizeof magic) != 0) {
    throw CorruptFileError("bad magic" + where);
  }
  std::uint64_t header_len = 0;
  if (!is.read(reinterpret_cast<char*>(&header_len), sizeof header_len)) {
    throw CorruptFileError("truncated header length" + where);
  }
  header_len = to_little(header_len);
  const auto file_size = static_cast<std::uint64_t>(std::filesystem::file_size(path));
  if (header_len > file_size) throw CorruptFileError("header length exceeds file size" + where);
  std::string text(header_len, '\0');
  if (!is.read(text.data(), static_cast<std::streamsize>(header_len))) {
    throw CorruptFileError("truncated header" + where);
  }

  nlohmann::json header;
  try {
    header = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw CorruptFileError(std::string("unparsable header") + where + ": " + e.what());
  }

  Archive out;
  std::uint64_t expected_offset = 0;
  try {
    out.meta = header.at("meta");
    for (const auto& entry : header.at("tensors")) {
      const auto name = entry.at("name").get<std::string>();
      const auto shape = entry.at("shape").get<Shape>();
      const auto offset = entry.at("offset").get<std::uint64_t>();
      if (offset != expected_offset) throw CorruptFileError("tensor '" + name + "' has inconsistent offset" + where);
      Tensor t(shape);
      expected_offset += t.size();
      out.tensors.emplace_back(name, std::move(t));
    }
  } catch (const nlohmann::json::exception& e) {
    throw CorruptFileError(std::string("malformed header") + where + ": " + e.what());
  } catch (const ShapeError& e) {
    throw CorruptFileError(std::string("malformed tensor shape") + where + ": " + e.what());
  }

  const std::uint64_t payload = file_size - 12 - header_len;
  if (payload != expected_offset * sizeof(double)) {
    throw CorruptFileError("payload holds " + std::to_string(payload) + " bytes, header describes " +
                           std::to_string(expected_offset * sizeof(double)) + where);
  }
  for (auto& [name, t] : out.tensors) {
    if (!is.read(reinterpret_cast<char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(double)))) {
      throw CorruptFileError("truncated payload for '" + name + "'" + where);
    }
    for (double& v : t.values()) v = to_little(v);
  }
  return out;
}

}  // namespace dkl
