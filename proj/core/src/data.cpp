// Copyright 2026 The DKL Regression Authors
// SPDX-License-Identifier: Apache-2.0

#include "dkl/data.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>

#include <nlohmann/json.hpp>

#include "dkl/errors.hpp"
#include "dkl/random.hpp"

namespace dkl {
namespace {

constexpr double kEdgeWidth = 0.5;        // pixels
constexpr double kBackgroundNoise = 0.05;
constexpr int kMaxAttempts = 100;

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

struct Blob {
  double cx, cy, rx, ry, intensity;
};

void render(const Blob& b, std::size_t size, Rng& rng, double* out) {
  std::normal_distribution<double> bg(0.0, kBackgroundNoise);
  const double sharp = std::min(b.rx, b.ry) / kEdgeWidth;
  for (std::size_t r = 0; r < size; ++r) {
    for (std::size_t c = 0; c < size; ++c) {
      const double dx = (static_cast<double>(c) + 0.5 - b.cx) / b.rx;
      const double dy = (static_cast<double>(r) + 0.5 - b.cy) / b.ry;
      const double rho = std::sqrt(dx * dx + dy * dy);
      out[r * size + c] = b.intensity * sigmoid((1.0 - rho) * sharp) + bg(rng);
    }
  }
}

void write_floats(const std::filesystem::path& path, const Tensor& t) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open '" + path.string() + "' for writing");
  for (double v : t.values()) {
    auto bits = std::bit_cast<std::uint32_t>(static_cast<float>(v));
    if constexpr (std::endian::native == std::endian::big) bits = __builtin_bswap32(bits);
    os.write(reinterpret_cast<const char*>(&bits), sizeof bits);
  }
  if (!os) throw IoError("write to '" + path.string() + "' failed");
}

void read_floats(const std::filesystem::path& path, Tensor& t) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open '" + path.string() + "'");
  for (double& v : t.values()) {
    std::uint32_t bits = 0;
    if (!is.read(reinterpret_cast<char*>(&bits), sizeof bits)) {
      throw CorruptFileError("corrupt dataset: '" + path.string() + "' is truncated");
    }
    if constexpr (std::endian::native == std::endian::big) bits = __builtin_bswap32(bits);
    v = static_cast<double>(std::bit_cast<float>(bits));
  }
}

std::uintmax_t size_of(const std::filesystem::path& path) {
  std::error_code ec;
  const auto s = std::filesystem::file_size(path, ec);
  if (ec) throw IoError("cannot stat '" + path.string() + "': " + ec.message());
  return s;
}

}  // namespace

std::string_view task_name(TaskKind task) { return task == TaskKind::BlobRadius ? "blob_radius" : "blob_bbox"; }

TaskKind parse_task(std::string_view name) {
  if (name == "blob_radius") return TaskKind::BlobRadius;
  if (name == "blob_bbox") return TaskKind::BlobBbox;
  throw ConfigError("unknown task '" + std::string(name) + "'");
}

std::size_t task_output_dim(TaskKind task) { return task == TaskKind::BlobRadius ? 1 : 4; }

void Dataset::validate() const {
  if (images.rank() != 4) throw ShapeError("images must be (n, C, H, W), got " + shape_to_string(images.shape()));
  if (targets.rank() != 2 || targets.dim(0) != images.dim(0)) {
    throw ShapeError("targets " + shape_to_string(targets.shape()) + " do not match images " +
                     shape_to_string(images.shape()));
  }
  if (!targets.all_finite()) throw NumericError("dataset targets hold non-finite values");
  if (ranges.size() != targets.dim(1)) throw ShapeError("dataset ranges do not match target width");
  if (task == task_name(TaskKind::BlobBbox)) {
    for (std::size_t i = 0; i < size(); ++i) {
      const double x1 = targets.at(i, 0), y1 = targets.at(i, 1), x2 = targets.at(i, 2), y2 = targets.at(i, 3);
      if (!(0.0 <= x1 && x1 < x2 && x2 <= 1.0 && 0.0 <= y1 && y1 < y2 && y2 <= 1.0)) {
        throw DomainError("bounding box of sample " + std::to_string(i) + " violates 0 <= x1 < x2 <= 1");
      }
    }
  }
}

Dataset Dataset::subset(const std::vector<std::size_t>& indices) const {
  return Dataset{images.gather_rows(indices), targets.gather_rows(indices), task, ranges};
}

void SyntheticSpec::validate() const {
  if (image_size < 16) throw ConfigError("image_size must be at least 16");
  if (n < 1) throw ConfigError("n must be at least 1");
  if (!(noise_level >= 0.0) || !std::isfinite(noise_level)) throw ConfigError("noise_level must be non-negative");
}

Dataset generate_blob_dataset(const SyntheticSpec& spec) { return generate_blob_dataset(spec, nullptr); }

Dataset generate_blob_dataset(const SyntheticSpec& spec, BlobDetails* details) {
  spec.validate();
  const std::size_t s = spec.image_size;
  const double sd = static_cast<double>(s);
  const std::size_t d = task_output_dim(spec.task);
  const double lo = 0.1 * sd, hi = 0.3 * sd;
  const double ref_size = 0.5 * (lo + hi);

  Dataset ds{Tensor({spec.n, 1, s, s}), Tensor({spec.n, d}), std::string(task_name(spec.task)), {}};
  if (spec.task == TaskKind::BlobRadius) {
    ds.ranges = {{lo, hi}};
  } else {
    ds.ranges.assign(4, {0.0, 1.0});
  }
  if (details) *details = BlobDetails{};

  const std::uint64_t base = derive_seed(spec.seed, "blob");
  for (std::size_t i = 0; i < spec.n; ++i) {
    Rng rng(derive_seed(base, static_cast<std::uint64_t>(i)));
    std::uniform_real_distribution<double> radius(lo, hi), pos(0.0, sd), level(0.5, 1.0);
    Blob b{};
    bool placed = false;
    for (int attempt = 0; attempt < kMaxAttempts && !placed; ++attempt) {
      b.rx = radius(rng);
      b.ry = spec.task == TaskKind::BlobRadius ? b.rx : radius(rng);
      b.cx = pos(rng);
      b.cy = pos(rng);
      placed = b.cx - b.rx >= 0.0 && b.cx + b.rx <= sd && b.cy - b.ry >= 0.0 && b.cy + b.ry <= sd;
    }
    if (!placed) {
      throw DomainError("could not place blob " + std::to_string(i) + " inside the image after " +
                        std::to_string(kMaxAttempts) + " attempts");
    }
    b.intensity = level(rng);
    render(b, s, rng, ds.images.data() + i * s * s);

    const double size = 0.5 * (b.rx + b.ry);
    const double noise_std = spec.noise_level * (spec.heteroscedastic ? size : ref_size);
    std::normal_distribution<double> noise(0.0, 1.0);
    if (spec.task == TaskKind::BlobRadius) {
      ds.targets.at(i, 0) = b.rx + noise_std * noise(rng);
    } else {
      const double clean[4] = {(b.cx - b.rx) / sd, (b.cy - b.ry) / sd, (b.cx + b.rx) / sd, (b.cy + b.ry) / sd};
      double box[4];
      for (int attempt = 0;; ++attempt) {
        for (int k = 0; k < 4; ++k) box[k] = std::clamp(clean[k] + noise_std / sd * noise(rng), 0.0, 1.0);
        if (box[0] < box[2] && box[1] < box[3]) break;
        if (attempt + 1 == kMaxAttempts) std::copy(clean, clean + 4, box);
      }
      for (int k = 0; k < 4; ++k) ds.targets.at(i, k) = box[k];
    }
    if (details) {
      details->size.push_back(size);
      details->noise_std.push_back(noise_std);
      details->intensity.push_back(b.intensity);
    }
  }
  return ds;
}

AugmentParams sample_augment_params(std::uint64_t seed) {
  Rng rng(seed);
  std::uniform_int_distribution<int> shift(-2, 2);
  std::uniform_real_distribution<double> angle(-10.0, 10.0);
  std::bernoulli_distribution flip(0.5);
  AugmentParams p;
  p.shift_x = shift(rng);
  p.shift_y = shift(rng);
  p.angle_deg = angle(rng);
  p.flip = flip(rng);
  return p;
}

Tensor apply_augmentation(const Tensor& image, const AugmentParams& params) {
  if (image.rank() != 3) throw ShapeError("augmentation expects (C, H, W), got " + shape_to_string(image.shape()));
  const std::size_t ch = image.dim(0), h = image.dim(1), w = image.dim(2);
  const auto ih = static_cast<long>(h), iw = static_cast<long>(w);
  Tensor cur = image;

  if (params.shift_x != 0 || params.shift_y != 0) {
    Tensor out(image.shape());
    for (std::size_t c = 0; c < ch; ++c) {
      for (long r = 0; r < ih; ++r) {
        for (long col = 0; col < iw; ++col) {
          const long sr = r - params.shift_y, sc = col - params.shift_x;
          if (sr < 0 || sc < 0 || sr >= ih || sc >= iw) continue;
          out[(c * h + r) * w + col] = cur[(c * h + sr) * w + sc];
        }
      }
    }
    cur = std::move(out);
  }

  if (params.angle_deg != 0.0) {
    const double t = params.angle_deg * std::numbers::pi / 180.0;
    const double ct = std::cos(t), st = std::sin(t);
    const double hx = 0.5 * static_cast<double>(w), hy = 0.5 * static_cast<double>(h);
    Tensor out(image.shape());
    auto at = [&](std::size_t c, long r, long col) {
      return (r < 0 || col < 0 || r >= ih || col >= iw) ? 0.0 : cur[(c * h + r) * w + col];
    };
    for (std::size_t c = 0; c < ch; ++c) {
      for (long r = 0; r < ih; ++r) {
        for (long col = 0; col < iw; ++col) {
          const double x = static_cast<double>(col) + 0.5 - hx;
          const double y = static_cast<double>(r) + 0.5 - hy;
          // Inverse map: sample the source at the point rotated by -t.
          const double u = ct * x - st * y + hx - 0.5;
          const double v = st * x + ct * y + hy - 0.5;
          const double fu = std::floor(u), fv = std::floor(v);
          const double au = u - fu, av = v - fv;
          const auto c0 = static_cast<long>(fu), r0 = static_cast<long>(fv);
          out[(c * h + r) * w + col] = (1 - av) * ((1 - au) * at(c, r0, c0) + au * at(c, r0, c0 + 1)) +
                                       av * ((1 - au) * at(c, r0 + 1, c0) + au * at(c, r0 + 1, c0 + 1));
        }
      }
    }
    cur = std::move(out);
  }

  if (params.flip) {
    for (std::size_t c = 0; c < ch; ++c) {
      for (std::size_t r = 0; r < h; ++r) {
        double* row = cur.data() + (c * h + r) * w;
        std::reverse(row, row + w);
      }
    }
  }
  return cur;
}

AugmentedSample augment(const Tensor& image, const Tensor& target, TaskKind task, std::uint64_t seed) {
  AugmentParams p = sample_augment_params(seed);
  if (task == TaskKind::BlobRadius) return {apply_augmentation(image, p), target};
  p.angle_deg = 0.0;
  p.flip = false;
  Tensor t = target;
  if (t.size() != 4) throw ShapeError("bbox targets have four entries, got " + shape_to_string(t.shape()));
  const double dx = static_cast<double>(p.shift_x) / static_cast<double>(image.dim(2));
  const double dy = static_cast<double>(p.shift_y) / static_cast<double>(image.dim(1));
  t[0] = std::clamp(t[0] + dx, 0.0, 1.0);
  t[2] = std::clamp(t[2] + dx, 0.0, 1.0);
  t[1] = std::clamp(t[1] + dy, 0.0, 1.0);
  t[3] = std::clamp(t[3] + dy, 0.0, 1.0);
  if (!(t[0] < t[2] && t[1] < t[3])) return {image, target};
  return {apply_augmentation(image, p), t};
}

std::pair<std::vector<std::size_t>, std::vector<std::size_t>> CVSplit::fold(std::size_t k) const {
  if (k >= folds.size()) throw InvalidArgument("fold " + std::to_string(k) + " out of range");
  std::vector<std::size_t> train;
  for (std::size_t j = 0; j < folds.size(); ++j) {
    if (j != k) train.insert(train.end(), folds[j].begin(), folds[j].end());
  }
  return {train, folds[k]};
}

CVSplit split_cv(std::size_t n, std::size_t folds, std::uint64_t seed) {
  if (folds < 2) throw InvalidArgument("split_cv needs at least 2 folds");
  if (n < 2 * folds) {
    throw InvalidArgument("split_cv needs n >= 2 * folds, got n = " + std::to_string(n) + " and folds = " +
                          std::to_string(folds));
  }
  const auto n_test = static_cast<std::size_t>(std::lround(static_cast<double>(n) / 10.0));
  if (n - n_test < folds) throw InvalidArgument("too few samples left for " + std::to_string(folds) + " folds");
  Rng rng(derive_seed(seed, "cv-split"));
  const std::vector<std::size_t> perm = permutation(n, rng);
  CVSplit split;
  split.test.assign(perm.begin(), perm.begin() + static_cast<long>(n_test));
  const std::size_t rest = n - n_test;
  for (std::size_t k = 0; k < folds; ++k) {
    const std::size_t b = n_test + k * rest / folds, e = n_test + (k + 1) * rest / folds;
    split.folds.emplace_back(perm.begin() + static_cast<long>(b), perm.begin() + static_cast<long>(e));
  }
  return split;
}

void save_dataset(const Dataset& dataset, const std::filesystem::path& dir) {
  dataset.validate();
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create '" + dir.string() + "': " + ec.message());
  nlohmann::json meta = {{"n", dataset.size()},
                         {"C", dataset.images.dim(1)},
                         {"H", dataset.images.dim(2)},
                         {"W", dataset.images.dim(3)},
                         {"d", dataset.output_dim()},
                         {"task", dataset.task},
                         {"ranges", dataset.ranges}};
  std::ofstream os(dir / "meta.json", std::ios::trunc);
  if (!os) throw IoError("cannot open '" + (dir / "meta.json").string() + "' for writing");
  os << meta.dump(2) << '\n';
  if (!os) throw IoError("write to '" + (dir / "meta.json").string() + "' failed");
  write_floats(dir / "images.bin", dataset.images);
  write_floats(dir / "targets.bin", dataset.targets);
}

Dataset load_dataset(const std::filesystem::path& dir) {
  const auto meta_path = dir / "meta.json";
  std::ifstream is(meta_path);
  if (!is) throw IoError("cannot open '" + meta_path.string() + "'");
  Dataset ds;
  std::size_t n = 0, c = 0, h = 0, w = 0, d = 0;
  try {
    const nlohmann::json meta = nlohmann::json::parse(is);
    n = meta.at("n").get<std::size_t>();
    c = meta.at("C").get<std::size_t>();
    h = meta.at("H").get<std::size_t>();
    w = meta.at("W").get<std::size_t>();
    d = meta.at("d").get<std::size_t>();
    ds.task = meta.at("task").get<std::string>();
    ds.ranges = meta.at("ranges").get<std::vector<std::pair<double, double>>>();
  } catch (const nlohmann::json::exception& e) {
    throw CorruptFileError("corrupt dataset: unreadable '" + meta_path.string() + "': " + e.what());
  }
  if (n == 0 || c == 0 || h == 0 || w == 0 || d == 0) {
    throw CorruptFileError("corrupt dataset: meta.json has a zero dimension");
  }
  const auto images_bytes = size_of(dir / "images.bin");
  const auto targets_bytes = size_of(dir / "targets.bin");
  const std::uintmax_t expect_images = static_cast<std::uintmax_t>(n) * c * h * w * 4;
  if (images_bytes != expect_images) {
    throw CorruptFileError("corrupt dataset: images.bin holds " + std::to_string(images_bytes) +
                           " bytes, meta.json implies " + std::to_string(expect_images));
  }
  if (targets_bytes != static_cast<std::uintmax_t>(n) * d * 4) {
    const double found = static_cast<double>(targets_bytes) / (4.0 * static_cast<double>(n));
    throw CorruptFileError("corrupt dataset: meta.json has d = " + std::to_string(d) + " but targets.bin implies d = " +
                           nlohmann::json(found).dump());
  }
  ds.images = Tensor({n, c, h, w});
  ds.targets = Tensor({n, d});
  read_floats(dir / "images.bin", ds.images);
  read_floats(dir / "targets.bin", ds.targets);
  ds.validate();
  return ds;
}

}  // namespace dkl
