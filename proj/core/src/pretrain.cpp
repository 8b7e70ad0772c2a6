// Copyright 2026 The DKL Regression Authors
// SPDX-License-Identifier: Apache-2.0

#include "dkl/pretrain.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>

#include <spdlog/spdlog.h>

#include "dkl/errors.hpp"
#include "dkl/optim.hpp"
#include "dkl/random.hpp"

namespace dkl {
namespace {

constexpr std::size_t kMaxLloydIterations = 100;

std::vector<std::size_t> densify(const std::vector<std::size_t>& raw, std::size_t* num_classes) {
  std::map<std::size_t, std::size_t> remap;
  for (std::size_t v : raw) remap.emplace(v, 0);
  std::size_t next = 0;
  for (auto& [k, v] : remap) v = next++;
  std::vector<std::size_t> out(raw.size());
  for (std::size_t i = 0; i < raw.size(); ++i) out[i] = remap[raw[i]];
  *num_classes = next;
  return out;
}

double sq_distance(const Tensor& a, std::size_t i, const Tensor& b, std::size_t j) {
  const std::size_t d = a.dim(1);
  double s = 0.0;
  for (std::size_t k = 0; k < d; ++k) {
    const double t = a.at(i, k) - b.at(j, k);
    s += t * t;
  }
  return s;
}

Tensor as_matrix(const Tensor& y) {
  if (y.rank() == 1) return y.reshaped({y.dim(0), 1});
  if (y.rank() == 2) return y;
  throw ShapeError("targets must be (n) or (n x d), got " + shape_to_string(y.shape()));
}

}  // namespace

ClassLabeling label_by_histogram(const Tensor& y, std::size_t bins) {
  if (bins == 0) throw InvalidArgument("histogram labeling needs at least one bin");
  const Tensor m = as_matrix(y);
  if (m.dim(1) != 1) throw ShapeError("histogram labeling needs a single target column");
  const std::size_t n = m.dim(0);
  const auto [lo_it, hi_it] = std::minmax_element(m.values().begin(), m.values().end());
  const double lo = *lo_it, hi = *hi_it;
  std::vector<std::size_t> raw(n, 0);
  if (hi > lo) {
    for (std::size_t i = 0; i < n; ++i) {
      const double pos = (m[i] - lo) / (hi - lo) * static_cast<double>(bins);
      raw[i] = std::min(bins - 1, static_cast<std::size_t>(pos));
    }
  }
  ClassLabeling out;
  out.method = LabelMethod::Histogram;
  out.parameter = bins;
  out.labels = densify(raw, &out.num_classes);
  return out;
}

KMeansResult kmeans(const Tensor& points_in, std::size_t k, std::uint64_t seed) {
  const Tensor x = as_matrix(points_in);
  const std::size_t n = x.dim(0), d = x.dim(1);
  if (k < 1 || k > n) {
    throw InvalidArgument("k-means needs 1 <= k <= n, got k = " + std::to_string(k) + " and n = " + std::to_string(n));
  }
  Rng rng(derive_seed(seed, "kmeans"));

  // k-means++ seeding over distinct points.
  std::vector<std::size_t> chosen;
  std::vector<bool> used(n, false);
  std::vector<double> dist(n, std::numeric_limits<double>::infinity());
  chosen.push_back(std::uniform_int_distribution<std::size_t>(0, n - 1)(rng));
  used[chosen.back()] = true;
  while (chosen.size() < k) {
    const std::size_t last = chosen.back();
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      dist[i] = std::min(dist[i], sq_distance(x, i, x, last));
      if (!used[i]) total += dist[i];
    }
    std::size_t pick = n;
    if (total > 0.0) {
      double r = std::uniform_real_distribution<double>(0.0, total)(rng);
      for (std::size_t i = 0; i < n; ++i) {
        if (used[i] || dist[i] == 0.0) continue;
        pick = i;
        r -= dist[i];
        if (r <= 0.0) break;
      }
    }
    if (pick == n) {
      // Only duplicates remain: take the first unused index.
      pick = static_cast<std::size_t>(std::find(used.begin(), used.end(), false) - used.begin());
    }
    used[pick] = true;
    chosen.push_back(pick);
  }

  KMeansResult res;
  res.centers = x.gather_rows(chosen);
  res.labels.assign(n, 0);
  std::vector<std::size_t> prev(n, k);
  for (res.iterations = 0; res.iterations < kMaxLloydIterations; ++res.iterations) {
    for (std::size_t i = 0; i < n; ++i) {
      std::size_t best = 0;
      double best_d = sq_distance(x, i, res.centers, 0);
      for (std::size_t c = 1; c < k; ++c) {
        const double dc = sq_distance(x, i, res.centers, c);
        if (dc < best_d) {
          best_d = dc;
          best = c;
        }
      }
      res.labels[i] = best;
    }
    if (res.labels == prev) break;
    prev = res.labels;
    Tensor sums({k, d});
    std::vector<std::size_t> counts(k, 0);
    for (std::size_t i = 0; i < n; ++i) {
      ++counts[res.labels[i]];
      for (std::size_t j = 0; j < d; ++j) sums.at(res.labels[i], j) += x.at(i, j);
    }
    for (std::size_t c = 0; c < k; ++c) {
      if (counts[c] == 0) continue;
      for (std::size_t j = 0; j < d; ++j) res.centers.at(c, j) = sums.at(c, j) / static_cast<double>(counts[c]);
    }
  }
  return res;
}

ClassLabeling label_by_kmeans(const Tensor& y, std::size_t k, std::uint64_t seed) {
  const KMeansResult km = kmeans(y, k, seed);
  ClassLabeling out;
  out.method = LabelMethod::KMeans;
  out.parameter = k;
  out.labels = densify(km.labels, &out.num_classes);
  return out;
}

double row_distance(const Tensor& x, std::size_t i, std::size_t j) { return std::sqrt(sq_distance(x, i, x, j)); }

std::vector<Triplet> mine_semihard_triplets(const Tensor& embeddings, std::span<const std::size_t> labels,
                                            double margin) {
  if (embeddings.rank() != 2 || embeddings.dim(0) != labels.size()) {
    throw ShapeError("embeddings " + shape_to_string(embeddings.shape()) + " do not match " +
                     std::to_string(labels.size()) + " labels");
  }
  if (!(margin > 0.0)) throw InvalidArgument("triplet margin must be positive");
  const std::size_t b = labels.size();
  std::vector<Triplet> out;
  std::vector<double> dist(b);
  for (std::size_t a = 0; a < b; ++a) {
    for (std::size_t j = 0; j < b; ++j) dist[j] = row_distance(embeddings, a, j);
    for (std::size_t p = 0; p < b; ++p) {
      if (p == a || labels[p] != labels[a]) continue;
      std::size_t best = b;
      for (std::size_t n = 0; n < b; ++n) {
        if (labels[n] == labels[a]) continue;
        const double gap = dist[n] - dist[p];
        if (gap > 0.0 && gap < margin && (best == b || dist[n] < dist[best])) best = n;
      }
      if (best != b) out.push_back({a, p, best});
    }
  }
  return out;
}

ad::Var triplet_margin_loss(const std::vector<Triplet>& triplets, ad::Var embeddings, double margin) {
  ad::Graph& g = embeddings.graph();
  if (triplets.empty()) return ad::constant(g, 0.0);
  std::vector<std::size_t> a, p, n;
  for (const Triplet& t : triplets) {
    a.push_back(t.anchor);
    p.push_back(t.positive);
    n.push_back(t.negative);
  }
  const ad::Var ea = ad::index_select(embeddings, a);
  const ad::Var dap = ad::row_norm(ea - ad::index_select(embeddings, p));
  const ad::Var dan = ad::row_norm(ea - ad::index_select(embeddings, n));
  return ad::sum(ad::relu(dap - dan + margin));
}

double triplet_margin_loss(const std::vector<Triplet>& triplets, const Tensor& embeddings, double margin) {
  ad::Graph g;
  return triplet_margin_loss(triplets, ad::constant(g, embeddings), margin).value().item();
}

double map_at_r(const Tensor& embeddings, std::span<const std::size_t> labels) {
  if (embeddings.rank() != 2 || embeddings.dim(0) != labels.size()) {
    throw ShapeError("embeddings " + shape_to_string(embeddings.shape()) + " do not match " +
                     std::to_string(labels.size()) + " labels");
  }
  const std::size_t n = labels.size();
  std::map<std::size_t, std::size_t> class_size;
  for (std::size_t l : labels) ++class_size[l];
  double total = 0.0;
  std::size_t queries = 0;
  std::vector<std::pair<double, std::size_t>> order;
  for (std::size_t q = 0; q < n; ++q) {
    const std::size_t r = class_size[labels[q]] - 1;
    if (r == 0) continue;
    order.clear();
    for (std::size_t j = 0; j < n; ++j) {
      if (j != q) order.emplace_back(row_distance(embeddings, q, j), j);
    }
    std::partial_sort(order.begin(), order.begin() + static_cast<long>(r), order.end());
    double ap = 0.0;
    std::size_t hits = 0;
    for (std::size_t k = 0; k < r; ++k) {
      if (labels[order[k].second] == labels[q]) {
        ++hits;
        ap += static_cast<double>(hits) / static_cast<double>(k + 1);
      }
    }
    total += ap / static_cast<double>(r);
    ++queries;
  }
  if (queries == 0) throw InvalidArgument("MAP@R needs at least one class with two or more members");
  return total / static_cast<double>(queries);
}

void TripletConfig::validate() const {
  if (!(margin > 0.0)) throw ConfigError("triplet margin must be positive");
  if (batch_size < 3) throw ConfigError("triplet batch_size must be at least 3");
  if (max_epochs == 0) throw ConfigError("max_epochs must be at least 1");
  if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be positive");
}

DMLReport train_dml_with_report(const EncoderParams& encoder, const Tensor& train_images,
                                std::span<const std::size_t> train_labels, const Tensor& val_images,
                                std::span<const std::size_t> val_labels, const TripletConfig& config) {
  config.validate();
  const std::size_t n = train_images.dim(0);
  if (train_labels.size() != n) throw ShapeError("labeling does not cover the training images");
  if (val_labels.size() != val_images.dim(0)) throw ShapeError("labeling does not cover the validation images");

  DMLReport report;
  report.encoder = encoder;
  EncoderParams current = encoder;
  AdamState adam;
  double best = map_at_r(encode_batched(current, val_images), val_labels);
  report.val_map_at_r.push_back(best);
  std::size_t since_best = 0;
  const std::uint64_t shuffle_seed = derive_seed(config.seed, "dml-shuffle");

  for (std::size_t epoch = 1; epoch <= config.max_epochs; ++epoch) {
    Rng rng(derive_seed(shuffle_seed, static_cast<std::uint64_t>(epoch)));
    const std::vector<std::size_t> perm = permutation(n, rng);
    double epoch_loss = 0.0;
    std::size_t epoch_triplets = 0;
    for (std::size_t begin = 0; begin < n; begin += config.batch_size) {
      const std::size_t end = std::min(n, begin + config.batch_size);
      const std::vector<std::size_t> idx(perm.begin() + static_cast<long>(begin), perm.begin() + static_cast<long>(end));
      std::vector<std::size_t> batch_labels;
      for (std::size_t i : idx) batch_labels.push_back(train_labels[i]);

      ad::Graph g;
      const std::vector<ad::Var> vars = backbone::bind(g, current.params, true);
      const ad::Var emb = backbone::encode(current.config, vars, ad::constant(g, train_images.gather_rows(idx)),
                                          {current.config.dropout_rate, &rng});
      const std::vector<Triplet> triplets = mine_semihard_triplets(emb.value(), batch_labels, config.margin);
      if (triplets.empty()) continue;
      const ad::Var loss = triplet_margin_loss(triplets, emb, config.margin);
      epoch_loss += loss.value().item();
      epoch_triplets += triplets.size();
      const std::vector<Tensor> grads = ad::gradients_of(g.backward(loss.id()), vars);
      adam_step(current.params.tensors, grads, adam, config.learning_rate);
    }
    if (epoch_triplets == 0) spdlog::warn("dml epoch {}: no semi-hard triplets in any batch", epoch);

    const double score = map_at_r(encode_batched(current, val_images), val_labels);
    report.val_map_at_r.push_back(score);
    report.epoch_loss.push_back(epoch_loss);
    report.epochs_trained = epoch;
    spdlog::info("dml epoch {}: loss {:.6g}, {} triplets, val MAP@R {:.4f}", epoch, epoch_loss, epoch_triplets, score);
    if (score > best) {
      best = score;
      report.best_epoch = epoch;
      report.encoder = current;
      since_best = 0;
    } else {
      ++since_best;
    }
    if (since_best >= config.patience) break;
  }
  return report;
}

ad::Var cae_loss(ad::Var x, ad::Var x_hat) {
  if (x.shape() != x_hat.shape() || x.shape().empty()) {
    throw ShapeError("cae_loss shapes differ: " + shape_to_string(x.shape()) + " vs " + shape_to_string(x_hat.shape()));
  }
  const double n = static_cast<double>(x.shape()[0]);
  return ad::sum(ad::square(x - x_hat)) / n;
}

double cae_loss(const Tensor& x, const Tensor& x_hat) {
  ad::Graph g;
  return cae_loss(ad::constant(g, x), ad::constant(g, x_hat)).value().item();
}

namespace {

double full_cae_loss(const EncoderParams& enc, const DecoderParams& dec, const Tensor& images, std::size_t batch) {
  const std::size_t n = images.dim(0);
  double total = 0.0;
  for (std::size_t begin = 0; begin < n; begin += batch) {
    const std::size_t end = std::min(n, begin + batch);
    const Tensor x = images.rows(begin, end);
    total += cae_loss(x, decode(dec, encode(enc, x))) * static_cast<double>(end - begin);
  }
  return total / static_cast<double>(n);
}

}  // namespace

CAEReport train_cae(const EncoderParams& encoder, const DecoderParams& decoder, const Tensor& images,
                    const CAEConfig& config) {
  if (!(encoder.config == decoder.config)) throw ConfigError("encoder and decoder configs differ");
  if (config.batch_size == 0) throw ConfigError("CAE batch_size must be positive");
  const std::size_t n = images.dim(0);
  CAEReport report{encoder, decoder, {}};
  report.loss.push_back(full_cae_loss(report.encoder, report.decoder, images, 256));
  AdamState enc_state, dec_state;
  const std::uint64_t shuffle_seed = derive_seed(config.seed, "cae-shuffle");
  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    Rng rng(derive_seed(shuffle_seed, static_cast<std::uint64_t>(epoch)));
    const std::vector<std::size_t> perm = permutation(n, rng);
    for (std::size_t begin = 0; begin < n; begin += config.batch_size) {
      const std::size_t end = std::min(n, begin + config.batch_size);
      const std::vector<std::size_t> idx(perm.begin() + static_cast<long>(begin), perm.begin() + static_cast<long>(end));
      ad::Graph g;
      const std::vector<ad::Var> ev = backbone::bind(g, report.encoder.params, true);
      const std::vector<ad::Var> dv = backbone::bind(g, report.decoder.params, true);
      const ad::Var x = ad::constant(g, images.gather_rows(idx));
      const ad::Var loss =
          cae_loss(x, backbone::decode(report.decoder.config, dv,
                                       backbone::encode(report.encoder.config, ev, x, {report.encoder.config.dropout_rate, &rng})));
      const ad::Gradients grads = g.backward(loss.id());
      std::vector<Tensor> eg = ad::gradients_of(grads, ev), dg = ad::gradients_of(grads, dv);
      if (!all_finite(eg) || !all_finite(dg)) {
        spdlog::warn("cae epoch {}: non-finite gradient, skipping step", epoch);
        continue;
      }
      adam_step(report.encoder.params.tensors, eg, enc_state, config.learning_rate);
      adam_step(report.decoder.params.tensors, dg, dec_state, config.learning_rate);
    }
    report.loss.push_back(full_cae_loss(report.encoder, report.decoder, images, 256));
    spdlog::info("cae epoch {}: reconstruction loss {:.6g}", epoch, report.loss.back());
  }
  return report;
}

}  // namespace dkl
