// Copyright 2026 The DKL Regression Authors
// SPDX-License-Identifier: Apache-2.0

// Tape-based reverse-mode differentiation over dense double tensors.
//
// A Graph records every primitive application in creation order, so the node
// list is a valid topological order and backward() is a single reverse sweep.
// Leaves are either constants or parameters; only parameters (and nodes that
// depend on them) receive gradients.
//
// Elementwise binary primitives accept operands of different shapes. The
// operands are first aligned on trailing dimensions and an explicit Broadcast
// node is recorded for each operand that needs expansion, so the adjoint of
// the broadcast (a reduce-sum over the expanded axes) is applied in backward.

#pragma once

#include <cstddef>
#include <functional>
#include <optional>
#include <string_view>
#include <vector>

#include "dkl/tensor.hpp"

namespace dkl::ad {

using NodeId = std::size_t;

enum class Primitive {
  Leaf,
  Add,
  Sub,
  Mul,
  Div,
  Neg,
  Exp,
  Log,
  Sqrt,
  Power,
  MatMul,
  Transpose,
  ReduceSum,
  ReduceMean,
  Relu,
  Conv2d,
  ConvTranspose2d,
  MaxPool2d,
  Reshape,
  Concat,
  Slice,
  Softplus,
  Broadcast,
  Cholesky,
  TriangularSolve,
  LogDetCholesky,
  IndexSelect,
  PairwiseSqDist,
  RowNorm,
  Matern52Profile,
};

std::string_view primitive_name(Primitive kind);

/// Static parameters of a primitive. Only the fields relevant to a given
/// primitive are read.
struct Attributes {
  std::size_t stride = 1;          // Conv2d, ConvTranspose2d, MaxPool2d
  std::size_t padding = 0;         // Conv2d, ConvTranspose2d
  std::size_t output_padding = 0;  // ConvTranspose2d
  std::size_t kernel = 2;          // MaxPool2d window
  std::optional<std::size_t> axis; // ReduceSum/Mean (nullopt = all), Concat, Slice
  std::size_t begin = 0;           // Slice
  std::size_t end = 0;             // Slice
  Shape shape;                     // Reshape, Broadcast
  double exponent = 1.0;           // Power
  bool lower = true;               // TriangularSolve
  std::vector<std::size_t> indices;  // IndexSelect
};

class Gradients {
 public:
  Gradients() = default;
  explicit Gradients(std::vector<std::optional<Tensor>> grads) : grads_(std::move(grads)) {}

  bool contains(NodeId id) const { return id < grads_.size() && grads_[id].has_value(); }
  /// Gradient of node `id`; throws if the node received none.
  const Tensor& at(NodeId id) const;

 private:
  std::vector<std::optional<Tensor>> grads_;
};

class Graph {
 public:
  NodeId constant(Tensor value);
  /// A leaf that requires a gradient.
  NodeId parameter(Tensor value);

  /// Evaluates `kind` on the given inputs and appends the result. Throws
  /// ShapeError, DomainError, NotPositiveDefiniteError, SingularError or
  /// NumericError; on error the graph is left unchanged.
  NodeId apply(Primitive kind, std::vector<NodeId> inputs, Attributes attrs = {});

  const Tensor& value(NodeId id) const { return nodes_.at(id).value; }
  Primitive kind(NodeId id) const { return nodes_.at(id).kind; }
  const std::vector<NodeId>& inputs(NodeId id) const { return nodes_.at(id).inputs; }
  bool requires_grad(NodeId id) const { return nodes_.at(id).requires_grad; }
  std::size_t size() const noexcept { return nodes_.size(); }

  /// Reverse sweep from a scalar-shaped node.
  Gradients backward(NodeId output) const;

 private:
  struct Node {
    Primitive kind;
    std::vector<NodeId> inputs;
    Attributes attrs;
    Tensor value;
    bool requires_grad;
    std::vector<std::size_t> aux;  // MaxPool2d argmax positions
  };

  NodeId push(Node node);
  NodeId broadcast_if_needed(NodeId id, const Shape& target);

  std::vector<Node> nodes_;
};

/// Handle to a graph node with operator overloads. The graph must outlive it.
class Var {
 public:
  Var() = default;
  Var(Graph& graph, NodeId id) : graph_(&graph), id_(id) {}

  Graph& graph() const { return *graph_; }
  NodeId id() const { return id_; }
  const Tensor& value() const { return graph_->value(id_); }
  const Shape& shape() const { return value().shape(); }

 private:
  Graph* graph_ = nullptr;
  NodeId id_ = 0;
};

Var constant(Graph& g, Tensor value);
Var constant(Graph& g, double value);
Var parameter(Graph& g, Tensor value);

Var apply(Primitive kind, std::vector<Var> inputs, Attributes attrs = {});

Var operator+(Var a, Var b);
Var operator-(Var a, Var b);
Var operator*(Var a, Var b);
Var operator/(Var a, Var b);
Var operator-(Var a);
Var operator+(Var a, double b);
Var operator+(double a, Var b);
Var operator-(Var a, double b);
Var operator-(double a, Var b);
Var operator*(Var a, double b);
Var operator*(double a, Var b);
Var operator/(Var a, double b);
Var operator/(double a, Var b);

Var exp(Var x);
Var log(Var x);
Var sqrt(Var x);
Var pow(Var x, double exponent);
Var square(Var x);
Var relu(Var x);
Var softplus(Var x);
Var matmul(Var a, Var b);
Var transpose(Var x);
Var sum(Var x);
Var sum(Var x, std::size_t axis);
Var mean(Var x);
Var mean(Var x, std::size_t axis);
Var reshape(Var x, Shape shape);
Var broadcast_to(Var x, Shape shape);
Var concat(std::vector<Var> xs, std::size_t axis);
Var slice(Var x, std::size_t axis, std::size_t begin, std::size_t end);
Var index_select(Var x, std::vector<std::size_t> indices);

/// x: (N, C, H, W), weight: (O, C, k, k).
Var conv2d(Var x, Var weight, std::size_t stride, std::size_t padding);
/// x: (N, Ci, H, W), weight: (Ci, Co, k, k). Output spatial size is
/// (H - 1) * stride - 2 * padding + k + output_padding.
Var conv_transpose2d(Var x, Var weight, std::size_t stride, std::size_t padding,
                     std::size_t output_padding);
Var max_pool2d(Var x, std::size_t kernel, std::size_t stride);

/// Lower Cholesky factor of (A + A^T) / 2.
Var cholesky(Var a);
/// Solves T X = B using only the lower (or upper) triangle of T.
Var triangular_solve(Var t, Var b, bool lower);
/// 2 * sum(log(diag(L))).
Var log_det_from_cholesky(Var l);

/// (a x h), (b x h) -> (a x b) squared euclidean distances.
Var pairwise_sqdist(Var a, Var b);
/// (n x h) -> (n) euclidean norm of each row; subgradient 0 at the origin.
Var row_norm(Var x);
/// (1 + sqrt(5t) + 5t/3) * exp(-sqrt(5t)) for t >= 0.
Var matern52_profile(Var t);

/// Central differences (f(x + eps e_i) - f(x - eps e_i)) / (2 eps).
/// Gradients for `vars` in order; zeros where no gradient reached a variable.
std::vector<Tensor> gradients_of(const Gradients& grads, const std::vector<Var>& vars);

Tensor finite_difference_grad(const std::function<double(const Tensor&)>& f, const Tensor& x,
                              double eps);

}  // namespace dkl::ad
