// Copyright 2026 The DKL Regression Authors
// SPDX-License-Identifier: Apache-2.0

#include "dkl/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "dkl/errors.hpp"
#include "dkl/linalg.hpp"

namespace dkl::ad {
namespace {

[[noreturn]] void shape_fail(Primitive kind, const std::string& detail) {
  throw ShapeError(std::string(primitive_name(kind)) + ": " + detail);
}

std::string shapes_of(const std::vector<const Tensor*>& ts) {
  std::string s;
  for (std::size_t i = 0; i < ts.size(); ++i) {
    if (i) s += " and ";
    s += shape_to_string(ts[i]->shape());
  }
  return s;
}

Shape broadcast_shape(const Shape& a, const Shape& b) {
  const std::size_t r = std::max(a.size(), b.size());
  Shape out(r);
  for (std::size_t i = 0; i < r; ++i) {
    const std::size_t da = i < r - a.size() ? 1 : a[i - (r - a.size())];
    const std::size_t db = i < r - b.size() ? 1 : b[i - (r - b.size())];
    if (da != db && da != 1 && db != 1) {
      throw ShapeError("cannot broadcast " + shape_to_string(a) + " with " + shape_to_string(b));
    }
    out[i] = std::max(da, db);
  }
  return out;
}

// Strides of `in` laid out against `target` (trailing alignment); broadcast
// axes get stride 0.
std::vector<std::size_t> broadcast_strides(const Shape& in, const Shape& target) {
  const std::size_t r = target.size();
  std::vector<std::size_t> strides(r, 0);
  std::size_t stride = 1;
  for (std::size_t k = in.size(); k-- > 0;) {
    const std::size_t axis = k + (r - in.size());
    strides[axis] = in[k] == 1 ? 0 : stride;
    stride *= in[k];
  }
  return strides;
}

template <typename Fn>
void for_each_broadcast(const Shape& in, const Shape& target, Fn&& fn) {
  const std::size_t r = target.size();
  const auto strides = broadcast_strides(in, target);
  const std::size_t total = shape_size(target);
  std::vector<std::size_t> idx(r, 0);
  std::size_t src = 0;
  for (std::size_t out = 0; out < total; ++out) {
    fn(out, src);
    for (std::size_t k = r; k-- > 0;) {
      ++idx[k];
      src += strides[k];
      if (idx[k] < target[k]) break;
      src -= strides[k] * idx[k];
      idx[k] = 0;
    }
  }
}

bool can_broadcast_to(const Shape& in, const Shape& target) {
  if (in.size() > target.size()) return false;
  for (std::size_t k = 0; k < in.size(); ++k) {
    const std::size_t t = target[k + target.size() - in.size()];
    if (in[k] != t && in[k] != 1) return false;
  }
  return true;
}

struct AxisSplit {
  std::size_t outer = 1, extent = 1, inner = 1;
};

AxisSplit split_at(const Shape& s, std::size_t axis) {
  AxisSplit sp;
  for (std::size_t i = 0; i < axis; ++i) sp.outer *= s[i];
  sp.extent = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) sp.inner *= s[i];
  return sp;
}

double softplus_value(double x) {
  return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

std::size_t conv_out(std::size_t in, std::size_t k, std::size_t stride, std::size_t pad) {
  return (in + 2 * pad - k) / stride + 1;
}

struct ConvDims {
  std::size_t n, c, h, w, o, k, oh, ow;
};

void conv2d_forward(const Tensor& x, const Tensor& w, const ConvDims& d, std::size_t s, std::size_t p,
                    Tensor& out) {
  const double* px = x.data();
  const double* pw = w.data();
  double* po = out.data();
  for (std::size_t n = 0; n < d.n; ++n) {
    for (std::size_t o = 0; o < d.o; ++o) {
      double* plane = po + ((n * d.o + o) * d.oh) * d.ow;
      for (std::size_t c = 0; c < d.c; ++c) {
        const double* xin = px + ((n * d.c + c) * d.h) * d.w;
        const double* ker = pw + ((o * d.c + c) * d.k) * d.k;
        for (std::size_t ki = 0; ki < d.k; ++ki) {
          for (std::size_t kj = 0; kj < d.k; ++kj) {
            const double wv = ker[ki * d.k + kj];
            for (std::size_t i = 0; i < d.oh; ++i) {
              const std::ptrdiff_t ii = static_cast<std::ptrdiff_t>(i * s + ki) - static_cast<std::ptrdiff_t>(p);
              if (ii < 0 || ii >= static_cast<std::ptrdiff_t>(d.h)) continue;
              const double* xrow = xin + static_cast<std::size_t>(ii) * d.w;
              double* orow = plane + i * d.ow;
              for (std::size_t j = 0; j < d.ow; ++j) {
                const std::ptrdiff_t jj = static_cast<std::ptrdiff_t>(j * s + kj) - static_cast<std::ptrdiff_t>(p);
                if (jj < 0 || jj >= static_cast<std::ptrdiff_t>(d.w)) continue;
                orow[j] += wv * xrow[jj];
              }
            }
          }
        }
      }
    }
  }
}

// Accumulates the adjoints of a strided correlation. `g` has the output
// layout (n, o, oh, ow); gx (n, c, h, w) and gw (o, c, k, k) are optional.
void conv2d_backward(const Tensor& x, const Tensor& w, const Tensor& g, const ConvDims& d, std::size_t s,
                     std::size_t p, Tensor* gx, Tensor* gw) {
  const double* px = x.data();
  const double* pw = w.data();
  const double* pg = g.data();
  for (std::size_t n = 0; n < d.n; ++n) {
    for (std::size_t o = 0; o < d.o; ++o) {
      const double* gplane = pg + ((n * d.o + o) * d.oh) * d.ow;
      for (std::size_t c = 0; c < d.c; ++c) {
        const std::size_t xoff = ((n * d.c + c) * d.h) * d.w;
        const std::size_t woff = ((o * d.c + c) * d.k) * d.k;
        for (std::size_t ki = 0; ki < d.k; ++ki) {
          for (std::size_t kj = 0; kj < d.k; ++kj) {
            const double wv = pw[woff + ki * d.k + kj];
            double acc = 0.0;
            for (std::size_t i = 0; i < d.oh; ++i) {
              const std::ptrdiff_t ii = static_cast<std::ptrdiff_t>(i * s + ki) - static_cast<std::ptrdiff_t>(p);
              if (ii < 0 || ii >= static_cast<std::ptrdiff_t>(d.h)) continue;
              const std::size_t rowoff = xoff + static_cast<std::size_t>(ii) * d.w;
              const double* grow = gplane + i * d.ow;
              for (std::size_t j = 0; j < d.ow; ++j) {
                const std::ptrdiff_t jj = static_cast<std::ptrdiff_t>(j * s + kj) - static_cast<std::ptrdiff_t>(p);
                if (jj < 0 || jj >= static_cast<std::ptrdiff_t>(d.w)) continue;
                const std::size_t xi = rowoff + static_cast<std::size_t>(jj);
                if (gx) gx->data()[xi] += wv * grow[j];
                acc += px[xi] * grow[j];
              }
            }
            if (gw) gw->data()[woff + ki * d.k + kj] += acc;
          }
        }
      }
    }
  }
}

// Transposed convolution: x (n, ci, h, w), w (ci, co, k, k) scattered into
// out (n, co, oh, ow). Shares index arithmetic with conv2d_backward.
void conv_transpose_forward(const Tensor& x, const Tensor& w, std::size_t n_, std::size_t ci_,
                            std::size_t h, std::size_t wd, std::size_t co_, std::size_t k,
                            std::size_t oh, std::size_t ow, std::size_t s, std::size_t p, Tensor& out) {
  const double* px = x.data();
  const double* pw = w.data();
  double* po = out.data();
  for (std::size_t n = 0; n < n_; ++n) {
    for (std::size_t ci = 0; ci < ci_; ++ci) {
      const double* xin = px + ((n * ci_ + ci) * h) * wd;
      for (std::size_t co = 0; co < co_; ++co) {
        double* plane = po + ((n * co_ + co) * oh) * ow;
        const double* ker = pw + ((ci * co_ + co) * k) * k;
        for (std::size_t ki = 0; ki < k; ++ki) {
          for (std::size_t kj = 0; kj < k; ++kj) {
            const double wv = ker[ki * k + kj];
            for (std::size_t i = 0; i < h; ++i) {
              const std::ptrdiff_t oi = static_cast<std::ptrdiff_t>(i * s + ki) - static_cast<std::ptrdiff_t>(p);
              if (oi < 0 || oi >= static_cast<std::ptrdiff_t>(oh)) continue;
              double* orow = plane + static_cast<std::size_t>(oi) * ow;
              const double* xrow = xin + i * wd;
              for (std::size_t j = 0; j < wd; ++j) {
                const std::ptrdiff_t oj = static_cast<std::ptrdiff_t>(j * s + kj) - static_cast<std::ptrdiff_t>(p);
                if (oj < 0 || oj >= static_cast<std::ptrdiff_t>(ow)) continue;
                orow[oj] += wv * xrow[j];
              }
            }
          }
        }
      }
    }
  }
}

void conv_transpose_backward(const Tensor& x, const Tensor& w, const Tensor& g, std::size_t n_,
                             std::size_t ci_, std::size_t h, std::size_t wd, std::size_t co_, std::size_t k,
                             std::size_t oh, std::size_t ow, std::size_t s, std::size_t p, Tensor* gx,
                             Tensor* gw) {
  const double* px = x.data();
  const double* pw = w.data();
  const double* pg = g.data();
  for (std::size_t n = 0; n < n_; ++n) {
    for (std::size_t ci = 0; ci < ci_; ++ci) {
      const std::size_t xoff = ((n * ci_ + ci) * h) * wd;
      for (std::size_t co = 0; co < co_; ++co) {
        const double* gplane = pg + ((n * co_ + co) * oh) * ow;
        const std::size_t woff = ((ci * co_ + co) * k) * k;
        for (std::size_t ki = 0; ki < k; ++ki) {
          for (std::size_t kj = 0; kj < k; ++kj) {
            const double wv = pw[woff + ki * k + kj];
            double acc = 0.0;
            for (std::size_t i = 0; i < h; ++i) {
              const std::ptrdiff_t oi = static_cast<std::ptrdiff_t>(i * s + ki) - static_cast<std::ptrdiff_t>(p);
              if (oi < 0 || oi >= static_cast<std::ptrdiff_t>(oh)) continue;
              const double* grow = gplane + static_cast<std::size_t>(oi) * ow;
              for (std::size_t j = 0; j < wd; ++j) {
                const std::ptrdiff_t oj = static_cast<std::ptrdiff_t>(j * s + kj) - static_cast<std::ptrdiff_t>(p);
                if (oj < 0 || oj >= static_cast<std::ptrdiff_t>(ow)) continue;
                const std::size_t xi = xoff + i * wd + j;
                if (gx) gx->data()[xi] += wv * grow[oj];
                acc += px[xi] * grow[oj];
              }
            }
            if (gw) gw->data()[woff + ki * k + kj] += acc;
          }
        }
      }
    }
  }
}

double matern52_value(double t) {
  const double u = std::sqrt(5.0 * t);
  return (1.0 + u + 5.0 * t / 3.0) * std::exp(-u);
}

double matern52_derivative(double t) {
  const double u = std::sqrt(5.0 * t);
  return -(5.0 / 6.0) * (1.0 + u) * std::exp(-u);
}

void accumulate(std::optional<Tensor>& slot, const Tensor& g) {
  if (!slot) {
    slot = g;
    return;
  }
  double* dst = slot->data();
  const double* src = g.data();
  for (std::size_t i = 0; i < g.size(); ++i) dst[i] += src[i];
}

Tensor matrix_view(const Tensor& t) {
  return t.rank() == 1 ? t.reshaped({t.dim(0), 1}) : t;
}

}  // namespace

std::string_view primitive_name(Primitive kind) {
  switch (kind) {
    case Primitive::Leaf: return "leaf";
    case Primitive::Add: return "add";
    case Primitive::Sub: return "sub";
    case Primitive::Mul: return "mul";
    case Primitive::Div: return "div";
    case Primitive::Neg: return "neg";
    case Primitive::Exp: return "exp";
    case Primitive::Log: return "log";
    case Primitive::Sqrt: return "sqrt";
    case Primitive::Power: return "power";
    case Primitive::MatMul: return "matmul";
    case Primitive::Transpose: return "transpose";
    case Primitive::ReduceSum: return "reduce_sum";
    case Primitive::ReduceMean: return "reduce_mean";
    case Primitive::Relu: return "relu";
    case Primitive::Conv2d: return "conv2d";
    case Primitive::ConvTranspose2d: return "conv_transpose2d";
    case Primitive::MaxPool2d: return "max_pool2d";
    case Primitive::Reshape: return "reshape";
    case Primitive::Concat: return "concat";
    case Primitive::Slice: return "slice";
    case Primitive::Softplus: return "softplus";
    case Primitive::Broadcast: return "broadcast";
    case Primitive::Cholesky: return "cholesky";
    case Primitive::TriangularSolve: return "triangular_solve";
    case Primitive::LogDetCholesky: return "log_det_from_cholesky";
    case Primitive::IndexSelect: return "index_select";
    case Primitive::PairwiseSqDist: return "pairwise_sqdist";
    case Primitive::RowNorm: return "row_norm";
    case Primitive::Matern52Profile: return "matern52_profile";
  }
  return "unknown";
}

const Tensor& Gradients::at(NodeId id) const {
  if (!contains(id)) throw InvalidArgument("no gradient recorded for node " + std::to_string(id));
  return *grads_[id];
}

NodeId Graph::push(Node node) {
  nodes_.push_back(std::move(node));
  return nodes_.size() - 1;
}

NodeId Graph::constant(Tensor value) {
  return push(Node{Primitive::Leaf, {}, {}, std::move(value), false, {}});
}

NodeId Graph::parameter(Tensor value) {
  return push(Node{Primitive::Leaf, {}, {}, std::move(value), true, {}});
}

NodeId Graph::broadcast_if_needed(NodeId id, const Shape& target) {
  if (nodes_.at(id).value.shape() == target) return id;
  Attributes a;
  a.shape = target;
  return apply(Primitive::Broadcast, {id}, a);
}

NodeId Graph::apply(Primitive kind, std::vector<NodeId> inputs, Attributes attrs) {
  for (NodeId id : inputs) {
    if (id >= nodes_.size()) throw InvalidArgument("unknown node id " + std::to_string(id));
  }
  auto in = [&](std::size_t i) -> const Tensor& { return nodes_[inputs[i]].value; };
  auto require_arity = [&](std::size_t n) {
    if (inputs.size() != n) {
      shape_fail(kind, "expected " + std::to_string(n) + " inputs, got " + std::to_string(inputs.size()));
    }
  };

  // Elementwise binaries: insert explicit broadcast nodes first.
  if (kind == Primitive::Add || kind == Primitive::Sub || kind == Primitive::Mul || kind == Primitive::Div) {
    require_arity(2);
    if (in(0).shape() != in(1).shape()) {
      Shape target;
      try {
        target = broadcast_shape(in(0).shape(), in(1).shape());
      } catch (const ShapeError&) {
        shape_fail(kind, "incompatible shapes " + shapes_of({&in(0), &in(1)}));
      }
      const NodeId a = broadcast_if_needed(inputs[0], target);
      const NodeId b = broadcast_if_needed(inputs[1], target);
      return apply(kind, {a, b}, std::move(attrs));
    }
  }

  Tensor out;
  std::vector<std::size_t> aux;

  switch (kind) {
    case Primitive::Leaf:
      throw InvalidArgument("leaves are created with constant() or parameter()");

    case Primitive::Add:
    case Primitive::Sub:
    case Primitive::Mul:
    case Primitive::Div: {
      const Tensor& a = in(0);
      const Tensor& b = in(1);
      out = Tensor(a.shape());
      for (std::size_t i = 0; i < a.size(); ++i) {
        switch (kind) {
          case Primitive::Add: out[i] = a[i] + b[i]; break;
          case Primitive::Sub: out[i] = a[i] - b[i]; break;
          case Primitive::Mul: out[i] = a[i] * b[i]; break;
          default:
            if (b[i] == 0.0) throw DomainError("div: division by zero at element " + std::to_string(i));
            out[i] = a[i] / b[i];
        }
      }
      break;
    }

    case Primitive::Neg:
    case Primitive::Exp:
    case Primitive::Log:
    case Primitive::Sqrt:
    case Primitive::Power:
    case Primitive::Relu:
    case Primitive::Softplus:
    case Primitive::Matern52Profile: {
      require_arity(1);
      const Tensor& x = in(0);
      out = Tensor(x.shape());
      for (std::size_t i = 0; i < x.size(); ++i) {
        const double v = x[i];
        switch (kind) {
          case Primitive::Neg: out[i] = -v; break;
          case Primitive::Exp: out[i] = std::exp(v); break;
          case Primitive::Log:
            if (!(v > 0.0)) throw DomainError("log of non-positive value " + std::to_string(v));
            out[i] = std::log(v);
            break;
          case Primitive::Sqrt:
            if (!(v > 0.0)) throw DomainError("sqrt of non-positive value " + std::to_string(v));
            out[i] = std::sqrt(v);
            break;
          case Primitive::Power:
            if (v < 0.0 && attrs.exponent != std::floor(attrs.exponent)) {
              throw DomainError("power: negative base with non-integer exponent");
            }
            if (v == 0.0 && attrs.exponent < 1.0) {
              throw DomainError("power: zero base with exponent below 1");
            }
            out[i] = std::pow(v, attrs.exponent);
            break;
          case Primitive::Relu: out[i] = v > 0.0 ? v : 0.0; break;
          case Primitive::Softplus: out[i] = softplus_value(v); break;
          default:
            if (v < 0.0) throw DomainError("matern52_profile of negative value " + std::to_string(v));
            out[i] = matern52_value(v);
        }
      }
      break;
    }

    case Primitive::MatMul: {
      require_arity(2);
      if (in(0).rank() != 2 || in(1).rank() != 2 || in(0).dim(1) != in(1).dim(0)) {
        shape_fail(kind, "incompatible shapes " + shapes_of({&in(0), &in(1)}));
      }
      out = linalg::matmul(in(0), in(1));
      break;
    }

    case Primitive::Transpose: {
      require_arity(1);
      if (in(0).rank() != 2) shape_fail(kind, "expects a matrix, got " + shape_to_string(in(0).shape()));
      out = linalg::transpose(in(0));
      break;
    }

    case Primitive::ReduceSum:
    case Primitive::ReduceMean: {
      require_arity(1);
      const Tensor& x = in(0);
      if (!attrs.axis) {
        double s = 0.0;
        for (double v : x.values()) s += v;
        if (kind == Primitive::ReduceMean) s /= static_cast<double>(x.size());
        out = Tensor::scalar(s);
      } else {
        const std::size_t axis = *attrs.axis;
        if (axis >= x.rank()) shape_fail(kind, "axis " + std::to_string(axis) + " out of range for " + shape_to_string(x.shape()));
        const AxisSplit sp = split_at(x.shape(), axis);
        Shape s = x.shape();
        s.erase(s.begin() + static_cast<std::ptrdiff_t>(axis));
        out = Tensor(s);
        const double scale = kind == Primitive::ReduceMean ? 1.0 / static_cast<double>(sp.extent) : 1.0;
        for (std::size_t o = 0; o < sp.outer; ++o) {
          for (std::size_t e = 0; e < sp.extent; ++e) {
            for (std::size_t i = 0; i < sp.inner; ++i) {
              out[o * sp.inner + i] += x[(o * sp.extent + e) * sp.inner + i];
            }
          }
        }
        if (scale != 1.0) {
          for (double& v : out.values()) v *= scale;
        }
      }
      break;
    }

    case Primitive::Conv2d: {
      require_arity(2);
      const Tensor& x = in(0);
      const Tensor& w = in(1);
      if (x.rank() != 4 || w.rank() != 4 || x.dim(1) != w.dim(1) || w.dim(2) != w.dim(3)) {
        shape_fail(kind, "incompatible input/kernel shapes " + shapes_of({&x, &w}));
      }
      if (attrs.stride == 0) shape_fail(kind, "stride must be positive");
      const std::size_t k = w.dim(2);
      if (x.dim(2) + 2 * attrs.padding < k || x.dim(3) + 2 * attrs.padding < k) {
        shape_fail(kind, "kernel larger than padded input " + shapes_of({&x, &w}));
      }
      ConvDims d{x.dim(0), x.dim(1), x.dim(2), x.dim(3), w.dim(0), k,
                 conv_out(x.dim(2), k, attrs.stride, attrs.padding), conv_out(x.dim(3), k, attrs.stride, attrs.padding)};
      out = Tensor({d.n, d.o, d.oh, d.ow});
      conv2d_forward(x, w, d, attrs.stride, attrs.padding, out);
      break;
    }

    case Primitive::ConvTranspose2d: {
      require_arity(2);
      const Tensor& x = in(0);
      const Tensor& w = in(1);
      if (x.rank() != 4 || w.rank() != 4 || x.dim(1) != w.dim(0) || w.dim(2) != w.dim(3)) {
        shape_fail(kind, "incompatible input/kernel shapes " + shapes_of({&x, &w}));
      }
      if (attrs.stride == 0 || attrs.output_padding >= std::max<std::size_t>(attrs.stride, 1)) {
        shape_fail(kind, "output_padding must be smaller than stride");
      }
      const std::size_t k = w.dim(2);
      const std::size_t full_h = (x.dim(2) - 1) * attrs.stride + k + attrs.output_padding;
      const std::size_t full_w = (x.dim(3) - 1) * attrs.stride + k + attrs.output_padding;
      if (full_h <= 2 * attrs.padding || full_w <= 2 * attrs.padding) shape_fail(kind, "padding removes the whole output");
      const std::size_t oh = full_h - 2 * attrs.padding, ow = full_w - 2 * attrs.padding;
      out = Tensor({x.dim(0), w.dim(1), oh, ow});
      conv_transpose_forward(x, w, x.dim(0), x.dim(1), x.dim(2), x.dim(3), w.dim(1), k, oh, ow, attrs.stride,
                             attrs.padding, out);
      break;
    }

    case Primitive::MaxPool2d: {
      require_arity(1);
      const Tensor& x = in(0);
      const std::size_t k = attrs.kernel, s = attrs.stride;
      if (x.rank() != 4 || k == 0 || s == 0 || x.dim(2) < k || x.dim(3) < k) {
        shape_fail(kind, "window " + std::to_string(k) + " invalid for " + shape_to_string(x.shape()));
      }
      const std::size_t oh = (x.dim(2) - k) / s + 1, ow = (x.dim(3) - k) / s + 1;
      out = Tensor({x.dim(0), x.dim(1), oh, ow});
      aux.resize(out.size());
      const std::size_t planes = x.dim(0) * x.dim(1);
      for (std::size_t pl = 0; pl < planes; ++pl) {
        const std::size_t base = pl * x.dim(2) * x.dim(3);
        for (std::size_t i = 0; i < oh; ++i) {
          for (std::size_t j = 0; j < ow; ++j) {
            std::size_t best = base + (i * s) * x.dim(3) + j * s;
            for (std::size_t ki = 0; ki < k; ++ki) {
              for (std::size_t kj = 0; kj < k; ++kj) {
                const std::size_t idx = base + (i * s + ki) * x.dim(3) + (j * s + kj);
                if (x[idx] > x[best]) best = idx;
              }
            }
            const std::size_t o = (pl * oh + i) * ow + j;
            out[o] = x[best];
            aux[o] = best;
          }
        }
      }
      break;
    }

    case Primitive::Reshape: {
      require_arity(1);
      if (shape_size(attrs.shape) != in(0).size()) {
        shape_fail(kind, "cannot reshape " + shape_to_string(in(0).shape()) + " to " + shape_to_string(attrs.shape));
      }
      out = in(0).reshaped(attrs.shape);
      break;
    }

    case Primitive::Broadcast: {
      require_arity(1);
      const Tensor& x = in(0);
      if (!can_broadcast_to(x.shape(), attrs.shape)) {
        shape_fail(kind, "cannot broadcast " + shape_to_string(x.shape()) + " to " + shape_to_string(attrs.shape));
      }
      out = Tensor(attrs.shape);
      double* po = out.data();
      const double* px = x.data();
      for_each_broadcast(x.shape(), attrs.shape, [&](std::size_t o, std::size_t s) { po[o] = px[s]; });
      break;
    }

    case Primitive::Concat: {
      if (inputs.empty()) shape_fail(kind, "needs at least one input");
      const std::size_t axis = attrs.axis.value_or(0);
      const Shape& s0 = in(0).shape();
      if (axis >= s0.size()) shape_fail(kind, "axis out of range for " + shape_to_string(s0));
      Shape s = s0;
      s[axis] = 0;
      for (std::size_t i = 0; i < inputs.size(); ++i) {
        const Shape& si = in(i).shape();
        bool ok = si.size() == s0.size();
        for (std::size_t d = 0; ok && d < si.size(); ++d) ok = d == axis || si[d] == s0[d];
        if (!ok) shape_fail(kind, "mismatched shapes " + shape_to_string(s0) + " and " + shape_to_string(si));
        s[axis] += si[axis];
      }
      out = Tensor(s);
      const AxisSplit sp = split_at(s, axis);
      std::size_t offset = 0;
      for (std::size_t i = 0; i < inputs.size(); ++i) {
        const std::size_t ext = in(i).shape()[axis];
        for (std::size_t o = 0; o < sp.outer; ++o) {
          std::copy_n(in(i).data() + o * ext * sp.inner, ext * sp.inner,
                      out.data() + (o * sp.extent + offset) * sp.inner);
        }
        offset += ext;
      }
      break;
    }

    case Primitive::Slice: {
      require_arity(1);
      const Tensor& x = in(0);
      const std::size_t axis = attrs.axis.value_or(0);
      if (axis >= x.rank() || attrs.begin >= attrs.end || attrs.end > x.dim(axis)) {
        shape_fail(kind, "range [" + std::to_string(attrs.begin) + ", " + std::to_string(attrs.end) +
                             ") invalid for " + shape_to_string(x.shape()));
      }
      const AxisSplit sp = split_at(x.shape(), axis);
      Shape s = x.shape();
      s[axis] = attrs.end - attrs.begin;
      out = Tensor(s);
      const std::size_t ext = s[axis];
      for (std::size_t o = 0; o < sp.outer; ++o) {
        std::copy_n(x.data() + (o * sp.extent + attrs.begin) * sp.inner, ext * sp.inner,
                    out.data() + o * ext * sp.inner);
      }
      break;
    }

    case Primitive::IndexSelect: {
      require_arity(1);
      if (in(0).rank() == 0 || attrs.indices.empty()) shape_fail(kind, "needs a ranked input and indices");
      for (std::size_t idx : attrs.indices) {
        if (idx >= in(0).dim(0)) {
          shape_fail(kind, "index " + std::to_string(idx) + " out of range for " + shape_to_string(in(0).shape()));
        }
      }
      out = in(0).gather_rows(attrs.indices);
      break;
    }

    case Primitive::Cholesky: {
      require_arity(1);
      const Tensor& a = in(0);
      if (a.rank() != 2 || a.dim(0) != a.dim(1)) shape_fail(kind, "expects a square matrix, got " + shape_to_string(a.shape()));
      out = linalg::cholesky(a);
      break;
    }

    case Primitive::TriangularSolve: {
      require_arity(2);
      const Tensor& t = in(0);
      const Tensor& b = in(1);
      if (t.rank() != 2 || t.dim(0) != t.dim(1) || b.rank() < 1 || b.rank() > 2 || b.dim(0) != t.dim(0)) {
        shape_fail(kind, "incompatible shapes " + shapes_of({&t, &b}));
      }
      out = linalg::solve_triangular(t, b, attrs.lower);
      break;
    }

    case Primitive::LogDetCholesky: {
      require_arity(1);
      const Tensor& l = in(0);
      if (l.rank() != 2 || l.dim(0) != l.dim(1)) shape_fail(kind, "expects a square matrix, got " + shape_to_string(l.shape()));
      double s = 0.0;
      for (std::size_t i = 0; i < l.dim(0); ++i) {
        const double d = l.at(i, i);
        if (!(d > 0.0)) {
          throw DomainError("log_det_from_cholesky: non-positive diagonal " + std::to_string(d) + " at index " +
                            std::to_string(i));
        }
        s += std::log(d);
      }
      out = Tensor::scalar(2.0 * s);
      break;
    }

    case Primitive::PairwiseSqDist: {
      require_arity(2);
      const Tensor& a = in(0);
      const Tensor& b = in(1);
      if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(1)) {
        shape_fail(kind, "incompatible shapes " + shapes_of({&a, &b}));
      }
      const std::size_t na = a.dim(0), nb = b.dim(0), h = a.dim(1);
      out = Tensor({na, nb});
      for (std::size_t i = 0; i < na; ++i) {
        const double* ai = a.data() + i * h;
        for (std::size_t j = 0; j < nb; ++j) {
          const double* bj = b.data() + j * h;
          double s = 0.0;
          for (std::size_t k = 0; k < h; ++k) {
            const double d = ai[k] - bj[k];
            s += d * d;
          }
          out.at(i, j) = s;
        }
      }
      break;
    }

    case Primitive::RowNorm: {
      require_arity(1);
      const Tensor& x = in(0);
      if (x.rank() != 2) shape_fail(kind, "expects a matrix, got " + shape_to_string(x.shape()));
      out = Tensor({x.dim(0)});
      for (std::size_t i = 0; i < x.dim(0); ++i) {
        double s = 0.0;
        for (std::size_t k = 0; k < x.dim(1); ++k) s += x.at(i, k) * x.at(i, k);
        out[i] = std::sqrt(s);
      }
      break;
    }
  }

  if (!out.all_finite()) {
    throw NumericError(std::string(primitive_name(kind)) + " produced a non-finite value");
  }

  bool needs_grad = false;
  for (NodeId id : inputs) needs_grad = needs_grad || nodes_[id].requires_grad;
  return push(Node{kind, std::move(inputs), std::move(attrs), std::move(out), needs_grad, std::move(aux)});
}

Gradients Graph::backward(NodeId output) const {
  const Tensor& y = value(output);
  if (y.size() != 1) {
    throw ShapeError("backward requires a scalar output, got " + shape_to_string(y.shape()));
  }
  std::vector<std::optional<Tensor>> grads(nodes_.size());
  grads[output] = Tensor(y.shape(), 1.0);

  for (NodeId id = output + 1; id-- > 0;) {
    const Node& node = nodes_[id];
    if (!grads[id] || !node.requires_grad || node.kind == Primitive::Leaf) continue;
    const Tensor& g = *grads[id];
    const Tensor& out = node.value;
    auto x = [&](std::size_t i) -> const Tensor& { return nodes_[node.inputs[i]].value; };
    auto wants = [&](std::size_t i) { return nodes_[node.inputs[i]].requires_grad; };
    auto send = [&](std::size_t i, const Tensor& gi) { accumulate(grads[node.inputs[i]], gi); };

    switch (node.kind) {
      case Primitive::Leaf:
        break;

      case Primitive::Add:
        if (wants(0)) send(0, g);
        if (wants(1)) send(1, g);
        break;

      case Primitive::Sub:
        if (wants(0)) send(0, g);
        if (wants(1)) {
          Tensor t = g;
          for (double& v : t.values()) v = -v;
          send(1, t);
        }
        break;

      case Primitive::Mul: {
        if (wants(0)) {
          Tensor t(g.shape());
          for (std::size_t i = 0; i < g.size(); ++i) t[i] = g[i] * x(1)[i];
          send(0, t);
        }
        if (wants(1)) {
          Tensor t(g.shape());
          for (std::size_t i = 0; i < g.size(); ++i) t[i] = g[i] * x(0)[i];
          send(1, t);
        }
        break;
      }

      case Primitive::Div: {
        if (wants(0)) {
          Tensor t(g.shape());
          for (std::size_t i = 0; i < g.size(); ++i) t[i] = g[i] / x(1)[i];
          send(0, t);
        }
        if (wants(1)) {
          Tensor t(g.shape());
          for (std::size_t i = 0; i < g.size(); ++i) t[i] = -g[i] * out[i] / x(1)[i];
          send(1, t);
        }
        break;
      }

      case Primitive::Neg:
      case Primitive::Exp:
      case Primitive::Log:
      case Primitive::Sqrt:
      case Primitive::Power:
      case Primitive::Relu:
      case Primitive::Softplus:
      case Primitive::Matern52Profile: {
        const Tensor& xv = x(0);
        Tensor t(g.shape());
        for (std::size_t i = 0; i < g.size(); ++i) {
          double d = 0.0;
          switch (node.kind) {
            case Primitive::Neg: d = -1.0; break;
            case Primitive::Exp: d = out[i]; break;
            case Primitive::Log: d = 1.0 / xv[i]; break;
            case Primitive::Sqrt: d = 0.5 / out[i]; break;
            case Primitive::Power:
              d = node.attrs.exponent == 0.0 ? 0.0 : node.attrs.exponent * std::pow(xv[i], node.attrs.exponent - 1.0);
              break;
            case Primitive::Relu: d = xv[i] > 0.0 ? 1.0 : 0.0; break;
            case Primitive::Softplus: d = sigmoid(xv[i]); break;
            default: d = matern52_derivative(xv[i]);
          }
          t[i] = g[i] * d;
        }
        send(0, t);
        break;
      }

      case Primitive::MatMul:
        if (wants(0)) send(0, linalg::matmul(g, linalg::transpose(x(1))));
        if (wants(1)) send(1, linalg::matmul(linalg::transpose(x(0)), g));
        break;

      case Primitive::Transpose:
        send(0, linalg::transpose(g));
        break;

      case Primitive::ReduceSum:
      case Primitive::ReduceMean: {
        const Tensor& xv = x(0);
        Tensor t(xv.shape());
        if (!node.attrs.axis) {
          const double v = g.item() / (node.kind == Primitive::ReduceMean ? static_cast<double>(xv.size()) : 1.0);
          for (double& e : t.values()) e = v;
        } else {
          const AxisSplit sp = split_at(xv.shape(), *node.attrs.axis);
          const double scale = node.kind == Primitive::ReduceMean ? 1.0 / static_cast<double>(sp.extent) : 1.0;
          for (std::size_t o = 0; o < sp.outer; ++o) {
            for (std::size_t e = 0; e < sp.extent; ++e) {
              for (std::size_t i = 0; i < sp.inner; ++i) {
                t[(o * sp.extent + e) * sp.inner + i] = g[o * sp.inner + i] * scale;
              }
            }
          }
        }
        send(0, t);
        break;
      }

      case Primitive::Conv2d: {
        const Tensor& xv = x(0);
        const Tensor& wv = x(1);
        ConvDims d{xv.dim(0), xv.dim(1), xv.dim(2), xv.dim(3), wv.dim(0), wv.dim(2), out.dim(2), out.dim(3)};
        std::optional<Tensor> gx, gw;
        if (wants(0)) gx = Tensor(xv.shape());
        if (wants(1)) gw = Tensor(wv.shape());
        conv2d_backward(xv, wv, g, d, node.attrs.stride, node.attrs.padding, gx ? &*gx : nullptr,
                        gw ? &*gw : nullptr);
        if (gx) send(0, *gx);
        if (gw) send(1, *gw);
        break;
      }

      case Primitive::ConvTranspose2d: {
        const Tensor& xv = x(0);
        const Tensor& wv = x(1);
        std::optional<Tensor> gx, gw;
        if (wants(0)) gx = Tensor(xv.shape());
        if (wants(1)) gw = Tensor(wv.shape());
        conv_transpose_backward(xv, wv, g, xv.dim(0), xv.dim(1), xv.dim(2), xv.dim(3), wv.dim(1), wv.dim(2),
                                out.dim(2), out.dim(3), node.attrs.stride, node.attrs.padding,
                                gx ? &*gx : nullptr, gw ? &*gw : nullptr);
        if (gx) send(0, *gx);
        if (gw) send(1, *gw);
        break;
      }

      case Primitive::MaxPool2d: {
        Tensor t(x(0).shape());
        for (std::size_t o = 0; o < g.size(); ++o) t[node.aux[o]] += g[o];
        send(0, t);
        break;
      }

      case Primitive::Reshape:
        send(0, g.reshaped(x(0).shape()));
        break;

      case Primitive::Broadcast: {
        const Tensor& xv = x(0);
        Tensor t(xv.shape());
        double* pt = t.data();
        const double* pg = g.data();
        for_each_broadcast(xv.shape(), out.shape(), [&](std::size_t o, std::size_t s) { pt[s] += pg[o]; });
        send(0, t);
        break;
      }

      case Primitive::Concat: {
        const std::size_t axis = node.attrs.axis.value_or(0);
        const AxisSplit sp = split_at(out.shape(), axis);
        std::size_t offset = 0;
        for (std::size_t i = 0; i < node.inputs.size(); ++i) {
          const std::size_t ext = x(i).shape()[axis];
          if (wants(i)) {
            Tensor t(x(i).shape());
            for (std::size_t o = 0; o < sp.outer; ++o) {
              std::copy_n(g.data() + (o * sp.extent + offset) * sp.inner, ext * sp.inner,
                          t.data() + o * ext * sp.inner);
            }
            send(i, t);
          }
          offset += ext;
        }
        break;
      }

      case Primitive::Slice: {
        const std::size_t axis = node.attrs.axis.value_or(0);
        const AxisSplit sp = split_at(x(0).shape(), axis);
        const std::size_t ext = node.attrs.end - node.attrs.begin;
        Tensor t(x(0).shape());
        for (std::size_t o = 0; o < sp.outer; ++o) {
          std::copy_n(g.data() + o * ext * sp.inner, ext * sp.inner,
                      t.data() + (o * sp.extent + node.attrs.begin) * sp.inner);
        }
        send(0, t);
        break;
      }

      case Primitive::IndexSelect: {
        Tensor t(x(0).shape());
        const std::size_t stride = t.size() / t.dim(0);
        for (std::size_t r = 0; r < node.attrs.indices.size(); ++r) {
          const std::size_t dst = node.attrs.indices[r] * stride;
          for (std::size_t k = 0; k < stride; ++k) t[dst + k] += g[r * stride + k];
        }
        send(0, t);
        break;
      }

      case Primitive::Cholesky: {
        // A_bar = sym(L^-T Phi(L^T L_bar) L^-1), Phi = lower triangle with
        // halved diagonal.
        const Tensor& l = out;
        const std::size_t n = l.dim(0);
        Tensor lbar = g;
        for (std::size_t i = 0; i < n; ++i) {
          for (std::size_t j = i + 1; j < n; ++j) lbar.at(i, j) = 0.0;
        }
        Tensor p = linalg::matmul(linalg::transpose(l), lbar);
        for (std::size_t i = 0; i < n; ++i) {
          for (std::size_t j = i + 1; j < n; ++j) p.at(i, j) = 0.0;
          p.at(i, i) *= 0.5;
        }
        // S = L^-T P L^-1 = L^-T (L^-T P^T)^T.
        const Tensor lt = linalg::transpose(l);
        Tensor tmp = linalg::solve_triangular(lt, linalg::transpose(p), /*lower=*/false);
        Tensor s = linalg::solve_triangular(lt, linalg::transpose(tmp), /*lower=*/false);
        Tensor abar(s.shape());
        for (std::size_t i = 0; i < n; ++i) {
          for (std::size_t j = 0; j < n; ++j) abar.at(i, j) = 0.5 * (s.at(i, j) + s.at(j, i));
        }
        send(0, abar);
        break;
      }

      case Primitive::TriangularSolve: {
        const Tensor& t = x(0);
        const bool lower = node.attrs.lower;
        const Tensor bbar = linalg::solve_triangular(linalg::transpose(t), g, !lower);
        if (wants(1)) send(1, bbar);
        if (wants(0)) {
          const Tensor bm = matrix_view(bbar);
          const Tensor xm = matrix_view(out);
          Tensor tbar = linalg::matmul(bm, linalg::transpose(xm));
          const std::size_t n = t.dim(0);
          for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t j = 0; j < n; ++j) {
              const bool inside = lower ? j <= i : j >= i;
              tbar.at(i, j) = inside ? -tbar.at(i, j) : 0.0;
            }
          }
          send(0, tbar);
        }
        break;
      }

      case Primitive::LogDetCholesky: {
        const Tensor& l = x(0);
        Tensor t(l.shape());
        for (std::size_t i = 0; i < l.dim(0); ++i) t.at(i, i) = 2.0 * g.item() / l.at(i, i);
        send(0, t);
        break;
      }

      case Primitive::PairwiseSqDist: {
        const Tensor& a = x(0);
        const Tensor& b = x(1);
        const std::size_t na = a.dim(0), nb = b.dim(0), h = a.dim(1);
        Tensor ga(a.shape()), gb(b.shape());
        for (std::size_t i = 0; i < na; ++i) {
          for (std::size_t j = 0; j < nb; ++j) {
            const double gij = 2.0 * g.at(i, j);
            if (gij == 0.0) continue;
            for (std::size_t k = 0; k < h; ++k) {
              const double d = gij * (a.at(i, k) - b.at(j, k));
              ga.at(i, k) += d;
              gb.at(j, k) -= d;
            }
          }
        }
        if (wants(0)) send(0, ga);
        if (wants(1)) send(1, gb);
        break;
      }

      case Primitive::RowNorm: {
        const Tensor& xv = x(0);
        Tensor t(xv.shape());
        for (std::size_t i = 0; i < xv.dim(0); ++i) {
          if (out[i] == 0.0) continue;
          for (std::size_t k = 0; k < xv.dim(1); ++k) t.at(i, k) = g[i] * xv.at(i, k) / out[i];
        }
        send(0, t);
        break;
      }
    }
  }
  return Gradients(std::move(grads));
}

// ---------------------------------------------------------------------------
// Var front end.

Var constant(Graph& g, Tensor value) { return Var(g, g.constant(std::move(value))); }
Var constant(Graph& g, double value) { return Var(g, g.constant(Tensor::scalar(value))); }
Var parameter(Graph& g, Tensor value) { return Var(g, g.parameter(std::move(value))); }

Var apply(Primitive kind, std::vector<Var> inputs, Attributes attrs) {
  if (inputs.empty()) throw InvalidArgument("apply needs at least one input");
  Graph& g = inputs.front().graph();
  std::vector<NodeId> ids;
  ids.reserve(inputs.size());
  for (const Var& v : inputs) {
    if (&v.graph() != &g) throw InvalidArgument("inputs belong to different graphs");
    ids.push_back(v.id());
  }
  return Var(g, g.apply(kind, std::move(ids), std::move(attrs)));
}

Var operator+(Var a, Var b) { return apply(Primitive::Add, {a, b}); }
Var operator-(Var a, Var b) { return apply(Primitive::Sub, {a, b}); }
Var operator*(Var a, Var b) { return apply(Primitive::Mul, {a, b}); }
Var operator/(Var a, Var b) { return apply(Primitive::Div, {a, b}); }
Var operator-(Var a) { return apply(Primitive::Neg, {a}); }
Var operator+(Var a, double b) { return a + constant(a.graph(), b); }
Var operator+(double a, Var b) { return constant(b.graph(), a) + b; }
Var operator-(Var a, double b) { return a - constant(a.graph(), b); }
Var operator-(double a, Var b) { return constant(b.graph(), a) - b; }
Var operator*(Var a, double b) { return a * constant(a.graph(), b); }
Var operator*(double a, Var b) { return constant(b.graph(), a) * b; }
Var operator/(Var a, double b) { return a / constant(a.graph(), b); }
Var operator/(double a, Var b) { return constant(b.graph(), a) / b; }

Var exp(Var x) { return apply(Primitive::Exp, {x}); }
Var log(Var x) { return apply(Primitive::Log, {x}); }
Var sqrt(Var x) { return apply(Primitive::Sqrt, {x}); }

Var pow(Var x, double exponent) {
  Attributes a;
  a.exponent = exponent;
  return apply(Primitive::Power, {x}, a);
}

Var square(Var x) { return x * x; }
Var relu(Var x) { return apply(Primitive::Relu, {x}); }
Var softplus(Var x) { return apply(Primitive::Softplus, {x}); }
Var matmul(Var a, Var b) { return apply(Primitive::MatMul, {a, b}); }
Var transpose(Var x) { return apply(Primitive::Transpose, {x}); }
Var sum(Var x) { return apply(Primitive::ReduceSum, {x}); }

Var sum(Var x, std::size_t axis) {
  Attributes a;
  a.axis = axis;
  return apply(Primitive::ReduceSum, {x}, a);
}

Var mean(Var x) { return apply(Primitive::ReduceMean, {x}); }

Var mean(Var x, std::size_t axis) {
  Attributes a;
  a.axis = axis;
  return apply(Primitive::ReduceMean, {x}, a);
}

Var reshape(Var x, Shape shape) {
  Attributes a;
  a.shape = std::move(shape);
  return apply(Primitive::Reshape, {x}, a);
}

Var broadcast_to(Var x, Shape shape) {
  Attributes a;
  a.shape = std::move(shape);
  return apply(Primitive::Broadcast, {x}, a);
}

Var concat(std::vector<Var> xs, std::size_t axis) {
  Attributes a;
  a.axis = axis;
  return apply(Primitive::Concat, std::move(xs), a);
}

Var slice(Var x, std::size_t axis, std::size_t begin, std::size_t end) {
  Attributes a;
  a.axis = axis;
  a.begin = begin;
  a.end = end;
  return apply(Primitive::Slice, {x}, a);
}

Var index_select(Var x, std::vector<std::size_t> indices) {
  Attributes a;
  a.indices = std::move(indices);
  return apply(Primitive::IndexSelect, {x}, a);
}

Var conv2d(Var x, Var weight, std::size_t stride, std::size_t padding) {
  Attributes a;
  a.stride = stride;
  a.padding = padding;
  return apply(Primitive::Conv2d, {x, weight}, a);
}

Var conv_transpose2d(Var x, Var weight, std::size_t stride, std::size_t padding, std::size_t output_padding) {
  Attributes a;
  a.stride = stride;
  a.padding = padding;
  a.output_padding = output_padding;
  return apply(Primitive::ConvTranspose2d, {x, weight}, a);
}

Var max_pool2d(Var x, std::size_t kernel, std::size_t stride) {
  Attributes a;
  a.kernel = kernel;
  a.stride = stride;
  return apply(Primitive::MaxPool2d, {x}, a);
}

Var cholesky(Var a) { return apply(Primitive::Cholesky, {a}); }

Var triangular_solve(Var t, Var b, bool lower) {
  Attributes a;
  a.lower = lower;
  return apply(Primitive::TriangularSolve, {t, b}, a);
}

Var log_det_from_cholesky(Var l) { return apply(Primitive::LogDetCholesky, {l}); }
Var pairwise_sqdist(Var a, Var b) { return apply(Primitive::PairwiseSqDist, {a, b}); }
Var row_norm(Var x) { return apply(Primitive::RowNorm, {x}); }
Var matern52_profile(Var t) { return apply(Primitive::Matern52Profile, {t}); }

std::vector<Tensor> gradients_of(const Gradients& grads, const std::vector<Var>& vars) {
  std::vector<Tensor> out;
  out.reserve(vars.size());
  for (const Var& v : vars) out.push_back(grads.contains(v.id()) ? grads.at(v.id()) : Tensor(v.shape()));
  return out;
}

Tensor finite_difference_grad(const std::function<double(const Tensor&)>& f, const Tensor& x, double eps) {
  if (!(eps > 0.0)) throw InvalidArgument("finite_difference_grad: eps must be positive");
  Tensor grad(x.shape());
  Tensor probe = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = probe[i];
    probe[i] = orig + eps;
    const double up = f(probe);
    probe[i] = orig - eps;
    const double down = f(probe);
    probe[i] = orig;
    grad[i] = (up - down) / (2.0 * eps);
  }
  return grad;
}

}  // namespace dkl::ad
