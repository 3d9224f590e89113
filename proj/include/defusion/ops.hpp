#pragma once

#include <cmath>
#include <cstdint>
#include <memory>
#include <utility>
#include <vector>

#include "defusion/common.hpp"
#include "defusion/tensor.hpp"

namespace defusion {

namespace detail {

template <class Real>
Tensor<Real> make_node(Shape shape, std::vector<Real> data, const char* op,
                       std::vector<Tensor<Real>> inputs,
                       std::function<void(TensorNode<Real>&)> backward_fn) {
  auto node = std::make_shared<TensorNode<Real>>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  node->op_name = op;
  bool requires = false;
  node->parents.reserve(inputs.size());
  for (auto& in : inputs) {
    requires = requires || in.requires_grad();
    node->parents.push_back(in.node());
  }
  node->requires_grad = requires;
  if (requires) node->backward_fn = std::move(backward_fn);
  return Tensor<Real>(std::move(node));
}

template <class Real>
void check_same_shape(const char* op, const Tensor<Real>& a,
                      const Tensor<Real>& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError(strcat_msg(op, ": shape mismatch ", shape_str(a.shape()),
                                " vs ", shape_str(b.shape())));
  }
}

inline void check_axis(const char* op, const Shape& shape, int axis) {
  if (axis < 0 || axis >= static_cast<int>(shape.size())) {
    throw ShapeError(strcat_msg(op, ": axis ", axis, " out of range for shape ",
                                shape_str(shape)));
  }
}

struct LaneView {
  std::int64_t outer, len, inner;
};

inline LaneView lanes(const Shape& shape, int axis) {
  LaneView v{1, shape[axis], 1};
  for (int i = 0; i < axis; ++i) v.outer *= shape[i];
  for (int i = axis + 1; i < static_cast<int>(shape.size()); ++i)
    v.inner *= shape[i];
  return v;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise arithmetic
// ---------------------------------------------------------------------------

template <class Real>
Tensor<Real> add(const Tensor<Real>& a, const Tensor<Real>& b) {
  detail::check_same_shape("add", a, b);
  std::vector<Real> out(a.data().size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
  return detail::make_node<Real>(
      a.shape(), std::move(out), "add", {a, b}, [](TensorNode<Real>& self) {
        for (int p = 0; p < 2; ++p) {
          auto& parent = *self.parents[p];
          if (!parent.requires_grad) continue;
          for (size_t i = 0; i < self.grad.size(); ++i)
            parent.grad[i] += self.grad[i];
        }
      });
}

template <class Real>
Tensor<Real> sub(const Tensor<Real>& a, const Tensor<Real>& b) {
  detail::check_same_shape("subtract", a, b);
  std::vector<Real> out(a.data().size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] - b.data()[i];
  return detail::make_node<Real>(
      a.shape(), std::move(out), "subtract", {a, b},
      [](TensorNode<Real>& self) {
        auto& pa = *self.parents[0];
        auto& pb = *self.parents[1];
        if (pa.requires_grad)
          for (size_t i = 0; i < self.grad.size(); ++i)
            pa.grad[i] += self.grad[i];
        if (pb.requires_grad)
          for (size_t i = 0; i < self.grad.size(); ++i)
            pb.grad[i] -= self.grad[i];
      });
}

template <class Real>
Tensor<Real> mul(const Tensor<Real>& a, const Tensor<Real>& b) {
  detail::check_same_shape("multiply", a, b);
  std::vector<Real> out(a.data().size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
  return detail::make_node<Real>(
      a.shape(), std::move(out), "multiply", {a, b},
      [](TensorNode<Real>& self) {
        auto& pa = *self.parents[0];
        auto& pb = *self.parents[1];
        if (pa.requires_grad)
          for (size_t i = 0; i < self.grad.size(); ++i)
            pa.grad[i] += self.grad[i] * pb.data[i];
        if (pb.requires_grad)
          for (size_t i = 0; i < self.grad.size(); ++i)
            pb.grad[i] += self.grad[i] * pa.data[i];
      });
}

template <class Real>
Tensor<Real> scalar_mul(const Tensor<Real>& a, Real c) {
  std::vector<Real> out(a.data().size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * c;
  return detail::make_node<Real>(
      a.shape(), std::move(out), "scalar_multiply", {a},
      [c](TensorNode<Real>& self) {
        auto& pa = *self.parents[0];
        for (size_t i = 0; i < self.grad.size(); ++i)
          pa.grad[i] += self.grad[i] * c;
      });
}

template <class Real>
Tensor<Real> operator+(const Tensor<Real>& a, const Tensor<Real>& b) {
  return add(a, b);
}
template <class Real>
Tensor<Real> operator-(const Tensor<Real>& a, const Tensor<Real>& b) {
  return sub(a, b);
}
template <class Real>
Tensor<Real> operator*(const Tensor<Real>& a, const Tensor<Real>& b) {
  return mul(a, b);
}

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

template <class Real>
Tensor<Real> matmul(const Tensor<Real>& a, const Tensor<Real>& b) {
  if (a.shape().size() != 2 || b.shape().size() != 2 ||
      a.shape()[1] != b.shape()[0]) {
    throw ShapeError(strcat_msg("matmul: incompatible shapes ",
                                shape_str(a.shape()), " vs ",
                                shape_str(b.shape())));
  }
  const int n = a.shape()[0], k = a.shape()[1], m = b.shape()[1];
  std::vector<Real> out(static_cast<size_t>(n) * m, Real(0));
  const Real* pa = a.data().data();
  const Real* pb = b.data().data();
  for (int i = 0; i < n; ++i)
    for (int t = 0; t < k; ++t) {
      const Real aik = pa[i * k + t];
      Real* row = out.data() + static_cast<size_t>(i) * m;
      const Real* brow = pb + static_cast<size_t>(t) * m;
      for (int j = 0; j < m; ++j) row[j] += aik * brow[j];
    }
  return detail::make_node<Real>(
      {n, m}, std::move(out), "matmul", {a, b},
      [n, k, m](TensorNode<Real>& self) {
        auto& pa = *self.parents[0];
        auto& pb = *self.parents[1];
        const Real* g = self.grad.data();
        if (pa.requires_grad) {
          // dA[i,t] += sum_j g[i,j] * B[t,j]
          for (int i = 0; i < n; ++i)
            for (int t = 0; t < k; ++t) {
              Real acc = 0;
              const Real* grow = g + static_cast<size_t>(i) * m;
              const Real* brow = pb.data.data() + static_cast<size_t>(t) * m;
              for (int j = 0; j < m; ++j) acc += grow[j] * brow[j];
              pa.grad[i * k + t] += acc;
            }
        }
        if (pb.requires_grad) {
          // dB[t,j] += sum_i A[i,t] * g[i,j]
          for (int i = 0; i < n; ++i)
            for (int t = 0; t < k; ++t) {
              const Real ait = pa.data[i * k + t];
              Real* brow = pb.grad.data() + static_cast<size_t>(t) * m;
              const Real* grow = g + static_cast<size_t>(i) * m;
              for (int j = 0; j < m; ++j) brow[j] += ait * grow[j];
            }
        }
      });
}

template <class Real>
Tensor<Real> transpose(const Tensor<Real>& a) {
  if (a.shape().size() != 2)
    throw ShapeError(strcat_msg("transpose: expected 2-D tensor, got ",
                                shape_str(a.shape())));
  const int n = a.shape()[0], m = a.shape()[1];
  std::vector<Real> out(a.data().size());
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < m; ++j) out[j * n + i] = a.data()[i * m + j];
  return detail::make_node<Real>(
      {m, n}, std::move(out), "transpose", {a},
      [n, m](TensorNode<Real>& self) {
        auto& pa = *self.parents[0];
        for (int i = 0; i < n; ++i)
          for (int j = 0; j < m; ++j)
            pa.grad[i * m + j] += self.grad[j * n + i];
      });
}

/// Row-major affine map: y = x * W^T + b with x: (n, in), W: (out, in).
template <class Real>
Tensor<Real> linear(const Tensor<Real>& x, const Tensor<Real>& w,
                    const Tensor<Real>& b) {
  if (x.shape().size() != 2 || w.shape().size() != 2 ||
      x.shape()[1] != w.shape()[1]) {
    throw ShapeError(strcat_msg("linear: input ", shape_str(x.shape()),
                                " incompatible with weight ",
                                shape_str(w.shape())));
  }
  const int n = x.shape()[0], in = x.shape()[1], out_dim = w.shape()[0];
  const bool has_bias = b.defined();
  if (has_bias && (b.shape().size() != 1 || b.shape()[0] != out_dim)) {
    throw ShapeError(strcat_msg("linear: bias ", shape_str(b.shape()),
                                " incompatible with weight ",
                                shape_str(w.shape())));
  }
  std::vector<Real> out(static_cast<size_t>(n) * out_dim, Real(0));
  for (int i = 0; i < n; ++i) {
    Real* row = out.data() + static_cast<size_t>(i) * out_dim;
    if (has_bias)
      for (int o = 0; o < out_dim; ++o) row[o] = b.data()[o];
    for (int t = 0; t < in; ++t) {
      const Real xit = x.data()[i * in + t];
      for (int o = 0; o < out_dim; ++o) row[o] += xit * w.data()[o * in + t];
    }
  }
  std::vector<Tensor<Real>> inputs = {x, w};
  if (has_bias) inputs.push_back(b);
  return detail::make_node<Real>(
      {n, out_dim}, std::move(out), "linear", std::move(inputs),
      [n, in, out_dim, has_bias](TensorNode<Real>& self) {
        auto& px = *self.parents[0];
        auto& pw = *self.parents[1];
        const Real* g = self.grad.data();
        if (px.requires_grad) {
          // dx[i,t] += sum_o g[i,o] * W[o,t]
          for (int i = 0; i < n; ++i)
            for (int o = 0; o < out_dim; ++o) {
              const Real gio = g[i * out_dim + o];
              const Real* wrow = pw.data.data() + static_cast<size_t>(o) * in;
              Real* xrow = px.grad.data() + static_cast<size_t>(i) * in;
              for (int t = 0; t < in; ++t) xrow[t] += gio * wrow[t];
            }
        }
        if (pw.requires_grad) {
          // dW[o,t] += sum_i g[i,o] * x[i,t]
          for (int i = 0; i < n; ++i)
            for (int o = 0; o < out_dim; ++o) {
              const Real gio = g[i * out_dim + o];
              const Real* xrow = px.data.data() + static_cast<size_t>(i) * in;
              Real* wrow = pw.grad.data() + static_cast<size_t>(o) * in;
              for (int t = 0; t < in; ++t) wrow[t] += gio * xrow[t];
            }
        }
        if (has_bias && self.parents[2]->requires_grad) {
          auto& pb = *self.parents[2];
          for (int i = 0; i < n; ++i)
            for (int o = 0; o < out_dim; ++o)
              pb.grad[o] += g[i * out_dim + o];
        }
      });
}

template <class Real>
Tensor<Real> linear(const Tensor<Real>& x, const Tensor<Real>& w) {
  return linear(x, w, Tensor<Real>());
}

// ---------------------------------------------------------------------------
// Shape manipulation
// ---------------------------------------------------------------------------

template <class Real>
Tensor<Real> reshape(const Tensor<Real>& a, Shape new_shape) {
  if (numel(new_shape) != static_cast<std::int64_t>(a.data().size())) {
    throw ShapeError(strcat_msg("reshape: cannot view ", shape_str(a.shape()),
                                " as ", shape_str(new_shape)));
  }
  return detail::make_node<Real>(
      std::move(new_shape), a.data(), "reshape", {a},
      [](TensorNode<Real>& self) {
        auto& pa = *self.parents[0];
        for (size_t i = 0; i < self.grad.size(); ++i)
          pa.grad[i] += self.grad[i];
      });
}

template <class Real>
Tensor<Real> concat(const std::vector<Tensor<Real>>& parts, int axis) {
  if (parts.empty()) throw ShapeError("concat: empty input list");
  const Shape& first = parts[0].shape();
  detail::check_axis("concat", first, axis);
  int total = 0;
  for (const auto& p : parts) {
    if (p.shape().size() != first.size())
      throw ShapeError(strcat_msg("concat: rank mismatch ", shape_str(first),
                                  " vs ", shape_str(p.shape())));
    for (size_t d = 0; d < first.size(); ++d) {
      if (static_cast<int>(d) != axis && p.shape()[d] != first[d])
        throw ShapeError(strcat_msg("concat: shape mismatch ",
                                    shape_str(first), " vs ",
                                    shape_str(p.shape()), " on axis ", d));
    }
    total += p.shape()[axis];
  }
  Shape out_shape = first;
  out_shape[axis] = total;
  const auto lv = detail::lanes(out_shape, axis);
  std::vector<Real> out(static_cast<size_t>(numel(out_shape)));
  std::vector<int> extents;
  for (const auto& p : parts) extents.push_back(p.shape()[axis]);
  for (std::int64_t o = 0; o < lv.outer; ++o) {
    std::int64_t off = 0;
    for (size_t pi = 0; pi < parts.size(); ++pi) {
      const std::int64_t chunk = extents[pi] * lv.inner;
      const Real* src = parts[pi].data().data() + o * chunk;
      Real* dst = out.data() + (o * lv.len + off) * lv.inner;
      std::copy(src, src + chunk, dst);
      off += extents[pi];
    }
  }
  return detail::make_node<Real>(
      std::move(out_shape), std::move(out), "concat", parts,
      [lv, extents](TensorNode<Real>& self) {
        for (std::int64_t o = 0; o < lv.outer; ++o) {
          std::int64_t off = 0;
          for (size_t pi = 0; pi < self.parents.size(); ++pi) {
            auto& parent = *self.parents[pi];
            const std::int64_t chunk = extents[pi] * lv.inner;
            if (parent.requires_grad) {
              const Real* src =
                  self.grad.data() + (o * lv.len + off) * lv.inner;
              Real* dst = parent.grad.data() + o * chunk;
              for (std::int64_t i = 0; i < chunk; ++i) dst[i] += src[i];
            }
            off += extents[pi];
          }
        }
      });
}

template <class Real>
Tensor<Real> slice(const Tensor<Real>& a, int axis, int start, int len) {
  detail::check_axis("slice", a.shape(), axis);
  if (start < 0 || len <= 0 || start + len > a.shape()[axis]) {
    throw ShapeError(strcat_msg("slice: range [", start, ", ", start + len,
                                ") out of bounds for shape ",
                                shape_str(a.shape()), " axis ", axis));
  }
  Shape out_shape = a.shape();
  out_shape[axis] = len;
  const auto lv = detail::lanes(a.shape(), axis);
  std::vector<Real> out(static_cast<size_t>(numel(out_shape)));
  for (std::int64_t o = 0; o < lv.outer; ++o) {
    const Real* src = a.data().data() + (o * lv.len + start) * lv.inner;
    Real* dst = out.data() + o * len * lv.inner;
    std::copy(src, src + static_cast<std::int64_t>(len) * lv.inner, dst);
  }
  return detail::make_node<Real>(
      std::move(out_shape), std::move(out), "slice", {a},
      [lv, start, len](TensorNode<Real>& self) {
        auto& pa = *self.parents[0];
        for (std::int64_t o = 0; o < lv.outer; ++o) {
          const Real* src = self.grad.data() + o * len * lv.inner;
          Real* dst = pa.grad.data() + (o * lv.len + start) * lv.inner;
          for (std::int64_t i = 0; i < static_cast<std::int64_t>(len) * lv.inner;
               ++i)
            dst[i] += src[i];
        }
      });
}

/// Explicit broadcast with right-aligned semantics: every input dimension
/// must equal the target dimension or be 1; missing leading dims are added.
template <class Real>
Tensor<Real> broadcast_to(const Tensor<Real>& a, Shape target) {
  const Shape& in = a.shape();
  if (in.size() > target.size())
    throw ShapeError(strcat_msg("broadcast: rank of ", shape_str(in),
                                " exceeds target ", shape_str(target)));
  const int rank = static_cast<int>(target.size());
  const int pad = rank - static_cast<int>(in.size());
  Shape padded(rank, 1);
  for (size_t i = 0; i < in.size(); ++i) padded[pad + i] = in[i];
  for (int d = 0; d < rank; ++d) {
    if (padded[d] != target[d] && padded[d] != 1)
      throw ShapeError(strcat_msg("broadcast: cannot expand ", shape_str(in),
                                  " to ", shape_str(target)));
  }
  std::vector<std::int64_t> in_strides(rank, 0);
  std::int64_t s = 1;
  for (int d = rank - 1; d >= 0; --d) {
    in_strides[d] = (padded[d] == 1) ? 0 : s;
    if (padded[d] != 1) s *= padded[d];
  }
  const std::int64_t total = numel(target);
  std::vector<Real> out(static_cast<size_t>(total));
  std::vector<int> idx(rank, 0);
  std::int64_t src = 0;
  for (std::int64_t flat = 0; flat < total; ++flat) {
    out[flat] = a.data()[src];
    for (int d = rank - 1; d >= 0; --d) {
      if (++idx[d] < target[d]) {
        src += in_strides[d];
        break;
      }
      src -= in_strides[d] * (target[d] - 1);
      idx[d] = 0;
    }
  }
  return detail::make_node<Real>(
      std::move(target), std::move(out), "broadcast", {a},
      [in_strides, rank](TensorNode<Real>& self) {
        auto& pa = *self.parents[0];
        std::vector<int> idx(rank, 0);
        std::int64_t src = 0;
        const std::int64_t total = static_cast<std::int64_t>(self.grad.size());
        for (std::int64_t flat = 0; flat < total; ++flat) {
          pa.grad[src] += self.grad[flat];
          for (int d = rank - 1; d >= 0; --d) {
            if (++idx[d] < self.shape[d]) {
              src += in_strides[d];
              break;
            }
            src -= in_strides[d] * (self.shape[d] - 1);
            idx[d] = 0;
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Nonlinearities
// ---------------------------------------------------------------------------

template <class Real>
Tensor<Real> relu(const Tensor<Real>& a) {
  std::vector<Real> out(a.data().size());
  for (size_t i = 0; i < out.size(); ++i)
    out[i] = a.data()[i] > Real(0) ? a.data()[i] : Real(0);
  return detail::make_node<Real>(
      a.shape(), std::move(out), "relu", {a}, [](TensorNode<Real>& self) {
        auto& pa = *self.parents[0];
        for (size_t i = 0; i < self.grad.size(); ++i)
          if (pa.data[i] > Real(0)) pa.grad[i] += self.grad[i];
      });
}

template <class Real>
Tensor<Real> sigmoid(const Tensor<Real>& a) {
  std::vector<Real> out(a.data().size());
  for (size_t i = 0; i < out.size(); ++i)
    out[i] = Real(1) / (Real(1) + std::exp(-a.data()[i]));
  return detail::make_node<Real>(
      a.shape(), std::move(out), "sigmoid", {a}, [](TensorNode<Real>& self) {
        auto& pa = *self.parents[0];
        for (size_t i = 0; i < self.grad.size(); ++i) {
          const Real s = self.data[i];
          pa.grad[i] += self.grad[i] * s * (Real(1) - s);
        }
      });
}

template <class Real>
Tensor<Real> log(const Tensor<Real>& a) {
  std::vector<Real> out(a.data().size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = std::log(a.data()[i]);
  return detail::make_node<Real>(
      a.shape(), std::move(out), "log", {a}, [](TensorNode<Real>& self) {
        auto& pa = *self.parents[0];
        for (size_t i = 0; i < self.grad.size(); ++i)
          pa.grad[i] += self.grad[i] / pa.data[i];
      });
}

template <class Real>
Tensor<Real> softmax(const Tensor<Real>& a, int axis) {
  detail::check_axis("softmax", a.shape(), axis);
  const auto lv = detail::lanes(a.shape(), axis);
  std::vector<Real> out(a.data().size());
  for (std::int64_t o = 0; o < lv.outer; ++o)
    for (std::int64_t i = 0; i < lv.inner; ++i) {
      const std::int64_t base = o * lv.len * lv.inner + i;
      Real mx = a.data()[base];
      for (std::int64_t j = 1; j < lv.len; ++j)
        mx = std::max(mx, a.data()[base + j * lv.inner]);
      Real sum = 0;
      for (std::int64_t j = 0; j < lv.len; ++j) {
        const Real e = std::exp(a.data()[base + j * lv.inner] - mx);
        out[base + j * lv.inner] = e;
        sum += e;
      }
      for (std::int64_t j = 0; j < lv.len; ++j)
        out[base + j * lv.inner] /= sum;
    }
  return detail::make_node<Real>(
      a.shape(), std::move(out), "softmax", {a},
      [lv](TensorNode<Real>& self) {
        auto& pa = *self.parents[0];
        for (std::int64_t o = 0; o < lv.outer; ++o)
          for (std::int64_t i = 0; i < lv.inner; ++i) {
            const std::int64_t base = o * lv.len * lv.inner + i;
            Real dot = 0;
            for (std::int64_t j = 0; j < lv.len; ++j) {
              const std::int64_t k = base + j * lv.inner;
              dot += self.grad[k] * self.data[k];
            }
            for (std::int64_t j = 0; j < lv.len; ++j) {
              const std::int64_t k = base + j * lv.inner;
              pa.grad[k] += self.data[k] * (self.grad[k] - dot);
            }
          }
      });
}

/// Layer normalization along one axis with population variance. `gamma` and
/// `beta` (length = extent of the normalized axis) are optional; pass
/// default-constructed tensors for a pure normalization.
template <class Real>
Tensor<Real> layer_norm(const Tensor<Real>& a, int axis,
                        const Tensor<Real>& gamma, const Tensor<Real>& beta,
                        Real eps = Real(1e-5)) {
  detail::check_axis("layer_norm", a.shape(), axis);
  const bool affine = gamma.defined();
  const int extent = a.shape()[axis];
  if (affine) {
    if (!beta.defined())
      throw ShapeError("layer_norm: gamma given without beta");
    if (gamma.shape() != Shape{extent} || beta.shape() != Shape{extent})
      throw ShapeError(strcat_msg(
          "layer_norm: affine params must have shape [", extent, "], got ",
          shape_str(gamma.shape()), " and ", shape_str(beta.shape())));
  }
  const auto lv = detail::lanes(a.shape(), axis);
  std::vector<Real> out(a.data().size());
  auto xhat = std::make_shared<std::vector<Real>>(a.data().size());
  auto inv_std = std::make_shared<std::vector<Real>>(
      static_cast<size_t>(lv.outer * lv.inner));
  for (std::int64_t o = 0; o < lv.outer; ++o)
    for (std::int64_t i = 0; i < lv.inner; ++i) {
      const std::int64_t base = o * lv.len * lv.inner + i;
      Real mean = 0;
      for (std::int64_t j = 0; j < lv.len; ++j)
        mean += a.data()[base + j * lv.inner];
      mean /= static_cast<Real>(lv.len);
      Real var = 0;
      for (std::int64_t j = 0; j < lv.len; ++j) {
        const Real d = a.data()[base + j * lv.inner] - mean;
        var += d * d;
      }
      var /= static_cast<Real>(lv.len);
      const Real inv = Real(1) / std::sqrt(var + eps);
      (*inv_std)[o * lv.inner + i] = inv;
      for (std::int64_t j = 0; j < lv.len; ++j) {
        const std::int64_t k = base + j * lv.inner;
        const Real xh = (a.data()[k] - mean) * inv;
        (*xhat)[k] = xh;
        out[k] = affine ? gamma.data()[j] * xh + beta.data()[j] : xh;
      }
    }
  std::vector<Tensor<Real>> inputs = {a};
  if (affine) {
    inputs.push_back(gamma);
    inputs.push_back(beta);
  }
  return detail::make_node<Real>(
      a.shape(), std::move(out), "layer_norm", std::move(inputs),
      [lv, affine, xhat, inv_std](TensorNode<Real>& self) {
        auto& pa = *self.parents[0];
        TensorNode<Real>* pg = affine ? self.parents[1].get() : nullptr;
        TensorNode<Real>* pb = affine ? self.parents[2].get() : nullptr;
        const Real len = static_cast<Real>(lv.len);
        for (std::int64_t o = 0; o < lv.outer; ++o)
          for (std::int64_t i = 0; i < lv.inner; ++i) {
            const std::int64_t base = o * lv.len * lv.inner + i;
            const Real inv = (*inv_std)[o * lv.inner + i];
            Real sum_dxhat = 0, sum_dxhat_xhat = 0;
            for (std::int64_t j = 0; j < lv.len; ++j) {
              const std::int64_t k = base + j * lv.inner;
              const Real g = self.grad[k];
              const Real dxhat = affine ? g * pg->data[j] : g;
              sum_dxhat += dxhat;
              sum_dxhat_xhat += dxhat * (*xhat)[k];
              if (affine) {
                if (pg->requires_grad) pg->grad[j] += g * (*xhat)[k];
                if (pb->requires_grad) pb->grad[j] += g;
              }
            }
            if (!pa.requires_grad) continue;
            for (std::int64_t j = 0; j < lv.len; ++j) {
              const std::int64_t k = base + j * lv.inner;
              const Real g = self.grad[k];
              const Real dxhat = affine ? g * pg->data[j] : g;
              pa.grad[k] += inv * (dxhat - sum_dxhat / len -
                                   (*xhat)[k] * sum_dxhat_xhat / len);
            }
          }
      });
}

template <class Real>
Tensor<Real> layer_norm(const Tensor<Real>& a, int axis,
                        Real eps = Real(1e-5)) {
  return layer_norm(a, axis, Tensor<Real>(), Tensor<Real>(), eps);
}

// ---------------------------------------------------------------------------
// Convolution and pooling (single image, CHW layout)
// ---------------------------------------------------------------------------

template <class Real>
Tensor<Real> conv2d(const Tensor<Real>& x, const Tensor<Real>& w,
                    const Tensor<Real>& bias, int stride, int pad) {
  if (x.shape().size() != 3 || w.shape().size() != 4 ||
      x.shape()[0] != w.shape()[1]) {
    throw ShapeError(strcat_msg("conv2d: input ", shape_str(x.shape()),
                                " incompatible with kernel ",
                                shape_str(w.shape())));
  }
  if (stride < 1) throw ShapeError("conv2d: stride must be >= 1");
  const int cin = x.shape()[0], h = x.shape()[1], win = x.shape()[2];
  const int cout = w.shape()[0], kh = w.shape()[2], kw = w.shape()[3];
  const bool has_bias = bias.defined();
  if (has_bias && bias.shape() != Shape{cout})
    throw ShapeError(strcat_msg("conv2d: bias ", shape_str(bias.shape()),
                                " incompatible with kernel ",
                                shape_str(w.shape())));
  const int oh = (h + 2 * pad - kh) / stride + 1;
  const int ow = (win + 2 * pad - kw) / stride + 1;
  if (h + 2 * pad < kh || win + 2 * pad < kw)
    throw ShapeError(strcat_msg("conv2d: kernel ", shape_str(w.shape()),
                                " larger than padded input ",
                                shape_str(x.shape())));
  std::vector<Real> out(static_cast<size_t>(cout) * oh * ow, Real(0));
  const Real* px = x.data().data();
  const Real* pw = w.data().data();
  for (int co = 0; co < cout; ++co)
    for (int oy = 0; oy < oh; ++oy)
      for (int ox = 0; ox < ow; ++ox) {
        Real acc = has_bias ? bias.data()[co] : Real(0);
        for (int ci = 0; ci < cin; ++ci)
          for (int ky = 0; ky < kh; ++ky) {
            const int iy = oy * stride - pad + ky;
            if (iy < 0 || iy >= h) continue;
            const Real* xrow = px + (static_cast<size_t>(ci) * h + iy) * win;
            const Real* wrow =
                pw + ((static_cast<size_t>(co) * cin + ci) * kh + ky) * kw;
            for (int kx = 0; kx < kw; ++kx) {
              const int ix = ox * stride - pad + kx;
              if (ix < 0 || ix >= win) continue;
              acc += xrow[ix] * wrow[kx];
            }
          }
        out[(static_cast<size_t>(co) * oh + oy) * ow + ox] = acc;
      }
  std::vector<Tensor<Real>> inputs = {x, w};
  if (has_bias) inputs.push_back(bias);
  return detail::make_node<Real>(
      {cout, oh, ow}, std::move(out), "conv2d", std::move(inputs),
      [cin, h, win, cout, kh, kw, oh, ow, stride, pad,
       has_bias](TensorNode<Real>& self) {
        auto& px = *self.parents[0];
        auto& pw = *self.parents[1];
        TensorNode<Real>* pb = has_bias ? self.parents[2].get() : nullptr;
        for (int co = 0; co < cout; ++co)
          for (int oy = 0; oy < oh; ++oy)
            for (int ox = 0; ox < ow; ++ox) {
              const Real g =
                  self.grad[(static_cast<size_t>(co) * oh + oy) * ow + ox];
              if (g == Real(0)) continue;
              if (pb && pb->requires_grad) pb->grad[co] += g;
              for (int ci = 0; ci < cin; ++ci)
                for (int ky = 0; ky < kh; ++ky) {
                  const int iy = oy * stride - pad + ky;
                  if (iy < 0 || iy >= h) continue;
                  const size_t xoff = (static_cast<size_t>(ci) * h + iy) * win;
                  const size_t woff =
                      ((static_cast<size_t>(co) * cin + ci) * kh + ky) * kw;
                  for (int kx = 0; kx < kw; ++kx) {
                    const int ix = ox * stride - pad + kx;
                    if (ix < 0 || ix >= win) continue;
                    if (px.requires_grad)
                      px.grad[xoff + ix] += g * pw.data[woff + kx];
                    if (pw.requires_grad)
                      pw.grad[woff + kx] += g * px.data[xoff + ix];
                  }
                }
            }
      });
}

template <class Real>
Tensor<Real> conv2d(const Tensor<Real>& x, const Tensor<Real>& w, int stride,
                    int pad) {
  return conv2d(x, w, Tensor<Real>(), stride, pad);
}

template <class Real>
Tensor<Real> mean_pool2d(const Tensor<Real>& x, int k, int stride) {
  if (x.shape().size() != 3)
    throw ShapeError(strcat_msg("mean_pool2d: expected CHW input, got ",
                                shape_str(x.shape())));
  if (k < 1 || stride < 1)
    throw ShapeError("mean_pool2d: kernel and stride must be >= 1");
  const int c = x.shape()[0], h = x.shape()[1], w = x.shape()[2];
  if (h < k || w < k)
    throw ShapeError(strcat_msg("mean_pool2d: window ", k,
                                " larger than input ", shape_str(x.shape())));
  const int oh = (h - k) / stride + 1, ow = (w - k) / stride + 1;
  const Real norm = Real(1) / static_cast<Real>(k * k);
  std::vector<Real> out(static_cast<size_t>(c) * oh * ow);
  for (int ci = 0; ci < c; ++ci)
    for (int oy = 0; oy < oh; ++oy)
      for (int ox = 0; ox < ow; ++ox) {
        Real acc = 0;
        for (int ky = 0; ky < k; ++ky)
          for (int kx = 0; kx < k; ++kx)
            acc += x.data()[(static_cast<size_t>(ci) * h + oy * stride + ky) *
                                w +
                            ox * stride + kx];
        out[(static_cast<size_t>(ci) * oh + oy) * ow + ox] = acc * norm;
      }
  return detail::make_node<Real>(
      {c, oh, ow}, std::move(out), "mean_pool2d", {x},
      [c, h, w, oh, ow, k, stride, norm](TensorNode<Real>& self) {
        auto& px = *self.parents[0];
        for (int ci = 0; ci < c; ++ci)
          for (int oy = 0; oy < oh; ++oy)
            for (int ox = 0; ox < ow; ++ox) {
              const Real g =
                  self.grad[(static_cast<size_t>(ci) * oh + oy) * ow + ox] *
                  norm;
              for (int ky = 0; ky < k; ++ky)
                for (int kx = 0; kx < k; ++kx)
                  px.grad[(static_cast<size_t>(ci) * h + oy * stride + ky) *
                              w +
                          ox * stride + kx] += g;
            }
      });
}

/// (C, H, W) -> (C, 1, 1) channel means.
template <class Real>
Tensor<Real> global_avg_pool(const Tensor<Real>& x) {
  if (x.shape().size() != 3)
    throw ShapeError(strcat_msg("global_avg_pool: expected CHW input, got ",
                                shape_str(x.shape())));
  const int c = x.shape()[0];
  const std::int64_t hw =
      static_cast<std::int64_t>(x.shape()[1]) * x.shape()[2];
  const Real norm = Real(1) / static_cast<Real>(hw);
  std::vector<Real> out(static_cast<size_t>(c));
  for (int ci = 0; ci < c; ++ci) {
    Real acc = 0;
    for (std::int64_t i = 0; i < hw; ++i) acc += x.data()[ci * hw + i];
    out[ci] = acc * norm;
  }
  return detail::make_node<Real>(
      {c, 1, 1}, std::move(out), "global_avg_pool", {x},
      [c, hw, norm](TensorNode<Real>& self) {
        auto& px = *self.parents[0];
        for (int ci = 0; ci < c; ++ci) {
          const Real g = self.grad[ci] * norm;
          for (std::int64_t i = 0; i < hw; ++i) px.grad[ci * hw + i] += g;
        }
      });
}

// ---------------------------------------------------------------------------
// Reductions and losses
// ---------------------------------------------------------------------------

template <class Real>
Tensor<Real> sum_reduce(const Tensor<Real>& a) {
  Real acc = 0;
  for (Real v : a.data()) acc += v;
  return detail::make_node<Real>(
      {1}, {acc}, "sum_reduce", {a}, [](TensorNode<Real>& self) {
        auto& pa = *self.parents[0];
        const Real g = self.grad[0];
        for (auto& gv : pa.grad) gv += g;
      });
}

template <class Real>
Tensor<Real> mean_reduce(const Tensor<Real>& a) {
  Real acc = 0;
  for (Real v : a.data()) acc += v;
  const Real norm = Real(1) / static_cast<Real>(a.data().size());
  return detail::make_node<Real>(
      {1}, {acc * norm}, "mean_reduce", {a}, [norm](TensorNode<Real>& self) {
        auto& pa = *self.parents[0];
        const Real g = self.grad[0] * norm;
        for (auto& gv : pa.grad) gv += g;
      });
}

/// Scalar sum of |a - b|. The subgradient at zero is taken as 0.
template <class Real>
Tensor<Real> l1_distance(const Tensor<Real>& a, const Tensor<Real>& b) {
  detail::check_same_shape("l1_distance", a, b);
  Real acc = 0;
  for (size_t i = 0; i < a.data().size(); ++i)
    acc += std::abs(a.data()[i] - b.data()[i]);
  return detail::make_node<Real>(
      {1}, {acc}, "l1_distance", {a, b}, [](TensorNode<Real>& self) {
        auto& pa = *self.parents[0];
        auto& pb = *self.parents[1];
        const Real g = self.grad[0];
        for (size_t i = 0; i < pa.data.size(); ++i) {
          const Real d = pa.data[i] - pb.data[i];
          const Real s = d > Real(0) ? Real(1) : (d < Real(0) ? Real(-1) : Real(0));
          if (pa.requires_grad) pa.grad[i] += g * s;
          if (pb.requires_grad) pb.grad[i] -= g * s;
        }
      });
}

/// Mean binary cross entropy over a batch of probabilities in (0,1).
/// Probabilities are clamped to [1e-7, 1 - 1e-7] before the logs; the
/// gradient is zero where the clamp binds. Labels must be exactly 0 or 1
/// and receive no gradient.
template <class Real>
Tensor<Real> bce_mean(const Tensor<Real>& probs, const Tensor<Real>& labels) {
  detail::check_same_shape("bce_mean", probs, labels);
  const size_t n = probs.data().size();
  if (n == 0) throw ValueError("bce_mean: empty batch");
  constexpr Real kClamp = Real(1e-7);
  Real acc = 0;
  for (size_t i = 0; i < n; ++i) {
    const Real y = labels.data()[i];
    if (y != Real(0) && y != Real(1))
      throw ValueError(strcat_msg("bce_mean: label at index ", i,
                                  " is ", y, ", expected 0 or 1"));
    const Real p =
        std::min(Real(1) - kClamp, std::max(kClamp, probs.data()[i]));
    acc -= y * std::log(p) + (Real(1) - y) * std::log(Real(1) - p);
  }
  const Real norm = Real(1) / static_cast<Real>(n);
  return detail::make_node<Real>(
      {1}, {acc * norm}, "bce_mean", {probs, labels},
      [norm, kClamp](TensorNode<Real>& self) {
        auto& pp = *self.parents[0];
        auto& pl = *self.parents[1];
        if (!pp.requires_grad) return;
        const Real g = self.grad[0] * norm;
        for (size_t i = 0; i < pp.data.size(); ++i) {
          const Real raw = pp.data[i];
          if (raw < kClamp || raw > Real(1) - kClamp) continue;
          const Real y = pl.data[i];
          pp.grad[i] += g * (raw - y) / (raw * (Real(1) - raw));
        }
      });
}

}  // namespace defusion
