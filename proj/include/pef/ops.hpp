#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <vector>

#include "pef/tensor.hpp"

namespace pef {

namespace detail {

template <class Real>
bool needs_grad(const Tensor<Real>& t) {
  return t.requires_grad() || t.node()->backprop != nullptr;
}

template <class Real>
Tensor<Real> make_op(Shape shape, std::vector<Real> value,
                     std::vector<Tensor<Real>> inputs,
                     std::function<void(TensorNode<Real>&)> back) {
  Tensor<Real> out(std::move(shape), std::move(value), false);
  bool track = false;
  for (const auto& in : inputs) track = track || needs_grad(in);
  if (track) {
    auto n = out.node();
    n->requires_grad = true;
    for (const auto& in : inputs) n->inputs.push_back(in.node());
    n->backprop = std::move(back);
  }
  return out;
}

template <class Real>
void accum(const std::shared_ptr<TensorNode<Real>>& n,
           std::size_t i, Real v) {
  n->ensure_grad()[i] += v;
}

inline void check2d(const Shape& s, const char* who) {
  if (s.size() != 2) throw ShapeError(std::string(who) + ": expected 2-d tensor");
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise

template <class Real>
Tensor<Real> add(const Tensor<Real>& a, const Tensor<Real>& b) {
  if (a.shape() != b.shape())
    throw ShapeError("add: shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  std::vector<Real> v(a.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.at(i) + b.at(i);
  auto an = a.node(); auto bn = b.node();
  return detail::make_op<Real>(a.shape(), std::move(v), {a, b},
      [an, bn](TensorNode<Real>& o) {
        auto& ga = an->ensure_grad(); auto& gb = bn->ensure_grad();
        for (std::size_t i = 0; i < o.grad.size(); ++i) {
          ga[i] += o.grad[i];
          gb[i] += o.grad[i];
        }
      });
}

template <class Real>
Tensor<Real> sub(const Tensor<Real>& a, const Tensor<Real>& b) {
  if (a.shape() != b.shape())
    throw ShapeError("sub: shape mismatch");
  std::vector<Real> v(a.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.at(i) - b.at(i);
  auto an = a.node(); auto bn = b.node();
  return detail::make_op<Real>(a.shape(), std::move(v), {a, b},
      [an, bn](TensorNode<Real>& o) {
        auto& ga = an->ensure_grad(); auto& gb = bn->ensure_grad();
        for (std::size_t i = 0; i < o.grad.size(); ++i) {
          ga[i] += o.grad[i];
          gb[i] -= o.grad[i];
        }
      });
}

template <class Real>
Tensor<Real> mul(const Tensor<Real>& a, const Tensor<Real>& b) {
  if (a.shape() != b.shape())
    throw ShapeError("mul: shape mismatch");
  std::vector<Real> v(a.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.at(i) * b.at(i);
  auto an = a.node(); auto bn = b.node();
  return detail::make_op<Real>(a.shape(), std::move(v), {a, b},
      [an, bn](TensorNode<Real>& o) {
        auto& ga = an->ensure_grad(); auto& gb = bn->ensure_grad();
        for (std::size_t i = 0; i < o.grad.size(); ++i) {
          ga[i] += bn->value[i] * o.grad[i];
          gb[i] += an->value[i] * o.grad[i];
        }
      });
}

template <class Real>
Tensor<Real> scale(const Tensor<Real>& a, Real c) {
  std::vector<Real> v(a.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.at(i) * c;
  auto an = a.node();
  return detail::make_op<Real>(a.shape(), std::move(v), {a},
      [an, c](TensorNode<Real>& o) {
        auto& ga = an->ensure_grad();
        for (std::size_t i = 0; i < o.grad.size(); ++i) ga[i] += c * o.grad[i];
      });
}

// Multiply by a learnable scalar (size-1 tensor).
template <class Real>
Tensor<Real> scale_by(const Tensor<Real>& a, const Tensor<Real>& s) {
  if (s.size() != 1) throw ShapeError("scale_by: scalar tensor expected");
  const Real c = s.at(0);
  std::vector<Real> v(a.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.at(i) * c;
  auto an = a.node(); auto sn = s.node();
  return detail::make_op<Real>(a.shape(), std::move(v), {a, s},
      [an, sn, c](TensorNode<Real>& o) {
        auto& ga = an->ensure_grad(); auto& gs = sn->ensure_grad();
        Real acc = 0;
        for (std::size_t i = 0; i < o.grad.size(); ++i) {
          ga[i] += c * o.grad[i];
          acc += an->value[i] * o.grad[i];
        }
        gs[0] += acc;
      });
}

template <class Real>
Tensor<Real> exp_op(const Tensor<Real>& a) {
  std::vector<Real> v(a.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = std::exp(a.at(i));
  auto an = a.node();
  return detail::make_op<Real>(a.shape(), std::move(v), {a},
      [an](TensorNode<Real>& o) {
        auto& ga = an->ensure_grad();
        for (std::size_t i = 0; i < o.grad.size(); ++i)
          ga[i] += o.value[i] * o.grad[i];
      });
}

template <class Real>
Tensor<Real> sigmoid(const Tensor<Real>& a) {
  std::vector<Real> v(a.size());
  for (std::size_t i = 0; i < v.size(); ++i) {
    const Real x = a.at(i);
    v[i] = x >= 0 ? Real(1) / (Real(1) + std::exp(-x))
                  : std::exp(x) / (Real(1) + std::exp(x));
  }
  auto an = a.node();
  return detail::make_op<Real>(a.shape(), std::move(v), {a},
      [an](TensorNode<Real>& o) {
        auto& ga = an->ensure_grad();
        for (std::size_t i = 0; i < o.grad.size(); ++i)
          ga[i] += o.value[i] * (Real(1) - o.value[i]) * o.grad[i];
      });
}

template <class Real>
Tensor<Real> gelu(const Tensor<Real>& a) {
  constexpr double inv_sqrt2 = 0.7071067811865475244;
  constexpr double inv_sqrt2pi = 0.3989422804014326779;
  std::vector<Real> v(a.size());
  for (std::size_t i = 0; i < v.size(); ++i) {
    const double x = static_cast<double>(a.at(i));
    v[i] = static_cast<Real>(0.5 * x * (1.0 + std::erf(x * inv_sqrt2)));
  }
  auto an = a.node();
  return detail::make_op<Real>(a.shape(), std::move(v), {a},
      [an](TensorNode<Real>& o) {
        auto& ga = an->ensure_grad();
        for (std::size_t i = 0; i < o.grad.size(); ++i) {
          const double x = static_cast<double>(an->value[i]);
          const double cdf = 0.5 * (1.0 + std::erf(x * inv_sqrt2));
          const double pdf = inv_sqrt2pi * std::exp(-0.5 * x * x);
          ga[i] += static_cast<Real>(cdf + x * pdf) * o.grad[i];
        }
      });
}

// ---------------------------------------------------------------------------
// broadcast over rows/columns of a 2-d tensor

template <class Real>
Tensor<Real> add_rowvec(const Tensor<Real>& x, const Tensor<Real>& b) {
  detail::check2d(x.shape(), "add_rowvec");
  const int rows = x.dim(0), cols = x.dim(1);
  if (static_cast<int>(b.size()) != cols)
    throw ShapeError("add_rowvec: vector length mismatch");
  std::vector<Real> v(x.size());
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c)
      v[static_cast<std::size_t>(r) * cols + c] =
          x.at(static_cast<std::size_t>(r) * cols + c) + b.at(c);
  auto xn = x.node(); auto bn = b.node();
  return detail::make_op<Real>(x.shape(), std::move(v), {x, b},
      [xn, bn, rows, cols](TensorNode<Real>& o) {
        auto& gx = xn->ensure_grad(); auto& gb = bn->ensure_grad();
        for (int r = 0; r < rows; ++r)
          for (int c = 0; c < cols; ++c) {
            const Real g = o.grad[static_cast<std::size_t>(r) * cols + c];
            gx[static_cast<std::size_t>(r) * cols + c] += g;
            gb[c] += g;
          }
      });
}

template <class Real>
Tensor<Real> scale_rowvec(const Tensor<Real>& x, const Tensor<Real>& g) {
  detail::check2d(x.shape(), "scale_rowvec");
  const int rows = x.dim(0), cols = x.dim(1);
  if (static_cast<int>(g.size()) != cols)
    throw ShapeError("scale_rowvec: vector length mismatch");
  std::vector<Real> v(x.size());
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c)
      v[static_cast<std::size_t>(r) * cols + c] =
          x.at(static_cast<std::size_t>(r) * cols + c) * g.at(c);
  auto xn = x.node(); auto gn = g.node();
  return detail::make_op<Real>(x.shape(), std::move(v), {x, g},
      [xn, gn, rows, cols](TensorNode<Real>& o) {
        auto& gx = xn->ensure_grad(); auto& gg = gn->ensure_grad();
        for (int r = 0; r < rows; ++r)
          for (int c = 0; c < cols; ++c) {
            const std::size_t i = static_cast<std::size_t>(r) * cols + c;
            gx[i] += gn->value[c] * o.grad[i];
            gg[c] += xn->value[i] * o.grad[i];
          }
      });
}

// ---------------------------------------------------------------------------
// shape manipulation

template <class Real>
Tensor<Real> reshape(const Tensor<Real>& x, Shape shape) {
  if (numel(shape) != x.size())
    throw ShapeError("reshape: element count mismatch");
  auto xn = x.node();
  return detail::make_op<Real>(std::move(shape), x.data(), {x},
      [xn](TensorNode<Real>& o) {
        auto& gx = xn->ensure_grad();
        for (std::size_t i = 0; i < o.grad.size(); ++i) gx[i] += o.grad[i];
      });
}

template <class Real>
Tensor<Real> transpose(const Tensor<Real>& x) {
  detail::check2d(x.shape(), "transpose");
  const int rows = x.dim(0), cols = x.dim(1);
  std::vector<Real> v(x.size());
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c)
      v[static_cast<std::size_t>(c) * rows + r] =
          x.at(static_cast<std::size_t>(r) * cols + c);
  auto xn = x.node();
  return detail::make_op<Real>({cols, rows}, std::move(v), {x},
      [xn, rows, cols](TensorNode<Real>& o) {
        auto& gx = xn->ensure_grad();
        for (int r = 0; r < rows; ++r)
          for (int c = 0; c < cols; ++c)
            gx[static_cast<std::size_t>(r) * cols + c] +=
                o.grad[static_cast<std::size_t>(c) * rows + r];
      });
}

template <class Real>
Tensor<Real> concat_rows(const Tensor<Real>& a, const Tensor<Real>& b) {
  detail::check2d(a.shape(), "concat_rows");
  detail::check2d(b.shape(), "concat_rows");
  if (a.dim(1) != b.dim(1)) throw ShapeError("concat_rows: column mismatch");
  const int cols = a.dim(1);
  std::vector<Real> v;
  v.reserve(a.size() + b.size());
  v.insert(v.end(), a.data().begin(), a.data().end());
  v.insert(v.end(), b.data().begin(), b.data().end());
  auto an = a.node(); auto bn = b.node();
  const std::size_t na = a.size();
  return detail::make_op<Real>({a.dim(0) + b.dim(0), cols}, std::move(v),
      {a, b},
      [an, bn, na](TensorNode<Real>& o) {
        auto& ga = an->ensure_grad(); auto& gb = bn->ensure_grad();
        for (std::size_t i = 0; i < na; ++i) ga[i] += o.grad[i];
        for (std::size_t i = na; i < o.grad.size(); ++i)
          gb[i - na] += o.grad[i];
      });
}

template <class Real>
Tensor<Real> concat_cols(const Tensor<Real>& a, const Tensor<Real>& b) {
  detail::check2d(a.shape(), "concat_cols");
  detail::check2d(b.shape(), "concat_cols");
  if (a.dim(0) != b.dim(0)) throw ShapeError("concat_cols: row mismatch");
  const int rows = a.dim(0), ca = a.dim(1), cb = b.dim(1);
  std::vector<Real> v(static_cast<std::size_t>(rows) * (ca + cb));
  for (int r = 0; r < rows; ++r) {
    for (int c = 0; c < ca; ++c)
      v[static_cast<std::size_t>(r) * (ca + cb) + c] =
          a.at(static_cast<std::size_t>(r) * ca + c);
    for (int c = 0; c < cb; ++c)
      v[static_cast<std::size_t>(r) * (ca + cb) + ca + c] =
          b.at(static_cast<std::size_t>(r) * cb + c);
  }
  auto an = a.node(); auto bn = b.node();
  return detail::make_op<Real>({rows, ca + cb}, std::move(v), {a, b},
      [an, bn, rows, ca, cb](TensorNode<Real>& o) {
        auto& ga = an->ensure_grad(); auto& gb = bn->ensure_grad();
        for (int r = 0; r < rows; ++r) {
          for (int c = 0; c < ca; ++c)
            ga[static_cast<std::size_t>(r) * ca + c] +=
                o.grad[static_cast<std::size_t>(r) * (ca + cb) + c];
          for (int c = 0; c < cb; ++c)
            gb[static_cast<std::size_t>(r) * cb + c] +=
                o.grad[static_cast<std::size_t>(r) * (ca + cb) + ca + c];
        }
      });
}

template <class Real>
Tensor<Real> slice_rows(const Tensor<Real>& x, int start, int len) {
  detail::check2d(x.shape(), "slice_rows");
  const int rows = x.dim(0), cols = x.dim(1);
  if (start < 0 || len <= 0 || start + len > rows)
    throw ShapeError("slice_rows: range out of bounds");
  std::vector<Real> v(x.data().begin() + static_cast<std::size_t>(start) * cols,
                      x.data().begin() +
                          static_cast<std::size_t>(start + len) * cols);
  auto xn = x.node();
  return detail::make_op<Real>({len, cols}, std::move(v), {x},
      [xn, start, cols](TensorNode<Real>& o) {
        auto& gx = xn->ensure_grad();
        const std::size_t off = static_cast<std::size_t>(start) * cols;
        for (std::size_t i = 0; i < o.grad.size(); ++i)
          gx[off + i] += o.grad[i];
      });
}

template <class Real>
Tensor<Real> slice_cols(const Tensor<Real>& x, int start, int len) {
  detail::check2d(x.shape(), "slice_cols");
  const int rows = x.dim(0), cols = x.dim(1);
  if (start < 0 || len <= 0 || start + len > cols)
    throw ShapeError("slice_cols: range out of bounds");
  std::vector<Real> v(static_cast<std::size_t>(rows) * len);
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < len; ++c)
      v[static_cast<std::size_t>(r) * len + c] =
          x.at(static_cast<std::size_t>(r) * cols + start + c);
  auto xn = x.node();
  return detail::make_op<Real>({rows, len}, std::move(v), {x},
      [xn, rows, cols, start, len](TensorNode<Real>& o) {
        auto& gx = xn->ensure_grad();
        for (int r = 0; r < rows; ++r)
          for (int c = 0; c < len; ++c)
            gx[static_cast<std::size_t>(r) * cols + start + c] +=
                o.grad[static_cast<std::size_t>(r) * len + c];
      });
}

// Batched row lookup; also serves as the embedding primitive.
template <class Real>
Tensor<Real> gather_rows(const Tensor<Real>& x, std::vector<int> idx) {
  detail::check2d(x.shape(), "gather_rows");
  const int rows = x.dim(0), cols = x.dim(1);
  for (int i : idx)
    if (i < 0 || i >= rows) throw ShapeError("gather_rows: index out of range");
  std::vector<Real> v(idx.size() * static_cast<std::size_t>(cols));
  for (std::size_t r = 0; r < idx.size(); ++r)
    for (int c = 0; c < cols; ++c)
      v[r * cols + c] = x.at(static_cast<std::size_t>(idx[r]) * cols + c);
  auto xn = x.node();
  const int out_rows = static_cast<int>(idx.size());
  return detail::make_op<Real>({out_rows, cols}, std::move(v), {x},
      [xn, idx = std::move(idx), cols](TensorNode<Real>& o) {
        auto& gx = xn->ensure_grad();
        for (std::size_t r = 0; r < idx.size(); ++r)
          for (int c = 0; c < cols; ++c)
            gx[static_cast<std::size_t>(idx[r]) * cols + c] +=
                o.grad[r * cols + c];
      });
}

// ---------------------------------------------------------------------------
// linear algebra

template <class Real>
Tensor<Real> matmul(const Tensor<Real>& a, const Tensor<Real>& b) {
  detail::check2d(a.shape(), "matmul");
  detail::check2d(b.shape(), "matmul");
  if (a.dim(1) != b.dim(0))
    throw ShapeError("matmul: inner dimension mismatch " +
                     shape_str(a.shape()) + " x " + shape_str(b.shape()));
  const int rows = a.dim(0), inner = a.dim(1), cols = b.dim(1);
  std::vector<Real> v(static_cast<std::size_t>(rows) * cols, Real(0));
  for (int r = 0; r < rows; ++r) {
    const Real* arow = a.data().data() + static_cast<std::size_t>(r) * inner;
    Real* vrow = v.data() + static_cast<std::size_t>(r) * cols;
    for (int k = 0; k < inner; ++k) {
      const Real av = arow[k];
      const Real* brow = b.data().data() + static_cast<std::size_t>(k) * cols;
      for (int c = 0; c < cols; ++c) vrow[c] += av * brow[c];
    }
  }
  auto an = a.node(); auto bn = b.node();
  return detail::make_op<Real>({rows, cols}, std::move(v), {a, b},
      [an, bn, rows, inner, cols](TensorNode<Real>& o) {
        auto& ga = an->ensure_grad(); auto& gb = bn->ensure_grad();
        // dA += dY B^T
        for (int r = 0; r < rows; ++r) {
          const Real* gy = o.grad.data() + static_cast<std::size_t>(r) * cols;
          Real* gar = ga.data() + static_cast<std::size_t>(r) * inner;
          for (int k = 0; k < inner; ++k) {
            const Real* brow =
                bn->value.data() + static_cast<std::size_t>(k) * cols;
            Real acc = 0;
            for (int c = 0; c < cols; ++c) acc += gy[c] * brow[c];
            gar[k] += acc;
          }
        }
        // dB += A^T dY
        for (int k = 0; k < inner; ++k) {
          Real* gbr = gb.data() + static_cast<std::size_t>(k) * cols;
          for (int r = 0; r < rows; ++r) {
            const Real av = an->value[static_cast<std::size_t>(r) * inner + k];
            const Real* gy =
                o.grad.data() + static_cast<std::size_t>(r) * cols;
            for (int c = 0; c < cols; ++c) gbr[c] += av * gy[c];
          }
        }
      });
}

// ---------------------------------------------------------------------------
// normalization / reductions

// Softmax along an axis of a 2-d tensor, max-subtracted for stability.
template <class Real>
Tensor<Real> softmax(const Tensor<Real>& x, int axis) {
  detail::check2d(x.shape(), "softmax");
  if (axis != 0 && axis != 1) throw ShapeError("softmax: axis must be 0 or 1");
  const int rows = x.dim(0), cols = x.dim(1);
  const int outer = axis == 1 ? rows : cols;
  const int len = axis == 1 ? cols : rows;
  const std::size_t ostride = axis == 1 ? cols : 1;
  const std::size_t estride = axis == 1 ? 1 : cols;
  std::vector<Real> v(x.size());
  for (int u = 0; u < outer; ++u) {
    const std::size_t base = u * ostride;
    Real mx = x.at(base);
    for (int e = 1; e < len; ++e) mx = std::max(mx, x.at(base + e * estride));
    Real sum = 0;
    for (int e = 0; e < len; ++e) {
      const Real ev = std::exp(x.at(base + e * estride) - mx);
      v[base + e * estride] = ev;
      sum += ev;
    }
    for (int e = 0; e < len; ++e) v[base + e * estride] /= sum;
  }
  auto xn = x.node();
  return detail::make_op<Real>(x.shape(), std::move(v), {x},
      [xn, outer, len, ostride, estride](TensorNode<Real>& o) {
        auto& gx = xn->ensure_grad();
        for (int u = 0; u < outer; ++u) {
          const std::size_t base = u * ostride;
          Real dot = 0;
          for (int e = 0; e < len; ++e) {
            const std::size_t i = base + e * estride;
            dot += o.grad[i] * o.value[i];
          }
          for (int e = 0; e < len; ++e) {
            const std::size_t i = base + e * estride;
            gx[i] += o.value[i] * (o.grad[i] - dot);
          }
        }
      });
}

// Per-row standardization of a 2-d tensor (no affine; compose with
// scale_rowvec/add_rowvec for the learned scale and shift).
template <class Real>
Tensor<Real> layer_norm(const Tensor<Real>& x, Real eps = Real(1e-5)) {
  detail::check2d(x.shape(), "layer_norm");
  const int rows = x.dim(0), cols = x.dim(1);
  std::vector<Real> v(x.size());
  std::vector<Real> inv_sigma(rows);
  for (int r = 0; r < rows; ++r) {
    const std::size_t base = static_cast<std::size_t>(r) * cols;
    Real mean = 0;
    for (int c = 0; c < cols; ++c) mean += x.at(base + c);
    mean /= cols;
    Real var = 0;
    for (int c = 0; c < cols; ++c) {
      const Real d = x.at(base + c) - mean;
      var += d * d;
    }
    var /= cols;
    const Real is = Real(1) / std::sqrt(var + eps);
    inv_sigma[r] = is;
    for (int c = 0; c < cols; ++c) v[base + c] = (x.at(base + c) - mean) * is;
  }
  auto xn = x.node();
  return detail::make_op<Real>(x.shape(), std::move(v), {x},
      [xn, rows, cols, inv_sigma = std::move(inv_sigma)](TensorNode<Real>& o) {
        auto& gx = xn->ensure_grad();
        for (int r = 0; r < rows; ++r) {
          const std::size_t base = static_cast<std::size_t>(r) * cols;
          Real gmean = 0, gdot = 0;
          for (int c = 0; c < cols; ++c) {
            gmean += o.grad[base + c];
            gdot += o.grad[base + c] * o.value[base + c];
          }
          gmean /= cols;
          gdot /= cols;
          for (int c = 0; c < cols; ++c)
            gx[base + c] += inv_sigma[r] *
                (o.grad[base + c] - gmean - o.value[base + c] * gdot);
        }
      });
}

// L2-normalize every column of a 2-d tensor along the row (token) axis;
// eps keeps zero columns finite.
template <class Real>
Tensor<Real> l2_normalize_cols(const Tensor<Real>& x, Real eps = Real(1e-6)) {
  detail::check2d(x.shape(), "l2_normalize_cols");
  const int rows = x.dim(0), cols = x.dim(1);
  std::vector<Real> v(x.size());
  std::vector<Real> norms(cols);
  for (int c = 0; c < cols; ++c) {
    Real ss = 0;
    for (int r = 0; r < rows; ++r) {
      const Real xv = x.at(static_cast<std::size_t>(r) * cols + c);
      ss += xv * xv;
    }
    norms[c] = std::sqrt(ss);
    const Real t = norms[c] + eps;
    for (int r = 0; r < rows; ++r)
      v[static_cast<std::size_t>(r) * cols + c] =
          x.at(static_cast<std::size_t>(r) * cols + c) / t;
  }
  auto xn = x.node();
  return detail::make_op<Real>(x.shape(), std::move(v), {x},
      [xn, rows, cols, eps, norms = std::move(norms)](TensorNode<Real>& o) {
        auto& gx = xn->ensure_grad();
        for (int c = 0; c < cols; ++c) {
          const Real n = norms[c];
          const Real t = n + eps;
          Real dot = 0;
          for (int r = 0; r < rows; ++r) {
            const std::size_t i = static_cast<std::size_t>(r) * cols + c;
            dot += xn->value[i] * o.grad[i];
          }
          for (int r = 0; r < rows; ++r) {
            const std::size_t i = static_cast<std::size_t>(r) * cols + c;
            Real g = o.grad[i] / t;
            if (n > Real(1e-30)) g -= xn->value[i] * dot / (n * t * t);
            gx[i] += g;
          }
        }
      });
}

template <class Real>
Tensor<Real> sum_all(const Tensor<Real>& x) {
  Real s = 0;
  for (std::size_t i = 0; i < x.size(); ++i) s += x.at(i);
  auto xn = x.node();
  return detail::make_op<Real>({1}, {s}, {x},
      [xn](TensorNode<Real>& o) {
        auto& gx = xn->ensure_grad();
        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += o.grad[0];
      });
}

template <class Real>
Tensor<Real> mean_all(const Tensor<Real>& x) {
  Real s = 0;
  for (std::size_t i = 0; i < x.size(); ++i) s += x.at(i);
  const Real inv = Real(1) / static_cast<Real>(x.size());
  auto xn = x.node();
  return detail::make_op<Real>({1}, {s * inv}, {x},
      [xn, inv](TensorNode<Real>& o) {
        auto& gx = xn->ensure_grad();
        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += inv * o.grad[0];
      });
}

// ---------------------------------------------------------------------------
// losses

// Mean over rows of the per-row L1 distance between a and b.
template <class Real>
Tensor<Real> l1_loss(const Tensor<Real>& a, const Tensor<Real>& b) {
  if (a.shape() != b.shape()) throw ShapeError("l1_loss: shape mismatch");
  detail::check2d(a.shape(), "l1_loss");
  const int rows = a.dim(0);
  Real s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += std::abs(a.at(i) - b.at(i));
  const Real inv = Real(1) / static_cast<Real>(rows);
  auto an = a.node(); auto bn = b.node();
  return detail::make_op<Real>({1}, {s * inv}, {a, b},
      [an, bn, inv](TensorNode<Real>& o) {
        auto& ga = an->ensure_grad(); auto& gb = bn->ensure_grad();
        for (std::size_t i = 0; i < ga.size(); ++i) {
          const Real d = an->value[i] - bn->value[i];
          const Real sgn = d > 0 ? Real(1) : (d < 0 ? Real(-1) : Real(0));
          ga[i] += sgn * inv * o.grad[0];
          gb[i] -= sgn * inv * o.grad[0];
        }
      });
}

// Weighted-mean softmax cross-entropy: sum_r w_r * CE_r / sum_r w_r.
template <class Real>
Tensor<Real> softmax_cross_entropy(const Tensor<Real>& logits,
                                   std::vector<int> targets,
                                   std::vector<Real> weights) {
  detail::check2d(logits.shape(), "softmax_cross_entropy");
  const int rows = logits.dim(0), cols = logits.dim(1);
  if (static_cast<int>(targets.size()) != rows ||
      static_cast<int>(weights.size()) != rows)
    throw ShapeError("softmax_cross_entropy: targets/weights length mismatch");
  for (int t : targets)
    if (t < 0 || t >= cols)
      throw ShapeError("softmax_cross_entropy: target class out of range");
  std::vector<Real> probs(logits.size());
  Real wsum = 0, loss = 0;
  for (int r = 0; r < rows; ++r) {
    const std::size_t base = static_cast<std::size_t>(r) * cols;
    Real mx = logits.at(base);
    for (int c = 1; c < cols; ++c) mx = std::max(mx, logits.at(base + c));
    Real sum = 0;
    for (int c = 0; c < cols; ++c) {
      probs[base + c] = std::exp(logits.at(base + c) - mx);
      sum += probs[base + c];
    }
    for (int c = 0; c < cols; ++c) probs[base + c] /= sum;
    loss += weights[r] * (std::log(sum) - (logits.at(base + targets[r]) - mx));
    wsum += weights[r];
  }
  if (wsum <= 0) throw ValueError("softmax_cross_entropy: weights sum to 0");
  loss /= wsum;
  auto ln = logits.node();
  return detail::make_op<Real>({1}, {loss}, {logits},
      [ln, rows, cols, wsum, probs = std::move(probs),
       targets = std::move(targets), weights = std::move(weights)](
          TensorNode<Real>& o) {
        auto& gl = ln->ensure_grad();
        for (int r = 0; r < rows; ++r) {
          const std::size_t base = static_cast<std::size_t>(r) * cols;
          const Real wr = weights[r] / wsum * o.grad[0];
          for (int c = 0; c < cols; ++c) {
            Real g = probs[base + c];
            if (c == targets[r]) g -= Real(1);
            gl[base + c] += wr * g;
          }
        }
      });
}

// ---------------------------------------------------------------------------
// image-shaped ops (tensors laid out H x W x C)

// Depthwise 3x3 convolution, padding 1, stride 1 or 2. kernel is (C,3,3),
// bias is (C). These are the only variants the grid blocks need.
template <class Real>
Tensor<Real> dwconv3x3(const Tensor<Real>& x, const Tensor<Real>& kernel,
                       const Tensor<Real>& bias, int stride = 1) {
  if (x.ndim() != 3) throw ShapeError("dwconv3x3: expected HxWxC input");
  const int h = x.dim(0), w = x.dim(1), ch = x.dim(2);
  if (kernel.shape() != Shape{ch, 3, 3})
    throw ShapeError("dwconv3x3: kernel must be (C,3,3)");
  if (static_cast<int>(bias.size()) != ch)
    throw ShapeError("dwconv3x3: bias length mismatch");
  if (stride != 1 && stride != 2) throw ShapeError("dwconv3x3: stride 1 or 2");
  const int ho = (h - 1) / stride + 1;
  const int wo = (w - 1) / stride + 1;
  std::vector<Real> v(static_cast<std::size_t>(ho) * wo * ch);
  for (int oy = 0; oy < ho; ++oy)
    for (int ox = 0; ox < wo; ++ox)
      for (int c = 0; c < ch; ++c) {
        Real acc = bias.at(c);
        for (int ky = 0; ky < 3; ++ky)
          for (int kx = 0; kx < 3; ++kx) {
            const int iy = oy * stride + ky - 1;
            const int ix = ox * stride + kx - 1;
            if (iy < 0 || iy >= h || ix < 0 || ix >= w) continue;
            acc += x.at((static_cast<std::size_t>(iy) * w + ix) * ch + c) *
                   kernel.at((static_cast<std::size_t>(c) * 3 + ky) * 3 + kx);
          }
        v[(static_cast<std::size_t>(oy) * wo + ox) * ch + c] = acc;
      }
  auto xn = x.node(); auto kn = kernel.node(); auto bn = bias.node();
  return detail::make_op<Real>({ho, wo, ch}, std::move(v),
      {x, kernel, bias},
      [xn, kn, bn, h, w, ch, ho, wo, stride](TensorNode<Real>& o) {
        auto& gx = xn->ensure_grad();
        auto& gk = kn->ensure_grad();
        auto& gb = bn->ensure_grad();
        for (int oy = 0; oy < ho; ++oy)
          for (int ox = 0; ox < wo; ++ox)
            for (int c = 0; c < ch; ++c) {
              const Real g =
                  o.grad[(static_cast<std::size_t>(oy) * wo + ox) * ch + c];
              gb[c] += g;
              for (int ky = 0; ky < 3; ++ky)
                for (int kx = 0; kx < 3; ++kx) {
                  const int iy = oy * stride + ky - 1;
                  const int ix = ox * stride + kx - 1;
                  if (iy < 0 || iy >= h || ix < 0 || ix >= w) continue;
                  const std::size_t xi =
                      (static_cast<std::size_t>(iy) * w + ix) * ch + c;
                  const std::size_t ki =
                      (static_cast<std::size_t>(c) * 3 + ky) * 3 + kx;
                  gx[xi] += kn->value[ki] * g;
                  gk[ki] += xn->value[xi] * g;
                }
            }
      });
}

// Split an HxWx3 image into non-overlapping p x p patches, each flattened
// row-major (pixel-major, channel-minor). Patch order is row-major over
// the grid. Output is (N, 3*p*p).
template <class Real>
Tensor<Real> patchify(const Tensor<Real>& img, int p) {
  if (img.ndim() != 3 || img.dim(2) != 3)
    throw ShapeError("patchify: expected HxWx3 image");
  const int h = img.dim(0), w = img.dim(1);
  if (p <= 0 || h % p != 0 || w % p != 0)
    throw ShapeError("patchify: image dimensions not divisible by patch size");
  const int gh = h / p, gw = w / p;
  const int n = gh * gw, feat = 3 * p * p;
  std::vector<Real> v(static_cast<std::size_t>(n) * feat);
  for (int gy = 0; gy < gh; ++gy)
    for (int gx = 0; gx < gw; ++gx) {
      const std::size_t t = static_cast<std::size_t>(gy) * gw + gx;
      for (int py = 0; py < p; ++py)
        for (int px = 0; px < p; ++px)
          for (int c = 0; c < 3; ++c)
            v[t * feat + (static_cast<std::size_t>(py) * p + px) * 3 + c] =
                img.at((static_cast<std::size_t>(gy * p + py) * w +
                        (gx * p + px)) * 3 + c);
    }
  auto in = img.node();
  return detail::make_op<Real>({n, feat}, std::move(v), {img},
      [in, h, w, p, gh, gw, feat](TensorNode<Real>& o) {
        auto& gi = in->ensure_grad();
        for (int gy = 0; gy < gh; ++gy)
          for (int gx = 0; gx < gw; ++gx) {
            const std::size_t t = static_cast<std::size_t>(gy) * gw + gx;
            for (int py = 0; py < p; ++py)
              for (int px = 0; px < p; ++px)
                for (int c = 0; c < 3; ++c)
                  gi[(static_cast<std::size_t>(gy * p + py) * w +
                      (gx * p + px)) * 3 + c] +=
                      o.grad[t * feat +
                             (static_cast<std::size_t>(py) * p + px) * 3 + c];
          }
      });
}

}  // namespace pef
