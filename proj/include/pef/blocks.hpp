#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "pef/ops.hpp"
#include "pef/tensor.hpp"

namespace pef {

template <class Real>
using ParamVisitor = std::function<void(const std::string&, Tensor<Real>&)>;

// y = x W + b, W is (in, out).
template <class Real>
struct Linear {
  Tensor<Real> w, b;

  template <class Rng>
  void init(int in, int out, Rng& rng, Real wstd = Real(0.02)) {
    w = Tensor<Real>::randn({in, out}, rng, wstd, true);
    b = Tensor<Real>::zeros({out}, true);
  }

  Tensor<Real> operator()(const Tensor<Real>& x) const {
    return add_rowvec(matmul(x, w), b);
  }

  void visit(const std::string& prefix, const ParamVisitor<Real>& fn) {
    fn(prefix + ".w", w);
    fn(prefix + ".b", b);
  }
};

template <class Real>
struct LayerNorm {
  Tensor<Real> gamma, beta;

  void init(int d) {
    gamma = Tensor<Real>::full({d}, Real(1), true);
    beta = Tensor<Real>::zeros({d}, true);
  }

  Tensor<Real> operator()(const Tensor<Real>& x) const {
    return add_rowvec(scale_rowvec(layer_norm(x), gamma), beta);
  }

  void visit(const std::string& prefix, const ParamVisitor<Real>& fn) {
    fn(prefix + ".gamma", gamma);
    fn(prefix + ".beta", beta);
  }
};

// Two-layer MLP with gelu, hidden width 4*d.
template <class Real>
struct Mlp {
  Linear<Real> fc1, fc2;

  template <class Rng>
  void init(int d, Rng& rng) {
    fc1.init(d, 4 * d, rng);
    fc2.init(4 * d, d, rng);
  }

  Tensor<Real> operator()(const Tensor<Real>& x) const {
    return fc2(gelu(fc1(x)));
  }

  void visit(const std::string& prefix, const ParamVisitor<Real>& fn) {
    fc1.visit(prefix + ".fc1", fn);
    fc2.visit(prefix + ".fc2", fn);
  }
};

template <class Real>
struct AttentionParams {
  int d_model = 0;
  int n_heads = 1;
  Linear<Real> q, k, v, o;

  template <class Rng>
  void init(int d, int heads, Rng& rng) {
    if (heads <= 0 || d % heads != 0)
      throw ShapeError("attention: n_heads must divide d_model");
    d_model = d;
    n_heads = heads;
    q.init(d, d, rng);
    k.init(d, d, rng);
    v.init(d, d, rng);
    o.init(d, d, rng);
  }

  void visit(const std::string& prefix, const ParamVisitor<Real>& fn) {
    q.visit(prefix + ".q", fn);
    k.visit(prefix + ".k", fn);
    v.visit(prefix + ".v", fn);
    o.visit(prefix + ".o", fn);
  }
};

// Token attention with Q from q_in and K/V from kv_in. Per head the
// scores are scaled by 1/sqrt(d_model/n_heads).
template <class Real>
Tensor<Real> attention(const Tensor<Real>& q_in, const Tensor<Real>& kv_in,
                       const AttentionParams<Real>& p) {
  if (q_in.dim(1) != p.d_model || kv_in.dim(1) != p.d_model)
    throw ShapeError("attention: channel count != d_model");
  const int dh = p.d_model / p.n_heads;
  const Real inv_sqrt_dh = Real(1) / std::sqrt(static_cast<Real>(dh));
  Tensor<Real> q = p.q(q_in), k = p.k(kv_in), v = p.v(kv_in);
  Tensor<Real> heads;
  for (int h = 0; h < p.n_heads; ++h) {
    Tensor<Real> qh = slice_cols(q, h * dh, dh);
    Tensor<Real> kh = slice_cols(k, h * dh, dh);
    Tensor<Real> vh = slice_cols(v, h * dh, dh);
    Tensor<Real> a =
        softmax(scale(matmul(qh, transpose(kh)), inv_sqrt_dh), 1);
    Tensor<Real> oh = matmul(a, vh);
    heads = h == 0 ? oh : concat_cols(heads, oh);
  }
  return p.o(heads);
}

// Variant with separate K and V source rows (decoder cross-attention adds
// position information to keys but not values).
template <class Real>
Tensor<Real> attention_kv(const Tensor<Real>& q_in, const Tensor<Real>& k_in,
                          const Tensor<Real>& v_in,
                          const AttentionParams<Real>& p) {
  if (q_in.dim(1) != p.d_model || k_in.dim(1) != p.d_model ||
      v_in.dim(1) != p.d_model)
    throw ShapeError("attention: channel count != d_model");
  if (k_in.dim(0) != v_in.dim(0))
    throw ShapeError("attention: key/value row count mismatch");
  const int dh = p.d_model / p.n_heads;
  const Real inv_sqrt_dh = Real(1) / std::sqrt(static_cast<Real>(dh));
  Tensor<Real> q = p.q(q_in), k = p.k(k_in), v = p.v(v_in);
  Tensor<Real> heads;
  for (int h = 0; h < p.n_heads; ++h) {
    Tensor<Real> qh = slice_cols(q, h * dh, dh);
    Tensor<Real> kh = slice_cols(k, h * dh, dh);
    Tensor<Real> vh = slice_cols(v, h * dh, dh);
    Tensor<Real> a =
        softmax(scale(matmul(qh, transpose(kh)), inv_sqrt_dh), 1);
    Tensor<Real> oh = matmul(a, vh);
    heads = h == 0 ? oh : concat_cols(heads, oh);
  }
  return p.o(heads);
}

template <class Real>
Tensor<Real> self_attention(const Tensor<Real>& x,
                            const AttentionParams<Real>& p) {
  return attention(x, x, p);
}

template <class Real>
Tensor<Real> cross_attention(const Tensor<Real>& queries,
                             const Tensor<Real>& memory,
                             const AttentionParams<Real>& p) {
  return attention(queries, memory, p);
}

template <class Real>
struct XcaParams {
  AttentionParams<Real> proj;
  // temperature = exp(log_temp), one per head; stays positive under any
  // unconstrained optimizer step
  Tensor<Real> log_temp;

  template <class Rng>
  void init(int d, int heads, Rng& rng) {
    proj.init(d, heads, rng);
    log_temp = Tensor<Real>::zeros({heads}, true);
  }

  void visit(const std::string& prefix, const ParamVisitor<Real>& fn) {
    proj.visit(prefix, fn);
    fn(prefix + ".log_temp", log_temp);
  }
};

// Cross-covariance attention: Q/K columns L2-normalized along tokens, a
// (d/h)x(d/h) channel attention map per head, output V * map^T. The map
// size is independent of N, so cost is linear in the token count.
template <class Real>
Tensor<Real> xca(const Tensor<Real>& x, const XcaParams<Real>& p) {
  const auto& pr = p.proj;
  if (x.dim(1) != pr.d_model)
    throw ShapeError("xca: channel count != d_model");
  const int dh = pr.d_model / pr.n_heads;
  Tensor<Real> q = pr.q(x), k = pr.k(x), v = pr.v(x);
  Tensor<Real> heads;
  for (int h = 0; h < pr.n_heads; ++h) {
    Tensor<Real> qh = l2_normalize_cols(slice_cols(q, h * dh, dh));
    Tensor<Real> kh = l2_normalize_cols(slice_cols(k, h * dh, dh));
    Tensor<Real> vh = slice_cols(v, h * dh, dh);
    Tensor<Real> temp = exp_op(slice_rows(
        reshape(p.log_temp, {pr.n_heads, 1}), h, 1));
    Tensor<Real> a =
        softmax(scale_by(matmul(transpose(qh), kh), temp), 1);
    Tensor<Real> oh = matmul(vh, transpose(a));
    heads = h == 0 ? oh : concat_cols(heads, oh);
  }
  return pr.o(heads);
}

struct GridShape {
  int rows = 0;
  int cols = 0;
};

template <class Real>
struct LpiParams {
  Tensor<Real> k1, b1, k2, b2;

  template <class Rng>
  void init(int d, Rng& rng) {
    k1 = Tensor<Real>::randn({d, 3, 3}, rng, Real(0.1), true);
    b1 = Tensor<Real>::zeros({d}, true);
    k2 = Tensor<Real>::randn({d, 3, 3}, rng, Real(0.1), true);
    b2 = Tensor<Real>::zeros({d}, true);
  }

  void visit(const std::string& prefix, const ParamVisitor<Real>& fn) {
    fn(prefix + ".k1", k1);
    fn(prefix + ".b1", b1);
    fn(prefix + ".k2", k2);
    fn(prefix + ".b2", b2);
  }
};

// Local patch interaction: tokens on their n x m grid, two depthwise 3x3
// convolutions with a gelu between. The caller excludes the CLS token.
template <class Real>
Tensor<Real> local_patch_interaction(const Tensor<Real>& tokens,
                                     GridShape grid,
                                     const LpiParams<Real>& p) {
  const int d = tokens.dim(1);
  if (tokens.dim(0) != grid.rows * grid.cols)
    throw ShapeError("lpi: token count != grid rows*cols");
  Tensor<Real> g = reshape(tokens, {grid.rows, grid.cols, d});
  g = dwconv3x3(g, p.k1, p.b1);
  g = gelu(g);
  g = dwconv3x3(g, p.k2, p.b2);
  return reshape(g, {grid.rows * grid.cols, d});
}

enum class EncoderVariant { TokenAttention, ChannelAttention };

// One encoder layer, pre-norm residual wiring.
//   token-attention:   x += attn(ln(x));            x += mlp(ln(x))
//   channel-attention: x += xca(ln(x)); x += lpi(ln(x)) (CLS bypasses);
//                      x += mlp(ln(x))
template <class Real>
struct EncoderLayer {
  EncoderVariant variant = EncoderVariant::TokenAttention;
  LayerNorm<Real> ln1, ln2, ln3;
  AttentionParams<Real> attn;  // token-attention variant
  XcaParams<Real> channel;     // channel-attention variant
  LpiParams<Real> lpi;
  Mlp<Real> mlp;
  GridShape grid;        // channel-attention only
  bool has_cls = true;   // channel-attention only: row 0 bypasses LPI

  template <class Rng>
  void init(int d, int heads, EncoderVariant var, Rng& rng,
            GridShape g = {}, bool cls = true) {
    variant = var;
    grid = g;
    has_cls = cls;
    ln1.init(d);
    ln2.init(d);
    mlp.init(d, rng);
    if (variant == EncoderVariant::TokenAttention) {
      attn.init(d, heads, rng);
    } else {
      channel.init(d, heads, rng);
      lpi.init(d, rng);
      ln3.init(d);
    }
  }

  Tensor<Real> operator()(const Tensor<Real>& x) const {
    if (variant == EncoderVariant::TokenAttention) {
      Tensor<Real> y = add(x, self_attention(ln1(x), attn));
      return add(y, mlp(ln2(y)));
    }
    Tensor<Real> y = add(x, xca(ln1(x), channel));
    {
      Tensor<Real> normed = ln3(y);
      const int n_tokens = grid.rows * grid.cols;
      if (has_cls) {
        Tensor<Real> rest = slice_rows(normed, 1, n_tokens);
        Tensor<Real> mixed = local_patch_interaction(rest, grid, lpi);
        Tensor<Real> pad = Tensor<Real>::zeros({1, x.dim(1)});
        y = add(y, concat_rows(pad, mixed));
      } else {
        y = add(y, local_patch_interaction(normed, grid, lpi));
      }
    }
    return add(y, mlp(ln2(y)));
  }

  void visit(const std::string& prefix, const ParamVisitor<Real>& fn) {
    ln1.visit(prefix + ".ln1", fn);
    ln2.visit(prefix + ".ln2", fn);
    mlp.visit(prefix + ".mlp", fn);
    if (variant == EncoderVariant::TokenAttention) {
      attn.visit(prefix + ".attn", fn);
    } else {
      channel.visit(prefix + ".xca", fn);
      lpi.visit(prefix + ".lpi", fn);
      ln3.visit(prefix + ".ln3", fn);
    }
  }
};

// DETR-style decoder layer: query self-attention, cross-attention to the
// memory, MLP; pre-norm residuals. Query position embeddings are added to
// Q and K of the self-attention and to Q of the cross-attention; memory
// position embeddings (optional) to the cross-attention keys.
template <class Real>
struct DecoderLayer {
  LayerNorm<Real> ln1, ln2, ln3;
  AttentionParams<Real> self_attn, cross_attn;
  Mlp<Real> mlp;

  template <class Rng>
  void init(int d, int heads, Rng& rng) {
    ln1.init(d);
    ln2.init(d);
    ln3.init(d);
    self_attn.init(d, heads, rng);
    cross_attn.init(d, heads, rng);
    mlp.init(d, rng);
  }

  Tensor<Real> operator()(const Tensor<Real>& x, const Tensor<Real>& memory,
                          const Tensor<Real>& query_pos,
                          const Tensor<Real>* memory_pos) const {
    Tensor<Real> n1 = ln1(x);
    Tensor<Real> y = add(x, attention_kv(add(n1, query_pos),
                                         add(n1, query_pos), n1, self_attn));
    Tensor<Real> n2 = ln2(y);
    Tensor<Real> keys = memory_pos ? add(memory, *memory_pos) : memory;
    y = add(y, attention_kv(add(n2, query_pos), keys, memory, cross_attn));
    return add(y, mlp(ln3(y)));
  }

  void visit(const std::string& prefix, const ParamVisitor<Real>& fn) {
    ln1.visit(prefix + ".ln1", fn);
    ln2.visit(prefix + ".ln2", fn);
    ln3.visit(prefix + ".ln3", fn);
    self_attn.visit(prefix + ".self_attn", fn);
    cross_attn.visit(prefix + ".cross_attn", fn);
    mlp.visit(prefix + ".mlp", fn);
  }
};

}  // namespace pef
