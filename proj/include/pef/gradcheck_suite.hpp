#pragma once

#include <functional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "pef/blocks.hpp"
#include "pef/gradcheck.hpp"
#include "pef/matching.hpp"
#include "pef/model.hpp"
#include "pef/ops.hpp"

namespace pef {

struct NamedCheck {
  std::string name;
  CheckReport report;
};

namespace gradsuite_detail {

using T = Tensor<double>;

// fixed-coefficient scalarization keeps structurally-constrained outputs
// (softmax rows, layer norms) from collapsing to a zero gradient
inline T scalarize(const T& y, std::mt19937_64& rng) {
  T c = T::uniform(y.shape(), rng, 0.25, 1.0);
  return sum_all(mul(y, c));
}

}  // namespace gradsuite_detail

// Finite-difference checks for every primitive, every block, and the
// end-to-end micro model. 64-bit throughout.
inline std::vector<NamedCheck> run_gradcheck_suite(double step = 1e-5,
                                                   double tol = 1e-4,
                                                   std::uint64_t seed = 42) {
  using gradsuite_detail::scalarize;
  using T = Tensor<double>;
  std::vector<NamedCheck> out;
  std::mt19937_64 rng(seed);

  auto check = [&](const std::string& name, std::vector<T> leaves,
                   std::function<T()> f, std::size_t max_probes = 0) {
    CheckReport rep = finite_difference_check<double>(f, std::move(leaves),
                                                      step, tol, max_probes);
    out.push_back({name, rep});
  };

  // --- primitives ---
  {
    T a = T::randn({3, 5}, rng), b = T::randn({5, 4}, rng);
    std::mt19937_64 crng(rng());
    T c = T::uniform({3, 4}, crng, 0.25, 1.0);
    check("matmul", {a, b}, [=]() { return sum_all(mul(matmul(a, b), c)); });
  }
  {
    T a = T::randn({4, 3}, rng), b = T::randn({4, 3}, rng);
    check("add", {a, b}, [=]() { return sum_all(add(a, b)); });
    check("sub", {a, b}, [=]() { return sum_all(sub(a, b)); });
    check("elementwise-multiply", {a, b}, [=]() { return sum_all(mul(a, b)); });
    check("scale", {a}, [=]() { return sum_all(scale(a, 2.5)); });
  }
  {
    T a = T::randn({3, 4}, rng);
    T s = T::scalar(0.7);
    check("scale-by-scalar", {a, s}, [=]() { return sum_all(scale_by(a, s)); });
    check("exp", {a}, [=]() { return sum_all(exp_op(a)); });
    check("sigmoid", {a}, [=]() { return sum_all(sigmoid(a)); });
    check("gelu", {a}, [=]() { return sum_all(gelu(a)); });
  }
  {
    T x = T::randn({5, 3}, rng), b = T::randn({3}, rng), g = T::randn({3}, rng);
    check("add-rowvec", {x, b}, [=]() { return sum_all(add_rowvec(x, b)); });
    check("scale-rowvec", {x, g}, [=]() { return sum_all(scale_rowvec(x, g)); });
  }
  {
    T x = T::randn({4, 6}, rng);
    std::mt19937_64 crng(rng());
    T c = T::uniform({6, 4}, crng, 0.25, 1.0);
    check("reshape", {x}, [=]() { return sum_all(mul(reshape(x, {6, 4}), c)); });
    T ct = T::uniform({6, 4}, crng, 0.25, 1.0);
    check("transpose", {x}, [=]() { return sum_all(mul(transpose(x), ct)); });
  }
  {
    T a = T::randn({2, 3}, rng), b = T::randn({4, 3}, rng);
    std::mt19937_64 crng(rng());
    T c = T::uniform({6, 3}, crng, 0.25, 1.0);
    check("concat", {a, b},
          [=]() { return sum_all(mul(concat_rows(a, b), c)); });
    T a2 = T::randn({3, 2}, rng), b2 = T::randn({3, 4}, rng);
    T c2 = T::uniform({3, 6}, crng, 0.25, 1.0);
    check("concat-cols", {a2, b2},
          [=]() { return sum_all(mul(concat_cols(a2, b2), c2)); });
  }
  {
    T x = T::randn({6, 5}, rng);
    std::mt19937_64 crng(rng());
    T cr = T::uniform({3, 5}, crng, 0.25, 1.0);
    T cc = T::uniform({6, 2}, crng, 0.25, 1.0);
    T cg = T::uniform({4, 5}, crng, 0.25, 1.0);
    check("slice-rows", {x},
          [=]() { return sum_all(mul(slice_rows(x, 2, 3), cr)); });
    check("slice-cols", {x},
          [=]() { return sum_all(mul(slice_cols(x, 1, 2), cc)); });
    check("lookup", {x}, [=]() {
      return sum_all(mul(gather_rows(x, {4, 0, 0, 2}), cg));
    });
  }
  {
    T x = T::randn({4, 5}, rng);
    std::mt19937_64 crng(rng());
    T c = T::uniform({4, 5}, crng, 0.25, 1.0);
    check("softmax-axis1", {x}, [=]() { return sum_all(mul(softmax(x, 1), c)); });
    check("softmax-axis0", {x}, [=]() { return sum_all(mul(softmax(x, 0), c)); });
    check("layer-normalization", {x},
          [=]() { return sum_all(mul(layer_norm(x), c)); });
    check("l2-normalize-cols", {x},
          [=]() { return sum_all(mul(l2_normalize_cols(x), c)); });
  }
  {
    T x = T::randn({3, 7}, rng);
    check("mean-reduce", {x}, [=]() { return mean_all(x); });
    check("sum-reduce", {x}, [=]() { return sum_all(x); });
  }
  {
    T a = T::randn({4, 2}, rng), b = T::randn({4, 2}, rng);
    check("l1-distance", {a, b}, [=]() { return l1_loss(a, b); });
  }
  {
    T logits = T::randn({5, 4}, rng);
    std::vector<int> targets = {0, 3, 1, 3, 2};
    std::vector<double> weights = {1, 0.1, 1, 0.1, 1};
    check("softmax-cross-entropy", {logits}, [=]() {
      return softmax_cross_entropy(logits, targets, weights);
    });
  }
  {
    T x = T::randn({5, 6, 3}, rng);
    T k = T::randn({3, 3, 3}, rng), b = T::randn({3}, rng);
    std::mt19937_64 crng(rng());
    T c1 = T::uniform({5, 6, 3}, crng, 0.25, 1.0);
    T c2 = T::uniform({3, 3, 3}, crng, 0.25, 1.0);
    check("depthwise-conv-s1", {x, k, b},
          [=]() { return sum_all(mul(dwconv3x3(x, k, b, 1), c1)); });
    check("depthwise-conv-s2", {x, k, b},
          [=]() { return sum_all(mul(dwconv3x3(x, k, b, 2), c2)); });
  }
  {
    T img = T::randn({4, 6, 3}, rng);
    std::mt19937_64 crng(rng());
    T c = T::uniform({6, 12}, crng, 0.25, 1.0);
    check("patchify", {img},
          [=]() { return sum_all(mul(patchify(img, 2), c)); });
  }

  // --- blocks ---
  const int d = 8, heads = 2;
  {
    AttentionParams<double> p;
    p.init(d, heads, rng);
    T x = T::randn({5, d}, rng);
    std::mt19937_64 crng(rng());
    T c = T::uniform({5, d}, crng, 0.25, 1.0);
    std::vector<T> leaves = {x, p.q.w, p.q.b, p.k.w, p.k.b,
                             p.v.w, p.v.b, p.o.w, p.o.b};
    check("block-self-attention", leaves,
          [=]() { return sum_all(mul(self_attention(x, p), c)); });
    T q = T::randn({3, d}, rng);
    T c2 = T::uniform({3, d}, crng, 0.25, 1.0);
    leaves.push_back(q);
    check("block-cross-attention", leaves,
          [=]() { return sum_all(mul(cross_attention(q, x, p), c2)); });
  }
  {
    XcaParams<double> p;
    p.init(d, heads, rng);
    T x = T::randn({5, d}, rng);
    std::mt19937_64 crng(rng());
    T c = T::uniform({5, d}, crng, 0.25, 1.0);
    check("block-xca",
          {x, p.proj.q.w, p.proj.k.w, p.proj.v.w, p.proj.o.w, p.log_temp},
          [=]() { return sum_all(mul(xca(x, p), c)); });
  }
  {
    LpiParams<double> p;
    p.init(d, rng);
    T x = T::randn({6, d}, rng);
    std::mt19937_64 crng(rng());
    T c = T::uniform({6, d}, crng, 0.25, 1.0);
    check("block-lpi", {x, p.k1, p.b1, p.k2, p.b2}, [=]() {
      return sum_all(mul(local_patch_interaction(x, {2, 3}, p), c));
    });
  }
  {
    EncoderLayer<double> layer;
    layer.init(d, heads, EncoderVariant::TokenAttention, rng);
    T x = T::randn({5, d}, rng);
    std::mt19937_64 crng(rng());
    T c = T::uniform({5, d}, crng, 0.25, 1.0);
    std::vector<T> leaves = {x};
    layer.visit("", [&](const std::string&, Tensor<double>& t) {
      leaves.push_back(t);
    });
    check("block-encoder-layer-token", leaves,
          [=]() { return sum_all(mul(layer(x), c)); }, 40);
  }
  {
    EncoderLayer<double> layer;
    layer.init(d, heads, EncoderVariant::ChannelAttention, rng, {2, 3}, true);
    T x = T::randn({7, d}, rng);  // CLS + 2x3 grid
    std::mt19937_64 crng(rng());
    T c = T::uniform({7, d}, crng, 0.25, 1.0);
    std::vector<T> leaves = {x};
    layer.visit("", [&](const std::string&, Tensor<double>& t) {
      leaves.push_back(t);
    });
    check("block-encoder-layer-channel", leaves,
          [=]() { return sum_all(mul(layer(x), c)); }, 40);
  }
  {
    DecoderLayer<double> layer;
    layer.init(d, heads, rng);
    T queries = T::randn({4, d}, rng);
    T memory = T::randn({6, d}, rng);
    T qpos = T::randn({4, d}, rng);
    T mpos = T::randn({6, d}, rng);
    std::mt19937_64 crng(rng());
    T c = T::uniform({4, d}, crng, 0.25, 1.0);
    std::vector<T> leaves = {queries, memory, qpos, mpos};
    layer.visit("", [&](const std::string&, Tensor<double>& t) {
      leaves.push_back(t);
    });
    check("block-decoder-layer", leaves, [=]() {
      return sum_all(mul(layer(queries, memory, qpos, &mpos), c));
    }, 40);
  }

  // --- end-to-end micro model: image -> matched set loss ---
  {
    ModelConfig cfg;
    cfg.width = 32;
    cfg.height = 32;
    cfg.patch = 16;
    cfg.d_model = 16;
    cfg.n_heads = 2;
    cfg.variant = Variant::Deit;
    cfg.encoder_depth = 1;
    cfg.decoder_depth = 1;
    cfg.queries = 4;
    cfg.joints = 3;
    cfg.seed = seed;
    PoseModel<double> model(cfg);
    T image = T::uniform({32, 32, 3}, rng, -1.0, 1.0);
    std::vector<Joint> gt = {{0, 0.3, 0.4, 2}, {2, 0.7, 0.6, 2}};
    MatchingConfig mc;
    // assignment fixed at the base point: gradients do not flow through
    // the discrete matching
    Assignment assignment =
        hungarian(match_cost(model.forward(image), gt, mc));
    std::vector<T> leaves = {image};
    model.visit([&](const std::string&, Tensor<double>& t) {
      leaves.push_back(t);
    });
    check("model-end-to-end", leaves, [=, &model]() {
      return set_loss(model.forward(image), gt, assignment, mc).total;
    }, 24);
  }
  return out;
}

}  // namespace pef
