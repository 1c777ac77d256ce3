#include <doctest.h>

#include "approx.hpp"

#include <cmath>
#include <random>
#include <vector>

#include "pef/blocks.hpp"
#include "pef/gradcheck_suite.hpp"
#include "pef/ops.hpp"
#include "pef/tensor.hpp"

using namespace pef;
using T = Tensor<double>;

namespace {

void set_identity(Linear<double>& lin) {
  const int d = lin.w.dim(0);
  for (int i = 0; i < d; ++i)
    for (int j = 0; j < d; ++j)
      lin.w.at(static_cast<std::size_t>(i) * d + j) = i == j ? 1.0 : 0.0;
  for (std::size_t i = 0; i < lin.b.size(); ++i) lin.b.at(i) = 0.0;
}

T permute_rows(const T& x, const std::vector<int>& perm) {
  const int n = x.dim(0), c = x.dim(1);
  std::vector<double> out(static_cast<std::size_t>(n) * c);
  for (int r = 0; r < n; ++r)
    for (int j = 0; j < c; ++j)
      out[static_cast<std::size_t>(r) * c + j] =
          x.at(static_cast<std::size_t>(perm[r]) * c + j);
  return T({n, c}, out);
}

}  // namespace

TEST_CASE("self-attention over one token reduces to o(v(x))") {
  std::mt19937_64 rng(1);
  AttentionParams<double> p;
  p.init(8, 2, rng);
  T x = T::randn({1, 8}, rng);
  T got = self_attention(x, p);
  T want = p.o(p.v(x));
  REQUIRE(got.shape() == want.shape());
  for (std::size_t i = 0; i < got.size(); ++i)
    CHECK(got.at(i) == Approx(want.at(i)).margin(1e-12));
}

TEST_CASE("self-attention hand oracle with identity projections") {
  std::mt19937_64 rng(2);
  AttentionParams<double> p;
  p.init(2, 1, rng);
  set_identity(p.q);
  set_identity(p.k);
  set_identity(p.v);
  set_identity(p.o);
  T x({2, 2}, {1.0, 0.0, 0.0, 1.0});
  // scores = x x^T / sqrt(2) = I/sqrt(2); row 0 attends with
  // softmax([1/sqrt(2), 0])
  const double s = 1.0 / std::sqrt(2.0);
  const double a00 = std::exp(s) / (std::exp(s) + 1.0);
  T y = self_attention(x, p);
  CHECK(y.at(0) == Approx(a00).margin(1e-12));
  CHECK(y.at(1) == Approx(1.0 - a00).margin(1e-12));
  CHECK(y.at(2) == Approx(1.0 - a00).margin(1e-12));
  CHECK(y.at(3) == Approx(a00).margin(1e-12));
}

TEST_CASE("self-attention is permutation equivariant") {
  std::mt19937_64 rng(3);
  AttentionParams<double> p;
  p.init(8, 2, rng);
  T x = T::randn({5, 8}, rng);
  const std::vector<int> perm{3, 0, 4, 1, 2};
  T a = permute_rows(self_attention(x, p), perm);
  T b = self_attention(permute_rows(x, perm), p);
  for (std::size_t i = 0; i < a.size(); ++i)
    CHECK(a.at(i) == Approx(b.at(i)).margin(1e-9));
}

TEST_CASE("xca is permutation equivariant over tokens") {
  std::mt19937_64 rng(4);
  XcaParams<double> p;
  p.init(6, 3, rng);
  T x = T::randn({5, 6}, rng);
  const std::vector<int> perm{4, 2, 0, 3, 1};
  T a = permute_rows(xca(x, p), perm);
  T b = xca(permute_rows(x, perm), p);
  for (std::size_t i = 0; i < a.size(); ++i)
    CHECK(a.at(i) == Approx(b.at(i)).margin(1e-9));
}

TEST_CASE("cross-attention with a single memory token copies o(v(m))") {
  std::mt19937_64 rng(5);
  AttentionParams<double> p;
  p.init(4, 2, rng);
  T q = T::randn({7, 4}, rng);
  T m = T::randn({1, 4}, rng);
  T y = cross_attention(q, m, p);
  REQUIRE(y.shape() == Shape{7, 4});
  T want = p.o(p.v(m));
  for (int r = 0; r < 7; ++r)
    for (int c = 0; c < 4; ++c)
      CHECK(y.at(static_cast<std::size_t>(r) * 4 + c) ==
            Approx(want.at(c)).margin(1e-12));
}

TEST_CASE("cross-attention is invariant to memory row order") {
  std::mt19937_64 rng(6);
  AttentionParams<double> p;
  p.init(8, 2, rng);
  T q = T::randn({3, 8}, rng);
  T m = T::randn({6, 8}, rng);
  const std::vector<int> perm{5, 1, 3, 0, 4, 2};
  T a = cross_attention(q, m, p);
  T b = cross_attention(q, permute_rows(m, perm), p);
  for (std::size_t i = 0; i < a.size(); ++i)
    CHECK(a.at(i) == Approx(b.at(i)).margin(1e-9));
}

TEST_CASE("xca with one channel reduces to o(v(x))") {
  std::mt19937_64 rng(7);
  XcaParams<double> p;
  p.init(1, 1, rng);
  T x = T::randn({5, 1}, rng);
  T got = xca(x, p);
  T want = p.proj.o(p.proj.v(x));
  for (std::size_t i = 0; i < got.size(); ++i)
    CHECK(got.at(i) == Approx(want.at(i)).margin(1e-12));
}

TEST_CASE("attention output rows stay inside the value hull") {
  // with v = o = identity each output row is a convex combination of the
  // input rows, so it is bounded per column by the column extrema
  std::mt19937_64 rng(8);
  AttentionParams<double> p;
  p.init(4, 1, rng);
  set_identity(p.v);
  set_identity(p.o);
  T x = T::randn({6, 4}, rng);
  T y = self_attention(x, p);
  for (int c = 0; c < 4; ++c) {
    double lo = x.at(c), hi = x.at(c);
    for (int r = 1; r < 6; ++r) {
      lo = std::min(lo, x.at(static_cast<std::size_t>(r) * 4 + c));
      hi = std::max(hi, x.at(static_cast<std::size_t>(r) * 4 + c));
    }
    for (int r = 0; r < 6; ++r) {
      const double v = y.at(static_cast<std::size_t>(r) * 4 + c);
      CHECK(v >= lo - 1e-12);
      CHECK(v <= hi + 1e-12);
    }
  }
}

TEST_CASE("lpi maps zero tokens to zero") {
  std::mt19937_64 rng(9);
  LpiParams<double> p;
  p.init(3, rng);
  T tokens = T::zeros({12, 3});
  T y = local_patch_interaction(tokens, {3, 4}, p);
  for (std::size_t i = 0; i < y.size(); ++i) CHECK(y.at(i) == 0.0);
}

TEST_CASE("lpi on a 1x1 grid uses only the center taps") {
  std::mt19937_64 rng(10);
  LpiParams<double> p;
  p.init(2, rng);
  p.b1.at(0) = 0.3;
  p.b1.at(1) = -0.2;
  p.b2.at(0) = 0.1;
  p.b2.at(1) = 0.4;
  T tokens({1, 2}, {0.7, -1.1});
  T y = local_patch_interaction(tokens, {1, 1}, p);
  auto gelu_ref = [](double v) {
    return 0.5 * v * (1.0 + std::erf(v / std::sqrt(2.0)));
  };
  for (int c = 0; c < 2; ++c) {
    const double k1c = p.k1.at(static_cast<std::size_t>(c) * 9 + 4);
    const double k2c = p.k2.at(static_cast<std::size_t>(c) * 9 + 4);
    const double mid = gelu_ref(tokens.at(c) * k1c + p.b1.at(c));
    CHECK(y.at(c) == Approx(mid * k2c + p.b2.at(c)).margin(1e-9));
  }
}

TEST_CASE("lpi is shift equivariant away from the border") {
  std::mt19937_64 rng(11);
  const int rows = 7, cols = 7, d = 2;
  LpiParams<double> p;
  p.init(d, rng);
  T a = T::randn({rows * cols, d}, rng);
  // b = a shifted one row down, first row zero
  std::vector<double> bv(a.size(), 0.0);
  for (int r = 1; r < rows; ++r)
    for (int c = 0; c < cols; ++c)
      for (int ch = 0; ch < d; ++ch)
        bv[(static_cast<std::size_t>(r) * cols + c) * d + ch] =
            a.at((static_cast<std::size_t>(r - 1) * cols + c) * d + ch);
  T b({rows * cols, d}, bv);
  T ya = local_patch_interaction(a, {rows, cols}, p);
  T yb = local_patch_interaction(b, {rows, cols}, p);
  // receptive field of the two stacked 3x3 convolutions has radius 2; the
  // shifted image must also keep that radius clear of the bottom border,
  // so only rows 3..4 of the 7-row grid are comparable
  for (int r = 3; r <= 4; ++r)
    for (int c = 2; c <= 4; ++c)
      for (int ch = 0; ch < d; ++ch)
        CHECK(yb.at((static_cast<std::size_t>(r) * cols + c) * d + ch) ==
              Approx(ya.at(
                  (static_cast<std::size_t>(r - 1) * cols + c) * d + ch))
                  .margin(1e-9));
}

TEST_CASE("encoder layer with zeroed parameters is the identity") {
  for (EncoderVariant var :
       {EncoderVariant::TokenAttention, EncoderVariant::ChannelAttention}) {
    std::mt19937_64 rng(12);
    EncoderLayer<double> layer;
    layer.init(6, 2, var, rng, {2, 3}, true);
    layer.visit("layer", [](const std::string&, T& t) {
      for (std::size_t i = 0; i < t.size(); ++i) t.at(i) = 0.0;
    });
    T x = T::randn({7, 6}, rng);  // CLS + 2x3 grid
    T y = layer(x);
    REQUIRE(y.shape() == x.shape());
    for (std::size_t i = 0; i < x.size(); ++i)
      CHECK(y.at(i) == Approx(x.at(i)).margin(1e-12));
  }
}

TEST_CASE("encoder layers preserve the sequence shape") {
  std::mt19937_64 rng(13);
  {
    EncoderLayer<double> layer;
    layer.init(8, 4, EncoderVariant::TokenAttention, rng);
    for (int n : {1, 3, 10}) {
      T x = T::randn({n, 8}, rng);
      CHECK(layer(x).shape() == Shape{n, 8});
    }
  }
  {
    EncoderLayer<double> layer;
    layer.init(8, 2, EncoderVariant::ChannelAttention, rng, {3, 4}, true);
    T x = T::randn({13, 8}, rng);  // CLS + 12 grid tokens
    CHECK(layer(x).shape() == Shape{13, 8});
    T bad = T::randn({12, 8}, rng);
    CHECK_THROWS_AS(layer(bad), ShapeError);
  }
}

TEST_CASE("decoder layer output shape is queries x d for any memory") {
  std::mt19937_64 rng(14);
  DecoderLayer<double> layer;
  layer.init(8, 2, rng);
  for (int m : {1, 4}) {
    T q = T::zeros({m, 8});
    T qpos = T::randn({m, 8}, rng);
    for (int n : {3, 7}) {
      T mem = T::randn({n, 8}, rng);
      T mpos = T::randn({n, 8}, rng);
      CHECK(layer(q, mem, qpos, &mpos).shape() == Shape{m, 8});
      CHECK(layer(q, mem, qpos, nullptr).shape() == Shape{m, 8});
    }
  }
}

TEST_CASE("block gradcheck: encoder and decoder layers") {
  auto suite = run_gradcheck_suite();
  for (const auto& entry : suite) {
    INFO(entry.name << " max rel " << entry.report.max_rel_error);
    CHECK(entry.report.pass);
  }
}
