#include <doctest.h>

#include "approx.hpp"

#include <cmath>
#include <random>

#include "pef/gradcheck.hpp"
#include "pef/ops.hpp"
#include "pef/tensor.hpp"

using namespace pef;
using T = Tensor<double>;

TEST_CASE("softmax of equal logits is uniform") {
  T x({1, 2}, {0.0, 0.0});
  T y = softmax(x, 1);
  CHECK(y.at(0) == Approx(0.5).margin(1e-12));
  CHECK(y.at(1) == Approx(0.5).margin(1e-12));
}

TEST_CASE("matmul shape contract") {
  std::mt19937_64 rng(1);
  T a = T::randn({2, 3}, rng), b = T::randn({3, 4}, rng);
  T y = matmul(a, b);
  CHECK(y.shape() == Shape{2, 4});
  CHECK_THROWS_AS(matmul(b, a), ShapeError);
}

TEST_CASE("sigmoid at zero") {
  CHECK(sigmoid(T::scalar(0.0)).item() == Approx(0.5).margin(1e-15));
}

TEST_CASE("backward through sum gives unit gradients") {
  T x({3}, {1.0, -2.0, 0.5}, true);
  backward(sum_all(x));
  for (double g : x.grad()) CHECK(g == Approx(1.0).margin(1e-15));
}

TEST_CASE("backward through sum of squares") {
  T x({2}, {2.0, 3.0}, true);
  backward(sum_all(mul(x, x)));
  CHECK(x.grad()[0] == Approx(4.0).margin(1e-12));
  CHECK(x.grad()[1] == Approx(6.0).margin(1e-12));
}

TEST_CASE("cross-entropy gradient is softmax minus onehot") {
  T logits({2, 3}, {0.0, 0.0, 0.0, 1.0, 2.0, 3.0}, true);
  backward(softmax_cross_entropy(logits, {1, 2}, {1.0, 1.0}));
  // weighted mean over 2 rows: each row contributes grad (p - onehot)/2
  for (int r = 0; r < 2; ++r) {
    double mx = logits.at(r * 3);
    for (int c = 1; c < 3; ++c) mx = std::max(mx, logits.at(r * 3 + c));
    double z = 0;
    for (int c = 0; c < 3; ++c) z += std::exp(logits.at(r * 3 + c) - mx);
    for (int c = 0; c < 3; ++c) {
      const double p = std::exp(logits.at(r * 3 + c) - mx) / z;
      const double expect = (p - (c == (r == 0 ? 1 : 2) ? 1.0 : 0.0)) / 2.0;
      CHECK(logits.grad()[r * 3 + c] == Approx(expect).margin(1e-12));
    }
  }
}

TEST_CASE("gradient accumulation across fan-out") {
  T x({3}, {1.0, 2.0, 3.0}, true);
  backward(sum_all(add(x, x)));
  for (double g : x.grad()) CHECK(g == Approx(2.0).margin(1e-15));
}

TEST_CASE("finite differences on sum of squares are tight") {
  std::mt19937_64 rng(7);
  T x = T::randn({4}, rng);
  auto rep = finite_difference_check<double>(
      [&]() { return sum_all(mul(x, x)); }, {x}, 1e-5, 1e-4);
  CHECK(rep.pass);
  CHECK(rep.max_rel_error < 1e-7);
}

TEST_CASE("finite differences on a constant pass") {
  std::mt19937_64 rng(7);
  T x = T::randn({3}, rng);
  auto rep = finite_difference_check<double>(
      [&]() { return scale(sum_all(x), 0.0); }, {x}, 1e-5, 1e-4);
  CHECK(rep.pass);
  CHECK(rep.max_rel_error == 0.0);
}

TEST_CASE("finite differences through a softmax-cross-entropy chain") {
  std::mt19937_64 rng(11);
  T x = T::randn({3, 4}, rng);
  T w = T::randn({4, 5}, rng);
  auto rep = finite_difference_check<double>(
      [&]() {
        return softmax_cross_entropy(matmul(x, w), {0, 3, 2},
                                     {1.0, 0.1, 1.0});
      },
      {x, w}, 1e-5, 1e-4);
  CHECK(rep.pass);
}

TEST_CASE("primitives pass gradcheck over 20 random seeds") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    std::mt19937_64 rng(seed);
    const int r = 2 + static_cast<int>(rng() % 4);
    const int c = 2 + static_cast<int>(rng() % 4);
    T x = T::randn({r, c}, rng);
    T w = T::randn({c, 3}, rng);
    std::mt19937_64 crng(seed + 100);
    T coeff = T::uniform({r, 3}, crng, 0.25, 1.0);
    auto rep = finite_difference_check<double>(
        [&]() {
          return sum_all(
              mul(softmax(gelu(matmul(layer_norm(x), w)), 1), coeff));
        },
        {x, w}, 1e-5, 1e-4);
    INFO("seed " << seed);
    CHECK(rep.pass);
  }
}

TEST_CASE("softmax rows are a probability distribution") {
  std::mt19937_64 rng(3);
  T x = T::randn({6, 9}, rng, 3.0);
  T y = softmax(x, 1);
  for (int r = 0; r < 6; ++r) {
    double s = 0;
    for (int c = 0; c < 9; ++c) {
      CHECK(y.at(static_cast<std::size_t>(r) * 9 + c) >= 0.0);
      s += y.at(static_cast<std::size_t>(r) * 9 + c);
    }
    CHECK(s == Approx(1.0).margin(1e-6));
  }
}

TEST_CASE("softmax is stable against huge logits") {
  T x({1, 3}, {1000.0, 1000.0, -1000.0});
  T y = softmax(x, 1);
  CHECK(std::isfinite(y.at(0)));
  CHECK(y.at(0) == Approx(0.5).margin(1e-9));
}

TEST_CASE("layer norm rows have zero mean and unit variance") {
  std::mt19937_64 rng(5);
  T x = T::randn({7, 12}, rng, 4.0);
  T y = layer_norm(x);
  for (int r = 0; r < 7; ++r) {
    double mean = 0, var = 0;
    for (int c = 0; c < 12; ++c) mean += y.at(static_cast<std::size_t>(r) * 12 + c);
    mean /= 12;
    for (int c = 0; c < 12; ++c) {
      const double d = y.at(static_cast<std::size_t>(r) * 12 + c) - mean;
      var += d * d;
    }
    var /= 12;
    CHECK(std::abs(mean) < 1e-6);
    CHECK(var == Approx(1.0).margin(1e-4));
  }
}

TEST_CASE("replay determinism: identical seeds give identical bits") {
  auto run = [] {
    std::mt19937_64 rng(99);
    T x = T::randn({5, 5}, rng);
    T w = T::randn({5, 5}, rng);
    return softmax(gelu(matmul(x, w)), 1);
  };
  T a = run(), b = run();
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(a.at(i) == b.at(i));
}

TEST_CASE("shape and usage errors") {
  std::mt19937_64 rng(1);
  T a = T::randn({2, 3}, rng), b = T::randn({3, 2}, rng);
  CHECK_THROWS_AS(add(a, b), ShapeError);
  CHECK_THROWS_AS(backward(a), ShapeError);  // non-scalar root
  CHECK_THROWS_AS(a.item(), ShapeError);
  CHECK_THROWS_AS(reshape(a, {4, 2}), ShapeError);
  CHECK_THROWS_AS(T({2}, {1.0, 2.0, 3.0}), ShapeError);
  CHECK_THROWS_AS(softmax_cross_entropy(a, std::vector<int>{0, 5},
                                        std::vector<double>{1.0, 1.0}),
                  ShapeError);
}

TEST_CASE("patchify layout is row-major over grid and pixels") {
  // 2x4 image, p = 2 -> 2 tokens of 12 values each
  std::vector<double> px(2 * 4 * 3);
  for (std::size_t i = 0; i < px.size(); ++i) px[i] = static_cast<double>(i);
  T img({2, 4, 3}, px);
  T t = patchify(img, 2);
  REQUIRE(t.shape() == Shape{2, 12});
  // token 0 = pixels (0,0),(0,1),(1,0),(1,1); token 1 = columns 2..3
  CHECK(t.at(0) == 0.0);                 // (0,0,r)
  CHECK(t.at(3) == 3.0);                 // (0,1,r)
  CHECK(t.at(6) == 12.0);                // (1,0,r)
  CHECK(t.at(12) == 6.0);                // token 1 starts at (0,2,r)
  CHECK_THROWS_AS(patchify(img, 3), ShapeError);
}
