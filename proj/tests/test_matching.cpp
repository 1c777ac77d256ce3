#include <doctest.h>

#include "approx.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>
#include <vector>

#include "pef/matching.hpp"
#include "pef/model.hpp"
#include "pef/tensor.hpp"

using namespace pef;
using T = Tensor<double>;

namespace {

// enumerate every injective row->column map; returns the optimal cost and
// the lexicographically smallest optimal column sequence
struct BruteResult {
  double best = std::numeric_limits<double>::infinity();
  std::vector<int> cols;
};

void brute_rec(const CostMatrix& cost, int row, double acc,
               std::vector<int>& cur, std::vector<char>& used,
               BruteResult& res) {
  if (row == cost.rows) {
    if (acc < res.best - 1e-12 ||
        (acc < res.best + 1e-12 && cur < res.cols)) {
      res.best = std::min(res.best, acc);
      res.cols = cur;
    }
    return;
  }
  for (int q = 0; q < cost.cols; ++q) {
    if (used[q]) continue;
    used[q] = 1;
    cur.push_back(q);
    brute_rec(cost, row + 1, acc + cost.at(row, q), cur, used, res);
    cur.pop_back();
    used[q] = 0;
  }
}

BruteResult brute_force(const CostMatrix& cost) {
  BruteResult res;
  res.cols.assign(static_cast<std::size_t>(cost.rows), cost.cols);  // lex max
  std::vector<int> cur;
  std::vector<char> used(static_cast<std::size_t>(cost.cols), 0);
  brute_rec(cost, 0, 0.0, cur, used, res);
  return res;
}

double assignment_cost(const CostMatrix& cost, const Assignment& a) {
  double t = 0;
  for (const auto& [g, q] : a) t += cost.at(g, q);
  return t;
}

PredictionSet<double> random_predictions(int m, int classes,
                                         std::mt19937_64& rng) {
  PredictionSet<double> p;
  p.logits = T::randn({m, classes}, rng);
  T raw = T::randn({m, 2}, rng);
  p.coords = sigmoid(raw);
  return p;
}

}  // namespace

TEST_CASE("hungarian picks the zero diagonal") {
  CostMatrix c(3, 3);
  for (int g = 0; g < 3; ++g)
    for (int q = 0; q < 3; ++q) c.at(g, q) = g == q ? 0.0 : 1.0;
  Assignment a = hungarian(c);
  REQUIRE(a.size() == 3);
  for (int g = 0; g < 3; ++g) {
    CHECK(a[g].first == g);
    CHECK(a[g].second == g);
  }
}

TEST_CASE("hungarian solves the classic 2x2 crossing") {
  CostMatrix c(2, 2);
  c.at(0, 0) = 1;
  c.at(0, 1) = 2;
  c.at(1, 0) = 2;
  c.at(1, 1) = 1;
  Assignment a = hungarian(c);
  CHECK(a[0].second == 0);
  CHECK(a[1].second == 1);
  CHECK(assignment_cost(c, a) == Approx(2.0));
}

TEST_CASE("hungarian matches brute force on random rectangular costs") {
  std::mt19937_64 rng(17);
  std::uniform_real_distribution<double> dist(-3.0, 3.0);
  for (int trial = 0; trial < 100; ++trial) {
    CostMatrix c(6, 9);
    for (auto& v : c.c) v = dist(rng);
    Assignment a = hungarian(c);
    BruteResult ref = brute_force(c);
    REQUIRE(a.size() == 6);
    CHECK(assignment_cost(c, a) == Approx(ref.best).margin(1e-9));
  }
}

TEST_CASE("hungarian beats or ties every random assignment") {
  std::mt19937_64 rng(18);
  std::uniform_real_distribution<double> dist(0.0, 10.0);
  CostMatrix c(7, 11);
  for (auto& v : c.c) v = dist(rng);
  const double opt = assignment_cost(c, hungarian(c));
  std::vector<int> cols(11);
  for (int i = 0; i < 11; ++i) cols[i] = i;
  for (int trial = 0; trial < 1000; ++trial) {
    std::shuffle(cols.begin(), cols.end(), rng);
    double t = 0;
    for (int g = 0; g < 7; ++g) t += c.at(g, cols[g]);
    CHECK(opt <= t + 1e-9);
  }
}

TEST_CASE("hungarian is invariant to adding a constant") {
  std::mt19937_64 rng(19);
  std::uniform_real_distribution<double> dist(-1.0, 1.0);
  CostMatrix c(4, 6);
  for (auto& v : c.c) v = dist(rng);
  CostMatrix shifted = c;
  for (auto& v : shifted.c) v += 123.5;
  Assignment a = hungarian(c), b = hungarian(shifted);
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i] == b[i]);
}

TEST_CASE("hungarian tie-break is lexicographic") {
  CostMatrix c(3, 4);  // all zeros: every assignment is optimal
  Assignment a = hungarian(c);
  REQUIRE(a.size() == 3);
  for (int g = 0; g < 3; ++g) {
    CHECK(a[g].first == g);
    CHECK(a[g].second == g);
  }
  // tie between columns 1 and 2 for row 0: the smaller index wins
  CostMatrix t(2, 3);
  t.at(0, 0) = 5;
  t.at(0, 1) = 1;
  t.at(0, 2) = 1;
  t.at(1, 0) = 0;
  t.at(1, 1) = 0;
  t.at(1, 2) = 0;
  Assignment b = hungarian(t);
  CHECK(b[0].second == 1);
  CHECK(b[1].second == 0);
}

TEST_CASE("hungarian rejects malformed inputs") {
  CostMatrix wide(3, 2);
  CHECK_THROWS_AS(hungarian(wide), MatchError);
  CostMatrix nan(2, 2);
  nan.at(1, 1) = std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS_AS(hungarian(nan), MatchError);
  nan.at(1, 1) = std::numeric_limits<double>::infinity();
  CHECK_THROWS_AS(hungarian(nan), MatchError);
  CHECK(hungarian(CostMatrix(0, 4)).empty());
}

TEST_CASE("match_cost recomputes from scalar definitions") {
  std::mt19937_64 rng(20);
  PredictionSet<double> pred = random_predictions(4, 3, rng);
  std::vector<Joint> gt = {{0, 0.25, 0.75, 2}, {1, 0.5, 0.5, 1}};
  MatchingConfig mc;
  mc.lambda_l1 = 5.0;
  CostMatrix c = match_cost(pred, gt, mc);
  REQUIRE(c.rows == 2);
  REQUIRE(c.cols == 4);
  for (int g = 0; g < 2; ++g)
    for (int q = 0; q < 4; ++q) {
      double z = 0;
      for (int k = 0; k < 3; ++k)
        z += std::exp(pred.logits.at(static_cast<std::size_t>(q) * 3 + k));
      const double prob =
          std::exp(pred.logits.at(static_cast<std::size_t>(q) * 3 + gt[g].cls)) / z;
      const double l1 =
          std::abs(pred.coords.at(static_cast<std::size_t>(q) * 2) - gt[g].x) +
          std::abs(pred.coords.at(static_cast<std::size_t>(q) * 2 + 1) - gt[g].y);
      CHECK(c.at(g, q) ==
            Approx(-prob + mc.lambda_l1 * l1).margin(1e-12));
    }
}

TEST_CASE("match_cost bounds and validation") {
  std::mt19937_64 rng(21);
  PredictionSet<double> pred = random_predictions(5, 4, rng);
  std::vector<Joint> gt = {{0, 0.0, 0.0, 2}};
  CostMatrix c = match_cost(pred, gt);
  // class term in [-1, 0], coordinate L1 in [0, 2]
  for (double v : c.c) {
    CHECK(v >= -1.0);
    CHECK(v <= MatchingConfig{}.lambda_l1 * 2.0);
  }
  std::vector<Joint> too_many(6, Joint{0, 0.5, 0.5, 2});
  CHECK_THROWS_AS(match_cost(pred, too_many), MatchError);
  std::vector<Joint> bad_cls = {{3, 0.5, 0.5, 2}};  // classes-1 = non-object
  CHECK_THROWS_AS(match_cost(pred, bad_cls), MatchError);
}

TEST_CASE("set_loss coordinate term vanishes on a perfect match") {
  std::mt19937_64 rng(22);
  PredictionSet<double> pred = random_predictions(4, 3, rng);
  std::vector<Joint> gt = {
      {0, pred.coords.at(2), pred.coords.at(3), 2},
      {1, pred.coords.at(6), pred.coords.at(7), 2},
  };
  Assignment a = {{0, 1}, {1, 3}};
  LossBreakdown<double> loss = set_loss(pred, gt, a);
  CHECK(loss.coord_term.item() == Approx(0.0).margin(1e-12));
  CHECK(loss.total.item() ==
        Approx(loss.class_term.item()).margin(1e-12));
}

TEST_CASE("set_loss with no ground truth is pure non-object CE") {
  // M=2, all logits zero: p(non-object) = 1/3, weighted CE = -log(1/3)
  PredictionSet<double> pred;
  pred.logits = T::zeros({2, 3});
  pred.coords = T::full({2, 2}, 0.5);
  MatchingConfig mc;
  LossBreakdown<double> loss = set_loss(pred, {}, {}, mc);
  CHECK(loss.coord_term.item() == 0.0);
  CHECK(loss.class_term.item() ==
        Approx(std::log(3.0)).margin(1e-12));
  CHECK(loss.total.item() == Approx(std::log(3.0)).margin(1e-12));
}

TEST_CASE("set_loss is invariant to assignment order and gt permutation") {
  std::mt19937_64 rng(23);
  for (int trial = 0; trial < 20; ++trial) {
    PredictionSet<double> pred = random_predictions(6, 4, rng);
    std::uniform_real_distribution<double> uv(0.05, 0.95);
    std::vector<Joint> gt;
    for (int k = 0; k < 3; ++k) gt.push_back({k, uv(rng), uv(rng), 2});
    Assignment a = hungarian(match_cost(pred, gt));
    LossBreakdown<double> base = set_loss(pred, gt, a);

    // permute ground truth (and relabel the assignment accordingly)
    std::vector<int> perm = {2, 0, 1};
    std::vector<Joint> gt2(3);
    for (int k = 0; k < 3; ++k) gt2[perm[k]] = gt[k];
    Assignment a2;
    for (const auto& [g, q] : a) a2.emplace_back(perm[g], q);
    std::shuffle(a2.begin(), a2.end(), rng);
    LossBreakdown<double> loss2 = set_loss(pred, gt2, a2);
    CHECK(loss2.total.item() ==
          Approx(base.total.item()).margin(1e-12));
    CHECK(loss2.class_term.item() ==
          Approx(base.class_term.item()).margin(1e-12));
    CHECK(loss2.coord_term.item() ==
          Approx(base.coord_term.item()).margin(1e-12));
  }
}

TEST_CASE("set_loss rejects invalid assignments") {
  std::mt19937_64 rng(24);
  PredictionSet<double> pred = random_predictions(3, 3, rng);
  std::vector<Joint> gt = {{0, 0.5, 0.5, 2}, {1, 0.25, 0.25, 2}};
  CHECK_THROWS_AS(set_loss(pred, gt, Assignment{{0, 0}}), MatchError);
  CHECK_THROWS_AS(set_loss(pred, gt, Assignment{{0, 0}, {1, 0}}), MatchError);
  CHECK_THROWS_AS(set_loss(pred, gt, Assignment{{0, 0}, {0, 1}}), MatchError);
  CHECK_THROWS_AS(set_loss(pred, gt, Assignment{{0, 0}, {1, 5}}), MatchError);
}

TEST_CASE("labeled_joints drops invisible joints") {
  KeypointInstance inst;
  inst.joints = {{0, 0.1, 0.1, 0}, {1, 0.2, 0.2, 1}, {2, 0.3, 0.3, 2}};
  auto out = labeled_joints(inst);
  REQUIRE(out.size() == 2);
  CHECK(out[0].cls == 1);
  CHECK(out[1].cls == 2);
}
