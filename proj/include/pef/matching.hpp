#pragma once

#include <cmath>
#include <limits>
#include <utility>
#include <vector>

#include "pef/data.hpp"
#include "pef/model.hpp"
#include "pef/ops.hpp"
#include "pef/tensor.hpp"

namespace pef {

struct MatchError : std::runtime_error {
  explicit MatchError(const std::string& what) : std::runtime_error(what) {}
};

// rows = ground-truth joints, cols = queries; all entries finite, G <= M
struct CostMatrix {
  int rows = 0;
  int cols = 0;
  std::vector<double> c;

  CostMatrix() = default;
  CostMatrix(int g, int m) : rows(g), cols(m), c(static_cast<std::size_t>(g) * m, 0.0) {}

  double& at(int g, int q) { return c[static_cast<std::size_t>(g) * cols + q]; }
  double at(int g, int q) const {
    return c[static_cast<std::size_t>(g) * cols + q];
  }
};

// one (gt index, query index) pair per ground-truth joint; injective
using Assignment = std::vector<std::pair<int, int>>;

namespace match_detail {

constexpr double kInf = std::numeric_limits<double>::infinity();

// Jonker-Volgenant shortest augmenting path, rows <= cols, minimizing.
// Returns the column matched to each row; `total` gets the optimal cost.
inline std::vector<int> jv_solve(const CostMatrix& cost, double* total) {
  const int n = cost.rows, m = cost.cols;
  std::vector<double> u(static_cast<std::size_t>(n) + 1, 0.0);
  std::vector<double> v(static_cast<std::size_t>(m) + 1, 0.0);
  std::vector<int> p(static_cast<std::size_t>(m) + 1, 0);  // col -> row (1-based)
  std::vector<int> way(static_cast<std::size_t>(m) + 1, 0);
  for (int i = 1; i <= n; ++i) {
    p[0] = i;
    int j0 = 0;
    std::vector<double> minv(static_cast<std::size_t>(m) + 1, kInf);
    std::vector<char> used(static_cast<std::size_t>(m) + 1, 0);
    do {
      used[j0] = 1;
      const int i0 = p[j0];
      double delta = kInf;
      int j1 = 0;
      for (int j = 1; j <= m; ++j) {
        if (used[j]) continue;
        const double cur = cost.at(i0 - 1, j - 1) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (int j = 0; j <= m; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const int j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0);
  }
  std::vector<int> row_to_col(static_cast<std::size_t>(n), -1);
  for (int j = 1; j <= m; ++j)
    if (p[j] > 0) row_to_col[static_cast<std::size_t>(p[j]) - 1] = j - 1;
  double t = 0;
  for (int i = 0; i < n; ++i) t += cost.at(i, row_to_col[i]);
  if (total) *total = t;
  return row_to_col;
}

// Optimal total for rows `first_row..rows-1` restricted to unused columns.
inline double tail_optimum(const CostMatrix& cost, int first_row,
                           const std::vector<char>& used_col) {
  const int g = cost.rows - first_row;
  if (g == 0) return 0.0;
  std::vector<int> cols;
  for (int q = 0; q < cost.cols; ++q)
    if (!used_col[q]) cols.push_back(q);
  CostMatrix sub(g, static_cast<int>(cols.size()));
  for (int r = 0; r < g; ++r)
    for (std::size_t j = 0; j < cols.size(); ++j)
      sub.at(r, static_cast<int>(j)) = cost.at(first_row + r, cols[j]);
  double t = 0;
  jv_solve(sub, &t);
  return t;
}

}  // namespace match_detail

// Minimum-cost injective assignment of rows to columns. Among equal-cost
// optima, returns the lexicographically smallest column sequence
// (row 0 first, then row 1, ...).
inline Assignment hungarian(const CostMatrix& cost) {
  if (cost.rows > cost.cols)
    throw MatchError("hungarian: more ground-truth joints than queries");
  if (cost.rows == 0) return {};
  for (double v : cost.c)
    if (!std::isfinite(v)) throw MatchError("hungarian: non-finite cost entry");

  double best = 0;
  match_detail::jv_solve(cost, &best);
  const double tol = 1e-9 * std::max(1.0, std::abs(best));

  // fix columns row by row, taking the smallest column index that still
  // reaches the optimal total
  Assignment out;
  std::vector<char> used(static_cast<std::size_t>(cost.cols), 0);
  double prefix = 0;
  for (int g = 0; g < cost.rows; ++g) {
    int chosen = -1;
    for (int q = 0; q < cost.cols; ++q) {
      if (used[q]) continue;
      used[q] = 1;
      const double t = prefix + cost.at(g, q) +
                       match_detail::tail_optimum(cost, g + 1, used);
      used[q] = 0;
      if (t <= best + tol) {
        chosen = q;
        break;
      }
    }
    if (chosen < 0) throw MatchError("hungarian: internal refinement failure");
    used[chosen] = 1;
    prefix += cost.at(g, chosen);
    out.emplace_back(g, chosen);
  }
  return out;
}

struct MatchingConfig {
  double lambda_l1 = 5.0;     // coordinate term weight
  double noobj_weight = 0.1;  // class weight for unmatched queries
};

// Ground truth as matching/loss code consumes it: labeled joints only
// (visibility > 0), coordinates crop-normalized.
inline std::vector<Joint> labeled_joints(const KeypointInstance& inst) {
  std::vector<Joint> out;
  for (const auto& j : inst.joints)
    if (j.visibility > 0) out.push_back(j);
  return out;
}

// cost[g][q] = -softmax(logits[q])[class(g)] + lambda * L1(coords[q], gt[g])
template <class Real>
CostMatrix match_cost(const PredictionSet<Real>& pred,
                      const std::vector<Joint>& gt,
                      const MatchingConfig& mc = {}) {
  const int m = pred.logits.dim(0);
  const int classes = pred.logits.dim(1);
  const int g = static_cast<int>(gt.size());
  if (g > m) throw MatchError("match_cost: more joints than queries");
  for (const auto& j : gt)
    if (j.cls < 0 || j.cls >= classes - 1)
      throw MatchError("match_cost: joint class id out of range");

  // plain softmax over the stored logits; matching is not differentiated
  std::vector<double> probs(static_cast<std::size_t>(m) * classes);
  for (int q = 0; q < m; ++q) {
    double mx = -match_detail::kInf;
    for (int c = 0; c < classes; ++c)
      mx = std::max(mx, static_cast<double>(
                            pred.logits.at(static_cast<std::size_t>(q) * classes + c)));
    double sum = 0;
    for (int c = 0; c < classes; ++c) {
      const double e = std::exp(
          static_cast<double>(
              pred.logits.at(static_cast<std::size_t>(q) * classes + c)) - mx);
      probs[static_cast<std::size_t>(q) * classes + c] = e;
      sum += e;
    }
    for (int c = 0; c < classes; ++c)
      probs[static_cast<std::size_t>(q) * classes + c] /= sum;
  }

  CostMatrix cost(g, m);
  for (int r = 0; r < g; ++r)
    for (int q = 0; q < m; ++q) {
      const double px = static_cast<double>(pred.coords.at(static_cast<std::size_t>(q) * 2));
      const double py = static_cast<double>(pred.coords.at(static_cast<std::size_t>(q) * 2 + 1));
      const double l1 = std::abs(px - gt[r].x) + std::abs(py - gt[r].y);
      cost.at(r, q) =
          -probs[static_cast<std::size_t>(q) * classes + gt[r].cls] +
          mc.lambda_l1 * l1;
    }
  return cost;
}

template <class Real>
struct LossBreakdown {
  Tensor<Real> total, class_term, coord_term;
};

// Class term: weighted-mean cross-entropy over all M queries, target =
// matched class or non-object (weight noobj_weight). Coordinate term:
// lambda * mean per-pair L1 over matched pairs. Gradients do not flow
// through the discrete assignment.
template <class Real>
LossBreakdown<Real> set_loss(const PredictionSet<Real>& pred,
                             const std::vector<Joint>& gt,
                             const Assignment& assignment,
                             const MatchingConfig& mc = {}) {
  const int m = pred.logits.dim(0);
  const int classes = pred.logits.dim(1);
  const int non_object = classes - 1;
  if (assignment.size() != gt.size())
    throw MatchError("set_loss: assignment does not cover ground truth");

  std::vector<int> targets(static_cast<std::size_t>(m), non_object);
  std::vector<Real> weights(static_cast<std::size_t>(m),
                            static_cast<Real>(mc.noobj_weight));
  std::vector<char> used_row(gt.size(), 0), used_col(static_cast<std::size_t>(m), 0);
  for (const auto& [g, q] : assignment) {
    if (g < 0 || g >= static_cast<int>(gt.size()) || q < 0 || q >= m ||
        used_row[g] || used_col[q])
      throw MatchError("set_loss: invalid assignment");
    used_row[g] = used_col[q] = 1;
    targets[static_cast<std::size_t>(q)] = gt[static_cast<std::size_t>(g)].cls;
    weights[static_cast<std::size_t>(q)] = Real(1);
  }

  LossBreakdown<Real> out;
  out.class_term = softmax_cross_entropy(pred.logits, std::move(targets),
                                         std::move(weights));
  if (!gt.empty()) {
    std::vector<int> query_idx;
    std::vector<Real> gt_xy;
    for (const auto& [g, q] : assignment) {
      query_idx.push_back(q);
      gt_xy.push_back(static_cast<Real>(gt[static_cast<std::size_t>(g)].x));
      gt_xy.push_back(static_cast<Real>(gt[static_cast<std::size_t>(g)].y));
    }
    Tensor<Real> gt_t({static_cast<int>(assignment.size()), 2},
                      std::move(gt_xy));
    out.coord_term = scale(l1_loss(gather_rows(pred.coords, query_idx), gt_t),
                           static_cast<Real>(mc.lambda_l1));
  } else {
    out.coord_term = Tensor<Real>::scalar(Real(0));
  }
  out.total = add(out.class_term, out.coord_term);
  return out;
}

}  // namespace pef
