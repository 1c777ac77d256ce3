#pragma once

#include <cmath>
#include <functional>
#include <limits>
#include <random>
#include <string>
#include <vector>

#include "pef/tensor.hpp"

namespace pef {

struct CheckReport {
  double max_rel_error = 0.0;
  double tolerance = 0.0;
  std::size_t probes = 0;
  std::size_t skipped = 0;  // entries below the resolvability floor
  bool pass = false;
  std::string worst;  // "leaf#i[j]" of the worst entry
};

// Central-difference check of d(f)/d(leaves). f must rebuild the graph on
// every call (define-by-run) and return a scalar. Run in 64-bit mode;
// float is too coarse for step 1e-5.
//
// max_probes limits the number of perturbed entries per leaf (0 = all),
// drawn deterministically from probe_seed.
template <class Real>
CheckReport finite_difference_check(
    const std::function<Tensor<Real>()>& f, std::vector<Tensor<Real>> leaves,
    Real step = Real(1e-5), Real tolerance = Real(1e-4),
    std::size_t max_probes = 0, std::uint64_t probe_seed = 0x9e3779b9u) {
  for (auto& leaf : leaves) {
    leaf.set_requires_grad(true);
    leaf.zero_grad();
  }
  Tensor<Real> out = f();
  if (out.size() != 1) throw ShapeError("gradcheck: f must be scalar-valued");
  if (!std::isfinite(static_cast<double>(out.item())))
    throw ValueError("gradcheck: non-finite f at base point");
  backward(out);

  CheckReport rep;
  rep.tolerance = static_cast<double>(tolerance);
  // fp - fm carries round-off of order eps*|f|; gradient entries below
  // that noise divided by the tolerance are unresolvable by central
  // differences at this step. Such entries are skipped only when analytic
  // AND numeric agree in being negligible, so a dropped backward term
  // (tiny analytic, large numeric) is still caught.
  const double noise = std::numeric_limits<double>::epsilon() *
                       std::max(1.0, std::abs(static_cast<double>(out.item()))) /
                       static_cast<double>(step);
  const double floor = 10.0 * noise / static_cast<double>(tolerance);
  std::mt19937_64 rng(probe_seed);
  for (std::size_t li = 0; li < leaves.size(); ++li) {
    auto& leaf = leaves[li];
    std::vector<std::size_t> idx(leaf.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    if (max_probes > 0 && idx.size() > max_probes) {
      for (std::size_t i = 0; i < max_probes; ++i) {
        std::uniform_int_distribution<std::size_t> pick(i, idx.size() - 1);
        std::swap(idx[i], idx[pick(rng)]);
      }
      idx.resize(max_probes);
    }
    for (std::size_t j : idx) {
      const Real saved = leaf.at(j);
      leaf.at(j) = saved + step;
      const Real fp = f().item();
      leaf.at(j) = saved - step;
      const Real fm = f().item();
      leaf.at(j) = saved;
      if (!std::isfinite(static_cast<double>(fp)) ||
          !std::isfinite(static_cast<double>(fm)))
        throw ValueError("gradcheck: non-finite f at probe point");
      const double numeric = static_cast<double>(fp - fm) / (2.0 * step);
      const double analytic = static_cast<double>(leaf.grad()[j]);
      if (std::abs(analytic) < floor && std::abs(numeric) < floor) {
        ++rep.skipped;
        continue;
      }
      const double denom =
          std::max(1e-8, std::abs(analytic) + std::abs(numeric));
      const double rel = std::abs(analytic - numeric) / denom;
      ++rep.probes;
      if (rel > rep.max_rel_error) {
        rep.max_rel_error = rel;
        rep.worst = "leaf#" + std::to_string(li) + "[" + std::to_string(j) + "]";
      }
    }
  }
  rep.pass = rep.max_rel_error < rep.tolerance;
  return rep;
}

// Convenience overload: single input tensor, f(x).
template <class Real>
CheckReport finite_difference_check(
    const std::function<Tensor<Real>(Tensor<Real>&)>& f, Tensor<Real> x,
    Real step = Real(1e-5), Real tolerance = Real(1e-4),
    std::size_t max_probes = 0) {
  return finite_difference_check<Real>([&]() { return f(x); }, {x}, step,
                                       tolerance, max_probes);
}

}  // namespace pef
