#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <random>
#include <string>
#include <vector>

#include "pef/blocks.hpp"
#include "pef/tensor.hpp"

namespace pef {

struct BenchRow {
  std::string mechanism;  // "self-attention" | "xca"
  int tokens = 0;
  double median_us = 0, p10_us = 0, p90_us = 0;
};

struct BenchResult {
  std::vector<BenchRow> rows;
  double self_attention_slope = 0;  // log-log growth exponent over N
  double xca_slope = 0;
};

namespace bench_detail {

inline double percentile(std::vector<double> v, double p) {
  std::sort(v.begin(), v.end());
  const double pos = p * (v.size() - 1);
  const std::size_t lo = static_cast<std::size_t>(pos);
  const std::size_t hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (pos - lo) * (v[hi] - v[lo]);
}

// least-squares slope of log2(time) against log2(N)
inline double loglog_slope(const std::vector<std::pair<int, double>>& pts) {
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  for (const auto& [n, t] : pts) {
    const double x = std::log2(static_cast<double>(n));
    const double y = std::log2(t);
    sx += x; sy += y; sxx += x * x; sxy += x * y;
  }
  const double m = static_cast<double>(pts.size());
  return (m * sxy - sx * sy) / (m * sxx - sx * sx);
}

}  // namespace bench_detail

// Median wall clock per forward for token attention vs channel attention
// across token counts; one warm-up iteration per size is excluded.
inline BenchResult bench_attention_scaling(const std::vector<int>& token_counts,
                                           int d, int repetitions,
                                           std::uint64_t seed = 7) {
  using clock = std::chrono::steady_clock;
  if (!std::is_sorted(token_counts.begin(), token_counts.end()))
    throw ValueError("bench: token counts must be ascending");
  std::mt19937_64 rng(seed);
  AttentionParams<float> token_params;
  token_params.init(d, 1, rng);
  XcaParams<float> channel_params;
  channel_params.init(d, 1, rng);

  BenchResult result;
  std::vector<std::pair<int, double>> self_pts, xca_pts;
  volatile float sink = 0;
  for (int n : token_counts) {
    Tensor<float> x = Tensor<float>::randn({n, d}, rng);
    for (int mech = 0; mech < 2; ++mech) {
      auto run = [&]() {
        Tensor<float> y = mech == 0 ? self_attention(x, token_params)
                                    : xca(x, channel_params);
        sink = sink + y.at(0);
      };
      run();  // warm-up
      std::vector<double> us;
      for (int r = 0; r < repetitions; ++r) {
        const auto t0 = clock::now();
        run();
        const auto t1 = clock::now();
        us.push_back(
            std::chrono::duration<double, std::micro>(t1 - t0).count());
      }
      BenchRow row;
      row.mechanism = mech == 0 ? "self-attention" : "xca";
      row.tokens = n;
      row.median_us = bench_detail::percentile(us, 0.5);
      row.p10_us = bench_detail::percentile(us, 0.1);
      row.p90_us = bench_detail::percentile(us, 0.9);
      result.rows.push_back(row);
      (mech == 0 ? self_pts : xca_pts).push_back({n, row.median_us});
    }
  }
  result.self_attention_slope = bench_detail::loglog_slope(self_pts);
  result.xca_slope = bench_detail::loglog_slope(xca_pts);
  return result;
}

// Delimited table: mechanism, N, median us, p10, p90; plus the growth
// exponents as a trailing summary.
inline std::string bench_report(const BenchResult& r) {
  std::string out = "mechanism\tN\tmedian_us\tp10_us\tp90_us\n";
  char buf[160];
  for (const auto& row : r.rows) {
    std::snprintf(buf, sizeof(buf), "%s\t%d\t%.1f\t%.1f\t%.1f\n",
                  row.mechanism.c_str(), row.tokens, row.median_us, row.p10_us,
                  row.p90_us);
    out += buf;
  }
  std::snprintf(buf, sizeof(buf),
                "# growth exponent self-attention = %.3f\n"
                "# growth exponent xca = %.3f\n",
                r.self_attention_slope, r.xca_slope);
  out += buf;
  return out;
}

}  // namespace pef
