#pragma once

#include <cstdint>
#include <limits>
#include <vector>

#include "spade/core/errors.hpp"

namespace spade {

inline constexpr std::size_t kUnassigned = std::numeric_limits<std::size_t>::max();

struct Assignment {
  std::vector<std::size_t> row_to_col;  // kUnassigned where a row stays unmatched
  double cost = 0.0;                    // total over matched pairs
};

namespace detail {

// Potential-based shortest augmenting path solver; needs rows <= cols and
// matches every row. O(rows^2 * cols).
inline std::vector<std::size_t> solve_rect(const std::vector<std::vector<double>>& cost,
                                           std::size_t n, std::size_t m) {
  const double kInf = std::numeric_limits<double>::infinity();
  std::vector<double> u(n + 1, 0.0), v(m + 1, 0.0);
  std::vector<std::size_t> p(m + 1, 0), way(m + 1, 0);
  for (std::size_t i = 1; i <= n; ++i) {
    p[0] = i;
    std::size_t j0 = 0;
    std::vector<double> minv(m + 1, kInf);
    std::vector<char> used(m + 1, 0);
    do {
      used[j0] = 1;
      const std::size_t i0 = p[j0];
      std::size_t j1 = 0;
      double delta = kInf;
      for (std::size_t j = 1; j <= m; ++j) {
        if (used[j]) continue;
        const double cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (std::size_t j = 0; j <= m; ++j) {
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
      const std::size_t j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  std::vector<std::size_t> row_to_col(n, kUnassigned);
  for (std::size_t j = 1; j <= m; ++j)
    if (p[j] != 0) row_to_col[p[j] - 1] = j - 1;
  return row_to_col;
}

}  // namespace detail

// Minimum-cost assignment on a rectangular matrix: matches min(rows, cols)
// pairs; the leftover rows or columns of the larger side stay unmatched.
inline Assignment hungarian(const std::vector<std::vector<double>>& cost) {
  Assignment out;
  const std::size_t n = cost.size();
  if (n == 0) return out;
  const std::size_t m = cost[0].size();
  for (const auto& r : cost)
    if (r.size() != m) throw ContractError("hungarian: ragged cost matrix");
  out.row_to_col.assign(n, kUnassigned);
  if (m == 0) return out;

  if (n <= m) {
    out.row_to_col = detail::solve_rect(cost, n, m);
  } else {
    std::vector<std::vector<double>> t(m, std::vector<double>(n));
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < m; ++j) t[j][i] = cost[i][j];
    const auto col_to_row = detail::solve_rect(t, m, n);
    for (std::size_t j = 0; j < m; ++j)
      if (col_to_row[j] != kUnassigned) out.row_to_col[col_to_row[j]] = j;
  }
  for (std::size_t i = 0; i < n; ++i)
    if (out.row_to_col[i] != kUnassigned) out.cost += cost[i][out.row_to_col[i]];
  return out;
}

}  // namespace spade
