#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "spade/core/tensor.hpp"

namespace spade {

// Singular values of a 2-D tensor via one-sided Jacobi: rotate column pairs of
// a working copy until all are mutually orthogonal; the column norms are then
// the singular values. Adequate for the small factor products checked here.
inline std::vector<double> singular_values(const Tensor& a) {
  if (a.ndim() != 2) throw DimensionError("singular_values expects a 2-D tensor");
  const std::size_t m = a.dim(0), n = a.dim(1);
  // work on the taller orientation so columns outnumber rows never
  std::vector<double> M;
  std::size_t rows, cols;
  if (m >= n) {
    M = a.data();
    rows = m;
    cols = n;
  } else {
    M.resize(m * n);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) M[j * m + i] = a.data()[i * n + j];
    rows = n;
    cols = m;
  }
  auto col_dot = [&](std::size_t p, std::size_t q) {
    double s = 0.0;
    for (std::size_t i = 0; i < rows; ++i) s += M[i * cols + p] * M[i * cols + q];
    return s;
  };
  const double eps = 1e-14;
  for (int sweep = 0; sweep < 60; ++sweep) {
    bool rotated = false;
    for (std::size_t p = 0; p + 1 < cols; ++p)
      for (std::size_t q = p + 1; q < cols; ++q) {
        const double apq = col_dot(p, q);
        const double app = col_dot(p, p), aqq = col_dot(q, q);
        if (std::abs(apq) <= eps * std::sqrt(app * aqq) || apq == 0.0) continue;
        rotated = true;
        const double tau = (aqq - app) / (2.0 * apq);
        const double t = (tau >= 0 ? 1.0 : -1.0) / (std::abs(tau) + std::sqrt(1.0 + tau * tau));
        const double c = 1.0 / std::sqrt(1.0 + t * t), s = c * t;
        for (std::size_t i = 0; i < rows; ++i) {
          const double vp = M[i * cols + p], vq = M[i * cols + q];
          M[i * cols + p] = c * vp - s * vq;
          M[i * cols + q] = s * vp + c * vq;
        }
      }
    if (!rotated) break;
  }
  std::vector<double> sv(cols);
  for (std::size_t p = 0; p < cols; ++p) sv[p] = std::sqrt(col_dot(p, p));
  std::sort(sv.begin(), sv.end(), std::greater<double>());
  return sv;
}

}  // namespace spade
