#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "spade/core/tensor.hpp"
#include "spade/data/scene.hpp"

namespace spade {

// Binary spatial-semantic adjacency over N nodes: symmetric, zero diagonal.
struct AdjacencyGraph {
  std::size_t n = 0;
  std::vector<std::uint8_t> g;  // row-major n*n

  AdjacencyGraph() = default;
  explicit AdjacencyGraph(std::size_t nodes) : n(nodes), g(nodes * nodes, 0) {}

  std::uint8_t at(std::size_t i, std::size_t j) const { return g[i * n + j]; }
  void set_edge(std::size_t i, std::size_t j) {
    if (i == j) throw ContractError("adjacency diagonal must stay zero");
    g[i * n + j] = 1;
    g[j * n + i] = 1;
  }

  void validate() const {
    if (g.size() != n * n) throw ContractError("adjacency storage size mismatch");
    for (std::size_t i = 0; i < n; ++i) {
      if (at(i, i) != 0) throw ContractError("adjacency diagonal must be zero");
      for (std::size_t j = 0; j < n; ++j) {
        if (at(i, j) > 1) throw ContractError("adjacency entries must be binary");
        if (at(i, j) != at(j, i)) throw ContractError("adjacency must be symmetric");
      }
    }
  }

  std::vector<std::size_t> neighbors(std::size_t r) const {
    std::vector<std::size_t> out;
    for (std::size_t j = 0; j < n; ++j)
      if (at(r, j)) out.push_back(j);
    return out;
  }
  std::vector<std::size_t> non_neighbors(std::size_t r) const {
    std::vector<std::size_t> out;
    for (std::size_t j = 0; j < n; ++j)
      if (j != r && !at(r, j)) out.push_back(j);
    return out;
  }
};

namespace detail {

inline Mask dilate_n(const Mask& m, std::size_t H, std::size_t W, std::size_t radius) {
  Mask out = m;
  for (std::size_t i = 0; i < radius; ++i) out = dilate1(out, H, W);
  return out;
}

// cosine on raw values; a zero vector has no direction, so no semantic edge
inline double value_cosine(const double* a, const double* b, std::size_t d) {
  double ab = 0.0, aa = 0.0, bb = 0.0;
  for (std::size_t k = 0; k < d; ++k) {
    ab += a[k] * b[k];
    aa += a[k] * a[k];
    bb += b[k] * b[k];
  }
  if (aa == 0.0 || bb == 0.0) return 0.0;
  return ab / (std::sqrt(aa) * std::sqrt(bb));
}

}  // namespace detail

// Spatial edge iff the dilated masks intersect; semantic edge iff feature
// cosine exceeds the threshold; an edge present in both sources is capped at
// a single binary edge.
inline AdjacencyGraph build_graph(const std::vector<Mask>& masks, std::size_t H, std::size_t W,
                                  const Tensor& features, double sem_threshold = 0.5,
                                  std::size_t dilation = 1) {
  const std::size_t N = masks.size();
  if (N == 0) throw ContractError("build_graph: need at least one mask");
  if (features.ndim() != 2 || features.dim(0) != N)
    throw DimensionError("build_graph: features must be [N, d]");
  for (const auto& m : masks)
    if (m.size() != H * W) throw DimensionError("build_graph: mask size mismatch");

  std::vector<Mask> grown;
  grown.reserve(N);
  for (const auto& m : masks) grown.push_back(detail::dilate_n(m, H, W, dilation));

  const std::size_t d = features.dim(1);
  const double* fv = features.data().data();
  AdjacencyGraph graph(N);
  for (std::size_t i = 0; i < N; ++i)
    for (std::size_t j = i + 1; j < N; ++j) {
      const bool spatial = masks_intersect(grown[i], grown[j]);
      const bool semantic = detail::value_cosine(fv + i * d, fv + j * d, d) > sem_threshold;
      if (spatial || semantic) graph.set_edge(i, j);
    }
  return graph;
}

}  // namespace spade
