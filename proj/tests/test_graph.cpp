#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "spade/core/rng.hpp"
#include "spade/graph/adjacency.hpp"

using namespace spade;

namespace {

Mask rect_mask(std::size_t H, std::size_t W, std::size_t y0, std::size_t x0, std::size_t y1,
               std::size_t x1) {
  Mask m(H * W, 0);
  for (std::size_t y = y0; y <= y1; ++y)
    for (std::size_t x = x0; x <= x1; ++x) m[y * W + x] = 1;
  return m;
}

// Coordinate-space oracle: the 1-dilated masks intersect exactly when some
// pixel of A and some pixel of B are within Manhattan distance 2 (they then
// share an in-grid cell reachable by one step from each).
bool oracle_spatial(const Mask& a, const Mask& b, std::size_t H, std::size_t W) {
  for (std::size_t ya = 0; ya < H; ++ya)
    for (std::size_t xa = 0; xa < W; ++xa) {
      if (!a[ya * W + xa]) continue;
      for (std::size_t yb = 0; yb < H; ++yb)
        for (std::size_t xb = 0; xb < W; ++xb) {
          if (!b[yb * W + xb]) continue;
          const std::size_t dy = ya > yb ? ya - yb : yb - ya;
          const std::size_t dx = xa > xb ? xa - xb : xb - xa;
          if (dy + dx <= 2) return true;
        }
    }
  return false;
}

bool oracle_semantic(const Tensor& f, std::size_t i, std::size_t j, double thr) {
  const std::size_t d = f.dim(1);
  double ab = 0, aa = 0, bb = 0;
  for (std::size_t k = 0; k < d; ++k) {
    ab += f.at(i, k) * f.at(j, k);
    aa += f.at(i, k) * f.at(i, k);
    bb += f.at(j, k) * f.at(j, k);
  }
  if (aa == 0.0 || bb == 0.0) return false;
  return ab / (std::sqrt(aa) * std::sqrt(bb)) > thr;
}

}  // namespace

TEST_CASE("touching masks with orthogonal features form a spatial edge", "[graph]") {
  const std::size_t H = 8, W = 8;
  std::vector<Mask> masks{rect_mask(H, W, 1, 1, 3, 3), rect_mask(H, W, 1, 4, 3, 6)};
  Tensor f = Tensor::zeros({2, 4});
  f.mutable_data()[0] = 1.0;  // e0
  f.mutable_data()[5] = 1.0;  // e1
  AdjacencyGraph g = build_graph(masks, H, W, f, 0.5);
  g.validate();
  REQUIRE(g.at(0, 1) == 1);
  REQUIRE(g.at(1, 0) == 1);
}

TEST_CASE("far masks with identical features form a semantic edge", "[graph]") {
  const std::size_t H = 16, W = 16;
  std::vector<Mask> masks{rect_mask(H, W, 0, 0, 1, 1), rect_mask(H, W, 12, 12, 14, 14)};
  Tensor f = Tensor::zeros({2, 3});
  for (std::size_t i = 0; i < 2; ++i) {
    f.mutable_data()[i * 3 + 0] = 0.6;
    f.mutable_data()[i * 3 + 2] = -0.8;
  }
  AdjacencyGraph g = build_graph(masks, H, W, f, 0.5);
  REQUIRE(g.at(0, 1) == 1);

  // orthogonal features at the same distance: no edge of either kind
  Tensor f2 = Tensor::zeros({2, 3});
  f2.mutable_data()[0] = 1.0;
  f2.mutable_data()[4] = 1.0;
  AdjacencyGraph g2 = build_graph(masks, H, W, f2, 0.5);
  REQUIRE(g2.at(0, 1) == 0);
  REQUIRE(g2.at(1, 0) == 0);
}

TEST_CASE("double edges cap at one", "[graph]") {
  const std::size_t H = 8, W = 8;
  std::vector<Mask> masks{rect_mask(H, W, 1, 1, 3, 3), rect_mask(H, W, 2, 3, 4, 5)};
  Tensor f = Tensor::ones({2, 3});  // identical -> semantic, overlapping -> spatial
  AdjacencyGraph g = build_graph(masks, H, W, f, 0.5);
  g.validate();
  REQUIRE(g.at(0, 1) == 1);
}

TEST_CASE("graph equals the brute-force oracle on random layouts", "[graph]") {
  const std::size_t H = 16, W = 16;
  Rng rng(20260818);
  for (std::size_t trial = 0; trial < 200; ++trial) {
    const std::size_t N = static_cast<std::size_t>(rng.uniform_int(1, 8));
    std::vector<Mask> masks;
    for (std::size_t i = 0; i < N; ++i) {
      const std::size_t y0 = static_cast<std::size_t>(rng.uniform_int(0, long(H) - 3));
      const std::size_t x0 = static_cast<std::size_t>(rng.uniform_int(0, long(W) - 3));
      const std::size_t y1 = y0 + static_cast<std::size_t>(rng.uniform_int(0, 2));
      const std::size_t x1 = x0 + static_cast<std::size_t>(rng.uniform_int(0, 2));
      masks.push_back(rect_mask(H, W, y0, x0, y1, x1));
    }
    Tensor f = Tensor::zeros({N, 4});
    for (std::size_t i = 0; i < N; ++i) {
      const double pick = rng.uniform();
      if (pick < 0.2 && i > 0) {
        // duplicate an earlier row to force a semantic edge
        for (std::size_t k = 0; k < 4; ++k) f.mutable_data()[i * 4 + k] = f.at(i - 1, k);
      } else if (pick < 0.3) {
        // zero row: no direction, so never a semantic edge
      } else {
        for (std::size_t k = 0; k < 4; ++k) f.mutable_data()[i * 4 + k] = rng.normal();
      }
    }
    AdjacencyGraph g = build_graph(masks, H, W, f, 0.5);
    g.validate();
    for (std::size_t i = 0; i < N; ++i)
      for (std::size_t j = 0; j < N; ++j) {
        if (i == j) {
          REQUIRE(g.at(i, j) == 0);
          continue;
        }
        const bool expect =
            oracle_spatial(masks[i], masks[j], H, W) || oracle_semantic(f, i, j, 0.5);
        INFO("trial " << trial << " pair " << i << "," << j);
        REQUIRE(static_cast<bool>(g.at(i, j)) == expect);
      }
  }
}

TEST_CASE("graph input contracts", "[graph]") {
  REQUIRE_THROWS_AS(build_graph({}, 4, 4, Tensor::zeros({0, 2})), ContractError);
  std::vector<Mask> masks{Mask(16, 1)};
  REQUIRE_THROWS_AS(build_graph(masks, 4, 4, Tensor::zeros({2, 2})), DimensionError);
  REQUIRE_THROWS_AS(build_graph(masks, 5, 4, Tensor::zeros({1, 2})), DimensionError);
}

TEST_CASE("neighbor and non-neighbor sets partition the other nodes", "[graph]") {
  AdjacencyGraph g(4);
  g.set_edge(0, 2);
  g.set_edge(1, 3);
  g.validate();
  REQUIRE(g.neighbors(0) == std::vector<std::size_t>{2});
  REQUIRE(g.non_neighbors(0) == std::vector<std::size_t>{1, 3});
  REQUIRE(g.neighbors(2) == std::vector<std::size_t>{0});
  REQUIRE_THROWS_AS(g.set_edge(1, 1), ContractError);
}
