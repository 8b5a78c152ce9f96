#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "spade/data/scene.hpp"

namespace spade {

enum class Placement : int {
  Auto = 0,  // unconstrained random placement
  Far = 1,   // objects strung out along one axis, wide separation
  Near = 2,  // objects clustered around a shared center
};

struct SceneConfig {
  std::size_t channels = 3;
  std::size_t height = 32;
  std::size_t width = 32;
  std::size_t n_objects_min = 2;
  std::size_t n_objects_max = 4;
  std::size_t n_obj_categories = 10;
  double noise_sigma = 0.05;
  double iou_cap = 0.3;          // placement rejects heavier pairwise overlap
  std::size_t max_retries = 200;
  Placement placement = Placement::Auto;
  std::uint64_t signature_seed = 0x51474e41ULL;

  void validate() const {
    if (height < 8 || width < 8) throw ContractError("grid too small for object placement");
    if (n_objects_min < 1 || n_objects_max < n_objects_min)
      throw ContractError("invalid object count range");
    if (n_objects_max > (height / 4) * (width / 4))
      throw ContractError("grid too small for requested object count");
    if (n_obj_categories < 1) throw ContractError("need at least one object category");
  }
};

namespace detail {

enum class ShapeKind { Rect, Ellipse };

inline Mask paint_shape(ShapeKind kind, long cx, long cy, long rx, long ry, std::size_t H,
                        std::size_t W) {
  Mask m(H * W, 0);
  for (long y = cy - ry; y <= cy + ry; ++y) {
    if (y < 0 || y >= static_cast<long>(H)) continue;
    for (long x = cx - rx; x <= cx + rx; ++x) {
      if (x < 0 || x >= static_cast<long>(W)) continue;
      bool in = true;
      if (kind == ShapeKind::Ellipse) {
        const double u = static_cast<double>(x - cx) / (rx + 0.5);
        const double v = static_cast<double>(y - cy) / (ry + 0.5);
        in = (u * u + v * v) <= 1.0;
      }
      if (in) m[static_cast<std::size_t>(y) * W + static_cast<std::size_t>(x)] = 1;
    }
  }
  return m;
}

struct Proposal {
  long cx, cy, rx, ry;
  ShapeKind kind;
};

inline Proposal propose(Rng& rng, const SceneConfig& cfg, std::size_t index,
                        Placement placement, long axis, long cluster_x, long cluster_y) {
  const long W = static_cast<long>(cfg.width), H = static_cast<long>(cfg.height);
  Proposal p;
  p.kind = rng.uniform() < 0.5 ? ShapeKind::Rect : ShapeKind::Ellipse;
  p.rx = rng.uniform_int(2, std::max<long>(2, W / 8));
  p.ry = rng.uniform_int(2, std::max<long>(2, H / 8));
  switch (placement) {
    case Placement::Auto:
      p.cx = rng.uniform_int(p.rx, W - 1 - p.rx);
      p.cy = rng.uniform_int(p.ry, H - 1 - p.ry);
      break;
    case Placement::Far: {
      // string objects along one axis with > W/3 spacing, aligned on the
      // other axis so interval-overlap predicates can fire; a fourth object
      // wraps to a second, offset row
      const long stride = W / 3 + 2;
      const long slot = static_cast<long>(index) % 3;
      const long group = static_cast<long>(index) / 3;
      const long along = slot * stride + rng.uniform_int(2, 4);
      const long cross = cluster_y + group * (static_cast<long>(H) / 3 + 1);
      if (axis == 0) {
        p.cx = std::min(along, W - 1 - p.rx);
        p.cy = std::min(std::max(cross + rng.uniform_int(-1, 1), p.ry), H - 1 - p.ry);
      } else {
        p.cy = std::min(along, H - 1 - p.ry);
        p.cx = std::min(std::max(cross + rng.uniform_int(-1, 1), p.rx), W - 1 - p.rx);
      }
      p.cx = std::max(p.cx, p.rx);
      p.cy = std::max(p.cy, p.ry);
      break;
    }
    case Placement::Near: {
      const long radius = W / 8;
      p.rx = rng.uniform_int(2, 3);
      p.ry = rng.uniform_int(2, 3);
      p.cx = std::min(std::max(cluster_x + rng.uniform_int(-radius, radius), p.rx), W - 1 - p.rx);
      p.cy = std::min(std::max(cluster_y + rng.uniform_int(-radius, radius), p.ry), H - 1 - p.ry);
      break;
    }
  }
  return p;
}

}  // namespace detail

// Deterministic single-scene synthesis. Derives everything from rng_seed and
// the config; the emitted relations are exactly the predicates the frozen
// geometric rules imply for the placed masks.
inline Scene generate_scene(std::uint64_t rng_seed, const SceneConfig& cfg) {
  cfg.validate();
  const std::size_t H = cfg.height, W = cfg.width, C = cfg.channels;
  Rng rng(rng_seed);
  const std::size_t n_objects = static_cast<std::size_t>(
      rng.uniform_int(static_cast<long>(cfg.n_objects_min),
                      static_cast<long>(cfg.n_objects_max)));
  const long axis = rng.uniform_int(0, 1);
  const long cluster_x = rng.uniform_int(static_cast<long>(W) / 4, 3 * static_cast<long>(W) / 4);
  const long cluster_y = rng.uniform_int(static_cast<long>(H) / 4, 3 * static_cast<long>(H) / 4);

  std::vector<ObjectRecord> objects;
  for (std::size_t i = 0; i < n_objects; ++i) {
    bool placed = false;
    for (std::size_t attempt = 0; attempt < cfg.max_retries && !placed; ++attempt) {
      auto prop = detail::propose(rng, cfg, i, cfg.placement, axis, cluster_x, cluster_y);
      Mask m = detail::paint_shape(prop.kind, prop.cx, prop.cy, prop.rx, prop.ry, H, W);
      if (mask_area(m) == 0) continue;
      bool ok = true;
      for (const auto& other : objects) {
        if (mask_iou(m, other.mask) > cfg.iou_cap) ok = false;
        if (m == other.mask) ok = false;  // non-identical shapes required
      }
      if (!ok) continue;
      const int cat = static_cast<int>(
          rng.uniform_int(0, static_cast<long>(cfg.n_obj_categories) - 1));
      objects.push_back(ObjectRecord::make(std::move(m), cat, H, W));
      placed = true;
    }
    if (!placed)
      throw GenerationError("could not place object " + std::to_string(i) + " after " +
                            std::to_string(cfg.max_retries) + " attempts");
  }

  Scene scene;
  scene.grid = Tensor::zeros({C, H, W});
  const Tensor sig = category_signatures(cfg.n_obj_categories, C, cfg.signature_seed);
  auto& g = scene.grid.mutable_data();
  // z-order paint: later objects overwrite shared pixels
  for (const auto& obj : objects)
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t x = 0; x < W; ++x)
        if (obj.mask[y * W + x])
          for (std::size_t c = 0; c < C; ++c)
            g[c * H * W + y * W + x] = sig.at(static_cast<std::size_t>(obj.category_id), c);
  if (cfg.noise_sigma > 0.0)
    for (auto& v : g) v += rng.normal(0.0, cfg.noise_sigma);

  scene.objects = std::move(objects);
  scene.relations = all_true_relations(scene.objects, H, W);
  scene.validate();
  return scene;
}

}  // namespace spade
