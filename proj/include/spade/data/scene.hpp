#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "spade/core/errors.hpp"
#include "spade/core/rng.hpp"
#include "spade/core/tensor.hpp"

namespace spade {

// Row-major boolean grid, H*W entries.
using Mask = std::vector<std::uint8_t>;

struct BBox {
  long x0 = 0, y0 = 0, x1 = -1, y1 = -1;  // inclusive pixel bounds
  bool valid() const { return x1 >= x0 && y1 >= y0; }
};

inline BBox mask_bbox(const Mask& m, std::size_t H, std::size_t W) {
  BBox b{static_cast<long>(W), static_cast<long>(H), -1, -1};
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t x = 0; x < W; ++x)
      if (m[y * W + x]) {
        b.x0 = std::min(b.x0, static_cast<long>(x));
        b.y0 = std::min(b.y0, static_cast<long>(y));
        b.x1 = std::max(b.x1, static_cast<long>(x));
        b.y1 = std::max(b.y1, static_cast<long>(y));
      }
  return b;
}

inline std::size_t mask_area(const Mask& m) {
  std::size_t n = 0;
  for (auto v : m) n += (v != 0);
  return n;
}

inline bool masks_intersect(const Mask& a, const Mask& b) {
  for (std::size_t i = 0; i < a.size(); ++i)
    if (a[i] && b[i]) return true;
  return false;
}

inline double mask_iou(const Mask& a, const Mask& b) {
  std::size_t inter = 0, uni = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const bool pa = a[i] != 0, pb = b[i] != 0;
    inter += (pa && pb);
    uni += (pa || pb);
  }
  return uni == 0 ? 0.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

// 4-neighbourhood dilation by one pixel.
inline Mask dilate1(const Mask& m, std::size_t H, std::size_t W) {
  Mask out(m.size(), 0);
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t x = 0; x < W; ++x) {
      if (!m[y * W + x]) continue;
      out[y * W + x] = 1;
      if (y > 0) out[(y - 1) * W + x] = 1;
      if (y + 1 < H) out[(y + 1) * W + x] = 1;
      if (x > 0) out[y * W + x - 1] = 1;
      if (x + 1 < W) out[y * W + x + 1] = 1;
    }
  return out;
}

// Run-length encoding over the row-major flattening; counts alternate between
// zeros and ones and always start with the zero run (possibly 0).
inline std::vector<std::uint32_t> mask_to_rle(const Mask& m) {
  std::vector<std::uint32_t> counts;
  std::uint8_t cur = 0;
  std::uint32_t run = 0;
  for (auto v : m) {
    const std::uint8_t bit = v ? 1 : 0;
    if (bit == cur) {
      ++run;
    } else {
      counts.push_back(run);
      cur = bit;
      run = 1;
    }
  }
  counts.push_back(run);
  return counts;
}

inline Mask rle_to_mask(const std::vector<std::uint32_t>& counts, std::size_t numel) {
  Mask m;
  m.reserve(numel);
  std::uint8_t cur = 0;
  for (auto c : counts) {
    m.insert(m.end(), c, cur);
    cur ^= 1;
  }
  if (m.size() != numel)
    throw ParseError("run-length counts sum to " + std::to_string(m.size()) + ", expected " +
                     std::to_string(numel));
  return m;
}

struct ObjectRecord {
  Mask mask;
  int category_id = 0;
  BBox bbox;               // tight box of mask
  double cx = 0, cy = 0;   // bbox center, pixels

  static ObjectRecord make(Mask m, int category, std::size_t H, std::size_t W) {
    ObjectRecord r;
    r.mask = std::move(m);
    r.category_id = category;
    r.bbox = mask_bbox(r.mask, H, W);
    if (!r.bbox.valid()) throw ContractError("object mask is empty");
    r.cx = 0.5 * (r.bbox.x0 + r.bbox.x1);
    r.cy = 0.5 * (r.bbox.y0 + r.bbox.y1);
    return r;
  }
};

struct Relation {
  std::size_t subject = 0;
  int predicate = 0;
  std::size_t object = 0;
  bool operator==(const Relation& o) const {
    return subject == o.subject && predicate == o.predicate && object == o.object;
  }
};

struct Scene {
  Tensor grid;  // [C,H,W]
  std::vector<ObjectRecord> objects;
  std::vector<Relation> relations;

  std::size_t channels() const { return grid.dim(0); }
  std::size_t height() const { return grid.dim(1); }
  std::size_t width() const { return grid.dim(2); }

  void validate() const {
    for (const auto& r : relations) {
      if (r.subject >= objects.size() || r.object >= objects.size())
        throw ContractError("relation references a missing object");
      if (r.subject == r.object) throw ContractError("relation with identical endpoints");
    }
    for (const auto& o : objects)
      if (mask_area(o.mask) == 0) throw ContractError("empty object mask");
  }
};

// ---------------------------------------------------------------------------
// Spatial predicate vocabulary. The rules below are the frozen definition of
// ground truth for this benchmark; anything downstream (training, eval) must
// treat them as given.
//
//   left-of(s,o):     cx_s < cx_o - W/8  and the bbox y-intervals overlap
//   right-of(s,o):    cx_s > cx_o + W/8  and the bbox y-intervals overlap
//   above(s,o):       cy_s < cy_o - H/8  and the bbox x-intervals overlap
//   below(s,o):       cy_s > cy_o + H/8  and the bbox x-intervals overlap
//   overlapping(s,o): the pixel masks intersect
//   near(s,o):        center distance < W/4 and the masks do not intersect
// ---------------------------------------------------------------------------
enum Predicate : int {
  kLeftOf = 0,
  kRightOf = 1,
  kAbove = 2,
  kBelow = 3,
  kOverlapping = 4,
  kNear = 5,
};

constexpr int kNumPredicates = 6;

inline const std::array<std::string, kNumPredicates>& predicate_names() {
  static const std::array<std::string, kNumPredicates> names{
      "left-of", "right-of", "above", "below", "overlapping", "near"};
  return names;
}

inline double center_distance(const ObjectRecord& a, const ObjectRecord& b) {
  const double dx = a.cx - b.cx, dy = a.cy - b.cy;
  return std::sqrt(dx * dx + dy * dy);
}

inline bool y_intervals_overlap(const BBox& a, const BBox& b) {
  return a.y0 <= b.y1 && b.y0 <= a.y1;
}
inline bool x_intervals_overlap(const BBox& a, const BBox& b) {
  return a.x0 <= b.x1 && b.x0 <= a.x1;
}

inline bool predicate_holds(int pred, const ObjectRecord& s, const ObjectRecord& o,
                            std::size_t H, std::size_t W) {
  const double wmargin = static_cast<double>(W) / 8.0;
  const double hmargin = static_cast<double>(H) / 8.0;
  switch (pred) {
    case kLeftOf:
      return s.cx < o.cx - wmargin && y_intervals_overlap(s.bbox, o.bbox);
    case kRightOf:
      return s.cx > o.cx + wmargin && y_intervals_overlap(s.bbox, o.bbox);
    case kAbove:
      return s.cy < o.cy - hmargin && x_intervals_overlap(s.bbox, o.bbox);
    case kBelow:
      return s.cy > o.cy + hmargin && x_intervals_overlap(s.bbox, o.bbox);
    case kOverlapping:
      return masks_intersect(s.mask, o.mask);
    case kNear:
      return center_distance(s, o) < static_cast<double>(W) / 4.0 &&
             !masks_intersect(s.mask, o.mask);
    default:
      throw VocabError("unknown predicate id " + std::to_string(pred));
  }
}

// Every ordered pair, every predicate that holds.
inline std::vector<Relation> all_true_relations(const std::vector<ObjectRecord>& objects,
                                                std::size_t H, std::size_t W) {
  std::vector<Relation> out;
  for (std::size_t s = 0; s < objects.size(); ++s)
    for (std::size_t o = 0; o < objects.size(); ++o) {
      if (s == o) continue;
      for (int p = 0; p < kNumPredicates; ++p)
        if (predicate_holds(p, objects[s], objects[o], H, W))
          out.push_back({s, p, o});
    }
  return out;
}

// ---------------------------------------------------------------------------
// Distance bands: a relation is DR when its endpoints' bbox centers are more
// than a third of the image width apart, NDR otherwise.
// ---------------------------------------------------------------------------
enum class Band : int { DR = 0, NDR = 1 };

inline Band relation_band(const ObjectRecord& s, const ObjectRecord& o, std::size_t W) {
  return center_distance(s, o) > static_cast<double>(W) / 3.0 ? Band::DR : Band::NDR;
}

inline std::vector<Band> tag_distance_band(const Scene& scene) {
  std::vector<Band> bands;
  bands.reserve(scene.relations.size());
  for (const auto& r : scene.relations)
    bands.push_back(
        relation_band(scene.objects[r.subject], scene.objects[r.object], scene.width()));
  return bands;
}

// ---------------------------------------------------------------------------
// Category channel signatures: one frozen unit vector in R^C per category.
// Recognition reads these back out of the grid, so they are part of the
// dataset definition and derive only from (n, C, seed).
// ---------------------------------------------------------------------------
inline Tensor category_signatures(std::size_t n_categories, std::size_t C, std::uint64_t seed) {
  Tensor sig = Tensor::zeros({n_categories, C});
  auto& v = sig.mutable_data();
  for (std::size_t c = 0; c < n_categories; ++c) {
    Rng r(child_seed(seed, 0x5160ULL + c));
    double norm2 = 0.0;
    for (std::size_t k = 0; k < C; ++k) {
      const double x = r.normal();
      v[c * C + k] = x;
      norm2 += x * x;
    }
    const double inv = 1.0 / std::sqrt(norm2);
    for (std::size_t k = 0; k < C; ++k) v[c * C + k] *= inv;
  }
  return sig;
}

}  // namespace spade
