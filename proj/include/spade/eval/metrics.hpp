#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <map>
#include <string>
#include <vector>

#include "spade/data/dataset_io.hpp"
#include "spade/data/scene.hpp"

namespace spade {

// ---------------------------------------------------------------------------
// One predicted triplet: masks for both endpoints, three labels, a ranking
// score. Predictions for a corpus are grouped per scene, ordered by rank.
// ---------------------------------------------------------------------------
struct TripletPrediction {
  Mask subject_mask, object_mask;
  int subject_label = 0, object_label = 0, predicate_label = 0;
  double score = 0.0;

  void validate(std::size_t numel) const {
    if (subject_mask.size() != numel || object_mask.size() != numel)
      throw ContractError("prediction masks must cover the scene grid");
    if (!std::isfinite(score)) throw NumericError("prediction score must be finite");
  }
};

using ScenePredictions = std::vector<TripletPrediction>;

namespace detail {

inline double overlap_ratio(const Mask& a, const Mask& b) {
  std::size_t inter = 0, uni = 0;
  const std::size_t n = std::min(a.size(), b.size());
  for (std::size_t p = 0; p < n; ++p) {
    const bool x = a[p] != 0, y = b[p] != 0;
    inter += (x && y) ? 1 : 0;
    uni += (x || y) ? 1 : 0;
  }
  return uni == 0 ? 0.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

}  // namespace detail

// A prediction hits a ground-truth relation iff both masks localize their
// endpoints at IoU >= 0.5 (inclusive) and all three labels agree.
inline bool match_triplet(const TripletPrediction& pred, const Relation& gt,
                          const std::vector<ObjectRecord>& objects) {
  if (pred.subject_label != objects[gt.subject].category_id) return false;
  if (pred.object_label != objects[gt.object].category_id) return false;
  if (pred.predicate_label != gt.predicate) return false;
  if (detail::overlap_ratio(pred.subject_mask, objects[gt.subject].mask) < 0.5) return false;
  if (detail::overlap_ratio(pred.object_mask, objects[gt.object].mask) < 0.5) return false;
  return true;
}

struct RecallResult {
  double recall = 0.0;
  double mean_recall = 0.0;
  std::map<int, double> per_predicate;  // predicate id -> recall (only ids with GT)
  std::size_t gt_total = 0;
  std::size_t matched = 0;
};

namespace detail {

// Indices of the top-K predictions of one scene: descending score, insertion
// order breaking ties (stable).
inline std::vector<std::size_t> top_k_order(const ScenePredictions& preds, std::size_t K) {
  std::vector<std::size_t> order(preds.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return preds[a].score > preds[b].score; });
  if (order.size() > K) order.resize(K);
  return order;
}

}  // namespace detail

// Micro-averaged recall over a corpus: every kept GT relation counts once;
// each is creditable by at most one top-K prediction, greedily in rank order.
// keep(scene_index, relation_index) restricts the GT set under evaluation.
template <class KeepFn>
RecallResult recall_at_k_if(const std::vector<ScenePredictions>& preds,
                            const std::vector<Scene>& scenes, std::size_t K, KeepFn keep) {
  if (K == 0) throw ContractError("recall_at_k: K must be positive");
  if (preds.size() != scenes.size())
    throw ContractError("recall_at_k: prediction groups (" + std::to_string(preds.size()) +
                        ") vs scenes (" + std::to_string(scenes.size()) + ")");
  RecallResult res;
  std::map<int, std::size_t> gt_per_pred, hit_per_pred;
  for (std::size_t s = 0; s < scenes.size(); ++s) {
    const Scene& scene = scenes[s];
    std::vector<std::size_t> kept;
    for (std::size_t r = 0; r < scene.relations.size(); ++r)
      if (keep(s, r)) kept.push_back(r);
    res.gt_total += kept.size();
    for (std::size_t r : kept) ++gt_per_pred[scene.relations[r].predicate];
    if (kept.empty()) continue;

    std::vector<bool> credited(kept.size(), false);
    for (std::size_t pi : detail::top_k_order(preds[s], K)) {
      const TripletPrediction& p = preds[s][pi];
      for (std::size_t ki = 0; ki < kept.size(); ++ki) {
        if (credited[ki]) continue;
        const Relation& gt = scene.relations[kept[ki]];
        if (match_triplet(p, gt, scene.objects)) {
          credited[ki] = true;
          ++res.matched;
          ++hit_per_pred[gt.predicate];
          break;  // one credit per prediction
        }
      }
    }
  }
  res.recall = res.gt_total == 0 ? 0.0
                                 : static_cast<double>(res.matched) /
                                       static_cast<double>(res.gt_total);
  double sum = 0.0;
  for (const auto& [pid, n] : gt_per_pred) {
    const double r = static_cast<double>(hit_per_pred[pid]) / static_cast<double>(n);
    res.per_predicate[pid] = r;
    sum += r;
  }
  res.mean_recall = gt_per_pred.empty() ? 0.0 : sum / static_cast<double>(gt_per_pred.size());
  return res;
}

inline RecallResult recall_at_k(const std::vector<ScenePredictions>& preds,
                                const std::vector<Scene>& scenes, std::size_t K) {
  return recall_at_k_if(preds, scenes, K, [](std::size_t, std::size_t) { return true; });
}

// ---------------------------------------------------------------------------
// Report: the same recall battery over several GT views. A view with zero GT
// instances is reported as a sentinel, never as a 0/0 division.
// ---------------------------------------------------------------------------
struct MetricsEntry {
  bool has_instances = false;
  std::size_t gt_count = 0;
  double recall50 = 0.0, mean_recall50 = 0.0;
  double recall100 = 0.0, mean_recall100 = 0.0;
};

struct MetricsReport {
  MetricsEntry full, ovr, ovdr, dr, ndr;
  std::size_t n_scenes = 0, n_predictions = 0;
  std::string filter_mode = "closed";
};

struct ReportOptions {
  std::size_t k_low = 50, k_high = 100;
  // Bands normally restrict ground truth only; this also drops predictions
  // whose own mask centers fall outside the band under evaluation.
  bool band_restricts_predictions = false;
};

namespace detail {

template <class KeepFn>
MetricsEntry entry_for(const std::vector<ScenePredictions>& preds,
                       const std::vector<Scene>& scenes, const ReportOptions& opt, KeepFn keep) {
  MetricsEntry e;
  RecallResult lo = recall_at_k_if(preds, scenes, opt.k_low, keep);
  e.gt_count = lo.gt_total;
  if (lo.gt_total == 0) return e;  // sentinel: no instances in this view
  RecallResult hi = recall_at_k_if(preds, scenes, opt.k_high, keep);
  e.has_instances = true;
  e.recall50 = lo.recall;
  e.mean_recall50 = lo.mean_recall;
  e.recall100 = hi.recall;
  e.mean_recall100 = hi.mean_recall;
  return e;
}

inline Band prediction_band(const TripletPrediction& p, std::size_t H, std::size_t W) {
  const BBox bs = mask_bbox(p.subject_mask, H, W);
  const BBox bo = mask_bbox(p.object_mask, H, W);
  if (!bs.valid() || !bo.valid()) return Band::NDR;  // empty masks treated as local
  const double dx = 0.5 * (bs.x0 + bs.x1) - 0.5 * (bo.x0 + bo.x1);
  const double dy = 0.5 * (bs.y0 + bs.y1) - 0.5 * (bo.y0 + bo.y1);
  return std::sqrt(dx * dx + dy * dy) > static_cast<double>(W) / 3.0 ? Band::DR : Band::NDR;
}

inline std::vector<ScenePredictions> band_filtered(const std::vector<ScenePredictions>& preds,
                                                   const std::vector<Scene>& scenes, Band band) {
  std::vector<ScenePredictions> out(preds.size());
  for (std::size_t s = 0; s < preds.size(); ++s)
    for (const auto& p : preds[s])
      if (prediction_band(p, scenes[s].height(), scenes[s].width()) == band)
        out[s].push_back(p);
  return out;
}

}  // namespace detail

inline MetricsReport split_report(const std::vector<ScenePredictions>& preds,
                                  const std::vector<Scene>& scenes, const DatasetMeta& meta,
                                  const ReportOptions& opt = {}) {
  MetricsReport rep;
  rep.n_scenes = scenes.size();
  for (const auto& sp : preds) rep.n_predictions += sp.size();
  rep.filter_mode = meta.filter_mode;

  // band tags, precomputed per scene
  std::vector<std::vector<Band>> bands;
  bands.reserve(scenes.size());
  for (const auto& s : scenes) bands.push_back(tag_distance_band(s));

  rep.full = detail::entry_for(preds, scenes, opt,
                               [](std::size_t, std::size_t) { return true; });

  const VocabSplit& split = meta.split;
  rep.ovr = detail::entry_for(preds, scenes, opt, [&](std::size_t s, std::size_t r) {
    return split.predicate_is_novel(scenes[s].relations[r].predicate);
  });
  rep.ovdr = detail::entry_for(preds, scenes, opt, [&](std::size_t s, std::size_t r) {
    const Relation& rel = scenes[s].relations[r];
    return split.predicate_is_novel(rel.predicate) ||
           split.object_is_novel(scenes[s].objects[rel.subject].category_id) ||
           split.object_is_novel(scenes[s].objects[rel.object].category_id);
  });

  const auto band_entry = [&](Band b) {
    const auto keep = [&](std::size_t s, std::size_t r) { return bands[s][r] == b; };
    if (!opt.band_restricts_predictions) return detail::entry_for(preds, scenes, opt, keep);
    const auto filtered = detail::band_filtered(preds, scenes, b);
    return detail::entry_for(filtered, scenes, opt, keep);
  };
  rep.dr = band_entry(Band::DR);
  rep.ndr = band_entry(Band::NDR);
  return rep;
}

// ---------------------------------------------------------------------------
// Rendering
// ---------------------------------------------------------------------------
namespace detail {

inline json entry_json(const MetricsEntry& e) {
  json j;
  j["gt_count"] = e.gt_count;
  if (!e.has_instances) {
    j["note"] = "no instances";
    return j;
  }
  j["R@50"] = e.recall50;
  j["mR@50"] = e.mean_recall50;
  j["R@100"] = e.recall100;
  j["mR@100"] = e.mean_recall100;
  return j;
}

inline std::string fmt_pct(double v) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%6.2f", 100.0 * v);
  return buf;
}

inline std::string entry_row(const std::string& label, const MetricsEntry& e) {
  std::string row = label;
  row.resize(10, ' ');
  if (!e.has_instances) {
    row += "      -      -      -      -  (no instances)";
  } else {
    row += fmt_pct(e.recall50) + " " + fmt_pct(e.mean_recall50) + " " + fmt_pct(e.recall100) +
           " " + fmt_pct(e.mean_recall100);
  }
  row += "   n=" + std::to_string(e.gt_count);
  return row;
}

}  // namespace detail

inline json report_to_json(const MetricsReport& r) {
  json j;
  j["n_scenes"] = r.n_scenes;
  j["n_predictions"] = r.n_predictions;
  j["filter_mode"] = r.filter_mode;
  j["full"] = detail::entry_json(r.full);
  j["OvR"] = detail::entry_json(r.ovr);
  j["OvD+R"] = detail::entry_json(r.ovdr);
  j["DR"] = detail::entry_json(r.dr);
  j["NDR"] = detail::entry_json(r.ndr);
  return j;
}

inline std::string report_table(const MetricsReport& r) {
  std::string out;
  out += "view        R@50  mR@50  R@100 mR@100\n";
  out += detail::entry_row("full", r.full) + "\n";
  out += detail::entry_row("OvR", r.ovr) + "\n";
  out += detail::entry_row("OvD+R", r.ovdr) + "\n";
  out += detail::entry_row("DR", r.dr) + "\n";
  out += detail::entry_row("NDR", r.ndr) + "\n";
  out += "scenes " + std::to_string(r.n_scenes) + ", predictions " +
         std::to_string(r.n_predictions) + ", train filter " + r.filter_mode + "\n";
  return out;
}

}  // namespace spade
