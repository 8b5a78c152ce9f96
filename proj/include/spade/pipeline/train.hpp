#pragma once

#include <cmath>
#include <cstdio>
#include <map>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "spade/data/dataset_io.hpp"
#include "spade/eval/metrics.hpp"
#include "spade/graph/adjacency.hpp"
#include "spade/model/optim.hpp"
#include "spade/pipeline/bundle.hpp"

namespace spade {

// ---------------------------------------------------------------------------
// One scene through the full stack. The same path serves training (with
// gradients through the second-stage modules) and inference (under a
// NoGradGuard at the call site).
// ---------------------------------------------------------------------------
struct SceneForward {
  InstanceDecode inst;            // query features and full-resolution mask logits
  std::vector<Mask> masks;        // binarized mask rows
  Tensor obj_probs;               // [n_queries, |view objects|], fused
  AdjacencyGraph graph;
  Tensor Qhat;                    // [n_queries, d] refined queries
  PairSelection sel;
  Tensor rel_probs;               // [M, |view predicates| + 1]; default tensor when M = 0
};

inline FusionConfig fusion_config(const RunConfig& cfg) {
  FusionConfig f;
  f.alpha = cfg.alpha;
  if (cfg.fusion == "query-only")
    f.mode = FusionMode::kQueryOnly;
  else if (cfg.fusion == "pooled-only")
    f.mode = FusionMode::kPooledOnly;
  else
    f.mode = FusionMode::kBoth;
  return f;
}

namespace detail {

// Pooled classification falls back to whole-grid pooling when a predicted
// mask is still empty, so early training steps stay well-defined.
inline Tensor pooled_rows(const Tensor& px, const std::vector<Mask>& masks) {
  const Mask full(px.dim(0), 1);
  std::vector<Tensor> rows;
  rows.reserve(masks.size());
  for (const auto& m : masks) rows.push_back(mask_pool(px, mask_area(m) == 0 ? full : m));
  return concat(rows, 0);
}

inline Mask union_mask(const Mask& a, const Mask& b) {
  Mask u = a;
  for (std::size_t i = 0; i < u.size(); ++i) u[i] = u[i] || b[i];
  return u;
}

}  // namespace detail

// The denoiser features and per-pixel captioner trunk are recomputed per
// visit; under the default freeze they carry no graph, so the cost is one
// plain forward. `bank` chooses the vocabulary (training view or the full
// bank at evaluation time).
inline SceneForward scene_forward(ModelBundle& b, const Scene& scene, const PromptBank& bank) {
  const RunConfig& cfg = b.cfg();
  const std::size_t H = scene.height(), W = scene.width();
  const FusionConfig fusion = fusion_config(cfg);

  Tensor F, trunk;
  if (cfg.freeze_backbone) {
    NoGradGuard ng;
    Tensor cond = b.captioner().tokens(scene.grid);
    F = b.student().forward(scene.grid, 0, cond, false).pyramid;
    trunk = b.captioner().pixel_trunk(scene.grid);
  } else {
    Tensor cond = b.captioner().tokens(scene.grid);
    F = b.student().forward(scene.grid, 0, cond, false).pyramid;
    trunk = b.captioner().pixel_trunk(scene.grid);
  }
  Tensor px = b.captioner().pixel_head(trunk);  // [H*W, d]

  SceneForward out;
  out.inst = b.decoders().decode_instances(F);

  out.masks.reserve(cfg.n_queries);
  for (std::size_t q = 0; q < cfg.n_queries; ++q)
    out.masks.push_back(binarize_mask_row(out.inst.mask_logits, q));

  Tensor obj_query = prompt_classify(out.inst.H, bank.objects, bank.log_tau);
  Tensor obj_pooled = prompt_classify(detail::pooled_rows(px, out.masks), bank.objects,
                                      bank.log_tau);
  out.obj_probs = fuse_branches(obj_query, obj_pooled, fusion);

  out.graph = build_graph(out.masks, H, W, out.inst.H.detached(), cfg.sem_threshold);
  out.Qhat = rgt_forward(out.inst.H, out.graph, b.rgt());
  out.sel = select_pairs(out.Qhat.detached(), cfg.eta);

  if (!out.sel.pairs.empty()) {
    Tensor Q_rel = b.decoders().pair_queries(out.Qhat, out.sel.pairs);
    Tensor H_r = b.decoders().decode_relations(F, Q_rel);
    Tensor pred_bank = bank.predicate_matrix();
    Tensor rel_query = prompt_classify(H_r, pred_bank, bank.log_tau);
    const Mask full(H * W, 1);
    std::vector<Tensor> pooled;
    pooled.reserve(out.sel.pairs.size());
    for (const auto& [i, j] : out.sel.pairs) {
      Mask u = detail::union_mask(out.masks[i], out.masks[j]);
      pooled.push_back(mask_pool(px, mask_area(u) == 0 ? full : u));
    }
    Tensor rel_pooled = prompt_classify(concat(pooled, 0), pred_bank, bank.log_tau);
    out.rel_probs = fuse_branches(rel_query, rel_pooled, fusion);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Second-stage training
// ---------------------------------------------------------------------------
struct EpochStats {
  double total = 0.0, rel = 0.0, rqc = 0.0, mask = 0.0;
  std::size_t matched = 0, positive_pairs = 0;
};

struct TrainResult {
  std::vector<EpochStats> curve;  // one entry per epoch, means over scenes
};

namespace detail {

inline std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed) {
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  Rng rng(seed);
  for (std::size_t i = n; i > 1; --i) {
    const auto j = static_cast<std::size_t>(rng.uniform_int(0, static_cast<long>(i) - 1));
    std::swap(order[i - 1], order[j]);
  }
  return order;
}

inline std::map<std::string, std::uint64_t> group_checksums(
    const std::vector<std::pair<std::string, Tensor>>& named) {
  std::map<std::string, std::uint64_t> out;
  for (const auto& [name, t] : named) out.emplace(name, tensor_checksum(t));
  return out;
}

}  // namespace detail

// Gradient descent with momentum over the second-stage modules; the frozen
// groups are checksummed every epoch and any drift is an error. The learning
// rate drops by 10x at three quarters of the run.
inline TrainResult train_stage2(ModelBundle& b, const std::vector<Scene>& scenes,
                                bool log_progress = true) {
  const RunConfig& cfg = b.cfg();
  if (scenes.empty()) throw ContractError("train_stage2: no scenes");
  b.set_stage2_trainable(true);

  const auto frozen = b.stage2_frozen();
  const auto frozen_before = detail::group_checksums(frozen);

  std::vector<Tensor> params;
  for (auto& [n, t] : b.stage2_trainable()) params.push_back(t);
  SgdOptimizer opt(params, cfg.lr, cfg.momentum);

  const LossWeights weights{cfg.use_rqc ? cfg.lambda_rqc : 0.0, cfg.lambda_mask};
  const std::size_t decay_epoch = (cfg.epochs * 3) / 4;

  TrainResult result;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    if (decay_epoch > 0 && epoch == decay_epoch) opt.set_lr(cfg.lr * 0.1);
    const auto order = detail::epoch_order(scenes.size(), child_seed(cfg.data_seed, 0xE90C + epoch));

    EpochStats stats;
    for (std::size_t k = 0; k < order.size(); ++k) {
      const Scene& scene = scenes[order[k]];
      opt.zero_grad();
      SceneForward fwd = scene_forward(b, scene, b.bank());
      MatchResult m = match_instances(fwd.obj_probs, fwd.inst.mask_logits, scene, b.view());
      LossBundle loss = total_loss(fwd.obj_probs, fwd.inst.mask_logits, fwd.Qhat, fwd.sel.pairs,
                                   fwd.rel_probs, m, scene, b.view(), weights);
      const double value = loss.total.item();
      if (!std::isfinite(value)) {
        std::ostringstream os;
        os << "train_stage2: non-finite loss at epoch " << epoch << ", scene " << order[k];
        throw NumericError(os.str());
      }
      backward(loss.total);
      opt.step();
      stats.total += value;
      stats.rel += loss.rel;
      stats.rqc += loss.rqc;
      stats.mask += loss.mask;
      stats.matched += loss.matched;
      stats.positive_pairs += loss.positive_pairs;
    }
    const double inv = 1.0 / static_cast<double>(scenes.size());
    stats.total *= inv;
    stats.rel *= inv;
    stats.rqc *= inv;
    stats.mask *= inv;
    result.curve.push_back(stats);

    const auto now = detail::group_checksums(frozen);
    for (const auto& [name, sum] : frozen_before)
      if (now.at(name) != sum)
        throw ContractError("frozen parameter '" + name + "' changed during epoch " +
                            std::to_string(epoch));
    if (log_progress)
      std::fprintf(stderr, "[train] epoch %zu loss %.4f (rel %.4f rqc %.4f mask %.4f)\n", epoch,
                   stats.total, stats.rel, stats.rqc, stats.mask);
  }
  b.set_stage2_trainable(false);
  return result;
}

// ---------------------------------------------------------------------------
// Prediction generation: every selected pair is scored against every real
// predicate; the exported score is the product of the fused subject, object,
// and predicate confidences. Ranking happens at metric time.
// ---------------------------------------------------------------------------
inline ScenePredictions predict_scene(ModelBundle& b, const Scene& scene, const PromptBank& bank,
                                      const ClassView& view) {
  NoGradGuard ng;
  SceneForward fwd = scene_forward(b, scene, bank);
  ScenePredictions preds;
  if (fwd.sel.pairs.empty()) return preds;

  const auto& op = fwd.obj_probs.data();
  const std::size_t n_obj = view.object_ids.size();
  std::vector<std::size_t> best_col(b.cfg().n_queries);
  std::vector<double> best_p(b.cfg().n_queries);
  for (std::size_t q = 0; q < b.cfg().n_queries; ++q) {
    std::size_t arg = 0;
    for (std::size_t c = 1; c < n_obj; ++c)
      if (op[q * n_obj + c] > op[q * n_obj + arg]) arg = c;
    best_col[q] = arg;
    best_p[q] = op[q * n_obj + arg];
  }

  const auto& rp = fwd.rel_probs.data();
  const std::size_t n_cols = view.predicate_ids.size() + 1;
  for (std::size_t k = 0; k < fwd.sel.pairs.size(); ++k) {
    const auto [i, j] = fwd.sel.pairs[k];
    for (std::size_t c = 0; c < view.predicate_ids.size(); ++c) {
      TripletPrediction p;
      p.subject_mask = fwd.masks[i];
      p.object_mask = fwd.masks[j];
      p.subject_label = view.object_ids[best_col[i]];
      p.object_label = view.object_ids[best_col[j]];
      p.predicate_label = view.predicate_ids[c];
      p.score = best_p[i] * best_p[j] * rp[k * n_cols + c];
      preds.push_back(std::move(p));
    }
  }
  return preds;
}

inline std::vector<ScenePredictions> predict_dataset(ModelBundle& b,
                                                     const std::vector<Scene>& scenes) {
  const PromptBank bank = b.full_bank();
  const ClassView view = ClassView::full(b.cfg().n_obj_categories);
  std::vector<ScenePredictions> out;
  out.reserve(scenes.size());
  for (const auto& s : scenes) out.push_back(predict_scene(b, s, bank, view));
  return out;
}

}  // namespace spade
