#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "spade/core/rng.hpp"
#include "spade/core/tensor.hpp"
#include "spade/data/scene.hpp"
#include "spade/graph/rgt.hpp"
#include "spade/model/hungarian.hpp"
#include "spade/model/text_embed.hpp"

namespace spade {

// ---------------------------------------------------------------------------
// Vocabulary view: which object categories and predicates the classifier can
// name. Training under an open-vocabulary split uses the base subset; eval
// always uses the full vocabulary.
// ---------------------------------------------------------------------------
struct ClassView {
  std::vector<int> object_ids;     // column -> category id
  std::vector<int> predicate_ids;  // column -> predicate id

  static ClassView full(std::size_t n_categories) {
    ClassView v;
    for (std::size_t c = 0; c < n_categories; ++c) v.object_ids.push_back(static_cast<int>(c));
    for (int p = 0; p < kNumPredicates; ++p) v.predicate_ids.push_back(p);
    return v;
  }

  std::size_t object_col(int id) const {
    for (std::size_t c = 0; c < object_ids.size(); ++c)
      if (object_ids[c] == id) return c;
    throw VocabError("category id " + std::to_string(id) + " is not in this vocabulary view");
  }
  bool has_predicate(int id) const {
    return std::find(predicate_ids.begin(), predicate_ids.end(), id) != predicate_ids.end();
  }
  std::size_t predicate_col(int id) const {
    for (std::size_t c = 0; c < predicate_ids.size(); ++c)
      if (predicate_ids[c] == id) return c;
    throw VocabError("predicate id " + std::to_string(id) + " is not in this vocabulary view");
  }
  // the no-relation class sits after the real predicates
  std::size_t no_relation_col() const { return predicate_ids.size(); }
};

// ---------------------------------------------------------------------------
// Prompt bank: frozen text embeddings for the classes a view can name, plus a
// learnable no-relation row and a learnable temperature (kept positive by
// parametrizing its log).
// ---------------------------------------------------------------------------
struct PromptBank {
  Tensor objects;      // [C_obj, d] frozen unit rows
  Tensor predicates;   // [C_pred, d] frozen unit rows
  Tensor no_relation;  // [1, d] learnable
  Tensor log_tau;      // [1] learnable; temperature = exp(log_tau)

  static PromptBank init(const TextEmbedder& emb, const ClassView& view, double tau_init,
                         std::uint64_t seed) {
    if (!(tau_init > 0.0)) throw ContractError("temperature must be positive");
    PromptBank b;
    std::vector<Tensor> orows, prows;
    for (int id : view.object_ids) orows.push_back(emb.object_embedding(id));
    for (int id : view.predicate_ids) prows.push_back(emb.predicate_embedding(id));
    if (orows.empty() || prows.empty())
      throw ContractError("prompt bank needs at least one object and one predicate class");
    b.objects = concat(orows, 0);
    b.predicates = concat(prows, 0);
    Rng rng(seed);
    b.no_relation = Tensor::randn({1, emb.dim()}, rng);
    double n2 = 0.0;
    for (double v : b.no_relation.data()) n2 += v * v;
    for (auto& v : b.no_relation.mutable_data()) v /= std::sqrt(n2);
    b.log_tau = Tensor::zeros({1});
    b.log_tau.mutable_data()[0] = std::log(tau_init);
    return b;
  }

  double tau() const { return std::exp(log_tau.data()[0]); }

  // [C_pred + 1, d]: real predicates then the no-relation row
  Tensor predicate_matrix() const { return concat({predicates, no_relation}, 0); }

  std::vector<std::pair<std::string, Tensor>> parameters() const {
    return {{"ov.no_relation", no_relation}, {"ov.log_tau", log_tau}};
  }
  void set_trainable(bool on) {
    for (auto& [name, t] : parameters()) {
      Tensor h = t;
      h.set_requires_grad(on);
    }
  }
};

namespace detail {

// [N, 1] rowwise Euclidean norms
inline Tensor row_norms(const Tensor& X) {
  return reshape(sqrt_op(sum_axis(mul(X, X), 1)), {X.dim(0), 1});
}

}  // namespace detail

// Row-softmax of temperature-scaled cosine similarities between embeddings
// and a class bank. Scale-invariant in the embedding rows; rows sum to one.
// embeds [R, d], bank [C, d], log_tau [1] -> [R, C]
inline Tensor prompt_classify(const Tensor& embeds, const Tensor& bank, const Tensor& log_tau) {
  if (embeds.ndim() != 2 || bank.ndim() != 2 || embeds.dim(1) != bank.dim(1))
    throw DimensionError("prompt_classify: embeddings " + shape_str(embeds.shape()) +
                         " vs bank " + shape_str(bank.shape()));
  if (log_tau.size() != 1) throw DimensionError("prompt_classify: log_tau must be a scalar");
  Tensor cos = div(matmul(embeds, transpose(bank)),
                   matmul(detail::row_norms(embeds), transpose(detail::row_norms(bank))));
  return softmax(mul(cos, exp_op(log_tau)), 1);
}

// ---------------------------------------------------------------------------
// Geometric-mean fusion of two categorical distributions, row-renormalized:
//   fused ∝ P^alpha * Q^(1-alpha)
// alpha = 1 and alpha = 0 return the respective input exactly. Inputs must be
// strictly positive (floor tiny probabilities before calling).
// ---------------------------------------------------------------------------
inline Tensor fuse_scores(const Tensor& P, const Tensor& Q, double alpha) {
  if (P.shape() != Q.shape() || P.ndim() != 2)
    throw DimensionError("fuse_scores: " + shape_str(P.shape()) + " vs " + shape_str(Q.shape()));
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw ContractError("fusion weight must be in [0, 1]");
  for (double v : P.data())
    if (!(v > 0.0)) throw ContractError("fuse_scores requires strictly positive entries");
  for (double v : Q.data())
    if (!(v > 0.0)) throw ContractError("fuse_scores requires strictly positive entries");
  if (alpha == 1.0) return P;
  if (alpha == 0.0) return Q;
  Tensor fused = mul(pow_const(P, alpha), pow_const(Q, 1.0 - alpha));
  Tensor denom = matmul(reshape(sum_axis(fused, 1), {fused.dim(0), 1}),
                        Tensor::ones({1, fused.dim(1)}));
  return div(fused, denom);
}

enum class FusionMode { kBoth, kQueryOnly, kPooledOnly };

struct FusionConfig {
  FusionMode mode = FusionMode::kBoth;
  double alpha = 0.34;      // weight of the query-embedding scores
  double floor_eps = 1e-8;  // probability floor applied before fusion
};

// query_probs: classification of decoder embeddings; pooled_probs: classification
// of mask-pooled grid features. Either branch alone when the other is disabled.
inline Tensor fuse_branches(const Tensor& query_probs, const Tensor& pooled_probs,
                            const FusionConfig& cfg) {
  switch (cfg.mode) {
    case FusionMode::kQueryOnly: return query_probs;
    case FusionMode::kPooledOnly: return pooled_probs;
    case FusionMode::kBoth: break;
  }
  return fuse_scores(clamp_min(query_probs, cfg.floor_eps),
                     clamp_min(pooled_probs, cfg.floor_eps), cfg.alpha);
}

// ---------------------------------------------------------------------------
// Mask pooling over a token grid: mean of the feature rows under a mask.
// features [H*W, d], mask of length H*W -> [1, d]
// ---------------------------------------------------------------------------
inline Tensor mask_pool(const Tensor& features, const Mask& mask) {
  if (features.ndim() != 2 || features.dim(0) != mask.size())
    throw DimensionError("mask_pool: features " + shape_str(features.shape()) + " vs mask of " +
                         std::to_string(mask.size()) + " pixels");
  const std::size_t area = mask_area(mask);
  if (area == 0) throw ContractError("mask_pool: empty mask");
  Tensor ind = Tensor::zeros({1, mask.size()});
  const double w = 1.0 / static_cast<double>(area);
  for (std::size_t p = 0; p < mask.size(); ++p)
    if (mask[p]) ind.mutable_data()[p] = w;
  return matmul(ind, features);
}

// Pooling over the union of a subject/object mask pair.
inline Tensor pair_mask_pool(const Tensor& features, const Mask& subject_mask,
                             const Mask& object_mask, std::size_t subject_id,
                             std::size_t object_id) {
  if (subject_mask.size() != object_mask.size())
    throw DimensionError("pair_mask_pool: mask sizes differ");
  Mask u(subject_mask.size(), 0);
  for (std::size_t p = 0; p < u.size(); ++p) u[p] = (subject_mask[p] || object_mask[p]) ? 1 : 0;
  if (mask_area(u) == 0)
    throw ContractError("pair_mask_pool: pair (" + std::to_string(subject_id) + ", " +
                        std::to_string(object_id) + ") has an empty union mask");
  return mask_pool(features, u);
}

// Threshold one row of mask logits at probability 0.5 (logit 0).
inline Mask binarize_mask_row(const Tensor& mask_logits, std::size_t r) {
  if (mask_logits.ndim() != 2 || r >= mask_logits.dim(0))
    throw DimensionError("binarize_mask_row: bad row");
  Mask m(mask_logits.dim(1), 0);
  for (std::size_t p = 0; p < m.size(); ++p)
    m[p] = mask_logits.at(r, p) > 0.0 ? 1 : 0;
  return m;
}

// Minimum-cost assignment on a dense [N, M] cost tensor.
inline Assignment hungarian_match(const Tensor& cost) {
  if (cost.ndim() != 2) throw DimensionError("hungarian_match expects a 2-D cost matrix");
  std::vector<std::vector<double>> c(cost.dim(0), std::vector<double>(cost.dim(1)));
  for (std::size_t i = 0; i < cost.dim(0); ++i)
    for (std::size_t j = 0; j < cost.dim(1); ++j) c[i][j] = cost.at(i, j);
  return hungarian(c);
}

namespace detail {

inline double value_bce(const Tensor& mask_logits, std::size_t r, const Mask& gt) {
  double s = 0.0;
  for (std::size_t p = 0; p < gt.size(); ++p) {
    const double z = mask_logits.at(r, p);
    s += std::log1p(std::exp(-std::abs(z))) + std::max(z, 0.0) - z * (gt[p] ? 1.0 : 0.0);
  }
  return s / static_cast<double>(gt.size());
}

inline double value_dice(const Tensor& mask_logits, std::size_t r, const Mask& gt) {
  double inter = 0.0, psum = 0.0, gsum = 0.0;
  for (std::size_t p = 0; p < gt.size(); ++p) {
    const double z = mask_logits.at(r, p);
    const double q = z >= 0.0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
    psum += q;
    if (gt[p]) {
      gsum += 1.0;
      inter += q;
    }
  }
  return 1.0 - (2.0 * inter + 1.0) / (psum + gsum + 1.0);
}

inline double mask_iou(const Mask& a, const Mask& b) {
  std::size_t inter = 0, uni = 0;
  for (std::size_t p = 0; p < a.size(); ++p) {
    const bool x = a[p] != 0, y = b[p] != 0;
    inter += (x && y) ? 1 : 0;
    uni += (x || y) ? 1 : 0;
  }
  return uni == 0 ? 0.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Bipartite matching of predicted instances to annotated objects. Cost per
// (prediction, object) = class negative log-likelihood + mask BCE + Dice,
// evaluated on values only. iou[p] holds the binarized-mask IoU against the
// matched object; iou_ok additionally requires IoU >= 0.5, the gate used by
// the relation targets.
// ---------------------------------------------------------------------------
struct MatchResult {
  std::vector<std::size_t> pred_to_gt;  // kUnassigned where unmatched
  std::vector<double> iou;
  std::vector<bool> iou_ok;
  double cost = 0.0;
};

inline MatchResult match_instances(const Tensor& obj_probs, const Tensor& mask_logits,
                                   const Scene& scene, const ClassView& view) {
  const std::size_t Np = obj_probs.dim(0), Ng = scene.objects.size();
  if (mask_logits.dim(0) != Np)
    throw DimensionError("match_instances: probs and mask logits disagree on instance count");
  MatchResult res;
  res.pred_to_gt.assign(Np, kUnassigned);
  res.iou.assign(Np, 0.0);
  res.iou_ok.assign(Np, false);
  if (Ng == 0) return res;

  NoGradGuard ng;
  std::vector<std::vector<double>> cost(Np, std::vector<double>(Ng));
  for (std::size_t p = 0; p < Np; ++p)
    for (std::size_t g = 0; g < Ng; ++g) {
      const std::size_t col = view.object_col(scene.objects[g].category_id);
      const double cls = -std::log(std::max(obj_probs.at(p, col), 1e-12));
      cost[p][g] = cls + detail::value_bce(mask_logits, p, scene.objects[g].mask) +
                   detail::value_dice(mask_logits, p, scene.objects[g].mask);
    }
  Assignment a = hungarian(cost);
  res.pred_to_gt = a.row_to_col;
  res.cost = a.cost;
  for (std::size_t p = 0; p < Np; ++p) {
    if (res.pred_to_gt[p] == kUnassigned) continue;
    Mask pm = binarize_mask_row(mask_logits, p);
    res.iou[p] = detail::mask_iou(pm, scene.objects[res.pred_to_gt[p]].mask);
    res.iou_ok[p] = res.iou[p] >= 0.5;
  }
  return res;
}

// Query-consistency indicator: psi[i][j] = 1 iff instances i and j are both
// matched with IoU >= 0.5 and their objects participate in an annotated
// relation in either direction.
inline Tensor relation_indicator(const MatchResult& m, const Scene& scene, std::size_t n_queries) {
  if (m.pred_to_gt.size() != n_queries)
    throw ContractError("relation_indicator: match result covers a different instance count");
  Tensor psi = Tensor::zeros({n_queries, n_queries});
  for (const auto& r : scene.relations) {
    for (std::size_t i = 0; i < n_queries; ++i) {
      if (!m.iou_ok[i] || m.pred_to_gt[i] != r.subject) continue;
      for (std::size_t j = 0; j < n_queries; ++j) {
        if (!m.iou_ok[j] || m.pred_to_gt[j] != r.object) continue;
        psi.mutable_data()[i * n_queries + j] = 1.0;
        psi.mutable_data()[j * n_queries + i] = 1.0;
      }
    }
  }
  return psi;
}

struct LossWeights {
  double lambda_rqc = 0.6;
  double lambda_mask = 1.0;
};

struct LossBundle {
  Tensor total;  // [1]
  double rel = 0.0, rqc = 0.0, mask = 0.0;
  std::size_t matched = 0;         // instances entering the mask loss
  std::size_t positive_pairs = 0;  // selected pairs with an annotated predicate
};

// ---------------------------------------------------------------------------
// Training loss:
//   total = L_rel + lambda_rqc * L_rqc + lambda_mask * L_mask
// L_mask averages BCE + Dice + class cross-entropy over matched instances.
// L_rel is cross-entropy over the selected pairs: a pair whose endpoints are
// matched (IoU >= 0.5) and carry annotated predicates gets a uniform soft
// target over those predicates; every other selected pair is trained toward
// the no-relation class. Predicates outside the vocabulary view never become
// targets. With nothing annotated and nothing selected the loss is zero.
// ---------------------------------------------------------------------------
inline LossBundle total_loss(const Tensor& obj_probs, const Tensor& mask_logits,
                             const Tensor& Qhat, const std::vector<std::pair<std::size_t, std::size_t>>& pairs,
                             const Tensor& rel_probs, const MatchResult& m, const Scene& scene,
                             const ClassView& view, const LossWeights& w) {
  const std::size_t Np = obj_probs.dim(0);
  const std::size_t HW = scene.height() * scene.width();
  if (mask_logits.dim(0) != Np || mask_logits.dim(1) != HW)
    throw DimensionError("total_loss: mask logits must be [n_queries, H*W]");
  if (Qhat.dim(0) != Np) throw DimensionError("total_loss: query matrix row count mismatch");
  if (!pairs.empty() &&
      (rel_probs.ndim() != 2 || rel_probs.dim(0) != pairs.size() ||
       rel_probs.dim(1) != view.predicate_ids.size() + 1))
    throw DimensionError("total_loss: relation probs must be [n_pairs, n_predicates + 1]");

  LossBundle out;
  if (scene.objects.empty() && pairs.empty()) {
    out.total = Tensor::zeros({1});
    return out;
  }

  // mask + class loss over matched instances
  std::vector<Tensor> mask_terms;
  for (std::size_t p = 0; p < Np; ++p) {
    const std::size_t g = m.pred_to_gt[p];
    if (g == kUnassigned) continue;
    const auto& gt = scene.objects[g];
    Tensor Y = Tensor::zeros({1, HW});
    for (std::size_t q = 0; q < HW; ++q)
      if (gt.mask[q]) Y.mutable_data()[q] = 1.0;
    Tensor z = row(mask_logits, p);
    Tensor bce = mean(sub(softplus(z), mul(z, Y)));
    Tensor pm = sigmoid(z);
    Tensor dice = sub(Tensor::ones({1}),
                      div(add(scale(sum(mul(pm, Y)), 2.0), Tensor::ones({1})),
                          add(add(sum(pm), sum(Y)), Tensor::ones({1}))));
    const std::size_t col = view.object_col(gt.category_id);
    Tensor ce = neg(log_op(slice(row(obj_probs, p), 1, col, col + 1)));
    mask_terms.push_back(add(add(bce, dice), reshape(ce, {1})));
    ++out.matched;
  }

  Tensor mask_t = mask_terms.empty()
                      ? Tensor::zeros({1})
                      : scale(sum(concat(mask_terms, 0)), 1.0 / double(mask_terms.size()));

  Tensor rqc_t = rqc_loss(Qhat, relation_indicator(m, scene, Np));

  // relation cross-entropy over selected pairs
  Tensor rel_t = Tensor::zeros({1});
  if (!pairs.empty()) {
    const std::size_t C = view.predicate_ids.size() + 1;
    Tensor targets = Tensor::zeros({pairs.size(), C});
    for (std::size_t k = 0; k < pairs.size(); ++k) {
      const auto [i, j] = pairs[k];
      std::vector<std::size_t> cols;
      if (m.iou_ok[i] && m.iou_ok[j]) {
        for (const auto& r : scene.relations)
          if (r.subject == m.pred_to_gt[i] && r.object == m.pred_to_gt[j] &&
              view.has_predicate(r.predicate))
            cols.push_back(view.predicate_col(r.predicate));
      }
      if (cols.empty()) {
        targets.mutable_data()[k * C + view.no_relation_col()] = 1.0;
      } else {
        ++out.positive_pairs;
        for (std::size_t c : cols) targets.mutable_data()[k * C + c] += 1.0 / double(cols.size());
      }
    }
    rel_t = scale(neg(sum(mul(targets, log_op(rel_probs)))), 1.0 / double(pairs.size()));
  }

  out.rel = rel_t.data()[0];
  out.rqc = rqc_t.data()[0];
  out.mask = mask_t.data()[0];
  out.total = add(rel_t, add(scale(rqc_t, w.lambda_rqc), scale(mask_t, w.lambda_mask)));
  return out;
}

}  // namespace spade
