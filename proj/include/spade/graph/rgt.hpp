#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "spade/core/rng.hpp"
#include "spade/core/tensor.hpp"
#include "spade/graph/adjacency.hpp"

namespace spade {

// Two readings of the long-range attention formula. The literal one keeps the
// single averaged key exactly as written, so its softmax factor is always 1
// and the branch returns the projected query; set_attention is the standard
// multi-key reading. Both stay available behind this flag.
enum class RgtMode { kLiteral, kSetAttention };

enum class RgtBranch { kNeighbors, kNonNeighbors };

struct RgtBranchParams {
  Tensor W_q, W_k, W_v;  // [d, d] each
};

struct RgtBlockParams {
  RgtBranchParams nbr, non;
  Tensor W_f1, b_f1;  // fusion MLP: [3d, d], [d]
  Tensor W_f2, b_f2;  // fusion MLP: [d, d], [d]
  Tensor W_l, b_l;    // local GCN stage: [d, d], [d]

  static RgtBlockParams init(std::size_t d, Rng& rng) {
    const double s = 1.0 / std::sqrt(static_cast<double>(d));
    RgtBlockParams p;
    p.nbr.W_q = Tensor::randn({d, d}, rng, s);
    p.nbr.W_k = Tensor::randn({d, d}, rng, s);
    p.nbr.W_v = Tensor::randn({d, d}, rng, s);
    p.non.W_q = Tensor::randn({d, d}, rng, s);
    p.non.W_k = Tensor::randn({d, d}, rng, s);
    p.non.W_v = Tensor::randn({d, d}, rng, s);
    p.W_f1 = Tensor::randn({3 * d, d}, rng, 1.0 / std::sqrt(3.0 * d));
    p.b_f1 = Tensor::zeros({d});
    p.W_f2 = Tensor::randn({d, d}, rng, s);
    p.b_f2 = Tensor::zeros({d});
    p.W_l = Tensor::randn({d, d}, rng, s);
    p.b_l = Tensor::zeros({d});
    return p;
  }

  std::vector<std::pair<std::string, Tensor>> parameters(const std::string& prefix) const {
    return {{prefix + "nbr.W_q", nbr.W_q}, {prefix + "nbr.W_k", nbr.W_k},
            {prefix + "nbr.W_v", nbr.W_v}, {prefix + "non.W_q", non.W_q},
            {prefix + "non.W_k", non.W_k}, {prefix + "non.W_v", non.W_v},
            {prefix + "W_f1", W_f1},       {prefix + "b_f1", b_f1},
            {prefix + "W_f2", W_f2},       {prefix + "b_f2", b_f2},
            {prefix + "W_l", W_l},         {prefix + "b_l", b_l}};
  }
};

struct RgtConfig {
  std::size_t d = 32;
  std::size_t n_blocks = 8;
  RgtMode mode = RgtMode::kSetAttention;
  double sem_threshold = 0.5;  // semantic edge cutoff for graph construction
  double eta = 0.65;           // pair-selection similarity cutoff
  // ablation switches for the three context terms; the relation-query loss
  // has its own weight in the total loss
  bool use_neighbor_attention = true;
  bool use_nonneighbor_attention = true;
  bool use_gcn = true;
};

struct RgtStack {
  RgtConfig cfg;
  std::vector<RgtBlockParams> blocks;

  static RgtStack init(const RgtConfig& cfg, std::uint64_t seed) {
    RgtStack s;
    s.cfg = cfg;
    Rng root(seed);
    for (std::size_t i = 0; i < cfg.n_blocks; ++i) {
      Rng r = root.child(i + 1);
      s.blocks.push_back(RgtBlockParams::init(cfg.d, r));
    }
    return s;
  }

  std::vector<std::pair<std::string, Tensor>> parameters() const {
    std::vector<std::pair<std::string, Tensor>> ps;
    for (std::size_t i = 0; i < blocks.size(); ++i) {
      auto bp = blocks[i].parameters("rgt.blk" + std::to_string(i) + ".");
      ps.insert(ps.end(), bp.begin(), bp.end());
    }
    return ps;
  }

  void set_trainable(bool on) {
    for (auto& [name, t] : parameters()) {
      Tensor h = t;
      h.set_requires_grad(on);
    }
  }
};

namespace detail {

// [m, d] matrix of the member rows, in member order
inline Tensor gather_rows(const Tensor& X, const std::vector<std::size_t>& members) {
  std::vector<Tensor> rows;
  rows.reserve(members.size());
  for (auto j : members) rows.push_back(row(X, j));
  return concat(rows, 0);
}

}  // namespace detail

// Long-range attention of one node over a member set. Empty set -> exact
// zero vector: the branch contributes nothing and never produces NaN.
inline Tensor rgt_long_range(const Tensor& q_r, const Tensor& X,
                             const std::vector<std::size_t>& members,
                             const RgtBranchParams& bp, RgtMode mode) {
  if (q_r.ndim() != 2 || q_r.dim(0) != 1) throw DimensionError("rgt_long_range: q_r must be [1,d]");
  if (members.empty()) return Tensor::zeros({1, q_r.dim(1)});
  const double inv_scale = 1.0 / std::sqrt(static_cast<double>(members.size()));
  Tensor M = detail::gather_rows(X, members);
  Tensor q = matmul(q_r, bp.W_q);
  if (mode == RgtMode::kLiteral) {
    // single averaged key: the softmax collapses to 1 and the value is the
    // projected query itself
    Tensor phi = reshape(mean_axis(M, 0), {1, q_r.dim(1)});
    Tensor score = scale(matmul(q, transpose(matmul(phi, bp.W_k))), inv_scale);
    Tensor w = softmax(score, 1);  // [1,1], identically one
    return matmul(w, matmul(q_r, bp.W_v));
  }
  Tensor K = matmul(M, bp.W_k);
  Tensor V = matmul(M, bp.W_v);
  Tensor scores = scale(matmul(q, transpose(K)), inv_scale);
  return matmul(softmax(scores, 1), V);
}

// Convenience form addressed by node index and branch kind.
inline Tensor rgt_long_range(const Tensor& X, const AdjacencyGraph& G, std::size_t r,
                             RgtBranch branch, const RgtBlockParams& params, RgtMode mode) {
  const auto members =
      branch == RgtBranch::kNeighbors ? G.neighbors(r) : G.non_neighbors(r);
  const RgtBranchParams& bp = branch == RgtBranch::kNeighbors ? params.nbr : params.non;
  return rgt_long_range(row(X, r), X, members, bp, mode);
}

// Symmetric-normalized propagation matrix with self-loops, as plain values.
inline Tensor normalized_adjacency(const AdjacencyGraph& G) {
  const std::size_t n = G.n;
  std::vector<double> deg(n, 1.0);  // self-loop
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) deg[i] += G.at(i, j);
  Tensor A = Tensor::zeros({n, n});
  auto& av = A.mutable_data();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      const double a = i == j ? 1.0 : static_cast<double>(G.at(i, j));
      av[i * n + j] = a / std::sqrt(deg[i] * deg[j]);
    }
  return A;
}

// One block: residual sum of both long-range branches per node, fusion of the
// node with its branch averages, then the local graph-convolution stage.
inline Tensor rgt_block(const Tensor& X, const AdjacencyGraph& G, const RgtBlockParams& params,
                        const RgtConfig& cfg) {
  if (X.ndim() != 2) throw DimensionError("rgt_block: features must be [N, d]");
  const std::size_t N = X.dim(0), d = X.dim(1);
  if (G.n != N) throw ContractError("rgt_block: graph size mismatch");

  std::vector<Tensor> fused_rows;
  fused_rows.reserve(N);
  for (std::size_t r = 0; r < N; ++r) {
    const auto nbr = G.neighbors(r);
    const auto non = G.non_neighbors(r);
    Tensor q = row(X, r);
    // branch averages, reused by the fusion stage; empty set -> zero. A
    // disabled branch contributes neither its attention term nor its average,
    // so with everything off the block degenerates to a per-node MLP.
    Tensor phi_p = (nbr.empty() || !cfg.use_neighbor_attention)
                       ? Tensor::zeros({1, d})
                       : reshape(mean_axis(detail::gather_rows(X, nbr), 0), {1, d});
    Tensor phi_n = (non.empty() || !cfg.use_nonneighbor_attention)
                       ? Tensor::zeros({1, d})
                       : reshape(mean_axis(detail::gather_rows(X, non), 0), {1, d});
    Tensor q1 = q;
    if (cfg.use_neighbor_attention)
      q1 = add(q1, rgt_long_range(q, X, nbr, params.nbr, cfg.mode));
    if (cfg.use_nonneighbor_attention)
      q1 = add(q1, rgt_long_range(q, X, non, params.non, cfg.mode));
    Tensor in = concat({q1, phi_p, phi_n}, 1);  // [1, 3d]
    Tensor hidden = gelu(add(matmul(in, params.W_f1), params.b_f1));
    fused_rows.push_back(add(matmul(hidden, params.W_f2), params.b_f2));
  }
  Tensor Q2 = concat(fused_rows, 0);
  if (!cfg.use_gcn) return Q2;
  Tensor Ahat = normalized_adjacency(G);
  return gelu(add(matmul(matmul(Ahat, Q2), params.W_l), params.b_l));
}

// Sequential application of the stack; zero blocks is the identity.
inline Tensor rgt_forward(const Tensor& X, const AdjacencyGraph& G, const RgtStack& stack) {
  Tensor out = X;
  for (const auto& blk : stack.blocks) out = rgt_block(out, G, blk, stack.cfg);
  return out;
}

struct PairSelection {
  Tensor S;  // [N, N] cosine matrix, plain values
  std::vector<std::pair<std::size_t, std::size_t>> pairs;  // ordered (i, j), i != j
  double eta = 0.65;
};

// Ordered pairs whose query cosine strictly exceeds eta, scanned row-major.
inline PairSelection select_pairs(const Tensor& Qhat, double eta) {
  if (Qhat.ndim() != 2) throw DimensionError("select_pairs: queries must be [N, d]");
  const std::size_t N = Qhat.dim(0), d = Qhat.dim(1);
  const double* qv = Qhat.data().data();
  std::vector<double> norms(N);
  for (std::size_t i = 0; i < N; ++i) {
    double s = 0.0;
    for (std::size_t k = 0; k < d; ++k) s += qv[i * d + k] * qv[i * d + k];
    if (s == 0.0)
      throw ContractError("select_pairs: query row " + std::to_string(i) +
                          " is zero, cosine undefined");
    norms[i] = std::sqrt(s);
  }
  PairSelection sel;
  sel.eta = eta;
  sel.S = Tensor::zeros({N, N});
  auto& sv = sel.S.mutable_data();
  for (std::size_t i = 0; i < N; ++i)
    for (std::size_t j = 0; j < N; ++j) {
      double dotv = 0.0;
      for (std::size_t k = 0; k < d; ++k) dotv += qv[i * d + k] * qv[j * d + k];
      sv[i * N + j] = dotv / (norms[i] * norms[j]);
      if (i != j && sv[i * N + j] > eta) sel.pairs.emplace_back(i, j);
    }
  return sel;
}

// Squared error between the query cosine matrix and the binary pair
// indicator, averaged over off-diagonal entries (the diagonal is identically
// one and carries no signal). Differentiable in the queries.
inline Tensor rqc_loss(const Tensor& Qhat, const Tensor& indicator) {
  if (Qhat.ndim() != 2) throw DimensionError("rqc_loss: queries must be [N, d]");
  const std::size_t N = Qhat.dim(0);
  if (indicator.shape() != Shape{N, N})
    throw ContractError("rqc_loss: indicator must be [N, N], got " +
                        shape_str(indicator.shape()));
  if (N == 1) return Tensor::scalar(0.0);  // no off-diagonal entries
  Tensor norms = reshape(sqrt_op(sum_axis(mul(Qhat, Qhat), 1)), {N, 1});
  Tensor S = div(matmul(Qhat, transpose(Qhat)), matmul(norms, transpose(norms)));
  Tensor mask = Tensor::ones({N, N});
  for (std::size_t i = 0; i < N; ++i) mask.mutable_data()[i * N + i] = 0.0;
  Tensor diff = mul(sub(S, indicator), mask);
  return scale(sum(mul(diff, diff)), 1.0 / static_cast<double>(N * N - N));
}

}  // namespace spade
