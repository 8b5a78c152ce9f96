#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "spade/core/rng.hpp"
#include "spade/core/tensor.hpp"

namespace spade {

struct DecoderConfig {
  std::size_t d = 32;          // query width; must equal the prompt embedding width
  std::size_t n_queries = 8;   // learned instance slots
  std::size_t n_layers = 3;
  std::size_t ffn_hidden = 64;
  std::size_t f_channels = 36;  // denoiser pyramid width
  std::size_t token_stride = 2; // cross-attention reads the pyramid at this stride

  void validate() const {
    if (n_layers == 0) throw ContractError("decoder needs at least one layer");
    if (n_queries == 0) throw ContractError("decoder needs at least one query");
    if (token_stride != 1 && token_stride != 2 && token_stride != 4)
      throw ContractError("token_stride must be 1, 2, or 4");
  }
};

struct DecoderLayerParams {
  Tensor W_sq, W_sk, W_sv;  // self-attention over the queries
  Tensor W_q, W_k, W_v;     // cross-attention into the feature tokens
  Tensor W_1, b_1, W_2, b_2;

  static DecoderLayerParams init(std::size_t d, std::size_t hidden, Rng& rng) {
    const double s = 1.0 / std::sqrt(static_cast<double>(d));
    DecoderLayerParams p;
    p.W_sq = Tensor::randn({d, d}, rng, s);
    p.W_sk = Tensor::randn({d, d}, rng, s);
    p.W_sv = Tensor::randn({d, d}, rng, s);
    p.W_q = Tensor::randn({d, d}, rng, s);
    p.W_k = Tensor::randn({d, d}, rng, s);
    p.W_v = Tensor::randn({d, d}, rng, s);
    p.W_1 = Tensor::randn({d, hidden}, rng, s);
    p.b_1 = Tensor::zeros({hidden});
    p.W_2 = Tensor::randn({hidden, d}, rng, 1.0 / std::sqrt(static_cast<double>(hidden)));
    p.b_2 = Tensor::zeros({d});
    return p;
  }

  std::vector<std::pair<std::string, Tensor>> parameters(const std::string& prefix) const {
    return {{prefix + "W_sq", W_sq}, {prefix + "W_sk", W_sk}, {prefix + "W_sv", W_sv},
            {prefix + "W_q", W_q},   {prefix + "W_k", W_k},   {prefix + "W_v", W_v},
            {prefix + "W_1", W_1},   {prefix + "b_1", b_1},   {prefix + "W_2", W_2},
            {prefix + "b_2", b_2}};
  }
};

// One cross-attention decoder: a token projection of the feature grid plus
// n_layers of (query self-attention, cross-attention, feed-forward), all
// residual.
struct CrossDecoder {
  Tensor W_f, b_f;  // [f_channels, d], [d]
  std::vector<DecoderLayerParams> layers;

  static CrossDecoder init(const DecoderConfig& cfg, Rng& rng) {
    CrossDecoder dec;
    dec.W_f = Tensor::randn({cfg.f_channels, cfg.d}, rng,
                            1.0 / std::sqrt(static_cast<double>(cfg.f_channels)));
    dec.b_f = Tensor::zeros({cfg.d});
    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
      Rng r = rng.child(l + 1);
      dec.layers.push_back(DecoderLayerParams::init(cfg.d, cfg.ffn_hidden, r));
    }
    return dec;
  }

  std::vector<std::pair<std::string, Tensor>> parameters(const std::string& prefix) const {
    std::vector<std::pair<std::string, Tensor>> ps{{prefix + "W_f", W_f}, {prefix + "b_f", b_f}};
    for (std::size_t l = 0; l < layers.size(); ++l) {
      auto lp = layers[l].parameters(prefix + "l" + std::to_string(l) + ".");
      ps.insert(ps.end(), lp.begin(), lp.end());
    }
    return ps;
  }

  // queries [N, d], tokens [n_tok, f_channels] -> [N, d]
  Tensor run(const Tensor& queries, const Tensor& tokens, std::size_t d) const {
    const double inv = 1.0 / std::sqrt(static_cast<double>(d));
    Tensor T = add(matmul(tokens, W_f), b_f);
    Tensor H = queries;
    for (const auto& lp : layers) {
      Tensor A = softmax(scale(matmul(matmul(H, lp.W_sq), transpose(matmul(H, lp.W_sk))), inv), 1);
      H = add(H, matmul(A, matmul(H, lp.W_sv)));
      Tensor C = softmax(scale(matmul(matmul(H, lp.W_q), transpose(matmul(T, lp.W_k))), inv), 1);
      H = add(H, matmul(C, matmul(T, lp.W_v)));
      H = add(H, add(matmul(gelu(add(matmul(H, lp.W_1), lp.b_1)), lp.W_2), lp.b_2));
    }
    return H;
  }
};

// [C,H,W] grid -> [H*W, C] token matrix
inline Tensor grid_tokens(const Tensor& grid) {
  if (grid.ndim() != 3) throw DimensionError("grid_tokens expects [C,H,W]");
  return transpose(reshape(grid, {grid.dim(0), grid.dim(1) * grid.dim(2)}));
}

struct InstanceDecode {
  Tensor H;            // [n_queries, d]
  Tensor mask_logits;  // [n_queries, H*W] at full grid resolution
};

// Instance decoder, relation decoder, learned queries, pair projection and
// the mask head, acting on the denoiser's feature pyramid.
struct DecoderStack {
  DecoderConfig cfg;
  Tensor Q_o;        // [n_queries, d]
  CrossDecoder ins, rel;
  Tensor W_pair;     // [2d, d]
  Tensor W_qm;       // [d, d] query-side mask projection
  Tensor W_mask;     // [f_channels, d] token-side mask projection

  static DecoderStack init(const DecoderConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    DecoderStack s;
    s.cfg = cfg;
    Rng root(seed);
    Rng rq = root.child(1);
    s.Q_o = Tensor::randn({cfg.n_queries, cfg.d}, rq, 1.0);
    Rng ri = root.child(2);
    s.ins = CrossDecoder::init(cfg, ri);
    Rng rr = root.child(3);
    s.rel = CrossDecoder::init(cfg, rr);
    Rng rp = root.child(4);
    s.W_pair = Tensor::randn({2 * cfg.d, cfg.d}, rp, 1.0 / std::sqrt(2.0 * cfg.d));
    s.W_qm = Tensor::randn({cfg.d, cfg.d}, rp, 1.0 / std::sqrt(double(cfg.d)));
    s.W_mask = Tensor::randn({cfg.f_channels, cfg.d}, rp,
                             1.0 / std::sqrt(double(cfg.f_channels)));
    return s;
  }

  std::vector<std::pair<std::string, Tensor>> parameters() const {
    std::vector<std::pair<std::string, Tensor>> ps{{"dec.Q_o", Q_o},
                                                   {"dec.W_pair", W_pair},
                                                   {"dec.W_qm", W_qm},
                                                   {"dec.W_mask", W_mask}};
    auto pi = ins.parameters("dec.ins.");
    auto pr = rel.parameters("dec.rel.");
    ps.insert(ps.end(), pi.begin(), pi.end());
    ps.insert(ps.end(), pr.begin(), pr.end());
    return ps;
  }

  void set_trainable(bool on) {
    for (auto& [name, t] : parameters()) {
      Tensor h = t;
      h.set_requires_grad(on);
    }
  }

  Tensor cross_tokens(const Tensor& F) const {
    Tensor g = F;
    for (std::size_t s = cfg.token_stride; s > 1; s /= 2) g = avgpool2(g);
    return grid_tokens(g);
  }

  InstanceDecode decode_instances(const Tensor& F) const {
    if (F.ndim() != 3 || F.dim(0) != cfg.f_channels)
      throw DimensionError("decode_instances: feature grid must be [f_channels,H,W]");
    InstanceDecode out;
    out.H = ins.run(Q_o, cross_tokens(F), cfg.d);
    Tensor Tm = matmul(grid_tokens(F), W_mask);           // [H*W, d]
    out.mask_logits = matmul(matmul(out.H, W_qm), transpose(Tm));
    return out;
  }

  // pairs must be nonempty; the degenerate no-pair case is the caller's early
  // exit, keeping zero-sized tensors out of the graph
  Tensor pair_queries(const Tensor& H_o,
                      const std::vector<std::pair<std::size_t, std::size_t>>& pairs) const {
    if (pairs.empty()) throw ContractError("pair_queries: no pairs selected");
    std::vector<Tensor> rows;
    rows.reserve(pairs.size());
    for (const auto& [i, j] : pairs) rows.push_back(concat({row(H_o, i), row(H_o, j)}, 1));
    return matmul(concat(rows, 0), W_pair);
  }

  Tensor decode_relations(const Tensor& F, const Tensor& Q_rel) const {
    if (Q_rel.ndim() != 2 || Q_rel.dim(1) != cfg.d)
      throw DimensionError("decode_relations: queries must be [M, d]");
    return rel.run(Q_rel, cross_tokens(F), cfg.d);
  }
};

}  // namespace spade
