#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "spade/core/rng.hpp"
#include "spade/core/tensor.hpp"

namespace spade {

struct CaptionerConfig {
  std::size_t channels = 3;
  std::size_t height = 32;
  std::size_t width = 32;
  std::size_t d_embed = 24;  // frozen embedder output width
  std::size_t hidden = 48;   // adapter hidden width
  std::size_t n_tok = 6;     // conditioning tokens emitted
  std::size_t d_out = 32;    // conditioning / pooled feature width

  void validate() const {
    if (height % 8 != 0 || width % 8 != 0)
      throw ContractError("captioner expects grid dims divisible by 8");
    if (n_tok < 1) throw ContractError("need at least one conditioning token");
  }
};

// Implicit captioner: a frozen, seeded image embedder plus a small trainable
// adapter. Two read-outs share the adapter trunk:
//   tokens(grid)  -> [n_tok, d_out]   conditioning for the denoiser
//   pixel_features(grid) -> [H*W, d_out]  per-pixel features for mask pooling
// Only the adapter tensors ever carry gradients; the embedder never does.
class ImplicitCaptioner {
public:
  ImplicitCaptioner() = default;

  ImplicitCaptioner(CaptionerConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
    cfg_.validate();
    Rng root(seed);
    const std::size_t pooled_dim = cfg_.channels * 16;  // grid pooled to 4x4
    Rng r0 = root.child(1);
    embed_img_ = Tensor::randn({pooled_dim, cfg_.d_embed}, r0,
                               1.0 / std::sqrt(double(pooled_dim)));
    embed_px_ = Tensor::randn({cfg_.channels, cfg_.d_embed}, r0,
                              1.0 / std::sqrt(double(cfg_.channels)));
    Rng r1 = root.child(2);
    W1_ = Tensor::randn({cfg_.d_embed, cfg_.hidden}, r1, 1.0 / std::sqrt(double(cfg_.d_embed)));
    b1_ = Tensor::zeros({cfg_.hidden});
    W_tok_ = Tensor::randn({cfg_.hidden, cfg_.n_tok * cfg_.d_out}, r1,
                           1.0 / std::sqrt(double(cfg_.hidden)));
    b_tok_ = Tensor::zeros({cfg_.n_tok * cfg_.d_out});
    W_px_ = Tensor::randn({cfg_.hidden, cfg_.d_out}, r1, 1.0 / std::sqrt(double(cfg_.hidden)));
    b_px_ = Tensor::zeros({cfg_.d_out});
  }

  const CaptionerConfig& config() const { return cfg_; }

  // Conditioning tokens from the 4x4-pooled grid through the adapter.
  Tensor tokens(const Tensor& grid) const {
    check_grid(grid);
    Tensor g = grid;
    std::size_t h = cfg_.height;
    while (h > 4) {
      g = avgpool2(g);
      h /= 2;
    }
    Tensor flat = reshape(g, {1, cfg_.channels * 16});
    Tensor e = matmul(flat, embed_img_);        // frozen embedder
    Tensor hdd = gelu(add(matmul(e, W1_), b1_));  // adapter trunk
    Tensor t = add(matmul(hdd, W_tok_), b_tok_);
    return reshape(t, {cfg_.n_tok, cfg_.d_out});
  }

  // Adapter-projected per-pixel features, rows ordered like the row-major grid.
  Tensor pixel_features(const Tensor& grid) const {
    return pixel_head(pixel_trunk(grid));
  }

  // The two halves separately, so a caller that freezes the trunk can run it
  // without building a graph and keep gradients only through the head.
  Tensor pixel_trunk(const Tensor& grid) const {
    check_grid(grid);
    Tensor px = transpose(reshape(grid, {cfg_.channels, cfg_.height * cfg_.width}));
    Tensor e = matmul(px, embed_px_);
    return gelu(add(matmul(e, W1_), b1_));
  }
  Tensor pixel_head(const Tensor& trunk) const { return add(matmul(trunk, W_px_), b_px_); }

  std::vector<std::pair<std::string, Tensor>> adapter_parameters() const {
    return {{"cap.W1", W1_},       {"cap.b1", b1_},   {"cap.W_tok", W_tok_},
            {"cap.b_tok", b_tok_}, {"cap.W_px", W_px_}, {"cap.b_px", b_px_}};
  }
  // The pooled-feature alignment head; the only adapter piece the second
  // stage trains. The trunk is part of the calibrated conditioning path.
  std::vector<std::pair<std::string, Tensor>> pixel_head_parameters() const {
    return {{"cap.W_px", W_px_}, {"cap.b_px", b_px_}};
  }
  std::vector<std::pair<std::string, Tensor>> trunk_parameters() const {
    return {{"cap.W1", W1_}, {"cap.b1", b1_}, {"cap.W_tok", W_tok_}, {"cap.b_tok", b_tok_}};
  }
  std::vector<std::pair<std::string, Tensor>> frozen_parameters() const {
    return {{"cap.embed_img", embed_img_}, {"cap.embed_px", embed_px_}};
  }

  void set_adapter_trainable(bool on) {
    for (auto& [name, t] : adapter_parameters()) {
      Tensor h = t;
      h.set_requires_grad(on);
    }
  }

private:
  void check_grid(const Tensor& grid) const {
    if (grid.shape() != Shape{cfg_.channels, cfg_.height, cfg_.width})
      throw DimensionError("captioner grid shape mismatch: " + shape_str(grid.shape()));
  }

  CaptionerConfig cfg_;
  Tensor embed_img_, embed_px_;       // frozen
  Tensor W1_, b1_;                    // adapter trunk
  Tensor W_tok_, b_tok_;              // conditioning head
  Tensor W_px_, b_px_;                // per-pixel head
};

}  // namespace spade
