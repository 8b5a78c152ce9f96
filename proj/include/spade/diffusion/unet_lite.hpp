#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "spade/core/rng.hpp"
#include "spade/core/tensor.hpp"
#include "spade/model/lora.hpp"

namespace spade {

struct UNetConfig {
  std::size_t channels = 3;
  std::size_t height = 32;
  std::size_t width = 32;
  std::vector<std::size_t> level_widths{8, 12, 16};
  std::size_t d_cond = 32;
  std::size_t d_time = 8;

  std::size_t pyramid_channels() const {
    std::size_t s = 0;
    for (auto w : level_widths) s += w;
    return s;
  }

  void validate() const {
    if (level_widths.empty()) throw ContractError("need at least one level");
    const std::size_t f = 1ull << (level_widths.size());
    if (height % f != 0 || width % f != 0)
      throw ContractError("grid dims must be divisible by 2^levels");
    if (d_time % 2 != 0) throw ContractError("time embedding width must be even");
  }
};

struct UNetOutput {
  Tensor eps;                // [C,H,W], same shape as the input
  std::vector<Tensor> maps;  // one per level when captured: [N_level, n_tok]
  Tensor pyramid;            // [sum(level_widths), H, W]
};

// Per-level low-rank residuals on the conditioning projections.
struct CrossLora {
  LoraLayer k, v;
};
using LoraSet = std::vector<CrossLora>;

// Miniature conditional denoiser. Three token-mixing levels at falling
// resolution, each with one cross-attention read of the conditioning tokens;
// the level outputs, upsampled to grid resolution and concatenated, form the
// feature pyramid the prediction head and all downstream consumers read.
class UNetLite {
public:
  UNetLite() = default;

  UNetLite(UNetConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
    cfg_.validate();
    Rng root(seed);
    std::size_t prev_w = cfg_.channels;
    std::size_t h = cfg_.height, w = cfg_.width;
    for (std::size_t l = 0; l < cfg_.level_widths.size(); ++l) {
      h /= 2;
      w /= 2;
      const std::size_t cw = cfg_.level_widths[l];
      const std::size_t N = h * w;
      Level lv;
      Rng r = root.child(l + 1);
      lv.W_in = Tensor::randn({prev_w, cw}, r, 1.0 / std::sqrt(double(prev_w)));
      lv.b_in = Tensor::zeros({cw});
      lv.W_tok = Tensor::randn({N, N}, r, 1.0 / std::sqrt(double(N)));
      lv.W_ch = Tensor::randn({cw, cw}, r, 1.0 / std::sqrt(double(cw)));
      lv.b_ch = Tensor::zeros({cw});
      lv.W_time = Tensor::randn({cfg_.d_time, cw}, r, 1.0 / std::sqrt(double(cfg_.d_time)));
      lv.W_q = Tensor::randn({cw, cw}, r, 1.0 / std::sqrt(double(cw)));
      lv.W_k = Tensor::randn({cfg_.d_cond, cw}, r, 1.0 / std::sqrt(double(cfg_.d_cond)));
      lv.W_v = Tensor::randn({cfg_.d_cond, cw}, r, 1.0 / std::sqrt(double(cfg_.d_cond)));
      levels_.push_back(std::move(lv));
      prev_w = cw;
    }
    Rng rh = root.child(900);
    W_eps_ = Tensor::randn({cfg_.pyramid_channels(), cfg_.channels}, rh,
                           1.0 / std::sqrt(double(cfg_.pyramid_channels())));
    b_eps_ = Tensor::zeros({cfg_.channels});
  }

  const UNetConfig& config() const { return cfg_; }

  void set_lora(const LoraSet* lora) {
    if (lora && lora->size() != levels_.size())
      throw ContractError("lora set size must match level count");
    lora_ = lora;
  }
  const LoraSet* lora() const { return lora_; }

  Tensor level_Wk(std::size_t l) const { return levels_[l].W_k; }
  Tensor level_Wv(std::size_t l) const { return levels_[l].W_v; }
  std::size_t n_levels() const { return levels_.size(); }

  // Sinusoidal position code for the integer step.
  Tensor time_embedding(std::size_t t) const {
    Tensor e = Tensor::zeros({1, cfg_.d_time});
    auto& v = e.mutable_data();
    const std::size_t half = cfg_.d_time / 2;
    for (std::size_t i = 0; i < half; ++i) {
      const double omega =
          std::pow(10000.0, -static_cast<double>(i) / static_cast<double>(half));
      v[i] = std::sin(static_cast<double>(t) * omega);
      v[half + i] = std::cos(static_cast<double>(t) * omega);
    }
    return e;
  }

  UNetOutput forward(const Tensor& x_t, std::size_t t, const Tensor& cond,
                     bool capture = false) const {
    if (x_t.shape() != Shape{cfg_.channels, cfg_.height, cfg_.width})
      throw DimensionError("denoiser input shape mismatch: " + shape_str(x_t.shape()));
    if (cond.ndim() != 2 || cond.dim(1) != cfg_.d_cond || cond.dim(0) < 1)
      throw DimensionError("conditioning must be [n_tok>=1, d_cond]");

    UNetOutput out;
    const Tensor temb = time_embedding(t);
    std::vector<Tensor> pyramid_parts;

    std::size_t h = cfg_.height, w = cfg_.width;
    Tensor grid = x_t;  // [c, h, w] at the current resolution
    Tensor tokens;      // [N, c]
    for (std::size_t l = 0; l < levels_.size(); ++l) {
      const auto& lv = levels_[l];
      const std::size_t cw = cfg_.level_widths[l];
      // enter the level: halve resolution, then tokens = pixels
      grid = avgpool2(grid);
      h /= 2;
      w /= 2;
      tokens = transpose(reshape(grid, {grid.dim(0), h * w}));
      tokens = add(matmul(tokens, lv.W_in), lv.b_in);
      // token mixing (space), then channel mixing, residual form
      tokens = add(tokens, gelu(matmul(lv.W_tok, tokens)));
      tokens = add(tokens, gelu(add(matmul(tokens, lv.W_ch), lv.b_ch)));
      tokens = add(tokens, matmul(temb, lv.W_time));
      // cross-attention over the conditioning tokens
      Tensor Wk = lv.W_k, Wv = lv.W_v;
      if (lora_) {
        Wk = (*lora_)[l].k.effective();
        Wv = (*lora_)[l].v.effective();
      }
      Tensor Q = matmul(tokens, lv.W_q);
      Tensor K = matmul(cond, Wk);
      Tensor V = matmul(cond, Wv);
      Tensor A = softmax(scale(matmul(Q, transpose(K)), 1.0 / std::sqrt(double(cw))), 1);
      tokens = add(tokens, matmul(A, V));
      if (capture) out.maps.push_back(A);

      grid = reshape(transpose(tokens), {cw, h, w});
      pyramid_parts.push_back(
          upsample_nearest(grid, cfg_.height / h));
    }

    out.pyramid = concat(pyramid_parts, 0);
    Tensor flat = transpose(reshape(out.pyramid, {cfg_.pyramid_channels(),
                                                  cfg_.height * cfg_.width}));
    Tensor eps_flat = add(matmul(flat, W_eps_), b_eps_);
    out.eps = reshape(transpose(eps_flat), {cfg_.channels, cfg_.height, cfg_.width});
    return out;
  }

  std::vector<std::pair<std::string, Tensor>> parameters() const {
    std::vector<std::pair<std::string, Tensor>> ps;
    for (std::size_t l = 0; l < levels_.size(); ++l) {
      const auto& lv = levels_[l];
      const std::string p = "lvl" + std::to_string(l) + ".";
      ps.emplace_back(p + "W_in", lv.W_in);
      ps.emplace_back(p + "b_in", lv.b_in);
      ps.emplace_back(p + "W_tok", lv.W_tok);
      ps.emplace_back(p + "W_ch", lv.W_ch);
      ps.emplace_back(p + "b_ch", lv.b_ch);
      ps.emplace_back(p + "W_time", lv.W_time);
      ps.emplace_back(p + "W_q", lv.W_q);
      ps.emplace_back(p + "W_k", lv.W_k);
      ps.emplace_back(p + "W_v", lv.W_v);
    }
    ps.emplace_back("head.W_eps", W_eps_);
    ps.emplace_back("head.b_eps", b_eps_);
    return ps;
  }

  void set_trainable(bool on) {
    for (auto& [name, t] : parameters()) {
      Tensor h = t;
      h.set_requires_grad(on);
    }
  }

  // Copies parameter values from another instance with the same config.
  void load_values_from(const UNetLite& other) {
    auto mine = parameters();
    auto theirs = other.parameters();
    if (mine.size() != theirs.size()) throw ContractError("parameter list mismatch");
    for (std::size_t i = 0; i < mine.size(); ++i) {
      if (mine[i].second.shape() != theirs[i].second.shape())
        throw ContractError("parameter shape mismatch at " + mine[i].first);
      mine[i].second.mutable_data() = theirs[i].second.data();
    }
  }

private:
  struct Level {
    Tensor W_in, b_in;
    Tensor W_tok;
    Tensor W_ch, b_ch;
    Tensor W_time;
    Tensor W_q, W_k, W_v;
  };

  UNetConfig cfg_;
  std::vector<Level> levels_;
  Tensor W_eps_, b_eps_;
  const LoraSet* lora_ = nullptr;
};

}  // namespace spade
