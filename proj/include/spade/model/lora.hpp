#pragma once

#include <bit>
#include <cstdint>
#include <string>

#include "spade/core/rng.hpp"
#include "spade/core/tensor.hpp"

namespace spade {

// Byte-level fingerprint of a tensor's contents; used to prove frozen weights
// stayed frozen.
inline std::uint64_t tensor_checksum(const Tensor& t) {
  std::uint64_t h = 14695981039346656037ULL;
  auto mix = [&h](std::uint64_t v) {
    for (int i = 0; i < 8; ++i) {
      h ^= (v >> (8 * i)) & 0xff;
      h *= 1099511628211ULL;
    }
  };
  for (auto d : t.shape()) mix(d);
  for (double v : t.data()) mix(std::bit_cast<std::uint64_t>(v));
  return h;
}

// Low-rank residual on a frozen projection: effective weight = W + B x D.
// B starts as small noise and D as zero, so the residual is exactly zero
// until training moves D.
struct LoraLayer {
  Tensor base;  // [m_in, m_out], frozen
  Tensor B;     // [m_in, r]
  Tensor D;     // [r, m_out]
  std::size_t rank = 0;

  static LoraLayer init(const Tensor& W, std::size_t r, Rng& rng) {
    if (W.ndim() != 2) throw DimensionError("lora base must be 2-D");
    LoraLayer l;
    l.base = W;  // shares the frozen tensor
    l.rank = r;
    l.B = Tensor::randn({W.dim(0), r}, rng, 0.01, true);
    l.D = Tensor::zeros({r, W.dim(1)}, true);
    return l;
  }

  Tensor effective() const { return add(base, matmul(B, D)); }
  Tensor delta() const { return matmul(B, D); }
};

}  // namespace spade
