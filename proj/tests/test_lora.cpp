#include <catch2/catch_amalgamated.hpp>

#include "spade/core/gradcheck.hpp"
#include "spade/core/linalg.hpp"
#include "spade/core/rng.hpp"
#include "spade/core/tensor.hpp"
#include "spade/diffusion/unet_lite.hpp"
#include "spade/model/lora.hpp"

using namespace spade;

TEST_CASE("lora init: B small noise, D exactly zero", "[lora]") {
  Rng rng(7);
  Tensor W = Tensor::randn({5, 4}, rng);
  LoraLayer l = LoraLayer::init(W, 2, rng);
  REQUIRE(l.rank == 2);
  REQUIRE(l.B.shape() == Shape{5, 2});
  REQUIRE(l.D.shape() == Shape{2, 4});
  REQUIRE(l.B.requires_grad());
  REQUIRE(l.D.requires_grad());
  bool b_nonzero = false;
  for (double v : l.B.data()) {
    REQUIRE(std::abs(v) < 0.1);
    if (v != 0.0) b_nonzero = true;
  }
  REQUIRE(b_nonzero);
  for (double v : l.D.data()) REQUIRE(v == 0.0);
}

TEST_CASE("lora effective weight equals base bit-for-bit at init", "[lora]") {
  Rng rng(11);
  Tensor W = Tensor::randn({6, 3}, rng);
  LoraLayer l = LoraLayer::init(W, 3, rng);
  Tensor eff = l.effective();
  REQUIRE(eff.shape() == W.shape());
  for (std::size_t i = 0; i < W.size(); ++i) REQUIRE(eff.data()[i] == W.data()[i]);
}

TEST_CASE("lora delta never exceeds rank r", "[lora]") {
  Rng rng(13);
  Tensor W = Tensor::randn({8, 6}, rng);
  for (std::size_t r : {1u, 2u, 4u}) {
    LoraLayer l = LoraLayer::init(W, r, rng);
    for (auto& v : l.D.mutable_data()) v = rng.normal();
    for (auto& v : l.B.mutable_data()) v = rng.normal();
    auto sv = singular_values(l.delta());
    REQUIRE(sv.size() == 6);
    std::size_t above = 0;
    for (double s : sv)
      if (s > 1e-8) ++above;
    REQUIRE(above <= r);
    REQUIRE(above >= 1);  // random factors are full rank with probability 1
  }
}

TEST_CASE("tensor_checksum separates contents and shapes", "[lora]") {
  Rng rng(17);
  Tensor a = Tensor::randn({2, 3}, rng);
  REQUIRE(tensor_checksum(a) == tensor_checksum(a));
  Tensor b = a.clone();
  REQUIRE(tensor_checksum(b) == tensor_checksum(a));
  b.mutable_data()[0] += 1e-12;
  REQUIRE(tensor_checksum(b) != tensor_checksum(a));
  Tensor c = reshape(a, {3, 2});
  REQUIRE(tensor_checksum(c) != tensor_checksum(a));
}

TEST_CASE("fresh lora set leaves the denoiser output unchanged", "[lora]") {
  UNetConfig cfg;
  cfg.channels = 2;
  cfg.height = 8;
  cfg.width = 8;
  cfg.level_widths = {4, 6};
  cfg.d_cond = 8;
  cfg.d_time = 4;
  UNetLite net(cfg, 23);
  Rng rng(29);
  Tensor x = Tensor::randn({2, 8, 8}, rng);
  Tensor cond = Tensor::randn({3, 8}, rng);
  Tensor base_eps = net.forward(x, 1, cond).eps;

  LoraSet lora;
  Rng lrng(31);
  for (std::size_t l = 0; l < net.n_levels(); ++l) {
    CrossLora cl;
    cl.k = LoraLayer::init(net.level_Wk(l), 2, lrng);
    cl.v = LoraLayer::init(net.level_Wv(l), 2, lrng);
    lora.push_back(std::move(cl));
  }
  net.set_lora(&lora);
  Tensor eps0 = net.forward(x, 1, cond).eps;
  for (std::size_t i = 0; i < base_eps.size(); ++i)
    REQUIRE(eps0.data()[i] == base_eps.data()[i]);

  for (auto& v : lora[0].k.D.mutable_data()) v = 0.05;
  Tensor eps1 = net.forward(x, 1, cond).eps;
  REQUIRE(max_abs_diff(eps1, base_eps) > 0.0);
  net.set_lora(nullptr);
}

TEST_CASE("gradients flow through a lora cross-attention layer", "[lora][gradcheck]") {
  Rng rng(37);
  const std::size_t n_q = 3, cw = 4, n_kv = 2, dc = 5;
  Tensor x = Tensor::randn({n_q, cw}, rng);
  Tensor W_q = Tensor::randn({cw, cw}, rng, 0.5);
  Tensor cond = Tensor::randn({n_kv, dc}, rng);
  Tensor Wk = Tensor::randn({dc, cw}, rng, 0.5);
  Tensor Wv = Tensor::randn({dc, cw}, rng, 0.5);
  LoraLayer lk = LoraLayer::init(Wk, 2, rng);
  LoraLayer lv = LoraLayer::init(Wv, 2, rng);
  for (auto& v : lk.D.mutable_data()) v = rng.normal() * 0.1;
  for (auto& v : lv.D.mutable_data()) v = rng.normal() * 0.1;

  auto f = [&]() {
    Tensor Q = matmul(x, W_q);
    Tensor K = matmul(cond, lk.effective());
    Tensor V = matmul(cond, lv.effective());
    Tensor A = softmax(scale(matmul(Q, transpose(K)), 1.0 / std::sqrt(double(cw))), 1);
    return mean(matmul(A, V));
  };
  auto rep = finite_diff_check(f, {lk.B, lk.D, lv.B, lv.D});
  INFO("max rel error " << rep.max_rel_error << " at " << rep.worst);
  REQUIRE(rep.pass);
}
