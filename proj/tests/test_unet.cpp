#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "spade/core/gradcheck.hpp"
#include "spade/diffusion/unet_lite.hpp"

using namespace spade;

namespace {

UNetConfig small_cfg() {
  UNetConfig cfg;
  cfg.channels = 2;
  cfg.height = cfg.width = 16;
  cfg.level_widths = {4, 6, 8};
  cfg.d_cond = 8;
  cfg.d_time = 4;
  return cfg;
}

}  // namespace

TEST_CASE("denoiser output shapes and pyramid dimensions", "[unet]") {
  UNetConfig cfg = small_cfg();
  UNetLite net(cfg, 17);
  Rng rng(1);
  Tensor x = Tensor::randn({2, 16, 16}, rng);
  Tensor cond = Tensor::randn({3, 8}, rng);
  auto out = net.forward(x, 0, cond, true);
  REQUIRE(out.eps.shape() == x.shape());
  REQUIRE(out.pyramid.shape() == Shape{18, 16, 16});  // 4+6+8 channels at grid res
  REQUIRE(out.maps.size() == 3);
  REQUIRE(out.maps[0].shape() == Shape{64, 3});  // 8x8 positions
  REQUIRE(out.maps[1].shape() == Shape{16, 3});
  REQUIRE(out.maps[2].shape() == Shape{4, 3});
  REQUIRE_THROWS_AS(net.forward(Tensor::zeros({2, 8, 8}), 0, cond, false), DimensionError);
  REQUIRE_THROWS_AS(net.forward(x, 0, Tensor::zeros({3, 4}), false), DimensionError);
}

TEST_CASE("attention maps are row-stochastic", "[unet]") {
  UNetLite net(small_cfg(), 23);
  Rng rng(2);
  Tensor x = Tensor::randn({2, 16, 16}, rng);
  Tensor cond = Tensor::randn({5, 8}, rng, 2.0);
  auto out = net.forward(x, 3, cond, true);
  for (const auto& A : out.maps) {
    const std::size_t n = A.dim(0), k = A.dim(1);
    for (std::size_t i = 0; i < n; ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < k; ++j) {
        REQUIRE(A.at(i, j) >= 0.0);
        s += A.at(i, j);
      }
      REQUIRE(std::abs(s - 1.0) <= 1e-12);
    }
  }
}

TEST_CASE("a single conditioning token gets all the attention", "[unet]") {
  UNetLite net(small_cfg(), 29);
  Rng rng(3);
  Tensor x = Tensor::randn({2, 16, 16}, rng);
  Tensor cond = Tensor::randn({1, 8}, rng);
  auto out = net.forward(x, 0, cond, true);
  for (const auto& A : out.maps) {
    REQUIRE(A.dim(1) == 1);
    for (std::size_t i = 0; i < A.dim(0); ++i) REQUIRE(A.at(i, 0) == 1.0);
  }
}

TEST_CASE("rescaled conditioning changes maps but keeps them stochastic", "[unet]") {
  UNetLite net(small_cfg(), 31);
  Rng rng(4);
  Tensor x = Tensor::randn({2, 16, 16}, rng);
  Tensor cond = Tensor::randn({4, 8}, rng);
  auto a = net.forward(x, 0, cond, true);
  auto b = net.forward(x, 0, scale(cond, 2.0), true);
  double change = 0.0;
  for (std::size_t l = 0; l < a.maps.size(); ++l) {
    change += max_abs_diff(a.maps[l], b.maps[l]);
    const auto& A = b.maps[l];
    for (std::size_t i = 0; i < A.dim(0); ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < A.dim(1); ++j) s += A.at(i, j);
      REQUIRE(std::abs(s - 1.0) <= 1e-12);
    }
  }
  REQUIRE(change > 1e-6);
}

TEST_CASE("forward is deterministic and seed-sensitive", "[unet]") {
  UNetConfig cfg = small_cfg();
  UNetLite n1(cfg, 5), n2(cfg, 5), n3(cfg, 6);
  Rng rng(5);
  Tensor x = Tensor::randn({2, 16, 16}, rng);
  Tensor cond = Tensor::randn({2, 8}, rng);
  REQUIRE(max_abs_diff(n1.forward(x, 1, cond).eps, n2.forward(x, 1, cond).eps) == 0.0);
  REQUIRE(max_abs_diff(n1.forward(x, 1, cond).eps, n3.forward(x, 1, cond).eps) > 1e-8);
}

TEST_CASE("prediction gradient flows to every parameter", "[unet]") {
  UNetConfig cfg = small_cfg();
  cfg.level_widths = {3, 4};  // two levels keep the finite-diff pass quick
  cfg.height = cfg.width = 8;
  UNetLite net(cfg, 41);
  Rng rng(6);
  Tensor x = Tensor::randn({2, 8, 8}, rng).detached();
  Tensor cond = Tensor::randn({3, 8}, rng).detached();
  std::vector<Tensor> params;
  for (auto& [name, t] : net.parameters()) params.push_back(t);
  auto f = [&]() {
    auto out = net.forward(x, 2, cond, false);
    return sum(mul(out.eps, out.eps));
  };
  auto rep = finite_diff_check(f, params, 1e-3, 1e-4, 12, 7);
  INFO("max_rel_error=" << rep.max_rel_error << " at " << rep.worst);
  REQUIRE(rep.pass);
}

TEST_CASE("zeroed low-rank residuals leave the forward pass untouched", "[unet]") {
  UNetConfig cfg = small_cfg();
  UNetLite net(cfg, 47);
  Rng rng(7);
  Tensor x = Tensor::randn({2, 16, 16}, rng);
  Tensor cond = Tensor::randn({3, 8}, rng);
  Tensor base_eps = net.forward(x, 0, cond).eps;

  LoraSet lora;
  Rng lr(8);
  for (std::size_t l = 0; l < net.n_levels(); ++l) {
    CrossLora cl;
    cl.k = LoraLayer::init(net.level_Wk(l), 2, lr);
    cl.v = LoraLayer::init(net.level_Wv(l), 2, lr);
    lora.push_back(std::move(cl));
  }
  net.set_lora(&lora);
  Tensor with_lora = net.forward(x, 0, cond).eps;
  REQUIRE(max_abs_diff(base_eps, with_lora) == 0.0);  // D=0 keeps the residual exactly zero

  // moving D changes the output
  lora[0].v.D.mutable_data()[0] = 0.5;
  Tensor moved = net.forward(x, 0, cond).eps;
  REQUIRE(max_abs_diff(base_eps, moved) > 1e-9);
  net.set_lora(nullptr);
}

TEST_CASE("time embedding distinguishes steps", "[unet]") {
  UNetLite net(small_cfg(), 53);
  Rng rng(9);
  Tensor x = Tensor::randn({2, 16, 16}, rng);
  Tensor cond = Tensor::randn({2, 8}, rng);
  Tensor e0 = net.forward(x, 0, cond).eps;
  Tensor e9 = net.forward(x, 9, cond).eps;
  REQUIRE(max_abs_diff(e0, e9) > 1e-8);
}
