#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "spade/core/gradcheck.hpp"
#include "spade/core/rng.hpp"
#include "spade/core/tensor.hpp"

using namespace spade;

TEST_CASE("quadratic gradient is exact", "[gradcheck]") {
  Tensor w = Tensor::from_data({1}, {3.0});
  auto rep = finite_diff_check([&]() { return sum(mul(w, w)); }, {w});
  REQUIRE(rep.pass);
  REQUIRE(rep.max_rel_error < 1e-6);
}

TEST_CASE("a detached path is flagged as a gradient defect", "[gradcheck]") {
  // numeric slope is 2w but the analytic gradient is zero; the checker must fail
  Tensor w = Tensor::from_data({1}, {3.0});
  auto rep = finite_diff_check([&]() { return sum(mul(w.detached(), w.detached())); }, {w});
  REQUIRE_FALSE(rep.pass);
}

TEST_CASE("elementwise op gradients pass finite differences", "[gradcheck]") {
  Rng rng(21);
  // positive inputs so log/sqrt/pow stay in-domain; offsets dodge relu kinks
  Tensor x = Tensor::from_data({2, 3}, {0.31, 0.72, 1.13, 1.54, 0.95, 0.46});
  auto check = [&](const char* name, std::function<Tensor()> f) {
    auto rep = finite_diff_check(f, {x});
    INFO(name << " max_rel_error=" << rep.max_rel_error << " worst=" << rep.worst);
    REQUIRE(rep.pass);
  };
  check("relu", [&]() { return sum(relu(x)); });
  check("gelu", [&]() { return sum(gelu(x)); });
  check("tanh", [&]() { return sum(tanh_act(x)); });
  check("sigmoid", [&]() { return sum(sigmoid(x)); });
  check("exp", [&]() { return sum(exp_op(x)); });
  check("log", [&]() { return sum(log_op(x)); });
  check("sqrt", [&]() { return sum(sqrt_op(x)); });
  check("softplus", [&]() { return sum(softplus(x)); });
  check("pow_1.7", [&]() { return sum(pow_const(x, 1.7)); });
  check("scale+add_scalar", [&]() { return sum(add_scalar(scale(x, 2.5), -1.0)); });
  check("l1", [&]() { return l1_norm(x); });
  check("l2", [&]() { return l2_norm(x); });
  check("mean", [&]() { return mean(x); });
}

TEST_CASE("binary op gradients pass finite differences", "[gradcheck]") {
  Rng rng(22);
  Tensor a = Tensor::randn({3, 4}, rng);
  Tensor b = add_scalar(Tensor::randn({3, 4}, rng).detached(), 3.0);  // keep divisors away from 0
  auto rep = finite_diff_check([&]() { return sum(div(mul(add(a, b), sub(a, b)), b)); }, {a, b});
  REQUIRE(rep.pass);
}

TEST_CASE("broadcast binary gradients pass finite differences", "[gradcheck]") {
  Rng rng(23);
  Tensor a = Tensor::randn({4, 3}, rng);
  Tensor b = Tensor::randn({3}, rng);
  auto rep = finite_diff_check([&]() { return sum(mul(a, b)); }, {a, b});
  REQUIRE(rep.pass);
  auto rep2 = finite_diff_check([&]() { return sum(tanh_act(add(a, b))); }, {a, b});
  REQUIRE(rep2.pass);
}

TEST_CASE("matmul and transpose gradients pass finite differences", "[gradcheck]") {
  Rng rng(24);
  Tensor a = Tensor::randn({3, 5}, rng);
  Tensor b = Tensor::randn({5, 2}, rng);
  auto rep = finite_diff_check([&]() { return sum(matmul(a, b)); }, {a, b});
  REQUIRE(rep.pass);
  auto rep2 =
      finite_diff_check([&]() { return sum(mul(matmul(transpose(b), transpose(a)),
                                               matmul(transpose(b), transpose(a)))); },
                        {a, b});
  REQUIRE(rep2.pass);
}

TEST_CASE("softmax and log_softmax gradients pass finite differences", "[gradcheck]") {
  Rng rng(25);
  Tensor x = Tensor::randn({3, 6}, rng);
  Tensor w = Tensor::randn({3, 6}, rng).detached();
  auto rep = finite_diff_check([&]() { return sum(mul(softmax(x, 1), w)); }, {x});
  REQUIRE(rep.pass);
  auto rep2 = finite_diff_check([&]() { return sum(mul(log_softmax(x, 1), w)); }, {x});
  REQUIRE(rep2.pass);
  auto rep0 = finite_diff_check([&]() { return sum(mul(softmax(x, 0), w)); }, {x});
  REQUIRE(rep0.pass);
}

TEST_CASE("shape op gradients pass finite differences", "[gradcheck]") {
  Rng rng(26);
  Tensor x = Tensor::randn({2, 4, 4}, rng);
  Tensor w1 = Tensor::randn({2, 2, 2}, rng).detached();
  auto rep = finite_diff_check([&]() { return sum(mul(avgpool2(x), w1)); }, {x});
  REQUIRE(rep.pass);
  Tensor w2 = Tensor::randn({2, 8, 8}, rng).detached();
  auto rep2 = finite_diff_check([&]() { return sum(mul(upsample_nearest(x, 2), w2)); }, {x});
  REQUIRE(rep2.pass);
  Tensor y = Tensor::randn({2, 4, 4}, rng);
  auto rep3 = finite_diff_check(
      [&]() { return sum(mul(concat({x, y}, 0), concat({x, y}, 0))); }, {x, y});
  REQUIRE(rep3.pass);
  auto rep4 = finite_diff_check([&]() { return sum(mul(slice(x, 1, 1, 3), slice(x, 1, 1, 3))); },
                                {x});
  REQUIRE(rep4.pass);
  auto rep5 = finite_diff_check([&]() { return sum(mul(sum_axis(x, 1), sum_axis(x, 1))); }, {x});
  REQUIRE(rep5.pass);
}

TEST_CASE("composite mlp-style gradients pass finite differences", "[gradcheck]") {
  Rng rng(27);
  Tensor x = Tensor::randn({2, 5}, rng).detached();
  Tensor w1 = Tensor::randn({5, 4}, rng, 0.5);
  Tensor b1 = Tensor::randn({4}, rng, 0.1);
  Tensor w2 = Tensor::randn({4, 3}, rng, 0.5);
  auto f = [&]() {
    Tensor h = gelu(add(matmul(x, w1), b1));
    Tensor z = matmul(h, w2);
    return mean(mul(softmax(z, 1), softmax(z, 1)));
  };
  auto rep = finite_diff_check(f, {w1, b1, w2});
  REQUIRE(rep.pass);
}

TEST_CASE("cosine similarity gradient passes finite differences", "[gradcheck]") {
  Rng rng(28);
  Tensor a = Tensor::randn({6}, rng);
  Tensor b = Tensor::randn({6}, rng);
  auto rep = finite_diff_check([&]() { return cosine_similarity(a, b); }, {a, b});
  REQUIRE(rep.pass);
}
