#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <limits>

#include "spade/core/gradcheck.hpp"
#include "spade/core/linalg.hpp"
#include "spade/core/rng.hpp"
#include "spade/core/tensor.hpp"
#include "spade/data/dataset_io.hpp"
#include "spade/data/scene_synth.hpp"
#include "spade/model/calibration.hpp"

using namespace spade;

namespace {

TextEmbedder tiny_embedder() { return TextEmbedder(8, 2, 4, 0x51474e41, 777); }

// 8x8 two-channel scene with hand-placed 2x2 blocks.
Scene tiny_scene(const std::vector<std::pair<int, std::pair<std::size_t, std::size_t>>>& objs,
                 std::vector<Relation> rels) {
  const std::size_t H = 8, W = 8;
  Scene s;
  s.grid = Tensor::zeros({2, H, W});
  auto& g = s.grid.mutable_data();
  for (const auto& [cat, yx] : objs) {
    Mask m(H * W, 0);
    for (std::size_t dy = 0; dy < 2; ++dy)
      for (std::size_t dx = 0; dx < 2; ++dx) {
        const std::size_t y = yx.first + dy, x = yx.second + dx;
        m[y * W + x] = 1;
        g[0 * H * W + y * W + x] = 0.5 + 0.1 * cat;
        g[1 * H * W + y * W + x] = 0.3;
      }
    s.objects.push_back(ObjectRecord::make(std::move(m), cat, H, W));
  }
  s.relations = std::move(rels);
  return s;
}

UNetConfig small_unet_cfg(std::size_t hw) {
  UNetConfig c;
  c.channels = 2;
  c.height = hw;
  c.width = hw;
  c.level_widths = {4, 6};
  c.d_cond = 8;
  c.d_time = 4;
  return c;
}

CaptionerConfig small_cap_cfg(std::size_t hw) {
  CaptionerConfig c;
  c.channels = 2;
  c.height = hw;
  c.width = hw;
  c.d_embed = 8;
  c.hidden = 10;
  c.n_tok = 3;
  c.d_out = 8;
  return c;
}

SceneConfig small_scene_cfg() {
  SceneConfig c;
  c.channels = 2;
  c.height = 16;
  c.width = 16;
  c.n_objects_min = 2;
  c.n_objects_max = 3;
  c.n_obj_categories = 4;
  return c;
}

}  // namespace

TEST_CASE("prompt tokens: one triplet gives subject, predicate, object", "[calibration]") {
  TextEmbedder emb = tiny_embedder();
  Scene s = tiny_scene({{2, {1, 1}}, {0, {5, 5}}}, {{0, kLeftOf, 1}});
  Tensor tok = build_prompt_tokens(s, emb);
  REQUIRE(tok.shape() == Shape{3, 8});
  Tensor sub = emb.object_embedding(2), prd = emb.predicate_embedding(kLeftOf),
         obj = emb.object_embedding(0);
  for (std::size_t j = 0; j < 8; ++j) {
    REQUIRE(tok.at(0, j) == sub.at(0, j));
    REQUIRE(tok.at(1, j) == prd.at(0, j));
    REQUIRE(tok.at(2, j) == obj.at(0, j));
  }
}

TEST_CASE("prompt tokens: two triplets keep annotation order", "[calibration]") {
  TextEmbedder emb = tiny_embedder();
  Scene s = tiny_scene({{1, {1, 1}}, {3, {5, 5}}}, {{0, kAbove, 1}, {1, kNear, 0}});
  Tensor tok = build_prompt_tokens(s, emb);
  REQUIRE(tok.shape() == Shape{6, 8});
  Tensor expect = concat({emb.object_embedding(1), emb.predicate_embedding(kAbove),
                          emb.object_embedding(3), emb.object_embedding(3),
                          emb.predicate_embedding(kNear), emb.object_embedding(1)},
                         0);
  for (std::size_t i = 0; i < tok.size(); ++i) REQUIRE(tok.data()[i] == expect.data()[i]);
}

TEST_CASE("prompt tokens: no relations falls back to object prompts", "[calibration]") {
  TextEmbedder emb = tiny_embedder();
  Scene s = tiny_scene({{3, {1, 1}}, {1, {5, 5}}}, {});
  Tensor tok = build_prompt_tokens(s, emb);
  REQUIRE(tok.shape() == Shape{2, 8});
  for (std::size_t j = 0; j < 8; ++j) {
    REQUIRE(tok.at(0, j) == emb.object_embedding(3).at(0, j));
    REQUIRE(tok.at(1, j) == emb.object_embedding(1).at(0, j));
  }
}

TEST_CASE("prompt tokens: unknown category is a vocab error", "[calibration]") {
  TextEmbedder emb = tiny_embedder();
  Scene s = tiny_scene({{9, {1, 1}}, {1, {5, 5}}}, {{0, kNear, 1}});
  REQUIRE_THROWS_AS(build_prompt_tokens(s, emb), VocabError);
}

TEST_CASE("pad_tokens pads with the dedicated token and truncates", "[calibration]") {
  TextEmbedder emb = tiny_embedder();
  Scene s = tiny_scene({{0, {1, 1}}, {1, {5, 5}}}, {{0, kNear, 1}});
  Tensor three = build_prompt_tokens(s, emb);

  Tensor five = pad_tokens(three, 5, emb);
  REQUIRE(five.shape() == Shape{5, 8});
  Tensor pad = emb.pad_embedding();
  for (std::size_t i = 3; i < 5; ++i)
    for (std::size_t j = 0; j < 8; ++j) REQUIRE(five.at(i, j) == pad.at(0, j));

  Tensor same = pad_tokens(three, 3, emb);
  for (std::size_t i = 0; i < same.size(); ++i) REQUIRE(same.data()[i] == three.data()[i]);

  Tensor two = pad_tokens(three, 2, emb);
  REQUIRE(two.shape() == Shape{2, 8});
  for (std::size_t j = 0; j < 8; ++j) REQUIRE(two.at(1, j) == three.at(1, j));
}

TEST_CASE("calibration loss frozen arithmetic", "[calibration]") {
  Tensor a = Tensor::zeros({2, 2});
  Tensor b = Tensor::filled({2, 2}, 0.5);
  REQUIRE(calibration_loss({b}, {b}, 1.0).item() == 0.0);
  REQUIRE(calibration_loss({a}, {b}, 1.0).item() == Catch::Approx(0.5).margin(1e-15));
  REQUIRE(calibration_loss({a}, {b}, 2.0).item() == Catch::Approx(1.0).margin(1e-15));
  // two layers average the per-layer terms
  REQUIRE(calibration_loss({a, b}, {b, b}, 1.0).item() == Catch::Approx(0.25).margin(1e-15));
  REQUIRE_THROWS_AS(calibration_loss({a}, {Tensor::zeros({2, 3})}, 1.0), ContractError);
  REQUIRE_THROWS_AS(calibration_loss({}, {}, 1.0), ContractError);
}

TEST_CASE("teacher capture is deterministic and row-stochastic", "[calibration]") {
  UNetLite teacher(small_unet_cfg(8), 301);
  NoiseSchedule sched = linear_beta_schedule(5);
  Rng rng(303);
  Tensor grid = Tensor::randn({2, 8, 8}, rng);
  Tensor cond = Tensor::randn({3, 8}, rng);

  TeacherCapture c1 = teacher_attention(grid, teacher, cond, sched, 2);
  TeacherCapture c2 = teacher_attention(grid, teacher, cond, sched, 2);
  REQUIRE(c1.maps.size() == 2);
  REQUIRE(c1.t == 2);
  for (std::size_t l = 0; l < c1.maps.size(); ++l) {
    REQUIRE(c1.maps[l].shape() == c2.maps[l].shape());
    for (std::size_t i = 0; i < c1.maps[l].size(); ++i)
      REQUIRE(c1.maps[l].data()[i] == c2.maps[l].data()[i]);
  }
  for (std::size_t i = 0; i < c1.eval_point.size(); ++i)
    REQUIRE(c1.eval_point.data()[i] == c2.eval_point.data()[i]);

  // step 0 captures at the data end: the eval point is the grid itself
  TeacherCapture c0 = teacher_attention(grid, teacher, cond, sched, 0);
  for (std::size_t i = 0; i < grid.size(); ++i)
    REQUIRE(c0.eval_point.data()[i] == grid.data()[i]);

  for (const auto& m : c1.maps) {
    const std::size_t rows = m.dim(0), cols = m.dim(1);
    for (std::size_t r = 0; r < rows; ++r) {
      double s = 0.0;
      for (std::size_t c = 0; c < cols; ++c) s += m.at(r, c);
      REQUIRE(s == Catch::Approx(1.0).margin(1e-12));
    }
  }
}

TEST_CASE("single prompt token gives all-ones attention columns", "[calibration]") {
  UNetLite teacher(small_unet_cfg(8), 307);
  NoiseSchedule sched = linear_beta_schedule(4);
  Rng rng(311);
  Tensor grid = Tensor::randn({2, 8, 8}, rng);
  Tensor cond = Tensor::randn({1, 8}, rng);
  TeacherCapture cap = teacher_attention(grid, teacher, cond, sched, 1);
  for (const auto& m : cap.maps) {
    REQUIRE(m.dim(1) == 1);
    for (double v : m.data()) REQUIRE(v == 1.0);
  }
}

TEST_CASE("teacher maps stay row-stochastic across random scenes", "[calibration]") {
  SceneConfig scfg = small_scene_cfg();
  UNetLite teacher(small_unet_cfg(16), 313);
  TextEmbedder emb = tiny_embedder();
  NoiseSchedule sched = linear_beta_schedule(4);
  std::size_t checked = 0;
  for (std::size_t i = 0; i < 50; ++i) {
    Scene s = generate_scene(child_seed(999, i), scfg);
    Tensor cond = pad_tokens(build_prompt_tokens(s, emb), 3, emb);
    const std::size_t step = i % 4;
    TeacherCapture cap = teacher_attention(s.grid, teacher, cond, sched, step);
    for (const auto& m : cap.maps) {
      for (std::size_t r = 0; r < m.dim(0); ++r) {
        double sum = 0.0;
        for (std::size_t c = 0; c < m.dim(1); ++c) sum += m.at(r, c);
        REQUIRE(sum == Catch::Approx(1.0).margin(1e-12));
        ++checked;
      }
    }
  }
  REQUIRE(checked > 1000);
}

TEST_CASE("calibration loss gradients reach lora factors and adapter", "[calibration][gradcheck]") {
  UNetLite net(small_unet_cfg(8), 317);
  ImplicitCaptioner cap(small_cap_cfg(8), 319);
  Rng rng(331);
  Tensor grid = Tensor::randn({2, 8, 8}, rng);

  // frozen target maps from a differently seeded teacher
  UNetLite teacher(small_unet_cfg(8), 337);
  Tensor tcond = Tensor::randn({3, 8}, rng);
  std::vector<Tensor> target;
  {
    NoGradGuard ng;
    for (auto& m : teacher.forward(grid, 1, tcond, true).maps) target.push_back(m.detached());
  }

  LoraSet lora;
  Rng lrng(347);
  for (std::size_t l = 0; l < net.n_levels(); ++l) {
    CrossLora cl;
    cl.k = LoraLayer::init(net.level_Wk(l), 2, lrng);
    cl.v = LoraLayer::init(net.level_Wv(l), 2, lrng);
    for (auto& v : cl.k.D.mutable_data()) v = lrng.normal() * 0.05;
    for (auto& v : cl.v.D.mutable_data()) v = lrng.normal() * 0.05;
    lora.push_back(std::move(cl));
  }
  net.set_lora(&lora);

  std::vector<Tensor> params;
  for (auto& cl : lora) {
    params.push_back(cl.k.B);
    params.push_back(cl.k.D);
    params.push_back(cl.v.B);
    params.push_back(cl.v.D);
  }
  for (auto& [name, t] : cap.adapter_parameters()) params.push_back(t);

  auto f = [&]() {
    Tensor cond = cap.tokens(grid);
    UNetOutput out = net.forward(grid, 1, cond, true);
    return calibration_loss(out.maps, target, 1.0);
  };
  auto rep = finite_diff_check(f, params, 1e-3, 1e-4, 10, 3);
  INFO("max rel error " << rep.max_rel_error << " at " << rep.worst);
  REQUIRE(rep.pass);
  net.set_lora(nullptr);
}

TEST_CASE("lr=0 leaves every parameter bit-identical", "[calibration]") {
  SceneConfig scfg = small_scene_cfg();
  std::vector<Scene> scenes;
  for (std::size_t i = 0; i < 2; ++i) scenes.push_back(generate_scene(child_seed(51, i), scfg));

  UNetLite teacher(small_unet_cfg(16), 401), student(small_unet_cfg(16), 402);
  ImplicitCaptioner cap(small_cap_cfg(16), 403);
  TextEmbedder emb = tiny_embedder();

  CalibrationConfig ccfg;
  ccfg.steps = 3;
  ccfg.lr = 0.0;
  ccfg.T = 4;
  ccfg.log_every = 0;

  auto before_adapter = cap.adapter_parameters();
  std::vector<std::uint64_t> adapter_sums;
  for (auto& [n, t] : before_adapter) adapter_sums.push_back(tensor_checksum(t));

  CalibrationResult res = calibrate(student, cap, teacher, emb, scenes, ccfg);

  REQUIRE(res.base_checksums_before == res.base_checksums_after);
  auto after_adapter = cap.adapter_parameters();
  for (std::size_t i = 0; i < after_adapter.size(); ++i)
    REQUIRE(tensor_checksum(after_adapter[i].second) == adapter_sums[i]);
  for (auto& cl : res.lora) {
    for (double v : cl.k.D.data()) REQUIRE(v == 0.0);
    for (double v : cl.v.D.data()) REQUIRE(v == 0.0);
  }
  REQUIRE(res.loss_curve.size() == 4);
  for (double v : res.loss_curve) REQUIRE(std::isfinite(v));
  REQUIRE(res.loss_curve.front() == Catch::Approx(res.loss_curve.back()).margin(1e-12));
}

TEST_CASE("zero-step calibration reproduces the teacher exactly", "[calibration]") {
  SceneConfig scfg = small_scene_cfg();
  std::vector<Scene> scenes{generate_scene(61, scfg)};
  UNetLite teacher(small_unet_cfg(16), 404), student(small_unet_cfg(16), 405);
  ImplicitCaptioner cap(small_cap_cfg(16), 406);
  TextEmbedder emb = tiny_embedder();

  CalibrationConfig ccfg;
  ccfg.steps = 0;
  ccfg.T = 4;
  ccfg.log_every = 0;
  CalibrationResult res = calibrate(student, cap, teacher, emb, scenes, ccfg);
  REQUIRE(res.loss_curve.size() == 1);

  // student base was copied and D is still zero: forwards agree bit-for-bit
  student.set_lora(&res.lora);
  Rng rng(407);
  Tensor x = Tensor::randn({2, 16, 16}, rng);
  Tensor cond = Tensor::randn({3, 8}, rng);
  Tensor es = student.forward(x, 2, cond).eps;
  Tensor et = teacher.forward(x, 2, cond).eps;
  for (std::size_t i = 0; i < es.size(); ++i) REQUIRE(es.data()[i] == et.data()[i]);
  student.set_lora(nullptr);
}

TEST_CASE("short calibration run lowers the loss and freezes the base", "[calibration]") {
  SceneConfig scfg = small_scene_cfg();
  std::vector<Scene> scenes;
  for (std::size_t i = 0; i < 4; ++i) scenes.push_back(generate_scene(child_seed(71, i), scfg));

  UNetLite teacher(small_unet_cfg(16), 411), student(small_unet_cfg(16), 412);
  ImplicitCaptioner cap(small_cap_cfg(16), 413);
  TextEmbedder emb = tiny_embedder();

  CalibrationConfig ccfg;
  ccfg.steps = 80;
  ccfg.lr = 0.3;
  ccfg.T = 4;
  ccfg.log_every = 0;
  CalibrationResult res = calibrate(student, cap, teacher, emb, scenes, ccfg);

  REQUIRE(res.loss_curve.size() == 81);
  for (double v : res.loss_curve) REQUIRE(std::isfinite(v));
  REQUIRE(res.final_loss() < res.initial_loss());
  REQUIRE(res.base_checksums_before == res.base_checksums_after);
  REQUIRE(res.lora.size() == student.n_levels());
  for (auto& cl : res.lora) {
    auto sv = singular_values(cl.k.delta());
    std::size_t above = 0;
    for (double s : sv)
      if (s > 1e-8) ++above;
    REQUIRE(above <= ccfg.lora_rank);
  }
}

TEST_CASE("no-lora ablation trains the raw projections", "[calibration]") {
  SceneConfig scfg = small_scene_cfg();
  std::vector<Scene> scenes;
  for (std::size_t i = 0; i < 2; ++i) scenes.push_back(generate_scene(child_seed(81, i), scfg));

  UNetLite teacher(small_unet_cfg(16), 421), student(small_unet_cfg(16), 422);
  ImplicitCaptioner cap(small_cap_cfg(16), 423);
  TextEmbedder emb = tiny_embedder();

  CalibrationConfig ccfg;
  ccfg.steps = 10;
  ccfg.lr = 0.3;
  ccfg.T = 4;
  ccfg.use_lora = false;
  ccfg.log_every = 0;
  CalibrationResult res = calibrate(student, cap, teacher, emb, scenes, ccfg);

  REQUIRE(res.lora.empty());
  for (double v : res.loss_curve) REQUIRE(std::isfinite(v));
  // W_k / W_v moved, everything else stayed frozen
  bool any_proj_moved = false;
  for (auto& [name, before] : res.base_checksums_before) {
    const auto after = res.base_checksums_after.at(name);
    const bool is_proj =
        name.find("W_k") != std::string::npos || name.find("W_v") != std::string::npos;
    if (is_proj && after != before) any_proj_moved = true;
    if (!is_proj) REQUIRE(after == before);
  }
  REQUIRE(any_proj_moved);
}

TEST_CASE("no-inversion ablation captures maps at a gaussian latent", "[calibration]") {
  SceneConfig scfg = small_scene_cfg();
  std::vector<Scene> scenes{generate_scene(91, scfg)};
  UNetLite teacher(small_unet_cfg(16), 431), student(small_unet_cfg(16), 432);
  ImplicitCaptioner cap(small_cap_cfg(16), 433);
  TextEmbedder emb = tiny_embedder();

  CalibrationConfig ccfg;
  ccfg.steps = 5;
  ccfg.lr = 0.1;
  ccfg.T = 4;
  ccfg.use_inversion = false;
  ccfg.log_every = 0;
  CalibrationResult res = calibrate(student, cap, teacher, emb, scenes, ccfg);
  for (double v : res.loss_curve) REQUIRE(std::isfinite(v));
  REQUIRE(res.loss_curve.size() == 6);
  REQUIRE(res.base_checksums_before == res.base_checksums_after);
}

TEST_CASE("poisoned weights abort calibration with a numeric error", "[calibration]") {
  SceneConfig scfg = small_scene_cfg();
  std::vector<Scene> scenes{generate_scene(95, scfg)};
  UNetLite teacher(small_unet_cfg(16), 441), student(small_unet_cfg(16), 442);
  ImplicitCaptioner cap(small_cap_cfg(16), 443);
  TextEmbedder emb = tiny_embedder();

  auto adapter = cap.adapter_parameters();
  adapter.front().second.mutable_data()[0] = std::numeric_limits<double>::quiet_NaN();

  CalibrationConfig ccfg;
  ccfg.steps = 2;
  ccfg.T = 2;
  ccfg.log_every = 0;
  REQUIRE_THROWS_AS(calibrate(student, cap, teacher, emb, scenes, ccfg), NumericError);
}
