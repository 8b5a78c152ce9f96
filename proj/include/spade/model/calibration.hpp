#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <map>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "spade/core/rng.hpp"
#include "spade/core/tensor.hpp"
#include "spade/data/scene.hpp"
#include "spade/diffusion/ddim.hpp"
#include "spade/diffusion/schedule.hpp"
#include "spade/diffusion/unet_lite.hpp"
#include "spade/model/captioner.hpp"
#include "spade/model/lora.hpp"
#include "spade/model/optim.hpp"
#include "spade/model/text_embed.hpp"

namespace spade {

struct CalibrationConfig {
  std::size_t steps = 500;
  // mean-reduced L1 over softmax maps has tiny per-parameter gradients, so
  // the stable step size is large
  double lr = 10.0;
  double momentum = 0.9;
  double lambda = 1.0;      // weight on each per-layer map term
  std::size_t lora_rank = 4;
  std::size_t T = 10;       // schedule length for teacher inversion
  std::size_t capture_step = 0;  // trajectory step whose maps are matched; 0 = data end
  bool use_lora = true;      // false: train full W_k / W_v instead
  bool use_inversion = true; // false: capture teacher maps at a Gaussian latent
  std::uint64_t noise_seed = 0x9e3779b97f4a7c15ULL;
  std::size_t log_every = 50;  // 0 disables stderr progress lines

  void validate() const {
    if (lr < 0.0) throw ContractError("CalibrationConfig: lr must be >= 0");
    if (momentum < 0.0 || momentum >= 1.0)
      throw ContractError("CalibrationConfig: momentum must be in [0, 1)");
    if (lambda <= 0.0) throw ContractError("CalibrationConfig: lambda must be positive");
    if (lora_rank == 0) throw ContractError("CalibrationConfig: lora_rank must be >= 1");
    if (T == 0) throw ContractError("CalibrationConfig: T must be >= 1");
    if (capture_step > T) throw ContractError("CalibrationConfig: capture_step exceeds T");
  }
};

// Token sequence for one scene: subject/predicate/object embeddings of every
// annotated triplet in annotation order. Scenes without relations fall back
// to one token per object category.
inline Tensor build_prompt_tokens(const Scene& scene, const TextEmbedder& embedder) {
  std::vector<Tensor> rows;
  if (!scene.relations.empty()) {
    rows.reserve(scene.relations.size() * 3);
    for (const auto& rel : scene.relations) {
      rows.push_back(embedder.object_embedding(scene.objects.at(rel.subject).category_id));
      rows.push_back(embedder.predicate_embedding(rel.predicate));
      rows.push_back(embedder.object_embedding(scene.objects.at(rel.object).category_id));
    }
  } else {
    rows.reserve(scene.objects.size());
    for (const auto& obj : scene.objects) rows.push_back(embedder.object_embedding(obj.category_id));
  }
  return concat(rows, 0);
}

// Fixes a token sequence to exactly n_tok rows: truncate, or pad with copies
// of the embedder's dedicated pad token.
inline Tensor pad_tokens(const Tensor& tokens, std::size_t n_tok, const TextEmbedder& embedder) {
  if (tokens.ndim() != 2) throw ContractError("pad_tokens: tokens must be 2-D");
  const std::size_t n = tokens.dim(0);
  if (n == n_tok) return tokens;
  if (n > n_tok) return slice(tokens, 0, 0, n_tok);
  std::vector<Tensor> parts{tokens};
  for (std::size_t i = n; i < n_tok; ++i) parts.push_back(embedder.pad_embedding());
  return concat(parts, 0);
}

// Frozen teacher maps plus the latent they were captured at. The student is
// evaluated at the same point so only the conditioning pathway differs.
struct TeacherCapture {
  std::vector<Tensor> maps;  // one [n_patches, n_cond] map per level, detached
  Tensor eval_point;         // latent the capture forward ran on, detached
  std::size_t t = 0;         // timestep of the capture forward
};

// Runs the inversion trajectory on `grid` under the given conditioning up to
// cfg-selected step s, then captures the cross-attention maps of the denoiser
// evaluation at (x_s, t=s). Step 0 captures at the data end without any
// inversion updates.
inline TeacherCapture teacher_attention(const Tensor& grid, UNetLite& teacher, const Tensor& cond,
                                        const NoiseSchedule& schedule, std::size_t capture_step) {
  if (capture_step > schedule.T) throw ContractError("teacher_attention: capture_step exceeds T");
  NoGradGuard ng;
  Tensor x = grid;
  for (std::size_t t = 1; t <= capture_step; ++t) {
    UNetOutput out = teacher.forward(x, t - 1, cond, false);
    x = ddim_invert_step(x, t, out.eps, schedule);
  }
  UNetOutput cap = teacher.forward(x, capture_step, cond, true);
  TeacherCapture result;
  for (auto& m : cap.maps) result.maps.push_back(m.detached());
  result.eval_point = x.detached();
  result.t = capture_step;
  return result;
}

// L_cal = (1/N) sum_i lambda * mean|A_i - A'_i| over the N per-layer maps.
inline Tensor calibration_loss(const std::vector<Tensor>& student_maps,
                               const std::vector<Tensor>& teacher_maps, double lambda) {
  if (student_maps.empty()) throw ContractError("calibration_loss: no maps");
  if (student_maps.size() != teacher_maps.size())
    throw ContractError("calibration_loss: layer count mismatch");
  Tensor total = Tensor::scalar(0.0);
  for (std::size_t i = 0; i < student_maps.size(); ++i) {
    if (student_maps[i].shape() != teacher_maps[i].shape()) {
      std::ostringstream os;
      os << "calibration_loss: layer " << i << " shape mismatch "
         << shape_str(student_maps[i].shape()) << " vs " << shape_str(teacher_maps[i].shape());
      throw ContractError(os.str());
    }
    Tensor diff = sub(student_maps[i], teacher_maps[i]);
    total = add(total, scale(l1_norm(diff), lambda / static_cast<double>(diff.size())));
  }
  return scale(total, 1.0 / static_cast<double>(student_maps.size()));
}

struct CalibrationResult {
  std::vector<double> loss_curve;  // entry k = batch loss at step k; last entry = final loss
  LoraSet lora;                    // trained factors; empty when use_lora was off
  std::map<std::string, std::uint64_t> base_checksums_before;
  std::map<std::string, std::uint64_t> base_checksums_after;

  double initial_loss() const { return loss_curve.front(); }
  double final_loss() const { return loss_curve.back(); }
};

namespace detail {

inline std::map<std::string, std::uint64_t> checksum_params(
    const std::vector<std::pair<std::string, Tensor>>& named) {
  std::map<std::string, std::uint64_t> out;
  for (const auto& [name, t] : named) out.emplace(name, tensor_checksum(t));
  return out;
}

}  // namespace detail

// Aligns the student's captioner-conditioned cross-attention maps with the
// teacher's prompt-conditioned maps. The student's base weights are copied
// from the teacher up front; only the captioner adapter plus either the LoRA
// factors (default) or the raw W_k/W_v projections receive updates. The
// returned LoraSet owns the trained factors; the student is detached from it
// before returning, so callers re-attach via set_lora on their own copy.
inline CalibrationResult calibrate(UNetLite& student, ImplicitCaptioner& captioner,
                                   UNetLite& teacher, const TextEmbedder& embedder,
                                   const std::vector<Scene>& scenes,
                                   const CalibrationConfig& cfg) {
  cfg.validate();
  if (scenes.empty()) throw ContractError("calibrate: no scenes");
  if (captioner.config().d_out != student.config().d_cond)
    throw ContractError("calibrate: captioner d_out must equal student d_cond");

  student.load_values_from(teacher);
  student.set_trainable(false);
  teacher.set_trainable(false);
  captioner.set_adapter_trainable(true);

  NoiseSchedule schedule = linear_beta_schedule(cfg.T);
  const std::size_t n_tok = captioner.config().n_tok;

  // Teacher maps and evaluation points are frozen, so extract them once.
  std::vector<TeacherCapture> captures;
  captures.reserve(scenes.size());
  {
    NoGradGuard ng;
    Rng noise_root(cfg.noise_seed);
    for (std::size_t i = 0; i < scenes.size(); ++i) {
      const Scene& sc = scenes[i];
      Tensor cond = pad_tokens(build_prompt_tokens(sc, embedder), n_tok, embedder);
      if (cfg.use_inversion) {
        captures.push_back(teacher_attention(sc.grid, teacher, cond, schedule, cfg.capture_step));
      } else {
        Rng noise_rng(child_seed(cfg.noise_seed, i));
        Tensor z = Tensor::randn(sc.grid.shape(), noise_rng, 1.0, false);
        UNetOutput cap = teacher.forward(z, cfg.capture_step, cond, true);
        TeacherCapture tc;
        for (auto& m : cap.maps) tc.maps.push_back(m.detached());
        tc.eval_point = z.detached();
        tc.t = cfg.capture_step;
        captures.push_back(std::move(tc));
      }
    }
  }

  CalibrationResult result;
  result.base_checksums_before = detail::checksum_params(student.parameters());

  std::vector<Tensor> trainables;
  for (auto& [name, t] : captioner.adapter_parameters()) {
    Tensor h = t;
    h.set_requires_grad(true);
    trainables.push_back(h);
  }
  LoraSet lora;
  if (cfg.use_lora) {
    Rng lora_rng(child_seed(cfg.noise_seed, 0xB0DA));
    for (std::size_t l = 0; l < student.n_levels(); ++l) {
      CrossLora cl;
      cl.k = LoraLayer::init(student.level_Wk(l), cfg.lora_rank, lora_rng);
      cl.v = LoraLayer::init(student.level_Wv(l), cfg.lora_rank, lora_rng);
      trainables.push_back(cl.k.B);
      trainables.push_back(cl.k.D);
      trainables.push_back(cl.v.B);
      trainables.push_back(cl.v.D);
      lora.push_back(std::move(cl));
    }
    student.set_lora(&lora);
  } else {
    for (std::size_t l = 0; l < student.n_levels(); ++l) {
      student.level_Wk(l).set_requires_grad(true);
      student.level_Wv(l).set_requires_grad(true);
      trainables.push_back(student.level_Wk(l));
      trainables.push_back(student.level_Wv(l));
    }
  }

  SgdOptimizer opt(trainables, cfg.lr, cfg.momentum);

  auto batch_loss = [&]() -> Tensor {
    Tensor total = Tensor::scalar(0.0);
    for (std::size_t i = 0; i < scenes.size(); ++i) {
      Tensor cond = captioner.tokens(scenes[i].grid);
      UNetOutput out = student.forward(captures[i].eval_point, captures[i].t, cond, true);
      total = add(total, calibration_loss(out.maps, captures[i].maps, cfg.lambda));
    }
    return scale(total, 1.0 / static_cast<double>(scenes.size()));
  };

  for (std::size_t step = 0; step < cfg.steps; ++step) {
    opt.zero_grad();
    Tensor loss = batch_loss();
    const double value = loss.item();
    if (!std::isfinite(value)) {
      std::ostringstream os;
      os << "calibrate: non-finite loss " << value << " at step " << step << " (lr=" << cfg.lr
         << ", lambda=" << cfg.lambda << ")";
      throw NumericError(os.str());
    }
    result.loss_curve.push_back(value);
    if (cfg.log_every != 0 && step % cfg.log_every == 0)
      std::fprintf(stderr, "[calibrate] step %zu loss %.6f\n", step, value);
    backward(loss);
    opt.step();
  }

  {
    NoGradGuard ng;
    Tensor final_loss = batch_loss();
    const double value = final_loss.item();
    if (!std::isfinite(value)) throw NumericError("calibrate: non-finite final loss");
    result.loss_curve.push_back(value);
    if (cfg.log_every != 0)
      std::fprintf(stderr, "[calibrate] final loss %.6f\n", value);
  }

  student.set_lora(nullptr);
  if (!cfg.use_lora) {
    for (std::size_t l = 0; l < student.n_levels(); ++l) {
      student.level_Wk(l).set_requires_grad(false);
      student.level_Wv(l).set_requires_grad(false);
    }
  }
  captioner.set_adapter_trainable(false);
  result.base_checksums_after = detail::checksum_params(student.parameters());
  result.lora = std::move(lora);
  return result;
}

}  // namespace spade
