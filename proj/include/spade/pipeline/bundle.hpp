#pragma once

#include <algorithm>
#include <cstdint>
#include <map>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "spade/core/checkpoint.hpp"
#include "spade/data/dataset_io.hpp"
#include "spade/diffusion/unet_lite.hpp"
#include "spade/graph/rgt.hpp"
#include "spade/model/calibration.hpp"
#include "spade/model/captioner.hpp"
#include "spade/model/decoders.hpp"
#include "spade/model/lora.hpp"
#include "spade/model/ov_head.hpp"
#include "spade/model/text_embed.hpp"
#include "spade/pipeline/config.hpp"

namespace spade {

// Vocabulary the training losses may see. Evaluation always classifies
// against the full vocabulary regardless of mode.
inline ClassView class_view_for(const std::string& filter_mode, const VocabSplit& split,
                                std::size_t n_categories) {
  if (filter_mode == "closed") return ClassView::full(n_categories);
  ClassView v;
  if (filter_mode == "OvR") {
    for (std::size_t c = 0; c < n_categories; ++c) v.object_ids.push_back(static_cast<int>(c));
  } else if (filter_mode == "OvD+R") {
    v.object_ids = split.base_objects;
    std::sort(v.object_ids.begin(), v.object_ids.end());
  } else {
    throw ContractError("unknown filter_mode '" + filter_mode + "'");
  }
  v.predicate_ids = split.base_predicates;
  std::sort(v.predicate_ids.begin(), v.predicate_ids.end());
  if (v.object_ids.empty() || v.predicate_ids.empty())
    throw ContractError("vocabulary split leaves an empty training view");
  return v;
}

namespace detail {

inline void copy_named(const Checkpoint& ck, const std::string& name, Tensor dst) {
  const Tensor& src = ck.get(name);
  if (src.shape() != dst.shape())
    throw ContractError("checkpoint tensor '" + name + "' has shape " + shape_str(src.shape()) +
                        ", model expects " + shape_str(dst.shape()));
  dst.mutable_data() = src.data();
}

inline Tensor hash_tensor(std::uint64_t h) {
  Tensor t = Tensor::zeros({2});
  t.mutable_data()[0] = static_cast<double>(h >> 32);
  t.mutable_data()[1] = static_cast<double>(h & 0xffffffffULL);
  return t;
}

inline std::uint64_t hash_from_tensor(const Tensor& t) {
  if (t.size() != 2) throw ContractError("malformed config hash record");
  return (static_cast<std::uint64_t>(t.data()[0]) << 32) |
         static_cast<std::uint64_t>(t.data()[1]);
}

inline Tensor ids_tensor(const std::vector<int>& ids) {
  Tensor t = Tensor::zeros({std::max<std::size_t>(ids.size(), 1)});
  if (ids.empty()) {
    t.mutable_data()[0] = -1.0;
  } else {
    for (std::size_t i = 0; i < ids.size(); ++i) t.mutable_data()[i] = ids[i];
  }
  return t;
}

inline std::vector<int> ids_from_tensor(const Tensor& t) {
  std::vector<int> out;
  for (double v : t.data()) {
    if (v < 0) continue;  // padding sentinel for an empty list
    out.push_back(static_cast<int>(v));
  }
  return out;
}

}  // namespace detail

// Everything a trained model is: the calibrated denoiser (base plus LoRA
// residuals), the captioner, the relation stack, the decoders, and the prompt
// bank, tied to the configuration hash they were built under. The student
// keeps a pointer to the bundle's LoRA set, so the bundle is pinned in place.
class ModelBundle {
public:
  ModelBundle(const RunConfig& cfg, const VocabSplit& split)
      : cfg_(checked(cfg)),
        hash_(config_hash(cfg)),
        split_(split),
        embedder_(cfg.d, cfg.channels, cfg.n_obj_categories, cfg.signature_seed,
                  child_seed(cfg.model_seed, 1)),
        teacher_(unet_config(cfg), cfg.teacher_seed),
        student_(unet_config(cfg), cfg.student_seed),
        captioner_(captioner_config(cfg), cfg.captioner_seed),
        decoders_(DecoderStack::init(decoder_config(cfg), child_seed(cfg.model_seed, 2))),
        rgt_(RgtStack::init(rgt_config(cfg), child_seed(cfg.model_seed, 3))),
        view_(class_view_for(cfg.filter_mode, split, cfg.n_obj_categories)),
        bank_(PromptBank::init(embedder_, view_, cfg.tau_init, child_seed(cfg.model_seed, 4))) {}

  ModelBundle(const ModelBundle&) = delete;
  ModelBundle& operator=(const ModelBundle&) = delete;

  static RunConfig checked(RunConfig cfg) {
    cfg.validate();
    return cfg;
  }

  static UNetConfig unet_config(const RunConfig& cfg) {
    UNetConfig u;
    u.channels = cfg.channels;
    u.height = cfg.grid;
    u.width = cfg.grid;
    u.d_cond = cfg.d;
    return u;
  }
  static CaptionerConfig captioner_config(const RunConfig& cfg) {
    CaptionerConfig c;
    c.channels = cfg.channels;
    c.height = cfg.grid;
    c.width = cfg.grid;
    c.d_embed = cfg.cap_embed;
    c.hidden = cfg.cap_hidden;
    c.n_tok = cfg.cap_tokens;
    c.d_out = cfg.d;
    return c;
  }
  static DecoderConfig decoder_config(const RunConfig& cfg) {
    DecoderConfig d;
    d.d = cfg.d;
    d.n_queries = cfg.n_queries;
    d.n_layers = cfg.decoder_layers;
    d.ffn_hidden = cfg.ffn_hidden;
    d.f_channels = unet_config(cfg).pyramid_channels();
    d.token_stride = cfg.token_stride;
    return d;
  }
  static RgtConfig rgt_config(const RunConfig& cfg) {
    RgtConfig r;
    r.d = cfg.d;
    r.n_blocks = cfg.rgt_blocks;
    r.mode = cfg.rgt_mode == "literal" ? RgtMode::kLiteral : RgtMode::kSetAttention;
    r.sem_threshold = cfg.sem_threshold;
    r.eta = cfg.eta;
    r.use_neighbor_attention = cfg.use_neighbor_attention;
    r.use_nonneighbor_attention = cfg.use_nonneighbor_attention;
    r.use_gcn = cfg.use_gcn;
    return r;
  }

  const RunConfig& cfg() const { return cfg_; }
  std::uint64_t hash() const { return hash_; }
  const VocabSplit& split() const { return split_; }
  const TextEmbedder& embedder() const { return embedder_; }
  UNetLite& teacher() { return teacher_; }
  UNetLite& student() { return student_; }
  ImplicitCaptioner& captioner() { return captioner_; }
  DecoderStack& decoders() { return decoders_; }
  RgtStack& rgt() { return rgt_; }
  const ClassView& view() const { return view_; }
  PromptBank& bank() { return bank_; }
  LoraSet& lora() { return lora_; }

  // Replaces the LoRA set and points the student at it.
  void adopt_lora(LoraSet lora) {
    student_.set_lora(nullptr);
    lora_ = std::move(lora);
    if (!lora_.empty()) student_.set_lora(&lora_);
  }

  // Classifier bank over the full vocabulary, sharing the learned temperature
  // and no-relation row with the training bank.
  PromptBank full_bank() const {
    PromptBank b;
    b.objects = embedder_.object_bank();
    b.predicates = embedder_.predicate_bank();
    b.no_relation = bank_.no_relation;
    b.log_tau = bank_.log_tau;
    return b;
  }

  // ---- parameter grouping -------------------------------------------------

  std::vector<std::pair<std::string, Tensor>> lora_named() const {
    std::vector<std::pair<std::string, Tensor>> out;
    for (std::size_t l = 0; l < lora_.size(); ++l) {
      const std::string p = "lora.l" + std::to_string(l) + ".";
      out.emplace_back(p + "k.B", lora_[l].k.B);
      out.emplace_back(p + "k.D", lora_[l].k.D);
      out.emplace_back(p + "v.B", lora_[l].v.B);
      out.emplace_back(p + "v.D", lora_[l].v.D);
    }
    return out;
  }

  // Tensors the second stage updates.
  std::vector<std::pair<std::string, Tensor>> stage2_trainable() const {
    std::vector<std::pair<std::string, Tensor>> out;
    for (auto& nt : decoders_.parameters()) out.push_back(nt);
    for (auto& nt : rgt_.parameters()) out.push_back(nt);
    for (auto& nt : bank_.parameters()) out.push_back(nt);
    for (auto& nt : captioner_.pixel_head_parameters()) out.push_back(nt);
    if (!cfg_.freeze_backbone) {
      for (auto& [n, t] : student_.parameters()) out.emplace_back("student." + n, t);
      for (auto& nt : lora_named()) out.push_back(nt);
      for (auto& nt : captioner_.trunk_parameters()) out.push_back(nt);
    }
    return out;
  }

  // Tensors the second stage must never touch; checksummed every epoch.
  std::vector<std::pair<std::string, Tensor>> stage2_frozen() const {
    std::vector<std::pair<std::string, Tensor>> out;
    if (cfg_.freeze_backbone) {
      for (auto& [n, t] : student_.parameters()) out.emplace_back("student." + n, t);
      for (auto& nt : lora_named()) out.push_back(nt);
      for (auto& nt : captioner_.trunk_parameters()) out.push_back(nt);
    }
    for (auto& nt : captioner_.frozen_parameters()) out.push_back(nt);
    out.emplace_back("embedder.objects", embedder_.object_bank());
    out.emplace_back("embedder.predicates", embedder_.predicate_bank());
    out.emplace_back("ov.objects", bank_.objects);
    out.emplace_back("ov.predicates", bank_.predicates);
    return out;
  }

  void set_stage2_trainable(bool on) {
    for (auto& [n, t] : stage2_trainable()) {
      Tensor h = t;
      h.set_requires_grad(on);
    }
    if (!on) return;
    for (auto& [n, t] : stage2_frozen()) {
      Tensor h = t;
      h.set_requires_grad(false);
    }
  }

  // ---- persistence --------------------------------------------------------
  // Calibration checkpoints carry the first-stage result (denoiser base,
  // LoRA factors, captioner adapter); full checkpoints add the second-stage
  // modules and the training vocabulary view.

  void save_calibration(const std::string& path) const {
    Checkpoint ck;
    put_meta(ck);
    put_stage1(ck);
    ck.save(path);
  }

  void save(const std::string& path) const {
    Checkpoint ck;
    put_meta(ck);
    put_stage1(ck);
    for (auto& nt : decoders_.parameters()) ck.put(nt.first, nt.second);
    for (auto& nt : rgt_.parameters()) ck.put(nt.first, nt.second);
    for (auto& nt : bank_.parameters()) ck.put(nt.first, nt.second);
    ck.put("meta.view_objects", detail::ids_tensor(view_.object_ids));
    ck.put("meta.view_predicates", detail::ids_tensor(view_.predicate_ids));
    ck.save(path);
  }

  void load_calibration(const std::string& path, bool allow_hash_mismatch = false) {
    Checkpoint ck = Checkpoint::load(path);
    check_meta(ck, path, allow_hash_mismatch);
    take_stage1(ck);
  }

  void load(const std::string& path, bool allow_hash_mismatch = false) {
    Checkpoint ck = Checkpoint::load(path);
    check_meta(ck, path, allow_hash_mismatch);
    take_stage1(ck);
    if (ck.contains("meta.view_objects")) {
      ClassView v;
      v.object_ids = detail::ids_from_tensor(ck.get("meta.view_objects"));
      v.predicate_ids = detail::ids_from_tensor(ck.get("meta.view_predicates"));
      if (v.object_ids.empty() || v.predicate_ids.empty())
        throw ContractError("checkpoint carries an empty vocabulary view");
      view_ = v;
      bank_ = PromptBank::init(embedder_, view_, cfg_.tau_init, child_seed(cfg_.model_seed, 4));
    }
    for (auto& nt : decoders_.parameters()) detail::copy_named(ck, nt.first, nt.second);
    for (auto& nt : rgt_.parameters()) detail::copy_named(ck, nt.first, nt.second);
    for (auto& nt : bank_.parameters()) detail::copy_named(ck, nt.first, nt.second);
  }

private:
  void put_meta(Checkpoint& ck) const {
    ck.put("meta.config_hash", detail::hash_tensor(hash_));
    Tensor r = Tensor::zeros({1});
    r.mutable_data()[0] = lora_.empty() ? 0.0 : static_cast<double>(lora_.front().k.rank);
    ck.put("meta.lora_rank", r);
  }

  void put_stage1(Checkpoint& ck) const {
    for (auto& [n, t] : student_.parameters()) ck.put("student." + n, t);
    for (auto& nt : lora_named()) ck.put(nt.first, nt.second);
    for (auto& nt : captioner_.adapter_parameters()) ck.put(nt.first, nt.second);
  }

  void check_meta(const Checkpoint& ck, const std::string& path, bool allow) const {
    const std::uint64_t stored = detail::hash_from_tensor(ck.get("meta.config_hash"));
    if (stored == hash_ || allow) return;
    std::ostringstream os;
    os << "checkpoint " << path << " was written under config hash " << std::hex << stored
       << " but the current config hashes to " << hash_
       << "; pass --force-config to load it anyway";
    throw ContractError(os.str());
  }

  void take_stage1(const Checkpoint& ck) {
    for (auto& [n, t] : student_.parameters()) detail::copy_named(ck, "student." + n, t);
    const std::size_t rank =
        static_cast<std::size_t>(ck.get("meta.lora_rank").data()[0]);
    if (rank == 0) {
      adopt_lora({});
    } else {
      LoraSet ls;
      Rng rng(child_seed(cfg_.noise_seed, 0xB0DA));
      for (std::size_t l = 0; l < student_.n_levels(); ++l) {
        CrossLora cl;
        cl.k = LoraLayer::init(student_.level_Wk(l), rank, rng);
        cl.v = LoraLayer::init(student_.level_Wv(l), rank, rng);
        ls.push_back(std::move(cl));
      }
      adopt_lora(std::move(ls));
      for (auto& nt : lora_named()) detail::copy_named(ck, nt.first, nt.second);
    }
    for (auto& nt : captioner_.adapter_parameters()) detail::copy_named(ck, nt.first, nt.second);
  }

  RunConfig cfg_;
  std::uint64_t hash_ = 0;
  VocabSplit split_;
  TextEmbedder embedder_;
  UNetLite teacher_, student_;
  LoraSet lora_;
  ImplicitCaptioner captioner_;
  DecoderStack decoders_;
  RgtStack rgt_;
  ClassView view_;
  PromptBank bank_;
};

}  // namespace spade
