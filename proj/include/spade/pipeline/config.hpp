#pragma once

#include <cstdint>
#include <fstream>
#include <set>
#include <sstream>
#include <string>

#include "json.hpp"
#include "spade/core/checkpoint.hpp"
#include "spade/core/errors.hpp"
#include "spade/data/scene_synth.hpp"

namespace spade {

using nlohmann::json;

// ---------------------------------------------------------------------------
// One flat configuration document drives every command. All values are echoed
// into every output artifact; unknown keys in an input file are rejected so a
// typo cannot silently fall back to a default.
// ---------------------------------------------------------------------------
struct RunConfig {
  // seeds
  std::uint64_t data_seed = 20260818;
  std::uint64_t split_seed = 424242;
  std::uint64_t teacher_seed = 1001;
  std::uint64_t student_seed = 1002;
  std::uint64_t captioner_seed = 1003;
  std::uint64_t model_seed = 7;  // decoders, relation stack, prompt bank
  std::uint64_t noise_seed = 0x9e3779b97f4a7c15ULL;
  std::uint64_t signature_seed = 0x51474e41ULL;

  // scene generation
  std::size_t n_train = 1000;
  std::size_t n_test = 200;
  std::size_t channels = 3;
  std::size_t grid = 32;  // square grids
  std::size_t n_obj_categories = 10;
  std::size_t n_objects_min = 2;
  std::size_t n_objects_max = 4;
  double noise_sigma = 0.05;
  bool balanced_bands = true;

  // diffusion schedule and first-stage calibration
  std::size_t T = 10;
  std::size_t capture_step = 5;  // inversion depth of the teacher capture
  std::size_t calib_steps = 500;
  std::size_t calib_scenes = 16;
  double calib_lr = 10.0;
  double calib_momentum = 0.9;
  double lambda_cal = 1.0;
  std::size_t lora_rank = 4;

  // model dims
  std::size_t d = 32;  // shared width: conditioning, queries, prompts
  std::size_t n_queries = 8;
  std::size_t rgt_blocks = 8;
  std::size_t decoder_layers = 3;
  std::size_t ffn_hidden = 64;
  std::size_t token_stride = 2;
  std::size_t cap_tokens = 6;
  std::size_t cap_hidden = 48;
  std::size_t cap_embed = 24;

  // loss and selection hyperparameters
  double alpha = 0.34;
  double eta = 0.65;
  double lambda_rqc = 0.6;
  double lambda_mask = 1.0;
  double sem_threshold = 0.5;
  double tau_init = 10.0;

  // second-stage training
  std::size_t epochs = 2;
  double lr = 0.001;  // larger rates let the mask loss feed back on itself and diverge
  double momentum = 0.9;

  // vocabulary split mode: closed | OvR | OvD+R
  std::string filter_mode = "closed";

  // ablation switches
  bool use_neighbor_attention = true;
  bool use_nonneighbor_attention = true;
  bool use_gcn = true;
  bool use_rqc = true;
  std::string rgt_mode = "set";  // set | literal
  std::string fusion = "both";   // both | query-only | pooled-only
  bool use_lora = true;
  bool use_inversion = true;
  bool no_calibration = false;
  bool freeze_backbone = true;

  // paths
  std::string data_dir = "data";
  std::string out_dir = "runs";
  std::string calibration_ckpt = "";

  void validate() const {
    if (grid < 8 || grid % 8 != 0)
      throw ContractError("RunConfig: grid must be a multiple of 8, got " + std::to_string(grid));
    if (channels < 1) throw ContractError("RunConfig: channels must be >= 1");
    if (n_objects_min < 1 || n_objects_max < n_objects_min)
      throw ContractError("RunConfig: object count range is empty");
    if (alpha < 0.0 || alpha > 1.0) throw ContractError("RunConfig: alpha must lie in [0, 1]");
    if (eta <= -1.0 || eta >= 1.0) throw ContractError("RunConfig: eta must lie in (-1, 1)");
    if (lambda_rqc < 0.0 || lambda_mask < 0.0 || lambda_cal <= 0.0)
      throw ContractError("RunConfig: loss weights must be non-negative (lambda_cal positive)");
    if (!(tau_init > 0.0)) throw ContractError("RunConfig: tau_init must be positive");
    if (n_queries < 1) throw ContractError("RunConfig: need at least one query");
    if (decoder_layers < 1 || ffn_hidden < 1)
      throw ContractError("RunConfig: decoder dims must be positive");
    if (token_stride != 1 && token_stride != 2 && token_stride != 4)
      throw ContractError("RunConfig: token_stride must be 1, 2, or 4");
    if (epochs < 1) throw ContractError("RunConfig: epochs must be >= 1");
    if (lr < 0.0 || momentum < 0.0 || momentum >= 1.0)
      throw ContractError("RunConfig: bad optimizer settings");
    if (filter_mode != "closed" && filter_mode != "OvR" && filter_mode != "OvD+R")
      throw ContractError("RunConfig: filter_mode must be closed, OvR, or OvD+R, got '" +
                          filter_mode + "'");
    if (rgt_mode != "set" && rgt_mode != "literal")
      throw ContractError("RunConfig: rgt_mode must be set or literal, got '" + rgt_mode + "'");
    if (fusion != "both" && fusion != "query-only" && fusion != "pooled-only")
      throw ContractError("RunConfig: fusion must be both, query-only, or pooled-only, got '" +
                          fusion + "'");
    if (T < 1) throw ContractError("RunConfig: schedule length T must be >= 1");
    if (capture_step > T) throw ContractError("RunConfig: capture_step exceeds T");
    if (lora_rank < 1) throw ContractError("RunConfig: lora_rank must be >= 1");
  }

  SceneConfig scene_config() const {
    SceneConfig sc;
    sc.channels = channels;
    sc.height = grid;
    sc.width = grid;
    sc.n_objects_min = n_objects_min;
    sc.n_objects_max = n_objects_max;
    sc.n_obj_categories = n_obj_categories;
    sc.noise_sigma = noise_sigma;
    sc.signature_seed = signature_seed;
    return sc;
  }
};

namespace detail {

// field table: one lambda pair per key keeps to/from JSON in lockstep
template <class Fn>
void for_each_config_field(RunConfig& c, Fn&& fn) {
  fn("data_seed", c.data_seed);
  fn("split_seed", c.split_seed);
  fn("teacher_seed", c.teacher_seed);
  fn("student_seed", c.student_seed);
  fn("captioner_seed", c.captioner_seed);
  fn("model_seed", c.model_seed);
  fn("noise_seed", c.noise_seed);
  fn("signature_seed", c.signature_seed);
  fn("n_train", c.n_train);
  fn("n_test", c.n_test);
  fn("channels", c.channels);
  fn("grid", c.grid);
  fn("n_obj_categories", c.n_obj_categories);
  fn("n_objects_min", c.n_objects_min);
  fn("n_objects_max", c.n_objects_max);
  fn("noise_sigma", c.noise_sigma);
  fn("balanced_bands", c.balanced_bands);
  fn("T", c.T);
  fn("capture_step", c.capture_step);
  fn("calib_steps", c.calib_steps);
  fn("calib_scenes", c.calib_scenes);
  fn("calib_lr", c.calib_lr);
  fn("calib_momentum", c.calib_momentum);
  fn("lambda_cal", c.lambda_cal);
  fn("lora_rank", c.lora_rank);
  fn("d", c.d);
  fn("n_queries", c.n_queries);
  fn("rgt_blocks", c.rgt_blocks);
  fn("decoder_layers", c.decoder_layers);
  fn("ffn_hidden", c.ffn_hidden);
  fn("token_stride", c.token_stride);
  fn("cap_tokens", c.cap_tokens);
  fn("cap_hidden", c.cap_hidden);
  fn("cap_embed", c.cap_embed);
  fn("alpha", c.alpha);
  fn("eta", c.eta);
  fn("lambda_rqc", c.lambda_rqc);
  fn("lambda_mask", c.lambda_mask);
  fn("sem_threshold", c.sem_threshold);
  fn("tau_init", c.tau_init);
  fn("epochs", c.epochs);
  fn("lr", c.lr);
  fn("momentum", c.momentum);
  fn("filter_mode", c.filter_mode);
  fn("use_neighbor_attention", c.use_neighbor_attention);
  fn("use_nonneighbor_attention", c.use_nonneighbor_attention);
  fn("use_gcn", c.use_gcn);
  fn("use_rqc", c.use_rqc);
  fn("rgt_mode", c.rgt_mode);
  fn("fusion", c.fusion);
  fn("use_lora", c.use_lora);
  fn("use_inversion", c.use_inversion);
  fn("no_calibration", c.no_calibration);
  fn("freeze_backbone", c.freeze_backbone);
  fn("data_dir", c.data_dir);
  fn("out_dir", c.out_dir);
  fn("calibration_ckpt", c.calibration_ckpt);
}

}  // namespace detail

inline json config_to_json(const RunConfig& cfg) {
  json j;
  RunConfig copy = cfg;
  detail::for_each_config_field(copy, [&](const char* key, auto& field) { j[key] = field; });
  return j;
}

// Starts from defaults, applies the keys present, and rejects anything that
// is not a known field.
inline RunConfig config_from_json(const json& j) {
  if (!j.is_object()) throw ContractError("config document must be a JSON object");
  RunConfig cfg;
  std::set<std::string> known;
  detail::for_each_config_field(cfg, [&](const char* key, auto&) { known.insert(key); });
  for (const auto& [key, value] : j.items())
    if (!known.count(key)) throw ContractError("config: unknown key '" + key + "'");
  detail::for_each_config_field(cfg, [&](const char* key, auto& field) {
    if (!j.contains(key)) return;
    using F = std::decay_t<decltype(field)>;
    try {
      field = j.at(key).get<F>();
    } catch (const json::exception& e) {
      throw ContractError("config: bad value for '" + std::string(key) + "': " + e.what());
    }
  });
  cfg.validate();
  return cfg;
}

inline RunConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ContractError("cannot open config file: " + path);
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw ParseError(std::string("config: ") + e.what());
  }
  return config_from_json(j);
}

// Content fingerprint of the configuration; names run directories and guards
// checkpoint/config pairing. Filesystem plumbing is excluded so that moving
// artifacts between directories does not change what the config means.
// nlohmann keys serialize sorted, so the dump is canonical.
inline std::uint64_t config_hash(const RunConfig& cfg) {
  json j = config_to_json(cfg);
  j.erase("data_dir");
  j.erase("out_dir");
  j.erase("calibration_ckpt");
  return fnv1a64(j.dump());
}

inline std::string config_hash_hex(const RunConfig& cfg) {
  std::ostringstream os;
  os << std::hex << config_hash(cfg);
  return os.str();
}

}  // namespace spade
