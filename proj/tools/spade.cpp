// Command-line front end: dataset generation, the two training stages,
// evaluation, and inspection dumps. Every run directory receives the full
// configuration echo plus its content hash, so any artifact can be traced
// back to the exact settings that produced it.

#include <chrono>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "spade/eval/ingest.hpp"
#include "spade/pipeline/bundle.hpp"
#include "spade/pipeline/config.hpp"
#include "spade/pipeline/train.hpp"

namespace fs = std::filesystem;
using namespace spade;

namespace {

constexpr const char* kUsage = R"(usage: spade <command> [options]

commands:
  gen-data       --config FILE [--data-dir DIR]
  calibrate      --config FILE [--run-dir DIR] [--no-lora] [--no-inversion]
  train          --config FILE --calibration FILE [--run-dir DIR]
                 [--no-calibration] [--force-config]
  eval           --config FILE --bundle FILE [--run-dir DIR] [--force-config]
  eval           --config FILE --predictions FILE --gt FILE [--run-dir DIR]
  inspect-graph  --config FILE --bundle FILE --scene K [--out FILE] [--force-config]
  config         --defaults

exit codes: 0 ok, 2 contract/config error, 3 numeric failure
)";

struct Options {
  std::map<std::string, std::string> values;
  std::set<std::string> flags;

  bool has(const std::string& k) const { return values.count(k) || flags.count(k); }
  std::string get(const std::string& k) const {
    auto it = values.find(k);
    if (it == values.end()) throw ContractError("missing required option --" + k);
    return it->second;
  }
  std::string get_or(const std::string& k, const std::string& fallback) const {
    auto it = values.find(k);
    return it == values.end() ? fallback : it->second;
  }
};

Options parse_options(int argc, char** argv, int first,
                      const std::set<std::string>& valued,
                      const std::set<std::string>& boolean) {
  Options o;
  for (int i = first; i < argc; ++i) {
    std::string a = argv[i];
    if (a.rfind("--", 0) != 0) throw ContractError("unexpected argument '" + a + "'");
    a = a.substr(2);
    if (boolean.count(a)) {
      o.flags.insert(a);
    } else if (valued.count(a)) {
      if (i + 1 >= argc) throw ContractError("option --" + a + " needs a value");
      o.values[a] = argv[++i];
    } else {
      throw ContractError("unknown option --" + a);
    }
  }
  return o;
}

std::string timestamp_now() {
  const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  localtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y%m%d-%H%M%S", &tm);
  return buf;
}

std::string make_run_dir(const RunConfig& cfg, const Options& o) {
  std::string dir = o.get_or("run-dir", "");
  if (dir.empty()) {
    const std::string hex = config_hash_hex(cfg);
    dir = cfg.out_dir + "/" + timestamp_now() + "-" + hex.substr(0, 8);
  }
  fs::create_directories(dir);
  return dir;
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream os(path);
  if (!os) throw ContractError("cannot open for writing: " + path);
  os << text;
  if (!os) throw ContractError("write failed: " + path);
}

json config_echo(const RunConfig& cfg) {
  json j;
  j["config"] = config_to_json(cfg);
  j["config_hash"] = config_hash_hex(cfg);
  return j;
}

void write_config_echo(const RunConfig& cfg, const std::string& dir) {
  write_text(dir + "/config.json", config_echo(cfg).dump(2) + "\n");
}

RunConfig load_cfg(const Options& o) { return load_config(o.get("config")); }

FilterMode mode_from_name(const std::string& name) {
  if (name == "closed") return FilterMode::Closed;
  if (name == "OvR") return FilterMode::OvR;
  if (name == "OvD+R") return FilterMode::OvDR;
  throw ContractError("unknown filter mode '" + name + "'");
}

Dataset load_dataset_or_explain(const std::string& path, const std::string& hint) {
  if (!fs::exists(path))
    throw ContractError("dataset file " + path + " not found; " + hint);
  return load_dataset(path);
}

// ---------------------------------------------------------------------------

int cmd_config(int argc, char** argv) {
  Options o = parse_options(argc, argv, 2, {}, {"defaults"});
  if (!o.has("defaults")) throw ContractError("spade config: pass --defaults");
  std::cout << config_to_json(RunConfig{}).dump(2) << "\n";
  return 0;
}

int cmd_gen_data(int argc, char** argv) {
  Options o = parse_options(argc, argv, 2, {"config", "data-dir"}, {});
  RunConfig cfg = load_cfg(o);
  if (o.has("data-dir")) cfg.data_dir = o.get("data-dir");
  fs::create_directories(cfg.data_dir);

  const SceneConfig sc = cfg.scene_config();
  Dataset train = gen_dataset(cfg.n_train, child_seed(cfg.data_seed, 1), sc, cfg.balanced_bands);
  Dataset test = gen_dataset(cfg.n_test, child_seed(cfg.data_seed, 2), sc, cfg.balanced_bands);

  const VocabSplit split = make_split(cfg.n_obj_categories, kNumPredicates, cfg.split_seed);
  train.meta.split = split;
  test.meta.split = split;
  train.meta.filter_mode = cfg.filter_mode;
  test.meta.filter_mode = cfg.filter_mode;

  const FilterMode mode = mode_from_name(cfg.filter_mode);
  if (mode != FilterMode::Closed) train = filter_train(train, split, mode);

  save_dataset(train, cfg.data_dir + "/train.jsonl");
  save_dataset(test, cfg.data_dir + "/test.jsonl");
  write_config_echo(cfg, cfg.data_dir);
  std::fprintf(stderr, "[gen-data] wrote %zu train / %zu test scenes under %s (mode %s)\n",
               train.scenes.size(), test.scenes.size(), cfg.data_dir.c_str(),
               cfg.filter_mode.c_str());
  return 0;
}

int cmd_calibrate(int argc, char** argv) {
  Options o = parse_options(argc, argv, 2, {"config", "run-dir", "data-dir"},
                            {"no-lora", "no-inversion"});
  RunConfig cfg = load_cfg(o);
  if (o.has("data-dir")) cfg.data_dir = o.get("data-dir");
  if (o.has("no-lora")) cfg.use_lora = false;
  if (o.has("no-inversion")) cfg.use_inversion = false;

  Dataset train = load_dataset_or_explain(cfg.data_dir + "/train.jsonl",
                                          "run `spade gen-data --config <file>` first");
  if (train.scenes.empty()) throw ContractError("training dataset is empty");
  std::vector<Scene> scenes(train.scenes.begin(),
                            train.scenes.begin() +
                                std::min(cfg.calib_scenes, train.scenes.size()));

  ModelBundle bundle(cfg, train.meta.split);
  CalibrationConfig cc;
  cc.steps = cfg.calib_steps;
  cc.lr = cfg.calib_lr;
  cc.momentum = cfg.calib_momentum;
  cc.lambda = cfg.lambda_cal;
  cc.lora_rank = cfg.lora_rank;
  cc.T = cfg.T;
  cc.capture_step = cfg.capture_step;
  cc.use_lora = cfg.use_lora;
  cc.use_inversion = cfg.use_inversion;
  cc.noise_seed = cfg.noise_seed;

  CalibrationResult res = calibrate(bundle.student(), bundle.captioner(), bundle.teacher(),
                                    bundle.embedder(), scenes, cc);
  bundle.adopt_lora(std::move(res.lora));

  const std::string dir = make_run_dir(cfg, o);
  write_config_echo(cfg, dir);
  bundle.save_calibration(dir + "/calibration.ckpt");
  json curve = config_echo(cfg);
  curve["loss_curve"] = res.loss_curve;
  write_text(dir + "/calibration_curve.json", curve.dump(2) + "\n");
  std::fprintf(stderr, "[calibrate] loss %.6f -> %.6f; artifacts in %s\n", res.initial_loss(),
               res.final_loss(), dir.c_str());
  return 0;
}

int cmd_train(int argc, char** argv) {
  Options o = parse_options(argc, argv, 2, {"config", "run-dir", "data-dir", "calibration"},
                            {"no-calibration", "force-config"});
  RunConfig cfg = load_cfg(o);
  if (o.has("data-dir")) cfg.data_dir = o.get("data-dir");
  if (o.has("calibration")) cfg.calibration_ckpt = o.get("calibration");
  if (o.has("no-calibration")) cfg.no_calibration = true;

  if (!cfg.no_calibration && cfg.calibration_ckpt.empty())
    throw ContractError(
        "train needs a calibration checkpoint: run `spade calibrate --config <file>` and pass "
        "--calibration <run>/calibration.ckpt, or opt out with --no-calibration");

  Dataset train = load_dataset_or_explain(cfg.data_dir + "/train.jsonl",
                                          "run `spade gen-data --config <file>` first");
  const FilterMode mode = mode_from_name(cfg.filter_mode);
  if (mode != FilterMode::Closed) {
    if (!train.meta.has_split())
      throw ContractError("filter mode " + cfg.filter_mode +
                          " needs a dataset with a vocabulary split; regenerate with "
                          "`spade gen-data`");
    train = filter_train(train, train.meta.split, mode);
  }

  ModelBundle bundle(cfg, train.meta.split);
  if (!cfg.no_calibration) {
    if (!fs::exists(cfg.calibration_ckpt))
      throw ContractError("calibration checkpoint " + cfg.calibration_ckpt +
                          " not found; run `spade calibrate --config <file>` first");
    bundle.load_calibration(cfg.calibration_ckpt, o.has("force-config"));
  }

  TrainResult res = train_stage2(bundle, train.scenes);

  const std::string dir = make_run_dir(cfg, o);
  write_config_echo(cfg, dir);
  bundle.save(dir + "/bundle.ckpt");
  json curve = config_echo(cfg);
  curve["epochs"] = json::array();
  for (const auto& e : res.curve) {
    json je;
    je["total"] = e.total;
    je["rel"] = e.rel;
    je["rqc"] = e.rqc;
    je["mask"] = e.mask;
    je["matched"] = e.matched;
    je["positive_pairs"] = e.positive_pairs;
    curve["epochs"].push_back(je);
  }
  write_text(dir + "/train_curve.json", curve.dump(2) + "\n");
  std::fprintf(stderr, "[train] done; artifacts in %s\n", dir.c_str());
  return 0;
}

int cmd_eval(int argc, char** argv) {
  Options o = parse_options(argc, argv, 2,
                            {"config", "run-dir", "data-dir", "bundle", "predictions", "gt"},
                            {"force-config"});
  RunConfig cfg = load_cfg(o);
  if (o.has("data-dir")) cfg.data_dir = o.get("data-dir");

  const std::string dir = make_run_dir(cfg, o);
  write_config_echo(cfg, dir);

  MetricsReport rep;
  if (o.has("bundle")) {
    Dataset test = load_dataset_or_explain(cfg.data_dir + "/test.jsonl",
                                           "run `spade gen-data --config <file>` first");
    ModelBundle bundle(cfg, test.meta.split);
    bundle.load(o.get("bundle"), o.has("force-config"));
    const auto preds = predict_dataset(bundle, test.scenes);
    save_predictions(preds, dir + "/predictions.jsonl");
    rep = split_report(preds, test.scenes, test.meta);
  } else if (o.has("predictions")) {
    rep = ingest(o.get("predictions"), o.get("gt"));
  } else {
    throw ContractError("eval needs --bundle, or --predictions with --gt");
  }

  json out = config_echo(cfg);
  out["metrics"] = report_to_json(rep);
  write_text(dir + "/metrics.json", out.dump(2) + "\n");
  std::cout << report_table(rep);
  std::fprintf(stderr, "[eval] artifacts in %s\n", dir.c_str());
  return 0;
}

int cmd_inspect_graph(int argc, char** argv) {
  Options o = parse_options(argc, argv, 2,
                            {"config", "data-dir", "bundle", "scene", "out"}, {"force-config"});
  RunConfig cfg = load_cfg(o);
  if (o.has("data-dir")) cfg.data_dir = o.get("data-dir");

  Dataset test = load_dataset_or_explain(cfg.data_dir + "/test.jsonl",
                                         "run `spade gen-data --config <file>` first");
  const std::size_t k = std::stoul(o.get("scene"));
  if (k >= test.scenes.size())
    throw ContractError("scene index " + std::to_string(k) + " out of range (" +
                        std::to_string(test.scenes.size()) + " test scenes)");
  const Scene& scene = test.scenes[k];

  ModelBundle bundle(cfg, test.meta.split);
  bundle.load(o.get("bundle"), o.has("force-config"));

  NoGradGuard ng;
  const PromptBank bank = bundle.full_bank();
  SceneForward fwd = scene_forward(bundle, scene, bank);
  // conditioning attention maps from the calibrated denoiser
  Tensor cond = bundle.captioner().tokens(scene.grid);
  UNetOutput uo = bundle.student().forward(scene.grid, 0, cond, true);

  json j;
  j["scene"] = k;
  j["config_hash"] = config_hash_hex(cfg);
  j["graph"]["n"] = fwd.graph.n;
  j["graph"]["adjacency"] = json::array();
  for (std::size_t i = 0; i < fwd.graph.n; ++i) {
    json row = json::array();
    for (std::size_t c = 0; c < fwd.graph.n; ++c) row.push_back(int(fwd.graph.at(i, c)));
    j["graph"]["adjacency"].push_back(row);
  }
  j["pair_selection"]["eta"] = fwd.sel.eta;
  j["pair_selection"]["pairs"] = json::array();
  for (const auto& [a, b] : fwd.sel.pairs) j["pair_selection"]["pairs"].push_back({a, b});
  j["pair_selection"]["cosine"] = json::array();
  for (std::size_t i = 0; i < fwd.sel.S.dim(0); ++i) {
    json row = json::array();
    for (std::size_t c = 0; c < fwd.sel.S.dim(1); ++c) row.push_back(fwd.sel.S.at(i, c));
    j["pair_selection"]["cosine"].push_back(row);
  }
  j["attention_maps"] = json::array();
  for (const auto& m : uo.maps) {
    json level;
    level["shape"] = m.shape();
    level["rows"] = json::array();
    for (std::size_t r = 0; r < m.dim(0); ++r) {
      json row = json::array();
      for (std::size_t c = 0; c < m.dim(1); ++c) row.push_back(m.at(r, c));
      level["rows"].push_back(row);
    }
    j["attention_maps"].push_back(level);
  }
  j["masks"] = json::array();
  for (const auto& m : fwd.masks) j["masks"].push_back(mask_to_rle(m));

  const std::string text = j.dump(2) + "\n";
  if (o.has("out"))
    write_text(o.get("out"), text);
  else
    std::cout << text;
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  if (argc < 2) {
    std::fputs(kUsage, stderr);
    return 2;
  }
  const std::string cmd = argv[1];
  try {
    if (cmd == "config") return cmd_config(argc, argv);
    if (cmd == "gen-data") return cmd_gen_data(argc, argv);
    if (cmd == "calibrate") return cmd_calibrate(argc, argv);
    if (cmd == "train") return cmd_train(argc, argv);
    if (cmd == "eval") return cmd_eval(argc, argv);
    if (cmd == "inspect-graph") return cmd_inspect_graph(argc, argv);
    if (cmd == "--help" || cmd == "help") {
      std::fputs(kUsage, stdout);
      return 0;
    }
    std::fprintf(stderr, "spade: unknown command '%s'\n%s", cmd.c_str(), kUsage);
    return 2;
  } catch (const NumericError& e) {
    std::fprintf(stderr, "spade %s: numeric failure: %s\n", cmd.c_str(), e.what());
    return 3;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "spade %s: %s\n", cmd.c_str(), e.what());
    return 2;
  }
}
