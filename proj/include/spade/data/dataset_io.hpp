#pragma once

#include <cstdint>
#include <fstream>
#include <iostream>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"
#include "spade/data/scene_synth.hpp"

namespace spade {

using nlohmann::json;

// ---------------------------------------------------------------------------
// base64 (standard alphabet, padded) over the little-endian f64 image payload
// ---------------------------------------------------------------------------
namespace b64 {

inline const char* alphabet() {
  return "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
}

inline std::string encode(const std::vector<std::uint8_t>& bytes) {
  const char* tab = alphabet();
  std::string out;
  out.reserve((bytes.size() + 2) / 3 * 4);
  std::size_t i = 0;
  while (i + 3 <= bytes.size()) {
    const std::uint32_t v = (bytes[i] << 16) | (bytes[i + 1] << 8) | bytes[i + 2];
    out += tab[(v >> 18) & 63];
    out += tab[(v >> 12) & 63];
    out += tab[(v >> 6) & 63];
    out += tab[v & 63];
    i += 3;
  }
  const std::size_t rem = bytes.size() - i;
  if (rem == 1) {
    const std::uint32_t v = bytes[i] << 16;
    out += tab[(v >> 18) & 63];
    out += tab[(v >> 12) & 63];
    out += "==";
  } else if (rem == 2) {
    const std::uint32_t v = (bytes[i] << 16) | (bytes[i + 1] << 8);
    out += tab[(v >> 18) & 63];
    out += tab[(v >> 12) & 63];
    out += tab[(v >> 6) & 63];
    out += '=';
  }
  return out;
}

inline std::vector<std::uint8_t> decode(const std::string& s) {
  static const auto rev = []() {
    std::array<int, 256> r;
    r.fill(-1);
    const char* tab = alphabet();
    for (int i = 0; i < 64; ++i) r[static_cast<unsigned char>(tab[i])] = i;
    return r;
  }();
  if (s.size() % 4 != 0) throw ParseError("base64 length not a multiple of 4");
  std::vector<std::uint8_t> out;
  out.reserve(s.size() / 4 * 3);
  for (std::size_t i = 0; i < s.size(); i += 4) {
    int vals[4];
    int pad = 0;
    for (int k = 0; k < 4; ++k) {
      const char c = s[i + k];
      if (c == '=') {
        vals[k] = 0;
        ++pad;
      } else {
        vals[k] = rev[static_cast<unsigned char>(c)];
        if (vals[k] < 0) throw ParseError("invalid base64 character");
        if (pad) throw ParseError("base64 data after padding");
      }
    }
    const std::uint32_t v = (vals[0] << 18) | (vals[1] << 12) | (vals[2] << 6) | vals[3];
    out.push_back((v >> 16) & 0xff);
    if (pad < 2) out.push_back((v >> 8) & 0xff);
    if (pad < 1) out.push_back(v & 0xff);
  }
  return out;
}

inline std::string encode_f64(const std::vector<double>& xs) {
  std::vector<std::uint8_t> bytes;
  bytes.reserve(xs.size() * 8);
  for (double d : xs) {
    const std::uint64_t u = std::bit_cast<std::uint64_t>(d);
    for (int i = 0; i < 8; ++i) bytes.push_back(static_cast<std::uint8_t>((u >> (8 * i)) & 0xff));
  }
  return encode(bytes);
}

inline std::vector<double> decode_f64(const std::string& s) {
  const auto bytes = decode(s);
  if (bytes.size() % 8 != 0) throw ParseError("f64 payload length not a multiple of 8");
  std::vector<double> xs(bytes.size() / 8);
  for (std::size_t i = 0; i < xs.size(); ++i) {
    std::uint64_t u = 0;
    for (int k = 0; k < 8; ++k) u |= static_cast<std::uint64_t>(bytes[8 * i + k]) << (8 * k);
    xs[i] = std::bit_cast<double>(u);
  }
  return xs;
}

}  // namespace b64

// ---------------------------------------------------------------------------
// Vocabulary split: base vs novel ids at a 7:3 rounded ratio, for objects and
// predicates independently. Filtering modes control what training may see.
// ---------------------------------------------------------------------------
struct VocabSplit {
  std::vector<int> base_predicates, novel_predicates;
  std::vector<int> base_objects, novel_objects;

  bool predicate_is_novel(int id) const {
    return std::find(novel_predicates.begin(), novel_predicates.end(), id) !=
           novel_predicates.end();
  }
  bool object_is_novel(int id) const {
    return std::find(novel_objects.begin(), novel_objects.end(), id) != novel_objects.end();
  }
};

enum class FilterMode : int { Closed = 0, OvR = 1, OvDR = 2 };

inline std::string filter_mode_name(FilterMode m) {
  switch (m) {
    case FilterMode::Closed: return "closed";
    case FilterMode::OvR: return "OvR";
    case FilterMode::OvDR: return "OvD+R";
  }
  throw ContractError("bad filter mode");
}

namespace detail {

inline std::vector<int> shuffled_ids(std::size_t n, Rng& rng) {
  std::vector<int> ids(n);
  for (std::size_t i = 0; i < n; ++i) ids[i] = static_cast<int>(i);
  for (std::size_t i = n; i > 1; --i) {
    const auto j = static_cast<std::size_t>(rng.uniform_int(0, static_cast<long>(i) - 1));
    std::swap(ids[i - 1], ids[j]);
  }
  return ids;
}

}  // namespace detail

inline VocabSplit make_split(std::size_t n_objects, std::size_t n_predicates,
                             std::uint64_t seed) {
  if (n_objects < 10 || n_predicates < 10)
    std::cerr << "warning: vocabulary below 10 entries (" << n_objects << " objects, "
              << n_predicates << " predicates); split proceeds but is coarse\n";
  Rng rng(seed);
  const auto split_one = [](std::vector<int> ids, std::vector<int>& base,
                            std::vector<int>& novel) {
    const auto n_base = static_cast<std::size_t>(
        std::llround(0.7 * static_cast<double>(ids.size())));
    base.assign(ids.begin(), ids.begin() + static_cast<long>(n_base));
    novel.assign(ids.begin() + static_cast<long>(n_base), ids.end());
    std::sort(base.begin(), base.end());
    std::sort(novel.begin(), novel.end());
  };
  VocabSplit s;
  Rng ro = rng.child(1), rp = rng.child(2);
  split_one(detail::shuffled_ids(n_objects, ro), s.base_objects, s.novel_objects);
  split_one(detail::shuffled_ids(n_predicates, rp), s.base_predicates, s.novel_predicates);
  return s;
}

// ---------------------------------------------------------------------------
// Dataset container + JSONL serialization
// ---------------------------------------------------------------------------
struct DatasetMeta {
  std::vector<std::string> object_names;
  std::vector<std::string> predicate_names;
  SceneConfig config;
  std::uint64_t seed = 0;
  bool balanced = false;
  std::string filter_mode = "closed";
  VocabSplit split;  // empty vectors until a split is attached

  bool has_split() const {
    return !(split.base_predicates.empty() && split.novel_predicates.empty() &&
             split.base_objects.empty() && split.novel_objects.empty());
  }
};

struct Dataset {
  std::vector<Scene> scenes;
  DatasetMeta meta;
};

inline std::vector<std::string> default_object_names(std::size_t n) {
  static const char* stems[] = {"block",  "disk",   "ring",  "slab",  "wedge",
                                "column", "plate",  "knob",  "strip", "tile",
                                "panel",  "button", "joint", "beam",  "core"};
  std::vector<std::string> names;
  for (std::size_t i = 0; i < n; ++i) {
    if (i < std::size(stems))
      names.emplace_back(stems[i]);
    else
      names.push_back("object" + std::to_string(i));
  }
  return names;
}

// Balanced generation alternates wide and clustered placement so DR and NDR
// relation bands both appear in quantity.
inline Dataset gen_dataset(std::size_t n_scenes, std::uint64_t seed, const SceneConfig& cfg,
                           bool balanced) {
  Dataset ds;
  ds.meta.object_names = default_object_names(cfg.n_obj_categories);
  ds.meta.predicate_names.assign(predicate_names().begin(), predicate_names().end());
  ds.meta.config = cfg;
  ds.meta.seed = seed;
  ds.meta.balanced = balanced;
  for (std::size_t i = 0; i < n_scenes; ++i) {
    SceneConfig c = cfg;
    if (balanced) c.placement = (i % 2 == 0) ? Placement::Far : Placement::Near;
    std::size_t attempts = 0;
    for (;;) {
      try {
        ds.scenes.push_back(generate_scene(child_seed(seed, i + attempts * 0x10000ULL), c));
        break;
      } catch (const GenerationError&) {
        if (++attempts >= 8) throw;
      }
    }
  }
  return ds;
}

namespace detail {

inline json scene_to_json(const Scene& s) {
  json j;
  j["grid_shape"] = {s.channels(), s.height(), s.width()};
  j["grid_b64"] = b64::encode_f64(s.grid.data());
  json objs = json::array();
  for (const auto& o : s.objects) {
    json jo;
    jo["category_id"] = o.category_id;
    jo["rle"] = mask_to_rle(o.mask);
    objs.push_back(std::move(jo));
  }
  j["objects"] = std::move(objs);
  json rels = json::array();
  for (const auto& r : s.relations)
    rels.push_back({r.subject, r.predicate, r.object});
  j["relations"] = std::move(rels);
  return j;
}

inline Scene scene_from_json(const json& j) {
  Scene s;
  const auto shape = j.at("grid_shape").get<std::vector<std::size_t>>();
  if (shape.size() != 3) throw ParseError("grid_shape must have 3 entries");
  auto grid = b64::decode_f64(j.at("grid_b64").get<std::string>());
  if (grid.size() != shape[0] * shape[1] * shape[2])
    throw ParseError("grid payload does not match grid_shape");
  s.grid = Tensor::from_data({shape[0], shape[1], shape[2]}, std::move(grid));
  const std::size_t H = shape[1], W = shape[2];
  for (const auto& jo : j.at("objects")) {
    Mask m = rle_to_mask(jo.at("rle").get<std::vector<std::uint32_t>>(), H * W);
    s.objects.push_back(ObjectRecord::make(std::move(m), jo.at("category_id").get<int>(), H, W));
  }
  for (const auto& jr : j.at("relations")) {
    if (!jr.is_array() || jr.size() != 3) throw ParseError("relation must be a triplet");
    s.relations.push_back({jr[0].get<std::size_t>(), jr[1].get<int>(), jr[2].get<std::size_t>()});
  }
  s.validate();
  return s;
}

inline json config_to_json(const SceneConfig& c) {
  json j;
  j["channels"] = c.channels;
  j["height"] = c.height;
  j["width"] = c.width;
  j["n_objects_min"] = c.n_objects_min;
  j["n_objects_max"] = c.n_objects_max;
  j["n_obj_categories"] = c.n_obj_categories;
  j["noise_sigma"] = c.noise_sigma;
  j["iou_cap"] = c.iou_cap;
  j["max_retries"] = c.max_retries;
  j["signature_seed"] = c.signature_seed;
  return j;
}

inline SceneConfig config_from_json(const json& j) {
  SceneConfig c;
  c.channels = j.at("channels").get<std::size_t>();
  c.height = j.at("height").get<std::size_t>();
  c.width = j.at("width").get<std::size_t>();
  c.n_objects_min = j.at("n_objects_min").get<std::size_t>();
  c.n_objects_max = j.at("n_objects_max").get<std::size_t>();
  c.n_obj_categories = j.at("n_obj_categories").get<std::size_t>();
  c.noise_sigma = j.at("noise_sigma").get<double>();
  c.iou_cap = j.at("iou_cap").get<double>();
  c.max_retries = j.at("max_retries").get<std::size_t>();
  c.signature_seed = j.at("signature_seed").get<std::uint64_t>();
  return c;
}

inline std::string meta_path_for(const std::string& data_path) {
  const std::string suffix = ".jsonl";
  if (data_path.size() > suffix.size() &&
      data_path.compare(data_path.size() - suffix.size(), suffix.size(), suffix) == 0)
    return data_path.substr(0, data_path.size() - suffix.size()) + ".meta.json";
  return data_path + ".meta.json";
}

}  // namespace detail

inline void save_dataset(const Dataset& ds, const std::string& path) {
  std::ofstream os(path);
  if (!os) throw ContractError("cannot open for writing: " + path);
  for (const auto& s : ds.scenes) os << detail::scene_to_json(s).dump() << "\n";
  if (!os) throw ContractError("write failed: " + path);

  json meta;
  meta["object_names"] = ds.meta.object_names;
  meta["predicate_names"] = ds.meta.predicate_names;
  meta["config"] = detail::config_to_json(ds.meta.config);
  meta["seed"] = ds.meta.seed;
  meta["balanced"] = ds.meta.balanced;
  meta["filter_mode"] = ds.meta.filter_mode;
  if (ds.meta.has_split()) {
    json sp;
    sp["base_predicates"] = ds.meta.split.base_predicates;
    sp["novel_predicates"] = ds.meta.split.novel_predicates;
    sp["base_objects"] = ds.meta.split.base_objects;
    sp["novel_objects"] = ds.meta.split.novel_objects;
    meta["split"] = std::move(sp);
  }
  std::ofstream ms(detail::meta_path_for(path));
  if (!ms) throw ContractError("cannot open for writing: " + detail::meta_path_for(path));
  ms << meta.dump(2) << "\n";
}

inline Dataset load_dataset(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ContractError("cannot open for reading: " + path);
  Dataset ds;
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      ds.scenes.push_back(detail::scene_from_json(json::parse(line)));
    } catch (const json::exception& e) {
      throw ParseError(std::string("bad scene record: ") + e.what(), lineno);
    } catch (const ParseError& e) {
      throw ParseError(std::string("bad scene record: ") + e.what(), lineno);
    }
  }

  std::ifstream ms(detail::meta_path_for(path));
  if (ms) {
    json meta;
    try {
      ms >> meta;
      ds.meta.object_names = meta.at("object_names").get<std::vector<std::string>>();
      ds.meta.predicate_names = meta.at("predicate_names").get<std::vector<std::string>>();
      ds.meta.config = detail::config_from_json(meta.at("config"));
      ds.meta.seed = meta.at("seed").get<std::uint64_t>();
      ds.meta.balanced = meta.value("balanced", false);
      ds.meta.filter_mode = meta.value("filter_mode", "closed");
      if (meta.contains("split")) {
        const auto& sp = meta["split"];
        ds.meta.split.base_predicates = sp.at("base_predicates").get<std::vector<int>>();
        ds.meta.split.novel_predicates = sp.at("novel_predicates").get<std::vector<int>>();
        ds.meta.split.base_objects = sp.at("base_objects").get<std::vector<int>>();
        ds.meta.split.novel_objects = sp.at("novel_objects").get<std::vector<int>>();
      }
    } catch (const json::exception& e) {
      throw ParseError(std::string("bad dataset meta: ") + e.what());
    }
  }
  return ds;
}

// Restricts what training may see. OvR drops triplets whose predicate is
// novel; OvD+R additionally drops whole scenes containing any novel-category
// object. Closed passes everything through.
inline Dataset filter_train(const Dataset& ds, const VocabSplit& split, FilterMode mode) {
  Dataset out;
  out.meta = ds.meta;
  out.meta.split = split;
  out.meta.filter_mode = filter_mode_name(mode);
  for (const auto& s : ds.scenes) {
    if (mode == FilterMode::OvDR) {
      bool has_novel_obj = false;
      for (const auto& o : s.objects)
        if (split.object_is_novel(o.category_id)) has_novel_obj = true;
      if (has_novel_obj) continue;
    }
    Scene kept = s;
    if (mode == FilterMode::OvR || mode == FilterMode::OvDR) {
      kept.relations.clear();
      for (const auto& r : s.relations)
        if (!split.predicate_is_novel(r.predicate)) kept.relations.push_back(r);
    }
    out.scenes.push_back(std::move(kept));
  }
  return out;
}

}  // namespace spade
