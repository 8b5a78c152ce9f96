#pragma once

#include <fstream>
#include <string>
#include <vector>

#include "spade/eval/metrics.hpp"

namespace spade {

// ---------------------------------------------------------------------------
// Prediction JSONL: one scene per line, a JSON array of prediction records in
// rank-insertion order:
//   [{"subject_rle": [..], "object_rle": [..], "subject_label": int,
//     "object_label": int, "predicate_label": int, "score": float}, ...]
// Line k holds scene k's predictions; the line count must match the ground
// truth. Masks use the same run-length encoding as the dataset files. Array
// order is preserved on ingest, so same-score ranking survives a round trip.
// ---------------------------------------------------------------------------

inline void save_predictions(const std::vector<ScenePredictions>& preds,
                             const std::string& path) {
  std::ofstream os(path);
  if (!os) throw ContractError("cannot open for writing: " + path);
  for (const auto& scene_preds : preds) {
    json line = json::array();
    for (const auto& p : scene_preds) {
      json j;
      j["subject_rle"] = mask_to_rle(p.subject_mask);
      j["object_rle"] = mask_to_rle(p.object_mask);
      j["subject_label"] = p.subject_label;
      j["object_label"] = p.object_label;
      j["predicate_label"] = p.predicate_label;
      j["score"] = p.score;
      line.push_back(std::move(j));
    }
    os << line.dump() << "\n";
  }
  if (!os) throw ContractError("write failed: " + path);
}

inline std::vector<ScenePredictions> load_predictions(const std::string& path,
                                                      const std::vector<Scene>& scenes) {
  std::ifstream is(path);
  if (!is) throw ContractError("cannot open for reading: " + path);
  std::vector<ScenePredictions> preds;
  preds.reserve(scenes.size());
  std::string line;
  long lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty() && preds.size() == scenes.size()) continue;  // trailing blank
    const std::size_t s = preds.size();
    if (s >= scenes.size())
      throw ParseError("more prediction lines than scenes (" + std::to_string(scenes.size()) +
                           ")",
                       lineno);
    const std::size_t numel = scenes[s].height() * scenes[s].width();
    json arr;
    try {
      arr = json::parse(line);
    } catch (const json::exception& e) {
      throw ParseError(std::string("bad prediction line: ") + e.what(), lineno);
    }
    if (!arr.is_array()) throw ParseError("prediction line must be a JSON array", lineno);
    ScenePredictions sp;
    try {
      for (const auto& j : arr) {
        TripletPrediction p;
        p.subject_mask =
            rle_to_mask(j.at("subject_rle").get<std::vector<std::uint32_t>>(), numel);
        p.object_mask = rle_to_mask(j.at("object_rle").get<std::vector<std::uint32_t>>(), numel);
        p.subject_label = j.at("subject_label").get<int>();
        p.object_label = j.at("object_label").get<int>();
        p.predicate_label = j.at("predicate_label").get<int>();
        p.score = j.at("score").get<double>();
        p.validate(numel);
        sp.push_back(std::move(p));
      }
    } catch (const json::exception& e) {
      throw ParseError(std::string("bad prediction record: ") + e.what(), lineno);
    } catch (const ParseError& e) {
      if (e.line() >= 0) throw;  // already carries its line
      throw ParseError(std::string("bad prediction record: ") + e.what(), lineno);
    } catch (const NumericError& e) {
      throw ParseError(std::string("bad prediction record: ") + e.what(), lineno);
    } catch (const ContractError& e) {
      throw ParseError(std::string("bad prediction record: ") + e.what(), lineno);
    }
    preds.push_back(std::move(sp));
  }
  if (preds.size() != scenes.size())
    throw ParseError("prediction file has " + std::to_string(preds.size()) + " lines but " +
                         std::to_string(scenes.size()) + " scenes are under evaluation",
                     lineno);
  return preds;
}

// Standalone scoring: ground truth + predictions from disk, report out.
inline MetricsReport ingest(const std::string& pred_path, const std::string& gt_path,
                            const ReportOptions& opt = {}) {
  Dataset ds = load_dataset(gt_path);
  const auto preds = load_predictions(pred_path, ds.scenes);
  return split_report(preds, ds.scenes, ds.meta, opt);
}

}  // namespace spade
