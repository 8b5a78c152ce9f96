#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <fstream>
#include <set>

#include "spade/data/dataset_io.hpp"

using namespace spade;

namespace {

bool scenes_identical(const Scene& a, const Scene& b) {
  if (a.grid.shape() != b.grid.shape()) return false;
  for (std::size_t i = 0; i < a.grid.size(); ++i)
    if (std::bit_cast<std::uint64_t>(a.grid.data()[i]) !=
        std::bit_cast<std::uint64_t>(b.grid.data()[i]))
      return false;
  if (a.objects.size() != b.objects.size()) return false;
  for (std::size_t i = 0; i < a.objects.size(); ++i) {
    if (a.objects[i].mask != b.objects[i].mask) return false;
    if (a.objects[i].category_id != b.objects[i].category_id) return false;
  }
  if (a.relations.size() != b.relations.size()) return false;
  for (std::size_t i = 0; i < a.relations.size(); ++i)
    if (!(a.relations[i] == b.relations[i])) return false;
  return true;
}

}  // namespace

TEST_CASE("base64 round-trips arbitrary byte lengths", "[dataio]") {
  Rng rng(41);
  for (std::size_t len : {0ul, 1ul, 2ul, 3ul, 4ul, 17ul, 100ul}) {
    std::vector<std::uint8_t> bytes(len);
    for (auto& b : bytes) b = static_cast<std::uint8_t>(rng.uniform_int(0, 255));
    REQUIRE(b64::decode(b64::encode(bytes)) == bytes);
  }
  REQUIRE(b64::encode({'M', 'a', 'n'}) == "TWFu");  // classic reference triplet
  REQUIRE(b64::encode({'M', 'a'}) == "TWE=");
  REQUIRE(b64::encode({'M'}) == "TQ==");
  REQUIRE_THROWS_AS(b64::decode("abc"), ParseError);
  REQUIRE_THROWS_AS(b64::decode("a&=="), ParseError);
}

TEST_CASE("dataset round-trip is bit-identical", "[dataio]") {
  SceneConfig cfg;
  Dataset ds = gen_dataset(10, 314, cfg, false);
  const std::string path = "io_test_roundtrip.jsonl";
  save_dataset(ds, path);
  Dataset back = load_dataset(path);
  REQUIRE(back.scenes.size() == ds.scenes.size());
  for (std::size_t i = 0; i < ds.scenes.size(); ++i)
    REQUIRE(scenes_identical(ds.scenes[i], back.scenes[i]));
  REQUIRE(back.meta.object_names == ds.meta.object_names);
  REQUIRE(back.meta.predicate_names == ds.meta.predicate_names);
  REQUIRE(back.meta.seed == ds.meta.seed);
  REQUIRE(back.meta.config.noise_sigma == ds.meta.config.noise_sigma);
  REQUIRE(back.meta.config.signature_seed == ds.meta.config.signature_seed);
  std::remove(path.c_str());
  std::remove("io_test_roundtrip.meta.json");
}

TEST_CASE("empty-relation scenes survive the round-trip", "[dataio]") {
  SceneConfig cfg;
  cfg.n_objects_min = cfg.n_objects_max = 1;
  Dataset ds = gen_dataset(3, 11, cfg, false);
  for (const auto& s : ds.scenes) REQUIRE(s.relations.empty());
  const std::string path = "io_test_norel.jsonl";
  save_dataset(ds, path);
  Dataset back = load_dataset(path);
  for (std::size_t i = 0; i < ds.scenes.size(); ++i)
    REQUIRE(scenes_identical(ds.scenes[i], back.scenes[i]));
  std::remove(path.c_str());
  std::remove("io_test_norel.meta.json");
}

TEST_CASE("hand-written fixture line parses to the expected scene", "[dataio]") {
  // authored against the documented format: 1x2x2 grid [0.0, 0.5, 1.0, -2.0]
  // (f64 LE, base64), one object with mask [[1,0],[0,1]], no relations
  const std::string line =
      R"({"grid_b64":"AAAAAAAAAAAAAAAAAADgPwAAAAAAAPA/AAAAAAAAAMA=",)"
      R"("grid_shape":[1,2,2],)"
      R"("objects":[{"category_id":2,"rle":[0,1,2,1]}],)"
      R"("relations":[]})";
  const std::string path = "io_test_fixture.jsonl";
  {
    std::ofstream os(path);
    os << line << "\n";
  }
  Dataset ds = load_dataset(path);
  REQUIRE(ds.scenes.size() == 1);
  const Scene& s = ds.scenes[0];
  REQUIRE(s.grid.shape() == Shape{1, 2, 2});
  REQUIRE(s.grid.data() == std::vector<double>{0.0, 0.5, 1.0, -2.0});
  REQUIRE(s.objects.size() == 1);
  REQUIRE(s.objects[0].category_id == 2);
  REQUIRE(s.objects[0].mask == Mask{1, 0, 0, 1});
  REQUIRE(s.objects[0].bbox.x0 == 0);
  REQUIRE(s.objects[0].bbox.y1 == 1);
  REQUIRE(s.objects[0].cx == 0.5);
  REQUIRE(s.objects[0].cy == 0.5);
  REQUIRE(s.relations.empty());
  std::remove(path.c_str());
}

TEST_CASE("malformed lines report their line number", "[dataio]") {
  const std::string good =
      R"({"grid_b64":"AAAAAAAA0D8AAAAAAADAvwAAAAAAAAxA","grid_shape":[3,1,1],)"
      R"("objects":[{"category_id":0,"rle":[0,1]}],"relations":[]})";
  const std::string path = "io_test_bad.jsonl";
  {
    std::ofstream os(path);
    os << good << "\n";
    os << "{not json at all\n";
  }
  try {
    load_dataset(path);
    FAIL("expected a parse error");
  } catch (const ParseError& e) {
    REQUIRE(e.line() == 2);
  }
  std::remove(path.c_str());
}

TEST_CASE("ten-entry vocabularies split 7:3", "[dataio]") {
  VocabSplit sp = make_split(10, 10, 5);
  REQUIRE(sp.base_objects.size() == 7);
  REQUIRE(sp.novel_objects.size() == 3);
  REQUIRE(sp.base_predicates.size() == 7);
  REQUIRE(sp.novel_predicates.size() == 3);
  // disjoint partition
  std::set<int> all(sp.base_objects.begin(), sp.base_objects.end());
  for (int id : sp.novel_objects) REQUIRE(all.insert(id).second);
  REQUIRE(all.size() == 10);
  // deterministic in the seed
  VocabSplit sp2 = make_split(10, 10, 5);
  REQUIRE(sp2.base_objects == sp.base_objects);
  REQUIRE(sp2.novel_predicates == sp.novel_predicates);
}

TEST_CASE("six-predicate vocabulary rounds to 4 base and 2 novel", "[dataio]") {
  VocabSplit sp = make_split(10, 6, 1);
  REQUIRE(sp.base_predicates.size() == 4);
  REQUIRE(sp.novel_predicates.size() == 2);
}

TEST_CASE("closed filtering is the identity on scenes and relations", "[dataio]") {
  SceneConfig cfg;
  Dataset ds = gen_dataset(20, 88, cfg, false);
  VocabSplit sp = make_split(cfg.n_obj_categories, kNumPredicates, 3);
  Dataset out = filter_train(ds, sp, FilterMode::Closed);
  REQUIRE(out.scenes.size() == ds.scenes.size());
  for (std::size_t i = 0; i < ds.scenes.size(); ++i)
    REQUIRE(scenes_identical(ds.scenes[i], out.scenes[i]));
  REQUIRE(out.meta.filter_mode == "closed");
}

TEST_CASE("OvR filtering removes every novel-predicate triplet and nothing else", "[dataio]") {
  SceneConfig cfg;
  Dataset ds = gen_dataset(40, 99, cfg, true);
  VocabSplit sp = make_split(cfg.n_obj_categories, kNumPredicates, 3);
  Dataset out = filter_train(ds, sp, FilterMode::OvR);
  REQUIRE(out.scenes.size() == ds.scenes.size());
  std::size_t kept = 0, dropped = 0;
  for (std::size_t i = 0; i < ds.scenes.size(); ++i) {
    for (const auto& r : out.scenes[i].relations) {
      REQUIRE_FALSE(sp.predicate_is_novel(r.predicate));
      ++kept;
    }
    for (const auto& r : ds.scenes[i].relations)
      if (sp.predicate_is_novel(r.predicate)) ++dropped;
    REQUIRE(out.scenes[i].relations.size() + [&] {
      std::size_t n = 0;
      for (const auto& r : ds.scenes[i].relations)
        if (sp.predicate_is_novel(r.predicate)) ++n;
      return n;
    }() == ds.scenes[i].relations.size());
  }
  REQUIRE(kept > 0);
  REQUIRE(dropped > 0);
}

TEST_CASE("OvD+R filtering leaves no novel object or predicate id anywhere", "[dataio]") {
  SceneConfig cfg;
  Dataset ds = gen_dataset(60, 123, cfg, true);
  VocabSplit sp = make_split(cfg.n_obj_categories, kNumPredicates, 3);
  Dataset out = filter_train(ds, sp, FilterMode::OvDR);
  REQUIRE(out.scenes.size() < ds.scenes.size());  // some scenes must contain novel objects
  REQUIRE(!out.scenes.empty());
  for (const auto& s : out.scenes) {
    for (const auto& o : s.objects) REQUIRE_FALSE(sp.object_is_novel(o.category_id));
    for (const auto& r : s.relations) REQUIRE_FALSE(sp.predicate_is_novel(r.predicate));
  }
  REQUIRE(out.meta.filter_mode == "OvD+R");
}
