#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <fstream>
#include <string>

#include "spade/core/checkpoint.hpp"
#include "spade/core/rng.hpp"

using namespace spade;

namespace {

std::string tmp_path(const char* stem) {
  return std::string("ckpt_test_") + stem + ".bin";
}

std::string file_bytes(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>());
}

}  // namespace

TEST_CASE("save then load is bit-identical, including awkward doubles", "[checkpoint]") {
  Rng rng(31);
  Checkpoint cp;
  cp.put("enc.w", Tensor::randn({3, 4}, rng));
  cp.put("enc.b", Tensor::randn({4}, rng));
  Tensor odd = Tensor::from_data({5}, {0.0, -0.0, 1e-308, 1.7976931348623157e308, 0.1});
  cp.put("odd", odd);

  const auto path = tmp_path("roundtrip");
  cp.save(path);
  Checkpoint back = Checkpoint::load(path);
  REQUIRE(back.size() == 3);
  REQUIRE(back.names() == cp.names());
  for (const auto& name : cp.names()) {
    const auto& a = cp.get(name);
    const auto& b = back.get(name);
    REQUIRE(a.shape() == b.shape());
    for (std::size_t i = 0; i < a.size(); ++i) {
      // compare representations, not values: -0.0 must stay -0.0
      REQUIRE(std::bit_cast<std::uint64_t>(a.data()[i]) ==
              std::bit_cast<std::uint64_t>(b.data()[i]));
    }
  }

  // and re-saving yields byte-identical files
  const auto path2 = tmp_path("roundtrip2");
  back.save(path2);
  REQUIRE(file_bytes(path) == file_bytes(path2));
  std::remove(path.c_str());
  std::remove(path2.c_str());
}

TEST_CASE("corrupt containers are rejected", "[checkpoint]") {
  const auto path = tmp_path("bad");
  {
    std::ofstream os(path, std::ios::binary);
    os << "NOTSPADE garbage";
  }
  REQUIRE_THROWS_AS(Checkpoint::load(path), ParseError);

  // truncate a valid file mid-payload
  Checkpoint cp;
  cp.put("w", Tensor::ones({4, 4}));
  cp.save(path);
  auto bytes = file_bytes(path);
  {
    std::ofstream os(path, std::ios::binary);
    os.write(bytes.data(), static_cast<std::streamsize>(bytes.size() - 9));
  }
  REQUIRE_THROWS_AS(Checkpoint::load(path), ParseError);
  std::remove(path.c_str());
}

TEST_CASE("names are unique and lookups are checked", "[checkpoint]") {
  Checkpoint cp;
  cp.put("a", Tensor::ones({2}));
  REQUIRE_THROWS_AS(cp.put("a", Tensor::ones({2})), ContractError);
  REQUIRE_THROWS_AS(cp.get("missing"), ContractError);
  REQUIRE(cp.contains("a"));
  REQUIRE_FALSE(cp.contains("b"));
}

TEST_CASE("fnv1a64 matches published vectors", "[checkpoint]") {
  REQUIRE(fnv1a64("") == 14695981039346656037ULL);
  REQUIRE(fnv1a64("a") == 0xaf63dc4c8601ec8cULL);
  REQUIRE(fnv1a64("foobar") == 0x85944171f73967e8ULL);
}
