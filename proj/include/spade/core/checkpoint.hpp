#pragma once

#include <bit>
#include <cstdint>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "spade/core/errors.hpp"
#include "spade/core/tensor.hpp"

namespace spade {

// Named-tensor container, format SPADEv1:
//   bytes 0..7   magic "SPADEv1\n"
//   u32 LE       tensor count
//   per tensor:  u32 LE name length, name bytes (UTF-8),
//                u32 LE ndim, ndim x u64 LE dims,
//                payload: numel x f64, IEEE-754 little-endian
// Writes and reads are explicitly little-endian so files round-trip
// bit-identically across hosts.
namespace ckpt {

constexpr char kMagic[8] = {'S', 'P', 'A', 'D', 'E', 'v', '1', '\n'};

inline void put_u32(std::ostream& os, std::uint32_t v) {
  char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  os.write(b, 4);
}

inline void put_u64(std::ostream& os, std::uint64_t v) {
  char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  os.write(b, 8);
}

inline void put_f64(std::ostream& os, double d) {
  put_u64(os, std::bit_cast<std::uint64_t>(d));
}

inline std::uint32_t get_u32(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  if (!is) throw ParseError("truncated checkpoint (u32)");
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
  return v;
}

inline std::uint64_t get_u64(std::istream& is) {
  unsigned char b[8];
  is.read(reinterpret_cast<char*>(b), 8);
  if (!is) throw ParseError("truncated checkpoint (u64)");
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}

inline double get_f64(std::istream& is) { return std::bit_cast<double>(get_u64(is)); }

}  // namespace ckpt

// Ordered name -> tensor map; save order is the insertion order.
class Checkpoint {
public:
  void put(const std::string& name, const Tensor& t) {
    if (index_.count(name)) throw ContractError("duplicate checkpoint tensor name: " + name);
    index_[name] = entries_.size();
    entries_.push_back({name, t.detached()});
  }

  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  const Tensor& get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ContractError("checkpoint tensor not found: " + name);
    return entries_[it->second].tensor;
  }

  std::size_t size() const { return entries_.size(); }

  std::vector<std::string> names() const {
    std::vector<std::string> out;
    for (const auto& e : entries_) out.push_back(e.name);
    return out;
  }

  void save(const std::string& path) const {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw ContractError("cannot open for writing: " + path);
    os.write(ckpt::kMagic, 8);
    ckpt::put_u32(os, static_cast<std::uint32_t>(entries_.size()));
    for (const auto& e : entries_) {
      ckpt::put_u32(os, static_cast<std::uint32_t>(e.name.size()));
      os.write(e.name.data(), static_cast<std::streamsize>(e.name.size()));
      ckpt::put_u32(os, static_cast<std::uint32_t>(e.tensor.ndim()));
      for (auto d : e.tensor.shape()) ckpt::put_u64(os, d);
      for (double v : e.tensor.data()) ckpt::put_f64(os, v);
    }
    if (!os) throw ContractError("write failed: " + path);
  }

  static Checkpoint load(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw ContractError("cannot open for reading: " + path);
    char magic[8];
    is.read(magic, 8);
    if (!is || !std::equal(magic, magic + 8, ckpt::kMagic))
      throw ParseError("bad checkpoint magic in " + path);
    const std::uint32_t count = ckpt::get_u32(is);
    Checkpoint cp;
    for (std::uint32_t t = 0; t < count; ++t) {
      const std::uint32_t nlen = ckpt::get_u32(is);
      std::string name(nlen, '\0');
      is.read(name.data(), nlen);
      if (!is) throw ParseError("truncated checkpoint (name)");
      const std::uint32_t ndim = ckpt::get_u32(is);
      Shape shape(ndim);
      for (auto& d : shape) d = ckpt::get_u64(is);
      std::vector<double> data(shape_numel(shape));
      for (auto& v : data) v = ckpt::get_f64(is);
      cp.put(name, Tensor::from_data(std::move(shape), std::move(data)));
    }
    return cp;
  }

private:
  struct Entry {
    std::string name;
    Tensor tensor;
  };
  std::vector<Entry> entries_;
  std::map<std::string, std::size_t> index_;
};

// FNV-1a over a byte string; used for config fingerprints.
inline std::uint64_t fnv1a64(const std::string& s) {
  std::uint64_t h = 14695981039346656037ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

}  // namespace spade
