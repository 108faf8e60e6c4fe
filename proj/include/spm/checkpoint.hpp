#pragma once

// SPMB checkpoint format, all integers and floats little-endian:
//   "SPMB" | version u32 | entry count u32 |
//   per entry: name length u16 | UTF-8 name | rank u8 | extents u32 x rank | f64 x product(extents)

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <istream>
#include <ostream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "spm/autodiff.hpp"

namespace spm {

inline constexpr std::uint32_t kCheckpointVersion = 1;
inline constexpr std::size_t kMaxCheckpointTensor = std::size_t{1} << 28;

struct CheckpointEntry {
  std::string name;
  Tensor value;
};

namespace detail {

template <typename T>
void put_le(std::ostream& os, T v) {
  unsigned char buf[sizeof(T)];
  std::uint64_t bits = 0;
  if constexpr (std::is_floating_point_v<T>) {
    bits = std::bit_cast<std::uint64_t>(static_cast<double>(v));
  } else {
    bits = static_cast<std::uint64_t>(v);
  }
  for (std::size_t i = 0; i < sizeof(T); ++i) buf[i] = static_cast<unsigned char>((bits >> (8 * i)) & 0xff);
  os.write(reinterpret_cast<const char*>(buf), sizeof(T));
}

template <typename T>
T get_le(std::istream& is) {
  unsigned char buf[sizeof(T)];
  if (!is.read(reinterpret_cast<char*>(buf), sizeof(T))) throw CheckpointError("checkpoint: unexpected end of file");
  std::uint64_t bits = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) bits |= static_cast<std::uint64_t>(buf[i]) << (8 * i);
  if constexpr (std::is_floating_point_v<T>) {
    return std::bit_cast<double>(bits);
  } else {
    return static_cast<T>(bits);
  }
}

}  // namespace detail

inline void write_checkpoint(std::ostream& os, const std::vector<CheckpointEntry>& entries) {
  os.write("SPMB", 4);
  detail::put_le<std::uint32_t>(os, kCheckpointVersion);
  detail::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(entries.size()));
  for (const auto& e : entries) {
    if (e.name.size() > 0xffff) throw CheckpointError("checkpoint: name too long");
    if (e.value.rank() > 0xff) throw CheckpointError("checkpoint: rank too large");
    detail::put_le<std::uint16_t>(os, static_cast<std::uint16_t>(e.name.size()));
    os.write(e.name.data(), static_cast<std::streamsize>(e.name.size()));
    detail::put_le<std::uint8_t>(os, static_cast<std::uint8_t>(e.value.rank()));
    for (std::size_t d : e.value.shape()) detail::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(d));
    for (double v : e.value.values()) detail::put_le<double>(os, v);
  }
  if (!os) throw CheckpointError("checkpoint: write failed");
}

inline std::vector<CheckpointEntry> read_checkpoint(std::istream& is) {
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, "SPMB", 4) != 0) throw CheckpointError("checkpoint: bad magic");
  const auto version = detail::get_le<std::uint32_t>(is);
  if (version != kCheckpointVersion) throw CheckpointError("checkpoint: unsupported version " + std::to_string(version));
  const auto count = detail::get_le<std::uint32_t>(is);
  std::vector<CheckpointEntry> out;
  out.reserve(std::min<std::uint32_t>(count, 4096));
  for (std::uint32_t n = 0; n < count; ++n) {
    const auto len = detail::get_le<std::uint16_t>(is);
    std::string name(len, '\0');
    if (len && !is.read(name.data(), len)) throw CheckpointError("checkpoint: truncated name");
    const auto rank = detail::get_le<std::uint8_t>(is);
    Shape shape(rank);
    for (auto& d : shape) d = detail::get_le<std::uint32_t>(is);
    std::size_t total = 1;
    for (std::size_t d : shape) {
      if (d == 0) throw CheckpointError("checkpoint: zero extent in '" + name + "'");
      total *= d;
      if (total > kMaxCheckpointTensor) throw CheckpointError("checkpoint: tensor '" + name + "' is implausibly large");
    }
    if (rank == 0) throw CheckpointError("checkpoint: rank-0 entry '" + name + "'");
    std::vector<double> values(total);
    for (double& v : values) v = detail::get_le<double>(is);
    out.push_back({std::move(name), Tensor(std::move(shape), std::move(values))});
  }
  return out;
}

inline void save_checkpoint(const std::filesystem::path& path, const ParamStore& store) {
  std::vector<CheckpointEntry> entries;
  entries.reserve(store.size());
  for (const auto& [name, v] : store.entries()) entries.push_back({name, v.value()});
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw CheckpointError("checkpoint: cannot open " + tmp.string());
    write_checkpoint(os, entries);
  }
  std::filesystem::rename(tmp, path);
}

/// Overwrites every parameter of `store` from the file. Names and shapes
/// must match exactly.
inline void load_checkpoint(const std::filesystem::path& path, ParamStore& store) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw CheckpointError("checkpoint: cannot open " + path.string());
  auto entries = read_checkpoint(is);
  if (entries.size() != store.size()) {
    throw CheckpointError("checkpoint: " + std::to_string(entries.size()) + " entries, model has " + std::to_string(store.size()));
  }
  std::unordered_set<std::string> names;
  for (const auto& e : entries) {
    if (!names.insert(e.name).second) throw CheckpointError("checkpoint: duplicate entry '" + e.name + "'");
    if (!store.contains(e.name)) throw CheckpointError("checkpoint: unknown parameter '" + e.name + "'");
    const Var v = store.get(e.name);
    if (v.shape() != e.value.shape()) {
      throw CheckpointError("checkpoint: shape mismatch for '" + e.name + "': " + shape_str(e.value.shape()) + " vs " +
                            shape_str(v.shape()));
    }
  }
  for (auto& e : entries) store.get(e.name).mutable_value() = std::move(e.value);
}

}  // namespace spm
