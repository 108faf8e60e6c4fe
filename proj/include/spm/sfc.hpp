#pragma once

// 3D space-filling curve codecs (Morton/Z-order and Hilbert) and the point
// serialization built on them.

#include <algorithm>
#include <array>
#include <compare>
#include <cstdint>
#include <numeric>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "spm/error.hpp"
#include "spm/tensor.hpp"

namespace spm {

using Cell = std::array<std::int32_t, 3>;

inline constexpr int kMaxCurveDepth = 16;

struct CurveKey {
  std::uint64_t value = 0;
  int depth = 1;  // bits per axis

  friend auto operator<=>(const CurveKey&, const CurveKey&) = default;
};

enum class SerializationPattern { Z, TransZ, Hilbert, TransHilbert };

inline constexpr std::array<SerializationPattern, 4> kAllPatterns = {
    SerializationPattern::Z, SerializationPattern::TransZ, SerializationPattern::Hilbert, SerializationPattern::TransHilbert};

inline std::string_view pattern_name(SerializationPattern p) {
  switch (p) {
    case SerializationPattern::Z: return "z";
    case SerializationPattern::TransZ: return "z-trans";
    case SerializationPattern::Hilbert: return "hilbert";
    case SerializationPattern::TransHilbert: return "hilbert-trans";
  }
  return "?";
}

inline SerializationPattern parse_pattern(std::string_view name) {
  for (SerializationPattern p : kAllPatterns)
    if (pattern_name(p) == name) return p;
  throw ParseError("unknown serialization pattern '" + std::string(name) + "'");
}

namespace detail {

inline void check_depth(int depth) {
  if (depth < 1 || depth > kMaxCurveDepth) throw RangeError("curve depth must be in [1, 16], got " + std::to_string(depth));
}

inline void check_cell(const Cell& c, int depth) {
  check_depth(depth);
  const std::int64_t limit = std::int64_t{1} << depth;
  for (std::int32_t v : c)
    if (v < 0 || v >= limit) {
      throw RangeError("cell coordinate " + std::to_string(v) + " outside [0, " + std::to_string(limit) + ")");
    }
}

// Spreads the low 21 bits of x so bit j lands at bit 3j.
inline std::uint64_t spread_bits(std::uint64_t x) {
  x &= 0x1fffff;
  x = (x | x << 32) & 0x1f00000000ffffULL;
  x = (x | x << 16) & 0x1f0000ff0000ffULL;
  x = (x | x << 8) & 0x100f00f00f00f00fULL;
  x = (x | x << 4) & 0x10c30c30c30c30c3ULL;
  x = (x | x << 2) & 0x1249249249249249ULL;
  return x;
}

inline std::uint64_t compact_bits(std::uint64_t x) {
  x &= 0x1249249249249249ULL;
  x = (x ^ (x >> 2)) & 0x10c30c30c30c30c3ULL;
  x = (x ^ (x >> 4)) & 0x100f00f00f00f00fULL;
  x = (x ^ (x >> 8)) & 0x1f0000ff0000ffULL;
  x = (x ^ (x >> 16)) & 0x1f00000000ffffULL;
  x = (x ^ (x >> 32)) & 0x1fffff;
  return x;
}

inline void check_key(const CurveKey& key) {
  check_depth(key.depth);
  if (key.value >> (3 * key.depth)) throw RangeError("curve key exceeds 2^(3*depth)");
}

}  // namespace detail

/// Morton interleave: source bit j of x, y, z goes to bits 3j, 3j+1, 3j+2.
inline CurveKey z_encode(const Cell& cell, int depth) {
  detail::check_cell(cell, depth);
  const std::uint64_t v = detail::spread_bits(static_cast<std::uint64_t>(cell[0])) |
                          detail::spread_bits(static_cast<std::uint64_t>(cell[1])) << 1 |
                          detail::spread_bits(static_cast<std::uint64_t>(cell[2])) << 2;
  return {v, depth};
}

inline Cell z_decode(const CurveKey& key) {
  detail::check_key(key);
  return {static_cast<std::int32_t>(detail::compact_bits(key.value)),
          static_cast<std::int32_t>(detail::compact_bits(key.value >> 1)),
          static_cast<std::int32_t>(detail::compact_bits(key.value >> 2))};
}

// Hilbert codec in the transposed-axes formulation (Skilling 2004): the
// axes are converted in place to the "transpose" of the Hilbert index, whose
// bits are then interleaved with axis 0 most significant within each triple.

inline CurveKey hilbert_encode(const Cell& cell, int depth) {
  detail::check_cell(cell, depth);
  std::array<std::uint32_t, 3> x = {static_cast<std::uint32_t>(cell[0]), static_cast<std::uint32_t>(cell[1]),
                                    static_cast<std::uint32_t>(cell[2])};
  const std::uint32_t m = 1u << (depth - 1);
  // Inverse undo.
  for (std::uint32_t q = m; q > 1; q >>= 1) {
    const std::uint32_t p = q - 1;
    for (int i = 0; i < 3; ++i) {
      if (x[i] & q) {
        x[0] ^= p;
      } else {
        const std::uint32_t t = (x[0] ^ x[i]) & p;
        x[0] ^= t;
        x[i] ^= t;
      }
    }
  }
  // Gray encode.
  x[1] ^= x[0];
  x[2] ^= x[1];
  std::uint32_t t = 0;
  for (std::uint32_t q = m; q > 1; q >>= 1)
    if (x[2] & q) t ^= q - 1;
  for (auto& v : x) v ^= t;

  const std::uint64_t v = detail::spread_bits(x[2]) | detail::spread_bits(x[1]) << 1 | detail::spread_bits(x[0]) << 2;
  return {v, depth};
}

inline Cell hilbert_decode(const CurveKey& key) {
  detail::check_key(key);
  std::array<std::uint32_t, 3> x = {static_cast<std::uint32_t>(detail::compact_bits(key.value >> 2)),
                                    static_cast<std::uint32_t>(detail::compact_bits(key.value >> 1)),
                                    static_cast<std::uint32_t>(detail::compact_bits(key.value))};
  const std::uint32_t n = 2u << (key.depth - 1);
  // Gray decode.
  std::uint32_t t = x[2] >> 1;
  x[2] ^= x[1];
  x[1] ^= x[0];
  x[0] ^= t;
  // Undo excess work.
  for (std::uint32_t q = 2; q != n; q <<= 1) {
    const std::uint32_t p = q - 1;
    for (int i = 2; i >= 0; --i) {
      if (x[i] & q) {
        x[0] ^= p;
      } else {
        t = (x[0] ^ x[i]) & p;
        x[0] ^= t;
        x[i] ^= t;
      }
    }
  }
  return {static_cast<std::int32_t>(x[0]), static_cast<std::int32_t>(x[1]), static_cast<std::int32_t>(x[2])};
}

/// Trans variants rotate (x,y,z) -> (y,z,x) before the base encode.
inline CurveKey apply_pattern(SerializationPattern pattern, const Cell& cell, int depth) {
  const Cell rotated = {cell[1], cell[2], cell[0]};
  switch (pattern) {
    case SerializationPattern::Z: return z_encode(cell, depth);
    case SerializationPattern::TransZ: return z_encode(rotated, depth);
    case SerializationPattern::Hilbert: return hilbert_encode(cell, depth);
    case SerializationPattern::TransHilbert: return hilbert_encode(rotated, depth);
  }
  throw ContractError("apply_pattern: invalid pattern");
}

inline Cell invert_pattern(SerializationPattern pattern, const CurveKey& key) {
  Cell c{};
  switch (pattern) {
    case SerializationPattern::Z: return z_decode(key);
    case SerializationPattern::Hilbert: return hilbert_decode(key);
    case SerializationPattern::TransZ: c = z_decode(key); break;
    case SerializationPattern::TransHilbert: c = hilbert_decode(key); break;
  }
  return {c[2], c[0], c[1]};
}

/// Smallest depth (>= 1) whose cube holds every cell.
inline int required_depth(std::span<const Cell> cells) {
  std::int32_t mx = 0;
  for (const Cell& c : cells)
    for (std::int32_t v : c) {
      if (v < 0) throw RangeError("required_depth: negative cell coordinate");
      mx = std::max(mx, v);
    }
  int depth = 1;
  while ((std::int64_t{1} << depth) <= mx) ++depth;
  if (depth > kMaxCurveDepth) throw RangeError("cell extent needs more than 16 bits per axis");
  return depth;
}

struct SerializationOrder {
  SerializationPattern pattern = SerializationPattern::Z;
  IndexVec perm;      // sequence position -> point row
  IndexVec inv_perm;  // point row -> sequence position
  std::vector<std::uint64_t> keys;  // curve key at each sequence position

  std::size_t size() const { return perm.size(); }
};

/// Sorts points by (curve key, cell x, y, z). Rows with identical cells keep
/// their input order.
inline SerializationOrder order_points(std::span<const Cell> cells, SerializationPattern pattern, int depth) {
  std::vector<std::uint64_t> key(cells.size());
  for (std::size_t i = 0; i < cells.size(); ++i) key[i] = apply_pattern(pattern, cells[i], depth).value;
  SerializationOrder order;
  order.pattern = pattern;
  order.perm.resize(cells.size());
  std::iota(order.perm.begin(), order.perm.end(), std::int64_t{0});
  std::stable_sort(order.perm.begin(), order.perm.end(), [&](std::int64_t a, std::int64_t b) {
    const auto ua = static_cast<std::size_t>(a), ub = static_cast<std::size_t>(b);
    if (key[ua] != key[ub]) return key[ua] < key[ub];
    return cells[ua] < cells[ub];
  });
  order.inv_perm.resize(cells.size());
  order.keys.resize(cells.size());
  for (std::size_t pos = 0; pos < cells.size(); ++pos) {
    const auto row = static_cast<std::size_t>(order.perm[pos]);
    order.inv_perm[row] = static_cast<std::int64_t>(pos);
    order.keys[pos] = key[row];
  }
  return order;
}

}  // namespace spm
