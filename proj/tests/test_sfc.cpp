#include <gtest/gtest.h>

#include <algorithm>
#include <random>
#include <set>
#include <unordered_set>

#include "spm/sfc.hpp"

using namespace spm;

namespace {

// Bit-by-bit interleave, independent of the magic-mask implementation.
std::uint64_t naive_morton(const Cell& c, int depth) {
  std::uint64_t key = 0;
  for (int j = 0; j < depth; ++j)
    for (int a = 0; a < 3; ++a) key |= static_cast<std::uint64_t>((c[a] >> j) & 1) << (3 * j + a);
  return key;
}

int l1(const Cell& a, const Cell& b) {
  return std::abs(a[0] - b[0]) + std::abs(a[1] - b[1]) + std::abs(a[2] - b[2]);
}

std::vector<Cell> cube(int depth) {
  const int side = 1 << depth;
  std::vector<Cell> cells;
  for (int x = 0; x < side; ++x)
    for (int y = 0; y < side; ++y)
      for (int z = 0; z < side; ++z) cells.push_back({x, y, z});
  return cells;
}

}  // namespace

TEST(ZOrder, HandValues) {
  EXPECT_EQ(z_encode({0, 0, 0}, 5).value, 0u);
  EXPECT_EQ(z_encode({1, 2, 3}, 2).value, 53u);
  EXPECT_EQ(z_decode({53, 2}), (Cell{1, 2, 3}));
  EXPECT_EQ(z_decode({0, 3}), (Cell{0, 0, 0}));
}

TEST(ZOrder, MatchesNaiveInterleaveAtFullDepth) {
  std::mt19937_64 rng(5);
  std::uniform_int_distribution<int> d(0, (1 << 16) - 1);
  for (int i = 0; i < 1000; ++i) {
    const Cell c = {d(rng), d(rng), d(rng)};
    EXPECT_EQ(z_encode(c, 16).value, naive_morton(c, 16));
  }
}

TEST(ZOrder, ExhaustiveRoundTrip) {
  for (int depth = 1; depth <= 4; ++depth) {
    for (const Cell& c : cube(depth)) ASSERT_EQ(z_decode(z_encode(c, depth)), c);
    for (std::uint64_t k = 0; k < (std::uint64_t{1} << (3 * depth)); ++k) {
      ASSERT_EQ(z_encode(z_decode({k, depth}), depth).value, k);
    }
  }
}

TEST(ZOrder, RangeErrors) {
  EXPECT_THROW(z_encode({4, 0, 0}, 2), RangeError);
  EXPECT_THROW(z_encode({-1, 0, 0}, 2), RangeError);
  EXPECT_THROW(z_encode({0, 0, 0}, 17), RangeError);
  EXPECT_THROW(z_encode({0, 0, 0}, 0), RangeError);
  EXPECT_THROW(z_decode({64, 2}), RangeError);
}

TEST(Hilbert, OriginStartsTheCurve) {
  for (int depth = 1; depth <= 16; ++depth) {
    EXPECT_EQ(hilbert_encode({0, 0, 0}, depth).value, 0u);
    EXPECT_EQ(hilbert_decode({0, depth}), (Cell{0, 0, 0}));
  }
}

TEST(Hilbert, ExhaustiveBijectionAndAdjacency) {
  for (int depth = 1; depth <= 4; ++depth) {
    const std::uint64_t n = std::uint64_t{1} << (3 * depth);
    std::set<Cell> seen;
    Cell prev{};
    for (std::uint64_t k = 0; k < n; ++k) {
      const Cell c = hilbert_decode({k, depth});
      ASSERT_EQ(hilbert_encode(c, depth).value, k);
      ASSERT_TRUE(seen.insert(c).second);
      if (k > 0) {
        ASSERT_EQ(l1(prev, c), 1) << "depth " << depth << " key " << k;
      }
      prev = c;
    }
    EXPECT_EQ(seen.size(), n);
  }
}

TEST(Hilbert, RandomRoundTripAtDepth16) {
  std::mt19937_64 rng(9);
  std::uniform_int_distribution<int> d(0, (1 << 16) - 1);
  std::unordered_set<std::uint64_t> keys;
  for (int i = 0; i < 100000; ++i) {
    const Cell c = {d(rng), d(rng), d(rng)};
    const CurveKey k = hilbert_encode(c, 16);
    ASSERT_EQ(hilbert_decode(k), c);
    ASSERT_LT(k.value, std::uint64_t{1} << 48);
  }
}

TEST(ZOrder, IsNotFaceAdjacent) {
  // (1,0,0) at key 1 is followed by (0,1,0) at key 2: L1 distance 2.
  EXPECT_EQ(l1(z_decode({1, 1}), z_decode({2, 1})), 2);
}

TEST(Patterns, DelegationAndRotation) {
  const Cell c = {1, 2, 3};
  EXPECT_EQ(apply_pattern(SerializationPattern::Z, c, 3), z_encode(c, 3));
  EXPECT_EQ(apply_pattern(SerializationPattern::TransZ, c, 3), z_encode({2, 3, 1}, 3));
  EXPECT_EQ(apply_pattern(SerializationPattern::Hilbert, c, 3), hilbert_encode(c, 3));
  EXPECT_EQ(apply_pattern(SerializationPattern::TransHilbert, c, 3), hilbert_encode({2, 3, 1}, 3));
}

TEST(Patterns, AllFourAreBijections) {
  for (int depth = 1; depth <= 4; ++depth)
    for (SerializationPattern p : kAllPatterns) {
      std::unordered_set<std::uint64_t> keys;
      for (const Cell& c : cube(depth)) {
        const CurveKey k = apply_pattern(p, c, depth);
        ASSERT_TRUE(keys.insert(k.value).second);
        ASSERT_EQ(invert_pattern(p, k), c);
      }
    }
}

TEST(Patterns, Names) {
  for (SerializationPattern p : kAllPatterns) EXPECT_EQ(parse_pattern(pattern_name(p)), p);
  EXPECT_EQ(pattern_name(SerializationPattern::TransZ), "z-trans");
  EXPECT_THROW(parse_pattern("peano"), ParseError);
}

TEST(OrderPoints, TrivialCases) {
  std::vector<Cell> one = {{3, 1, 2}};
  EXPECT_EQ(order_points(one, SerializationPattern::Hilbert, 2).perm, (IndexVec{0}));

  std::vector<Cell> sorted;
  for (std::uint64_t k = 0; k < 20; ++k) sorted.push_back(z_decode({k * 3, 4}));
  const auto order = order_points(sorted, SerializationPattern::Z, 4);
  for (std::size_t i = 0; i < sorted.size(); ++i) EXPECT_EQ(order.perm[i], static_cast<std::int64_t>(i));
}

TEST(OrderPoints, PermutationInvariantWithDuplicates) {
  std::mt19937_64 rng(4);
  std::uniform_int_distribution<int> d(0, 5);
  std::vector<Cell> cells(200);
  for (auto& c : cells) c = {d(rng), d(rng), d(rng)};  // many duplicates
  for (SerializationPattern p : kAllPatterns) {
    const auto base = order_points(cells, p, 3);
    for (std::size_t i = 0; i < cells.size(); ++i) {
      ASSERT_EQ(base.inv_perm[static_cast<std::size_t>(base.perm[i])], static_cast<std::int64_t>(i));
    }
    for (int trial = 0; trial < 5; ++trial) {
      std::vector<std::size_t> pi(cells.size());
      std::iota(pi.begin(), pi.end(), 0);
      std::shuffle(pi.begin(), pi.end(), rng);
      std::vector<Cell> shuffled(cells.size());
      for (std::size_t i = 0; i < cells.size(); ++i) shuffled[i] = cells[pi[i]];
      const auto o = order_points(shuffled, p, 3);
      EXPECT_EQ(o.keys, base.keys);
      for (std::size_t pos = 0; pos < cells.size(); ++pos) {
        EXPECT_EQ(shuffled[static_cast<std::size_t>(o.perm[pos])], cells[static_cast<std::size_t>(base.perm[pos])]);
      }
    }
  }
}

TEST(OrderPoints, RequiredDepth) {
  std::vector<Cell> c = {{0, 0, 0}};
  EXPECT_EQ(required_depth(c), 1);
  c.push_back({3, 0, 0});
  EXPECT_EQ(required_depth(c), 2);
  c.push_back({0, 4, 0});
  EXPECT_EQ(required_depth(c), 3);
  c.push_back({0, 0, 1 << 16});
  EXPECT_THROW(required_depth(c), RangeError);
}
