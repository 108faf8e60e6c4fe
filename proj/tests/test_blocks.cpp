#include <gtest/gtest.h>

#include <random>
#include <set>

#include "spm/blocks.hpp"
#include "spm/gradcheck.hpp"
#include "test_util.hpp"

using namespace spm;
using spm::testing::random_tensor;
using spm::testing::readout;

TEST(Partition, SpecSizes) {
  const auto exact = partition_subsequences(2048, 1024);
  EXPECT_EQ(exact.count, 2u);
  EXPECT_EQ(exact.padded_slots(), 0u);

  const auto padded = partition_subsequences(1500, 1024);
  EXPECT_EQ(padded.count, 2u);
  EXPECT_EQ(padded.sub_len, 1024u);
  EXPECT_EQ(padded.padded_slots(), 548u);
  EXPECT_EQ(padded.slots(), 2048u);

  const auto single = partition_subsequences(500, 1024);
  EXPECT_EQ(single.count, 1u);
  EXPECT_EQ(single.sub_len, 500u);
  EXPECT_EQ(single.padded_slots(), 0u);
  EXPECT_THROW(partition_subsequences(0, 4), ContractError);
}

TEST(Partition, PaddingReplicatesPrecedingTail) {
  for (auto [n, len] : std::vector<std::pair<std::size_t, std::size_t>>{{1500, 1024}, {10, 4}, {9, 4}, {13, 5}, {7, 7}}) {
    const auto lay = partition_subsequences(n, len);
    EXPECT_EQ(lay.slots(), lay.count * lay.sub_len);
    std::size_t valid = 0;
    for (bool v : lay.valid_mask) valid += v;
    EXPECT_EQ(valid, n);
    for (std::size_t pos = 0; pos < n; ++pos) {
      const auto slot = static_cast<std::size_t>(lay.position_slot[pos]);
      EXPECT_TRUE(lay.valid_mask[slot]);
      EXPECT_EQ(lay.slot_src[slot], static_cast<std::int64_t>(pos));
    }
    const std::size_t last = (lay.count - 1) * lay.sub_len;
    const std::size_t pad = lay.padded_slots();
    for (std::size_t p = 0; p < pad; ++p) {
      const std::size_t slot = n + p;
      EXPECT_FALSE(lay.valid_mask[slot]);
      // Padding follows every valid slot and copies the preceding window's final points in order.
      EXPECT_EQ(lay.slot_src[slot], static_cast<std::int64_t>(last - pad + p));
      EXPECT_LT(lay.slot_src[slot], static_cast<std::int64_t>(last));
    }
  }
}

TEST(CausalConv, HandCase) {
  // Width 2 weights (w0 for t-1, w1 for t), single channel.
  const Var x = constant(Tensor({4, 1}, std::vector<double>{1, 2, 3, 4}));
  const Var w = constant(Tensor({1, 2}, std::vector<double>{10, 1}));
  const Var b = constant(Tensor({1}, 0.5));
  EXPECT_EQ(causal_conv1d(x, w, b).value(), Tensor({4, 1}, std::vector<double>{1.5, 12.5, 23.5, 34.5}));
  // Two segments of length 2: the left tap sees zeros at each segment start.
  EXPECT_EQ(causal_conv1d(x, w, b, 2).value(), Tensor({4, 1}, std::vector<double>{1.5, 12.5, 3.5, 34.5}));
}

TEST(CausalConv, GradientCheck) {
  std::mt19937_64 rng(1);
  ParamStore store;
  Var x = store.add("x", random_tensor({12, 3}, rng));
  Var w = store.add("w", random_tensor({3, 4}, rng));
  Var b = store.add("b", random_tensor({3}, rng));
  const auto r = check_gradients([&] { return readout(causal_conv1d(x, w, b, 6)); }, store);
  EXPECT_LT(r.max_rel_error, 1e-6);
}

TEST(SegmentFlip, ReversesEachSegment) {
  EXPECT_EQ(segment_flip_index(6, 3), (IndexVec{2, 1, 0, 5, 4, 3}));
  EXPECT_EQ(segment_flip_index(4, 0), (IndexVec{3, 2, 1, 0}));
}

class BlockTest : public ::testing::Test {
 protected:
  std::mt19937_64 rng{2};
  std::mt19937_64 init{3};
  ParamStore store;

  BlockConfig config(std::size_t c, bool bi, bool pre = true) {
    BlockConfig cfg;
    cfg.channels = c;
    cfg.d_state = 4;
    cfg.mlp_ratio = 2;
    cfg.bidirectional = bi;
    cfg.pre_norm = pre;
    return cfg;
  }
  // Non-trivial norm affine parameters so gradient checks see their effect.
  void perturb_norms() {
    for (auto& [name, v] : store.entries())
      if (name.find("norm") != std::string::npos || name.find("bias") != std::string::npos) {
        Var p = v;
        for (double& x : p.mutable_value().storage()) x += std::uniform_real_distribution<double>(-0.3, 0.3)(rng);
      }
  }
};

TEST_F(BlockTest, ZeroOutputProjectionIsIdentity) {
  for (bool bi : {false, true}) {
    ParamStore local;
    const BlockConfig cfg = config(6, bi);
    MambaParams p = MambaParams::make(ParamFactory(local, init, "m"), cfg);
    p.out_proj.weight.mutable_value().fill(0.0);
    const Tensor x = random_tensor({9, 6}, rng);
    EXPECT_EQ(mamba_block_forward(constant(x), cfg, p).value(), x);
  }
}

TEST_F(BlockTest, ShapePreservation) {
  const BlockConfig cfg = config(5, false);
  const MambaParams uni = MambaParams::make(ParamFactory(store, init, "uni"), cfg);
  const BlockConfig bcfg = config(5, true);
  const MambaParams bi = MambaParams::make(ParamFactory(store, init, "bi"), bcfg);
  for (std::size_t l : {1u, 7u, 1024u}) {
    const Var x = constant(random_tensor({l, 5}, rng));
    EXPECT_EQ(mamba_block_forward(x, cfg, uni).shape(), (Shape{l, 5}));
    EXPECT_EQ(bidirectional_mamba_forward(x, bcfg, bi).shape(), (Shape{l, 5}));
  }
  EXPECT_THROW(mamba_block_forward(constant(Tensor({3, 4})), cfg, uni), DimensionError);
}

TEST_F(BlockTest, ReverseBranchIsFlippedForwardBranch) {
  const BlockConfig cfg = config(4, true);
  const MambaParams p = MambaParams::make(ParamFactory(store, init, "m"), cfg);
  const Tensor x = random_tensor({10, cfg.inner()}, rng);
  const Var flipped = gather_rows(constant(x), segment_flip_index(10, 5));
  const Tensor lhs = ssm_branch(flipped, p.forward, cfg, 5, true).value();
  const Tensor rhs = gather_rows(ssm_branch(constant(x), p.forward, cfg, 5, false), segment_flip_index(10, 5)).value();
  EXPECT_EQ(lhs, rhs);
}

TEST_F(BlockTest, TwoBlockStackGradientCheck) {
  const BlockConfig cfg = config(8, false);
  const MambaParams a = MambaParams::make(ParamFactory(store, init, "block0"), cfg);
  const MambaParams b = MambaParams::make(ParamFactory(store, init, "block1"), cfg);
  perturb_norms();
  const Tensor x = random_tensor({16, 8}, rng);
  const auto r = check_gradients([&] { return readout(mamba_block_forward(mamba_block_forward(constant(x), cfg, a), cfg, b)); }, store);
  EXPECT_LT(r.max_rel_error, 1e-4);
}

TEST_F(BlockTest, BidirectionalGradientCheck) {
  const BlockConfig cfg = config(4, true);
  const MambaParams p = MambaParams::make(ParamFactory(store, init, "m"), cfg);
  perturb_norms();
  Var x = store.add("x", random_tensor({12, 4}, rng));
  const auto r = check_gradients([&] { return readout(mamba_block_forward(x, cfg, p, 6)); }, store);
  ASSERT_NE(r.find("m.ssm_rev.A_log"), nullptr);
  EXPECT_LT(r.max_rel_error, 1e-4);
}

TEST_F(BlockTest, PostNormGradientCheck) {
  const BlockConfig cfg = config(4, false, false);
  const MambaParams p = MambaParams::make(ParamFactory(store, init, "m"), cfg);
  perturb_norms();
  const Tensor x = random_tensor({8, 4}, rng);
  EXPECT_LT(check_gradients([&] { return readout(mamba_block_forward(constant(x), cfg, p)); }, store).max_rel_error, 1e-4);
}

TEST_F(BlockTest, PaddingNeutralityUnidirectional) {
  const BlockConfig cfg = config(4, false);
  const MambaParams p = MambaParams::make(ParamFactory(store, init, "m"), cfg);
  const std::size_t r = 11, len = 16;
  const Tensor valid = random_tensor({r, 4}, rng);
  Tensor padded = random_tensor({len, 4}, rng);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t c = 0; c < 4; ++c) padded.at(i, c) = valid.at(i, c);
  const Tensor alone = mamba_block_forward(constant(valid), cfg, p).value();
  const Tensor full = mamba_block_forward(constant(padded), cfg, p).value();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t c = 0; c < 4; ++c) EXPECT_EQ(full.at(i, c), alone.at(i, c));
}

TEST_F(BlockTest, MaskedLossGivesZeroGradientToPaddingOnlyInputs) {
  const BlockConfig cfg = config(4, false);
  const MambaParams p = MambaParams::make(ParamFactory(store, init, "m"), cfg);
  Var x(random_tensor({16, 4}, rng), true);
  Tensor mask({16, 4});
  for (std::size_t i = 0; i < 11; ++i)
    for (std::size_t c = 0; c < 4; ++c) mask.at(i, c) = 1.0 + 0.1 * static_cast<double>(c);
  backward(weighted_sum(mamba_block_forward(x, cfg, p), mask));
  for (std::size_t i = 11; i < 16; ++i)
    for (std::size_t c = 0; c < 4; ++c) EXPECT_EQ(x.grad().at(i, c), 0.0);
  double live = 0.0;
  for (std::size_t i = 0; i < 11; ++i) live += std::abs(x.grad().at(i, 0));
  EXPECT_GT(live, 0.0);
}

TEST_F(BlockTest, MlpIdentityPermutationAndGradients) {
  MlpParams p = MlpParams::make(ParamFactory(store, init, "mlp"), 5, 3);
  const Tensor x = random_tensor({7, 5}, rng);
  {
    MlpParams zero = p;
    Tensor w = zero.fc2.weight.value();
    ParamStore tmp;
    zero.fc2.weight = tmp.add("w", Tensor(w.shape(), 0.0));
    EXPECT_EQ(mlp_block(constant(x), zero).value(), x);
  }
  const IndexVec perm = {3, 0, 6, 1, 5, 2, 4};
  const Tensor a = gather_rows(mlp_block(constant(x), p), perm).value();
  const Tensor b = mlp_block(gather_rows(constant(x), perm), p).value();
  EXPECT_EQ(a, b);
  perturb_norms();
  EXPECT_LT(check_gradients([&] { return readout(mlp_block(constant(x), p)); }, store).max_rel_error, 1e-6);
  EXPECT_LT(check_gradients([&] { return readout(mlp_block(constant(x), p, false)); }, store).max_rel_error, 1e-6);
}

namespace {

PointCloud cells_cloud(const std::vector<Cell>& cells, const Tensor& feats) {
  PointCloud pc;
  pc.coords = Tensor({cells.size(), 3});
  for (std::size_t i = 0; i < cells.size(); ++i)
    for (int a = 0; a < 3; ++a) pc.coords.at(i, a) = cells[i][a] + 0.5;
  pc.feats = feats;
  return pc;
}

}  // namespace

TEST_F(BlockTest, CpeZeroBranchAndGradients) {
  const std::vector<Cell> cells = {{0, 0, 0}, {1, 0, 0}, {1, 1, 0}, {2, 1, 1}, {0, 2, 2}, {1, 2, 2}};
  const VoxelSet vs = voxelize(cells_cloud(cells, random_tensor({6, 3}, rng)), 1.0);
  const NeighborTable t = build_neighbor_table(vs);
  CpeParams p = CpeParams::make(ParamFactory(store, init, "cpe"), 3);
  {
    ParamStore tmp;
    CpeParams zero = p;
    zero.weight = tmp.add("w", Tensor({27, 3, 3}, 0.0));
    EXPECT_EQ(cpe_apply(t, constant(vs.cell_feats), zero).value(), vs.cell_feats);
  }
  perturb_norms();
  const auto r = check_gradients([&] { return readout(cpe_apply(t, constant(vs.cell_feats), p)); }, store);
  EXPECT_LT(r.max_rel_error, 1e-6);
  EXPECT_THROW(cpe_apply(t, constant(Tensor({6, 2})), p), DimensionError);
}

TEST_F(BlockTest, CpeIsPositionSensitive) {
  const CpeParams p = CpeParams::make(ParamFactory(store, init, "cpe"), 2);
  const Tensor feats = random_tensor({4, 2}, rng);
  const VoxelSet line = voxelize(cells_cloud({{0, 0, 0}, {1, 0, 0}, {2, 0, 0}, {3, 0, 0}}, feats), 1.0);
  const VoxelSet spread = voxelize(cells_cloud({{0, 0, 0}, {4, 0, 0}, {8, 0, 0}, {12, 0, 0}}, feats), 1.0);
  const Tensor a = cpe_apply(build_neighbor_table(line), constant(line.cell_feats), p).value();
  const Tensor b = cpe_apply(build_neighbor_table(spread), constant(spread.cell_feats), p).value();
  EXPECT_EQ(line.cell_feats, spread.cell_feats);
  EXPECT_GT(max_abs_diff(a, b), 1e-6);
}

TEST_F(BlockTest, SerializedMambaScattersBackToCellOrder) {
  std::vector<Cell> cells;
  for (int i = 0; i < 30; ++i) cells.push_back({(i * 7) % 5, (i * 3) % 4, i % 3});
  std::sort(cells.begin(), cells.end());
  cells.erase(std::unique(cells.begin(), cells.end()), cells.end());
  const std::size_t m = cells.size();
  const VoxelSet vs = voxelize(cells_cloud(cells, random_tensor({m, 4}, rng)), 1.0);
  BlockConfig cfg = config(4, false);
  cfg.pattern = SerializationPattern::Hilbert;
  const MambaParams p = MambaParams::make(ParamFactory(store, init, "m"), cfg);
  const SerializationOrder order = order_points(vs.cells, cfg.pattern, required_depth(vs.cells));
  const Var x = constant(vs.cell_feats);

  cfg.sub_len = 1024;  // one window: plain gather, block, inverse gather
  const Tensor expect = gather_rows(mamba_block_forward(gather_rows(x, order.perm), cfg, p), order.inv_perm).value();
  EXPECT_EQ(serialized_mamba(x, order, cfg, p).value(), expect);

  cfg.sub_len = 8;  // windows with replicated padding still produce M rows
  const Tensor windowed = serialized_mamba(x, order, cfg, p).value();
  EXPECT_EQ(windowed.shape(), (Shape{m, 4}));
  // The first window matches an independent evaluation of its 8 points.
  IndexVec first(order.perm.begin(), order.perm.begin() + 8);
  const Tensor head = mamba_block_forward(gather_rows(x, first), cfg, p).value();
  for (std::size_t pos = 0; pos < 8; ++pos)
    for (std::size_t c = 0; c < 4; ++c) EXPECT_EQ(windowed.at(static_cast<std::size_t>(order.perm[pos]), c), head.at(pos, c));
}
