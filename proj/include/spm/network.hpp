#pragma once

#include <algorithm>
#include <array>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "spm/blocks.hpp"
#include "spm/config.hpp"
#include "spm/layers.hpp"
#include "spm/sfc.hpp"
#include "spm/sparse_grid.hpp"

namespace spm {

/// Geometry of one resolution level; independent of parameters.
struct StageGeometry {
  VoxelSet vs;
  NeighborTable table;
  PoolingMap pool;  // from the previous level; empty at level 0
  int depth = 1;
  std::array<std::optional<SerializationOrder>, 4> orders;

  const SerializationOrder& order(SerializationPattern p) {
    auto& slot = orders[static_cast<std::size_t>(p)];
    if (!slot) slot = order_points(vs.cells, p, depth);
    return *slot;
  }
};

struct Hierarchy {
  std::vector<StageGeometry> stages;

  std::size_t points() const { return stages.front().vs.point_to_cell.size(); }
};

inline Hierarchy build_hierarchy(const PointCloud& pc, const ModelConfig& cfg) {
  Hierarchy h;
  h.stages.reserve(kStages);
  for (std::size_t s = 0; s < kStages; ++s) {
    StageGeometry g;
    if (s == 0) {
      g.vs = voxelize(pc, cfg.grid_size);
    } else {
      auto [coarse, map] = pool_cells(h.stages.back().vs, cfg.pool_factor);
      g.vs = std::move(coarse);
      g.pool = std::move(map);
    }
    g.table = build_neighbor_table(g.vs);
    g.depth = required_depth(g.vs.cells);
    h.stages.push_back(std::move(g));
  }
  return h;
}

struct BlockParams {
  BlockConfig cfg;
  std::optional<CpeParams> cpe;
  MambaParams mamba;
  MlpParams mlp;
};

struct EncoderStageParams {
  std::optional<LinearParams> down;  // absent at stage 0
  std::optional<NormParams> down_norm;
  std::optional<CpeParams> cpe;      // per-stage encoding in CpeMode::Stage
  std::vector<BlockParams> blocks;
};

struct DecoderStageParams {
  LinearParams fuse;
  NormParams norm;
  std::optional<CpeParams> cpe;
  std::vector<BlockParams> blocks;
};

struct Model {
  ModelConfig cfg;
  ParamStore store;
  Var stem_weight;
  Var stem_bias;
  NormParams stem_norm;
  std::vector<EncoderStageParams> encoder;
  std::vector<DecoderStageParams> decoder;  // decoder[s] produces level-s features
  LinearParams head;

  std::size_t num_blocks() const {
    std::size_t n = 0;
    for (const auto& s : encoder) n += s.blocks.size();
    for (const auto& s : decoder) n += s.blocks.size();
    return n;
  }
};

namespace detail {

inline BlockParams make_block(ParamFactory f, const ModelConfig& cfg, std::size_t width, std::size_t window) {
  BlockParams b;
  // The pattern is bound per forward pass; Z is a placeholder.
  b.cfg = cfg.block(width, window, SerializationPattern::Z);
  if (cfg.cpe_mode == CpeMode::Block) b.cpe = CpeParams::make(f.sub("cpe"), width);
  b.mamba = MambaParams::make(f.sub("mamba"), b.cfg);
  b.mlp = MlpParams::make(f.sub("mlp"), width, cfg.mlp_ratio);
  return b;
}

}  // namespace detail

/// Deterministic initialization: every draw comes from one generator seeded
/// with `seed`, in a fixed construction order.
inline Model build_model(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Model m;
  m.cfg = cfg;
  std::mt19937_64 rng(seed);
  ParamFactory root(m.store, rng);

  ParamFactory stem = root.sub("stem");
  const std::size_t c0 = cfg.channels[0];
  m.stem_weight = stem.uniform("conv.weight", {NeighborTable::kOffsets, cfg.in_channels, c0},
                               1.0 / std::sqrt(static_cast<double>(NeighborTable::kOffsets * cfg.in_channels)));
  m.stem_bias = stem.filled("conv.bias", {c0}, 0.0);
  m.stem_norm = NormParams::make(stem.sub("norm"), c0);

  for (std::size_t s = 0; s < kStages; ++s) {
    ParamFactory f = root.sub("stage" + std::to_string(s));
    EncoderStageParams st;
    if (s > 0) {
      st.down = LinearParams::make(f.sub("down.proj"), cfg.channels[s - 1], cfg.channels[s]);
      st.down_norm = NormParams::make(f.sub("down.norm"), cfg.channels[s]);
    }
    if (cfg.cpe_mode == CpeMode::Stage) st.cpe = CpeParams::make(f.sub("cpe"), cfg.channels[s]);
    for (std::size_t b = 0; b < cfg.depths[s]; ++b) {
      st.blocks.push_back(detail::make_block(f.sub("block" + std::to_string(b)), cfg, cfg.channels[s], cfg.sub_len[s]));
    }
    m.encoder.push_back(std::move(st));
  }

  m.decoder.resize(kStages - 1);
  for (std::size_t i = 0; i < kStages - 1; ++i) {
    const std::size_t s = kStages - 2 - i;  // coarse to fine, matching forward order
    ParamFactory f = root.sub("dec" + std::to_string(s));
    const std::size_t below = s + 1 == kStages - 1 ? cfg.channels[s + 1] : cfg.decoder_channels[s + 1];
    const std::size_t width = cfg.decoder_channels[s];
    DecoderStageParams d;
    d.fuse = LinearParams::make(f.sub("fuse"), below + cfg.channels[s], width);
    d.norm = NormParams::make(f.sub("norm"), width);
    if (cfg.cpe_mode == CpeMode::Stage) d.cpe = CpeParams::make(f.sub("cpe"), width);
    for (std::size_t b = 0; b < cfg.decoder_depths[s]; ++b) {
      d.blocks.push_back(detail::make_block(f.sub("block" + std::to_string(b)), cfg, width, cfg.sub_len[s]));
    }
    m.decoder[s] = std::move(d);
  }

  m.head = LinearParams::make(root.sub("head"), cfg.decoder_channels[0], cfg.num_classes);
  return m;
}

/// Patterns for one forward pass: cfg.patterns, shuffled when the config
/// asks for it and a generator is supplied.
inline std::vector<SerializationPattern> forward_patterns(const ModelConfig& cfg, std::mt19937_64* shuffle_rng) {
  std::vector<SerializationPattern> p = cfg.patterns;
  if (cfg.shuffle_patterns && shuffle_rng) std::shuffle(p.begin(), p.end(), *shuffle_rng);
  return p;
}

namespace detail {

struct PatternCursor {
  std::vector<SerializationPattern> patterns;
  std::size_t next = 0;

  SerializationPattern take() { return patterns[next++ % patterns.size()]; }
};

inline Var run_block(const BlockParams& b, StageGeometry& g, const Var& x, PatternCursor& cursor) {
  Var h = b.cpe ? cpe_apply(g.table, x, *b.cpe) : x;
  BlockConfig cfg = b.cfg;
  cfg.pattern = cursor.take();
  h = serialized_mamba(h, g.order(cfg.pattern), cfg, b.mamba);
  return mlp_block(h, b.mlp, cfg.pre_norm);
}

}  // namespace detail

struct EncoderOutput {
  std::vector<Var> skips;  // features per level, coarsest last
};

inline EncoderOutput encoder_forward(const Model& m, Hierarchy& h, detail::PatternCursor& cursor) {
  const StageGeometry& g0 = h.stages[0];
  if (g0.vs.cell_feats.empty() || g0.vs.cell_feats.cols() != m.cfg.in_channels) {
    throw DimensionError("encoder_forward: input features must have in_channels columns");
  }
  Var x = constant(g0.vs.cell_feats);
  x = gelu(m.stem_norm(submconv3d(g0.table, x, m.stem_weight, m.stem_bias)));

  EncoderOutput out;
  for (std::size_t s = 0; s < kStages; ++s) {
    StageGeometry& g = h.stages[s];
    const EncoderStageParams& st = m.encoder[s];
    if (s > 0) {
      x = pool_features(x, g.pool, m.cfg.pool_reduce);
      x = gelu((*st.down_norm)((*st.down)(x)));
    }
    if (st.cpe) x = cpe_apply(g.table, x, *st.cpe);
    for (const auto& b : st.blocks) x = detail::run_block(b, g, x, cursor);
    out.skips.push_back(x);
  }
  return out;
}

inline Var decoder_forward(const Model& m, Hierarchy& h, const EncoderOutput& enc, detail::PatternCursor& cursor) {
  Var x = enc.skips.back();
  for (std::size_t i = 0; i < kStages - 1; ++i) {
    const std::size_t s = kStages - 2 - i;
    StageGeometry& g = h.stages[s];
    const DecoderStageParams& d = m.decoder[s];
    const Var up = grid_unpool(x, h.stages[s + 1].pool);
    x = gelu(d.norm(d.fuse(concat_cols({up, enc.skips[s]}))));
    if (d.cpe) x = cpe_apply(g.table, x, *d.cpe);
    for (const auto& b : d.blocks) x = detail::run_block(b, g, x, cursor);
  }
  return x;
}

/// Per-point logits [N, num_classes]: voxel logits broadcast to member points.
inline Var segment_forward(const Model& m, Hierarchy& h, std::mt19937_64* shuffle_rng = nullptr) {
  detail::PatternCursor cursor{forward_patterns(m.cfg, shuffle_rng)};
  const EncoderOutput enc = encoder_forward(m, h, cursor);
  const Var cell_logits = m.head(decoder_forward(m, h, enc, cursor));
  return gather_rows(cell_logits, h.stages[0].vs.point_to_cell);
}

inline Var segment_forward(const Model& m, const PointCloud& pc, std::mt19937_64* shuffle_rng = nullptr) {
  if (pc.feat_dim() != m.cfg.in_channels) {
    throw DimensionError("segment_forward: cloud has " + std::to_string(pc.feat_dim()) + " feature columns, model expects " +
                         std::to_string(m.cfg.in_channels));
  }
  Hierarchy h = build_hierarchy(pc, m.cfg);
  return segment_forward(m, h, shuffle_rng);
}

inline std::vector<int> argmax_rows(const Tensor& logits) {
  std::vector<int> out(logits.rows());
  for (std::size_t i = 0; i < logits.rows(); ++i) {
    const auto r = logits.row(i);
    out[i] = static_cast<int>(std::max_element(r.begin(), r.end()) - r.begin());
  }
  return out;
}

}  // namespace spm
