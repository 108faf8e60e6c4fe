#pragma once

#include <cmath>
#include <cstddef>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "spm/layers.hpp"
#include "spm/sfc.hpp"
#include "spm/sparse_grid.hpp"
#include "spm/ssm.hpp"

namespace spm {

/// Fixed-length windows over a serialized sequence. Sequences no longer
/// than `requested_len` form one window of their own length; longer ones
/// are cut into ceil(n / len) windows and the last window is filled up by
/// replicating the trailing points of the window before it.
struct SubsequenceLayout {
  std::size_t n_points = 0;
  std::size_t sub_len = 0;  // slots per window
  std::size_t count = 0;    // number of windows
  IndexVec starts;          // first slot of each window
  IndexVec slot_src;        // slot -> sequence position it holds
  std::vector<bool> valid_mask;
  IndexVec position_slot;   // sequence position -> its valid slot

  std::size_t slots() const { return slot_src.size(); }
  std::size_t padded_slots() const { return slots() - n_points; }
};

inline SubsequenceLayout partition_subsequences(std::size_t n_points, std::size_t sub_len) {
  if (n_points == 0 || sub_len == 0) throw ContractError("partition_subsequences: sizes must be positive");
  SubsequenceLayout layout;
  layout.n_points = n_points;
  if (n_points <= sub_len) {
    layout.sub_len = n_points;
    layout.count = 1;
  } else {
    layout.sub_len = sub_len;
    layout.count = (n_points + sub_len - 1) / sub_len;
  }
  const std::size_t slots = layout.count * layout.sub_len;
  layout.slot_src.resize(slots);
  layout.valid_mask.assign(slots, false);
  layout.position_slot.resize(n_points);
  for (std::size_t w = 0; w < layout.count; ++w) layout.starts.push_back(static_cast<std::int64_t>(w * layout.sub_len));

  for (std::size_t pos = 0; pos < n_points; ++pos) {
    layout.slot_src[pos] = static_cast<std::int64_t>(pos);
    layout.valid_mask[pos] = true;
    layout.position_slot[pos] = static_cast<std::int64_t>(pos);
  }
  const std::size_t pad = slots - n_points;
  // Padding slots sit after the valid tail and copy the last `pad` points
  // of the preceding window, in order.
  const std::size_t last_start = (layout.count - 1) * layout.sub_len;
  for (std::size_t p = 0; p < pad; ++p) {
    layout.slot_src[n_points + p] = static_cast<std::int64_t>(last_start - pad + p);
  }
  return layout;
}

/// Depthwise causal 1D convolution over rows of x[L,C], weights [C,K]:
/// y[t,c] = b[c] + sum_j w[c,j] x[t-K+1+j, c], with zeros before each
/// segment start.
inline Var causal_conv1d(const Var& x, const Var& weight, const Var& bias, std::size_t segment_length = 0) {
  if (x.shape().size() != 2) throw DimensionError("causal_conv1d: x must be [L,C]");
  const std::size_t l = x.rows(), c = x.cols();
  if (weight.shape().size() != 2 || weight.rows() != c) throw DimensionError("causal_conv1d: weights must be [C,K]");
  if (bias.size() != c) throw DimensionError("causal_conv1d: bias must be [C]");
  const std::size_t kw = weight.cols();
  const std::size_t seg = segment_length == 0 ? l : segment_length;
  if (l % seg != 0) throw DimensionError("causal_conv1d: length is not a multiple of the segment length");

  Tensor y({l, c});
  const Tensor& xv = x.value();
  const Tensor& wv = weight.value();
  for (std::size_t t = 0; t < l; ++t) {
    const std::size_t start = (t / seg) * seg;
    for (std::size_t ch = 0; ch < c; ++ch) {
      double acc = bias.value()[ch];
      for (std::size_t j = 0; j < kw; ++j) {
        const std::size_t back = kw - 1 - j;
        if (t < start + back) continue;
        acc += wv.at(ch, j) * xv.at(t - back, ch);
      }
      y.at(t, ch) = acc;
    }
  }
  return Var::from_op("causal_conv1d", std::move(y), {x, weight, bias}, [l, c, kw, seg](Node& self) {
    const Tensor& xv = self.parent_value(0);
    const Tensor& wv = self.parent_value(1);
    Tensor* gx = self.parent_grad(0);
    Tensor* gw = self.parent_grad(1);
    Tensor* gb = self.parent_grad(2);
    for (std::size_t t = 0; t < l; ++t) {
      const std::size_t start = (t / seg) * seg;
      for (std::size_t ch = 0; ch < c; ++ch) {
        const double dy = self.grad.at(t, ch);
        if (gb) (*gb)[ch] += dy;
        for (std::size_t j = 0; j < kw; ++j) {
          const std::size_t back = kw - 1 - j;
          if (t < start + back) continue;
          if (gx) gx->at(t - back, ch) += dy * wv.at(ch, j);
          if (gw) gw->at(ch, j) += dy * xv.at(t - back, ch);
        }
      }
    }
  });
}

/// Row permutation reversing each segment of a [L,.] sequence.
inline IndexVec segment_flip_index(std::size_t length, std::size_t segment_length) {
  const std::size_t seg = segment_length == 0 ? length : segment_length;
  IndexVec idx(length);
  for (std::size_t t = 0; t < length; ++t) {
    const std::size_t start = (t / seg) * seg;
    idx[t] = static_cast<std::int64_t>(start + (start + seg - 1 - t));
  }
  return idx;
}

struct BlockConfig {
  std::size_t channels = 32;
  std::size_t expand = 2;
  std::size_t conv_width = 4;
  std::size_t d_state = 16;
  std::size_t mlp_ratio = 4;
  std::size_t sub_len = 1024;
  bool bidirectional = false;
  bool pre_norm = true;
  bool zoh_exact = true;
  bool use_d_skip = true;
  SerializationPattern pattern = SerializationPattern::Z;

  std::size_t inner() const { return expand * channels; }

  void validate() const {
    if (channels == 0 || expand == 0 || conv_width == 0 || d_state == 0 || mlp_ratio == 0 || sub_len == 0) {
      throw ConfigError("block config: all sizes must be positive");
    }
  }
};

/// conv1d followed by the selective SSM on one direction of the sequence.
struct BranchParams {
  Var conv_weight;  // [E,K]
  Var conv_bias;    // [E]
  SSMParams ssm;

  static BranchParams make(ParamFactory f, const std::string& suffix, const BlockConfig& cfg) {
    BranchParams p;
    const std::size_t e = cfg.inner();
    p.conv_weight = f.uniform("conv1d" + suffix + ".weight", {e, cfg.conv_width}, 1.0 / std::sqrt(static_cast<double>(cfg.conv_width)));
    p.conv_bias = f.filled("conv1d" + suffix + ".bias", {e}, 0.0);
    p.ssm = SSMParams::make(f.sub("ssm" + suffix), e, cfg.d_state);
    return p;
  }
};

struct MambaParams {
  NormParams norm;
  LinearParams in_proj;   // C -> 2E (branch input | gate)
  BranchParams forward;
  std::optional<BranchParams> reverse;
  LinearParams out_proj;  // E (or 2E when bidirectional) -> C

  static MambaParams make(ParamFactory f, const BlockConfig& cfg) {
    cfg.validate();
    MambaParams p;
    const std::size_t c = cfg.channels, e = cfg.inner();
    p.norm = NormParams::make(f.sub("norm"), c);
    p.in_proj = LinearParams::make(f.sub("in_proj"), c, 2 * e, false);
    p.forward = BranchParams::make(f, "", cfg);
    if (cfg.bidirectional) p.reverse = BranchParams::make(f, "_rev", cfg);
    p.out_proj = LinearParams::make(f.sub("out_proj"), cfg.bidirectional ? 2 * e : e, c, false);
    return p;
  }
};

struct MlpParams {
  NormParams norm;
  LinearParams fc1;
  LinearParams fc2;

  static MlpParams make(ParamFactory f, std::size_t channels, std::size_t ratio) {
    return {NormParams::make(f.sub("norm"), channels), LinearParams::make(f.sub("fc1"), channels, ratio * channels),
            LinearParams::make(f.sub("fc2"), ratio * channels, channels)};
  }
};

struct CpeParams {
  Var weight;  // [27,C,C]
  Var bias;    // [C]
  NormParams norm;

  static CpeParams make(ParamFactory f, std::size_t channels) {
    CpeParams p;
    p.weight = f.uniform("conv.weight", {NeighborTable::kOffsets, channels, channels},
                         1.0 / std::sqrt(static_cast<double>(NeighborTable::kOffsets * channels)));
    p.bias = f.filled("conv.bias", {channels}, 0.0);
    p.norm = NormParams::make(f.sub("norm"), channels);
    return p;
  }
};

/// x + norm(SubMConv3d(x)) over the active cells of one voxel set.
inline Var cpe_apply(const NeighborTable& table, const Var& x, const CpeParams& p) {
  if (x.shape().size() != 2 || x.cols() != p.bias.size()) throw DimensionError("cpe_apply: channel mismatch");
  return add(x, p.norm(submconv3d(table, x, p.weight, p.bias)));
}

inline Var ssm_branch(const Var& x, const BranchParams& p, const BlockConfig& cfg, std::size_t segment_length, bool reverse) {
  const std::size_t seg = segment_length == 0 ? x.rows() : segment_length;
  Var h = reverse ? gather_rows(x, segment_flip_index(x.rows(), seg)) : x;
  h = silu(causal_conv1d(h, p.conv_weight, p.conv_bias, seg));
  h = selective_scan(p.ssm, h, {cfg.zoh_exact, cfg.use_d_skip, seg});
  return reverse ? gather_rows(h, segment_flip_index(x.rows(), seg)) : h;
}

/// Token mixer: in_proj, branch(es) gated by silu(z), out_proj.
inline Var mamba_mixer(const Var& x, const MambaParams& p, const BlockConfig& cfg, std::size_t segment_length) {
  const std::size_t e = cfg.inner();
  const Var xz = p.in_proj(x);
  const Var xs = slice_cols(xz, 0, e);
  const Var gz = silu(slice_cols(xz, e, e));
  const Var yf = mul(ssm_branch(xs, p.forward, cfg, segment_length, false), gz);
  if (!cfg.bidirectional) return p.out_proj(yf);
  if (!p.reverse) throw ConfigError("mamba_mixer: bidirectional config without reverse-branch parameters");
  const Var yb = mul(ssm_branch(xs, *p.reverse, cfg, segment_length, true), gz);
  return p.out_proj(concat_cols({yf, yb}));
}

/// Pre-norm: x + mixer(LN(x)). Post-norm: LN(x + mixer(x)).
inline Var mamba_block_forward(const Var& x, const BlockConfig& cfg, const MambaParams& p, std::size_t segment_length = 0) {
  if (x.shape().size() != 2 || x.cols() != cfg.channels) throw DimensionError("mamba_block_forward: x must be [L,C]");
  if (cfg.pre_norm) return add(x, mamba_mixer(p.norm(x), p, cfg, segment_length));
  return p.norm(add(x, mamba_mixer(x, p, cfg, segment_length)));
}

inline Var bidirectional_mamba_forward(const Var& x, const BlockConfig& cfg, const MambaParams& p,
                                       std::size_t segment_length = 0) {
  BlockConfig bi = cfg;
  bi.bidirectional = true;
  return mamba_block_forward(x, bi, p, segment_length);
}

inline Var mlp_block(const Var& x, const MlpParams& p, bool pre_norm = true) {
  auto body = [&p](const Var& v) { return p.fc2(gelu(p.fc1(v))); };
  if (pre_norm) return add(x, body(p.norm(x)));
  return p.norm(add(x, body(x)));
}

/// Serializes cell features by `order`, runs the Mamba block over the
/// padded windows, and scatters valid outputs back to cell order.
inline Var serialized_mamba(const Var& x, const SerializationOrder& order, const BlockConfig& cfg, const MambaParams& p) {
  const std::size_t m = x.rows();
  if (order.size() != m) throw DimensionError("serialized_mamba: order does not match feature rows");
  const SubsequenceLayout layout = partition_subsequences(m, cfg.sub_len);
  IndexVec to_slots(layout.slots());
  for (std::size_t s = 0; s < layout.slots(); ++s) {
    to_slots[s] = order.perm[static_cast<std::size_t>(layout.slot_src[s])];
  }
  IndexVec from_slots(m);
  for (std::size_t row = 0; row < m; ++row) {
    from_slots[row] = layout.position_slot[static_cast<std::size_t>(order.inv_perm[row])];
  }
  const Var seq = gather_rows(x, std::move(to_slots));
  const Var out = mamba_block_forward(seq, cfg, p, layout.sub_len);
  return gather_rows(out, std::move(from_slots));
}

}  // namespace spm
