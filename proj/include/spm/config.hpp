#pragma once

#include <array>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "spm/blocks.hpp"
#include "spm/error.hpp"
#include "spm/ops.hpp"
#include "spm/sfc.hpp"

namespace spm {

inline constexpr std::size_t kStages = 5;

enum class CpeMode { None, Stage, Block };

struct ModelConfig {
  std::array<std::size_t, kStages> depths = {2, 2, 2, 6, 2};
  std::array<std::size_t, kStages> channels = {32, 64, 128, 256, 512};
  std::array<std::size_t, kStages> sub_len = {1024, 1024, 1024, 1024, 1024};
  std::vector<SerializationPattern> patterns = {kAllPatterns.begin(), kAllPatterns.end()};
  bool bidirectional = false;
  bool shuffle_patterns = true;
  std::size_t num_classes = 5;
  double grid_size = 0.02;
  bool pre_norm = true;
  std::array<std::size_t, kStages - 1> decoder_depths = {1, 1, 1, 1};
  std::array<std::size_t, kStages - 1> decoder_channels = {64, 64, 128, 256};

  std::size_t in_channels = 3;
  std::size_t d_state = 16;
  std::size_t expand = 2;
  std::size_t conv_width = 4;
  std::size_t mlp_ratio = 4;
  int pool_factor = 2;
  Reduce pool_reduce = Reduce::Mean;
  bool zoh_exact = true;
  bool use_d_skip = true;
  CpeMode cpe_mode = CpeMode::Block;

  void validate() const {
    auto positive = [](const auto& arr, const char* name) {
      for (std::size_t v : arr)
        if (v == 0) throw ConfigError(std::string(name) + ": entries must be positive");
    };
    positive(channels, "channels");
    positive(sub_len, "sub_len");
    positive(decoder_channels, "decoder_channels");
    if (patterns.empty()) throw ConfigError("patterns: at least one serialization pattern is required");
    if (num_classes < 2) throw ConfigError("num_classes must be >= 2");
    if (!(grid_size > 0.0)) throw ConfigError("grid_size must be positive");
    if (in_channels == 0 || d_state == 0 || expand == 0 || conv_width == 0 || mlp_ratio == 0) {
      throw ConfigError("in_channels, d_state, expand, conv_width and mlp_ratio must be positive");
    }
    if (pool_factor < 1) throw ConfigError("pool_factor must be >= 1");
  }

  BlockConfig block(std::size_t width, std::size_t window, SerializationPattern pattern) const {
    BlockConfig b;
    b.channels = width;
    b.expand = expand;
    b.conv_width = conv_width;
    b.d_state = d_state;
    b.mlp_ratio = mlp_ratio;
    b.sub_len = window;
    b.bidirectional = bidirectional;
    b.pre_norm = pre_norm;
    b.zoh_exact = zoh_exact;
    b.use_d_skip = use_d_skip;
    b.pattern = pattern;
    return b;
  }
};

/// Bidirectional variant with constant width 192.
inline ModelConfig tiny_preset() {
  ModelConfig c;
  c.bidirectional = true;
  c.channels = {192, 192, 192, 192, 192};
  c.decoder_channels = {192, 192, 192, 192};
  return c;
}

/// Desk-scale model used by the tests and the overfit run.
inline ModelConfig micro_preset() {
  ModelConfig c;
  c.depths = {1, 1, 1, 1, 1};
  c.channels = {4, 4, 4, 4, 4};
  c.decoder_channels = {4, 4, 4, 4};
  c.d_state = 4;
  c.mlp_ratio = 2;
  c.grid_size = 0.05;
  return c;
}

inline ModelConfig preset(const std::string& name) {
  if (name == "default" || name == "base") return ModelConfig{};
  if (name == "tiny") return tiny_preset();
  if (name == "micro") return micro_preset();
  throw ConfigError("unknown preset '" + name + "'");
}

inline std::string_view cpe_mode_name(CpeMode m) {
  switch (m) {
    case CpeMode::None: return "none";
    case CpeMode::Stage: return "stage";
    case CpeMode::Block: return "block";
  }
  return "?";
}

namespace detail {

template <typename T>
T json_get(const nlohmann::json& j, const char* key) {
  try {
    return j.at(key).get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config field '") + key + "': " + e.what());
  }
}

template <std::size_t N>
std::array<std::size_t, N> json_array(const nlohmann::json& j, const char* key) {
  const auto v = json_get<std::vector<long long>>(j, key);
  if (v.size() != N) {
    throw ConfigError(std::string("config field '") + key + "' needs " + std::to_string(N) + " entries, got " +
                      std::to_string(v.size()));
  }
  std::array<std::size_t, N> out{};
  for (std::size_t i = 0; i < N; ++i) {
    if (v[i] < 0) throw ConfigError(std::string("config field '") + key + "' has a negative entry");
    out[i] = static_cast<std::size_t>(v[i]);
  }
  return out;
}

inline std::size_t json_size(const nlohmann::json& j, const char* key) {
  const auto v = json_get<long long>(j, key);
  if (v < 0) throw ConfigError(std::string("config field '") + key + "' must be non-negative");
  return static_cast<std::size_t>(v);
}

}  // namespace detail

inline nlohmann::json to_json(const ModelConfig& c) {
  nlohmann::json j;
  j["depths"] = c.depths;
  j["channels"] = c.channels;
  j["sub_len"] = c.sub_len;
  std::vector<std::string> pats;
  for (auto p : c.patterns) pats.emplace_back(pattern_name(p));
  j["patterns"] = pats;
  j["bidirectional"] = c.bidirectional;
  j["shuffle_patterns"] = c.shuffle_patterns;
  j["num_classes"] = c.num_classes;
  j["grid_size"] = c.grid_size;
  j["pre_norm"] = c.pre_norm;
  j["decoder_depths"] = c.decoder_depths;
  j["decoder_channels"] = c.decoder_channels;
  j["in_channels"] = c.in_channels;
  j["d_state"] = c.d_state;
  j["expand"] = c.expand;
  j["conv_width"] = c.conv_width;
  j["mlp_ratio"] = c.mlp_ratio;
  j["pool_factor"] = c.pool_factor;
  j["pool_reduce"] = c.pool_reduce == Reduce::Max ? "max" : "mean";
  j["zoh_exact"] = c.zoh_exact;
  j["use_d_skip"] = c.use_d_skip;
  j["cpe_mode"] = std::string(cpe_mode_name(c.cpe_mode));
  return j;
}

/// Missing keys keep their defaults; unknown keys are rejected. A "preset"
/// key selects the starting point before the other keys are applied.
inline ModelConfig model_config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("model config must be a JSON object");
  static const std::set<std::string> known = {
      "preset",     "depths",         "channels",         "sub_len",     "patterns",  "bidirectional",
      "shuffle_patterns", "num_classes", "grid_size",     "pre_norm",    "decoder_depths", "decoder_channels",
      "in_channels", "d_state",       "expand",           "conv_width",  "mlp_ratio", "pool_factor",
      "pool_reduce", "zoh_exact",     "use_d_skip",       "cpe_mode"};
  for (const auto& [key, _] : j.items())
    if (!known.count(key)) throw ConfigError("unknown model config field '" + key + "'");

  using namespace detail;
  ModelConfig c = j.contains("preset") ? preset(json_get<std::string>(j, "preset")) : ModelConfig{};
  if (j.contains("depths")) c.depths = json_array<kStages>(j, "depths");
  if (j.contains("channels")) c.channels = json_array<kStages>(j, "channels");
  if (j.contains("sub_len")) c.sub_len = json_array<kStages>(j, "sub_len");
  if (j.contains("patterns")) {
    c.patterns.clear();
    for (const auto& name : json_get<std::vector<std::string>>(j, "patterns")) {
      try {
        c.patterns.push_back(parse_pattern(name));
      } catch (const ParseError& e) {
        throw ConfigError(e.what());
      }
    }
  }
  if (j.contains("bidirectional")) c.bidirectional = json_get<bool>(j, "bidirectional");
  if (j.contains("shuffle_patterns")) c.shuffle_patterns = json_get<bool>(j, "shuffle_patterns");
  if (j.contains("num_classes")) c.num_classes = json_size(j, "num_classes");
  if (j.contains("grid_size")) c.grid_size = json_get<double>(j, "grid_size");
  if (j.contains("pre_norm")) c.pre_norm = json_get<bool>(j, "pre_norm");
  if (j.contains("decoder_depths")) c.decoder_depths = json_array<kStages - 1>(j, "decoder_depths");
  if (j.contains("decoder_channels")) c.decoder_channels = json_array<kStages - 1>(j, "decoder_channels");
  if (j.contains("in_channels")) c.in_channels = json_size(j, "in_channels");
  if (j.contains("d_state")) c.d_state = json_size(j, "d_state");
  if (j.contains("expand")) c.expand = json_size(j, "expand");
  if (j.contains("conv_width")) c.conv_width = json_size(j, "conv_width");
  if (j.contains("mlp_ratio")) c.mlp_ratio = json_size(j, "mlp_ratio");
  if (j.contains("pool_factor")) c.pool_factor = json_get<int>(j, "pool_factor");
  if (j.contains("pool_reduce")) {
    const auto r = json_get<std::string>(j, "pool_reduce");
    if (r == "max") c.pool_reduce = Reduce::Max;
    else if (r == "mean") c.pool_reduce = Reduce::Mean;
    else throw ConfigError("pool_reduce must be 'max' or 'mean'");
  }
  if (j.contains("zoh_exact")) c.zoh_exact = json_get<bool>(j, "zoh_exact");
  if (j.contains("use_d_skip")) c.use_d_skip = json_get<bool>(j, "use_d_skip");
  if (j.contains("cpe_mode")) {
    const auto m = json_get<std::string>(j, "cpe_mode");
    if (m == "none") c.cpe_mode = CpeMode::None;
    else if (m == "stage") c.cpe_mode = CpeMode::Stage;
    else if (m == "block") c.cpe_mode = CpeMode::Block;
    else throw ConfigError("cpe_mode must be one of none, stage, block");
  }
  c.validate();
  return c;
}

}  // namespace spm
