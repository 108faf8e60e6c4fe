#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "spm/error.hpp"
#include "spm/sparse_grid.hpp"

namespace spm {

enum SceneClass : int { kFloor = 0, kWall = 1, kBox = 2, kSphere = 3, kClutter = 4 };
inline constexpr int kSceneClasses = 5;
inline constexpr std::array<const char*, kSceneClasses> kSceneClassNames = {"floor", "wall", "box", "sphere", "clutter"};

struct SyntheticSceneSpec {
  std::uint64_t seed = 0;
  double extent = 4.0;  // room side length, meters
  std::size_t points = 2000;
  double noise = 0.005;       // geometric jitter, meters
  double color_noise = 0.05;  // RGB jitter before clipping
};

namespace detail {

inline constexpr std::array<std::array<double, 3>, kSceneClasses> kClassColor = {{
    {0.55, 0.45, 0.35},  // floor
    {0.90, 0.90, 0.85},  // wall
    {0.20, 0.35, 0.80},  // box
    {0.85, 0.20, 0.20},  // sphere
    {0.25, 0.70, 0.30},  // clutter
}};

// Shares of the point budget; the floor takes the rounding remainder.
inline constexpr std::array<double, kSceneClasses> kClassShare = {0.25, 0.30, 0.20, 0.15, 0.10};

struct Aabb {
  std::array<double, 3> lo, hi;
};

inline std::array<double, 3> sample_box_surface(const Aabb& b, std::mt19937_64& rng) {
  const double sx = b.hi[0] - b.lo[0], sy = b.hi[1] - b.lo[1], sz = b.hi[2] - b.lo[2];
  // Five faces: the bottom rests on the floor and is not visible.
  const std::array<double, 5> area = {sx * sy, sx * sz, sx * sz, sy * sz, sy * sz};
  std::discrete_distribution<int> face(area.begin(), area.end());
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const double a = u(rng), c = u(rng);
  switch (face(rng)) {
    case 0: return {b.lo[0] + a * sx, b.lo[1] + c * sy, b.hi[2]};
    case 1: return {b.lo[0] + a * sx, b.lo[1], b.lo[2] + c * sz};
    case 2: return {b.lo[0] + a * sx, b.hi[1], b.lo[2] + c * sz};
    case 3: return {b.lo[0], b.lo[1] + a * sy, b.lo[2] + c * sz};
    default: return {b.hi[0], b.lo[1] + a * sy, b.lo[2] + c * sz};
  }
}

}  // namespace detail

/// Room-like scene: floor, two walls, a box, a sphere and a few clutter
/// clusters, all sampled on surfaces with Gaussian jitter.
inline PointCloud generate_synthetic_scene(const SyntheticSceneSpec& spec) {
  if (spec.points < 50) throw DomainError("synthetic scene needs at least 50 points");
  if (!(spec.extent > 0.5) || spec.noise < 0.0 || spec.color_noise < 0.0) throw DomainError("invalid synthetic scene spec");
  std::mt19937_64 rng(spec.seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::normal_distribution<double> jitter(0.0, 1.0);
  const double e = spec.extent;

  std::array<std::size_t, kSceneClasses> count{};
  std::size_t assigned = 0;
  for (int k = 1; k < kSceneClasses; ++k) {
    count[k] = static_cast<std::size_t>(std::floor(detail::kClassShare[k] * static_cast<double>(spec.points)));
    assigned += count[k];
  }
  count[kFloor] = spec.points - assigned;

  const double bw = e * (0.15 + 0.1 * u(rng)), bd = e * (0.15 + 0.1 * u(rng)), bh = e * (0.1 + 0.1 * u(rng));
  const double bx = e * (0.15 + 0.2 * u(rng)), by = e * (0.5 + 0.15 * u(rng));
  const detail::Aabb box{{bx, by, 0.0}, {bx + bw, by + bd, bh}};
  const double radius = e * (0.08 + 0.05 * u(rng));
  const std::array<double, 3> centre = {e * (0.6 + 0.15 * u(rng)), e * (0.2 + 0.15 * u(rng)), radius};
  std::array<std::array<double, 3>, 3> clutter{};
  for (auto& c : clutter) c = {e * (0.55 + 0.3 * u(rng)), e * (0.55 + 0.3 * u(rng)), e * 0.03};

  PointCloud pc;
  pc.coords = Tensor({spec.points, 3});
  pc.feats = Tensor({spec.points, 3});
  pc.labels = std::vector<int>(spec.points);
  std::size_t row = 0;
  auto emit = [&](std::array<double, 3> p, int label) {
    for (int a = 0; a < 3; ++a) pc.coords.at(row, a) = p[a] + spec.noise * jitter(rng);
    for (int a = 0; a < 3; ++a) {
      pc.feats.at(row, a) = std::clamp(detail::kClassColor[label][a] + spec.color_noise * jitter(rng), 0.0, 1.0);
    }
    (*pc.labels)[row] = label;
    ++row;
  };

  for (std::size_t i = 0; i < count[kFloor]; ++i) emit({e * u(rng), e * u(rng), 0.0}, kFloor);
  const double wall_h = 0.6 * e;
  for (std::size_t i = 0; i < count[kWall]; ++i) {
    // Walls along x = 0 and y = 0, split by area.
    if (u(rng) < 0.5) emit({0.0, e * u(rng), wall_h * u(rng)}, kWall);
    else emit({e * u(rng), 0.0, wall_h * u(rng)}, kWall);
  }
  for (std::size_t i = 0; i < count[kBox]; ++i) emit(detail::sample_box_surface(box, rng), kBox);
  for (std::size_t i = 0; i < count[kSphere]; ++i) {
    std::array<double, 3> d = {jitter(rng), jitter(rng), jitter(rng)};
    const double n = std::sqrt(d[0] * d[0] + d[1] * d[1] + d[2] * d[2]) + 1e-12;
    emit({centre[0] + radius * d[0] / n, centre[1] + radius * d[1] / n, centre[2] + radius * d[2] / n}, kSphere);
  }
  std::uniform_int_distribution<std::size_t> pick(0, clutter.size() - 1);
  for (std::size_t i = 0; i < count[kClutter]; ++i) {
    const auto& c = clutter[pick(rng)];
    emit({c[0] + 0.04 * e * jitter(rng), c[1] + 0.04 * e * jitter(rng), std::abs(c[2] + 0.02 * e * jitter(rng))}, kClutter);
  }
  return pc;
}

struct AugmentOptions {
  bool rotate = true;
  bool flip = true;
  double scale_lo = 0.9, scale_hi = 1.1;
  double color_jitter = 0.02;
};

/// Random z rotation, x/y flips (p = 0.5 each), isotropic scale and RGB
/// jitter clipped to [0,1]. Labels and shapes are untouched.
inline PointCloud augment(const PointCloud& pc, std::uint64_t seed, const AugmentOptions& opt = {}) {
  pc.validate();
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const double theta = opt.rotate ? 2.0 * std::numbers::pi * u(rng) : 0.0;
  const double fx = opt.flip && u(rng) < 0.5 ? -1.0 : 1.0;
  const double fy = opt.flip && u(rng) < 0.5 ? -1.0 : 1.0;
  const double s = opt.scale_lo + (opt.scale_hi - opt.scale_lo) * u(rng);
  const double c = std::cos(theta), sn = std::sin(theta);

  PointCloud out = pc;
  for (std::size_t i = 0; i < pc.size(); ++i) {
    const double x = pc.coords.at(i, 0), y = pc.coords.at(i, 1), z = pc.coords.at(i, 2);
    out.coords.at(i, 0) = s * fx * (c * x - sn * y);
    out.coords.at(i, 1) = s * fy * (sn * x + c * y);
    out.coords.at(i, 2) = s * z;
  }
  if (opt.color_jitter > 0.0) {
    std::normal_distribution<double> g(0.0, opt.color_jitter);
    const std::size_t rgb = std::min<std::size_t>(3, pc.feat_dim());
    for (std::size_t i = 0; i < pc.size(); ++i)
      for (std::size_t j = 0; j < rgb; ++j) out.feats.at(i, j) = std::clamp(pc.feats.at(i, j) + g(rng), 0.0, 1.0);
  }
  return out;
}

// SPC1 text format:
//   SPC1 <N> <feat_dim> <has_labels 0|1>
//   x y z f1..fC [label]

inline void write_pointcloud(std::ostream& os, const PointCloud& pc) {
  pc.validate();
  os << "SPC1 " << pc.size() << ' ' << pc.feat_dim() << ' ' << (pc.labels ? 1 : 0) << '\n';
  char buf[32];
  auto put = [&](double v) {
    std::snprintf(buf, sizeof buf, "%.17g", v);
    os << buf;
  };
  for (std::size_t i = 0; i < pc.size(); ++i) {
    for (int a = 0; a < 3; ++a) {
      if (a) os << ' ';
      put(pc.coords.at(i, a));
    }
    for (std::size_t j = 0; j < pc.feat_dim(); ++j) {
      os << ' ';
      put(pc.feats.at(i, j));
    }
    if (pc.labels) os << ' ' << (*pc.labels)[i];
    os << '\n';
  }
}

inline PointCloud read_pointcloud(std::istream& is, const std::string& source = "<stream>") {
  auto fail = [&](std::size_t line, const std::string& what) -> ParseError {
    return ParseError(source + ":" + std::to_string(line) + ": " + what);
  };
  std::string line;
  if (!std::getline(is, line)) throw fail(1, "missing SPC1 header");
  std::istringstream hs(line);
  std::string magic;
  long long n = -1, c = -1, has_labels = -1;
  std::string extra;
  if (!(hs >> magic >> n >> c >> has_labels) || magic != "SPC1" || (hs >> extra)) {
    throw fail(1, "header must be 'SPC1 <N> <feat_dim> <has_labels>'");
  }
  if (n < 1 || c < 1 || (has_labels != 0 && has_labels != 1)) throw fail(1, "invalid header values");

  const auto rows = static_cast<std::size_t>(n), cols = static_cast<std::size_t>(c);
  PointCloud pc;
  pc.coords = Tensor({rows, 3});
  pc.feats = Tensor({rows, cols});
  if (has_labels) pc.labels = std::vector<int>(rows);
  const std::size_t arity = 3 + cols + (has_labels ? 1 : 0);

  std::size_t lineno = 1;
  for (std::size_t i = 0; i < rows; ++i) {
    ++lineno;
    if (!std::getline(is, line)) throw fail(lineno, "expected " + std::to_string(rows) + " points, body ended early");
    std::istringstream ls(line);
    std::vector<std::string> tok;
    for (std::string t; ls >> t;) tok.push_back(t);
    if (tok.size() != arity) {
      throw fail(lineno, "expected " + std::to_string(arity) + " values, got " + std::to_string(tok.size()));
    }
    auto num = [&](const std::string& t) {
      std::size_t used = 0;
      double v = 0.0;
      try {
        v = std::stod(t, &used);
      } catch (const std::exception&) {
        used = 0;
      }
      if (used != t.size() || !std::isfinite(v)) throw fail(lineno, "invalid number '" + t + "'");
      return v;
    };
    for (std::size_t a = 0; a < 3; ++a) pc.coords.at(i, a) = num(tok[a]);
    for (std::size_t j = 0; j < cols; ++j) pc.feats.at(i, j) = num(tok[3 + j]);
    if (has_labels) {
      const double v = num(tok.back());
      if (v != std::floor(v) || v < kIgnoreLabel || v > 1e9) throw fail(lineno, "invalid label '" + tok.back() + "'");
      (*pc.labels)[i] = static_cast<int>(v);
    }
  }
  while (std::getline(is, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") != std::string::npos) {
      throw fail(lineno, "more point rows than the header count " + std::to_string(rows));
    }
  }
  return pc;
}

inline void save_pointcloud(const std::filesystem::path& path, const PointCloud& pc) {
  std::ofstream os(path);
  if (!os) throw Error("cannot open '" + path.string() + "' for writing");
  write_pointcloud(os, pc);
  if (!os) throw Error("failed writing '" + path.string() + "'");
}

inline PointCloud load_pointcloud(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw Error("cannot open '" + path.string() + "'");
  return read_pointcloud(is, path.string());
}

/// Sorted *.spc files in a directory.
inline std::vector<std::filesystem::path> list_pointclouds(const std::filesystem::path& dir) {
  std::vector<std::filesystem::path> out;
  if (!std::filesystem::is_directory(dir)) return out;
  for (const auto& entry : std::filesystem::directory_iterator(dir))
    if (entry.is_regular_file() && entry.path().extension() == ".spc") out.push_back(entry.path());
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace spm
