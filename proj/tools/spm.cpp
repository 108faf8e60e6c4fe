// spm: command-line front end for the serialized point Mamba pipeline.
// Exit codes: 0 success, 2 usage/config/input error, 3 numeric failure.

#include <chrono>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "spm/checkpoint.hpp"
#include "spm/data.hpp"
#include "spm/network.hpp"
#include "spm/train.hpp"

#ifndef SPM_VERSION
#define SPM_VERSION "0.1.0"
#endif

namespace fs = std::filesystem;
using nlohmann::json;
using namespace spm;

namespace {

constexpr int kExitUsage = 2;
constexpr int kExitNumeric = 3;

struct DataConfig {
  std::optional<std::string> dir;
  std::size_t scenes = 2;
  std::size_t points = 2000;
  double extent = 4.0;
  std::uint64_t seed = 0;
};

struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  DataConfig data;
};

json to_json(const DataConfig& d) {
  json j = {{"scenes", d.scenes}, {"points", d.points}, {"extent", d.extent}, {"seed", d.seed}};
  if (d.dir) j["dir"] = *d.dir;
  return j;
}

DataConfig data_config_from_json(const json& j) {
  if (!j.is_object()) throw ConfigError("data config must be a JSON object");
  DataConfig d;
  try {
    for (const auto& [key, v] : j.items()) {
      if (key == "dir") d.dir = v.get<std::string>();
      else if (key == "scenes") d.scenes = v.get<std::size_t>();
      else if (key == "points") d.points = v.get<std::size_t>();
      else if (key == "extent") d.extent = v.get<double>();
      else if (key == "seed") d.seed = v.get<std::uint64_t>();
      else throw ConfigError("unknown data config field '" + key + "'");
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("data config: ") + e.what());
  }
  if (d.scenes == 0) throw ConfigError("data.scenes must be positive");
  return d;
}

json read_json_file(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open '" + path.string() + "'");
  try {
    return json::parse(is);
  } catch (const json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

RunConfig run_config_from_json(const json& j) {
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  for (const auto& [key, _] : j.items())
    if (key != "model" && key != "train" && key != "data") throw ConfigError("unknown config section '" + key + "'");
  RunConfig rc;
  if (j.contains("model")) rc.model = model_config_from_json(j["model"]);
  if (j.contains("train")) rc.train = train_config_from_json(j["train"]);
  if (j.contains("data")) rc.data = data_config_from_json(j["data"]);
  return rc;
}

json to_json(const RunConfig& rc) {
  return {{"model", to_json(rc.model)}, {"train", to_json(rc.train)}, {"data", to_json(rc.data)}};
}

void write_atomic(const fs::path& path, const std::string& text) {
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream os(tmp, std::ios::trunc);
    if (!os) throw Error("cannot write '" + tmp.string() + "'");
    os << text;
    if (!os) throw Error("failed writing '" + tmp.string() + "'");
  }
  fs::rename(tmp, path);
}

std::string utc_now() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

json metrics_json(const MiouResult& r) {
  json per = json::object();
  for (std::size_t k = 0; k < r.per_class.size(); ++k) {
    const std::string name = k < kSceneClasses ? kSceneClassNames[k] : "class" + std::to_string(k);
    per[name] = r.per_class[k] ? json(*r.per_class[k]) : json(nullptr);
  }
  return {{"miou", r.miou}, {"accuracy", r.accuracy}, {"per_class_iou", per}, {"classes_present", r.present}};
}

void write_manifest(const fs::path& path, const json& config, std::uint64_t seed, const json& metrics) {
  const json m = {{"config", config}, {"seed", seed}, {"version", SPM_VERSION}, {"metrics", metrics}, {"timestamp", utc_now()}};
  write_atomic(path, m.dump(2) + "\n");
}

void print_iou_table(const MiouResult& r) {
  std::printf("%-10s %8s\n", "class", "IoU");
  for (std::size_t k = 0; k < r.per_class.size(); ++k) {
    const std::string name = k < kSceneClasses ? kSceneClassNames[k] : "class" + std::to_string(k);
    if (r.per_class[k]) std::printf("%-10s %8.4f\n", name.c_str(), *r.per_class[k]);
    else std::printf("%-10s %8s\n", name.c_str(), "-");
  }
  std::printf("%-10s %8.4f\n%-10s %8.4f\n", "mIoU", r.miou, "accuracy", r.accuracy);
}

std::vector<PointCloud> load_dir(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw ConfigError("dataset directory '" + dir.string() + "' does not exist");
  std::vector<PointCloud> out;
  for (const auto& p : list_pointclouds(dir)) out.push_back(load_pointcloud(p));
  if (out.empty()) throw ConfigError("no .spc files in '" + dir.string() + "'");
  return out;
}

std::vector<PointCloud> build_dataset(const DataConfig& d) {
  if (d.dir) return load_dir(*d.dir);
  std::vector<PointCloud> out;
  for (std::size_t i = 0; i < d.scenes; ++i) {
    SyntheticSceneSpec s;
    s.seed = d.seed + i;
    s.points = d.points;
    s.extent = d.extent;
    out.push_back(generate_synthetic_scene(s));
  }
  return out;
}

// Model config for an existing checkpoint: explicit --config, else the
// manifest written next to it by `train`.
ModelConfig model_for_checkpoint(const fs::path& checkpoint, const std::string& config_path) {
  if (!config_path.empty()) return run_config_from_json(read_json_file(config_path)).model;
  const fs::path manifest = checkpoint.parent_path() / "manifest.json";
  if (!fs::exists(manifest)) throw ConfigError("no --config given and no manifest.json beside the checkpoint");
  const json m = read_json_file(manifest);
  if (!m.contains("config")) throw ConfigError(manifest.string() + ": missing 'config'");
  return run_config_from_json(m["config"]).model;
}

Model load_model(const fs::path& checkpoint, const std::string& config_path) {
  Model m = build_model(model_for_checkpoint(checkpoint, config_path), 0);
  load_checkpoint(checkpoint, m.store);
  return m;
}

struct TrainArgs {
  std::string config, out, data;
  std::optional<std::uint64_t> seed;
};

int cmd_train(const TrainArgs& a) {
  RunConfig rc = run_config_from_json(read_json_file(a.config));
  if (a.seed) rc.train.seed = *a.seed;
  if (!a.data.empty()) rc.data.dir = a.data;
  const std::vector<PointCloud> data = build_dataset(rc.data);
  fs::create_directories(a.out);

  Model model = build_model(rc.model, rc.train.seed);
  std::printf("parameters: %zu tensors, %zu scalars\n", model.store.size(), model.store.num_scalars());
  Trainer trainer(model, rc.train, data.size());
  double last = 0.0;
  for (std::size_t e = 0; e < rc.train.epochs; ++e) {
    const auto losses = trainer.train_epoch(data);
    double mean = 0.0;
    for (double l : losses) mean += l;
    mean /= static_cast<double>(losses.size());
    last = losses.back();
    std::printf("epoch %zu loss %.6f lr %.3e\n", e + 1, mean, trainer.schedule()(trainer.steps()));
  }
  save_checkpoint(fs::path(a.out) / "model.spmb", model.store);
  const MiouResult r = evaluate(model, data);
  json metrics = metrics_json(r);
  metrics["final_loss"] = last;
  metrics["steps"] = trainer.steps();
  write_manifest(fs::path(a.out) / "manifest.json", to_json(rc), rc.train.seed, metrics);
  std::printf("train mIoU %.4f accuracy %.4f\n", r.miou, r.accuracy);
  return 0;
}

struct EvalArgs {
  std::string checkpoint, data, config, out;
  bool as_json = false;
};

int cmd_eval(const EvalArgs& a) {
  const Model model = load_model(a.checkpoint, a.config);
  const MiouResult r = evaluate(model, load_dir(a.data));
  const json metrics = metrics_json(r);
  if (a.as_json) std::printf("%s\n", metrics.dump().c_str());
  else print_iou_table(r);
  if (!a.out.empty()) {
    fs::create_directories(a.out);
    RunConfig rc;
    rc.model = model.cfg;
    rc.data.dir = a.data;
    write_manifest(fs::path(a.out) / "manifest.json", to_json(rc), 0, metrics);
  }
  return 0;
}

struct SegmentArgs {
  std::string checkpoint, input, out, config;
};

int cmd_segment(const SegmentArgs& a) {
  const Model model = load_model(a.checkpoint, a.config);
  PointCloud pc = load_pointcloud(a.input);
  pc.labels = predict(model, pc);
  save_pointcloud(a.out, pc);
  std::printf("segmented %zu points -> %s\n", pc.size(), a.out.c_str());
  return 0;
}

struct GenerateArgs {
  std::string out;
  std::size_t count = 1, points = 2000, lattice = 0;
  double extent = 4.0;
  std::uint64_t seed = 0;
};

int cmd_generate(const GenerateArgs& a) {
  fs::create_directories(a.out);
  if (a.lattice > 0) {
    // Dense n^3 lattice, one point per unit cell centre.
    const std::size_t n = a.lattice, total = n * n * n;
    PointCloud pc;
    pc.coords = Tensor({total, 3});
    pc.feats = Tensor({total, 3}, 0.5);
    std::size_t r = 0;
    for (std::size_t x = 0; x < n; ++x)
      for (std::size_t y = 0; y < n; ++y)
        for (std::size_t z = 0; z < n; ++z, ++r) {
          pc.coords.at(r, 0) = static_cast<double>(x) + 0.5;
          pc.coords.at(r, 1) = static_cast<double>(y) + 0.5;
          pc.coords.at(r, 2) = static_cast<double>(z) + 0.5;
        }
    save_pointcloud(fs::path(a.out) / "lattice.spc", pc);
    std::printf("wrote %zu-point lattice\n", total);
    return 0;
  }
  for (std::size_t i = 0; i < a.count; ++i) {
    SyntheticSceneSpec s;
    s.seed = a.seed + i;
    s.points = a.points;
    s.extent = a.extent;
    char name[32];
    std::snprintf(name, sizeof name, "scene_%03zu.spc", i);
    save_pointcloud(fs::path(a.out) / name, generate_synthetic_scene(s));
  }
  std::printf("wrote %zu scenes to %s\n", a.count, a.out.c_str());
  return 0;
}

struct DemoArgs {
  std::string input, out, pattern = "hilbert";
  double grid_size = 0.02;
  bool as_json = false;
};

int cmd_serialize_demo(const DemoArgs& a) {
  SerializationPattern pattern;
  try {
    pattern = parse_pattern(a.pattern);
  } catch (const ParseError& e) {
    throw ConfigError(e.what());
  }
  const PointCloud pc = load_pointcloud(a.input);
  const VoxelSet vs = voxelize(pc, a.grid_size);
  const SerializationOrder order = order_points(vs.cells, pattern, required_depth(vs.cells));

  std::ofstream csv(a.out);
  if (!csv) throw Error("cannot write '" + a.out + "'");
  csv << "sequence_index,key,x,y,z\n";
  double l1 = 0.0;
  for (std::size_t i = 0; i < order.perm.size(); ++i) {
    const Cell& c = vs.cells[static_cast<std::size_t>(order.perm[i])];
    csv << i << ',' << order.keys[i] << ',' << c[0] << ',' << c[1] << ',' << c[2] << '\n';
    if (i > 0) {
      const Cell& p = vs.cells[static_cast<std::size_t>(order.perm[i - 1])];
      l1 += std::abs(c[0] - p[0]) + std::abs(c[1] - p[1]) + std::abs(c[2] - p[2]);
    }
  }
  const std::size_t n = order.perm.size();
  const double mean = n > 1 ? l1 / static_cast<double>(n - 1) : 0.0;
  if (a.as_json) {
    std::printf("%s\n", json({{"cells", n}, {"pattern", a.pattern}, {"mean_l1", mean}}).dump().c_str());
  } else {
    std::printf("cells %zu pattern %s mean_l1 %.6f\n", n, a.pattern.c_str(), mean);
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Serialized point Mamba: training, evaluation and serialization tools"};
  app.set_version_flag("--version", SPM_VERSION);
  app.require_subcommand(1);

  TrainArgs ta;
  auto* train = app.add_subcommand("train", "train a model and write a checkpoint plus manifest");
  train->add_option("--config", ta.config, "JSON config with model/train/data sections")->required();
  train->add_option("--out", ta.out, "output directory")->required();
  train->add_option("--data", ta.data, "directory of .spc scenes (overrides data section)");
  train->add_option("--seed", ta.seed, "training and initialization seed");

  EvalArgs ea;
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on a directory of labeled scenes");
  eval->add_option("--checkpoint", ea.checkpoint, "model.spmb")->required();
  eval->add_option("--data", ea.data, "directory of .spc scenes")->required();
  eval->add_option("--config", ea.config, "config JSON (default: manifest beside the checkpoint)");
  eval->add_option("--out", ea.out, "directory for an evaluation manifest");
  eval->add_flag("--json", ea.as_json, "machine-readable output");

  SegmentArgs sa;
  auto* segment = app.add_subcommand("segment", "predict per-point labels for one cloud");
  segment->add_option("--checkpoint", sa.checkpoint, "model.spmb")->required();
  segment->add_option("--input", sa.input, "input .spc")->required();
  segment->add_option("--out", sa.out, "output .spc with predicted labels")->required();
  segment->add_option("--config", sa.config, "config JSON (default: manifest beside the checkpoint)");

  GenerateArgs ga;
  auto* generate = app.add_subcommand("generate", "write synthetic labeled scenes");
  generate->add_option("--out", ga.out, "output directory")->required();
  generate->add_option("--count", ga.count, "number of scenes")->check(CLI::PositiveNumber);
  generate->add_option("--points", ga.points, "points per scene")->check(CLI::Range(50, 10000000));
  generate->add_option("--extent", ga.extent, "room side length in meters");
  generate->add_option("--seed", ga.seed, "seed of the first scene");
  generate->add_option("--lattice", ga.lattice, "write a dense n^3 unit lattice instead");

  DemoArgs da;
  auto* demo = app.add_subcommand("serialize-demo", "order a cloud along a space-filling curve and emit CSV");
  demo->add_option("--input", da.input, "input .spc")->required();
  demo->add_option("--out", da.out, "output CSV")->required();
  demo->add_option("--pattern", da.pattern, "z, z-trans, hilbert or hilbert-trans");
  demo->add_option("--grid-size", da.grid_size, "voxel size")->check(CLI::PositiveNumber);
  demo->add_flag("--json", da.as_json, "machine-readable summary");

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }

  try {
    if (*train) return cmd_train(ta);
    if (*eval) return cmd_eval(ea);
    if (*segment) return cmd_segment(sa);
    if (*generate) return cmd_generate(ga);
    if (*demo) return cmd_serialize_demo(da);
  } catch (const NumericError& e) {
    std::fprintf(stderr, "numeric failure: %s\n", e.what());
    return kExitNumeric;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitUsage;
  }
  return kExitUsage;
}
