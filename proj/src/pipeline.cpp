#include "scmii/pipeline.hpp"

#include <spdlog/spdlog.h>

#include <fstream>
#include <set>
#include <sstream>

namespace scmii {
namespace {

using nlohmann::json;

// Reads one JSON object strictly: every key must be consumed by get() or
// child(), otherwise finish() reports the first unknown key by JSON path.
class ObjectReader {
 public:
  ObjectReader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(path_.empty() ? "/" : path_, "expected an object");
  }

  template <typename T>
  void get(const char* key, T* out) {
    known_.insert(key);
    const auto it = j_.find(key);
    if (it == j_.end()) return;
    try {
      *out = it->template get<T>();
    } catch (const json::exception&) {
      throw ConfigError(path_ + "/" + key,
                        "has the wrong type (" + std::string(it->type_name()) + ")");
    }
  }

  std::optional<ObjectReader> child(const char* key) {
    known_.insert(key);
    const auto it = j_.find(key);
    if (it == j_.end()) return std::nullopt;
    return ObjectReader(*it, path_ + "/" + key);
  }

  const json* raw(const char* key) {
    known_.insert(key);
    const auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }

  const std::string& path() const { return path_; }

  void finish() const {
    for (const auto& [key, value] : j_.items()) {
      if (known_.count(key) == 0) throw ConfigError(path_ + "/" + key, "unknown key '" + key + "'");
    }
  }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> known_;
};

json pose_to_json(const Pose6DoF& p) { return {p.tx, p.ty, p.tz, p.roll, p.pitch, p.yaw}; }

Pose6DoF pose_from_json(const json& j, const std::string& path) {
  std::array<double, 6> v{};
  try {
    v = j.get<std::array<double, 6>>();
  } catch (const json::exception&) {
    throw ConfigError(path, "expected [tx, ty, tz, roll, pitch, yaw]");
  }
  return {v[0], v[1], v[2], v[3], v[4], v[5]};
}

Pose6DoF compose_offset(const Pose6DoF& p, const Pose6DoF& d) {
  return {p.tx + d.tx, p.ty + d.ty, p.tz + d.tz, p.roll + d.roll, p.pitch + d.pitch, p.yaw + d.yaw};
}

}  // namespace

PipelineConfig config_from_json(const json& j) {
  PipelineConfig cfg;
  ObjectReader root(j, "");
  if (auto s = root.child("scene")) {
    s->get("seed", &cfg.scene.seed);
    s->get("devices", &cfg.scene.devices);
    s->get("frames", &cfg.scene.frames);
    s->get("layout", &cfg.scene.layout);
    s->finish();
  }
  root.get("clouds", &cfg.clouds);
  root.get("truth_path", &cfg.truth_path);
  if (auto n = root.child("network")) {
    n->get("path", &cfg.network.path);
    n->get("seed", &cfg.network.seed);
    std::string mode = to_string(cfg.network.mode);
    n->get("mode", &mode);
    try {
      cfg.network.mode = init_mode_from_string(mode);
    } catch (const std::invalid_argument& e) {
      throw ConfigError(n->path() + "/mode", e.what());
    }
    n->finish();
  }
  if (auto f = root.child("fusion")) {
    f->get("method", &cfg.fusion.method);
    f->get("averaging", &cfg.fusion.averaging);
    f->get("seed", &cfg.fusion.seed);
    f->finish();
  }
  if (auto c = root.child("calibration")) {
    c->get("source", &cfg.calibration.source);
    c->get("path", &cfg.calibration.path);
    c->get("cell_size", &cfg.calibration.cell_size);
    c->get("min_points", &cfg.calibration.min_points);
    if (const json* g = c->raw("initial_guesses")) {
      if (!g->is_array()) throw ConfigError(c->path() + "/initial_guesses", "expected an array");
      for (std::size_t i = 0; i < g->size(); ++i) {
        cfg.calibration.initial_guesses.push_back(
            pose_from_json((*g)[i], c->path() + "/initial_guesses/" + std::to_string(i)));
      }
    }
    c->finish();
  }
  if (auto l = root.child("link")) {
    l->get("latency_ms", &cfg.link.latency_ms);
    l->get("bandwidth_mbps", &cfg.link.bandwidth_mbps);
    l->get("jitter_ms", &cfg.link.jitter_ms);
    l->get("corruption_probability", &cfg.link.corruption_probability);
    l->get("seed", &cfg.link.seed);
    l->finish();
  }
  if (auto c = root.child("cost")) {
    c->get("edge_macs_per_s", &cfg.cost.edge_macs_per_s);
    c->get("server_macs_per_s", &cfg.cost.server_macs_per_s);
    c->get("layer_overhead_ms", &cfg.cost.layer_overhead_ms);
    c->get("voxelize_macs_per_point", &cfg.cost.voxelize_macs_per_point);
    c->get("transform_macs_per_entry", &cfg.cost.transform_macs_per_entry);
    c->get("edge_serialize_mb_per_s", &cfg.cost.edge_serialize_mb_per_s);
    c->get("server_serialize_mb_per_s", &cfg.cost.server_serialize_mb_per_s);
    c->finish();
  }
  if (auto t = root.child("transport")) {
    t->get("kind", &cfg.transport.kind);
    t->get("listen", &cfg.transport.listen);
    t->get("connect", &cfg.transport.connect);
    t->finish();
  }
  root.get("timeout_ms", &cfg.timeout_ms);
  root.get("frame_period_ms", &cfg.frame_period_ms);
  root.get("baseline_colocated", &cfg.baseline_colocated);
  root.get("output_dir", &cfg.output_dir);
  root.finish();
  validate_config(cfg, false);
  return cfg;
}

json config_to_json(const PipelineConfig& cfg) {
  json guesses = json::array();
  for (const Pose6DoF& p : cfg.calibration.initial_guesses) guesses.push_back(pose_to_json(p));
  return {
      {"scene",
       {{"seed", cfg.scene.seed},
        {"devices", cfg.scene.devices},
        {"frames", cfg.scene.frames},
        {"layout", cfg.scene.layout}}},
      {"clouds", cfg.clouds},
      {"truth_path", cfg.truth_path},
      {"network",
       {{"path", cfg.network.path},
        {"seed", cfg.network.seed},
        {"mode", to_string(cfg.network.mode)}}},
      {"fusion",
       {{"method", cfg.fusion.method},
        {"averaging", cfg.fusion.averaging},
        {"seed", cfg.fusion.seed}}},
      {"calibration",
       {{"source", cfg.calibration.source},
        {"path", cfg.calibration.path},
        {"cell_size", cfg.calibration.cell_size},
        {"min_points", cfg.calibration.min_points},
        {"initial_guesses", guesses}}},
      {"link",
       {{"latency_ms", cfg.link.latency_ms},
        {"bandwidth_mbps", cfg.link.bandwidth_mbps},
        {"jitter_ms", cfg.link.jitter_ms},
        {"corruption_probability", cfg.link.corruption_probability},
        {"seed", cfg.link.seed}}},
      {"cost",
       {{"edge_macs_per_s", cfg.cost.edge_macs_per_s},
        {"server_macs_per_s", cfg.cost.server_macs_per_s},
        {"layer_overhead_ms", cfg.cost.layer_overhead_ms},
        {"voxelize_macs_per_point", cfg.cost.voxelize_macs_per_point},
        {"transform_macs_per_entry", cfg.cost.transform_macs_per_entry},
        {"edge_serialize_mb_per_s", cfg.cost.edge_serialize_mb_per_s},
        {"server_serialize_mb_per_s", cfg.cost.server_serialize_mb_per_s}}},
      {"transport",
       {{"kind", cfg.transport.kind},
        {"listen", cfg.transport.listen},
        {"connect", cfg.transport.connect}}},
      {"timeout_ms", cfg.timeout_ms},
      {"frame_period_ms", cfg.frame_period_ms},
      {"baseline_colocated", cfg.baseline_colocated},
      {"output_dir", cfg.output_dir},
  };
}

void validate_config(const PipelineConfig& cfg, bool check_files) {
  if (cfg.scene.devices < 1 || cfg.scene.devices > 64) {
    throw ConfigError("/scene/devices", "must be in [1, 64]");
  }
  if (cfg.scene.frames < 1) throw ConfigError("/scene/frames", "must be >= 1");
  if (cfg.scene.layout != "intersection" && cfg.scene.layout != "occlusion") {
    throw ConfigError("/scene/layout", "must be 'intersection' or 'occlusion'");
  }
  if (cfg.scene.layout == "occlusion" && cfg.scene.devices != 2) {
    throw ConfigError("/scene/devices", "the occlusion layout has exactly 2 devices");
  }
  if (!cfg.clouds.empty()) {
    const std::size_t n = cfg.clouds.front().size();
    for (std::size_t f = 0; f < cfg.clouds.size(); ++f) {
      if (cfg.clouds[f].size() != n || n == 0) {
        throw ConfigError("/clouds/" + std::to_string(f),
                          "every frame needs the same device count");
      }
    }
  }
  if (cfg.fusion.method != "max" && cfg.fusion.method != "concat1" &&
      cfg.fusion.method != "concat3") {
    throw ConfigError("/fusion/method", "must be max, concat1 or concat3");
  }
  const std::string& src = cfg.calibration.source;
  if (src != "inline" && src != "file" && src != "truth") {
    throw ConfigError("/calibration/source", "must be inline, file or truth");
  }
  if (src == "file" && cfg.calibration.path.empty()) {
    throw ConfigError("/calibration/path", "required when source is 'file'");
  }
  if (!(cfg.calibration.cell_size > 0.0))
    throw ConfigError("/calibration/cell_size", "must be > 0");
  if (cfg.calibration.min_points < 2) throw ConfigError("/calibration/min_points", "must be >= 2");
  if (cfg.transport.kind != "simulated" && cfg.transport.kind != "sockets") {
    throw ConfigError("/transport/kind", "must be simulated or sockets");
  }
  try {
    cfg.link.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError("/link", e.what());
  }
  try {
    cfg.cost.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError("/cost", e.what());
  }
  if (!(cfg.timeout_ms > 0.0)) throw ConfigError("/timeout_ms", "must be > 0");
  if (!(cfg.frame_period_ms >= 0.0)) throw ConfigError("/frame_period_ms", "must be >= 0");
  if (!check_files) return;

  auto must_exist = [](const std::string& path, const std::string& where) {
    if (!std::filesystem::exists(path)) throw ConfigError(where, "file not found: " + path);
  };
  for (std::size_t f = 0; f < cfg.clouds.size(); ++f) {
    for (std::size_t d = 0; d < cfg.clouds[f].size(); ++d) {
      must_exist(cfg.clouds[f][d], "/clouds/" + std::to_string(f) + "/" + std::to_string(d));
    }
  }
  if (!cfg.truth_path.empty()) must_exist(cfg.truth_path, "/truth_path");
  if (!cfg.network.path.empty()) must_exist(cfg.network.path, "/network/path");
  if (src == "file") must_exist(cfg.calibration.path, "/calibration/path");
}

PipelineConfig load_config(const std::filesystem::path& path) {
  json j;
  try {
    j = read_json(path);
  } catch (const json::parse_error& e) {
    throw ConfigError("/", "invalid JSON in " + path.string() + ": " + e.what());
  }
  PipelineConfig cfg = config_from_json(j);
  validate_config(cfg, true);
  return cfg;
}

void save_config(const PipelineConfig& cfg, const std::filesystem::path& path) {
  write_json(path, config_to_json(cfg));
}

SceneSpec frame_scene_spec(const SceneSource& src, int frame) {
  SceneSpec spec = src.layout == "occlusion" ? occlusion_scene_spec(src.seed)
                                             : default_scene_spec(src.seed, src.devices);
  spec.seed = src.seed + 1000003ull * static_cast<std::uint64_t>(frame);
  return spec;
}

Inputs load_inputs(const PipelineConfig& cfg) {
  Inputs in;
  if (cfg.uses_files()) {
    const std::size_t n = cfg.clouds.front().size();
    for (std::size_t d = 0; d < n; ++d) in.devices.push_back(static_cast<int>(d));
    for (const auto& frame : cfg.clouds) {
      std::vector<PointCloud> clouds;
      for (const std::string& p : frame) {
        if (!std::filesystem::exists(p)) throw std::runtime_error("cloud file not found: " + p);
        clouds.push_back(load_cloud(p, format_for_path(p)));
      }
      in.frames.push_back(std::move(clouds));
    }
    if (!cfg.truth_path.empty()) {
      const json doc = read_json(cfg.truth_path);
      for (const json& t : doc.at("frames")) {
        in.truth.push_back(truth_from_json(t));
      }
    }
    return in;
  }
  for (int d = 0; d < cfg.scene.devices; ++d) in.devices.push_back(d);
  for (int f = 0; f < cfg.scene.frames; ++f) {
    Scene s = gen_scene(frame_scene_spec(cfg.scene, f));
    in.frames.push_back(std::move(s.clouds));
    in.truth.push_back(std::move(s.truth));
  }
  return in;
}

void build_network(const PipelineConfig& cfg, NetworkSpec* spec, Weights* weights) {
  if (!cfg.network.path.empty()) {
    network_from_json(read_json(cfg.network.path), spec, weights);
    return;
  }
  *spec = default_network_spec();
  *weights = init_weights(*spec, cfg.network.seed, cfg.network.mode);
}

FusionConfig build_fusion(const PipelineConfig& cfg, const NetworkSpec& spec,
                          const std::vector<int>& devices) {
  return make_fusion_config(cfg.fusion.method, devices, spec.head_output_grid(),
                            spec.feature_channels(), cfg.fusion.seed, cfg.network.mode,
                            cfg.fusion.averaging);
}

Calibration truth_calibration(const GroundTruth& truth) {
  Calibration c;
  c.reference_device = 0;
  const RigidTransform to_ref = invert(truth.extrinsics.at(0));
  for (std::size_t d = 1; d < truth.extrinsics.size(); ++d) {
    c.transforms.emplace(static_cast<int>(d), compose(to_ref, truth.extrinsics[d]));
  }
  return c;
}

Calibration calibrate_inputs(const PipelineConfig& cfg, const Inputs& inputs) {
  const std::vector<PointCloud>& frame0 = inputs.frames.at(0);
  std::vector<Pose6DoF> guesses = cfg.calibration.initial_guesses;
  if (guesses.empty()) {
    if (inputs.truth.empty()) {
      throw std::runtime_error(
          "inline calibration needs calibration.initial_guesses or a truth file");
    }
    const Calibration truth = truth_calibration(inputs.truth.front());
    for (std::size_t d = 1; d < frame0.size(); ++d) {
      guesses.push_back(compose_offset(to_pose(truth.at(static_cast<int>(d))), kSurveyOffset));
    }
  }
  if (guesses.size() + 1 != frame0.size()) {
    throw std::runtime_error("calibration needs " + std::to_string(frame0.size() - 1) +
                             " initial guesses, got " + std::to_string(guesses.size()));
  }
  CalibrationOptions opts;
  opts.cell_size = cfg.calibration.cell_size;
  opts.min_points = static_cast<std::size_t>(cfg.calibration.min_points);
  const std::vector<PointCloud> others(frame0.begin() + 1, frame0.end());
  const std::vector<RigidTransform> found = calibrate(frame0.front(), others, guesses, opts);
  Calibration c;
  c.reference_device = inputs.devices.front();
  for (std::size_t i = 0; i < found.size(); ++i)
    c.transforms.emplace(inputs.devices[i + 1], found[i]);
  return c;
}

Calibration resolve_calibration(const PipelineConfig& cfg, const Inputs& inputs) {
  if (cfg.calibration.source == "file") {
    return Calibration::from_json(read_json(cfg.calibration.path));
  }
  if (cfg.calibration.source == "truth") {
    if (inputs.truth.empty()) throw std::runtime_error("calibration source 'truth' needs truth");
    return truth_calibration(inputs.truth.front());
  }
  return calibrate_inputs(cfg, inputs);
}

std::vector<std::vector<Box3>> reference_truth(const Inputs& inputs) {
  std::vector<std::vector<Box3>> out;
  for (const GroundTruth& t : inputs.truth) {
    out.push_back(boxes_in_frame(t.boxes, t.extrinsics.at(0)));
  }
  return out;
}

json detections_to_json(const std::vector<std::vector<Detection>>& per_frame,
                        const std::vector<bool>& complete) {
  json frames = json::array();
  for (std::size_t f = 0; f < per_frame.size(); ++f) {
    json dets = json::array();
    for (const Detection& d : per_frame[f]) dets.push_back(detection_to_json(d));
    frames.push_back({{"frame_id", f},
                      {"complete", f < complete.size() ? static_cast<bool>(complete[f]) : true},
                      {"detections", dets}});
  }
  return {{"frames", frames}};
}

std::vector<std::vector<Detection>> detections_from_json(const json& j) {
  std::vector<std::vector<Detection>> out;
  for (const json& f : j.at("frames")) {
    std::vector<Detection> dets;
    for (const json& d : f.at("detections")) dets.push_back(detection_from_json(d));
    out.push_back(std::move(dets));
  }
  return out;
}

std::vector<EvalResult> comparison_table(const PipelineConfig& cfg, const Inputs& inputs,
                                         const Calibration& calibration, const NetworkSpec& spec,
                                         const Weights& weights) {
  const std::vector<std::vector<Box3>> truth = reference_truth(inputs);
  if (truth.size() != inputs.frames.size()) {
    throw std::runtime_error("evaluation needs ground truth for every frame");
  }
  const GridSpec target = spec.head_output_grid();
  const std::size_t n = inputs.devices.size();

  // Head outputs are shared by every row.
  std::vector<std::map<int, SparseFeatureTensor>> heads(inputs.frames.size());
  for (std::size_t f = 0; f < inputs.frames.size(); ++f) {
    for (std::size_t d = 0; d < n; ++d) {
      heads[f].emplace(inputs.devices[d], run_head(inputs.frames[f][d], spec, weights));
    }
  }
  auto frames_for = [&](auto&& detect) {
    std::vector<EvalFrame> out;
    for (std::size_t f = 0; f < inputs.frames.size(); ++f) out.push_back({detect(f), truth[f]});
    return out;
  };

  std::vector<EvalResult> rows;
  for (std::size_t d = 0; d < n; ++d) {
    const int id = inputs.devices[d];
    const FusionConfig single = make_fusion_config("max", {id}, target, spec.feature_channels(),
                                                   cfg.fusion.seed, cfg.network.mode, false);
    rows.push_back(evaluate("single-sensor " + std::to_string(id), frames_for([&](std::size_t f) {
                              return server_infer({{id, heads[f].at(id)}}, calibration, single,
                                                  spec, weights);
                            })));
  }
  rows.push_back(evaluate("input-fusion", frames_for([&](std::size_t f) {
                            return run_input_fusion(inputs.frames[f], inputs.devices, calibration,
                                                    spec, weights);
                          })));
  for (const char* method : {"max", "concat1", "concat3"}) {
    const FusionConfig fc =
        make_fusion_config(method, inputs.devices, target, spec.feature_channels(), cfg.fusion.seed,
                           cfg.network.mode, cfg.fusion.averaging);
    const std::string name = method;
    const std::string label = name == "max" ? "max" : "concat-k" + name.substr(6);
    rows.push_back(evaluate(label, frames_for([&](std::size_t f) {
                              return server_infer(heads[f], calibration, fc, spec, weights);
                            })));
  }
  return rows;
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

void write_json(const std::filesystem::path& path, const json& j) {
  write_text(path, j.dump(2) + "\n");
}

json read_json(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  return json::parse(in);
}

}  // namespace scmii
