#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "scmii/eval.hpp"
#include "scmii/fusion.hpp"
#include "scmii/model.hpp"
#include "scmii/ndt.hpp"
#include "scmii/runtime.hpp"
#include "scmii/scene.hpp"

namespace scmii {

/// Schema violation in a pipeline config; `path` is a JSON pointer.
class ConfigError : public std::runtime_error {
 public:
  ConfigError(const std::string& path, const std::string& what)
      : std::runtime_error(path + ": " + what), path_(path) {}
  const std::string& path() const { return path_; }

 private:
  std::string path_;
};

struct SceneSource {
  std::uint64_t seed = 42;
  int devices = 2;
  int frames = 1;
  // "intersection" (default sensors, buildings, poles) or "occlusion".
  std::string layout = "intersection";
};

struct NetworkSource {
  std::string path;  // spec + weights JSON; empty means initialize
  std::uint64_t seed = 1;
  InitMode mode = InitMode::kIdentityPreserving;
};

struct FusionSource {
  std::string method = "max";  // max | concat1 | concat3
  bool averaging = false;
  std::uint64_t seed = 3;
};

struct CalibrationSource {
  std::string source = "inline";  // inline | file | truth
  std::string path;
  double cell_size = 2.0;
  int min_points = 5;
  // Per non-reference device, in device order. Empty: truth pose offset by
  // kSurveyOffset, standing in for a rough manual survey.
  std::vector<Pose6DoF> initial_guesses;
};

struct TransportSource {
  std::string kind = "simulated";  // simulated | sockets
  std::string listen = "127.0.0.1:7878";
  std::string connect = "127.0.0.1:7878";
};

struct PipelineConfig {
  SceneSource scene;
  // Alternative cloud source: clouds[frame][device] file paths.
  std::vector<std::vector<std::string>> clouds;
  std::string truth_path;  // truth JSON with {"frames": [...]}, optional with clouds
  NetworkSource network;
  FusionSource fusion;
  CalibrationSource calibration;
  LinkModel link;
  CostModel cost;
  TransportSource transport;
  double timeout_ms = 100.0;
  double frame_period_ms = 100.0;
  bool baseline_colocated = false;
  std::string output_dir = "out";

  bool uses_files() const { return !clouds.empty(); }
};

/// Rough guess applied to truth poses when no guesses are configured.
inline constexpr Pose6DoF kSurveyOffset{0.3, -0.2, 0.1, 0.0, 0.0, 0.035};

PipelineConfig config_from_json(const nlohmann::json& j);
nlohmann::json config_to_json(const PipelineConfig& cfg);
/// Parses, validates and checks that referenced files exist.
PipelineConfig load_config(const std::filesystem::path& path);
void save_config(const PipelineConfig& cfg, const std::filesystem::path& path);
/// Cross-field checks; throws ConfigError.
void validate_config(const PipelineConfig& cfg, bool check_files = true);

/// All frames and (when known) truth, in the reference device's frame.
struct Inputs {
  std::vector<int> devices;
  std::vector<std::vector<PointCloud>> frames;  // [frame][device]
  std::vector<GroundTruth> truth;               // world frame; may be empty
};

/// Scene spec for frame `f`: sensors and structures fixed, objects resampled.
SceneSpec frame_scene_spec(const SceneSource& src, int frame);
Inputs load_inputs(const PipelineConfig& cfg);

void build_network(const PipelineConfig& cfg, NetworkSpec* spec, Weights* weights);
FusionConfig build_fusion(const PipelineConfig& cfg, const NetworkSpec& spec,
                          const std::vector<int>& devices);
/// Transforms of each device into the reference (device 0) frame.
Calibration resolve_calibration(const PipelineConfig& cfg, const Inputs& inputs);
/// Runs NDT on frame 0 for every non-reference device.
Calibration calibrate_inputs(const PipelineConfig& cfg, const Inputs& inputs);
/// Truth extrinsics as a Calibration relative to device 0.
Calibration truth_calibration(const GroundTruth& truth);

/// Truth boxes per frame in the reference frame.
std::vector<std::vector<Box3>> reference_truth(const Inputs& inputs);

nlohmann::json detections_to_json(const std::vector<std::vector<Detection>>& per_frame,
                                  const std::vector<bool>& complete);
std::vector<std::vector<Detection>> detections_from_json(const nlohmann::json& j);

/// Comparison rows: one single-sensor row per device, input point-cloud
/// fusion, max, concat k=1, concat k=3.
std::vector<EvalResult> comparison_table(const PipelineConfig& cfg, const Inputs& inputs,
                                         const Calibration& calibration, const NetworkSpec& spec,
                                         const Weights& weights);

void write_text(const std::filesystem::path& path, const std::string& text);
void write_json(const std::filesystem::path& path, const nlohmann::json& j);
nlohmann::json read_json(const std::filesystem::path& path);

}  // namespace scmii
