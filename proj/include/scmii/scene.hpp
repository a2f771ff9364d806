#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <optional>
#include <vector>

#include "json.hpp"
#include "scmii/geometry.hpp"
#include "scmii/pointcloud.hpp"

namespace scmii {

struct Interval {
  double min = 0.0;
  double max = 0.0;
};

/// Axis-aligned cuboid in the world frame.
struct Box3 {
  Eigen::Vector3d center = Eigen::Vector3d::Zero();
  Eigen::Vector3d size = Eigen::Vector3d::Ones();
  int class_id = 0;

  Eigen::Vector3d min_corner() const { return center - size / 2.0; }
  Eigen::Vector3d max_corner() const { return center + size / 2.0; }
};

/// Synthetic intersection: ground plane z = 0, cuboid objects resting on
/// it, and LiDAR sensors at fixed poses (sensor-local -> world).
struct SceneSpec {
  Interval extent_x{-25.0, 25.0};
  Interval extent_y{-25.0, 25.0};
  int min_objects = 5;
  int max_objects = 15;
  Interval length{3.5, 5.0};
  Interval width{1.6, 2.2};
  Interval height{1.4, 2.0};
  double min_gap = 0.5;  // XY clearance between placed boxes
  std::vector<Pose6DoF> sensors;
  double azimuth_step = 0.25 * 3.14159265358979323846 / 180.0;
  double elevation_step = 0.5 * 3.14159265358979323846 / 180.0;
  Interval azimuth_span{-3.14159265358979323846, 3.14159265358979323846};
  Interval elevation_span{-25.0 * 3.14159265358979323846 / 180.0,
                          2.0 * 3.14159265358979323846 / 180.0};
  double max_range = 60.0;
  double noise_sigma = 0.05;
  bool ground = true;
  std::uint64_t seed = 0;
  // When set, these boxes are used verbatim and no placement sampling runs.
  std::optional<std::vector<Box3>> fixed_boxes;
  // Static background (buildings, poles). Occlude and return points like
  // objects, but are not part of the ground truth and block placement.
  std::vector<Box3> structures;

  void validate() const;
};

struct GroundTruth {
  std::vector<Box3> boxes;
  std::vector<RigidTransform> extrinsics;  // sensor-local -> world
};

struct Scene {
  std::vector<PointCloud> clouds;  // one per sensor, sensor-local frame
  GroundTruth truth;
};

/// Places objects by seeded rejection sampling and ray-casts every sensor.
/// Throws std::runtime_error when placement fails after 1000 attempts.
Scene gen_scene(const SceneSpec& spec);

/// Samples non-overlapping boxes only.
std::vector<Box3> place_objects(const SceneSpec& spec);

/// Nearest positive ray parameter where `origin + t*dir` enters `box`.
std::optional<double> ray_box_intersection(const Eigen::Vector3d& origin,
                                           const Eigen::Vector3d& dir, const Box3& box);

/// Unit ray direction in the sensor frame for the given angles.
Eigen::Vector3d ray_direction(double azimuth, double elevation);

/// Corner buildings and seeded roadside poles for an intersection spanning
/// the spec's extent.
std::vector<Box3> intersection_structures(const SceneSpec& spec, std::uint64_t seed);

/// Default intersection used by the CLI: reference sensor at (0, 0, 4.2)
/// with zero rotation, further sensors within 3 m / 20 deg of it, and
/// intersection_structures() seeded from `seed`.
SceneSpec default_scene_spec(std::uint64_t seed, int sensor_count = 2);

/// Occlusion-heavy variant: two sensors on opposite corners of a crowded
/// 32 x 32 m lot, no static structures. The reference sensor has zero
/// rotation so truth boxes stay axis-aligned in its frame.
SceneSpec occlusion_scene_spec(std::uint64_t seed);

/// Ground-truth boxes expressed in the frame of `reference` (sensor-local ->
/// world). Each box becomes the axis-aligned hull of its transformed corners.
std::vector<Box3> boxes_in_frame(const std::vector<Box3>& boxes, const RigidTransform& reference);

nlohmann::json box_to_json(const Box3& b);
Box3 box_from_json(const nlohmann::json& j);
nlohmann::json truth_to_json(const GroundTruth& truth);
GroundTruth truth_from_json(const nlohmann::json& j);

}  // namespace scmii
