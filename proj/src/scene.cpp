#include "scmii/scene.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>
#include <stdexcept>
#include <string>

namespace scmii {
namespace {

constexpr int kMaxPlacementAttempts = 1000;
constexpr double kPi = 3.14159265358979323846;
constexpr double kMinHitDistance = 1e-6;

bool footprints_overlap(const Box3& a, const Box3& b, double gap) {
  for (int axis = 0; axis < 2; ++axis) {
    const double reach = (a.size[axis] + b.size[axis]) / 2.0 + gap;
    if (std::abs(a.center[axis] - b.center[axis]) >= reach) return false;
  }
  return true;
}

bool covers_sensor(const Box3& b, const Eigen::Vector3d& sensor, double gap) {
  return std::abs(b.center.x() - sensor.x()) < b.size.x() / 2.0 + gap &&
         std::abs(b.center.y() - sensor.y()) < b.size.y() / 2.0 + gap;
}

double uniform(std::mt19937_64& rng, const Interval& iv) {
  if (iv.max <= iv.min) return iv.min;
  return std::uniform_real_distribution<double>(iv.min, iv.max)(rng);
}

// Lattice samples from `span.min` in `step` increments, inclusive of the end
// when it falls on the lattice.
std::vector<double> lattice(const Interval& span, double step) {
  std::vector<double> out;
  const auto n = static_cast<long>(std::floor((span.max - span.min) / step + 1e-9));
  for (long i = 0; i <= n; ++i) out.push_back(span.min + static_cast<double>(i) * step);
  return out;
}

PointCloud cast_sensor(const SceneSpec& spec, std::vector<Box3> boxes,
                       const RigidTransform& extrinsic, std::uint64_t stream_seed) {
  boxes.insert(boxes.end(), spec.structures.begin(), spec.structures.end());
  std::mt19937_64 rng(stream_seed);
  std::normal_distribution<double> noise(0.0, 1.0);
  const RigidTransform to_local = invert(extrinsic);
  const Eigen::Matrix3d rot = extrinsic.rotation();
  const Eigen::Vector3d origin = extrinsic.translation();

  std::vector<double> azimuths = lattice(spec.azimuth_span, spec.azimuth_step);
  // A full turn would sample the seam twice.
  if (!azimuths.empty() && spec.azimuth_span.max - spec.azimuth_span.min >= 2.0 * kPi - 1e-9 &&
      azimuths.back() - azimuths.front() >= 2.0 * kPi - 1e-9) {
    azimuths.pop_back();
  }
  const std::vector<double> elevations = lattice(spec.elevation_span, spec.elevation_step);

  PointCloud cloud;
  for (double el : elevations) {
    for (double az : azimuths) {
      const Eigen::Vector3d dir = rot * ray_direction(az, el);
      double best = std::numeric_limits<double>::infinity();
      for (const Box3& b : boxes) {
        if (auto t = ray_box_intersection(origin, dir, b); t && *t < best) best = *t;
      }
      if (spec.ground && dir.z() < 0.0) {
        const double t = -origin.z() / dir.z();
        if (t > kMinHitDistance && t < best) best = t;
      }
      if (!(best <= spec.max_range)) continue;
      double range = best;
      if (spec.noise_sigma > 0.0) range += spec.noise_sigma * noise(rng);
      cloud.points.push_back(apply_point(to_local, origin + range * dir));
    }
  }
  return cloud;
}

}  // namespace

void SceneSpec::validate() const {
  if (!(azimuth_step > 0.0) || !(elevation_step > 0.0)) {
    throw std::invalid_argument("scene angular resolution must be > 0");
  }
  if (!(max_range > 0.0)) throw std::invalid_argument("scene max range must be > 0");
  if (sensors.empty()) throw std::invalid_argument("scene needs at least one sensor");
  if (noise_sigma < 0.0) throw std::invalid_argument("scene noise sigma must be >= 0");
  if (min_objects < 0 || max_objects < min_objects) {
    throw std::invalid_argument("scene object count range is invalid");
  }
  if (extent_x.max <= extent_x.min || extent_y.max <= extent_y.min) {
    throw std::invalid_argument("scene ground extent is empty");
  }
  for (const Interval* iv : {&length, &width, &height}) {
    if (!(iv->min > 0.0) || iv->max < iv->min) {
      throw std::invalid_argument("scene cuboid size ranges must be positive");
    }
  }
}

Eigen::Vector3d ray_direction(double azimuth, double elevation) {
  return {std::cos(elevation) * std::cos(azimuth), std::cos(elevation) * std::sin(azimuth),
          std::sin(elevation)};
}

std::optional<double> ray_box_intersection(const Eigen::Vector3d& origin,
                                           const Eigen::Vector3d& dir, const Box3& box) {
  const Eigen::Vector3d lo = box.min_corner();
  const Eigen::Vector3d hi = box.max_corner();
  double t_near = -std::numeric_limits<double>::infinity();
  double t_far = std::numeric_limits<double>::infinity();
  for (int a = 0; a < 3; ++a) {
    if (dir[a] == 0.0) {
      if (origin[a] < lo[a] || origin[a] > hi[a]) return std::nullopt;
      continue;
    }
    double t0 = (lo[a] - origin[a]) / dir[a];
    double t1 = (hi[a] - origin[a]) / dir[a];
    if (t0 > t1) std::swap(t0, t1);
    t_near = std::max(t_near, t0);
    t_far = std::min(t_far, t1);
  }
  if (t_near > t_far || t_near <= kMinHitDistance) return std::nullopt;
  return t_near;
}

std::vector<Box3> place_objects(const SceneSpec& spec) {
  if (spec.fixed_boxes) return *spec.fixed_boxes;
  std::seed_seq seq{spec.seed, std::uint64_t{0x5c3e11}};
  std::mt19937_64 rng(seq);
  const int count = std::uniform_int_distribution<int>(spec.min_objects, spec.max_objects)(rng);
  std::vector<Box3> boxes;
  int attempts = 0;
  while (static_cast<int>(boxes.size()) < count) {
    if (++attempts > kMaxPlacementAttempts) {
      throw std::runtime_error("object placement failed after " +
                               std::to_string(kMaxPlacementAttempts) +
                               " attempts; use a smaller object count or a larger extent");
    }
    Box3 b;
    b.size = {uniform(rng, spec.length), uniform(rng, spec.width), uniform(rng, spec.height)};
    // Half the boxes are oriented along y so the scene is not all parallel.
    if (std::uniform_int_distribution<int>(0, 1)(rng) == 1) std::swap(b.size.x(), b.size.y());
    const Interval cx{spec.extent_x.min + b.size.x() / 2.0, spec.extent_x.max - b.size.x() / 2.0};
    const Interval cy{spec.extent_y.min + b.size.y() / 2.0, spec.extent_y.max - b.size.y() / 2.0};
    if (cx.max < cx.min || cy.max < cy.min) continue;
    b.center = {uniform(rng, cx), uniform(rng, cy), b.size.z() / 2.0};
    bool ok = true;
    for (const Box3& other : boxes) ok = ok && !footprints_overlap(b, other, spec.min_gap);
    for (const Box3& other : spec.structures) {
      ok = ok && !footprints_overlap(b, other, spec.min_gap);
    }
    for (const Pose6DoF& s : spec.sensors) {
      ok = ok && !covers_sensor(b, Eigen::Vector3d(s.tx, s.ty, s.tz), spec.min_gap);
    }
    if (ok) boxes.push_back(b);
  }
  return boxes;
}

Scene gen_scene(const SceneSpec& spec) {
  spec.validate();
  Scene scene;
  scene.truth.boxes = place_objects(spec);
  for (std::size_t i = 0; i < spec.sensors.size(); ++i) {
    const RigidTransform extrinsic = from_pose(spec.sensors[i]);
    scene.truth.extrinsics.push_back(extrinsic);
    scene.clouds.push_back(cast_sensor(spec, scene.truth.boxes, extrinsic, spec.seed + i));
  }
  return scene;
}

std::vector<Box3> intersection_structures(const SceneSpec& spec, std::uint64_t seed) {
  std::seed_seq seq{seed, std::uint64_t{0x57a7c}};
  std::mt19937_64 rng(seq);
  std::vector<Box3> out;
  // Buildings fill the four corners outside a 2 x 9 m road cross.
  constexpr double kRoadHalfWidth = 9.0;
  const double x_reach = std::min(std::abs(spec.extent_x.min), spec.extent_x.max);
  const double y_reach = std::min(std::abs(spec.extent_y.min), spec.extent_y.max);
  for (int sx : {-1, 1}) {
    for (int sy : {-1, 1}) {
      const double setback_x = kRoadHalfWidth + uniform(rng, {1.0, 4.0});
      const double setback_y = kRoadHalfWidth + uniform(rng, {1.0, 4.0});
      const double depth_x = std::max(x_reach - setback_x, 2.0);
      const double depth_y = std::max(y_reach - setback_y, 2.0);
      Box3 b;
      b.size = {depth_x, depth_y, uniform(rng, {6.0, 15.0})};
      b.center = {sx * (setback_x + depth_x / 2.0), sy * (setback_y + depth_y / 2.0),
                  b.size.z() / 2.0};
      out.push_back(b);
    }
  }
  // Poles along the road edges.
  const int poles = std::uniform_int_distribution<int>(6, 12)(rng);
  for (int i = 0; i < poles; ++i) {
    Box3 p;
    p.size = {0.3, 0.3, uniform(rng, {4.0, 7.0})};
    const double along = uniform(rng, {-std::max(x_reach, y_reach), std::max(x_reach, y_reach)});
    const double side = (i % 2 == 0 ? 1.0 : -1.0) * (kRoadHalfWidth - 0.5);
    p.center = (i % 4 < 2) ? Eigen::Vector3d(along, side, p.size.z() / 2.0)
                           : Eigen::Vector3d(side, along, p.size.z() / 2.0);
    bool clear = true;
    for (const Box3& o : out) clear = clear && !footprints_overlap(p, o, 0.2);
    for (const Pose6DoF& s : spec.sensors) {
      clear = clear && !covers_sensor(p, Eigen::Vector3d(s.tx, s.ty, s.tz), 0.5);
    }
    if (clear) out.push_back(p);
  }
  return out;
}

SceneSpec default_scene_spec(std::uint64_t seed, int sensor_count) {
  SceneSpec spec;
  spec.seed = seed;
  constexpr double kDeg = kPi / 180.0;
  const Pose6DoF presets[] = {
      {0.0, 0.0, 4.2, 0.0, 0.0, 0.0},
      {2.5, -1.2, 4.5, 0.0, 0.0, 12.0 * kDeg},
      {-2.0, 2.2, 4.0, 0.0, 0.0, -15.0 * kDeg},
      {1.0, 2.6, 4.4, 0.0, 0.0, 18.0 * kDeg},
  };
  for (int i = 0; i < sensor_count; ++i) {
    Pose6DoF p = presets[i % 4];
    p.tx += 0.5 * (i / 4);
    spec.sensors.push_back(p);
  }
  spec.structures = intersection_structures(spec, seed);
  return spec;
}

SceneSpec occlusion_scene_spec(std::uint64_t seed) {
  SceneSpec spec;
  spec.seed = seed;
  spec.extent_x = {-16.0, 16.0};
  spec.extent_y = {-16.0, 16.0};
  spec.min_objects = 12;
  spec.max_objects = 15;
  spec.sensors = {{-6.0, -6.0, 4.2, 0.0, 0.0, 0.0}, {6.0, 6.0, 4.2, 0.0, 0.0, kPi}};
  return spec;
}

std::vector<Box3> boxes_in_frame(const std::vector<Box3>& boxes, const RigidTransform& reference) {
  const RigidTransform to_ref = invert(reference);
  std::vector<Box3> out;
  out.reserve(boxes.size());
  for (const Box3& b : boxes) {
    Eigen::Vector3d lo = Eigen::Vector3d::Constant(std::numeric_limits<double>::infinity());
    Eigen::Vector3d hi = -lo;
    for (int c = 0; c < 8; ++c) {
      const Eigen::Vector3d corner(c & 1 ? b.max_corner().x() : b.min_corner().x(),
                                   c & 2 ? b.max_corner().y() : b.min_corner().y(),
                                   c & 4 ? b.max_corner().z() : b.min_corner().z());
      const Eigen::Vector3d p = apply_point(to_ref, corner);
      lo = lo.cwiseMin(p);
      hi = hi.cwiseMax(p);
    }
    Box3 r;
    r.center = (lo + hi) / 2.0;
    r.size = hi - lo;
    r.class_id = b.class_id;
    out.push_back(r);
  }
  return out;
}

nlohmann::json box_to_json(const Box3& b) {
  return {{"center", {b.center.x(), b.center.y(), b.center.z()}},
          {"size", {b.size.x(), b.size.y(), b.size.z()}},
          {"class", b.class_id}};
}

Box3 box_from_json(const nlohmann::json& j) {
  Box3 b;
  const auto c = j.at("center").get<std::vector<double>>();
  const auto s = j.at("size").get<std::vector<double>>();
  if (c.size() != 3 || s.size() != 3) throw std::invalid_argument("box needs 3-vectors");
  b.center = {c[0], c[1], c[2]};
  b.size = {s[0], s[1], s[2]};
  if ((b.size.array() <= 0.0).any()) throw std::invalid_argument("box sizes must be > 0");
  b.class_id = j.value("class", 0);
  return b;
}

nlohmann::json truth_to_json(const GroundTruth& truth) {
  nlohmann::json boxes = nlohmann::json::array();
  for (const Box3& b : truth.boxes) boxes.push_back(box_to_json(b));
  nlohmann::json extr = nlohmann::json::array();
  for (const RigidTransform& t : truth.extrinsics) extr.push_back(t.row_major());
  return {{"boxes", boxes}, {"extrinsics", extr}};
}

GroundTruth truth_from_json(const nlohmann::json& j) {
  GroundTruth truth;
  for (const auto& b : j.at("boxes")) truth.boxes.push_back(box_from_json(b));
  for (const auto& e : j.value("extrinsics", nlohmann::json::array())) {
    truth.extrinsics.push_back(RigidTransform::from_row_major(e.get<std::array<double, 16>>()));
  }
  return truth;
}

}  // namespace scmii
