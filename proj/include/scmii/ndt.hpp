#pragma once

#include <Eigen/Core>
#include <array>
#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "scmii/geometry.hpp"
#include "scmii/pointcloud.hpp"

namespace scmii {

/// Gaussian model of the reference points falling in one grid cell.
struct NdtCell {
  Eigen::Vector3d mean = Eigen::Vector3d::Zero();
  Eigen::Matrix3d covariance = Eigen::Matrix3d::Identity();
  Eigen::Matrix3d inverse_covariance = Eigen::Matrix3d::Identity();
  std::size_t point_count = 0;
};

using CellIndex = std::array<std::int64_t, 3>;

struct CellIndexHash {
  std::size_t operator()(const CellIndex& c) const noexcept;
};

class NdtMap {
 public:
  NdtMap(double cell_size, const Eigen::Vector3d& origin)
      : cell_size_(cell_size), origin_(origin) {}

  double cell_size() const { return cell_size_; }
  const Eigen::Vector3d& origin() const { return origin_; }
  std::size_t size() const { return cells_.size(); }
  bool empty() const { return cells_.empty(); }

  CellIndex cell_index(const Eigen::Vector3d& p) const;
  // nullptr when the cell holding `p` is empty.
  const NdtCell* find(const Eigen::Vector3d& p) const;
  const std::unordered_map<CellIndex, NdtCell, CellIndexHash>& cells() const { return cells_; }

 private:
  friend NdtMap build_ndt_map(const PointCloud&, double, std::size_t, const Eigen::Vector3d&);

  double cell_size_;
  Eigen::Vector3d origin_;
  std::unordered_map<CellIndex, NdtCell, CellIndexHash> cells_;
};

inline constexpr double kCovarianceRelativeFloor = 1e-3;
inline constexpr double kCovarianceAbsoluteFloor = 1e-6;  // m^2

/// Builds per-cell Gaussians; cells with fewer than `min_points` points are
/// dropped. Covariance eigenvalues are clamped to
/// max(1e-3 * lambda_max, 1e-6). Throws std::invalid_argument on an empty
/// cloud or non-positive cell size.
NdtMap build_ndt_map(const PointCloud& reference, double cell_size, std::size_t min_points = 5,
                     const Eigen::Vector3d& origin = Eigen::Vector3d::Zero());

/// Sum over scan points of exp(-0.5 d^T inv(Sigma) d), with d measured
/// against the cell containing the transformed point. Empty cells give 0.
double ndt_score(const NdtMap& map, const PointCloud& scan, const Pose6DoF& pose);

struct NdtDerivatives {
  double score = 0.0;
  Eigen::Matrix<double, 6, 1> gradient = Eigen::Matrix<double, 6, 1>::Zero();
  Eigen::Matrix<double, 6, 6> hessian = Eigen::Matrix<double, 6, 6>::Zero();
  std::size_t contributing_points = 0;
};

/// Score with analytic gradient and Hessian with respect to
/// (tx, ty, tz, roll, pitch, yaw).
NdtDerivatives ndt_derivatives(const NdtMap& map, const PointCloud& scan, const Pose6DoF& pose);

struct AlignOptions {
  int max_iterations = 50;
  double step_threshold = 1e-4;
  double damping_initial = 1e-3;
  double damping_up = 10.0;
  double damping_down = 0.1;
  double max_translation_step = 0.5;  // m
  double max_rotation_step = 0.2;     // rad

  void validate() const;
};

struct AlignStats {
  int iterations = 0;
  double final_score = 0.0;
  bool converged = false;
};

struct AlignResult {
  Pose6DoF pose;
  AlignStats stats;
};

class NdtError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Levenberg-damped Newton ascent on ndt_score. Throws NdtError when no
/// scan point overlaps the map at the initial pose.
AlignResult ndt_align(const NdtMap& map, const PointCloud& scan, const Pose6DoF& initial,
                      const AlignOptions& opts = {});

class CalibrationError : public NdtError {
 public:
  CalibrationError(std::size_t sensor_index, const std::string& what)
      : NdtError("sensor " + std::to_string(sensor_index) + ": " + what),
        sensor_index_(sensor_index) {}
  std::size_t sensor_index() const { return sensor_index_; }

 private:
  std::size_t sensor_index_;
};

struct CalibrationOptions {
  double cell_size = 2.0;
  std::size_t min_points = 5;
  AlignOptions align;
};

/// Per non-reference sensor, the transform from its local frame to the
/// reference sensor's frame. `other_clouds[i]` is reported as sensor i + 1.
std::vector<RigidTransform> calibrate(const PointCloud& reference,
                                      const std::vector<PointCloud>& other_clouds,
                                      const std::vector<Pose6DoF>& initial_guesses,
                                      const CalibrationOptions& opts = {});

}  // namespace scmii
