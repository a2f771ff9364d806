#pragma once

#include <Eigen/Core>
#include <array>

namespace scmii {

/// Sensor pose as translation (meters) and intrinsic Z-Y-X Euler angles
/// (radians). The rotation is R = Rz(yaw) * Ry(pitch) * Rx(roll).
struct Pose6DoF {
  double tx = 0.0;
  double ty = 0.0;
  double tz = 0.0;
  double roll = 0.0;
  double pitch = 0.0;
  double yaw = 0.0;

  Eigen::Matrix<double, 6, 1> as_vector() const;
  static Pose6DoF from_vector(const Eigen::Matrix<double, 6, 1>& v);

  bool operator==(const Pose6DoF&) const = default;
};

/// 4x4 homogeneous rigid-body transform. Always holds an orthonormal
/// rotation with det = +1 and bottom row [0 0 0 1].
class RigidTransform {
 public:
  RigidTransform() : m_(Eigen::Matrix4d::Identity()) {}

  static RigidTransform identity() { return RigidTransform(); }
  static RigidTransform translation(const Eigen::Vector3d& t);

  // Validates orthonormality within `tol`, then re-projects the rotation.
  // Throws std::invalid_argument on a non-rigid matrix.
  static RigidTransform from_matrix(const Eigen::Matrix4d& m, double tol = 1e-6);
  static RigidTransform from_row_major(const std::array<double, 16>& v, double tol = 1e-6);

  // Builds from R and t; R is Gram-Schmidt re-orthonormalized.
  static RigidTransform from_rotation_translation(const Eigen::Matrix3d& r,
                                                  const Eigen::Vector3d& t);

  const Eigen::Matrix4d& matrix() const { return m_; }
  Eigen::Matrix3d rotation() const { return m_.topLeftCorner<3, 3>(); }
  Eigen::Vector3d translation() const { return m_.topRightCorner<3, 1>(); }
  std::array<double, 16> row_major() const;

  bool is_valid(double tol = 1e-9) const;

 private:
  Eigen::Matrix4d m_;
};

RigidTransform from_pose(const Pose6DoF& p);
Pose6DoF to_pose(const RigidTransform& t);

/// a * b: applies b first.
RigidTransform compose(const RigidTransform& a, const RigidTransform& b);

/// Closed form [R^T, -R^T t].
RigidTransform invert(const RigidTransform& t);

Eigen::Vector3d apply_point(const RigidTransform& t, const Eigen::Vector3d& p);

/// Gram-Schmidt re-projection of a near-rotation onto SO(3).
Eigen::Matrix3d orthonormalize(const Eigen::Matrix3d& r);

/// Angle of the relative rotation between two transforms, radians.
double rotation_angle_between(const RigidTransform& a, const RigidTransform& b);

/// Euclidean distance between the translations of two transforms, meters.
double translation_distance(const RigidTransform& a, const RigidTransform& b);

}  // namespace scmii
