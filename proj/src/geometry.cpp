#include "scmii/geometry.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace scmii {

Eigen::Matrix<double, 6, 1> Pose6DoF::as_vector() const {
  Eigen::Matrix<double, 6, 1> v;
  v << tx, ty, tz, roll, pitch, yaw;
  return v;
}

Pose6DoF Pose6DoF::from_vector(const Eigen::Matrix<double, 6, 1>& v) {
  return Pose6DoF{v[0], v[1], v[2], v[3], v[4], v[5]};
}

RigidTransform RigidTransform::translation(const Eigen::Vector3d& t) {
  RigidTransform out;
  out.m_.topRightCorner<3, 1>() = t;
  return out;
}

RigidTransform RigidTransform::from_rotation_translation(const Eigen::Matrix3d& r,
                                                         const Eigen::Vector3d& t) {
  RigidTransform out;
  out.m_.topLeftCorner<3, 3>() = orthonormalize(r);
  out.m_.topRightCorner<3, 1>() = t;
  return out;
}

RigidTransform RigidTransform::from_matrix(const Eigen::Matrix4d& m, double tol) {
  if (!m.allFinite()) {
    throw std::invalid_argument("transform has non-finite entries");
  }
  const Eigen::RowVector4d bottom = m.row(3);
  if (bottom != Eigen::RowVector4d(0, 0, 0, 1)) {
    throw std::invalid_argument("transform bottom row must be [0 0 0 1]");
  }
  const Eigen::Matrix3d r = m.topLeftCorner<3, 3>();
  const double ortho_err = (r.transpose() * r - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff();
  if (ortho_err > tol || std::abs(r.determinant() - 1.0) > tol) {
    throw std::invalid_argument("transform rotation is not orthonormal");
  }
  return from_rotation_translation(r, m.topRightCorner<3, 1>());
}

RigidTransform RigidTransform::from_row_major(const std::array<double, 16>& v, double tol) {
  Eigen::Matrix4d m;
  for (int r = 0; r < 4; ++r) {
    for (int c = 0; c < 4; ++c) m(r, c) = v[r * 4 + c];
  }
  return from_matrix(m, tol);
}

std::array<double, 16> RigidTransform::row_major() const {
  std::array<double, 16> v{};
  for (int r = 0; r < 4; ++r) {
    for (int c = 0; c < 4; ++c) v[r * 4 + c] = m_(r, c);
  }
  return v;
}

bool RigidTransform::is_valid(double tol) const {
  const Eigen::Matrix3d r = rotation();
  return m_.allFinite() &&
         (r.transpose() * r - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff() <= tol &&
         std::abs(r.determinant() - 1.0) <= tol && m_.row(3) == Eigen::RowVector4d(0, 0, 0, 1);
}

RigidTransform from_pose(const Pose6DoF& p) {
  const double cr = std::cos(p.roll), sr = std::sin(p.roll);
  const double cp = std::cos(p.pitch), sp = std::sin(p.pitch);
  const double cy = std::cos(p.yaw), sy = std::sin(p.yaw);
  Eigen::Matrix4d m = Eigen::Matrix4d::Identity();
  // Rz(yaw) * Ry(pitch) * Rx(roll), expanded.
  m(0, 0) = cy * cp;
  m(0, 1) = cy * sp * sr - sy * cr;
  m(0, 2) = cy * sp * cr + sy * sr;
  m(1, 0) = sy * cp;
  m(1, 1) = sy * sp * sr + cy * cr;
  m(1, 2) = sy * sp * cr - cy * sr;
  m(2, 0) = -sp;
  m(2, 1) = cp * sr;
  m(2, 2) = cp * cr;
  m(0, 3) = p.tx;
  m(1, 3) = p.ty;
  m(2, 3) = p.tz;
  return RigidTransform::from_matrix(m, 1e-9);
}

Pose6DoF to_pose(const RigidTransform& t) {
  const Eigen::Matrix4d& m = t.matrix();
  Pose6DoF p;
  p.tx = m(0, 3);
  p.ty = m(1, 3);
  p.tz = m(2, 3);
  p.pitch = std::atan2(-m(2, 0), std::hypot(m(2, 1), m(2, 2)));
  p.roll = std::atan2(m(2, 1), m(2, 2));
  p.yaw = std::atan2(m(1, 0), m(0, 0));
  return p;
}

RigidTransform compose(const RigidTransform& a, const RigidTransform& b) {
  const Eigen::Matrix3d r = a.rotation() * b.rotation();
  const Eigen::Vector3d t = a.rotation() * b.translation() + a.translation();
  return RigidTransform::from_rotation_translation(r, t);
}

RigidTransform invert(const RigidTransform& t) {
  const Eigen::Matrix3d rt = t.rotation().transpose();
  return RigidTransform::from_rotation_translation(rt, -rt * t.translation());
}

Eigen::Vector3d apply_point(const RigidTransform& t, const Eigen::Vector3d& p) {
  const Eigen::Matrix4d& m = t.matrix();
  return Eigen::Vector3d(m(0, 0) * p.x() + m(0, 1) * p.y() + m(0, 2) * p.z() + m(0, 3),
                         m(1, 0) * p.x() + m(1, 1) * p.y() + m(1, 2) * p.z() + m(1, 3),
                         m(2, 0) * p.x() + m(2, 1) * p.y() + m(2, 2) * p.z() + m(2, 3));
}

Eigen::Matrix3d orthonormalize(const Eigen::Matrix3d& r) {
  Eigen::Vector3d c0 = r.col(0).normalized();
  Eigen::Vector3d c1 = r.col(1) - c0.dot(r.col(1)) * c0;
  c1.normalize();
  // Third column from the cross product keeps det = +1.
  const Eigen::Vector3d c2 = c0.cross(c1);
  Eigen::Matrix3d out;
  out << c0, c1, c2;
  return out;
}

double rotation_angle_between(const RigidTransform& a, const RigidTransform& b) {
  const Eigen::Matrix3d rel = a.rotation().transpose() * b.rotation();
  const double c = std::clamp((rel.trace() - 1.0) / 2.0, -1.0, 1.0);
  return std::acos(c);
}

double translation_distance(const RigidTransform& a, const RigidTransform& b) {
  return (a.translation() - b.translation()).norm();
}

}  // namespace scmii
