#include "scmii/ndt.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <limits>
#include <map>

namespace scmii {
namespace {

using Vec6 = Eigen::Matrix<double, 6, 1>;
using Mat6 = Eigen::Matrix<double, 6, 6>;

// Damping increases tried within one iteration before giving up.
constexpr int kMaxDampingRetries = 12;

struct CellAccumulator {
  std::vector<Eigen::Vector3d> points;
};

// Rotation factors and their first/second derivatives for R = Rz Ry Rx.
struct RotationJet {
  Eigen::Matrix3d rotation;
  std::array<Eigen::Matrix3d, 3> first;   // d/droll, d/dpitch, d/dyaw
  std::array<Eigen::Matrix3d, 6> second;  // rr, rp, ry, pp, py, yy
};

RotationJet rotation_jet(const Pose6DoF& pose) {
  const double cr = std::cos(pose.roll), sr = std::sin(pose.roll);
  const double cp = std::cos(pose.pitch), sp = std::sin(pose.pitch);
  const double cy = std::cos(pose.yaw), sy = std::sin(pose.yaw);
  Eigen::Matrix3d rx, rx1, rx2, ry, ry1, ry2, rz, rz1, rz2;
  rx << 1, 0, 0, 0, cr, -sr, 0, sr, cr;
  rx1 << 0, 0, 0, 0, -sr, -cr, 0, cr, -sr;
  rx2 << 0, 0, 0, 0, -cr, sr, 0, -sr, -cr;
  ry << cp, 0, sp, 0, 1, 0, -sp, 0, cp;
  ry1 << -sp, 0, cp, 0, 0, 0, -cp, 0, -sp;
  ry2 << -cp, 0, -sp, 0, 0, 0, sp, 0, -cp;
  rz << cy, -sy, 0, sy, cy, 0, 0, 0, 1;
  rz1 << -sy, -cy, 0, cy, -sy, 0, 0, 0, 0;
  rz2 << -cy, sy, 0, -sy, -cy, 0, 0, 0, 0;

  RotationJet jet;
  jet.rotation = rz * ry * rx;
  jet.first = {rz * ry * rx1, rz * ry1 * rx, rz1 * ry * rx};
  jet.second = {rz * ry * rx2, rz * ry1 * rx1, rz1 * ry * rx1,
                rz * ry2 * rx, rz1 * ry1 * rx, rz2 * ry * rx};
  return jet;
}

// Index into RotationJet::second for angle pair (a, b), a <= b.
constexpr int second_index(int a, int b) {
  constexpr int table[3][3] = {{0, 1, 2}, {1, 3, 4}, {2, 4, 5}};
  return table[a][b];
}

Eigen::Vector3d transform_with(const Eigen::Matrix3d& r, const Pose6DoF& pose,
                               const Eigen::Vector3d& x) {
  return r * x + Eigen::Vector3d(pose.tx, pose.ty, pose.tz);
}

Vec6 clamp_step(Vec6 step, const AlignOptions& opts) {
  double scale = 1.0;
  for (int i = 0; i < 6; ++i) {
    const double limit = i < 3 ? opts.max_translation_step : opts.max_rotation_step;
    if (std::abs(step[i]) > limit) scale = std::min(scale, limit / std::abs(step[i]));
  }
  return step * scale;
}

}  // namespace

std::size_t CellIndexHash::operator()(const CellIndex& c) const noexcept {
  std::uint64_t h = 1469598103934665603ull;
  for (std::int64_t v : c) {
    h ^= static_cast<std::uint64_t>(v) + 0x9e3779b97f4a7c15ull + (h << 6) + (h >> 2);
  }
  return static_cast<std::size_t>(h);
}

CellIndex NdtMap::cell_index(const Eigen::Vector3d& p) const {
  CellIndex idx{};
  for (int a = 0; a < 3; ++a) {
    idx[a] = static_cast<std::int64_t>(std::floor((p[a] - origin_[a]) / cell_size_));
  }
  return idx;
}

const NdtCell* NdtMap::find(const Eigen::Vector3d& p) const {
  if (!p.allFinite()) return nullptr;
  const auto it = cells_.find(cell_index(p));
  return it == cells_.end() ? nullptr : &it->second;
}

NdtMap build_ndt_map(const PointCloud& reference, double cell_size, std::size_t min_points,
                     const Eigen::Vector3d& origin) {
  if (!(cell_size > 0.0)) throw std::invalid_argument("NDT cell size must be > 0");
  if (reference.empty()) throw std::invalid_argument("NDT reference cloud is empty");
  NdtMap map(cell_size, origin);

  // Ordered by index so cell statistics do not depend on hash iteration.
  std::map<CellIndex, CellAccumulator> buckets;
  for (const Eigen::Vector3d& p : reference.points) {
    buckets[map.cell_index(p)].points.push_back(p);
  }
  const std::size_t threshold = std::max<std::size_t>(min_points, 2);
  for (auto& [idx, acc] : buckets) {
    const std::size_t n = acc.points.size();
    if (n < threshold) continue;
    NdtCell cell;
    cell.point_count = n;
    for (const Eigen::Vector3d& p : acc.points) cell.mean += p;
    cell.mean /= static_cast<double>(n);
    Eigen::Matrix3d cov = Eigen::Matrix3d::Zero();
    for (const Eigen::Vector3d& p : acc.points) {
      const Eigen::Vector3d d = p - cell.mean;
      cov += d * d.transpose();
    }
    cov /= static_cast<double>(n - 1);

    Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d> eig(cov);
    Eigen::Vector3d values = eig.eigenvalues();
    const double floor =
        std::max(kCovarianceRelativeFloor * values.maxCoeff(), kCovarianceAbsoluteFloor);
    values = values.cwiseMax(floor);
    const Eigen::Matrix3d& vecs = eig.eigenvectors();
    cell.covariance = vecs * values.asDiagonal() * vecs.transpose();
    cell.covariance = 0.5 * (cell.covariance + cell.covariance.transpose());
    cell.inverse_covariance = vecs * values.cwiseInverse().asDiagonal() * vecs.transpose();
    cell.inverse_covariance = 0.5 * (cell.inverse_covariance + cell.inverse_covariance.transpose());
    map.cells_.emplace(idx, cell);
  }
  return map;
}

double ndt_score(const NdtMap& map, const PointCloud& scan, const Pose6DoF& pose) {
  const RigidTransform t = from_pose(pose);
  double score = 0.0;
  for (const Eigen::Vector3d& x : scan.points) {
    const Eigen::Vector3d y = apply_point(t, x);
    const NdtCell* cell = map.find(y);
    if (cell == nullptr) continue;
    const Eigen::Vector3d d = y - cell->mean;
    score += std::exp(-0.5 * d.dot(cell->inverse_covariance * d));
  }
  return score;
}

NdtDerivatives ndt_derivatives(const NdtMap& map, const PointCloud& scan, const Pose6DoF& pose) {
  const RotationJet jet = rotation_jet(pose);
  NdtDerivatives out;
  Eigen::Matrix<double, 3, 6> jac = Eigen::Matrix<double, 3, 6>::Zero();
  jac.leftCols<3>().setIdentity();
  for (const Eigen::Vector3d& x : scan.points) {
    const Eigen::Vector3d y = transform_with(jet.rotation, pose, x);
    const NdtCell* cell = map.find(y);
    if (cell == nullptr) continue;
    const Eigen::Matrix3d& inv = cell->inverse_covariance;
    const Eigen::Vector3d q = y - cell->mean;
    const Eigen::Vector3d aq = inv * q;
    const double s = std::exp(-0.5 * q.dot(aq));
    for (int k = 0; k < 3; ++k) jac.col(3 + k) = jet.first[k] * x;

    // d(score)/dp_i = -s * aq . J_i
    const Vec6 aq_j = jac.transpose() * aq;
    const Mat6 jaj = jac.transpose() * inv * jac;
    out.score += s;
    out.gradient -= s * aq_j;
    Mat6 h = aq_j * aq_j.transpose() - jaj;
    for (int a = 0; a < 3; ++a) {
      for (int b = a; b < 3; ++b) {
        const double curv = aq.dot(jet.second[second_index(a, b)] * x);
        h(3 + a, 3 + b) -= curv;
        if (a != b) h(3 + b, 3 + a) -= curv;
      }
    }
    out.hessian += s * h;
    ++out.contributing_points;
  }
  return out;
}

void AlignOptions::validate() const {
  if (max_iterations <= 0 || !(step_threshold > 0.0) || !(damping_initial > 0.0) ||
      !(damping_up > 0.0) || !(damping_down > 0.0) || !(max_translation_step > 0.0) ||
      !(max_rotation_step > 0.0)) {
    throw std::invalid_argument("NDT align options must all be positive");
  }
}

AlignResult ndt_align(const NdtMap& map, const PointCloud& scan, const Pose6DoF& initial,
                      const AlignOptions& opts) {
  opts.validate();
  if (map.empty()) throw NdtError("NDT map is empty");
  if (scan.empty()) throw NdtError("scan cloud is empty");

  AlignResult result;
  Vec6 params = initial.as_vector();
  NdtDerivatives current = ndt_derivatives(map, scan, initial);
  if (current.contributing_points == 0 || !std::isfinite(current.score) ||
      !current.gradient.allFinite() || !current.hessian.allFinite()) {
    throw NdtError("no overlap; provide a better initial guess");
  }

  double damping = opts.damping_initial;
  for (int it = 1; it <= opts.max_iterations; ++it) {
    result.stats.iterations = it;
    // Maximizing: -H is positive definite near an optimum. Marquardt scaling
    // keeps the damping meaningful across translation/rotation units.
    const Mat6 neg_h = -current.hessian;
    bool accepted = false;
    bool small = false;
    for (int attempt = 0; attempt < kMaxDampingRetries && !accepted; ++attempt) {
      Mat6 system = neg_h;
      for (int i = 0; i < 6; ++i) {
        system(i, i) += damping * std::max(std::abs(neg_h(i, i)), 1e-9);
      }
      const Eigen::LLT<Mat6> llt(system);
      const Vec6 step = llt.info() == Eigen::Success
                            ? clamp_step(llt.solve(current.gradient), opts)
                            : Vec6::Constant(std::numeric_limits<double>::quiet_NaN());
      if (!step.allFinite()) {
        damping *= opts.damping_up;
        continue;
      }
      small = step.cwiseAbs().maxCoeff() < opts.step_threshold;
      const Vec6 candidate = params + step;
      const Pose6DoF candidate_pose = Pose6DoF::from_vector(candidate);
      const double candidate_score = ndt_score(map, scan, candidate_pose);
      if (candidate_score >= current.score) {
        params = candidate;
        current = ndt_derivatives(map, scan, candidate_pose);
        damping = std::max(damping * opts.damping_down, 1e-12);
        accepted = true;
      } else if (small) {
        break;
      } else {
        damping *= opts.damping_up;
      }
    }
    // A sub-threshold step, accepted or not, means no meaningful ascent is left.
    if (small || !accepted) {
      result.stats.converged = small;
      break;
    }
  }
  // Round-trip through the rotation matrix keeps angles in canonical range.
  result.pose = to_pose(from_pose(Pose6DoF::from_vector(params)));
  result.stats.final_score = current.score;
  return result;
}

std::vector<RigidTransform> calibrate(const PointCloud& reference,
                                      const std::vector<PointCloud>& other_clouds,
                                      const std::vector<Pose6DoF>& initial_guesses,
                                      const CalibrationOptions& opts) {
  if (initial_guesses.size() != other_clouds.size()) {
    throw std::invalid_argument("calibrate needs one initial guess per non-reference cloud");
  }
  std::vector<RigidTransform> out;
  if (other_clouds.empty()) return out;
  const NdtMap map = build_ndt_map(reference, opts.cell_size, opts.min_points);
  for (std::size_t i = 0; i < other_clouds.size(); ++i) {
    try {
      const AlignResult r = ndt_align(map, other_clouds[i], initial_guesses[i], opts.align);
      out.push_back(from_pose(r.pose));
    } catch (const NdtError& e) {
      throw CalibrationError(i + 1, e.what());
    }
  }
  return out;
}

}  // namespace scmii
