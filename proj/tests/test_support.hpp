#pragma once

#include <Eigen/Core>
#include <cmath>
#include <cstdint>
#include <random>
#include <set>
#include <vector>

#include "scmii/geometry.hpp"
#include "scmii/pointcloud.hpp"
#include "scmii/sparse.hpp"

namespace scmii::testing {

inline constexpr double kPi = 3.14159265358979323846;

class Gen {
 public:
  explicit Gen(std::uint64_t seed) : rng_(seed) {}

  double uniform(double lo, double hi) {
    return std::uniform_real_distribution<double>(lo, hi)(rng_);
  }
  int integer(int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng_); }
  bool coin(double p = 0.5) { return std::bernoulli_distribution(p)(rng_); }
  std::mt19937_64& rng() { return rng_; }

  Eigen::Vector3d vec(double lo, double hi) {
    return {uniform(lo, hi), uniform(lo, hi), uniform(lo, hi)};
  }

  Pose6DoF pose(double max_t = 10.0, double max_angle = kPi) {
    return {uniform(-max_t, max_t),
            uniform(-max_t, max_t),
            uniform(-max_t, max_t),
            uniform(-max_angle, max_angle),
            uniform(-max_angle, max_angle) * 0.45,
            uniform(-max_angle, max_angle)};
  }
  RigidTransform transform(double max_t = 10.0, double max_angle = kPi) {
    return from_pose(pose(max_t, max_angle));
  }

  PointCloud cloud(std::size_t n, double lo, double hi) {
    PointCloud c;
    for (std::size_t i = 0; i < n; ++i) c.points.push_back(vec(lo, hi));
    return c;
  }

  GridSpec grid(int max_dim, int stride = 1) {
    GridSpec g;
    g.origin = vec(-2.0, 2.0);
    g.voxel_size = Eigen::Vector3d(uniform(0.1, 0.5), uniform(0.1, 0.5), uniform(0.1, 0.5));
    g.dims = {integer(1, max_dim), integer(1, max_dim), integer(1, max_dim)};
    g.stride = stride;
    return g;
  }

  /// Like grid() but with cubic voxels, as on every system grid. Rounding
  /// drift is only bounded by one voxel when voxels are isotropic.
  GridSpec cubic_grid(int max_dim) {
    GridSpec g = grid(max_dim);
    g.voxel_size = Eigen::Vector3d::Constant(uniform(0.1, 0.5));
    return g;
  }

  /// Random support with `density` in (0, 1]; features in [-2, 2].
  SparseFeatureTensor tensor(const GridSpec& g, int channels, double density) {
    TensorBuilder b(g, channels);
    for (std::int32_t z = 0; z < g.dims[2]; ++z) {
      for (std::int32_t y = 0; y < g.dims[1]; ++y) {
        for (std::int32_t x = 0; x < g.dims[0]; ++x) {
          if (!coin(density)) continue;
          std::span<float> f = b.slot({x, y, z});
          for (float& v : f) v = static_cast<float>(uniform(-2.0, 2.0));
        }
      }
    }
    return std::move(b).build();
  }

  /// Up to `count` random entries, for grids too large to sweep.
  SparseFeatureTensor sparse_tensor(const GridSpec& g, int channels, int count) {
    TensorBuilder b(g, channels);
    for (int i = 0; i < count; ++i) {
      const VoxelIndex idx{integer(0, g.dims[0] - 1), integer(0, g.dims[1] - 1),
                           integer(0, g.dims[2] - 1)};
      std::span<float> f = b.slot(idx);
      for (float& v : f) v = static_cast<float>(uniform(-2.0, 2.0));
    }
    return std::move(b).build();
  }

  ConvKernel kernel(const LayerSpec& spec) {
    ConvKernel k(spec);
    for (float& w : k.weights) w = static_cast<float>(uniform(-1.0, 1.0));
    for (float& b : k.bias) b = static_cast<float>(uniform(-0.5, 0.5));
    return k;
  }

 private:
  std::mt19937_64 rng_;
};

inline std::set<std::uint64_t> support(const SparseFeatureTensor& t) {
  return {t.keys().begin(), t.keys().end()};
}

inline double max_abs_diff(const Eigen::Matrix4d& a, const Eigen::Matrix4d& b) {
  return (a - b).cwiseAbs().maxCoeff();
}

}  // namespace scmii::testing
