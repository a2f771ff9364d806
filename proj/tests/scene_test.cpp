#include "scmii/scene.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <optional>

#include "test_support.hpp"

namespace scmii {
namespace {

using testing::Gen;
using testing::kPi;

// Nearest hit by intersecting each of the six face planes and checking the
// hit lies inside that face's rectangle.
std::optional<double> face_hit(const Eigen::Vector3d& o, const Eigen::Vector3d& d, const Box3& b) {
  std::optional<double> best;
  const Eigen::Vector3d lo = b.min_corner(), hi = b.max_corner();
  for (int a = 0; a < 3; ++a) {
    if (d[a] == 0.0) continue;
    for (double plane : {lo[a], hi[a]}) {
      const double t = (plane - o[a]) / d[a];
      if (t <= 1e-9) continue;
      const Eigen::Vector3d q = o + t * d;
      bool inside = true;
      for (int k = 0; k < 3; ++k) {
        if (k != a && (q[k] < lo[k] - 1e-12 || q[k] > hi[k] + 1e-12)) inside = false;
      }
      if (inside && (!best || t < *best)) best = t;
    }
  }
  return best;
}

SceneSpec single_box_spec(double noise) {
  SceneSpec s;
  s.sensors = {Pose6DoF{}};
  s.ground = false;
  s.noise_sigma = noise;
  s.fixed_boxes = std::vector<Box3>{Box3{Eigen::Vector3d(5, 0, 0), Eigen::Vector3d::Ones(), 0}};
  s.elevation_span = {-10.0 * kPi / 180.0, 10.0 * kPi / 180.0};
  s.azimuth_span = {-0.3, 0.3};
  return s;
}

TEST(RayBoxTest, MatchesFaceOracle) {
  Gen gen(31);
  int hits = 0;
  for (int i = 0; i < 5000; ++i) {
    const Box3 b{gen.vec(-5, 5),
                 Eigen::Vector3d(gen.uniform(0.2, 3), gen.uniform(0.2, 3), gen.uniform(0.2, 3)), 0};
    const Eigen::Vector3d o = gen.vec(-10, 10);
    if ((o - b.center).cwiseAbs().maxCoeff() < 2.0) continue;
    const Eigen::Vector3d d = (b.center + gen.vec(-2, 2) - o).normalized();
    const auto got = ray_box_intersection(o, d, b);
    const auto want = face_hit(o, d, b);
    ASSERT_EQ(got.has_value(), want.has_value());
    if (got) {
      ++hits;
      EXPECT_NEAR(*got, *want, 1e-9);
    }
  }
  EXPECT_GT(hits, 1000);
}

TEST(RayBoxTest, MissesAndAxisParallelRays) {
  const Box3 b{Eigen::Vector3d(5, 0, 0), Eigen::Vector3d::Ones(), 0};
  EXPECT_FALSE(ray_box_intersection(Eigen::Vector3d::Zero(), -Eigen::Vector3d::UnitX(), b));
  EXPECT_FALSE(ray_box_intersection(Eigen::Vector3d::Zero(), Eigen::Vector3d::UnitY(), b));
  const auto t = ray_box_intersection(Eigen::Vector3d::Zero(), Eigen::Vector3d::UnitX(), b);
  ASSERT_TRUE(t);
  EXPECT_DOUBLE_EQ(*t, 4.5);
}

TEST(GenSceneTest, NoObjectsNoGroundGivesEmptyClouds) {
  SceneSpec s;
  s.sensors = {Pose6DoF{}, Pose6DoF{1, 1, 4, 0, 0, 0.2}};
  s.ground = false;
  s.fixed_boxes = std::vector<Box3>{};
  const Scene scene = gen_scene(s);
  ASSERT_EQ(scene.clouds.size(), 2u);
  EXPECT_TRUE(scene.clouds[0].empty());
  EXPECT_TRUE(scene.clouds[1].empty());
}

TEST(GenSceneTest, NoiselessPointsLieOnAnalyticIntersection) {
  const Scene scene = gen_scene(single_box_spec(0.0));
  const Box3& box = scene.truth.boxes.at(0);
  ASSERT_GT(scene.clouds[0].size(), 10u);
  for (const Eigen::Vector3d& p : scene.clouds[0].points) {
    const auto t = face_hit(Eigen::Vector3d::Zero(), p.normalized(), box);
    ASSERT_TRUE(t);
    EXPECT_LE(std::abs(p.norm() - *t), 1e-9);
  }
}

TEST(GenSceneTest, RangeNoiseMatchesSigma) {
  const double sigma = 0.02;
  const Scene scene = gen_scene(single_box_spec(sigma));
  const Box3& box = scene.truth.boxes.at(0);
  // Range noise is Gaussian, so 3 sigma bounds all but ~0.3% of returns.
  std::size_t outside = 0;
  double sum = 0.0, sum_sq = 0.0;
  const std::size_t n = scene.clouds[0].size();
  ASSERT_GT(n, 500u);
  for (const Eigen::Vector3d& p : scene.clouds[0].points) {
    const auto t = face_hit(Eigen::Vector3d::Zero(), p.normalized(), box);
    ASSERT_TRUE(t);
    const double r = p.norm() - *t;
    EXPECT_LE(std::abs(r), 6.0 * sigma);
    outside += std::abs(r) > 3.0 * sigma ? 1 : 0;
    sum += r;
    sum_sq += r * r;
  }
  EXPECT_LE(static_cast<double>(outside), 0.01 * static_cast<double>(n));
  EXPECT_NEAR(sum / static_cast<double>(n), 0.0, 4.0 * sigma / std::sqrt(static_cast<double>(n)));
  EXPECT_NEAR(std::sqrt(sum_sq / static_cast<double>(n)), sigma, 0.1 * sigma);
}

TEST(GenSceneTest, NearestHitAndFrameConsistency) {
  SceneSpec s = default_scene_spec(5, 2);
  s.noise_sigma = 0.0;
  const Scene scene = gen_scene(s);
  std::vector<Box3> surfaces = scene.truth.boxes;
  surfaces.insert(surfaces.end(), s.structures.begin(), s.structures.end());
  for (std::size_t d = 0; d < scene.clouds.size(); ++d) {
    const RigidTransform& ext = scene.truth.extrinsics[d];
    const Eigen::Vector3d o = ext.translation();
    const PointCloud& local = scene.clouds[d];
    ASSERT_GT(local.size(), 1000u);
    for (std::size_t i = 0; i < local.size(); i += 7) {
      const Eigen::Vector3d w = apply_point(ext, local.points[i]);
      const Eigen::Vector3d dir = (w - o).normalized();
      const double range = (w - o).norm();
      double nearest = std::numeric_limits<double>::infinity();
      for (const Box3& b : surfaces) {
        if (auto t = face_hit(o, dir, b)) nearest = std::min(nearest, *t);
      }
      if (dir.z() < 0.0) nearest = std::min(nearest, -o.z() / dir.z());
      // Nothing strictly in front of the return, and the return is a surface.
      EXPECT_NEAR(range, nearest, 1e-6) << "device " << d << " point " << i;
    }
  }
}

TEST(GenSceneTest, SameSeedIsBitIdentical) {
  const Scene a = gen_scene(default_scene_spec(9, 3));
  const Scene b = gen_scene(default_scene_spec(9, 3));
  ASSERT_EQ(a.clouds.size(), b.clouds.size());
  for (std::size_t i = 0; i < a.clouds.size(); ++i)
    EXPECT_EQ(a.clouds[i].points, b.clouds[i].points);
  const Scene c = gen_scene(default_scene_spec(10, 3));
  EXPECT_NE(a.clouds[0].points, c.clouds[0].points);
}

TEST(PlacementTest, BoxesDoNotOverlapAndRestOnGround) {
  for (std::uint64_t seed = 0; seed < 30; ++seed) {
    const SceneSpec s = default_scene_spec(seed, 2);
    const std::vector<Box3> boxes = place_objects(s);
    ASSERT_GE(static_cast<int>(boxes.size()), s.min_objects);
    ASSERT_LE(static_cast<int>(boxes.size()), s.max_objects);
    for (std::size_t i = 0; i < boxes.size(); ++i) {
      EXPECT_NEAR(boxes[i].min_corner().z(), 0.0, 1e-12);
      EXPECT_GE(boxes[i].min_corner().x(), s.extent_x.min - 1e-9);
      EXPECT_LE(boxes[i].max_corner().x(), s.extent_x.max + 1e-9);
      for (std::size_t j = i + 1; j < boxes.size(); ++j) {
        const bool apart_x = std::abs(boxes[i].center.x() - boxes[j].center.x()) >=
                             (boxes[i].size.x() + boxes[j].size.x()) / 2.0 + s.min_gap - 1e-9;
        const bool apart_y = std::abs(boxes[i].center.y() - boxes[j].center.y()) >=
                             (boxes[i].size.y() + boxes[j].size.y()) / 2.0 + s.min_gap - 1e-9;
        EXPECT_TRUE(apart_x || apart_y);
      }
    }
  }
}

TEST(PlacementTest, ImpossiblePlacementFails) {
  SceneSpec s;
  s.sensors = {Pose6DoF{}};
  s.extent_x = {0.0, 6.0};
  s.extent_y = {0.0, 6.0};
  s.min_objects = s.max_objects = 20;
  EXPECT_THROW(place_objects(s), std::runtime_error);
}

TEST(SceneSpecTest, ValidateRejectsBadValues) {
  SceneSpec s;
  EXPECT_THROW(s.validate(), std::invalid_argument);  // no sensors
  s.sensors = {Pose6DoF{}};
  EXPECT_NO_THROW(s.validate());
  s.max_range = 0.0;
  EXPECT_THROW(s.validate(), std::invalid_argument);
}

TEST(BoxesInFrameTest, IdentityAndHalfTurn) {
  const std::vector<Box3> boxes = {Box3{Eigen::Vector3d(3, 1, 0.8), Eigen::Vector3d(4, 2, 1.6), 0}};
  const auto same = boxes_in_frame(boxes, RigidTransform::identity());
  EXPECT_LE((same[0].center - boxes[0].center).norm(), 1e-12);
  EXPECT_LE((same[0].size - boxes[0].size).norm(), 1e-12);
  // Sensor at (6, 6, 4.2) facing -x: world (3, 1, 0.8) is (3, 5, -3.4) locally.
  const auto turned = boxes_in_frame(boxes, from_pose({6, 6, 4.2, 0, 0, kPi}));
  EXPECT_LE((turned[0].center - Eigen::Vector3d(3, 5, -3.4)).norm(), 1e-9);
  EXPECT_LE((turned[0].size - boxes[0].size).norm(), 1e-9);
}

TEST(TruthJsonTest, RoundTrip) {
  const Scene scene = gen_scene(default_scene_spec(3, 2));
  const GroundTruth back = truth_from_json(truth_to_json(scene.truth));
  ASSERT_EQ(back.boxes.size(), scene.truth.boxes.size());
  for (std::size_t i = 0; i < back.boxes.size(); ++i) {
    EXPECT_EQ(back.boxes[i].center, scene.truth.boxes[i].center);
    EXPECT_EQ(back.boxes[i].size, scene.truth.boxes[i].size);
  }
  ASSERT_EQ(back.extrinsics.size(), 2u);
  EXPECT_EQ(back.extrinsics[1].matrix(), scene.truth.extrinsics[1].matrix());
}

}  // namespace
}  // namespace scmii
