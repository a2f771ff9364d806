#include "scmii/sparse.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <map>

#include "oracles.hpp"
#include "test_support.hpp"

namespace scmii {
namespace {

using testing::dense_conv;
using testing::Gen;

void expect_matches_dense(const SparseFeatureTensor& got,
                          const std::map<std::uint64_t, std::vector<double>>& want) {
  ASSERT_EQ(got.size(), want.size());
  std::size_t i = 0;
  for (const auto& [key, values] : want) {
    ASSERT_EQ(got.keys()[i], key);
    const auto f = got.features(i);
    for (std::size_t c = 0; c < values.size(); ++c) {
      EXPECT_NEAR(f[c], values[c], 1e-4 * (1.0 + std::abs(values[c])));
    }
    ++i;
  }
}

TEST(VoxelKeyTest, RoundTripAndZyxOrder) {
  Gen gen(41);
  for (int i = 0; i < 1000; ++i) {
    const VoxelIndex a{gen.integer(0, kMaxGridDim - 1), gen.integer(0, kMaxGridDim - 1),
                       gen.integer(0, kMaxGridDim - 1)};
    const VoxelIndex b{gen.integer(0, kMaxGridDim - 1), gen.integer(0, kMaxGridDim - 1),
                       gen.integer(0, kMaxGridDim - 1)};
    EXPECT_EQ(voxel_from_key(voxel_key(a)), a);
    const bool zyx_less = std::tie(a[2], a[1], a[0]) < std::tie(b[2], b[1], b[0]);
    EXPECT_EQ(voxel_key(a) < voxel_key(b), zyx_less);
  }
}

TEST(GridSpecTest, CenterAndBounds) {
  GridSpec g;
  g.origin = Eigen::Vector3d(-1, -2, -3);
  g.voxel_size = Eigen::Vector3d(0.5, 0.5, 0.25);
  g.dims = {4, 4, 2};
  EXPECT_EQ(g.center({0, 0, 0}), Eigen::Vector3d(-0.75, -1.75, -2.875));
  EXPECT_TRUE(g.contains({3, 3, 1}));
  EXPECT_FALSE(g.contains({4, 0, 0}));
  EXPECT_FALSE(g.contains({0, -1, 0}));
  EXPECT_EQ(g.volume(), 32);
  g.dims[1] = 0;
  EXPECT_THROW(g.validate(), TensorError);
}

TEST(TensorBuilderTest, SortsAndRejectsBadInput) {
  GridSpec g;
  g.dims = {4, 4, 4};
  TensorBuilder b(g, 2);
  b.set({3, 0, 0}, std::vector<float>{1, 2});
  b.set({0, 0, 1}, std::vector<float>{3, 4});
  b.set({1, 2, 0}, std::vector<float>{5, 6});
  EXPECT_THROW(b.slot({4, 0, 0}), TensorError);
  EXPECT_THROW(b.set({0, 0, 0}, std::vector<float>{1}), TensorError);
  const SparseFeatureTensor t = std::move(b).build();
  ASSERT_EQ(t.size(), 3u);
  EXPECT_EQ(t.index(0), (VoxelIndex{3, 0, 0}));
  EXPECT_EQ(t.index(1), (VoxelIndex{1, 2, 0}));
  EXPECT_EQ(t.index(2), (VoxelIndex{0, 0, 1}));
  EXPECT_TRUE(std::is_sorted(t.keys().begin(), t.keys().end()));

  TensorBuilder bad(g, 1);
  bad.set({0, 0, 0}, std::vector<float>{std::nanf("")});
  EXPECT_THROW(std::move(bad).build(), TensorError);
}

TEST(VoxelizeTest, MatchesGroupByOracle) {
  Gen gen(42);
  for (int trial = 0; trial < 20; ++trial) {
    const GridSpec g = gen.grid(12);
    const PointCloud c = gen.cloud(400, -3.0, 6.0);
    const SparseFeatureTensor t = voxelize(c, g);
    std::map<std::uint64_t, std::pair<Eigen::Vector3d, int>> groups;
    for (const Eigen::Vector3d& p : c.points) {
      VoxelIndex idx;
      bool in = true;
      for (int a = 0; a < 3; ++a) {
        const double f = std::floor((p[a] - g.origin[a]) / g.voxel_size[a]);
        in = in && f >= 0 && f < g.dims[a];
        idx[a] = static_cast<std::int32_t>(f);
      }
      if (!in) continue;
      auto& [sum, n] = groups[voxel_key(idx)];
      if (n == 0) sum.setZero();
      sum += p;
      ++n;
    }
    ASSERT_EQ(t.size(), groups.size());
    std::size_t i = 0;
    for (const auto& [key, sn] : groups) {
      ASSERT_EQ(t.keys()[i], key);
      const VoxelIndex idx = voxel_from_key(key);
      const Eigen::Vector3d off =
          (sn.first / sn.second - g.center(idx)).cwiseQuotient(g.voxel_size);
      const auto f = t.features(i);
      for (int a = 0; a < 3; ++a) {
        EXPECT_GE(f[a], -0.5f);
        EXPECT_LE(f[a], 0.5f);
        EXPECT_NEAR(f[a], std::clamp(off[a], -0.5, 0.5), 1e-5);
      }
      EXPECT_FLOAT_EQ(f[kOccupancyChannel], std::min(sn.second, 32) / 32.0f);
      ++i;
    }
  }
}

TEST(VoxelizeTest, CountSaturatesAndRequiresStrideOne) {
  GridSpec g;
  g.voxel_size = Eigen::Vector3d::Ones();
  g.dims = {2, 2, 2};
  PointCloud c;
  c.points.assign(40, Eigen::Vector3d(0.5, 0.5, 0.5));
  const SparseFeatureTensor t = voxelize(c, g);
  ASSERT_EQ(t.size(), 1u);
  EXPECT_EQ(t.features(0)[kOccupancyChannel], 1.0f);
  EXPECT_EQ(t.features(0)[0], 0.0f);
  g.stride = 2;
  EXPECT_THROW(voxelize(c, g), TensorError);
}

TEST(SparseConvTest, MatchesDenseOracleForAllShapes) {
  Gen gen(43);
  for (int k : {1, 3}) {
    for (int s : {1, 2}) {
      for (int trial = 0; trial < 6; ++trial) {
        const GridSpec g = gen.grid(9);
        const LayerSpec L{k, s, gen.integer(1, 4), gen.integer(1, 5), gen.coin()};
        const SparseFeatureTensor in = gen.tensor(g, L.in_channels, gen.uniform(0.02, 0.4));
        const ConvKernel kern = gen.kernel(L);
        SCOPED_TRACE(::testing::Message() << "k=" << k << " s=" << s << " trial=" << trial);
        const SparseFeatureTensor out = sparse_conv(in, kern);
        EXPECT_EQ(out.grid(), conv_output_grid(g, s));
        expect_matches_dense(out, dense_conv(in, kern));
      }
    }
  }
}

TEST(SparseConvTest, SingleVoxelDilatesToTwentySevenSites) {
  GridSpec g;
  g.dims = {5, 5, 5};
  TensorBuilder b(g, 1);
  b.set({2, 2, 2}, std::vector<float>{1.0f});
  const SparseFeatureTensor in = std::move(b).build();
  ConvKernel k(LayerSpec{3, 1, 1, 1, false});
  std::fill(k.weights.begin(), k.weights.end(), 1.0f);
  const SparseFeatureTensor out = sparse_conv(in, k);
  EXPECT_EQ(out.size(), 27u);
  for (std::size_t i = 0; i < out.size(); ++i) {
    const VoxelIndex v = out.index(i);
    for (int a = 0; a < 3; ++a) EXPECT_LE(std::abs(v[a] - 2), 1);
  }
  // At a corner only the in-grid part of the neighbourhood survives.
  TensorBuilder c(g, 1);
  c.set({0, 0, 0}, std::vector<float>{1.0f});
  EXPECT_EQ(sparse_conv(std::move(c).build(), k).size(), 8u);
}

TEST(SparseConvTest, IdentityKernelPreservesTensor) {
  Gen gen(44);
  const GridSpec g = gen.grid(10);
  const SparseFeatureTensor in = gen.tensor(g, 3, 0.2);
  ConvKernel k(LayerSpec{1, 1, 3, 3, false});
  for (int c = 0; c < 3; ++c) k.w(0, c, c) = 1.0f;
  EXPECT_EQ(sparse_conv(in, k), in);
  ConvKernel k3(LayerSpec{3, 1, 3, 3, false});
  for (int c = 0; c < 3; ++c) k3.w(k3.center_offset(), c, c) = 1.0f;
  const SparseFeatureTensor out = sparse_conv(in, k3);
  for (std::size_t i = 0; i < in.size(); ++i) {
    const auto f = out.find(in.index(i));
    ASSERT_TRUE(f);
    for (int c = 0; c < 3; ++c) EXPECT_EQ((*f)[c], in.features(i)[c]);
  }
}

TEST(SparseConvTest, LinearWithoutBiasOrRelu) {
  Gen gen(45);
  for (int trial = 0; trial < 10; ++trial) {
    const GridSpec g = gen.grid(8);
    const LayerSpec L{3, gen.coin() ? 1 : 2, 2, 3, false};
    ConvKernel k = gen.kernel(L);
    std::fill(k.bias.begin(), k.bias.end(), 0.0f);
    const SparseFeatureTensor a = gen.tensor(g, 2, 0.3);
    // Scaling the input scales the output; support is unchanged.
    TensorBuilder b(g, 2);
    for (std::size_t i = 0; i < a.size(); ++i) {
      std::span<float> f = b.slot(a.index(i));
      for (int c = 0; c < 2; ++c) f[c] = 2.5f * a.features(i)[c];
    }
    const SparseFeatureTensor ya = sparse_conv(a, k);
    const SparseFeatureTensor yb = sparse_conv(std::move(b).build(), k);
    ASSERT_EQ(testing::support(ya), testing::support(yb));
    for (std::size_t i = 0; i < ya.size(); ++i) {
      for (int c = 0; c < 3; ++c) {
        EXPECT_NEAR(yb.features(i)[c], 2.5f * ya.features(i)[c],
                    1e-4 * (1.0 + std::abs(ya.features(i)[c])));
      }
    }
  }
}

TEST(SparseConvTest, StrideTwoGeometry) {
  GridSpec g;
  g.origin = Eigen::Vector3d(-1, -1, -1);
  g.voxel_size = Eigen::Vector3d::Constant(0.2);
  g.dims = {7, 8, 3};
  const GridSpec out = conv_output_grid(g, 2);
  EXPECT_EQ(out.dims, (std::array<std::int32_t, 3>{4, 4, 2}));
  EXPECT_EQ(out.stride, 2);
  EXPECT_EQ(out.origin, g.origin);
  EXPECT_TRUE(out.effective_voxel_size().isApprox(Eigen::Vector3d::Constant(0.4)));
  EXPECT_TRUE(out.center({0, 0, 0}).isApprox(Eigen::Vector3d::Constant(-0.8)));
}

TEST(SparseConvTest, RejectsChannelMismatchAndBadShapes) {
  GridSpec g;
  g.dims = {2, 2, 2};
  const SparseFeatureTensor in(g, 2);
  EXPECT_THROW(sparse_conv(in, ConvKernel(LayerSpec{3, 1, 3, 1, true})), TensorError);
  EXPECT_THROW(ConvKernel(LayerSpec{5, 1, 1, 1, true}).validate(), TensorError);
  EXPECT_THROW(ConvKernel(LayerSpec{3, 3, 1, 1, true}).validate(), TensorError);
  EXPECT_TRUE(sparse_conv(in, ConvKernel(LayerSpec{3, 1, 2, 1, true})).empty());
}

TEST(ConvMacsTest, Formula) {
  EXPECT_EQ(conv_macs(LayerSpec{3, 1, 4, 16, true}, 10), 10u * 27u * 4u * 16u);
  EXPECT_EQ(conv_macs(LayerSpec{1, 2, 8, 8, true}, 7), 7u * 64u);
}

}  // namespace
}  // namespace scmii
