#include "scmii/pointcloud.hpp"

#include <gtest/gtest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "test_support.hpp"

namespace scmii {
namespace {

namespace fs = std::filesystem;
using testing::Gen;

fs::path temp_path(const std::string& name) {
  const fs::path dir = fs::path(::testing::TempDir()) / "scmii_pointcloud";
  fs::create_directories(dir);
  return dir / name;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

TEST(CsvTest, ParsesRows) {
  const PointCloud c = parse_csv_cloud("0,0,0\n1,2,3");
  ASSERT_EQ(c.size(), 2u);
  EXPECT_EQ(c.points[1], Eigen::Vector3d(1, 2, 3));
  EXPECT_FALSE(c.intensity.has_value());
}

TEST(CsvTest, ParsesIntensityColumn) {
  const PointCloud c = parse_csv_cloud("0,0,0,0.25\n1,2,3,1\n");
  ASSERT_TRUE(c.intensity.has_value());
  EXPECT_EQ(*c.intensity, (std::vector<double>{0.25, 1.0}));
}

TEST(CsvTest, EmptyTextIsEmptyCloud) { EXPECT_TRUE(parse_csv_cloud("").empty()); }

TEST(CsvTest, MalformedRowNamesLine) {
  try {
    parse_csv_cloud("0,0,0\n1,2\n");
    FAIL() << "expected ParseError";
  } catch (const ParseError& e) {
    EXPECT_EQ(e.offset(), 2u);
    EXPECT_NE(std::string(e.what()).find("line 2"), std::string::npos);
  }
}

TEST(CsvTest, BadNumberNamesLine) {
  try {
    parse_csv_cloud("0,0,0\n0,0,0\n1,x,3\n");
    FAIL() << "expected ParseError";
  } catch (const ParseError& e) {
    EXPECT_EQ(e.offset(), 3u);
  }
}

TEST(CsvTest, MixedColumnCountsRejected) {
  EXPECT_THROW(parse_csv_cloud("0,0,0\n0,0,0,0.5\n"), ParseError);
}

TEST(BinaryTest, TruncatedHeaderAndPayload) {
  try {
    parse_binary_cloud({1, 0});
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_EQ(e.offset(), 2u);
  }
  std::vector<unsigned char> bytes = {2, 0, 0, 0};
  bytes.resize(4 + 12 + 5, 0);
  try {
    parse_binary_cloud(bytes);
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_EQ(e.offset(), bytes.size());
  }
}

TEST(BinaryTest, EmptyFileIsEmptyCloud) {
  const fs::path p = temp_path("empty.bin");
  {
    std::ofstream(p, std::ios::binary);
  }
  EXPECT_TRUE(load_cloud(p, CloudFormat::kXyzBinary).empty());
  const fs::path q = temp_path("empty.csv");
  {
    std::ofstream(q, std::ios::binary);
  }
  EXPECT_TRUE(load_cloud(q, CloudFormat::kCsv).empty());
}

TEST(BinaryTest, RoundTripWithinFloatQuantization) {
  Gen gen(21);
  const PointCloud c = gen.cloud(1000, -80.0, 80.0);
  const fs::path p = temp_path("round.bin");
  save_cloud(c, p, CloudFormat::kXyzBinary);
  EXPECT_EQ(fs::file_size(p), 4u + 12u * 1000u);
  const PointCloud d = load_cloud(p, CloudFormat::kXyzBinary);
  ASSERT_EQ(d.size(), c.size());
  for (std::size_t i = 0; i < c.size(); ++i) {
    for (int k = 0; k < 3; ++k) {
      EXPECT_EQ(d.points[i][k], static_cast<double>(static_cast<float>(c.points[i][k])));
    }
  }
}

TEST(CsvTest, TextRoundTripAtNineDigits) {
  Gen gen(22);
  PointCloud c = gen.cloud(1000, -80.0, 80.0);
  c.intensity.emplace();
  for (std::size_t i = 0; i < c.size(); ++i) c.intensity->push_back(gen.uniform(0.0, 1.0));
  const fs::path p = temp_path("round.csv");
  save_cloud(c, p, CloudFormat::kCsv);
  const PointCloud d = load_cloud(p, CloudFormat::kCsv);
  ASSERT_EQ(d.size(), c.size());
  for (std::size_t i = 0; i < c.size(); ++i) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.9g", c.points[i].x());
    EXPECT_EQ(d.points[i].x(), std::strtod(buf, nullptr));
  }
  const fs::path q = temp_path("round2.csv");
  save_cloud(d, q, CloudFormat::kCsv);
  EXPECT_EQ(slurp(p), slurp(q));
}

TEST(LoadCloudTest, MissingFileThrows) {
  EXPECT_ANY_THROW(load_cloud(temp_path("does_not_exist.bin"), CloudFormat::kXyzBinary));
}

TEST(FormatTest, PicksByExtension) {
  EXPECT_EQ(format_for_path("a/b.csv"), CloudFormat::kCsv);
  EXPECT_EQ(format_for_path("a/b.bin"), CloudFormat::kXyzBinary);
  EXPECT_THROW(format_for_path("a/b.pcd"), std::invalid_argument);
}

TEST(TransformCloudTest, IdentityAndTranslation) {
  Gen gen(23);
  PointCloud c = gen.cloud(50, -5, 5);
  c.intensity = std::vector<double>(50, 0.5);
  const PointCloud same = transform_cloud(c, RigidTransform::identity());
  EXPECT_EQ(same.points, c.points);
  EXPECT_EQ(same.intensity, c.intensity);
  PointCloud origin;
  origin.points = {Eigen::Vector3d::Zero()};
  EXPECT_EQ(transform_cloud(origin, RigidTransform::translation({1, 0, 0})).points[0],
            Eigen::Vector3d(1, 0, 0));
}

TEST(TransformCloudTest, CentroidCommutesWithTransform) {
  Gen gen(24);
  for (int i = 0; i < 50; ++i) {
    const PointCloud c = gen.cloud(200, -30, 30);
    const RigidTransform t = gen.transform(20.0);
    EXPECT_LE((centroid(transform_cloud(c, t)) - apply_point(t, centroid(c))).norm(), 1e-9);
  }
}

TEST(MergeTest, KeepsIntensityOnlyWhenAllHaveIt) {
  PointCloud a, b;
  a.points = {Eigen::Vector3d(1, 0, 0)};
  a.intensity = std::vector<double>{0.1};
  b.points = {Eigen::Vector3d(2, 0, 0), Eigen::Vector3d(3, 0, 0)};
  b.intensity = std::vector<double>{0.2, 0.3};
  const PointCloud m = merge_clouds({a, b});
  ASSERT_EQ(m.size(), 3u);
  EXPECT_EQ(*m.intensity, (std::vector<double>{0.1, 0.2, 0.3}));
  b.intensity.reset();
  EXPECT_FALSE(merge_clouds({a, b}).intensity.has_value());
}

}  // namespace
}  // namespace scmii
