#pragma once

#include <Eigen/Core>
#include <cstddef>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "scmii/geometry.hpp"

namespace scmii {

struct PointCloud {
  std::vector<Eigen::Vector3d> points;
  // Same length as `points` when present; values in [0, 1].
  std::optional<std::vector<double>> intensity;

  std::size_t size() const { return points.size(); }
  bool empty() const { return points.empty(); }
};

enum class CloudFormat { kCsv, kXyzBinary };

/// Raised by cloud and config readers. `offset` is a 1-based line number for
/// text formats and a byte offset for binary ones.
class ParseError : public std::runtime_error {
 public:
  ParseError(const std::string& what, std::size_t offset)
      : std::runtime_error(what), offset_(offset) {}
  std::size_t offset() const { return offset_; }

 private:
  std::size_t offset_;
};

/// CSV rows `x,y,z[,i]`; binary is little-endian `u32 count` followed by
/// count x 3 float32.
PointCloud load_cloud(const std::filesystem::path& path, CloudFormat format);
void save_cloud(const PointCloud& cloud, const std::filesystem::path& path, CloudFormat format);

/// Picks the format from the extension: `.csv` or `.bin`.
CloudFormat format_for_path(const std::filesystem::path& path);

PointCloud parse_csv_cloud(const std::string& text);
PointCloud parse_binary_cloud(const std::vector<unsigned char>& bytes);

PointCloud transform_cloud(const PointCloud& cloud, const RigidTransform& t);

/// Concatenates clouds; intensity is kept only when every input has it.
PointCloud merge_clouds(const std::vector<PointCloud>& clouds);

Eigen::Vector3d centroid(const PointCloud& cloud);

}  // namespace scmii
