#include "scmii/pointcloud.hpp"

#include <array>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <iterator>
#include <sstream>
#include <string_view>

namespace scmii {
namespace {

std::vector<unsigned char> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw std::runtime_error("cannot open " + path.string());
  }
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

double parse_field(std::string_view field, std::size_t line) {
  while (!field.empty() && (field.front() == ' ' || field.front() == '\t')) {
    field.remove_prefix(1);
  }
  while (!field.empty() && (field.back() == ' ' || field.back() == '\t' || field.back() == '\r')) {
    field.remove_suffix(1);
  }
  // strtod instead of from_chars: libstdc++ 11 lacks floating from_chars.
  std::string owned(field);
  char* end = nullptr;
  const double v = std::strtod(owned.c_str(), &end);
  if (owned.empty() || end != owned.c_str() + owned.size() || !std::isfinite(v)) {
    throw ParseError("line " + std::to_string(line) + ": bad number '" + owned + "'", line);
  }
  return v;
}

void put_u32(std::ofstream& out, std::uint32_t v) {
  std::array<unsigned char, 4> b{static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                                 static_cast<unsigned char>(v >> 16),
                                 static_cast<unsigned char>(v >> 24)};
  out.write(reinterpret_cast<const char*>(b.data()), 4);
}

}  // namespace

PointCloud parse_csv_cloud(const std::string& text) {
  PointCloud cloud;
  std::vector<double> intensity;
  std::optional<bool> has_intensity;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos < text.size()) {
    std::size_t eol = text.find('\n', pos);
    if (eol == std::string::npos) eol = text.size();
    std::string_view line(text.data() + pos, eol - pos);
    pos = eol + 1;
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string_view::npos) continue;

    std::vector<std::string_view> fields;
    std::size_t start = 0;
    while (true) {
      const std::size_t comma = line.find(',', start);
      fields.push_back(line.substr(start, comma - start));
      if (comma == std::string_view::npos) break;
      start = comma + 1;
    }
    if (fields.size() != 3 && fields.size() != 4) {
      throw ParseError("line " + std::to_string(line_no) + ": expected 3 or 4 fields, got " +
                           std::to_string(fields.size()),
                       line_no);
    }
    const bool row_has_i = fields.size() == 4;
    if (!has_intensity) {
      has_intensity = row_has_i;
    } else if (*has_intensity != row_has_i) {
      throw ParseError("line " + std::to_string(line_no) + ": inconsistent column count", line_no);
    }
    cloud.points.emplace_back(parse_field(fields[0], line_no), parse_field(fields[1], line_no),
                              parse_field(fields[2], line_no));
    if (row_has_i) {
      const double i = parse_field(fields[3], line_no);
      if (i < 0.0 || i > 1.0) {
        throw ParseError("line " + std::to_string(line_no) + ": intensity outside [0,1]", line_no);
      }
      intensity.push_back(i);
    }
  }
  if (has_intensity.value_or(false)) cloud.intensity = std::move(intensity);
  return cloud;
}

PointCloud parse_binary_cloud(const std::vector<unsigned char>& bytes) {
  PointCloud cloud;
  if (bytes.empty()) return cloud;
  if (bytes.size() < 4) {
    throw ParseError("truncated count header at byte " + std::to_string(bytes.size()),
                     bytes.size());
  }
  const std::uint32_t count =
      static_cast<std::uint32_t>(bytes[0]) | static_cast<std::uint32_t>(bytes[1]) << 8 |
      static_cast<std::uint32_t>(bytes[2]) << 16 | static_cast<std::uint32_t>(bytes[3]) << 24;
  const std::size_t needed = 4 + static_cast<std::size_t>(count) * 12;
  if (bytes.size() < needed) {
    throw ParseError("truncated point data at byte " + std::to_string(bytes.size()) + " (need " +
                         std::to_string(needed) + ")",
                     bytes.size());
  }
  if (bytes.size() > needed) {
    throw ParseError("trailing bytes after point data at byte " + std::to_string(needed), needed);
  }
  cloud.points.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    std::array<float, 3> xyz{};
    const std::size_t off = 4 + static_cast<std::size_t>(i) * 12;
    for (int k = 0; k < 3; ++k) {
      std::uint32_t raw = 0;
      for (int b = 0; b < 4; ++b) {
        raw |= static_cast<std::uint32_t>(bytes[off + k * 4 + b]) << (8 * b);
      }
      std::memcpy(&xyz[k], &raw, 4);
      if (!std::isfinite(xyz[k])) {
        throw ParseError("non-finite coordinate at byte " + std::to_string(off + k * 4),
                         off + k * 4);
      }
    }
    cloud.points.emplace_back(xyz[0], xyz[1], xyz[2]);
  }
  return cloud;
}

PointCloud load_cloud(const std::filesystem::path& path, CloudFormat format) {
  const std::vector<unsigned char> bytes = read_file(path);
  try {
    if (format == CloudFormat::kCsv) {
      return parse_csv_cloud(std::string(bytes.begin(), bytes.end()));
    }
    return parse_binary_cloud(bytes);
  } catch (const ParseError& e) {
    throw ParseError(path.string() + ": " + e.what(), e.offset());
  }
}

void save_cloud(const PointCloud& cloud, const std::filesystem::path& path, CloudFormat format) {
  std::ofstream out(path, std::ios::binary);
  if (!out) {
    throw std::runtime_error("cannot write " + path.string());
  }
  if (format == CloudFormat::kCsv) {
    char buf[128];
    for (std::size_t i = 0; i < cloud.points.size(); ++i) {
      const Eigen::Vector3d& p = cloud.points[i];
      int n = 0;
      if (cloud.intensity) {
        n = std::snprintf(buf, sizeof(buf), "%.9g,%.9g,%.9g,%.9g\n", p.x(), p.y(), p.z(),
                          (*cloud.intensity)[i]);
      } else {
        n = std::snprintf(buf, sizeof(buf), "%.9g,%.9g,%.9g\n", p.x(), p.y(), p.z());
      }
      out.write(buf, n);
    }
  } else {
    if (cloud.points.size() > UINT32_MAX) {
      throw std::invalid_argument("cloud too large for binary format");
    }
    put_u32(out, static_cast<std::uint32_t>(cloud.points.size()));
    for (const Eigen::Vector3d& p : cloud.points) {
      for (int k = 0; k < 3; ++k) {
        const float f = static_cast<float>(p[k]);
        std::uint32_t raw = 0;
        std::memcpy(&raw, &f, 4);
        put_u32(out, raw);
      }
    }
  }
  if (!out) {
    throw std::runtime_error("write failed for " + path.string());
  }
}

CloudFormat format_for_path(const std::filesystem::path& path) {
  const std::string ext = path.extension().string();
  if (ext == ".csv") return CloudFormat::kCsv;
  if (ext == ".bin") return CloudFormat::kXyzBinary;
  throw std::invalid_argument("unknown cloud extension '" + ext + "' for " + path.string() +
                              " (use .csv or .bin)");
}

PointCloud transform_cloud(const PointCloud& cloud, const RigidTransform& t) {
  PointCloud out;
  out.intensity = cloud.intensity;
  out.points.reserve(cloud.points.size());
  for (const Eigen::Vector3d& p : cloud.points) {
    out.points.push_back(apply_point(t, p));
  }
  return out;
}

PointCloud merge_clouds(const std::vector<PointCloud>& clouds) {
  PointCloud out;
  bool all_intensity = !clouds.empty();
  std::size_t total = 0;
  for (const PointCloud& c : clouds) {
    total += c.size();
    all_intensity = all_intensity && c.intensity.has_value();
  }
  out.points.reserve(total);
  if (all_intensity) out.intensity.emplace().reserve(total);
  for (const PointCloud& c : clouds) {
    out.points.insert(out.points.end(), c.points.begin(), c.points.end());
    if (all_intensity) {
      out.intensity->insert(out.intensity->end(), c.intensity->begin(), c.intensity->end());
    }
  }
  return out;
}

Eigen::Vector3d centroid(const PointCloud& cloud) {
  Eigen::Vector3d sum = Eigen::Vector3d::Zero();
  for (const Eigen::Vector3d& p : cloud.points) sum += p;
  return cloud.empty() ? sum : Eigen::Vector3d(sum / static_cast<double>(cloud.size()));
}

}  // namespace scmii
