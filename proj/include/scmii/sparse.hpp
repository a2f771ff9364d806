#pragma once

#include <Eigen/Core>
#include <array>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <unordered_map>
#include <vector>

#include "scmii/pointcloud.hpp"

namespace scmii {

using VoxelIndex = std::array<std::int32_t, 3>;

/// Largest per-axis dimension; keeps (z, y, x) packable into 63 bits.
inline constexpr std::int32_t kMaxGridDim = 1 << 21;

/// Voxel lattice. `dims` are index bounds at the current resolution and the
/// effective voxel size is `voxel_size * stride`.
struct GridSpec {
  Eigen::Vector3d origin = Eigen::Vector3d::Zero();
  Eigen::Vector3d voxel_size = Eigen::Vector3d::Constant(0.4);
  std::array<std::int32_t, 3> dims{1, 1, 1};
  std::int32_t stride = 1;

  Eigen::Vector3d effective_voxel_size() const { return voxel_size * stride; }
  // origin + (idx + 0.5) * effective voxel size
  Eigen::Vector3d center(const VoxelIndex& idx) const;
  bool contains(const VoxelIndex& idx) const;
  std::int64_t volume() const;
  void validate() const;

  bool operator==(const GridSpec& o) const {
    return origin == o.origin && voxel_size == o.voxel_size && dims == o.dims && stride == o.stride;
  }
};

/// Packs an in-grid index so that key order equals (z, y, x) order.
std::uint64_t voxel_key(const VoxelIndex& idx);
VoxelIndex voxel_from_key(std::uint64_t key);

class TensorError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Sparse grid of C-channel float32 feature vectors. Entries are kept sorted
/// by (z, y, x), which is also the wire order.
class SparseFeatureTensor {
 public:
  SparseFeatureTensor(GridSpec grid, int channels);

  const GridSpec& grid() const { return grid_; }
  int channels() const { return channels_; }
  std::size_t size() const { return keys_.size(); }
  bool empty() const { return keys_.empty(); }

  VoxelIndex index(std::size_t i) const { return voxel_from_key(keys_[i]); }
  std::span<const std::uint64_t> keys() const { return keys_; }
  std::span<const float> features(std::size_t i) const {
    return {features_.data() + i * static_cast<std::size_t>(channels_),
            static_cast<std::size_t>(channels_)};
  }
  std::span<const float> all_features() const { return features_; }

  std::optional<std::span<const float>> find(const VoxelIndex& idx) const;
  bool contains(const VoxelIndex& idx) const { return find(idx).has_value(); }

  /// Exact equality of grid, channels, support and feature bits.
  bool operator==(const SparseFeatureTensor& o) const;

 private:
  friend class TensorBuilder;

  GridSpec grid_;
  int channels_;
  std::vector<std::uint64_t> keys_;
  std::vector<float> features_;
};

/// Accumulates entries in any order and produces a sorted tensor.
class TensorBuilder {
 public:
  TensorBuilder(GridSpec grid, int channels);

  /// Feature slot for `idx`, zero-filled on first access. `inserted` reports
  /// whether the entry is new. Throws TensorError when out of grid.
  std::span<float> slot(const VoxelIndex& idx, bool* inserted = nullptr);
  void set(const VoxelIndex& idx, std::span<const float> values);
  std::size_t size() const { return keys_.size(); }

  /// Validates finiteness and sorts.
  SparseFeatureTensor build() &&;

 private:
  GridSpec grid_;
  int channels_;
  std::unordered_map<std::uint64_t, std::size_t> slots_;
  std::vector<std::uint64_t> keys_;
  std::vector<float> features_;
};

/// Shape of one sparse convolution layer.
struct LayerSpec {
  int kernel_size = 3;  // 1 or 3
  int stride = 1;       // 1 or 2
  int in_channels = 1;
  int out_channels = 1;
  bool relu = true;

  std::size_t weight_count() const {
    return static_cast<std::size_t>(kernel_size) * kernel_size * kernel_size * in_channels *
           out_channels;
  }
  void validate() const;
  bool operator==(const LayerSpec&) const = default;
};

/// Weights laid out [k^3][in][out]; kernel offset flat index is
/// ox + k*oy + k^2*oz.
struct ConvKernel {
  LayerSpec shape;
  std::vector<float> weights;
  std::vector<float> bias;

  explicit ConvKernel(LayerSpec s = {});

  float& w(int offset, int in, int out) {
    return weights[(static_cast<std::size_t>(offset) * shape.in_channels + in) *
                       shape.out_channels +
                   out];
  }
  float w(int offset, int in, int out) const {
    return weights[(static_cast<std::size_t>(offset) * shape.in_channels + in) *
                       shape.out_channels +
                   out];
  }
  static int flat_offset(int ox, int oy, int oz, int k) { return ox + k * oy + k * k * oz; }
  int center_offset() const {
    const int h = shape.kernel_size / 2;
    return flat_offset(h, h, h, shape.kernel_size);
  }
  void validate() const;
  bool operator==(const ConvKernel&) const = default;
};

/// Voxel encoding channels: mean offset from the voxel center in units of
/// voxel size (x, y, z), then min(count, 32) / 32.
inline constexpr int kVoxelChannels = 4;
inline constexpr int kOccupancyChannel = 3;
inline constexpr int kMaxVoxelCount = 32;

/// Requires grid.stride == 1. Points outside the grid are dropped.
SparseFeatureTensor voxelize(const PointCloud& cloud, const GridSpec& grid);

/// Regular sparse convolution: an output site exists iff its receptive field
/// holds at least one occupied input.
SparseFeatureTensor sparse_conv(const SparseFeatureTensor& input, const ConvKernel& kernel);

GridSpec conv_output_grid(const GridSpec& in, int stride);

/// Multiply-accumulate count for a layer that produced `output_sites` sites.
std::uint64_t conv_macs(const LayerSpec& layer, std::size_t output_sites);

}  // namespace scmii
