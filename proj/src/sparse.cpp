#include "scmii/sparse.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>
#include <string>

namespace scmii {
namespace {

constexpr std::uint64_t kAxisMask = (std::uint64_t{1} << 21) - 1;

std::int32_t ceil_div(std::int32_t a, std::int32_t b) { return (a + b - 1) / b; }

}  // namespace

Eigen::Vector3d GridSpec::center(const VoxelIndex& idx) const {
  const Eigen::Vector3d ev = effective_voxel_size();
  return {origin.x() + (idx[0] + 0.5) * ev.x(), origin.y() + (idx[1] + 0.5) * ev.y(),
          origin.z() + (idx[2] + 0.5) * ev.z()};
}

bool GridSpec::contains(const VoxelIndex& idx) const {
  return idx[0] >= 0 && idx[1] >= 0 && idx[2] >= 0 && idx[0] < dims[0] && idx[1] < dims[1] &&
         idx[2] < dims[2];
}

std::int64_t GridSpec::volume() const {
  return static_cast<std::int64_t>(dims[0]) * dims[1] * dims[2];
}

void GridSpec::validate() const {
  if (!origin.allFinite() || !voxel_size.allFinite() || (voxel_size.array() <= 0.0).any()) {
    throw TensorError("grid voxel sizes must be finite and > 0");
  }
  for (std::int32_t d : dims) {
    if (d < 1 || d > kMaxGridDim) {
      throw TensorError("grid dims must be in [1, " + std::to_string(kMaxGridDim) + "]");
    }
  }
  if (stride < 1) throw TensorError("grid stride scale must be >= 1");
}

std::uint64_t voxel_key(const VoxelIndex& idx) {
  return (static_cast<std::uint64_t>(idx[2]) << 42) | (static_cast<std::uint64_t>(idx[1]) << 21) |
         static_cast<std::uint64_t>(idx[0]);
}

VoxelIndex voxel_from_key(std::uint64_t key) {
  return {static_cast<std::int32_t>(key & kAxisMask),
          static_cast<std::int32_t>((key >> 21) & kAxisMask),
          static_cast<std::int32_t>((key >> 42) & kAxisMask)};
}

SparseFeatureTensor::SparseFeatureTensor(GridSpec grid, int channels)
    : grid_(std::move(grid)), channels_(channels) {
  grid_.validate();
  if (channels_ < 1 || channels_ > 65535) throw TensorError("channel count must be in [1, 65535]");
}

std::optional<std::span<const float>> SparseFeatureTensor::find(const VoxelIndex& idx) const {
  if (!grid_.contains(idx)) return std::nullopt;
  const std::uint64_t key = voxel_key(idx);
  const auto it = std::lower_bound(keys_.begin(), keys_.end(), key);
  if (it == keys_.end() || *it != key) return std::nullopt;
  return features(static_cast<std::size_t>(it - keys_.begin()));
}

bool SparseFeatureTensor::operator==(const SparseFeatureTensor& o) const {
  if (!(grid_ == o.grid_) || channels_ != o.channels_ || keys_ != o.keys_) return false;
  // Bitwise so that -0.0 and 0.0 are distinguished.
  return features_.size() == o.features_.size() &&
         std::equal(features_.begin(), features_.end(), o.features_.begin(),
                    [](float a, float b) { return std::memcmp(&a, &b, sizeof(float)) == 0; });
}

TensorBuilder::TensorBuilder(GridSpec grid, int channels)
    : grid_(std::move(grid)), channels_(channels) {
  grid_.validate();
  if (channels_ < 1 || channels_ > 65535) throw TensorError("channel count must be in [1, 65535]");
}

std::span<float> TensorBuilder::slot(const VoxelIndex& idx, bool* inserted) {
  if (!grid_.contains(idx)) {
    throw TensorError("voxel index (" + std::to_string(idx[0]) + "," + std::to_string(idx[1]) +
                      "," + std::to_string(idx[2]) + ") outside grid");
  }
  const std::uint64_t key = voxel_key(idx);
  auto [it, fresh] = slots_.try_emplace(key, keys_.size());
  if (fresh) {
    keys_.push_back(key);
    features_.resize(features_.size() + static_cast<std::size_t>(channels_), 0.0f);
  }
  if (inserted != nullptr) *inserted = fresh;
  return {features_.data() + it->second * static_cast<std::size_t>(channels_),
          static_cast<std::size_t>(channels_)};
}

void TensorBuilder::set(const VoxelIndex& idx, std::span<const float> values) {
  if (values.size() != static_cast<std::size_t>(channels_)) {
    throw TensorError("feature length does not match channel count");
  }
  std::span<float> dst = slot(idx);
  std::copy(values.begin(), values.end(), dst.begin());
}

SparseFeatureTensor TensorBuilder::build() && {
  for (float f : features_) {
    if (!std::isfinite(f)) throw TensorError("non-finite feature value");
  }
  SparseFeatureTensor out(grid_, channels_);
  std::vector<std::size_t> order(keys_.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return keys_[a] < keys_[b]; });
  const auto c = static_cast<std::size_t>(channels_);
  out.keys_.reserve(order.size());
  out.features_.reserve(order.size() * c);
  for (std::size_t i : order) {
    out.keys_.push_back(keys_[i]);
    out.features_.insert(out.features_.end(), features_.begin() + i * c,
                         features_.begin() + (i + 1) * c);
  }
  return out;
}

void LayerSpec::validate() const {
  if (kernel_size != 1 && kernel_size != 3) throw TensorError("kernel size must be 1 or 3");
  if (stride != 1 && stride != 2) throw TensorError("stride must be 1 or 2");
  if (in_channels < 1 || out_channels < 1 || in_channels > 65535 || out_channels > 65535) {
    throw TensorError("layer channel counts must be in [1, 65535]");
  }
}

ConvKernel::ConvKernel(LayerSpec s)
    : shape(s),
      weights(s.weight_count(), 0.0f),
      bias(static_cast<std::size_t>(std::max(s.out_channels, 0)), 0.0f) {}

void ConvKernel::validate() const {
  shape.validate();
  if (weights.size() != shape.weight_count() ||
      bias.size() != static_cast<std::size_t>(shape.out_channels)) {
    throw TensorError("kernel weight/bias arrays do not match layer shape");
  }
  for (float w : weights) {
    if (!std::isfinite(w)) throw TensorError("non-finite kernel weight");
  }
  for (float b : bias) {
    if (!std::isfinite(b)) throw TensorError("non-finite kernel bias");
  }
}

GridSpec conv_output_grid(const GridSpec& in, int stride) {
  GridSpec out = in;
  for (int a = 0; a < 3; ++a) out.dims[a] = ceil_div(in.dims[a], stride);
  out.stride = in.stride * stride;
  return out;
}

std::uint64_t conv_macs(const LayerSpec& layer, std::size_t output_sites) {
  const std::uint64_t k = static_cast<std::uint64_t>(layer.kernel_size);
  return static_cast<std::uint64_t>(output_sites) * k * k * k *
         static_cast<std::uint64_t>(layer.in_channels) *
         static_cast<std::uint64_t>(layer.out_channels);
}

SparseFeatureTensor voxelize(const PointCloud& cloud, const GridSpec& grid) {
  if (grid.stride != 1) throw TensorError("voxelize requires a stride-1 grid");
  grid.validate();

  struct Acc {
    Eigen::Vector3d sum = Eigen::Vector3d::Zero();
    int count = 0;
  };
  std::unordered_map<std::uint64_t, Acc> acc;
  for (const Eigen::Vector3d& p : cloud.points) {
    VoxelIndex idx{};
    bool inside = true;
    for (int a = 0; a < 3; ++a) {
      const double f = std::floor((p[a] - grid.origin[a]) / grid.voxel_size[a]);
      if (!(f >= 0.0 && f < static_cast<double>(grid.dims[a]))) {
        inside = false;
        break;
      }
      idx[a] = static_cast<std::int32_t>(f);
    }
    if (!inside) continue;
    Acc& a = acc[voxel_key(idx)];
    a.sum += p;
    ++a.count;
  }

  TensorBuilder builder(grid, kVoxelChannels);
  for (const auto& [key, a] : acc) {
    const VoxelIndex idx = voxel_from_key(key);
    const Eigen::Vector3d mean = a.sum / static_cast<double>(a.count);
    const Eigen::Vector3d offset = (mean - grid.center(idx)).cwiseQuotient(grid.voxel_size);
    std::span<float> f = builder.slot(idx);
    for (int k = 0; k < 3; ++k) {
      f[k] = static_cast<float>(std::clamp(offset[k], -0.5, 0.5));
    }
    f[kOccupancyChannel] =
        static_cast<float>(std::min(a.count, kMaxVoxelCount)) / static_cast<float>(kMaxVoxelCount);
  }
  return std::move(builder).build();
}

SparseFeatureTensor sparse_conv(const SparseFeatureTensor& input, const ConvKernel& kernel) {
  kernel.validate();
  const LayerSpec& L = kernel.shape;
  if (L.in_channels != input.channels()) {
    throw TensorError("conv expects " + std::to_string(L.in_channels) + " input channels, got " +
                      std::to_string(input.channels()));
  }
  const GridSpec out_grid = conv_output_grid(input.grid(), L.stride);
  const int k = L.kernel_size;
  const int pad = k / 2;
  const int cin = L.in_channels;
  const int cout = L.out_channels;

  TensorBuilder builder(out_grid, cout);
  for (std::size_t i = 0; i < input.size(); ++i) {
    const VoxelIndex x = input.index(i);
    const std::span<const float> fx = input.features(i);
    for (int oz = 0; oz < k; ++oz) {
      for (int oy = 0; oy < k; ++oy) {
        for (int ox = 0; ox < k; ++ox) {
          // x = s*y + o - pad  =>  y = (x - o + pad) / s
          VoxelIndex y{};
          const int o[3] = {ox, oy, oz};
          bool valid = true;
          for (int a = 0; a < 3 && valid; ++a) {
            const int num = x[a] - o[a] + pad;
            if (num < 0 || num % L.stride != 0) {
              valid = false;
            } else {
              y[a] = num / L.stride;
              valid = y[a] < out_grid.dims[a];
            }
          }
          if (!valid) continue;
          const int offset = ConvKernel::flat_offset(ox, oy, oz, k);
          std::span<float> acc = builder.slot(y);
          const float* w = kernel.weights.data() + static_cast<std::size_t>(offset) * cin * cout;
          for (int ci = 0; ci < cin; ++ci) {
            const float v = fx[ci];
            if (v == 0.0f) continue;
            const float* wrow = w + static_cast<std::size_t>(ci) * cout;
            for (int co = 0; co < cout; ++co) acc[co] += v * wrow[co];
          }
        }
      }
    }
  }
  SparseFeatureTensor raw = std::move(builder).build();
  // Bias and activation on every created site.
  TensorBuilder finished(out_grid, cout);
  for (std::size_t i = 0; i < raw.size(); ++i) {
    std::span<float> dst = finished.slot(raw.index(i));
    const std::span<const float> src = raw.features(i);
    for (int co = 0; co < cout; ++co) {
      float v = src[co] + kernel.bias[co];
      if (L.relu && v < 0.0f) v = 0.0f;
      dst[co] = v;
    }
  }
  return std::move(finished).build();
}

}  // namespace scmii
