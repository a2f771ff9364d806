#include "scmii/fusion.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <stdexcept>

namespace scmii {
namespace {

void check_common(const std::vector<SparseFeatureTensor>& tensors) {
  if (tensors.empty()) throw TensorError("fusion needs at least one tensor");
  for (const SparseFeatureTensor& t : tensors) {
    if (!(t.grid() == tensors.front().grid()) || t.channels() != tensors.front().channels()) {
      throw TensorError("fusion inputs must share grid and channel count");
    }
  }
}

}  // namespace

void FusionConfig::validate(int channels) const {
  if (device_order.empty()) throw std::invalid_argument("fusion device order is empty");
  std::set<int> seen(device_order.begin(), device_order.end());
  if (seen.size() != device_order.size()) {
    throw std::invalid_argument("fusion device order has duplicates");
  }
  target.validate();
  if (method == FusionMethod::kConcatConv) {
    const int n = static_cast<int>(device_order.size());
    if (kernel_size != 1 && kernel_size != 3) {
      throw std::invalid_argument("fusion kernel size must be 1 or 3");
    }
    kernel.validate();
    if (kernel.shape.kernel_size != kernel_size || kernel.shape.stride != 1 ||
        kernel.shape.in_channels != n * channels || kernel.shape.out_channels != channels) {
      throw std::invalid_argument("fusion kernel must be k x k stride 1, N*C -> C");
    }
  }
}

std::string fusion_name(const FusionConfig& cfg) {
  if (cfg.method == FusionMethod::kMax) return "max";
  return cfg.kernel_size == 1 ? "concat1" : "concat3";
}

ConvKernel averaging_kernel(int devices, int channels, int kernel_size) {
  ConvKernel k(LayerSpec{kernel_size, 1, devices * channels, channels, false});
  const int off = k.center_offset();
  const float w = 1.0f / static_cast<float>(devices);
  for (int n = 0; n < devices; ++n) {
    for (int c = 0; c < channels; ++c) k.w(off, n * channels + c, c) = w;
  }
  return k;
}

FusionConfig make_fusion_config(const std::string& name, const std::vector<int>& device_order,
                                const GridSpec& target, int channels, std::uint64_t seed,
                                InitMode mode, bool averaging) {
  FusionConfig cfg;
  cfg.device_order = device_order;
  cfg.target = target;
  const int n = static_cast<int>(device_order.size());
  if (name == "max") {
    cfg.method = FusionMethod::kMax;
  } else if (name == "concat1" || name == "concat3") {
    cfg.method = FusionMethod::kConcatConv;
    cfg.kernel_size = name == "concat1" ? 1 : 3;
    // Identity-preserving networks pair with the averaging preset.
    if (averaging || mode == InitMode::kIdentityPreserving) {
      cfg.kernel = averaging_kernel(n, channels, cfg.kernel_size);
    } else {
      cfg.kernel = ConvKernel(LayerSpec{cfg.kernel_size, 1, n * channels, channels, false});
      init_kernel(cfg.kernel, seed, mode);
    }
  } else {
    throw std::invalid_argument("unknown fusion method '" + name +
                                "' (expected max, concat1 or concat3)");
  }
  cfg.validate(channels);
  return cfg;
}

SparseFeatureTensor transform_tensor(const SparseFeatureTensor& t, const RigidTransform& T,
                                     const GridSpec& target) {
  const GridSpec& src = t.grid();
  if (target.stride != src.stride || target.voxel_size != src.voxel_size) {
    throw TensorError("transform_tensor needs matching voxel size and stride scale");
  }
  target.validate();
  const Eigen::Vector3d ev = target.effective_voxel_size();
  TensorBuilder out(target, t.channels());
  for (std::size_t i = 0; i < t.size(); ++i) {
    const Eigen::Vector3d p = apply_point(T, src.center(t.index(i)));
    VoxelIndex idx{};
    bool inside = true;
    for (int a = 0; a < 3 && inside; ++a) {
      const double r = std::round((p[a] - target.origin[a]) / ev[a] - 0.5);
      inside = r >= 0.0 && r < static_cast<double>(target.dims[a]);
      if (inside) idx[a] = static_cast<std::int32_t>(r);
    }
    if (!inside) continue;
    bool fresh = false;
    std::span<float> dst = out.slot(idx, &fresh);
    const std::span<const float> f = t.features(i);
    if (fresh) {
      std::copy(f.begin(), f.end(), dst.begin());
    } else {
      for (std::size_t c = 0; c < f.size(); ++c) dst[c] = std::max(dst[c], f[c]);
    }
  }
  return std::move(out).build();
}

SparseFeatureTensor fuse_max(const std::vector<SparseFeatureTensor>& tensors) {
  check_common(tensors);
  if (tensors.size() == 1) return tensors.front();
  TensorBuilder out(tensors.front().grid(), tensors.front().channels());
  for (const SparseFeatureTensor& t : tensors) {
    for (std::size_t i = 0; i < t.size(); ++i) {
      bool fresh = false;
      std::span<float> dst = out.slot(t.index(i), &fresh);
      const std::span<const float> f = t.features(i);
      if (fresh) {
        std::copy(f.begin(), f.end(), dst.begin());
      } else {
        for (std::size_t c = 0; c < f.size(); ++c) dst[c] = std::max(dst[c], f[c]);
      }
    }
  }
  return std::move(out).build();
}

SparseFeatureTensor fuse_concat_conv(const std::vector<SparseFeatureTensor>& tensors,
                                     const ConvKernel& kernel) {
  check_common(tensors);
  const int n = static_cast<int>(tensors.size());
  const int c = tensors.front().channels();
  kernel.validate();
  if (kernel.shape.stride != 1 || kernel.shape.in_channels != n * c ||
      kernel.shape.out_channels != c) {
    throw TensorError("fusion kernel must be stride 1 with N*C inputs and C outputs");
  }
  TensorBuilder wide(tensors.front().grid(), n * c);
  for (int d = 0; d < n; ++d) {
    const SparseFeatureTensor& t = tensors[static_cast<std::size_t>(d)];
    for (std::size_t i = 0; i < t.size(); ++i) {
      std::span<float> dst = wide.slot(t.index(i));
      const std::span<const float> f = t.features(i);
      std::copy(f.begin(), f.end(), dst.begin() + static_cast<std::ptrdiff_t>(d) * c);
    }
  }
  const SparseFeatureTensor stacked = std::move(wide).build();
  const SparseFeatureTensor conv = sparse_conv(stacked, kernel);
  if (kernel.shape.kernel_size == 1) return conv;

  TensorBuilder out(conv.grid(), c);
  for (std::size_t i = 0; i < conv.size(); ++i) {
    const VoxelIndex v = conv.index(i);
    if (!stacked.contains(v)) continue;
    out.set(v, conv.features(i));
  }
  return std::move(out).build();
}

SparseFeatureTensor fuse(const std::vector<SparseFeatureTensor>& tensors, const FusionConfig& cfg) {
  if (tensors.size() != cfg.device_order.size()) {
    throw TensorError("fusion expects one tensor per configured device");
  }
  if (cfg.method == FusionMethod::kMax) return fuse_max(tensors);
  return fuse_concat_conv(tensors, cfg.kernel);
}

}  // namespace scmii
