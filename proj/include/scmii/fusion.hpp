#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "scmii/geometry.hpp"
#include "scmii/model.hpp"
#include "scmii/sparse.hpp"

namespace scmii {

enum class FusionMethod { kMax, kConcatConv };

/// How the server integrates the aligned per-device tensors. For
/// concat-conv, `kernel` has N*C inputs and C outputs, N = device_order.size(),
/// and input block n belongs to device_order[n].
struct FusionConfig {
  FusionMethod method = FusionMethod::kMax;
  int kernel_size = 1;
  std::vector<int> device_order;
  GridSpec target;
  ConvKernel kernel;

  void validate(int channels) const;
};

/// CLI names: "max", "concat1", "concat3".
std::string fusion_name(const FusionConfig& cfg);

/// Builds a config. The concat kernel is the averaging preset when
/// `averaging` is set or `mode` is identity-preserving, else seeded-random.
FusionConfig make_fusion_config(const std::string& name, const std::vector<int>& device_order,
                                const GridSpec& target, int channels, std::uint64_t seed,
                                InitMode mode, bool averaging);

/// Center-tap kernel with W[n*C + c][c] = 1/N: the per-channel mean over N
/// inputs, absent inputs counting as zero.
ConvKernel averaging_kernel(int devices, int channels, int kernel_size);

/// Moves every entry to the voxel of `target` whose center is nearest to
/// T applied to the entry's center (ties round away from zero). Out-of-range
/// entries are dropped; collisions keep the per-channel maximum.
SparseFeatureTensor transform_tensor(const SparseFeatureTensor& t, const RigidTransform& T,
                                     const GridSpec& target);

/// Per-channel maximum over the union support.
SparseFeatureTensor fuse_max(const std::vector<SparseFeatureTensor>& tensors);

/// Concatenates along channels in the given order (zero where a device has no
/// entry), applies `kernel`, and keeps only sites in the union support. An
/// absent device is passed as an empty tensor on the common grid.
SparseFeatureTensor fuse_concat_conv(const std::vector<SparseFeatureTensor>& tensors,
                                     const ConvKernel& kernel);

/// Dispatches on cfg.method. `tensors` follow cfg.device_order.
SparseFeatureTensor fuse(const std::vector<SparseFeatureTensor>& tensors, const FusionConfig& cfg);

}  // namespace scmii
