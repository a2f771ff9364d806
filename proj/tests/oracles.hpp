#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <set>
#include <vector>

#include "scmii/eval.hpp"
#include "scmii/fusion.hpp"
#include "scmii/ndt.hpp"
#include "scmii/sparse.hpp"
#include "test_support.hpp"

// Independent reference implementations shared by the unit tests and the
// acceptance runner.
namespace scmii::testing {

// Dense reference: every output index in the grid, every kernel tap, with
// the receptive field x = s*y + o - pad. Accumulates in double.
inline std::map<std::uint64_t, std::vector<double>> dense_conv(const SparseFeatureTensor& in,
                                                               const ConvKernel& k) {
  const LayerSpec& L = k.shape;
  const GridSpec out = conv_output_grid(in.grid(), L.stride);
  const int pad = L.kernel_size / 2;
  std::map<std::uint64_t, std::vector<double>> result;
  for (std::int32_t z = 0; z < out.dims[2]; ++z) {
    for (std::int32_t y = 0; y < out.dims[1]; ++y) {
      for (std::int32_t x = 0; x < out.dims[0]; ++x) {
        std::vector<double> acc(L.out_channels, 0.0);
        bool any = false;
        for (int oz = 0; oz < L.kernel_size; ++oz) {
          for (int oy = 0; oy < L.kernel_size; ++oy) {
            for (int ox = 0; ox < L.kernel_size; ++ox) {
              const VoxelIndex src{L.stride * x + ox - pad, L.stride * y + oy - pad,
                                   L.stride * z + oz - pad};
              if (!in.grid().contains(src)) continue;
              const auto f = in.find(src);
              if (!f) continue;
              any = true;
              const int off = ConvKernel::flat_offset(ox, oy, oz, L.kernel_size);
              for (int ci = 0; ci < L.in_channels; ++ci) {
                for (int co = 0; co < L.out_channels; ++co) {
                  acc[co] += static_cast<double>((*f)[ci]) * k.w(off, ci, co);
                }
              }
            }
          }
        }
        if (!any) continue;
        for (int co = 0; co < L.out_channels; ++co) {
          acc[co] += k.bias[co];
          if (L.relu) acc[co] = std::max(acc[co], 0.0);
        }
        result[voxel_key({x, y, z})] = acc;
      }
    }
  }
  return result;
}

inline std::set<std::uint64_t> union_support(const std::vector<SparseFeatureTensor>& ts) {
  std::set<std::uint64_t> out;
  for (const auto& t : ts) {
    const auto s = support(t);
    out.insert(s.begin(), s.end());
  }
  return out;
}

// Per-entry oracle for transform_tensor: physical center, nearest target
// center with half-way cases rounded away from zero, per-channel max on
// collision.
inline std::map<std::uint64_t, std::vector<float>> rebin_oracle(const SparseFeatureTensor& t,
                                                                const RigidTransform& T,
                                                                const GridSpec& target) {
  std::map<std::uint64_t, std::vector<float>> out;
  const Eigen::Vector3d ev = target.voxel_size * target.stride;
  for (std::size_t i = 0; i < t.size(); ++i) {
    const VoxelIndex v = t.index(i);
    const Eigen::Vector3d ev_src = t.grid().voxel_size * t.grid().stride;
    Eigen::Vector3d c;
    for (int a = 0; a < 3; ++a) c[a] = t.grid().origin[a] + (v[a] + 0.5) * ev_src[a];
    const Eigen::Vector3d p = apply_point(T, c);
    VoxelIndex idx;
    bool inside = true;
    for (int a = 0; a < 3; ++a) {
      const double u = (p[a] - target.origin[a]) / ev[a] - 0.5;
      const double r = u >= 0 ? std::floor(u + 0.5) : std::ceil(u - 0.5);
      if (r < 0 || r >= target.dims[a]) inside = false;
      idx[a] = static_cast<std::int32_t>(r);
    }
    if (!inside) continue;
    const auto f = t.features(i);
    auto [it, fresh] = out.try_emplace(voxel_key(idx), f.begin(), f.end());
    if (!fresh) {
      for (std::size_t c2 = 0; c2 < f.size(); ++c2)
        it->second[c2] = std::max(it->second[c2], f[c2]);
    }
  }
  return out;
}

// Points whose transformed position is at least `margin` inside its cell, so
// small pose perturbations never move them across a cell boundary (the score
// is discontinuous there).
inline PointCloud interior_points(const NdtMap& map, const PointCloud& scan, const Pose6DoF& pose,
                                  double margin) {
  const RigidTransform t = from_pose(pose);
  PointCloud out;
  for (const auto& x : scan.points) {
    const Eigen::Vector3d y = apply_point(t, x);
    bool inside = true;
    for (int a = 0; a < 3; ++a) {
      const double u = (y[a] - map.origin()[a]) / map.cell_size();
      const double frac = (u - std::floor(u)) * map.cell_size();
      inside = inside && frac >= margin && frac <= map.cell_size() - margin;
    }
    if (inside) out.points.push_back(x);
  }
  return out;
}

// Independent AP: rank by score (ties keep input order), match greedily by
// the highest IoU (first index on ties), then integrate the interpolated
// precision over the T recall steps 1/T, 2/T, ..., 1. A step is worth the
// best precision at any rank reaching at least that many true positives.
struct OracleAp {
  double ap = 0.0;
  std::vector<PrPoint> curve;
};

inline OracleAp oracle_ap(const std::vector<Detection>& dets, const std::vector<Box3>& truth,
                          double thr) {
  std::vector<std::size_t> order(dets.size());
  std::iota(order.begin(), order.end(), 0);
  for (std::size_t i = 1; i < order.size(); ++i) {
    // Insertion sort: stable by construction.
    for (std::size_t j = i; j > 0 && dets[order[j]].score > dets[order[j - 1]].score; --j) {
      std::swap(order[j], order[j - 1]);
    }
  }
  std::vector<bool> used(truth.size(), false);
  std::vector<int> tp_at;
  std::vector<double> precision_at;
  OracleAp out;
  int tp = 0;
  for (std::size_t k = 0; k < order.size(); ++k) {
    const Detection& d = dets[order[k]];
    int best = -1;
    double best_iou = 0.0;
    for (std::size_t j = 0; j < truth.size(); ++j) {
      if (used[j]) continue;
      const double v = iou3d(d, truth[j]);
      if (v >= thr && (best < 0 || v > best_iou)) {
        best = static_cast<int>(j);
        best_iou = v;
      }
    }
    if (best >= 0) {
      used[best] = true;
      ++tp;
    }
    tp_at.push_back(tp);
    precision_at.push_back(static_cast<double>(tp) / static_cast<double>(k + 1));
    if (!truth.empty()) {
      out.curve.push_back(
          {static_cast<double>(tp) / static_cast<double>(truth.size()), precision_at.back()});
    }
  }
  if (truth.empty()) return out;
  const int n_truth = static_cast<int>(truth.size());
  for (int m = 1; m <= n_truth; ++m) {
    double best = 0.0;
    for (std::size_t k = 0; k < tp_at.size(); ++k) {
      if (tp_at[k] >= m) best = std::max(best, precision_at[k]);
    }
    out.ap += best / n_truth;
  }
  return out;
}

}  // namespace scmii::testing
