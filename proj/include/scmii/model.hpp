#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"
#include "scmii/pointcloud.hpp"
#include "scmii/sparse.hpp"

namespace scmii {

/// Layer layout of the split detector. The split sits right after `head`.
struct NetworkSpec {
  GridSpec input;
  LayerSpec head;
  std::vector<LayerSpec> tail;
  double bev_threshold = 0.5;
  int score_channel = 0;

  /// Grid on which the head output (and the server's fused tensor) lives.
  GridSpec head_output_grid() const { return conv_output_grid(input, head.stride); }
  int feature_channels() const { return head.out_channels; }
  void validate() const;
};

/// Local-frame grid x, y in [-32, 32), z in [-3.9, -1.5) at 0.2 m, a
/// k3 s1 4->16 head, then k3 s2 16->32 and k3 s1 32->32 in the tail. The z
/// band starts just above the ground seen from a 4 m mast, so ground returns
/// never reach the detector.
NetworkSpec default_network_spec();

struct Detection {
  Eigen::Vector3d center = Eigen::Vector3d::Zero();
  Eigen::Vector3d size = Eigen::Vector3d::Ones();
  double score = 0.0;
  int class_id = 0;

  bool operator==(const Detection& o) const {
    return center == o.center && size == o.size && score == o.score && class_id == o.class_id;
  }
};

enum class InitMode { kSeededRandom, kIdentityPreserving };

std::string to_string(InitMode mode);
InitMode init_mode_from_string(const std::string& s);

struct Weights {
  ConvKernel head;
  std::vector<ConvKernel> tail;
  std::uint64_t seed = 0;
  InitMode mode = InitMode::kSeededRandom;

  bool operator==(const Weights&) const = default;
};

/// Gain of the last tail layer in identity-preserving mode: with 8 the BEV
/// score of a stride-2 cell is 8 * (sum of occupancies in its 2x2x2 block),
/// so two points reach the default threshold and one stray point does not.
inline constexpr float kIdentityOutputGain = 8.0f;

/// kSeededRandom draws every weight and bias uniformly from
/// [-1/sqrt(fan_in), 1/sqrt(fan_in)] with fan_in = k^3 * Cin.
/// kIdentityPreserving routes occupancy through the self taps only (center
/// tap for stride 1, the own 2x2x2 block for k3 s2) so the score channel is
/// a monotone function of the local point count.
Weights init_weights(const NetworkSpec& spec, std::uint64_t seed, InitMode mode);

/// Fills one kernel in place with either mode's rule.
void init_kernel(ConvKernel& kernel, std::uint64_t seed, InitMode mode, float gain = 1.0f);

/// voxelize + head conv, in the device's local frame.
SparseFeatureTensor run_head(const PointCloud& cloud, const NetworkSpec& spec,
                             const Weights& weights);

/// Tail convs followed by the BEV detector. Takes only voxel features.
std::vector<Detection> run_tail(const SparseFeatureTensor& fused, const NetworkSpec& spec,
                                const Weights& weights);

/// Monolithic forward pass over [head] + tail with no split.
std::vector<Detection> run_unsplit(const PointCloud& cloud, const NetworkSpec& spec,
                                   const Weights& weights);

/// BEV per-column max of the score channel, threshold, 8-connected
/// components, one box per component.
std::vector<Detection> detect_bev(const SparseFeatureTensor& scores, int score_channel,
                                  double threshold);

/// Same forward pass as run_tail but also reports the per-layer MAC counts.
std::vector<Detection> run_tail_counted(const SparseFeatureTensor& fused, const NetworkSpec& spec,
                                        const Weights& weights, std::vector<std::uint64_t>* macs);

nlohmann::json grid_to_json(const GridSpec& g);
GridSpec grid_from_json(const nlohmann::json& j);

/// Spec and weights as one document; arrays are base64 little-endian f32.
nlohmann::json network_to_json(const NetworkSpec& spec, const Weights& weights);
void network_from_json(const nlohmann::json& j, NetworkSpec* spec, Weights* weights);

std::string encode_floats_base64(const std::vector<float>& values);
std::vector<float> decode_floats_base64(const std::string& text);

nlohmann::json detection_to_json(const Detection& d);
Detection detection_from_json(const nlohmann::json& j);

}  // namespace scmii
