#include "scmii/model.hpp"

#include <sodium.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <map>
#include <random>
#include <stdexcept>

namespace scmii {
namespace {

static_assert(std::endian::native == std::endian::little,
              "weight and wire encodings assume a little-endian host");

// Offsets o along one axis that map input x onto output y = x / 2 for a
// k3 s2 layer: x = 2y + o - 1 with x in {2y, 2y + 1}.
constexpr bool is_own_block_tap(int o) { return o == 1 || o == 2; }

void check_layer(const ConvKernel& k, const LayerSpec& expected, const char* what) {
  if (!(k.shape == expected)) throw std::invalid_argument(std::string(what) + " shape mismatch");
  k.validate();
}

void check_weights(const NetworkSpec& spec, const Weights& w) {
  check_layer(w.head, spec.head, "head kernel");
  if (w.tail.size() != spec.tail.size()) {
    throw std::invalid_argument("tail kernel count does not match network spec");
  }
  for (std::size_t i = 0; i < w.tail.size(); ++i)
    check_layer(w.tail[i], spec.tail[i], "tail kernel");
}

nlohmann::json layer_to_json(const ConvKernel& k) {
  return {{"kernel_size", k.shape.kernel_size},
          {"stride", k.shape.stride},
          {"in_channels", k.shape.in_channels},
          {"out_channels", k.shape.out_channels},
          {"relu", k.shape.relu},
          {"weights", encode_floats_base64(k.weights)},
          {"bias", encode_floats_base64(k.bias)}};
}

ConvKernel layer_from_json(const nlohmann::json& j) {
  LayerSpec s;
  s.kernel_size = j.at("kernel_size").get<int>();
  s.stride = j.at("stride").get<int>();
  s.in_channels = j.at("in_channels").get<int>();
  s.out_channels = j.at("out_channels").get<int>();
  s.relu = j.at("relu").get<bool>();
  s.validate();
  ConvKernel k(s);
  k.weights = decode_floats_base64(j.at("weights").get<std::string>());
  k.bias = decode_floats_base64(j.at("bias").get<std::string>());
  k.validate();
  return k;
}

}  // namespace

void NetworkSpec::validate() const {
  input.validate();
  if (input.stride != 1) throw std::invalid_argument("network input grid must have stride 1");
  head.validate();
  if (head.in_channels != kVoxelChannels) {
    throw std::invalid_argument("head conv must take the 4 voxel channels");
  }
  int channels = head.out_channels;
  for (const LayerSpec& l : tail) {
    l.validate();
    if (l.in_channels != channels) throw std::invalid_argument("tail channel chain is broken");
    channels = l.out_channels;
  }
  if (!(bev_threshold > 0.0 && bev_threshold < 1.0)) {
    throw std::invalid_argument("BEV threshold must be in (0, 1)");
  }
  if (score_channel < 0 || score_channel >= channels) {
    throw std::invalid_argument("score channel out of range");
  }
}

NetworkSpec default_network_spec() {
  NetworkSpec s;
  s.input.origin = Eigen::Vector3d(-32.0, -32.0, -3.9);
  s.input.voxel_size = Eigen::Vector3d::Constant(0.2);
  s.input.dims = {320, 320, 12};
  s.input.stride = 1;
  s.head = LayerSpec{3, 1, kVoxelChannels, 16, true};
  s.tail = {LayerSpec{3, 2, 16, 32, true}, LayerSpec{3, 1, 32, 32, true}};
  return s;
}

std::string to_string(InitMode mode) {
  return mode == InitMode::kSeededRandom ? "seeded-random" : "identity-preserving";
}

InitMode init_mode_from_string(const std::string& s) {
  if (s == "seeded-random") return InitMode::kSeededRandom;
  if (s == "identity-preserving") return InitMode::kIdentityPreserving;
  throw std::invalid_argument("unknown init mode '" + s + "'");
}

void init_kernel(ConvKernel& kernel, std::uint64_t seed, InitMode mode, float gain) {
  const LayerSpec& L = kernel.shape;
  kernel = ConvKernel(L);
  if (mode == InitMode::kSeededRandom) {
    const double fan_in =
        static_cast<double>(L.kernel_size * L.kernel_size * L.kernel_size) * L.in_channels;
    const float bound = static_cast<float>(1.0 / std::sqrt(fan_in));
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<float> dist(-bound, bound);
    for (float& w : kernel.weights) w = std::clamp(dist(rng), -bound, bound);
    for (float& b : kernel.bias) b = std::clamp(dist(rng), -bound, bound);
    return;
  }

  // Identity-preserving: each output channel receives the input channel
  // average times `gain`, through self taps only.
  const int k = L.kernel_size;
  const float per_channel = gain / static_cast<float>(L.in_channels);
  for (int oz = 0; oz < k; ++oz) {
    for (int oy = 0; oy < k; ++oy) {
      for (int ox = 0; ox < k; ++ox) {
        bool self;
        if (L.stride == 1) {
          self = ox == k / 2 && oy == k / 2 && oz == k / 2;
        } else if (k == 3) {
          self = is_own_block_tap(ox) && is_own_block_tap(oy) && is_own_block_tap(oz);
        } else {
          self = true;  // k1 s2 sees only x = 2y
        }
        if (!self) continue;
        const int off = ConvKernel::flat_offset(ox, oy, oz, k);
        for (int ci = 0; ci < L.in_channels; ++ci) {
          for (int co = 0; co < L.out_channels; ++co) kernel.w(off, ci, co) = per_channel;
        }
      }
    }
  }
}

Weights init_weights(const NetworkSpec& spec, std::uint64_t seed, InitMode mode) {
  spec.validate();
  Weights w;
  w.seed = seed;
  w.mode = mode;
  w.head = ConvKernel(spec.head);
  if (mode == InitMode::kIdentityPreserving) {
    // The head reads only the occupancy channel; offsets carry no evidence.
    const int c = spec.head.kernel_size / 2;
    const int off = ConvKernel::flat_offset(c, c, c, spec.head.kernel_size);
    for (int co = 0; co < spec.head.out_channels; ++co) {
      w.head.w(off, kOccupancyChannel, co) = 1.0f;
    }
  } else {
    init_kernel(w.head, seed, mode);
  }
  for (std::size_t i = 0; i < spec.tail.size(); ++i) {
    ConvKernel k(spec.tail[i]);
    const bool last = i + 1 == spec.tail.size();
    init_kernel(k, seed + 1 + i, mode, last ? kIdentityOutputGain : 1.0f);
    w.tail.push_back(std::move(k));
  }
  return w;
}

SparseFeatureTensor run_head(const PointCloud& cloud, const NetworkSpec& spec,
                             const Weights& weights) {
  check_layer(weights.head, spec.head, "head kernel");
  return sparse_conv(voxelize(cloud, spec.input), weights.head);
}

std::vector<Detection> run_tail_counted(const SparseFeatureTensor& fused, const NetworkSpec& spec,
                                        const Weights& weights, std::vector<std::uint64_t>* macs) {
  check_weights(spec, weights);
  if (!(fused.grid() == spec.head_output_grid()) || fused.channels() != spec.feature_channels()) {
    throw TensorError("tail input does not match the head output grid or channel count");
  }
  SparseFeatureTensor x = fused;
  for (const ConvKernel& k : weights.tail) {
    x = sparse_conv(x, k);
    if (macs != nullptr) macs->push_back(conv_macs(k.shape, x.size()));
  }
  return detect_bev(x, spec.score_channel, spec.bev_threshold);
}

std::vector<Detection> run_tail(const SparseFeatureTensor& fused, const NetworkSpec& spec,
                                const Weights& weights) {
  return run_tail_counted(fused, spec, weights, nullptr);
}

std::vector<Detection> run_unsplit(const PointCloud& cloud, const NetworkSpec& spec,
                                   const Weights& weights) {
  check_weights(spec, weights);
  SparseFeatureTensor x = voxelize(cloud, spec.input);
  x = sparse_conv(x, weights.head);
  for (const ConvKernel& k : weights.tail) x = sparse_conv(x, k);
  return detect_bev(x, spec.score_channel, spec.bev_threshold);
}

std::vector<Detection> detect_bev(const SparseFeatureTensor& scores, int score_channel,
                                  double threshold) {
  if (score_channel < 0 || score_channel >= scores.channels()) {
    throw TensorError("score channel out of range");
  }
  // Column maxima keyed by (y, x) so iteration is row-major and stable.
  std::map<std::pair<std::int32_t, std::int32_t>, float> bev;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    const VoxelIndex v = scores.index(i);
    const float s = scores.features(i)[score_channel];
    auto [it, fresh] = bev.try_emplace({v[1], v[0]}, s);
    if (!fresh) it->second = std::max(it->second, s);
  }

  std::map<std::pair<std::int32_t, std::int32_t>, int> label;
  for (const auto& [cell, s] : bev) {
    if (s >= threshold) label.emplace(cell, -1);
  }
  std::vector<std::vector<std::pair<std::int32_t, std::int32_t>>> components;
  for (auto& [cell, id] : label) {
    if (id >= 0) continue;
    const int cid = static_cast<int>(components.size());
    components.emplace_back();
    std::vector<std::pair<std::int32_t, std::int32_t>> stack{cell};
    id = cid;
    while (!stack.empty()) {
      const auto c = stack.back();
      stack.pop_back();
      components[cid].push_back(c);
      for (int dy = -1; dy <= 1; ++dy) {
        for (int dx = -1; dx <= 1; ++dx) {
          if (dx == 0 && dy == 0) continue;
          auto n = label.find({c.first + dy, c.second + dx});
          if (n != label.end() && n->second < 0) {
            n->second = cid;
            stack.push_back(n->first);
          }
        }
      }
    }
  }

  // Extents of the contributing voxels: those at or above threshold in the
  // component's columns.
  const GridSpec& g = scores.grid();
  const Eigen::Vector3d half = g.effective_voxel_size() / 2.0;
  std::vector<Eigen::Vector3d> lo(components.size(), Eigen::Vector3d::Constant(HUGE_VAL));
  std::vector<Eigen::Vector3d> hi(components.size(), Eigen::Vector3d::Constant(-HUGE_VAL));
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (scores.features(i)[score_channel] < threshold) continue;
    const VoxelIndex v = scores.index(i);
    const auto it = label.find({v[1], v[0]});
    if (it == label.end()) continue;
    const Eigen::Vector3d c = g.center(v);
    lo[it->second] = lo[it->second].cwiseMin(c);
    hi[it->second] = hi[it->second].cwiseMax(c);
  }

  std::vector<Detection> out;
  out.reserve(components.size());
  for (std::size_t c = 0; c < components.size(); ++c) {
    double sum = 0.0;
    for (const auto& cell : components[c]) sum += bev.at(cell);
    Detection d;
    const Eigen::Vector3d a = lo[c] - half;
    const Eigen::Vector3d b = hi[c] + half;
    d.center = (a + b) / 2.0;
    d.size = b - a;
    d.score = std::clamp(sum / static_cast<double>(components[c].size()), 0.0, 1.0);
    d.class_id = 0;
    out.push_back(d);
  }
  return out;
}

nlohmann::json grid_to_json(const GridSpec& g) {
  return {{"origin", {g.origin.x(), g.origin.y(), g.origin.z()}},
          {"voxel_size", {g.voxel_size.x(), g.voxel_size.y(), g.voxel_size.z()}},
          {"dims", {g.dims[0], g.dims[1], g.dims[2]}},
          {"stride", g.stride}};
}

GridSpec grid_from_json(const nlohmann::json& j) {
  GridSpec g;
  const auto o = j.at("origin").get<std::array<double, 3>>();
  const auto v = j.at("voxel_size").get<std::array<double, 3>>();
  g.origin = Eigen::Vector3d(o[0], o[1], o[2]);
  g.voxel_size = Eigen::Vector3d(v[0], v[1], v[2]);
  g.dims = j.at("dims").get<std::array<std::int32_t, 3>>();
  g.stride = j.value("stride", 1);
  g.validate();
  return g;
}

nlohmann::json network_to_json(const NetworkSpec& spec, const Weights& weights) {
  spec.validate();
  check_weights(spec, weights);
  nlohmann::json tail = nlohmann::json::array();
  for (const ConvKernel& k : weights.tail) tail.push_back(layer_to_json(k));
  return {{"grid", grid_to_json(spec.input)},
          {"bev_threshold", spec.bev_threshold},
          {"score_channel", spec.score_channel},
          {"seed", weights.seed},
          {"mode", to_string(weights.mode)},
          {"head", layer_to_json(weights.head)},
          {"tail", tail}};
}

void network_from_json(const nlohmann::json& j, NetworkSpec* spec, Weights* weights) {
  NetworkSpec s;
  Weights w;
  s.input = grid_from_json(j.at("grid"));
  s.bev_threshold = j.at("bev_threshold").get<double>();
  s.score_channel = j.at("score_channel").get<int>();
  w.seed = j.at("seed").get<std::uint64_t>();
  w.mode = init_mode_from_string(j.at("mode").get<std::string>());
  w.head = layer_from_json(j.at("head"));
  s.head = w.head.shape;
  for (const auto& l : j.at("tail")) {
    w.tail.push_back(layer_from_json(l));
    s.tail.push_back(w.tail.back().shape);
  }
  s.validate();
  *spec = std::move(s);
  *weights = std::move(w);
}

std::string encode_floats_base64(const std::vector<float>& values) {
  const std::size_t n = values.size() * sizeof(float);
  std::string out(sodium_base64_ENCODED_LEN(n, sodium_base64_VARIANT_ORIGINAL), '\0');
  sodium_bin2base64(out.data(), out.size(), reinterpret_cast<const unsigned char*>(values.data()),
                    n, sodium_base64_VARIANT_ORIGINAL);
  out.resize(std::strlen(out.c_str()));
  return out;
}

std::vector<float> decode_floats_base64(const std::string& text) {
  std::vector<unsigned char> bytes(text.size() / 4 * 3 + 3);
  std::size_t len = 0;
  if (sodium_base642bin(bytes.data(), bytes.size(), text.data(), text.size(), nullptr, &len,
                        nullptr, sodium_base64_VARIANT_ORIGINAL) != 0) {
    throw std::invalid_argument("malformed base64 float array");
  }
  if (len % sizeof(float) != 0) {
    throw std::invalid_argument("base64 float array length is not a multiple of 4");
  }
  std::vector<float> out(len / sizeof(float));
  std::memcpy(out.data(), bytes.data(), len);
  return out;
}

nlohmann::json detection_to_json(const Detection& d) {
  return {{"center", {d.center.x(), d.center.y(), d.center.z()}},
          {"size", {d.size.x(), d.size.y(), d.size.z()}},
          {"score", d.score},
          {"class", d.class_id}};
}

Detection detection_from_json(const nlohmann::json& j) {
  Detection d;
  const auto c = j.at("center").get<std::array<double, 3>>();
  const auto s = j.at("size").get<std::array<double, 3>>();
  d.center = Eigen::Vector3d(c[0], c[1], c[2]);
  d.size = Eigen::Vector3d(s[0], s[1], s[2]);
  d.score = j.at("score").get<double>();
  d.class_id = j.value("class", 0);
  return d;
}

}  // namespace scmii
