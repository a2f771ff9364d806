#pragma once

#include <zlib.h>

#include <cstdint>
#include <cstring>
#include <vector>

#include "scmii/protocol.hpp"
#include "test_support.hpp"

namespace scmii::testing {

using Bytes = std::vector<std::uint8_t>;

// Rewrites the trailing CRC so a mutated body reaches the message parser.
inline void reseal(Bytes& frame) {
  if (frame.size() < kFrameOverhead) return;
  const std::uint32_t crc =
      static_cast<std::uint32_t>(crc32(0L, frame.data() + 4, static_cast<uInt>(frame.size() - 8)));
  std::memcpy(frame.data() + frame.size() - 4, &crc, 4);
}

inline FeatureMessage small_feature() {
  GridSpec g;
  g.origin = Eigen::Vector3d(0.0, -1.5, 2.25);
  g.voxel_size = Eigen::Vector3d(0.5, 0.5, 0.25);
  g.dims = {8, 4, 2};
  g.stride = 2;
  TensorBuilder b(g, 2);
  b.set({7, 3, 1}, std::vector<float>{-0.0f, 3.5f});
  b.set({3, 1, 0}, std::vector<float>{0.5f, -1.0f});
  b.set({0, 2, 0}, std::vector<float>{2.0f, 0.25f});
  FeatureMessage m;
  m.device_id = 1;
  m.frame_id = 42;
  m.timestamp_us = 123456789;
  m.tensor = std::move(b).build();
  return m;
}

inline FeatureMessage random_feature(Gen& gen) {
  GridSpec g = gen.grid(20, gen.coin() ? 1 : 2);
  FeatureMessage m;
  m.device_id = static_cast<std::uint16_t>(gen.integer(0, 65535));
  m.frame_id = gen.rng()();
  m.timestamp_us = gen.rng()();
  m.tensor = gen.sparse_tensor(g, gen.integer(1, 8), gen.integer(0, 60));
  return m;
}

// Rounds each component through f32, the wire precision of detections.
inline Eigen::Vector3d f32(const Eigen::Vector3d& v) {
  return {static_cast<float>(v.x()), static_cast<float>(v.y()), static_cast<float>(v.z())};
}

inline Message random_message(Gen& gen) {
  switch (gen.integer(0, 3)) {
    case 0:
      return HelloMessage{static_cast<std::uint16_t>(gen.integer(0, 65535)),
                          static_cast<std::uint16_t>(gen.integer(1, 512))};
    case 1:
      return ByeMessage{static_cast<std::uint16_t>(gen.integer(0, 65535))};
    case 2: {
      ResultMessage r;
      r.frame_id = gen.rng()();
      r.complete = gen.coin();
      for (int i = gen.integer(0, 10); i > 0; --i) {
        Detection d;
        // Values representable in f32 so the round trip is exact.
        d.center = f32(gen.vec(-50, 50));
        d.size = f32(gen.vec(0.1, 5));
        d.score = static_cast<float>(gen.uniform(0, 1));
        r.detections.push_back(d);
      }
      return r;
    }
    default:
      return random_feature(gen);
  }
}

inline bool same_message(const Message& a, const Message& b) {
  if (a.index() != b.index()) return false;
  if (const auto* ra = std::get_if<ResultMessage>(&a)) {
    const auto& rb = std::get<ResultMessage>(b);
    return ra->frame_id == rb.frame_id && ra->complete == rb.complete &&
           ra->detections == rb.detections;
  }
  if (const auto* fa = std::get_if<FeatureMessage>(&a)) return *fa == std::get<FeatureMessage>(b);
  if (const auto* ha = std::get_if<HelloMessage>(&a)) return *ha == std::get<HelloMessage>(b);
  return std::get<ByeMessage>(a) == std::get<ByeMessage>(b);
}

}  // namespace scmii::testing
