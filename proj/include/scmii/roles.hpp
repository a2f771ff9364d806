#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "scmii/fusion.hpp"
#include "scmii/model.hpp"
#include "scmii/runtime.hpp"

namespace scmii {

struct ServerRoleResult {
  std::map<std::uint64_t, std::vector<Detection>> detections;  // by frame id
  std::map<std::uint64_t, bool> complete;
  TimingReport timing;  // wall-clock, measured = true
  std::uint64_t duplicates = 0;
  std::uint64_t late_arrivals = 0;
  std::uint64_t decode_errors = 0;
};

/// Accepts one connection per expected device, feeds every FEATURE frame
/// through the barrier on the wall clock, runs server_infer per released
/// frame and answers each edge with a RESULT. Returns once every device has
/// said BYE or disconnected and all frames are released.
ServerRoleResult run_server_role(TcpListener& listener, const Calibration& calibration,
                                 const FusionConfig& cfg, const NetworkSpec& spec,
                                 const Weights& weights, double timeout_ms);

struct EdgeRoleResult {
  std::size_t frames_sent = 0;
  std::size_t bytes_sent = 0;
  std::size_t results_received = 0;
  std::vector<std::uint64_t> dropped_frames;
};

/// HELLO, one FEATURE per cloud (frame id = position), BYE, then drains
/// RESULT frames until the server closes.
EdgeRoleResult run_edge_role(const std::string& connect, std::uint16_t device_id,
                             const std::vector<PointCloud>& frames, const NetworkSpec& spec,
                             const Weights& weights, int connect_timeout_ms = 10000);

}  // namespace scmii
