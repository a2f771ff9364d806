#include "scmii/roles.hpp"

#include <spdlog/spdlog.h>

#include <chrono>
#include <condition_variable>
#include <deque>
#include <memory>
#include <mutex>
#include <thread>

namespace scmii {
namespace {

double now_ms() {
  using namespace std::chrono;
  return duration<double, std::milli>(steady_clock::now().time_since_epoch()).count();
}

std::uint64_t wall_us() {
  using namespace std::chrono;
  return static_cast<std::uint64_t>(
      duration_cast<microseconds>(system_clock::now().time_since_epoch()).count());
}

}  // namespace

ServerRoleResult run_server_role(TcpListener& listener, const Calibration& calibration,
                                 const FusionConfig& cfg, const NetworkSpec& spec,
                                 const Weights& weights, double timeout_ms) {
  const std::vector<int>& devices = cfg.device_order;
  FrameBarrier barrier(devices, timeout_ms);
  ServerRoleResult result;
  result.timing.devices = devices;
  result.timing.measured = true;

  std::mutex mu;  // guards queue, finished count, decode_errors
  std::condition_variable cv;
  std::deque<FrameBarrier::Released> ready;
  std::size_t finished = 0;
  std::mutex send_mu;

  std::vector<std::unique_ptr<TcpTransport>> conns;
  for (std::size_t i = 0; i < devices.size(); ++i) {
    conns.push_back(listener.accept());
    spdlog::info("edge connection {}/{} accepted", i + 1, devices.size());
  }

  auto reader = [&](TcpTransport* conn) {
    while (true) {
      std::optional<DecodeResult> r;
      try {
        r = conn->receive_frame();
      } catch (const std::exception& e) {
        spdlog::warn("connection read failed: {}", e.what());
      }
      if (!r) break;
      if (const auto* err = std::get_if<DecodeError>(&*r)) {
        spdlog::warn("dropping stream after decode error ({}): {}", to_string(err->kind),
                     err->detail);
        std::lock_guard<std::mutex> lock(mu);
        ++result.decode_errors;
        break;
      }
      Message& m = std::get<Message>(*r);
      if (auto* f = std::get_if<FeatureMessage>(&m)) {
        if (auto rel = server_collect(barrier, std::move(*f), now_ms())) {
          std::lock_guard<std::mutex> lock(mu);
          ready.push_back(std::move(*rel));
          cv.notify_one();
        }
      } else if (auto* h = std::get_if<HelloMessage>(&m)) {
        spdlog::info("device {} registered ({} channels)", h->device_id, h->channels);
      } else if (std::holds_alternative<ByeMessage>(m)) {
        break;
      }
    }
    std::lock_guard<std::mutex> lock(mu);
    ++finished;
    cv.notify_one();
  };

  std::vector<std::thread> threads;
  for (auto& c : conns) threads.emplace_back(reader, c.get());

  auto infer = [&](FrameBarrier::Released& rel) {
    const double start = now_ms();
    const SparseFeatureTensor fused = server_fuse(rel.tensors, calibration, cfg);
    const double fused_at = now_ms();
    std::vector<Detection> dets = run_tail(fused, spec, weights);
    const double end = now_ms();
    FrameTiming ft;
    ft.frame_id = rel.frame_id;
    ft.wait_ms = start - rel.first_arrival_ms;
    ft.fusion_ms = fused_at - start;
    ft.tail_ms = end - fused_at;
    ft.total_ms = end - rel.first_arrival_ms;
    ft.complete = rel.complete;
    result.timing.frames.push_back(ft);

    const std::vector<std::uint8_t> bytes = encode_result({rel.frame_id, rel.complete, dets});
    {
      std::lock_guard<std::mutex> lock(send_mu);
      for (auto& c : conns) {
        try {
          c->send(bytes);
        } catch (const std::exception& e) {
          spdlog::debug("RESULT not delivered: {}", e.what());
        }
      }
    }
    result.detections[rel.frame_id] = std::move(dets);
    result.complete[rel.frame_id] = rel.complete;
  };

  while (true) {
    std::deque<FrameBarrier::Released> batch;
    bool all_done = false;
    {
      std::unique_lock<std::mutex> lock(mu);
      const auto deadline = barrier.next_deadline();
      auto pred = [&] { return !ready.empty() || finished == conns.size(); };
      if (deadline) {
        const double wait = std::max(0.0, *deadline - now_ms());
        cv.wait_for(lock, std::chrono::duration<double, std::milli>(wait), pred);
      } else {
        cv.wait(lock, pred);
      }
      batch.swap(ready);
      all_done = finished == conns.size();
    }
    for (auto& r : barrier.poll(now_ms())) batch.push_back(std::move(r));
    if (all_done) {
      for (auto& r : barrier.flush(now_ms())) batch.push_back(std::move(r));
    }
    for (auto& r : batch) infer(r);
    if (all_done && barrier.pending() == 0) {
      std::lock_guard<std::mutex> lock(mu);
      if (ready.empty()) break;
    }
  }
  for (auto& t : threads) t.join();
  for (auto& c : conns) c->close();
  result.duplicates = barrier.duplicates();
  result.late_arrivals = barrier.late_arrivals();
  std::sort(result.timing.frames.begin(), result.timing.frames.end(),
            [](const FrameTiming& a, const FrameTiming& b) { return a.frame_id < b.frame_id; });
  return result;
}

EdgeRoleResult run_edge_role(const std::string& connect, std::uint16_t device_id,
                             const std::vector<PointCloud>& frames, const NetworkSpec& spec,
                             const Weights& weights, int connect_timeout_ms) {
  auto conn = TcpTransport::connect(connect, connect_timeout_ms);
  EdgeRoleResult result;
  conn->send(
      encode_message(HelloMessage{device_id, static_cast<std::uint16_t>(spec.feature_channels())}));
  for (std::size_t f = 0; f < frames.size(); ++f) {
    try {
      result.bytes_sent += edge_step(frames[f], spec, weights, device_id, f, wall_us(), *conn);
      ++result.frames_sent;
    } catch (const TransportError& e) {
      spdlog::warn("frame {}: {}", e.frame_id(), e.what());
      result.dropped_frames.push_back(e.frame_id());
    }
  }
  try {
    conn->send(encode_message(ByeMessage{device_id}));
    while (auto r = conn->receive_frame()) {
      if (const auto* m = std::get_if<Message>(&*r)) {
        if (std::holds_alternative<ResultMessage>(*m)) ++result.results_received;
      } else {
        break;
      }
    }
  } catch (const std::exception& e) {
    spdlog::warn("connection closed early: {}", e.what());
  }
  conn->close();
  return result;
}

}  // namespace scmii
