#pragma once

#include <chrono>
#include <cstdint>
#include <map>
#include <mutex>
#include <optional>
#include <random>
#include <set>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "scmii/fusion.hpp"
#include "scmii/geometry.hpp"
#include "scmii/model.hpp"
#include "scmii/pointcloud.hpp"
#include "scmii/protocol.hpp"
#include "scmii/sparse.hpp"

namespace scmii {

/// One-way link between an edge device and the server.
struct LinkModel {
  double latency_ms = 0.2;
  double bandwidth_mbps = 1000.0;
  double jitter_ms = 0.0;  // uniform in [0, jitter_ms]
  double corruption_probability = 0.0;
  std::uint64_t seed = 1;

  /// latency + bytes * 8 / bandwidth, without jitter.
  double transfer_ms(std::size_t bytes) const;
  void validate() const;
};

/// Parametric compute model. Throughputs may be +inf to make a stage free.
/// The edge default is an effective sparse-conv rate for an embedded GPU
/// board, well below its dense peak because gathers dominate.
struct CostModel {
  double edge_macs_per_s = 1e10;
  double server_macs_per_s = 2e11;  // 20x the edge
  double layer_overhead_ms = 0.1;   // per conv layer, either role
  double voxelize_macs_per_point = 8.0;
  double transform_macs_per_entry = 16.0;
  double edge_serialize_mb_per_s = 500.0;
  double server_serialize_mb_per_s = 2000.0;

  void validate() const;
};

/// Holds per-frame tensors until every expected device has delivered or the
/// timeout since the frame's first arrival elapses. Thread-safe.
class FrameBarrier {
 public:
  struct Released {
    std::uint64_t frame_id = 0;
    std::map<int, SparseFeatureTensor> tensors;  // by device id
    bool complete = false;
    double first_arrival_ms = 0.0;
    double release_ms = 0.0;
  };

  FrameBarrier(std::vector<int> expected_devices, double timeout_ms = 100.0);

  /// Records an arrival at time `now_ms`. Returns the frame when this
  /// arrival completes it, or when the frame had already timed out (then
  /// this arrival is counted late and not included).
  std::optional<Released> arrive(int device_id, std::uint64_t frame_id, SparseFeatureTensor tensor,
                                 double now_ms);

  /// Releases every pending frame whose deadline is at or before `now_ms`,
  /// in frame id order.
  std::vector<Released> poll(double now_ms);

  /// Releases everything still pending as incomplete.
  std::vector<Released> flush(double now_ms);

  /// Earliest pending deadline, if any.
  std::optional<double> next_deadline() const;

  std::size_t pending() const;
  std::uint64_t duplicates() const;
  std::uint64_t late_arrivals() const;
  std::uint64_t unknown_devices() const;
  double timeout_ms() const { return timeout_ms_; }
  const std::vector<int>& expected() const { return expected_; }

 private:
  struct Pending {
    std::map<int, SparseFeatureTensor> tensors;
    double first_arrival_ms = 0.0;
  };
  Released release_locked(std::uint64_t frame_id, double now_ms);

  std::vector<int> expected_;
  double timeout_ms_;
  mutable std::mutex mu_;
  std::map<std::uint64_t, Pending> pending_;
  std::set<std::uint64_t> released_;
  std::uint64_t duplicates_ = 0;
  std::uint64_t late_ = 0;
  std::uint64_t unknown_ = 0;
};

/// Server-side hand-off of one decoded FEATURE message.
std::optional<FrameBarrier::Released> server_collect(FrameBarrier& barrier, FeatureMessage msg,
                                                     double now_ms);

class TransportError : public std::runtime_error {
 public:
  TransportError(const std::string& what, std::uint64_t frame_id)
      : std::runtime_error(what), frame_id_(frame_id) {}
  std::uint64_t frame_id() const { return frame_id_; }

 private:
  std::uint64_t frame_id_;
};

/// Carries whole protocol frames.
class Transport {
 public:
  virtual ~Transport() = default;
  virtual void send(std::span<const std::uint8_t> frame) = 0;
  virtual void close() = 0;
  virtual bool closed() const = 0;
};

/// In-process link that records each frame with its modeled delivery delay
/// and may flip one bit per frame with the configured probability.
class SimulatedLink : public Transport {
 public:
  struct Delivery {
    std::vector<std::uint8_t> bytes;
    double delay_ms = 0.0;
    bool corrupted = false;
  };

  explicit SimulatedLink(LinkModel model);
  void send(std::span<const std::uint8_t> frame) override;
  void close() override { closed_ = true; }
  bool closed() const override { return closed_; }

  /// Delivered frames in send order; clears the queue.
  std::vector<Delivery> drain();
  const LinkModel& model() const { return model_; }

 private:
  LinkModel model_;
  std::mt19937_64 rng_;
  std::vector<Delivery> queue_;
  bool closed_ = false;
};

/// Blocking TCP stream transport.
class TcpTransport : public Transport {
 public:
  explicit TcpTransport(int fd) : fd_(fd) {}
  ~TcpTransport() override;
  TcpTransport(const TcpTransport&) = delete;
  TcpTransport& operator=(const TcpTransport&) = delete;

  /// Connects to "host:port", retrying until `timeout_ms` elapses.
  static std::unique_ptr<TcpTransport> connect(const std::string& host_port, int timeout_ms);

  void send(std::span<const std::uint8_t> frame) override;
  void close() override;
  bool closed() const override { return fd_ < 0; }

  /// Reads up to `max` bytes; empty on orderly shutdown.
  std::vector<std::uint8_t> receive(std::size_t max = 1 << 16);
  /// Next full frame from the stream, nullopt on EOF.
  std::optional<DecodeResult> receive_frame();
  int fd() const { return fd_; }

 private:
  int fd_;
  FrameReader reader_;
};

/// Bound, listening TCP socket.
class TcpListener {
 public:
  explicit TcpListener(const std::string& host_port);
  ~TcpListener();
  TcpListener(const TcpListener&) = delete;
  TcpListener& operator=(const TcpListener&) = delete;

  std::unique_ptr<TcpTransport> accept();
  int port() const { return port_; }

 private:
  int fd_ = -1;
  int port_ = 0;
};

/// Splits "host:port"; throws std::invalid_argument when malformed.
std::pair<std::string, int> parse_host_port(const std::string& s);

/// run_head, encode, send. Returns the frame size in bytes. Send failures
/// are rethrown as TransportError carrying the frame id.
std::size_t edge_step(const PointCloud& cloud, const NetworkSpec& spec, const Weights& weights,
                      std::uint16_t device_id, std::uint64_t frame_id, std::uint64_t timestamp_us,
                      Transport& transport);

/// Per-device calibration: device id -> transform into the reference frame.
struct Calibration {
  int reference_device = 0;
  std::map<int, RigidTransform> transforms;

  const RigidTransform& at(int device) const;
  nlohmann::json to_json() const;
  static Calibration from_json(const nlohmann::json& j);
};

/// Aligns every released tensor (reference gets identity), fuses in
/// cfg.device_order (absent devices as empty tensors) and runs the tail.
std::vector<Detection> server_infer(const std::map<int, SparseFeatureTensor>& tensors,
                                    const Calibration& calibration, const FusionConfig& cfg,
                                    const NetworkSpec& spec, const Weights& weights);

/// The fused tensor server_infer feeds to the tail.
SparseFeatureTensor server_fuse(const std::map<int, SparseFeatureTensor>& tensors,
                                const Calibration& calibration, const FusionConfig& cfg);

struct FrameTiming {
  std::uint64_t frame_id = 0;
  std::vector<double> edge_ms;      // per device in device order
  std::vector<double> transfer_ms;  // per device; negative when not delivered
  double wait_ms = 0.0;
  double fusion_ms = 0.0;
  double tail_ms = 0.0;
  double total_ms = 0.0;
  double baseline_ms = 0.0;
  bool complete = true;

  double speedup() const { return total_ms > 0.0 ? baseline_ms / total_ms : 0.0; }
};

struct TimingReport {
  std::vector<int> devices;
  std::vector<FrameTiming> frames;
  bool measured = false;  // wall-clock (sockets) instead of modeled

  double mean_speedup() const;
  double max_speedup() const;
  double mean_total_ms() const;
  double mean_baseline_ms() const;
  /// Mean over frames of (max per-device edge time) / baseline total.
  double mean_edge_fraction() const;

  nlohmann::json to_json() const;
  static TimingReport from_json(const nlohmann::json& j);
  std::string to_table() const;
  std::string to_csv() const;
};

struct SimulationOptions {
  double timeout_ms = 100.0;
  double frame_period_ms = 100.0;
  /// Edge-only baseline: raw clouds already on the host device (no transfer).
  bool baseline_colocated = false;
  /// Include the edge-only baseline column (costs one unsplit pass per frame).
  bool with_baseline = true;
};

struct SimulationResult {
  TimingReport timing;
  std::vector<std::vector<Detection>> detections;  // per frame
  std::vector<bool> complete;
  std::uint64_t corrupted_frames = 0;
};

/// Virtual-clock discrete-event run of the full pipeline over simulated
/// links. frames[f][d] is device d's local cloud at frame f; devices are
/// cfg.device_order. Detections are computed by the real forward passes.
SimulationResult simulate_pipeline(const std::vector<std::vector<PointCloud>>& frames,
                                   const Calibration& calibration, const NetworkSpec& spec,
                                   const Weights& weights, const FusionConfig& cfg,
                                   const LinkModel& link, const CostModel& cost,
                                   const SimulationOptions& options = {});

/// Modeled times used by simulate_pipeline, exposed for closed-form tests.
double conv_time_ms(std::uint64_t macs, double macs_per_s, double overhead_ms);
double serialize_ms(std::size_t bytes, double mb_per_s);

/// Edge-only baseline detections and MAC count: merge calibrated clouds in
/// the reference frame and run the unsplit model.
std::vector<Detection> run_input_fusion(const std::vector<PointCloud>& clouds,
                                        const std::vector<int>& devices,
                                        const Calibration& calibration, const NetworkSpec& spec,
                                        const Weights& weights, std::uint64_t* macs = nullptr,
                                        std::size_t* voxelized_points = nullptr);

}  // namespace scmii
