#include "scmii/runtime.hpp"

#include <netdb.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <spdlog/spdlog.h>
#include <sys/socket.h>
#include <unistd.h>

#include <algorithm>
#include <cerrno>
#include <cmath>
#include <cstring>
#include <iomanip>
#include <limits>
#include <sstream>
#include <thread>

namespace scmii {
namespace {

bool positive(double v) { return v > 0.0 && !std::isnan(v); }
bool non_negative(double v) { return v >= 0.0 && std::isfinite(v); }

std::string errno_text() { return std::strerror(errno); }

}  // namespace

double LinkModel::transfer_ms(std::size_t bytes) const {
  return latency_ms + static_cast<double>(bytes) * 8.0 / (bandwidth_mbps * 1e6) * 1e3;
}

void LinkModel::validate() const {
  if (!non_negative(latency_ms) || !non_negative(jitter_ms) || !positive(bandwidth_mbps) ||
      !(corruption_probability >= 0.0 && corruption_probability <= 1.0)) {
    throw std::invalid_argument(
        "link model needs latency, jitter >= 0, bandwidth > 0, corruption in [0, 1]");
  }
}

void CostModel::validate() const {
  if (!positive(edge_macs_per_s) || !positive(server_macs_per_s) ||
      !positive(edge_serialize_mb_per_s) || !positive(server_serialize_mb_per_s)) {
    throw std::invalid_argument("cost model throughputs must be > 0");
  }
  if (!non_negative(layer_overhead_ms) || !non_negative(voxelize_macs_per_point) ||
      !non_negative(transform_macs_per_entry)) {
    throw std::invalid_argument("cost model overheads must be >= 0");
  }
}

// ---------------------------------------------------------------------------
// Barrier

FrameBarrier::FrameBarrier(std::vector<int> expected_devices, double timeout_ms)
    : expected_(std::move(expected_devices)), timeout_ms_(timeout_ms) {
  std::sort(expected_.begin(), expected_.end());
  if (expected_.empty() ||
      std::adjacent_find(expected_.begin(), expected_.end()) != expected_.end()) {
    throw std::invalid_argument("barrier needs a non-empty set of distinct device ids");
  }
  if (!(timeout_ms_ > 0.0)) throw std::invalid_argument("barrier timeout must be > 0");
}

FrameBarrier::Released FrameBarrier::release_locked(std::uint64_t frame_id, double now_ms) {
  auto node = pending_.extract(frame_id);
  Released r;
  r.frame_id = frame_id;
  r.tensors = std::move(node.mapped().tensors);
  r.complete = r.tensors.size() == expected_.size();
  r.first_arrival_ms = node.mapped().first_arrival_ms;
  r.release_ms = now_ms;
  released_.insert(frame_id);
  return r;
}

std::optional<FrameBarrier::Released> FrameBarrier::arrive(int device_id, std::uint64_t frame_id,
                                                           SparseFeatureTensor tensor,
                                                           double now_ms) {
  std::lock_guard<std::mutex> lock(mu_);
  if (!std::binary_search(expected_.begin(), expected_.end(), device_id)) {
    ++unknown_;
    return std::nullopt;
  }
  if (released_.count(frame_id) != 0) {
    ++late_;
    return std::nullopt;
  }
  auto it = pending_.find(frame_id);
  if (it != pending_.end() && now_ms >= it->second.first_arrival_ms + timeout_ms_) {
    // The deadline passed before this arrival was seen.
    ++late_;
    return release_locked(frame_id, it->second.first_arrival_ms + timeout_ms_);
  }
  if (it == pending_.end()) {
    it = pending_.emplace(frame_id, Pending{{}, now_ms}).first;
  }
  if (!it->second.tensors.emplace(device_id, std::move(tensor)).second) {
    ++duplicates_;
    return std::nullopt;
  }
  if (it->second.tensors.size() == expected_.size()) return release_locked(frame_id, now_ms);
  return std::nullopt;
}

std::vector<FrameBarrier::Released> FrameBarrier::poll(double now_ms) {
  std::lock_guard<std::mutex> lock(mu_);
  std::vector<std::uint64_t> due;
  for (const auto& [id, p] : pending_) {
    if (p.first_arrival_ms + timeout_ms_ <= now_ms) due.push_back(id);
  }
  std::vector<Released> out;
  for (std::uint64_t id : due) {
    const double deadline = pending_.at(id).first_arrival_ms + timeout_ms_;
    out.push_back(release_locked(id, deadline));
  }
  return out;
}

std::vector<FrameBarrier::Released> FrameBarrier::flush(double now_ms) {
  std::lock_guard<std::mutex> lock(mu_);
  std::vector<Released> out;
  while (!pending_.empty()) out.push_back(release_locked(pending_.begin()->first, now_ms));
  return out;
}

std::optional<double> FrameBarrier::next_deadline() const {
  std::lock_guard<std::mutex> lock(mu_);
  std::optional<double> best;
  for (const auto& [id, p] : pending_) {
    const double d = p.first_arrival_ms + timeout_ms_;
    if (!best || d < *best) best = d;
  }
  return best;
}

std::size_t FrameBarrier::pending() const {
  std::lock_guard<std::mutex> lock(mu_);
  return pending_.size();
}
std::uint64_t FrameBarrier::duplicates() const {
  std::lock_guard<std::mutex> lock(mu_);
  return duplicates_;
}
std::uint64_t FrameBarrier::late_arrivals() const {
  std::lock_guard<std::mutex> lock(mu_);
  return late_;
}
std::uint64_t FrameBarrier::unknown_devices() const {
  std::lock_guard<std::mutex> lock(mu_);
  return unknown_;
}

std::optional<FrameBarrier::Released> server_collect(FrameBarrier& barrier, FeatureMessage msg,
                                                     double now_ms) {
  return barrier.arrive(msg.device_id, msg.frame_id, std::move(msg.tensor), now_ms);
}

// ---------------------------------------------------------------------------
// Transports

SimulatedLink::SimulatedLink(LinkModel model) : model_(model), rng_(model.seed) {
  model_.validate();
}

void SimulatedLink::send(std::span<const std::uint8_t> frame) {
  if (closed_) throw std::runtime_error("simulated link is closed");
  Delivery d;
  d.bytes.assign(frame.begin(), frame.end());
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  d.delay_ms = model_.transfer_ms(frame.size()) + model_.jitter_ms * unit(rng_);
  if (model_.corruption_probability > 0.0 && unit(rng_) < model_.corruption_probability &&
      !d.bytes.empty()) {
    std::uniform_int_distribution<std::size_t> pick(0, d.bytes.size() * 8 - 1);
    const std::size_t bit = pick(rng_);
    d.bytes[bit / 8] ^= static_cast<std::uint8_t>(1u << (bit % 8));
    d.corrupted = true;
  }
  queue_.push_back(std::move(d));
}

std::vector<SimulatedLink::Delivery> SimulatedLink::drain() {
  std::vector<Delivery> out;
  out.swap(queue_);
  return out;
}

std::pair<std::string, int> parse_host_port(const std::string& s) {
  const auto colon = s.rfind(':');
  if (colon == std::string::npos || colon + 1 >= s.size()) {
    throw std::invalid_argument("expected HOST:PORT, got '" + s + "'");
  }
  const std::string host = s.substr(0, colon);
  int port = 0;
  try {
    std::size_t used = 0;
    port = std::stoi(s.substr(colon + 1), &used);
    if (used != s.size() - colon - 1) throw std::invalid_argument("trailing");
  } catch (const std::exception&) {
    throw std::invalid_argument("bad port in '" + s + "'");
  }
  if (port < 0 || port > 65535) throw std::invalid_argument("port out of range in '" + s + "'");
  return {host.empty() ? "127.0.0.1" : host, port};
}

TcpTransport::~TcpTransport() { close(); }

void TcpTransport::close() {
  if (fd_ >= 0) {
    ::shutdown(fd_, SHUT_RDWR);
    ::close(fd_);
    fd_ = -1;
  }
}

std::unique_ptr<TcpTransport> TcpTransport::connect(const std::string& host_port, int timeout_ms) {
  const auto [host, port] = parse_host_port(host_port);
  addrinfo hints{};
  hints.ai_family = AF_INET;
  hints.ai_socktype = SOCK_STREAM;
  addrinfo* res = nullptr;
  const std::string port_str = std::to_string(port);
  if (const int rc = ::getaddrinfo(host.c_str(), port_str.c_str(), &hints, &res); rc != 0) {
    throw std::runtime_error("cannot resolve " + host + ": " + gai_strerror(rc));
  }
  const auto deadline = std::chrono::steady_clock::now() + std::chrono::milliseconds(timeout_ms);
  std::string last_error;
  while (true) {
    const int fd = ::socket(res->ai_family, res->ai_socktype, res->ai_protocol);
    if (fd < 0) {
      ::freeaddrinfo(res);
      throw std::runtime_error("socket(): " + errno_text());
    }
    if (::connect(fd, res->ai_addr, res->ai_addrlen) == 0) {
      ::freeaddrinfo(res);
      const int one = 1;
      ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof(one));
      return std::make_unique<TcpTransport>(fd);
    }
    last_error = errno_text();
    ::close(fd);
    if (std::chrono::steady_clock::now() >= deadline) break;
    std::this_thread::sleep_for(std::chrono::milliseconds(50));
  }
  ::freeaddrinfo(res);
  throw std::runtime_error("cannot connect to " + host_port + ": " + last_error);
}

void TcpTransport::send(std::span<const std::uint8_t> frame) {
  if (fd_ < 0) throw std::runtime_error("connection is closed");
  std::size_t sent = 0;
  while (sent < frame.size()) {
    const ssize_t n = ::send(fd_, frame.data() + sent, frame.size() - sent, MSG_NOSIGNAL);
    if (n < 0) {
      if (errno == EINTR) continue;
      throw std::runtime_error("send(): " + errno_text());
    }
    sent += static_cast<std::size_t>(n);
  }
}

std::vector<std::uint8_t> TcpTransport::receive(std::size_t max) {
  std::vector<std::uint8_t> buf(max);
  while (fd_ >= 0) {
    const ssize_t n = ::recv(fd_, buf.data(), buf.size(), 0);
    if (n < 0) {
      if (errno == EINTR) continue;
      throw std::runtime_error("recv(): " + errno_text());
    }
    buf.resize(static_cast<std::size_t>(n));
    return buf;
  }
  return {};
}

std::optional<DecodeResult> TcpTransport::receive_frame() {
  while (true) {
    if (auto r = reader_.next()) return r;
    const std::vector<std::uint8_t> chunk = receive();
    if (chunk.empty()) return std::nullopt;
    reader_.feed(chunk);
  }
}

TcpListener::TcpListener(const std::string& host_port) {
  const auto [host, port] = parse_host_port(host_port);
  fd_ = ::socket(AF_INET, SOCK_STREAM, 0);
  if (fd_ < 0) throw std::runtime_error("socket(): " + errno_text());
  const int one = 1;
  ::setsockopt(fd_, SOL_SOCKET, SO_REUSEADDR, &one, sizeof(one));
  addrinfo hints{};
  hints.ai_family = AF_INET;
  hints.ai_socktype = SOCK_STREAM;
  hints.ai_flags = AI_PASSIVE;
  addrinfo* res = nullptr;
  const std::string port_str = std::to_string(port);
  if (const int rc = ::getaddrinfo(host.c_str(), port_str.c_str(), &hints, &res); rc != 0) {
    ::close(fd_);
    throw std::runtime_error("cannot resolve " + host + ": " + gai_strerror(rc));
  }
  const int rc = ::bind(fd_, res->ai_addr, res->ai_addrlen);
  ::freeaddrinfo(res);
  if (rc != 0 || ::listen(fd_, 16) != 0) {
    const std::string err = errno_text();
    ::close(fd_);
    throw std::runtime_error("cannot listen on " + host_port + ": " + err);
  }
  sockaddr_in addr{};
  socklen_t len = sizeof(addr);
  ::getsockname(fd_, reinterpret_cast<sockaddr*>(&addr), &len);
  port_ = ntohs(addr.sin_port);
}

TcpListener::~TcpListener() {
  if (fd_ >= 0) ::close(fd_);
}

std::unique_ptr<TcpTransport> TcpListener::accept() {
  while (true) {
    const int fd = ::accept(fd_, nullptr, nullptr);
    if (fd >= 0) {
      const int one = 1;
      ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof(one));
      return std::make_unique<TcpTransport>(fd);
    }
    if (errno != EINTR) throw std::runtime_error("accept(): " + errno_text());
  }
}

// ---------------------------------------------------------------------------
// Roles

std::size_t edge_step(const PointCloud& cloud, const NetworkSpec& spec, const Weights& weights,
                      std::uint16_t device_id, std::uint64_t frame_id, std::uint64_t timestamp_us,
                      Transport& transport) {
  FeatureMessage msg{device_id, frame_id, timestamp_us, run_head(cloud, spec, weights)};
  const std::vector<std::uint8_t> bytes = encode_feature(msg);
  if (transport.closed()) throw TransportError("transport closed; frame dropped", frame_id);
  try {
    transport.send(bytes);
  } catch (const std::exception& e) {
    throw TransportError(std::string(e.what()) + "; frame dropped", frame_id);
  }
  return bytes.size();
}

const RigidTransform& Calibration::at(int device) const {
  static const RigidTransform kIdentity;
  const auto it = transforms.find(device);
  if (it != transforms.end()) return it->second;
  if (device == reference_device) return kIdentity;
  throw std::out_of_range("no calibration for device " + std::to_string(device));
}

nlohmann::json Calibration::to_json() const {
  nlohmann::json t = nlohmann::json::object();
  for (const auto& [id, tr] : transforms) t[std::to_string(id)] = tr.row_major();
  return {{"reference_device", reference_device}, {"transforms", t}};
}

Calibration Calibration::from_json(const nlohmann::json& j) {
  Calibration c;
  c.reference_device = j.at("reference_device").get<int>();
  for (const auto& [key, value] : j.at("transforms").items()) {
    std::size_t used = 0;
    const int id = std::stoi(key, &used);
    if (used != key.size())
      throw std::invalid_argument("calibration key '" + key + "' is not an id");
    c.transforms.emplace(id, RigidTransform::from_row_major(value.get<std::array<double, 16>>()));
  }
  return c;
}

SparseFeatureTensor server_fuse(const std::map<int, SparseFeatureTensor>& tensors,
                                const Calibration& calibration, const FusionConfig& cfg) {
  if (tensors.empty()) throw TensorError("server fusion needs at least one tensor");
  const int channels = tensors.begin()->second.channels();
  std::vector<SparseFeatureTensor> aligned;
  aligned.reserve(cfg.device_order.size());
  for (int device : cfg.device_order) {
    const auto it = tensors.find(device);
    if (it == tensors.end()) {
      aligned.emplace_back(cfg.target, channels);
    } else if (device == calibration.reference_device && it->second.grid() == cfg.target) {
      aligned.push_back(it->second);
    } else {
      aligned.push_back(transform_tensor(it->second, calibration.at(device), cfg.target));
    }
  }
  return fuse(aligned, cfg);
}

std::vector<Detection> server_infer(const std::map<int, SparseFeatureTensor>& tensors,
                                    const Calibration& calibration, const FusionConfig& cfg,
                                    const NetworkSpec& spec, const Weights& weights) {
  return run_tail(server_fuse(tensors, calibration, cfg), spec, weights);
}

// ---------------------------------------------------------------------------
// Timing report

double TimingReport::mean_speedup() const {
  if (frames.empty()) return 0.0;
  double s = 0.0;
  for (const FrameTiming& f : frames) s += f.speedup();
  return s / static_cast<double>(frames.size());
}

double TimingReport::max_speedup() const {
  double m = 0.0;
  for (const FrameTiming& f : frames) m = std::max(m, f.speedup());
  return m;
}

double TimingReport::mean_total_ms() const {
  if (frames.empty()) return 0.0;
  double s = 0.0;
  for (const FrameTiming& f : frames) s += f.total_ms;
  return s / static_cast<double>(frames.size());
}

double TimingReport::mean_baseline_ms() const {
  if (frames.empty()) return 0.0;
  double s = 0.0;
  for (const FrameTiming& f : frames) s += f.baseline_ms;
  return s / static_cast<double>(frames.size());
}

double TimingReport::mean_edge_fraction() const {
  if (frames.empty()) return 0.0;
  double s = 0.0;
  for (const FrameTiming& f : frames) {
    const double edge =
        f.edge_ms.empty() ? 0.0 : *std::max_element(f.edge_ms.begin(), f.edge_ms.end());
    s += f.baseline_ms > 0.0 ? edge / f.baseline_ms : 0.0;
  }
  return s / static_cast<double>(frames.size());
}

nlohmann::json TimingReport::to_json() const {
  nlohmann::json rows = nlohmann::json::array();
  for (const FrameTiming& f : frames) {
    rows.push_back({{"frame_id", f.frame_id},
                    {"edge_ms", f.edge_ms},
                    {"transfer_ms", f.transfer_ms},
                    {"wait_ms", f.wait_ms},
                    {"fusion_ms", f.fusion_ms},
                    {"tail_ms", f.tail_ms},
                    {"total_ms", f.total_ms},
                    {"baseline_ms", f.baseline_ms},
                    {"speedup", f.speedup()},
                    {"complete", f.complete}});
  }
  return {{"devices", devices},
          {"measured", measured},
          {"frames", rows},
          {"summary",
           {{"mean_total_ms", mean_total_ms()},
            {"mean_baseline_ms", mean_baseline_ms()},
            {"mean_speedup", mean_speedup()},
            {"max_speedup", max_speedup()},
            {"mean_edge_fraction", mean_edge_fraction()}}}};
}

TimingReport TimingReport::from_json(const nlohmann::json& j) {
  TimingReport r;
  r.devices = j.at("devices").get<std::vector<int>>();
  r.measured = j.value("measured", false);
  for (const auto& row : j.at("frames")) {
    FrameTiming f;
    f.frame_id = row.at("frame_id").get<std::uint64_t>();
    f.edge_ms = row.at("edge_ms").get<std::vector<double>>();
    f.transfer_ms = row.at("transfer_ms").get<std::vector<double>>();
    f.wait_ms = row.at("wait_ms").get<double>();
    f.fusion_ms = row.at("fusion_ms").get<double>();
    f.tail_ms = row.at("tail_ms").get<double>();
    f.total_ms = row.at("total_ms").get<double>();
    f.baseline_ms = row.at("baseline_ms").get<double>();
    f.complete = row.value("complete", true);
    r.frames.push_back(f);
  }
  return r;
}

namespace {

std::string fixed(double v, int precision = 3) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(precision) << v;
  return os.str();
}

std::string joined(const std::vector<double>& v) {
  if (v.empty()) return "-";
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i > 0) s += "/";
    s += v[i] < 0.0 ? "drop" : fixed(v[i]);
  }
  return s;
}

}  // namespace

std::string TimingReport::to_table() const {
  const std::vector<std::string> head = {"frame",    "edge_ms",     "transfer_ms",
                                         "wait_ms",  "fusion_ms",   "tail_ms",
                                         "total_ms", "baseline_ms", "speedup"};
  std::vector<std::vector<std::string>> rows;
  for (const FrameTiming& f : frames) {
    rows.push_back({std::to_string(f.frame_id) + (f.complete ? "" : "*"), joined(f.edge_ms),
                    joined(f.transfer_ms), fixed(f.wait_ms), fixed(f.fusion_ms), fixed(f.tail_ms),
                    fixed(f.total_ms), fixed(f.baseline_ms), fixed(f.speedup(), 2)});
  }
  std::vector<std::size_t> width(head.size());
  for (std::size_t c = 0; c < head.size(); ++c) {
    width[c] = head[c].size();
    for (const auto& r : rows) width[c] = std::max(width[c], r[c].size());
  }
  std::ostringstream os;
  auto line = [&](const std::vector<std::string>& cells) {
    for (std::size_t c = 0; c < cells.size(); ++c) {
      if (c > 0) os << "  ";
      os << std::setw(static_cast<int>(width[c])) << cells[c];
    }
    os << "\n";
  };
  line(head);
  for (const auto& r : rows) line(r);
  os << (measured ? "measured" : "modeled") << " mean total " << fixed(mean_total_ms())
     << " ms, baseline " << fixed(mean_baseline_ms()) << " ms, mean speedup "
     << fixed(mean_speedup(), 2) << "x, max speedup " << fixed(max_speedup(), 2) << "x\n";
  return os.str();
}

std::string TimingReport::to_csv() const {
  std::ostringstream os;
  os << "frame_id,device_index,edge_ms,transfer_ms,wait_ms,fusion_ms,tail_ms,total_ms,baseline_ms,"
        "speedup,complete\n";
  for (const FrameTiming& f : frames) {
    for (std::size_t d = 0; d < f.edge_ms.size(); ++d) {
      os << f.frame_id << "," << d << "," << f.edge_ms[d] << ","
         << (d < f.transfer_ms.size() ? f.transfer_ms[d] : 0.0) << "," << f.wait_ms << ","
         << f.fusion_ms << "," << f.tail_ms << "," << f.total_ms << "," << f.baseline_ms << ","
         << f.speedup() << "," << (f.complete ? 1 : 0) << "\n";
    }
  }
  return os.str();
}

// ---------------------------------------------------------------------------
// Simulation

double conv_time_ms(std::uint64_t macs, double macs_per_s, double overhead_ms) {
  return static_cast<double>(macs) / macs_per_s * 1e3 + overhead_ms;
}

double serialize_ms(std::size_t bytes, double mb_per_s) {
  return static_cast<double>(bytes) / (mb_per_s * 1e6) * 1e3;
}

std::vector<Detection> run_input_fusion(const std::vector<PointCloud>& clouds,
                                        const std::vector<int>& devices,
                                        const Calibration& calibration, const NetworkSpec& spec,
                                        const Weights& weights, std::uint64_t* macs,
                                        std::size_t* voxelized_points) {
  if (clouds.size() != devices.size()) {
    throw std::invalid_argument("one cloud per device is required");
  }
  std::vector<PointCloud> aligned;
  aligned.reserve(clouds.size());
  for (std::size_t i = 0; i < clouds.size(); ++i) {
    aligned.push_back(transform_cloud(clouds[i], calibration.at(devices[i])));
  }
  const PointCloud merged = merge_clouds(aligned);
  if (voxelized_points != nullptr) *voxelized_points = merged.size();
  if (macs == nullptr) return run_unsplit(merged, spec, weights);

  // Same layer sequence as run_unsplit, with MAC accounting.
  SparseFeatureTensor x = sparse_conv(voxelize(merged, spec.input), weights.head);
  *macs = conv_macs(weights.head.shape, x.size());
  for (const ConvKernel& k : weights.tail) {
    x = sparse_conv(x, k);
    *macs += conv_macs(k.shape, x.size());
  }
  return detect_bev(x, spec.score_channel, spec.bev_threshold);
}

SimulationResult simulate_pipeline(const std::vector<std::vector<PointCloud>>& frames,
                                   const Calibration& calibration, const NetworkSpec& spec,
                                   const Weights& weights, const FusionConfig& cfg,
                                   const LinkModel& link, const CostModel& cost,
                                   const SimulationOptions& options) {
  link.validate();
  cost.validate();
  spec.validate();
  cfg.validate(spec.feature_channels());
  const std::vector<int>& devices = cfg.device_order;
  const std::size_t n = devices.size();

  std::vector<SimulatedLink> links;
  for (std::size_t d = 0; d < n; ++d) {
    LinkModel m = link;
    m.seed = link.seed + d;
    links.emplace_back(m);
  }

  struct Arrival {
    double time_ms;
    std::uint64_t frame;
    std::size_t device_index;
    FeatureMessage msg;
  };
  std::vector<Arrival> arrivals;
  SimulationResult result;
  result.timing.devices = devices;
  result.timing.frames.resize(frames.size());
  result.detections.resize(frames.size());
  result.complete.assign(frames.size(), false);
  std::vector<double> ready_max(frames.size(), 0.0);

  // Edge side: every device runs its head and ships the frame.
  for (std::size_t f = 0; f < frames.size(); ++f) {
    if (frames[f].size() != n) {
      throw std::invalid_argument("frame " + std::to_string(f) + " needs one cloud per device");
    }
    const double t0 = static_cast<double>(f) * options.frame_period_ms;
    FrameTiming& ft = result.timing.frames[f];
    ft.frame_id = f;
    ft.edge_ms.assign(n, 0.0);
    ft.transfer_ms.assign(n, -1.0);
    for (std::size_t d = 0; d < n; ++d) {
      const PointCloud& cloud = frames[f][d];
      const SparseFeatureTensor head = run_head(cloud, spec, weights);
      const std::uint64_t macs = conv_macs(weights.head.shape, head.size()) +
                                 static_cast<std::uint64_t>(static_cast<double>(cloud.size()) *
                                                            cost.voxelize_macs_per_point);
      FeatureMessage msg{static_cast<std::uint16_t>(devices[d]), f,
                         static_cast<std::uint64_t>(t0 * 1e3), head};
      const std::vector<std::uint8_t> bytes = encode_feature(msg);
      ft.edge_ms[d] = conv_time_ms(macs, cost.edge_macs_per_s, cost.layer_overhead_ms) +
                      serialize_ms(bytes.size(), cost.edge_serialize_mb_per_s);
      links[d].send(bytes);
      const SimulatedLink::Delivery delivery = std::move(links[d].drain().front());
      const double arrival = t0 + ft.edge_ms[d] + delivery.delay_ms +
                             serialize_ms(bytes.size(), cost.server_serialize_mb_per_s);
      DecodeResult decoded = decode_frame(delivery.bytes);
      ready_max[f] = std::max(ready_max[f], arrival - t0);
      if (auto* m = std::get_if<Message>(&decoded)) {
        if (auto* fm = std::get_if<FeatureMessage>(m)) {
          ft.transfer_ms[d] = delivery.delay_ms;
          arrivals.push_back({arrival, f, d, std::move(*fm)});
          continue;
        }
      }
      ++result.corrupted_frames;
      spdlog::debug("frame {} from device {} dropped: corrupted on the link", f, devices[d]);
    }
  }
  std::stable_sort(arrivals.begin(), arrivals.end(), [](const Arrival& a, const Arrival& b) {
    return std::tie(a.time_ms, a.frame, a.device_index) <
           std::tie(b.time_ms, b.frame, b.device_index);
  });

  // Server side: barrier on the virtual clock, then one inference context.
  FrameBarrier barrier(devices, options.timeout_ms);
  std::vector<FrameBarrier::Released> released;
  for (Arrival& a : arrivals) {
    for (auto& r : barrier.poll(a.time_ms)) released.push_back(std::move(r));
    if (auto r = server_collect(barrier, std::move(a.msg), a.time_ms)) {
      released.push_back(std::move(*r));
    }
  }
  for (auto& r : barrier.poll(std::numeric_limits<double>::infinity())) {
    released.push_back(std::move(r));
  }
  std::stable_sort(released.begin(), released.end(),
                   [](const auto& a, const auto& b) { return a.release_ms < b.release_ms; });

  double server_free = 0.0;
  std::vector<bool> handled(frames.size(), false);
  for (const FrameBarrier::Released& r : released) {
    const std::size_t f = static_cast<std::size_t>(r.frame_id);
    const double t0 = static_cast<double>(f) * options.frame_period_ms;
    FrameTiming& ft = result.timing.frames[f];
    const double start = std::max(r.release_ms, server_free);

    std::uint64_t fusion_macs = 0;
    double fusion_overhead = 0.0;
    std::size_t entries = 0;
    for (const auto& [id, t] : r.tensors) entries += t.size();
    fusion_macs +=
        static_cast<std::uint64_t>(static_cast<double>(entries) * cost.transform_macs_per_entry);
    const SparseFeatureTensor fused = server_fuse(r.tensors, calibration, cfg);
    if (cfg.method == FusionMethod::kMax) {
      fusion_macs +=
          static_cast<std::uint64_t>(entries) * static_cast<std::uint64_t>(spec.feature_channels());
    } else {
      fusion_macs += conv_macs(cfg.kernel.shape, fused.size());
      fusion_overhead = cost.layer_overhead_ms;
    }
    std::vector<std::uint64_t> tail_macs;
    result.detections[f] = run_tail_counted(fused, spec, weights, &tail_macs);
    std::uint64_t tail_total = 0;
    for (std::uint64_t m : tail_macs) tail_total += m;

    ft.fusion_ms = conv_time_ms(fusion_macs, cost.server_macs_per_s, fusion_overhead);
    ft.tail_ms = conv_time_ms(tail_total, cost.server_macs_per_s,
                              cost.layer_overhead_ms * static_cast<double>(tail_macs.size()));
    ft.wait_ms = start - r.first_arrival_ms;
    ft.total_ms = start + ft.fusion_ms + ft.tail_ms - t0;
    ft.complete = r.complete;
    result.complete[f] = r.complete;
    server_free = start + ft.fusion_ms + ft.tail_ms;
    handled[f] = true;
  }
  for (std::size_t f = 0; f < frames.size(); ++f) {
    if (handled[f]) continue;
    // Nothing arrived: the frame is lost; report it at the timeout.
    FrameTiming& ft = result.timing.frames[f];
    ft.complete = false;
    ft.wait_ms = options.timeout_ms;
    ft.total_ms = ready_max[f] + options.timeout_ms;
  }

  if (options.with_baseline) {
    // Edge-only: raw clouds go to the reference device, which runs the full
    // unsplit model on the merged input.
    for (std::size_t f = 0; f < frames.size(); ++f) {
      double transfer = 0.0;
      if (!options.baseline_colocated) {
        for (std::size_t d = 0; d < n; ++d) {
          if (devices[d] == calibration.reference_device) continue;
          transfer = std::max(transfer, link.transfer_ms(4 + 12 * frames[f][d].size()));
        }
      }
      std::uint64_t macs = 0;
      std::size_t points = 0;
      run_input_fusion(frames[f], devices, calibration, spec, weights, &macs, &points);
      macs +=
          static_cast<std::uint64_t>(static_cast<double>(points) * cost.voxelize_macs_per_point);
      result.timing.frames[f].baseline_ms =
          transfer +
          conv_time_ms(macs, cost.edge_macs_per_s,
                       cost.layer_overhead_ms * static_cast<double>(1 + spec.tail.size()));
    }
  }
  return result;
}

}  // namespace scmii
