#include "scmii/protocol.hpp"

#include <zlib.h>

#include <cmath>
#include <cstring>
#include <limits>

namespace scmii {
namespace {

constexpr std::uint8_t kMagic[4] = {'S', 'C', 'M', 'I'};

class Writer {
 public:
  explicit Writer(std::vector<std::uint8_t>* out) : out_(out) {}

  template <typename T>
  void put(T v) {
    static_assert(std::is_arithmetic_v<T>);
    std::uint8_t raw[sizeof(T)];
    std::memcpy(raw, &v, sizeof(T));
    out_->insert(out_->end(), raw, raw + sizeof(T));
  }

 private:
  std::vector<std::uint8_t>* out_;
};

// Bounds-checked little-endian cursor over an untrusted body.
class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> data) : data_(data) {}

  template <typename T>
  bool get(T* v) {
    if (data_.size() - pos_ < sizeof(T)) return false;
    std::memcpy(v, data_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return true;
  }
  std::size_t remaining() const { return data_.size() - pos_; }

 private:
  std::span<const std::uint8_t> data_;
  std::size_t pos_ = 0;
};

std::uint32_t crc32_of(std::span<const std::uint8_t> bytes) {
  uLong crc = crc32(0L, Z_NULL, 0);
  // zlib takes uInt lengths; bodies are capped well below 4 GiB.
  crc = crc32(crc, bytes.data(), static_cast<uInt>(bytes.size()));
  return static_cast<std::uint32_t>(crc);
}

DecodeError fail(DecodeErrorKind kind, std::string detail) { return {kind, std::move(detail)}; }

DecodeResult decode_hello(std::span<const std::uint8_t> body) {
  Reader r(body);
  HelloMessage m;
  if (!r.get(&m.device_id) || !r.get(&m.channels) || r.remaining() != 0) {
    return fail(DecodeErrorKind::kLengthMismatch, "HELLO body must be 4 bytes");
  }
  return Message(m);
}

DecodeResult decode_bye(std::span<const std::uint8_t> body) {
  Reader r(body);
  ByeMessage m;
  if (!r.get(&m.device_id) || r.remaining() != 0) {
    return fail(DecodeErrorKind::kLengthMismatch, "BYE body must be 2 bytes");
  }
  return Message(m);
}

DecodeResult decode_result(std::span<const std::uint8_t> body) {
  Reader r(body);
  ResultMessage m;
  std::uint8_t complete = 0;
  std::uint32_t count = 0;
  if (!r.get(&m.frame_id) || !r.get(&complete) || !r.get(&count)) {
    return fail(DecodeErrorKind::kLengthMismatch, "RESULT header truncated");
  }
  if (complete > 1) return fail(DecodeErrorKind::kLengthMismatch, "RESULT complete flag not 0/1");
  if (r.remaining() != static_cast<std::uint64_t>(count) * kResultRecordSize) {
    return fail(DecodeErrorKind::kLengthMismatch, "RESULT detection count disagrees with body");
  }
  m.complete = complete == 1;
  m.detections.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    float v[7] = {};
    for (float& f : v) r.get(&f);
    for (float f : v) {
      if (!std::isfinite(f)) return fail(DecodeErrorKind::kNonFinite, "non-finite detection field");
    }
    Detection d;
    d.center = Eigen::Vector3d(v[0], v[1], v[2]);
    d.size = Eigen::Vector3d(v[3], v[4], v[5]);
    d.score = v[6];
    m.detections.push_back(d);
  }
  return Message(std::move(m));
}

DecodeResult decode_feature(std::span<const std::uint8_t> body) {
  Reader r(body);
  std::uint16_t device = 0, channels = 0;
  std::uint64_t frame = 0, stamp = 0;
  double origin[3], voxel[3];
  std::uint32_t dims[3], stride = 0, count = 0;
  bool ok = r.get(&device) && r.get(&frame) && r.get(&stamp);
  for (double& v : origin) ok = ok && r.get(&v);
  for (double& v : voxel) ok = ok && r.get(&v);
  for (std::uint32_t& v : dims) ok = ok && r.get(&v);
  ok = ok && r.get(&stride) && r.get(&channels) && r.get(&count);
  if (!ok) return fail(DecodeErrorKind::kLengthMismatch, "FEATURE header truncated");

  for (int a = 0; a < 3; ++a) {
    if (!std::isfinite(origin[a]) || !std::isfinite(voxel[a])) {
      return fail(DecodeErrorKind::kNonFinite, "non-finite grid geometry");
    }
    if (!(voxel[a] > 0.0) || dims[a] < 1 || dims[a] > static_cast<std::uint32_t>(kMaxGridDim)) {
      return fail(DecodeErrorKind::kInvalidGrid, "grid voxel size or dims out of range");
    }
  }
  if (stride < 1 || stride > static_cast<std::uint32_t>(std::numeric_limits<std::int32_t>::max())) {
    return fail(DecodeErrorKind::kInvalidGrid, "grid stride scale out of range");
  }
  if (channels < 1) return fail(DecodeErrorKind::kInvalidGrid, "channel count is zero");
  const std::uint64_t record = 12 + 4 * static_cast<std::uint64_t>(channels);
  if (r.remaining() != static_cast<std::uint64_t>(count) * record) {
    return fail(DecodeErrorKind::kLengthMismatch, "FEATURE voxel count disagrees with body");
  }

  GridSpec g;
  g.origin = Eigen::Vector3d(origin[0], origin[1], origin[2]);
  g.voxel_size = Eigen::Vector3d(voxel[0], voxel[1], voxel[2]);
  g.dims = {static_cast<std::int32_t>(dims[0]), static_cast<std::int32_t>(dims[1]),
            static_cast<std::int32_t>(dims[2])};
  g.stride = static_cast<std::int32_t>(stride);

  TensorBuilder builder(g, channels);
  std::vector<float> feats(channels);
  std::uint64_t previous = 0;
  for (std::uint32_t i = 0; i < count; ++i) {
    VoxelIndex idx{};
    for (std::int32_t& v : idx) r.get(&v);
    for (float& f : feats) r.get(&f);
    if (!g.contains(idx))
      return fail(DecodeErrorKind::kIndexOutOfRange, "voxel index outside dims");
    for (float f : feats) {
      if (!std::isfinite(f)) return fail(DecodeErrorKind::kNonFinite, "non-finite feature value");
    }
    const std::uint64_t key = voxel_key(idx);
    if (i > 0 && key <= previous) {
      return fail(DecodeErrorKind::kNonCanonical, "voxel records not strictly ascending");
    }
    previous = key;
    builder.set(idx, feats);
  }
  FeatureMessage m;
  m.device_id = device;
  m.frame_id = frame;
  m.timestamp_us = stamp;
  m.tensor = std::move(builder).build();
  return Message(std::move(m));
}

// Validates the 10-byte prefix. Returns the body length or an error.
std::variant<std::uint32_t, DecodeError> check_prefix(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < kFramePrefixSize) {
    if (!bytes.empty() &&
        std::memcmp(bytes.data(), kMagic, std::min<std::size_t>(bytes.size(), 4)) != 0) {
      return fail(DecodeErrorKind::kBadMagic, "frame does not start with SCMI");
    }
    return fail(DecodeErrorKind::kTruncated, "frame prefix truncated");
  }
  if (std::memcmp(bytes.data(), kMagic, 4) != 0) {
    return fail(DecodeErrorKind::kBadMagic, "frame does not start with SCMI");
  }
  if (bytes[4] != kProtocolVersion) {
    return fail(DecodeErrorKind::kUnsupportedVersion,
                "unsupported protocol version " + std::to_string(bytes[4]));
  }
  if (bytes[5] < 1 || bytes[5] > 4) {
    return fail(DecodeErrorKind::kUnknownType, "unknown message type " + std::to_string(bytes[5]));
  }
  std::uint32_t length = 0;
  std::memcpy(&length, bytes.data() + 6, 4);
  if (length > kMaxBodySize) {
    return fail(DecodeErrorKind::kBodyTooLarge,
                "declared body length " + std::to_string(length) + " exceeds 64 MiB");
  }
  return length;
}

}  // namespace

std::string to_string(DecodeErrorKind kind) {
  switch (kind) {
    case DecodeErrorKind::kTruncated:
      return "truncated";
    case DecodeErrorKind::kBadMagic:
      return "bad-magic";
    case DecodeErrorKind::kUnsupportedVersion:
      return "unsupported-version";
    case DecodeErrorKind::kUnknownType:
      return "unknown-type";
    case DecodeErrorKind::kBodyTooLarge:
      return "body-too-large";
    case DecodeErrorKind::kCrcMismatch:
      return "crc-mismatch";
    case DecodeErrorKind::kLengthMismatch:
      return "length-mismatch";
    case DecodeErrorKind::kInvalidGrid:
      return "invalid-grid";
    case DecodeErrorKind::kIndexOutOfRange:
      return "index-out-of-range";
    case DecodeErrorKind::kNonFinite:
      return "non-finite";
    case DecodeErrorKind::kNonCanonical:
      return "non-canonical";
  }
  return "unknown";
}

std::size_t feature_frame_size(std::size_t voxels, int channels) {
  return kFrameOverhead + kFeatureHeaderSize +
         voxels * (12 + 4 * static_cast<std::size_t>(channels));
}

std::vector<std::uint8_t> encode_frame(MessageType type, std::span<const std::uint8_t> body) {
  if (body.size() > kMaxBodySize) throw ProtocolError("message body exceeds 64 MiB");
  std::vector<std::uint8_t> out(kFrameOverhead + body.size());
  std::memcpy(out.data(), kMagic, 4);
  out[4] = kProtocolVersion;
  out[5] = static_cast<std::uint8_t>(type);
  const auto len = static_cast<std::uint32_t>(body.size());
  for (int i = 0; i < 4; ++i) out[6 + i] = static_cast<std::uint8_t>(len >> (8 * i));
  if (!body.empty()) std::memcpy(out.data() + 10, body.data(), body.size());
  const std::uint32_t crc =
      crc32_of(std::span<const std::uint8_t>(out).subspan(4, 6 + body.size()));
  for (int i = 0; i < 4; ++i) out[10 + body.size() + i] = static_cast<std::uint8_t>(crc >> (8 * i));
  return out;
}

std::vector<std::uint8_t> encode_feature(const FeatureMessage& msg) {
  const SparseFeatureTensor& t = msg.tensor;
  if (t.size() > std::numeric_limits<std::uint32_t>::max()) {
    throw ProtocolError("voxel count exceeds u32");
  }
  const GridSpec& g = t.grid();
  std::vector<std::uint8_t> body;
  body.reserve(feature_frame_size(t.size(), t.channels()) - kFrameOverhead);
  Writer w(&body);
  w.put(msg.device_id);
  w.put(msg.frame_id);
  w.put(msg.timestamp_us);
  for (int a = 0; a < 3; ++a) w.put(g.origin[a]);
  for (int a = 0; a < 3; ++a) w.put(g.voxel_size[a]);
  for (int a = 0; a < 3; ++a) w.put(static_cast<std::uint32_t>(g.dims[a]));
  w.put(static_cast<std::uint32_t>(g.stride));
  w.put(static_cast<std::uint16_t>(t.channels()));
  w.put(static_cast<std::uint32_t>(t.size()));
  // Tensor storage is already in ascending (z, y, x) order.
  for (std::size_t i = 0; i < t.size(); ++i) {
    for (std::int32_t v : t.index(i)) w.put(v);
    for (float f : t.features(i)) w.put(f);
  }
  return encode_frame(MessageType::kFeature, body);
}

std::vector<std::uint8_t> encode_result(const ResultMessage& msg) {
  if (msg.detections.size() > std::numeric_limits<std::uint32_t>::max()) {
    throw ProtocolError("detection count exceeds u32");
  }
  std::vector<std::uint8_t> body;
  Writer w(&body);
  w.put(msg.frame_id);
  w.put(static_cast<std::uint8_t>(msg.complete ? 1 : 0));
  w.put(static_cast<std::uint32_t>(msg.detections.size()));
  for (const Detection& d : msg.detections) {
    for (int a = 0; a < 3; ++a) w.put(static_cast<float>(d.center[a]));
    for (int a = 0; a < 3; ++a) w.put(static_cast<float>(d.size[a]));
    w.put(static_cast<float>(d.score));
  }
  return encode_frame(MessageType::kResult, body);
}

std::vector<std::uint8_t> encode_message(const Message& msg) {
  struct Visitor {
    std::vector<std::uint8_t> operator()(const HelloMessage& m) const {
      std::vector<std::uint8_t> body;
      Writer w(&body);
      w.put(m.device_id);
      w.put(m.channels);
      return encode_frame(MessageType::kHello, body);
    }
    std::vector<std::uint8_t> operator()(const FeatureMessage& m) const {
      return encode_feature(m);
    }
    std::vector<std::uint8_t> operator()(const ResultMessage& m) const { return encode_result(m); }
    std::vector<std::uint8_t> operator()(const ByeMessage& m) const {
      std::vector<std::uint8_t> body;
      Writer(&body).put(m.device_id);
      return encode_frame(MessageType::kBye, body);
    }
  };
  return std::visit(Visitor{}, msg);
}

DecodeResult decode_frame(std::span<const std::uint8_t> bytes) {
  const auto prefix = check_prefix(bytes);
  if (const auto* err = std::get_if<DecodeError>(&prefix)) return *err;
  const std::uint32_t length = std::get<std::uint32_t>(prefix);
  const std::size_t total = kFrameOverhead + length;
  if (bytes.size() < total) return fail(DecodeErrorKind::kTruncated, "frame truncated");
  if (bytes.size() > total) {
    return fail(DecodeErrorKind::kLengthMismatch, "trailing bytes after frame");
  }
  std::uint32_t crc = 0;
  std::memcpy(&crc, bytes.data() + kFramePrefixSize + length, 4);
  if (crc != crc32_of(bytes.subspan(4, 6 + length))) {
    return fail(DecodeErrorKind::kCrcMismatch, "CRC32 mismatch");
  }
  const auto body = bytes.subspan(kFramePrefixSize, length);
  switch (static_cast<MessageType>(bytes[5])) {
    case MessageType::kHello:
      return decode_hello(body);
    case MessageType::kFeature:
      return decode_feature(body);
    case MessageType::kResult:
      return decode_result(body);
    case MessageType::kBye:
      return decode_bye(body);
  }
  return fail(DecodeErrorKind::kUnknownType, "unknown message type");
}

void FrameReader::feed(std::span<const std::uint8_t> bytes) {
  if (pos_ > 0 && pos_ == buffer_.size()) {
    buffer_.clear();
    pos_ = 0;
  }
  buffer_.insert(buffer_.end(), bytes.begin(), bytes.end());
}

std::optional<DecodeResult> FrameReader::next() {
  if (failed_) return std::nullopt;
  const auto avail = std::span<const std::uint8_t>(buffer_).subspan(pos_);
  if (avail.empty()) return std::nullopt;
  const auto prefix = check_prefix(avail);
  if (const auto* err = std::get_if<DecodeError>(&prefix)) {
    if (err->kind == DecodeErrorKind::kTruncated) return std::nullopt;
    failed_ = true;
    return DecodeResult(*err);
  }
  const std::size_t total = kFrameOverhead + std::get<std::uint32_t>(prefix);
  if (avail.size() < total) return std::nullopt;
  DecodeResult r = decode_frame(avail.first(total));
  pos_ += total;
  // Compact occasionally so a long-lived stream does not grow without bound.
  if (pos_ > (1u << 20) && pos_ * 2 > buffer_.size()) {
    buffer_.erase(buffer_.begin(), buffer_.begin() + static_cast<std::ptrdiff_t>(pos_));
    pos_ = 0;
  }
  return r;
}

}  // namespace scmii
