#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "scmii/model.hpp"
#include "scmii/sparse.hpp"

namespace scmii {

// Frame: "SCMI" | version u8 | type u8 | body length u32 | body | crc32 u32.
// The CRC covers version through body. Everything is little-endian.
inline constexpr std::uint8_t kProtocolVersion = 1;
inline constexpr std::size_t kFramePrefixSize = 10;  // magic + version + type + length
inline constexpr std::size_t kFrameOverhead = 14;    // prefix + crc
inline constexpr std::size_t kFeatureHeaderSize = 88;
inline constexpr std::size_t kResultRecordSize = 28;  // 7 x f32
inline constexpr std::uint32_t kMaxBodySize = 64u << 20;

enum class MessageType : std::uint8_t { kHello = 1, kFeature = 2, kResult = 3, kBye = 4 };

struct HelloMessage {
  std::uint16_t device_id = 0;
  std::uint16_t channels = 0;
  bool operator==(const HelloMessage&) const = default;
};

struct ByeMessage {
  std::uint16_t device_id = 0;
  bool operator==(const ByeMessage&) const = default;
};

/// One device's head output for one frame.
struct FeatureMessage {
  std::uint16_t device_id = 0;
  std::uint64_t frame_id = 0;
  std::uint64_t timestamp_us = 0;
  SparseFeatureTensor tensor{GridSpec{}, 1};

  bool operator==(const FeatureMessage&) const = default;
};

/// Detections for one frame, server to edge. Class is implicit (0).
struct ResultMessage {
  std::uint64_t frame_id = 0;
  bool complete = true;
  std::vector<Detection> detections;  // f32 on the wire
};

using Message = std::variant<HelloMessage, FeatureMessage, ResultMessage, ByeMessage>;

enum class DecodeErrorKind {
  kTruncated,
  kBadMagic,
  kUnsupportedVersion,
  kUnknownType,
  kBodyTooLarge,
  kCrcMismatch,
  kLengthMismatch,  // body size disagrees with its own counts
  kInvalidGrid,
  kIndexOutOfRange,
  kNonFinite,
  kNonCanonical,  // records not strictly ascending in (z, y, x)
};

std::string to_string(DecodeErrorKind kind);

struct DecodeError {
  DecodeErrorKind kind;
  std::string detail;
};

using DecodeResult = std::variant<Message, DecodeError>;

class ProtocolError : public std::runtime_error {
 public:
  explicit ProtocolError(const std::string& what) : std::runtime_error(what) {}
};

/// Frame size for a FEATURE message: 14 + 88 + n * (12 + 4C).
std::size_t feature_frame_size(std::size_t voxels, int channels);

std::vector<std::uint8_t> encode_frame(MessageType type, std::span<const std::uint8_t> body);
std::vector<std::uint8_t> encode_feature(const FeatureMessage& msg);
std::vector<std::uint8_t> encode_result(const ResultMessage& msg);
std::vector<std::uint8_t> encode_message(const Message& msg);

/// Decodes exactly one frame occupying all of `bytes`. Never throws on bad
/// input and never allocates more than the declared (capped) body length.
DecodeResult decode_frame(std::span<const std::uint8_t> bytes);

/// Incremental splitter for a byte stream carrying back-to-back frames.
class FrameReader {
 public:
  void feed(std::span<const std::uint8_t> bytes);

  /// Next complete frame, an error for a corrupt prefix (after which the
  /// stream is unusable), or nullopt when more bytes are needed.
  std::optional<DecodeResult> next();
  std::size_t buffered() const { return buffer_.size() - pos_; }

 private:
  std::vector<std::uint8_t> buffer_;
  std::size_t pos_ = 0;
  bool failed_ = false;
};

}  // namespace scmii
