#pragma once

// Device <-> gateway binary framing.
//
//   offset  size  field
//   0       2     magic 0x53 0x57 ("SW")
//   2       1     version (1)
//   3       1     msg_type (1 telemetry, 2 command, 3 ack)
//   4       4     device_id
//   8       4     seq
//   12      8     timestamp_ms
//   20      2     payload_len (<= 1024)
//   22      len   payload
//   22+len  4     CRC-32 (IEEE) over bytes [0, 22+len)
//
// All multi-byte integers are little-endian.

#include "swimps/expected.hpp"

#include <array>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string_view>
#include <variant>
#include <vector>

namespace swimps {

namespace detail {

constexpr std::array<std::uint32_t, 256> make_crc32_table() noexcept {
  std::array<std::uint32_t, 256> table{};
  for (std::uint32_t i = 0; i < 256; ++i) {
    std::uint32_t c = i;
    for (int k = 0; k < 8; ++k) c = (c & 1U) ? (0xEDB88320U ^ (c >> 1)) : (c >> 1);
    table[i] = c;
  }
  return table;
}

inline constexpr auto crc32_table = make_crc32_table();

} // namespace detail

/// Incremental CRC-32 (reflected 0xEDB88320). Start from 0, feed chunks.
constexpr std::uint32_t crc32_update(std::uint32_t crc, std::span<const std::uint8_t> bytes) noexcept {
  crc = ~crc;
  for (std::uint8_t b : bytes) crc = detail::crc32_table[(crc ^ b) & 0xFFU] ^ (crc >> 8);
  return ~crc;
}

constexpr std::uint32_t crc32(std::span<const std::uint8_t> bytes) noexcept {
  return crc32_update(0, bytes);
}

inline constexpr std::uint8_t protocol_version = 1;
inline constexpr std::array<std::uint8_t, 2> frame_magic{0x53, 0x57};
inline constexpr std::size_t frame_header_size = 22;
inline constexpr std::size_t frame_crc_size = 4;
inline constexpr std::size_t max_payload_size = 1024;
inline constexpr std::size_t telemetry_payload_size = 11;
inline constexpr std::size_t telemetry_frame_size =
    frame_header_size + telemetry_payload_size + frame_crc_size;

enum class MsgType : std::uint8_t { Telemetry = 1, Command = 2, Ack = 3 };

namespace flag {
inline constexpr std::uint8_t pump_on = 1U << 0;
inline constexpr std::uint8_t charging = 1U << 1;
inline constexpr std::uint8_t low_latch = 1U << 2;
} // namespace flag

struct TelemetryPayload {
  std::uint16_t moisture_cpct = 0;
  std::int16_t temp_cdegc = 0;
  std::uint16_t rh_cpct = 0;
  std::uint16_t battery_mv = 0;
  std::uint16_t solar_mv = 0;
  std::uint8_t flags = 0;

  bool pump_on() const noexcept { return (flags & flag::pump_on) != 0; }
  bool charging() const noexcept { return (flags & flag::charging) != 0; }
  bool low_latch() const noexcept { return (flags & flag::low_latch) != 0; }

  friend bool operator==(const TelemetryPayload&, const TelemetryPayload&) = default;
};

enum class OverrideMode : std::uint8_t { Auto = 0, ForceOn = 1, ForceOff = 2 };

enum class CommandKind : std::uint8_t { SetThresholds = 1, PumpOverride = 2 };

struct CommandPayload {
  CommandKind cmd = CommandKind::SetThresholds;
  std::uint16_t low_cpct = 0;  ///< SetThresholds only
  std::uint16_t high_cpct = 0; ///< SetThresholds only
  OverrideMode mode = OverrideMode::Auto; ///< PumpOverride only

  static CommandPayload set_thresholds(std::uint16_t low, std::uint16_t high) noexcept {
    return {CommandKind::SetThresholds, low, high, OverrideMode::Auto};
  }
  static CommandPayload pump_override(OverrideMode m) noexcept {
    return {CommandKind::PumpOverride, 0, 0, m};
  }

  /// Wire-level invariant (low < high for thresholds, known mode).
  bool valid() const noexcept {
    switch (cmd) {
    case CommandKind::SetThresholds: return low_cpct < high_cpct;
    case CommandKind::PumpOverride: return static_cast<std::uint8_t>(mode) <= 2;
    }
    return false;
  }

  friend bool operator==(const CommandPayload&, const CommandPayload&) = default;
};

enum class AckStatus : std::uint8_t { Ok = 0, Rejected = 1 };

struct AckPayload {
  std::uint32_t acked_seq = 0;
  AckStatus status = AckStatus::Ok;

  friend bool operator==(const AckPayload&, const AckPayload&) = default;
};

using Payload = std::variant<TelemetryPayload, CommandPayload, AckPayload>;

struct Frame {
  std::uint8_t version = protocol_version;
  std::uint32_t device_id = 0;
  std::uint32_t seq = 0;
  std::uint64_t timestamp_ms = 0;
  Payload payload;

  MsgType msg_type() const noexcept { return static_cast<MsgType>(payload.index() + 1); }

  friend bool operator==(const Frame&, const Frame&) = default;
};

enum class DecodeError {
  BadMagic,
  UnknownVersion,
  UnknownMsgType,
  Truncated,
  TrailingBytes,
  BadCrc,
  BadPayload,
};

constexpr std::string_view to_string(DecodeError e) noexcept {
  switch (e) {
  case DecodeError::BadMagic: return "bad_magic";
  case DecodeError::UnknownVersion: return "unknown_version";
  case DecodeError::UnknownMsgType: return "unknown_msg_type";
  case DecodeError::Truncated: return "truncated";
  case DecodeError::TrailingBytes: return "trailing_bytes";
  case DecodeError::BadCrc: return "bad_crc";
  case DecodeError::BadPayload: return "bad_payload";
  }
  return "unknown";
}

namespace detail {

class ByteWriter {
public:
  explicit ByteWriter(std::vector<std::uint8_t>& out) : out_(out) {}

  void u8(std::uint8_t v) { out_.push_back(v); }
  void u16(std::uint16_t v) { put(v, 2); }
  void i16(std::int16_t v) { put(static_cast<std::uint16_t>(v), 2); }
  void u32(std::uint32_t v) { put(v, 4); }
  void u64(std::uint64_t v) { put(v, 8); }

private:
  void put(std::uint64_t v, int n) {
    for (int i = 0; i < n; ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  std::vector<std::uint8_t>& out_;
};

/// Bounds are checked by the caller; reads never go past the span.
class ByteReader {
public:
  explicit ByteReader(std::span<const std::uint8_t> in) : in_(in) {}

  std::size_t remaining() const noexcept { return in_.size() - pos_; }
  std::uint8_t u8() { return static_cast<std::uint8_t>(get(1)); }
  std::uint16_t u16() { return static_cast<std::uint16_t>(get(2)); }
  std::int16_t i16() { return static_cast<std::int16_t>(static_cast<std::uint16_t>(get(2))); }
  std::uint32_t u32() { return static_cast<std::uint32_t>(get(4)); }
  std::uint64_t u64() { return get(8); }

private:
  std::uint64_t get(std::size_t n) {
    std::uint64_t v = 0;
    for (std::size_t i = 0; i < n && pos_ < in_.size(); ++i, ++pos_)
      v |= static_cast<std::uint64_t>(in_[pos_]) << (8 * i);
    return v;
  }
  std::span<const std::uint8_t> in_;
  std::size_t pos_ = 0;
};

inline void encode_payload(ByteWriter& w, const TelemetryPayload& p) {
  w.u16(p.moisture_cpct);
  w.i16(p.temp_cdegc);
  w.u16(p.rh_cpct);
  w.u16(p.battery_mv);
  w.u16(p.solar_mv);
  w.u8(p.flags);
}

inline void encode_payload(ByteWriter& w, const CommandPayload& p) {
  w.u8(static_cast<std::uint8_t>(p.cmd));
  if (p.cmd == CommandKind::SetThresholds) {
    w.u16(p.low_cpct);
    w.u16(p.high_cpct);
  } else {
    w.u8(static_cast<std::uint8_t>(p.mode));
  }
}

inline void encode_payload(ByteWriter& w, const AckPayload& p) {
  w.u32(p.acked_seq);
  w.u8(static_cast<std::uint8_t>(p.status));
}

inline Expected<Payload, DecodeError> decode_payload(MsgType type, std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  const auto bad = Unexpected{DecodeError::BadPayload};
  switch (type) {
  case MsgType::Telemetry: {
    if (bytes.size() != telemetry_payload_size) return bad;
    TelemetryPayload p;
    p.moisture_cpct = r.u16();
    p.temp_cdegc = r.i16();
    p.rh_cpct = r.u16();
    p.battery_mv = r.u16();
    p.solar_mv = r.u16();
    p.flags = r.u8();
    if (p.moisture_cpct > 10000 || (p.flags & ~0x07U) != 0) return bad;
    return Payload{p};
  }
  case MsgType::Command: {
    if (bytes.empty()) return bad;
    CommandPayload p;
    const auto cmd = r.u8();
    if (cmd == static_cast<std::uint8_t>(CommandKind::SetThresholds)) {
      if (bytes.size() != 5) return bad;
      const auto low = r.u16();
      const auto high = r.u16();
      p = CommandPayload::set_thresholds(low, high);
    } else if (cmd == static_cast<std::uint8_t>(CommandKind::PumpOverride)) {
      if (bytes.size() != 2) return bad;
      const auto mode = r.u8();
      if (mode > 2) return bad;
      p = CommandPayload::pump_override(static_cast<OverrideMode>(mode));
    } else {
      return bad;
    }
    if (!p.valid()) return bad;
    return Payload{p};
  }
  case MsgType::Ack: {
    if (bytes.size() != 5) return bad;
    AckPayload p;
    p.acked_seq = r.u32();
    const auto status = r.u8();
    if (status > 1) return bad;
    p.status = static_cast<AckStatus>(status);
    return Payload{p};
  }
  }
  return bad;
}

} // namespace detail

/// Serializes a frame. Payloads are fixed-size, so the 1024-byte cap cannot
/// be exceeded by a well-typed Frame.
inline std::vector<std::uint8_t> encode_frame(const Frame& f) {
  std::vector<std::uint8_t> out;
  out.reserve(frame_header_size + 16 + frame_crc_size);
  detail::ByteWriter w(out);
  w.u8(frame_magic[0]);
  w.u8(frame_magic[1]);
  w.u8(f.version);
  w.u8(static_cast<std::uint8_t>(f.msg_type()));
  w.u32(f.device_id);
  w.u32(f.seq);
  w.u64(f.timestamp_ms);
  w.u16(0); // payload_len, patched below
  std::visit([&](const auto& p) { detail::encode_payload(w, p); }, f.payload);
  const auto len = out.size() - frame_header_size;
  out[20] = static_cast<std::uint8_t>(len);
  out[21] = static_cast<std::uint8_t>(len >> 8);
  w.u32(crc32(out));
  return out;
}

/// Outcome of looking at the front of a byte stream.
struct FrameExtent {
  enum class Kind { Complete, NeedMore, Garbage } kind;
  std::size_t size = 0; ///< full frame size when Complete; bytes wanted when NeedMore
};

/// Determines how many bytes the frame at the start of `bytes` occupies,
/// without validating its CRC. Used for stream reassembly.
inline FrameExtent frame_extent(std::span<const std::uint8_t> bytes) noexcept {
  for (std::size_t i = 0; i < frame_magic.size() && i < bytes.size(); ++i)
    if (bytes[i] != frame_magic[i]) return {FrameExtent::Kind::Garbage, 0};
  if (bytes.size() < frame_header_size) return {FrameExtent::Kind::NeedMore, frame_header_size};
  const std::size_t len = bytes[20] | (static_cast<std::size_t>(bytes[21]) << 8);
  if (len > max_payload_size) return {FrameExtent::Kind::Garbage, 0};
  const std::size_t total = frame_header_size + len + frame_crc_size;
  if (bytes.size() < total) return {FrameExtent::Kind::NeedMore, total};
  return {FrameExtent::Kind::Complete, total};
}

/// Decodes exactly one frame occupying the whole input. Total over arbitrary
/// bytes; never reads outside the span.
inline Expected<Frame, DecodeError> decode_frame(std::span<const std::uint8_t> bytes) {
  using E = DecodeError;
  if (bytes.size() < 2) return Unexpected{E::Truncated};
  if (bytes[0] != frame_magic[0] || bytes[1] != frame_magic[1]) return Unexpected{E::BadMagic};
  if (bytes.size() < 4) return Unexpected{E::Truncated};
  if (bytes[2] != protocol_version) return Unexpected{E::UnknownVersion};
  if (bytes[3] < 1 || bytes[3] > 3) return Unexpected{E::UnknownMsgType};
  if (bytes.size() < frame_header_size) return Unexpected{E::Truncated};

  detail::ByteReader header(bytes.first(frame_header_size));
  header.u16(); // magic
  Frame f;
  f.version = header.u8();
  const auto type = static_cast<MsgType>(header.u8());
  f.device_id = header.u32();
  f.seq = header.u32();
  f.timestamp_ms = header.u64();
  const std::size_t len = header.u16();
  if (len > max_payload_size) return Unexpected{E::BadPayload};

  const std::size_t total = frame_header_size + len + frame_crc_size;
  if (bytes.size() < total) return Unexpected{E::Truncated};
  if (bytes.size() > total) return Unexpected{E::TrailingBytes};

  const auto covered = bytes.first(frame_header_size + len);
  detail::ByteReader trailer(bytes.subspan(frame_header_size + len));
  if (trailer.u32() != crc32(covered)) return Unexpected{E::BadCrc};

  auto payload = detail::decode_payload(type, bytes.subspan(frame_header_size, len));
  if (!payload) return Unexpected{payload.error()};
  f.payload = std::move(*payload);
  return f;
}

} // namespace swimps
