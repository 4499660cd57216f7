#include "swimps/protocol.hpp"

#include <gtest/gtest.h>
#include <zlib.h>

#include <random>
#include <string>
#include <string_view>

namespace swimps {
namespace {

std::vector<std::uint8_t> bytes_of(std::string_view s) { return {s.begin(), s.end()}; }

std::vector<std::uint8_t> from_hex(std::string_view hex) {
  std::vector<std::uint8_t> out;
  for (std::size_t i = 0; i + 1 < hex.size(); i += 2) out.push_back(static_cast<std::uint8_t>(std::stoi(std::string(hex.substr(i, 2)), nullptr, 16)));
  return out;
}

std::uint32_t zlib_crc(std::span<const std::uint8_t> b) {
  return static_cast<std::uint32_t>(::crc32(0L, b.data(), static_cast<uInt>(b.size())));
}

// Known-answer frames, computed once with an independent CRC implementation.
constexpr std::string_view kTelemetryHex =
    "5357010107000000010000000068e5cf8b0100000b00a00ff00a64193c0fe02e03373d651e";
constexpr std::string_view kCommandHex = "5357010207000000050000006052e6cf8b010000050001b80bac0d40852c03";

Frame kat_telemetry() {
  return Frame{.device_id = 7,
               .seq = 1,
               .timestamp_ms = 1700000000000ULL,
               .payload = TelemetryPayload{4000, 2800, 6500, 3900, 12000, 3}};
}

class FrameGen {
public:
  explicit FrameGen(std::uint64_t seed) : gen_(seed) {}

  Frame next() {
    Frame f;
    f.device_id = static_cast<std::uint32_t>(gen_());
    f.seq = static_cast<std::uint32_t>(gen_());
    f.timestamp_ms = gen_();
    switch (pick(0, 2)) {
    case 0:
      f.payload = TelemetryPayload{static_cast<std::uint16_t>(pick(0, 10000)),
                                   static_cast<std::int16_t>(pick(-32768, 32767)),
                                   static_cast<std::uint16_t>(pick(0, 65535)),
                                   static_cast<std::uint16_t>(pick(0, 65535)),
                                   static_cast<std::uint16_t>(pick(0, 65535)),
                                   static_cast<std::uint8_t>(pick(0, 7))};
      break;
    case 1:
      if (pick(0, 1) == 0) {
        const int low = pick(0, 65534);
        f.payload = CommandPayload::set_thresholds(static_cast<std::uint16_t>(low),
                                                   static_cast<std::uint16_t>(pick(low + 1, 65535)));
      } else {
        f.payload = CommandPayload::pump_override(static_cast<OverrideMode>(pick(0, 2)));
      }
      break;
    default:
      f.payload = AckPayload{static_cast<std::uint32_t>(gen_()), static_cast<AckStatus>(pick(0, 1))};
    }
    return f;
  }

  int pick(int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(gen_); }
  std::mt19937_64& engine() { return gen_; }

private:
  std::mt19937_64 gen_;
};

TEST(Crc32, EmptyInput) { EXPECT_EQ(crc32({}), 0u); }

TEST(Crc32, CheckValue) {
  const auto b = bytes_of("123456789");
  EXPECT_EQ(crc32(b), 0xCBF43926u);
  EXPECT_EQ(zlib_crc(b), 0xCBF43926u);
}

TEST(Crc32, SingleZeroByte) {
  const std::vector<std::uint8_t> b{0x00};
  EXPECT_EQ(crc32(b), 0xD202EF8Du);
}

TEST(Crc32, AgreesWithZlibOnRandomBuffers) {
  std::mt19937_64 gen(3);
  for (int i = 0; i < 2000; ++i) {
    std::vector<std::uint8_t> b(gen() % 300);
    for (auto& x : b) x = static_cast<std::uint8_t>(gen());
    ASSERT_EQ(crc32(b), zlib_crc(b));
  }
}

TEST(EncodeFrame, TelemetryKnownAnswer) {
  const auto wire = encode_frame(kat_telemetry());
  EXPECT_EQ(wire, from_hex(kTelemetryHex));
  EXPECT_EQ(wire.size(), telemetry_frame_size);
  EXPECT_EQ(wire.size(), 37u);
  // The trailer is the zlib CRC of everything before it.
  const auto body = std::span(wire).first(wire.size() - 4);
  const std::uint32_t trailer = wire[33] | wire[34] << 8 | wire[35] << 16 | static_cast<std::uint32_t>(wire[36]) << 24;
  EXPECT_EQ(trailer, zlib_crc(body));
}

TEST(EncodeFrame, CommandKnownAnswer) {
  const Frame f{.device_id = 7,
                .seq = 5,
                .timestamp_ms = 1700000060000ULL,
                .payload = CommandPayload::set_thresholds(3000, 3500)};
  EXPECT_EQ(encode_frame(f), from_hex(kCommandHex));
}

TEST(EncodeFrame, MoistureIsLittleEndian) {
  const auto wire = encode_frame(kat_telemetry());
  EXPECT_EQ(wire[frame_header_size], 0xA0);
  EXPECT_EQ(wire[frame_header_size + 1], 0x0F);
}

TEST(EncodeFrame, HeaderLayout) {
  const auto wire = encode_frame(kat_telemetry());
  EXPECT_EQ(wire[0], 'S');
  EXPECT_EQ(wire[1], 'W');
  EXPECT_EQ(wire[2], protocol_version);
  EXPECT_EQ(wire[3], static_cast<std::uint8_t>(MsgType::Telemetry));
  EXPECT_EQ(wire[4], 7);
  EXPECT_EQ(wire[8], 1);
  EXPECT_EQ(wire[20], telemetry_payload_size);
  EXPECT_EQ(wire[21], 0);
}

TEST(DecodeFrame, KnownAnswerDecodes) {
  const auto f = decode_frame(from_hex(kTelemetryHex));
  ASSERT_TRUE(f);
  EXPECT_EQ(*f, kat_telemetry());
  const auto& t = std::get<TelemetryPayload>(f->payload);
  EXPECT_TRUE(t.pump_on());
  EXPECT_TRUE(t.charging());
  EXPECT_FALSE(t.low_latch());
}

TEST(DecodeFrame, FlippedCrcByteIsBadCrc) {
  auto wire = encode_frame(kat_telemetry());
  wire.back() ^= 0xFF;
  EXPECT_EQ(decode_frame(wire).error(), DecodeError::BadCrc);
}

TEST(DecodeFrame, TenBytesIsTruncated) {
  const auto wire = encode_frame(kat_telemetry());
  EXPECT_EQ(decode_frame(std::span(wire).first(10)).error(), DecodeError::Truncated);
  EXPECT_EQ(decode_frame(std::span(wire).first(36)).error(), DecodeError::Truncated);
  EXPECT_EQ(decode_frame(std::span(wire).first(1)).error(), DecodeError::Truncated);
}

TEST(DecodeFrame, InvertedThresholdsIsBadPayload) {
  Frame f{.device_id = 7, .seq = 5, .timestamp_ms = 1, .payload = CommandPayload::set_thresholds(4000, 3000)};
  EXPECT_EQ(decode_frame(encode_frame(f)).error(), DecodeError::BadPayload);
}

TEST(DecodeFrame, HeaderErrors) {
  auto wire = encode_frame(kat_telemetry());
  auto bad = wire;
  bad[0] = 'X';
  EXPECT_EQ(decode_frame(bad).error(), DecodeError::BadMagic);
  bad = wire;
  bad[2] = 2;
  EXPECT_EQ(decode_frame(bad).error(), DecodeError::UnknownVersion);
  bad = wire;
  bad[3] = 9;
  EXPECT_EQ(decode_frame(bad).error(), DecodeError::UnknownMsgType);
  bad = wire;
  bad.push_back(0);
  EXPECT_EQ(decode_frame(bad).error(), DecodeError::TrailingBytes);
}

// Payload-level checks run after the CRC, so re-seal the frame after editing.
std::vector<std::uint8_t> reseal(std::vector<std::uint8_t> wire) {
  wire.resize(wire.size() - 4);
  const auto c = crc32(wire);
  for (int i = 0; i < 4; ++i) wire.push_back(static_cast<std::uint8_t>(c >> (8 * i)));
  return wire;
}

TEST(DecodeFrame, PayloadInvariants) {
  auto wire = encode_frame(kat_telemetry());
  wire[22] = 0x11; // moisture 0x2711 = 10001
  wire[23] = 0x27;
  EXPECT_EQ(decode_frame(reseal(wire)).error(), DecodeError::BadPayload);

  wire = encode_frame(kat_telemetry());
  wire[32] = 0x08; // unknown flag bit
  EXPECT_EQ(decode_frame(reseal(wire)).error(), DecodeError::BadPayload);

  wire = encode_frame(Frame{.payload = CommandPayload::pump_override(OverrideMode::ForceOff)});
  wire[23] = 3; // unknown mode
  EXPECT_EQ(decode_frame(reseal(wire)).error(), DecodeError::BadPayload);
}

TEST(DecodeFrame, WrongPayloadLengthForType) {
  Frame f = kat_telemetry();
  f.payload = AckPayload{1, AckStatus::Ok};
  auto wire = encode_frame(f);
  wire[3] = static_cast<std::uint8_t>(MsgType::Telemetry);
  EXPECT_EQ(decode_frame(reseal(wire)).error(), DecodeError::BadPayload);
}

TEST(FrameProperty, RoundTripIsIdentity) {
  FrameGen gen(11);
  for (int i = 0; i < 10000; ++i) {
    const auto f = gen.next();
    const auto wire = encode_frame(f);
    ASSERT_EQ(wire.size(), frame_header_size + wire[20] + frame_crc_size);
    const auto back = decode_frame(wire);
    ASSERT_TRUE(back) << to_string(back.error());
    ASSERT_EQ(*back, f);
  }
}

TEST(FrameProperty, TelemetryFramesAre37Bytes) {
  FrameGen gen(12);
  for (int i = 0; i < 1000; ++i) {
    auto f = gen.next();
    if (f.msg_type() == MsgType::Telemetry) {
      ASSERT_EQ(encode_frame(f).size(), 37u);
    }
  }
}

TEST(FrameProperty, EverySingleBitFlipIsDetected) {
  FrameGen gen(13);
  for (int i = 0; i < 300; ++i) {
    const auto wire = encode_frame(gen.next());
    for (std::size_t bit = 0; bit < wire.size() * 8; ++bit) {
      auto bad = wire;
      bad[bit / 8] ^= static_cast<std::uint8_t>(1U << (bit % 8));
      ASSERT_FALSE(decode_frame(bad)) << "frame " << i << " bit " << bit;
    }
  }
}

TEST(FrameProperty, DecodeIsTotalOverArbitraryBytes) {
  FrameGen gen(14);
  auto& eng = gen.engine();
  for (int i = 0; i < 50000; ++i) {
    std::vector<std::uint8_t> b;
    if (i % 2 == 0) {
      b.resize(eng() % 64);
      for (auto& x : b) x = static_cast<std::uint8_t>(eng());
      if (b.size() >= 2 && i % 4 == 0) b[0] = 'S', b[1] = 'W';
    } else {
      // Mutate a valid frame: random edits, truncations and extensions.
      b = encode_frame(gen.next());
      const int edits = gen.pick(1, 4);
      for (int k = 0; k < edits; ++k) b[eng() % b.size()] = static_cast<std::uint8_t>(eng());
      if (gen.pick(0, 2) == 0) b.resize(eng() % (b.size() + 8));
    }
    const auto r = decode_frame(b);
    if (r) {
      ASSERT_EQ(encode_frame(*r), b);
    }
  }
}

TEST(FrameExtent, StreamReassembly) {
  const auto wire = encode_frame(kat_telemetry());
  EXPECT_EQ(frame_extent(std::span(wire).first(5)).kind, FrameExtent::Kind::NeedMore);
  EXPECT_EQ(frame_extent(std::span(wire).first(25)).kind, FrameExtent::Kind::NeedMore);
  EXPECT_EQ(frame_extent(std::span(wire).first(25)).size, 37u);
  const auto done = frame_extent(wire);
  EXPECT_EQ(done.kind, FrameExtent::Kind::Complete);
  EXPECT_EQ(done.size, 37u);
  const std::vector<std::uint8_t> junk{0x00, 'S'};
  EXPECT_EQ(frame_extent(junk).kind, FrameExtent::Kind::Garbage);
}

} // namespace
} // namespace swimps
