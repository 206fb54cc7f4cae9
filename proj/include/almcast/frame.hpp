#pragma once

// Wire protocol shared by both transports.
//
//   magic (2 bytes, 0xA1 0x4D) | msg_type (1 byte) | length (4 bytes, big-endian) | payload
//
// PROBE and PROBE_ECHO frames are exactly 1500 bytes on the wire: the 7-byte
// header plus a 1493-byte payload holding a big-endian 64-bit sequence number
// followed by zero padding. Multi-byte integers are big-endian; doubles are
// their IEEE-754 bit pattern, big-endian.

#include <cstdint>
#include <span>
#include <string_view>
#include <vector>

#include "almcast/distribution.hpp"
#include "almcast/measurement.hpp"
#include "almcast/types.hpp"

namespace almcast::transport {

enum class MsgType : std::uint8_t {
  Probe = 0x01,
  ProbeEcho = 0x02,
  MeasReport = 0x03,
  Assign = 0x04,
  LoadReport = 0x05,
  Join = 0x06,
  Remeasure = 0x07,
};

std::string_view to_string(MsgType t);

inline constexpr std::uint8_t kMagic0 = 0xA1;
inline constexpr std::uint8_t kMagic1 = 0x4D;
inline constexpr std::size_t kHeaderBytes = 7;
inline constexpr std::size_t kProbeFrameBytes = 1500;
inline constexpr std::size_t kProbePayloadBytes = kProbeFrameBytes - kHeaderBytes;
inline constexpr std::uint32_t kMaxPayloadBytes = 16u << 20;

struct Frame {
  MsgType type = MsgType::Probe;
  std::vector<std::uint8_t> payload;

  friend bool operator==(const Frame&, const Frame&) = default;
};

enum class DecodeError : std::uint8_t { BadMagic, FrameTooShort, Truncated, UnknownType, BadLength };
std::string_view to_string(DecodeError e);

class DecodeFailure : public ProtocolError {
 public:
  DecodeFailure(DecodeError code, const std::string& what) : ProtocolError(what), code_(code) {}
  DecodeError code() const { return code_; }

 private:
  DecodeError code_;
};

std::vector<std::uint8_t> encode_frame(const Frame& f);
/// Decodes exactly one frame occupying the whole buffer.
Frame decode_frame(std::span<const std::uint8_t> bytes);

struct Header {
  MsgType type;
  std::uint32_t length;
};
/// Validates magic, type and length bounds of a 7-byte header.
Header decode_header(std::span<const std::uint8_t> bytes);

bool is_known_type(std::uint8_t t);

// ---- payloads ----

Frame make_probe(std::uint64_t seq);
Frame make_probe_echo(std::uint64_t seq);
std::uint64_t probe_seq(const Frame& f);

struct JoinMsg {
  NodeId id;
  friend bool operator==(const JoinMsg&, const JoinMsg&) = default;
};
Frame encode_join(const JoinMsg& m);
JoinMsg decode_join(const Frame& f);

enum class RemeasureReason : std::uint8_t { NoCandidate = 0, Malformed = 1, OhFailed = 2 };
struct RemeasureMsg {
  NodeId eh;
  RemeasureReason reason = RemeasureReason::NoCandidate;
  friend bool operator==(const RemeasureMsg&, const RemeasureMsg&) = default;
};
Frame encode_remeasure(const RemeasureMsg& m);
RemeasureMsg decode_remeasure(const Frame& f);

Frame encode_assign(const distribution::Assignment& a);
distribution::Assignment decode_assign(const Frame& f);

Frame encode_load_report(const distribution::LoadReport& r);
distribution::LoadReport decode_load_report(const Frame& f);

/// eh u32 | m_i f64 | measured_percentage f64 | count u32 | records, each:
/// oh u32 | status u8 | reason u8 | attempts u32 | conn f64 | lat1..3 f64 | cumm f64
Frame encode_meas_report(const measurement::MeasurementReport& r);
measurement::MeasurementReport decode_meas_report(const Frame& f);

}  // namespace almcast::transport
