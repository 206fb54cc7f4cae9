#include "almcast/frame.hpp"

#include <bit>
#include <cstring>

#include <fmt/format.h>

namespace almcast::transport {

std::string_view to_string(MsgType t) {
  switch (t) {
    case MsgType::Probe: return "PROBE";
    case MsgType::ProbeEcho: return "PROBE_ECHO";
    case MsgType::MeasReport: return "MEAS_REPORT";
    case MsgType::Assign: return "ASSIGN";
    case MsgType::LoadReport: return "LOAD_REPORT";
    case MsgType::Join: return "JOIN";
    case MsgType::Remeasure: return "REMEASURE";
  }
  return "?";
}

std::string_view to_string(DecodeError e) {
  switch (e) {
    case DecodeError::BadMagic: return "BadMagic";
    case DecodeError::FrameTooShort: return "FrameTooShort";
    case DecodeError::Truncated: return "Truncated";
    case DecodeError::UnknownType: return "UnknownType";
    case DecodeError::BadLength: return "BadLength";
  }
  return "?";
}

bool is_known_type(std::uint8_t t) { return t >= 0x01 && t <= 0x07; }

namespace {

[[noreturn]] void fail(DecodeError code, const std::string& msg) {
  throw DecodeFailure(code, fmt::format("{}: {}", to_string(code), msg));
}

bool is_probe(MsgType t) { return t == MsgType::Probe || t == MsgType::ProbeEcho; }

class Writer {
 public:
  void u8(std::uint8_t v) { out_.push_back(v); }
  void u32(std::uint32_t v) {
    for (int s = 24; s >= 0; s -= 8) out_.push_back(static_cast<std::uint8_t>(v >> s));
  }
  void u64(std::uint64_t v) {
    for (int s = 56; s >= 0; s -= 8) out_.push_back(static_cast<std::uint8_t>(v >> s));
  }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  std::vector<std::uint8_t> take() { return std::move(out_); }

 private:
  std::vector<std::uint8_t> out_;
};

class Reader {
 public:
  Reader(std::span<const std::uint8_t> in, MsgType type) : in_(in), type_(type) {}
  std::uint8_t u8() {
    need(1);
    return in_[pos_++];
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v = (v << 8) | in_[pos_++];
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v = (v << 8) | in_[pos_++];
    return v;
  }
  double f64() { return std::bit_cast<double>(u64()); }
  void finish() const {
    if (pos_ != in_.size())
      fail(DecodeError::BadLength, fmt::format("{} payload has {} trailing bytes", to_string(type_), in_.size() - pos_));
  }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > in_.size()) fail(DecodeError::BadLength, fmt::format("{} payload too short", to_string(type_)));
  }
  std::span<const std::uint8_t> in_;
  MsgType type_;
  std::size_t pos_ = 0;
};

Reader reader_for(const Frame& f, MsgType expected) {
  if (f.type != expected)
    throw ProtocolError(fmt::format("expected {} frame, got {}", to_string(expected), to_string(f.type)));
  return Reader(f.payload, expected);
}

}  // namespace

std::vector<std::uint8_t> encode_frame(const Frame& f) {
  if (!is_known_type(static_cast<std::uint8_t>(f.type))) throw ProtocolError("encode_frame: unknown message type");
  if (is_probe(f.type) && f.payload.size() != kProbePayloadBytes)
    throw ProtocolError(fmt::format("{} payload must be {} bytes", to_string(f.type), kProbePayloadBytes));
  if (f.payload.size() > kMaxPayloadBytes) throw ProtocolError("encode_frame: payload too large");
  std::vector<std::uint8_t> out;
  out.reserve(kHeaderBytes + f.payload.size());
  const auto len = static_cast<std::uint32_t>(f.payload.size());
  out.insert(out.end(), {kMagic0, kMagic1, static_cast<std::uint8_t>(f.type), static_cast<std::uint8_t>(len >> 24),
                         static_cast<std::uint8_t>(len >> 16), static_cast<std::uint8_t>(len >> 8),
                         static_cast<std::uint8_t>(len)});
  out.insert(out.end(), f.payload.begin(), f.payload.end());
  return out;
}

Header decode_header(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < kHeaderBytes) fail(DecodeError::FrameTooShort, fmt::format("{} bytes, header needs 7", bytes.size()));
  if (bytes[0] != kMagic0 || bytes[1] != kMagic1)
    fail(DecodeError::BadMagic, fmt::format("got 0x{:02X} 0x{:02X}", bytes[0], bytes[1]));
  if (!is_known_type(bytes[2])) fail(DecodeError::UnknownType, fmt::format("type 0x{:02X}", bytes[2]));
  Header h;
  h.type = static_cast<MsgType>(bytes[2]);
  h.length = (std::uint32_t{bytes[3]} << 24) | (std::uint32_t{bytes[4]} << 16) | (std::uint32_t{bytes[5]} << 8) |
             std::uint32_t{bytes[6]};
  if (h.length > kMaxPayloadBytes) fail(DecodeError::BadLength, fmt::format("length {} exceeds limit", h.length));
  if (is_probe(h.type) && h.length != kProbePayloadBytes)
    fail(DecodeError::BadLength, fmt::format("{} length {} != {}", to_string(h.type), h.length, kProbePayloadBytes));
  return h;
}

Frame decode_frame(std::span<const std::uint8_t> bytes) {
  if (bytes.size() >= 3 && bytes[0] == kMagic0 && bytes[1] == kMagic1 && is_known_type(bytes[2]) &&
      is_probe(static_cast<MsgType>(bytes[2])) && bytes.size() < kProbeFrameBytes) {
    fail(DecodeError::FrameTooShort, fmt::format("{}-byte probe frame, expected {}", bytes.size(), kProbeFrameBytes));
  }
  const Header h = decode_header(bytes);
  const std::size_t have = bytes.size() - kHeaderBytes;
  if (have < h.length) fail(DecodeError::Truncated, fmt::format("payload has {} of {} bytes", have, h.length));
  if (have > h.length) fail(DecodeError::BadLength, fmt::format("{} bytes beyond the declared length", have - h.length));
  Frame f;
  f.type = h.type;
  f.payload.assign(bytes.begin() + kHeaderBytes, bytes.end());
  return f;
}

// ---------------------------------------------------------------- payloads

namespace {

Frame probe_frame(MsgType type, std::uint64_t seq) {
  Frame f;
  f.type = type;
  f.payload.assign(kProbePayloadBytes, 0);
  for (int i = 0; i < 8; ++i) f.payload[static_cast<std::size_t>(i)] = static_cast<std::uint8_t>(seq >> (56 - 8 * i));
  return f;
}

}  // namespace

Frame make_probe(std::uint64_t seq) { return probe_frame(MsgType::Probe, seq); }
Frame make_probe_echo(std::uint64_t seq) { return probe_frame(MsgType::ProbeEcho, seq); }

std::uint64_t probe_seq(const Frame& f) {
  if (!is_probe(f.type)) throw ProtocolError("probe_seq: not a probe frame");
  if (f.payload.size() != kProbePayloadBytes) throw DecodeFailure(DecodeError::BadLength, "probe payload size");
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v = (v << 8) | f.payload[static_cast<std::size_t>(i)];
  return v;
}

Frame encode_join(const JoinMsg& m) {
  Writer w;
  w.u32(m.id.id);
  w.u8(static_cast<std::uint8_t>(m.id.role));
  return {MsgType::Join, w.take()};
}

JoinMsg decode_join(const Frame& f) {
  Reader r = reader_for(f, MsgType::Join);
  JoinMsg m;
  m.id.id = r.u32();
  const std::uint8_t role = r.u8();
  if (role > 2) fail(DecodeError::BadLength, fmt::format("JOIN role {} out of range", role));
  m.id.role = static_cast<NodeRole>(role);
  r.finish();
  return m;
}

Frame encode_remeasure(const RemeasureMsg& m) {
  Writer w;
  w.u32(m.eh.id);
  w.u8(static_cast<std::uint8_t>(m.reason));
  return {MsgType::Remeasure, w.take()};
}

RemeasureMsg decode_remeasure(const Frame& f) {
  Reader r = reader_for(f, MsgType::Remeasure);
  RemeasureMsg m;
  m.eh = NodeId::eh(r.u32());
  const std::uint8_t reason = r.u8();
  if (reason > 2) fail(DecodeError::BadLength, fmt::format("REMEASURE reason {} out of range", reason));
  m.reason = static_cast<RemeasureReason>(reason);
  r.finish();
  return m;
}

Frame encode_assign(const distribution::Assignment& a) {
  Writer w;
  w.u32(a.eh.id);
  w.u32(a.oh.id);
  w.f64(a.cost);
  w.f64(a.assigned_at);
  w.u8(a.overloaded ? 1 : 0);
  return {MsgType::Assign, w.take()};
}

distribution::Assignment decode_assign(const Frame& f) {
  Reader r = reader_for(f, MsgType::Assign);
  distribution::Assignment a;
  a.eh = NodeId::eh(r.u32());
  a.oh = NodeId::oh(r.u32());
  a.cost = r.f64();
  a.assigned_at = r.f64();
  a.overloaded = r.u8() != 0;
  r.finish();
  return a;
}

Frame encode_load_report(const distribution::LoadReport& lr) {
  Writer w;
  w.u32(lr.oh.id);
  w.u32(lr.connected_eh);
  w.f64(lr.load_factor);
  w.f64(lr.as_of);
  return {MsgType::LoadReport, w.take()};
}

distribution::LoadReport decode_load_report(const Frame& f) {
  Reader r = reader_for(f, MsgType::LoadReport);
  distribution::LoadReport lr;
  lr.oh = NodeId::oh(r.u32());
  lr.connected_eh = r.u32();
  lr.load_factor = r.f64();
  lr.as_of = r.f64();
  r.finish();
  return lr;
}

Frame encode_meas_report(const measurement::MeasurementReport& rep) {
  Writer w;
  w.u32(rep.eh.id);
  w.f64(rep.m_i);
  w.f64(rep.measured_percentage);
  w.u32(static_cast<std::uint32_t>(rep.records.size()));
  for (const auto& rec : rep.records) {
    w.u32(rec.oh.id);
    w.u8(static_cast<std::uint8_t>(rec.status));
    w.u8(static_cast<std::uint8_t>(rec.reason));
    w.u32(static_cast<std::uint32_t>(rec.attempts));
    w.f64(rec.conn_time);
    for (Millis s : rec.rtt_samples) w.f64(s);
    w.f64(rec.cumm_lat);
  }
  return {MsgType::MeasReport, w.take()};
}

measurement::MeasurementReport decode_meas_report(const Frame& f) {
  Reader r = reader_for(f, MsgType::MeasReport);
  measurement::MeasurementReport rep;
  rep.eh = NodeId::eh(r.u32());
  rep.m_i = r.f64();
  rep.measured_percentage = r.f64();
  const std::uint32_t count = r.u32();
  constexpr std::size_t kRecordBytes = 4 + 1 + 1 + 4 + 8 * 5;
  if (count > f.payload.size() / kRecordBytes)
    fail(DecodeError::BadLength, fmt::format("MEAS_REPORT claims {} records", count));
  std::size_t measured = 0;
  for (std::uint32_t i = 0; i < count; ++i) {
    measurement::LatencyRecord rec;
    rec.eh = rep.eh;
    rec.oh = NodeId::oh(r.u32());
    const std::uint8_t status = r.u8();
    const std::uint8_t reason = r.u8();
    if (status > 1 || reason > 3) fail(DecodeError::BadLength, "MEAS_REPORT record status out of range");
    rec.status = static_cast<measurement::RecordStatus>(status);
    rec.reason = static_cast<measurement::EliminationReason>(reason);
    rec.attempts = static_cast<int>(r.u32());
    rec.conn_time = r.f64();
    for (auto& s : rec.rtt_samples) s = r.f64();
    rec.cumm_lat = r.f64();
    if (rec.measured()) ++measured;
    rep.records.push_back(rec);
  }
  r.finish();
  rep.no_candidates = count > 0 && measured == 0;
  return rep;
}

}  // namespace almcast::transport
