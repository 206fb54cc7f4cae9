#include <random>

#include "doctest.h"

#include "almcast/frame.hpp"

using namespace almcast;
using namespace almcast::transport;

namespace {

DecodeError decode_error(std::span<const std::uint8_t> bytes) {
  try {
    decode_frame(bytes);
  } catch (const DecodeFailure& e) {
    return e.code();
  }
  FAIL("decode succeeded");
  return DecodeError::BadMagic;
}

}  // namespace

TEST_CASE("PROBE seq=7 is a 1500-byte buffer with magic and big-endian seq") {
  const auto bytes = encode_frame(make_probe(7));
  REQUIRE(bytes.size() == 1500);
  CHECK(bytes[0] == 0xA1);
  CHECK(bytes[1] == 0x4D);
  CHECK(bytes[2] == 0x01);
  CHECK(bytes[3] == 0x00);
  CHECK(bytes[4] == 0x00);
  CHECK(bytes[5] == 0x05);  // 1493 = 0x05D5
  CHECK(bytes[6] == 0xD5);
  for (std::size_t i = 7; i < 14; ++i) CHECK(bytes[i] == 0);
  CHECK(bytes[14] == 7);
  for (std::size_t i = 15; i < bytes.size(); ++i) REQUIRE(bytes[i] == 0);
  CHECK(probe_seq(decode_frame(bytes)) == 7);
}

TEST_CASE("PROBE and PROBE_ECHO are 1500 bytes for any sequence number") {
  std::mt19937_64 rng(11);
  for (int i = 0; i < 200; ++i) {
    const std::uint64_t seq = i < 2 ? (i == 0 ? 0 : ~0ULL) : rng();
    const auto p = encode_frame(make_probe(seq));
    const auto e = encode_frame(make_probe_echo(seq));
    REQUIRE(p.size() == 1500);
    REQUIRE(e.size() == 1500);
    CHECK(probe_seq(decode_frame(p)) == seq);
    CHECK(decode_frame(e).type == MsgType::ProbeEcho);
  }
}

TEST_CASE("ASSIGN round trip") {
  distribution::Assignment a{NodeId::eh(3), NodeId::oh(9), 12.5, 1000, true};
  CHECK(decode_assign(decode_frame(encode_frame(encode_assign(a)))) == a);
}

TEST_CASE("JOIN, REMEASURE and LOAD_REPORT round trip") {
  const JoinMsg j{NodeId::mh(0)};
  const auto jb = decode_join(decode_frame(encode_frame(encode_join(j))));
  CHECK(jb == j);
  CHECK(jb.id.role == NodeRole::MonitorHost);

  const RemeasureMsg r{NodeId::eh(44), RemeasureReason::Malformed};
  CHECK(decode_remeasure(decode_frame(encode_frame(encode_remeasure(r)))) == r);

  const distribution::LoadReport lr{NodeId::oh(5), 17, 0.85, 42.25};
  const auto lb = decode_load_report(decode_frame(encode_frame(encode_load_report(lr))));
  CHECK(lb.oh == lr.oh);
  CHECK(lb.connected_eh == 17);
  CHECK(lb.load_factor == 0.85);
  CHECK(lb.as_of == 42.25);
}

TEST_CASE("MEAS_REPORT round trip over random reports") {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> ms(0, 30000);
  for (int iter = 0; iter < 200; ++iter) {
    measurement::MeasurementReport rep;
    rep.eh = NodeId::eh(static_cast<std::uint32_t>(rng() % 5000));
    const std::size_t n = rng() % 41;
    for (std::size_t k = 0; k < n; ++k) {
      measurement::LatencyRecord rec;
      rec.eh = rep.eh;
      rec.oh = NodeId::oh(static_cast<std::uint32_t>(k + 1));
      rec.status = rng() % 4 ? measurement::RecordStatus::Measured : measurement::RecordStatus::Eliminated;
      rec.reason = rec.measured() ? measurement::EliminationReason::None
                                  : static_cast<measurement::EliminationReason>(1 + rng() % 3);
      rec.attempts = static_cast<int>(rng() % 10);
      rec.conn_time = ms(rng);
      for (auto& s : rec.rtt_samples) s = rec.measured() ? ms(rng) / 30 : 0;
      rec.cumm_lat = rec.measured() ? measurement::cumm_lat(rec.rtt_samples) : 0;
      rep.records.push_back(rec);
    }
    rep.m_i = ms(rng);
    rep.measured_percentage = 100.0 * static_cast<double>(rng() % 101) / 100;
    const auto back = decode_meas_report(decode_frame(encode_frame(encode_meas_report(rep))));
    REQUIRE(back.records.size() == rep.records.size());
    CHECK(back.eh == rep.eh);
    CHECK(back.m_i == rep.m_i);
    CHECK(back.measured_percentage == rep.measured_percentage);
    for (std::size_t k = 0; k < n; ++k) {
      const auto& a = rep.records[k];
      const auto& b = back.records[k];
      CHECK(b.oh == a.oh);
      CHECK(b.eh == a.eh);
      CHECK(b.status == a.status);
      CHECK(b.reason == a.reason);
      CHECK(b.attempts == a.attempts);
      CHECK(b.conn_time == a.conn_time);
      CHECK(b.rtt_samples == a.rtt_samples);
      CHECK(b.cumm_lat == a.cumm_lat);
    }
  }
}

TEST_CASE("generic frames round trip for random payloads") {
  std::mt19937_64 rng(5);
  for (int iter = 0; iter < 500; ++iter) {
    Frame f;
    f.type = static_cast<MsgType>(3 + rng() % 5);
    f.payload.resize(rng() % 300);
    for (auto& b : f.payload) b = static_cast<std::uint8_t>(rng());
    const auto bytes = encode_frame(f);
    REQUIRE(bytes.size() == 7 + f.payload.size());
    CHECK(decode_frame(bytes) == f);
  }
}

TEST_CASE("decode errors") {
  auto probe = encode_frame(make_probe(1));
  SUBCASE("1499-byte PROBE is FrameTooShort") {
    probe.pop_back();
    CHECK(decode_error(probe) == DecodeError::FrameTooShort);
  }
  SUBCASE("fewer than 7 bytes is FrameTooShort") {
    const std::vector<std::uint8_t> b = {0xA1, 0x4D, 0x04};
    CHECK(decode_error(b) == DecodeError::FrameTooShort);
  }
  SUBCASE("bad magic") {
    probe[0] = 0xA2;
    CHECK(decode_error(probe) == DecodeError::BadMagic);
  }
  SUBCASE("unknown type") {
    auto b = encode_frame(encode_join({NodeId::oh(1)}));
    b[2] = 0x08;
    CHECK(decode_error(b) == DecodeError::UnknownType);
    b[2] = 0x00;
    CHECK(decode_error(b) == DecodeError::UnknownType);
  }
  SUBCASE("truncated payload") {
    auto b = encode_frame(encode_assign({NodeId::eh(3), NodeId::oh(9)}));
    b.pop_back();
    CHECK(decode_error(b) == DecodeError::Truncated);
  }
  SUBCASE("trailing bytes") {
    auto b = encode_frame(encode_join({NodeId::oh(1)}));
    b.push_back(0);
    CHECK(decode_error(b) == DecodeError::BadLength);
  }
  SUBCASE("probe with a wrong declared length") {
    Frame f{MsgType::Probe, std::vector<std::uint8_t>(10)};
    CHECK_THROWS_AS(encode_frame(f), ProtocolError);
  }
  SUBCASE("payload of the wrong message type") {
    const auto f = encode_join({NodeId::oh(1)});
    CHECK_THROWS_AS(decode_assign(f), ProtocolError);
  }
  SUBCASE("payload too short for its type") {
    Frame f{MsgType::Assign, {1, 2, 3}};
    CHECK_THROWS_AS(decode_assign(f), DecodeFailure);
  }
}

TEST_CASE("header decoding") {
  const auto b = encode_frame(encode_join({NodeId::oh(1)}));
  const Header h = decode_header(std::span(b).first(7));
  CHECK(h.type == MsgType::Join);
  CHECK(h.length == 5);
  CHECK(is_known_type(0x07));
  CHECK_FALSE(is_known_type(0x08));
}
