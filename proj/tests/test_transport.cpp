#include <sys/socket.h>

#include <thread>

#include "doctest.h"
#include "parity.hpp"

#include "almcast/roles.hpp"
#include "almcast/tcp.hpp"

using namespace almcast;
using namespace almcast::transport;

namespace {

// A listener that never accepts. Once its backlog is full, further SYNs are
// dropped, so new connects hang until a timeout.
struct Blackhole {
  Socket listener;
  Endpoint addr;
  std::vector<ConnectResult> fillers;

  Blackhole() {
    listener = listen_on({"127.0.0.1", 0}, 0);
    addr = local_endpoint(listener);
    // Backlog 0 still admits one connection; take a couple to be sure.
    for (int i = 0; i < 3; ++i) {
      auto r = tcp_connect(NodeId::eh(1), NodeId::oh(2), addr, 300, 0);
      if (!r.handle.established()) break;
      fillers.push_back(std::move(r));
    }
  }
};

// Accepts connections and echoes probes via Link.
struct EchoServer {
  Socket listener;
  Endpoint addr;
  std::thread th;
  std::vector<std::unique_ptr<Link>> links;
  std::mutex mu;

  EchoServer() {
    listener = listen_on({"127.0.0.1", 0});
    addr = local_endpoint(listener);
    th = std::thread([this] {
      for (;;) {
        Socket s = accept_one(listener);
        if (!s.valid()) return;
        auto l = std::make_unique<Link>(std::move(s), ConnectionHandle{});
        l->start(nullptr, nullptr);
        std::lock_guard lk(mu);
        links.push_back(std::move(l));
      }
    });
  }
  ~EchoServer() {
    listener.shutdown();
    th.join();
  }
};

}  // namespace

TEST_CASE("loopback connect is established quickly") {
  EchoServer srv;
  auto r = tcp_connect(NodeId::eh(1), NodeId::oh(2), srv.addr, std::nullopt);
  REQUIRE(r.handle.established());
  CHECK(r.handle.conn_time() < 100);
  CHECK(r.handle.src == NodeId::eh(1));
  CHECK(r.handle.dst == NodeId::oh(2));
}

TEST_CASE("connect to a closed port is refused") {
  Socket tmp = listen_on({"127.0.0.1", 0});
  const Endpoint addr = local_endpoint(tmp);
  tmp.reset();
  auto r = tcp_connect(NodeId::eh(1), NodeId::oh(2), addr, 2000);
  CHECK(r.handle.state == ConnState::Failed);
  CHECK(r.handle.reason == FailReason::Refused);
}

TEST_CASE("blackholed address with an application timeout fails at the timeout") {
  Blackhole bh;
  auto r = tcp_connect(NodeId::eh(1), NodeId::oh(2), bh.addr, 1500);
  CHECK(r.handle.state == ConnState::Failed);
  CHECK(r.handle.reason == FailReason::AppTimeout);
  CHECK(r.handle.conn_time() == doctest::Approx(1500).epsilon(0.34));
  CHECK_FALSE(r.socket.valid());  // the attempt was abandoned
}

TEST_CASE("blackholed address, app_timeout 10000 -> AppTimeout at about 10 s") {
  Blackhole bh;
  auto r = tcp_connect(NodeId::eh(1), NodeId::oh(2), bh.addr, 10000);
  CHECK(r.handle.reason == FailReason::AppTimeout);
  CHECK(std::abs(r.handle.conn_time() - 10000) <= 500);
}

TEST_CASE("blackholed address without an application timeout fails with the OS budget") {
  Blackhole bh;
  // One SYN retransmission: the kernel gives up after about 3 s.
  auto r = tcp_connect(NodeId::eh(1), NodeId::oh(2), bh.addr, std::nullopt, 1);
  CHECK(r.handle.state == ConnState::Failed);
  CHECK(r.handle.reason == FailReason::OsTimeout);
  CHECK(r.handle.conn_time() > 1000);
}

TEST_CASE("probe round trip on loopback") {
  EchoServer srv;
  auto r = tcp_connect(NodeId::eh(1), NodeId::oh(2), srv.addr, 2000);
  REQUIRE(r.handle.established());
  std::array<Millis, 3> s{};
  for (int i = 0; i < 3; ++i) {
    s[i] = probe_roundtrip(r.socket, static_cast<std::uint64_t>(i));
    CHECK(std::isfinite(s[i]));
    CHECK(s[i] < 50);
  }
  CHECK(measurement::cumm_lat(s) == doctest::Approx(s[0] + s[1] + s[2]));
}

TEST_CASE("echo with the wrong sequence number is a protocol error") {
  Socket listener = listen_on({"127.0.0.1", 0});
  const Endpoint addr = local_endpoint(listener);
  std::thread peer([&] {
    Socket s = accept_one(listener);
    auto f = recv_frame(s, 2000);
    if (f) send_frame(s, make_probe_echo(probe_seq(*f) + 1));
    recv_frame(s, 2000);  // wait for the client to hang up
  });
  auto r = tcp_connect(NodeId::eh(1), NodeId::oh(2), addr, 2000);
  REQUIRE(r.handle.established());
  CHECK_THROWS_AS(probe_roundtrip(r.socket, 7), ProtocolError);
  r.socket.reset();
  peer.join();
}

TEST_CASE("probe times out when the peer never answers") {
  Socket listener = listen_on({"127.0.0.1", 0});
  const Endpoint addr = local_endpoint(listener);
  auto r = tcp_connect(NodeId::eh(1), NodeId::oh(2), addr, 2000);
  REQUIRE(r.handle.established());
  CHECK(probe_roundtrip(r.socket, 1, 200) == kInfinity);
}

TEST_CASE("Link probes in both directions and reports remote close") {
  Socket listener = listen_on({"127.0.0.1", 0});
  const Endpoint addr = local_endpoint(listener);
  auto r = tcp_connect(NodeId::oh(1), NodeId::oh(2), addr, 2000);
  REQUIRE(r.handle.established());
  Socket accepted = accept_one(listener);

  std::atomic<int> closed{0};
  Link a(std::move(r.socket), r.handle);
  Link b(std::move(accepted), ConnectionHandle{});
  a.start(nullptr, [&](Link&) { ++closed; });
  b.start(nullptr, nullptr);
  CHECK(a.probe(1, 2000) < 50);
  CHECK(b.probe(2, 2000) < 50);
  b.close();
  for (int i = 0; i < 100 && closed == 0; ++i) std::this_thread::sleep_for(std::chrono::milliseconds(10));
  CHECK(closed == 1);
  CHECK(a.probe(3, 200) == kInfinity);
}

TEST_CASE("garbage on a Link is counted, not fatal") {
  Socket listener = listen_on({"127.0.0.1", 0});
  const Endpoint addr = local_endpoint(listener);
  auto r = tcp_connect(NodeId::oh(1), NodeId::oh(2), addr, 2000);
  REQUIRE(r.handle.established());
  Socket accepted = accept_one(listener);
  std::atomic<bool> closed{false};
  Link b(std::move(accepted), ConnectionHandle{});
  b.start(nullptr, [&](Link&) { closed = true; });
  const std::uint8_t junk[] = {0x00, 0x01, 0x02, 0x03, 0x04, 0x05, 0x06, 0x07};
  send_all(r.socket, junk);
  for (int i = 0; i < 100 && !closed; ++i) std::this_thread::sleep_for(std::chrono::milliseconds(10));
  CHECK(b.decode_errors() >= 1);
  CHECK(closed);
}

TEST_CASE("peer lists") {
  const auto peers = parse_peers("# overlay hosts\n1 127.0.0.1:7001\n\n2 10.0.0.2:7002  # second\n");
  REQUIRE(peers.size() == 2);
  CHECK(peers[0].id == NodeId::oh(1));
  CHECK(peers[1].addr == Endpoint{"10.0.0.2", 7002});
  CHECK(parse_peers(format_peers(peers)) == peers);
  CHECK_THROWS_AS(parse_peers("x 127.0.0.1:1\n"), Error);
  CHECK_THROWS_AS(parse_peers("1\n"), Error);
  CHECK_THROWS(Endpoint::parse("nohost"));
}

TEST_CASE("quantize") {
  CHECK(quantize(149, 100) == 100);
  CHECK(quantize(151, 100) == 200);
  CHECK(quantize(3.3, 0) == 3.3);
  CHECK(quantize(kInfinity, 100) == kInfinity);
}

TEST_CASE("loopback OH servers build a complete overlay") {
  ClusterSpec spec;
  spec.oh_count = 4;
  spec.eh_count = 0;
  spec.overlay.completion_deadline_ms = 5000;
  auto r = run_loopback_cluster(spec);
  CHECK(r.errors.empty());
  REQUIRE(r.construction);
  CHECK(r.construction->links.size() == 6);
  for (const auto& st : r.oh_states) CHECK(st.finalized);
}

TEST_CASE("simulator and loopback transport agree on links and assignments") {
  const auto sim = parity::simulated();
  const auto real = parity::loopback();
  for (const auto& e : sim.errors) MESSAGE("sim: " << e);
  for (const auto& e : real.errors) MESSAGE("real: " << e);
  CHECK(sim.errors.empty());
  CHECK(real.errors.empty());
  REQUIRE(sim.links.size() == 3);
  CHECK(real.links == sim.links);
  REQUIRE(sim.assignments.size() == 5);
  CHECK(real.assignments == sim.assignments);
  for (const auto& a : sim.assignments) CHECK(a.oh == (a.eh.id <= 7 ? NodeId::oh(1) : NodeId::oh(2)));
}
