#include <sys/wait.h>
#include <unistd.h>

#include <cmath>
#include <set>
#include <sstream>

#include "doctest.h"

#include "almcast/distribution.hpp"
#include "almcast/rng.hpp"
#include "almcast/simnet.hpp"
#include "almcast/world.hpp"

using namespace almcast;
using namespace almcast::simnet;

namespace {

// Two OH (1, 2) and one EH (3) in one region.
SimConfig small_config(std::uint64_t seed = 1) {
  SimConfig c;
  c.seed = seed;
  c.nodes = {{NodeId::oh(1), "Lab", 0, 0}, {NodeId::oh(2), "Lab", 0, 0}, {NodeId::eh(3), "Lab", 0, 0}};
  c.same_region_rtt_ms = 40;
  c.connect_time_model[PairClass::SameRegion] = {40, 0};
  return c;
}

struct Resolved {
  ConnectionHandle h;
  bool fired = false;
};

Resolved connect_once(Simulator& sim, std::uint32_t src, std::uint32_t dst) {
  Resolved r;
  sim.sim_connect(src, dst, [&](const ConnectionHandle& h) {
    r.h = h;
    r.fired = true;
  });
  sim.run();
  return r;
}

}  // namespace

TEST_CASE("degenerate connect model resolves at exactly at + median") {
  Simulator sim(small_config());
  sim.schedule(100, EventKind::TimerFired, 3, [&] {
    sim.sim_connect(3, 1, [&](const ConnectionHandle& h) {
      CHECK(h.established());
      CHECK(h.opened_at == 100);
      CHECK(h.resolved_at == 140);
    });
  });
  CHECK(sim.run());
}

TEST_CASE("certain SYN failure resolves every attempt at the OS timeout") {
  auto c = small_config();
  c.syn_fail_prob = 1;
  c.os_timeout_ms = 21000;
  Simulator sim(c);
  int fired = 0;
  for (int i = 0; i < 5; ++i)
    sim.sim_connect(3, 1 + i % 2, [&](const ConnectionHandle& h) {
      ++fired;
      CHECK(h.state == ConnState::Failed);
      CHECK(h.reason == FailReason::OsTimeout);
      CHECK(h.resolved_at == 21000);
    });
  sim.run();
  CHECK(fired == 5);
}

TEST_CASE("seeded connect times replay from the documented stream") {
  auto c = small_config(1234);
  c.connect_time_model[PairClass::SameRegion] = {300, 0.8};
  c.nodes[0].load_factor = 0.4;
  c.load_gain = 0.5;
  Simulator sim(c);
  std::vector<Millis> got;
  // Sequential attempts so no two share the accept queue; service time is 0.
  std::function<void(int)> next = [&](int k) {
    if (k == 10) return;
    sim.sim_connect(3, 1, [&, k](const ConnectionHandle& h) {
      got.push_back(h.conn_time());
      next(k + 1);
    });
  };
  next(0);
  sim.run();
  REQUIRE(got.size() == 10);
  for (std::uint64_t attempt = 0; attempt < 10; ++attempt) {
    KeyedStream s(1234, {0x434f4e4e, 3, 1, attempt});
    s.uniform();  // SYN failure draw
    const double u1 = s.uniform();
    const double u2 = s.uniform();
    const double z = std::sqrt(-2 * std::log(1 - u1)) * std::cos(2 * 3.14159265358979323846 * u2);
    const double expected = std::round(300 * std::exp(0.8 * z) * (1 + 0.4 * 0.5));
    CHECK(got[attempt] == expected);
  }
}

TEST_CASE("accept queue serializes simultaneous handshakes") {
  auto c = small_config();
  c.accept_service_ms = 100;
  Simulator sim(c);
  std::vector<Millis> at;
  for (int i = 0; i < 3; ++i) sim.sim_connect(3, 1, [&](const ConnectionHandle& h) { at.push_back(h.resolved_at); });
  sim.run();
  // SYNs arrive at 20, service runs 20-120, 120-220, 220-320, reply takes 20.
  CHECK(at == std::vector<Millis>{140, 240, 340});
}

TEST_CASE("load inflates the accept service time") {
  auto c = small_config();
  c.accept_service_ms = 10;
  c.load_sensitivity = 2;
  c.nodes[0].load_factor = 0.5;
  Simulator sim(c);
  CHECK(sim.accept_service(1) == doctest::Approx(40));
  CHECK(sim.accept_service(2) == doctest::Approx(10));
}

TEST_CASE("a backlog deeper than the OS timeout drops the SYN") {
  auto c = small_config();
  c.accept_service_ms = 1000;
  c.os_timeout_ms = 2500;
  Simulator sim(c);
  std::vector<ConnectionHandle> hs;
  for (int i = 0; i < 4; ++i) sim.sim_connect(3, 1, [&](const ConnectionHandle& h) { hs.push_back(h); });
  sim.run();
  REQUIRE(hs.size() == 4);
  std::sort(hs.begin(), hs.end(), [](auto& a, auto& b) { return a.serial < b.serial; });
  CHECK(hs[0].established());
  CHECK(hs[1].established());
  CHECK(hs[2].reason == FailReason::OsTimeout);
  CHECK(hs[2].resolved_at == 2500);
  CHECK(hs[3].reason == FailReason::OsTimeout);
}

TEST_CASE("crashed destination fails at the OS horizon, crashed source voids") {
  auto c = small_config();
  c.crash_schedule = {{1, 0}};
  Simulator sim(c);
  auto r = connect_once(sim, 3, 1);
  REQUIRE(r.fired);
  CHECK(r.h.reason == FailReason::OsTimeout);
  CHECK(r.h.resolved_at == c.os_timeout_ms);

  auto c2 = small_config();
  c2.crash_schedule = {{3, 0}};
  Simulator sim2(c2);
  sim2.run();
  auto r2 = connect_once(sim2, 3, 1);
  CHECK(r2.h.reason == FailReason::Voided);
}

TEST_CASE("abandon resolves now and keeps the callback silent") {
  Simulator sim(small_config());
  bool fired = false;
  const auto serial = sim.sim_connect(3, 1, [&](const ConnectionHandle&) { fired = true; });
  sim.schedule(5, EventKind::TimerFired, 3, [&] { sim.abandon(serial, FailReason::AppTimeout); });
  sim.run();
  CHECK_FALSE(fired);
  CHECK(sim.connection(serial).reason == FailReason::AppTimeout);
  CHECK(sim.connection(serial).resolved_at == 5);
}

TEST_CASE("RTT model: base plus processing") {
  auto c = small_config();
  Simulator sim(c);
  auto r = connect_once(sim, 3, 1);
  REQUIRE(r.h.established());
  Millis rtt = -1;
  sim.sim_rtt(r.h.serial, 3, 0, 1500, [&](Millis v) { rtt = v; });
  sim.run();
  CHECK(rtt == 40);

  c.nodes[0].processing_delay_ms = 5;
  c.nodes[2].processing_delay_ms = 5;
  Simulator sim2(c);
  auto r2 = connect_once(sim2, 3, 1);
  sim2.sim_rtt(r2.h.serial, 3, 0, 1500, [&](Millis v) { rtt = v; });
  sim2.run();
  CHECK(rtt == 50);
}

TEST_CASE("probe is lost when an endpoint crashes in flight") {
  auto c = small_config();
  c.probe_timeout_ms = 3000;
  c.crash_schedule = {{1, 50}};  // connect resolves at 40, the probe is in flight until 80
  Simulator sim(c);
  Millis rtt = 0, at = 0;
  sim.sim_connect(3, 1, [&](const ConnectionHandle& h) {
    sim.sim_rtt(h.serial, 3, 0, 1500, [&](Millis v) {
      rtt = v;
      at = sim.now();
    });
  });
  sim.run();
  CHECK(rtt == kInfinity);
  CHECK(at == 40 + 3000);
}

TEST_CASE("jittered RTT draws are identical across two processes") {
  auto draws = [] {
    auto c = small_config(77);
    c.rtt_jitter_ms = 25;
    c.clock_resolution_ms = 0.001;
    Simulator sim(c, false);
    auto r = connect_once(sim, 3, 1);
    std::ostringstream out;
    for (std::uint64_t i = 0; i < 1000; ++i) out << sim.rtt_sample(r.h, 3, i) << '\n';
    return out.str();
  };
  const std::string mine = draws();
  int fds[2];
  REQUIRE(pipe(fds) == 0);
  const pid_t pid = fork();
  REQUIRE(pid >= 0);
  if (pid == 0) {
    close(fds[0]);
    const std::string s = draws();
    const char* p = s.data();
    std::size_t left = s.size();
    while (left > 0) {
      const ssize_t n = write(fds[1], p, left);
      if (n <= 0) _exit(1);
      p += n;
      left -= static_cast<std::size_t>(n);
    }
    _exit(0);
  }
  close(fds[1]);
  std::string theirs;
  char buf[4096];
  for (ssize_t n; (n = read(fds[0], buf, sizeof buf)) > 0;) theirs.append(buf, static_cast<std::size_t>(n));
  close(fds[0]);
  int status = 0;
  waitpid(pid, &status, 0);
  CHECK(WIFEXITED(status));
  CHECK(theirs == mine);
  std::istringstream in(mine);
  std::set<std::string> distinct;
  for (std::string line; std::getline(in, line);) distinct.insert(line);
  CHECK(distinct.size() > 500);
}

TEST_CASE("events run in (time, ordinal) order and cancellation works") {
  Simulator sim(small_config());
  std::vector<int> order;
  sim.schedule(10, EventKind::TimerFired, 1, [&] { order.push_back(2); });
  sim.schedule(5, EventKind::TimerFired, 1, [&] { order.push_back(1); });
  sim.schedule(10, EventKind::TimerFired, 1, [&] { order.push_back(3); });
  const auto id = sim.schedule(7, EventKind::TimerFired, 1, [&] { order.push_back(99); });
  sim.cancel(id);
  sim.run();
  CHECK(order == std::vector<int>{1, 2, 3});
}

TEST_CASE("empty workload gives an empty log") {
  Simulator sim(small_config());
  CHECK(sim.run());
  CHECK(sim.log().entries().empty());
  CHECK_FALSE(sim.log().truncated());
}

TEST_CASE("events past the horizon truncate the log") {
  Simulator sim(small_config());
  sim.schedule(10, EventKind::TimerFired, 1, [&] { sim.note(1, "early", ""); });
  sim.schedule(1000, EventKind::TimerFired, 1, [&] { sim.note(1, "late", ""); });
  CHECK_FALSE(sim.run(500));
  CHECK(sim.log().truncated());
  REQUIRE(sim.log().entries().size() == 1);
  CHECK(sim.log().entries()[0].kind == "early");
}

TEST_CASE("event log CSV round trip") {
  EventLog log;
  log.append(0, 1, "a", "x=1;y=2");
  log.append(12.5, 3, "b", "");
  std::stringstream ss;
  log.write_csv(ss);
  const auto back = EventLog::read_csv(ss);
  REQUIRE(back.entries().size() == 2);
  CHECK(back.entries()[1].time == 12.5);
  CHECK(back.entries()[0].detail == "x=1;y=2");
  const auto d = parse_detail("x=1;y=2");
  CHECK(d.at("x") == "1");
  CHECK(d.at("y") == "2");
}

TEST_CASE("config validation and JSON round trip") {
  auto c = small_config();
  c.syn_fail_prob = 1.5;
  CHECK_THROWS_AS(c.validate(), Error);
  c = small_config();
  c.nodes.push_back(c.nodes[0]);
  CHECK_THROWS_AS(c.validate(), Error);
  c = small_config();
  c.crash_schedule = {{1, 500}};
  nlohmann::json j = c;
  const SimConfig back = j.get<SimConfig>();
  CHECK(nlohmann::json(back) == j);
}

TEST_CASE("3-OH construction yields 3 links and identical logs per seed") {
  auto c = small_config();
  c.nodes = {{NodeId::mh(0), "Lab", 0, 0},
             {NodeId::oh(1), "Lab", 0, 0},
             {NodeId::oh(2), "Lab", 0, 0},
             {NodeId::oh(3), "Lab", 0, 0}};
  c.connect_time_model[PairClass::SameRegion] = {200, 0.7};
  c.rtt_jitter_ms = 10;
  world::WorldOptions o;
  o.measure = false;
  auto run = [&] {
    auto w = world::run_world(c, world::Topology::standard(3, 0), o);
    std::ostringstream out;
    w.log.write_csv(out);
    return std::pair{w, out.str()};
  };
  auto [w1, log1] = run();
  auto [w2, log2] = run();
  REQUIRE(w1.construction);
  CHECK(w1.construction->links.size() == 3);
  CHECK(log1 == log2);
  CHECK_FALSE(log1.empty());
}

TEST_CASE("OH crash re-admits exactly the assignees recorded in the log") {
  SimConfig c;
  c.seed = 3;
  const auto topo = world::Topology::standard(3, 12);
  c.nodes.push_back({topo.mh, "Lab", 0, 0});
  for (const auto& o : topo.oh) c.nodes.push_back({o, "Lab", 0.2, 0});
  for (const auto& e : topo.eh) c.nodes.push_back({e, "Lab", 0, 0});
  c.connect_time_model[PairClass::SameRegion] = {50, 0.5};
  c.rtt_jitter_ms = 30;
  const Millis crash_at = 60000;
  c.crash_schedule = {{2, crash_at}};
  world::WorldOptions o;
  o.construct_overlay = false;
  o.eh_join_spread_ms = 20000;
  auto w = world::run_world(c, topo, o);

  // Rebuild the assignment list from the log up to the crash and apply the
  // failure handler to it.
  std::vector<distribution::Assignment> before;
  std::set<NodeId> readmitted;
  for (const auto& e : w.log.entries()) {
    const auto d = parse_detail(e.detail);
    if (e.kind == "assign" && e.time < crash_at)
      before.push_back({NodeId::eh(std::stoul(d.at("eh"))), NodeId::oh(std::stoul(d.at("oh")))});
    if (e.kind == "readmit") {
      CHECK(e.time >= crash_at);
      readmitted.insert(NodeId::eh(std::stoul(d.at("eh"))));
    }
  }
  const auto expected = distribution::handle_oh_failure(before, NodeId::oh(2));
  CHECK_FALSE(expected.empty());
  CHECK(readmitted == expected);
  for (const auto& a : w.assignments) CHECK(a.oh != NodeId::oh(2));
}
