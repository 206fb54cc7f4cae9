#include <random>
#include <set>

#include "doctest.h"

#include "almcast/overlay.hpp"
#include "almcast/simnet.hpp"
#include "almcast/world.hpp"

using namespace almcast;
using namespace almcast::overlay;

namespace {

ConnectionHandle handle(std::uint64_t serial, NodeId src, NodeId dst, ConnState st, Millis opened, Millis resolved,
                        FailReason why = FailReason::None) {
  ConnectionHandle h;
  h.serial = serial;
  h.src = src;
  h.dst = dst;
  h.opened_at = opened;
  if (st != ConnState::Pending) h.transition(st, resolved, why);
  return h;
}

// Node `self` with one established outgoing and one established incoming
// connection to `peer`.
OverlayNodeState duplicated(NodeId self, NodeId peer) {
  auto s = make_state(self, {peer}, 0);
  s.cout.push_back(handle(1, self, peer, ConnState::Established, 0, 5));
  s.cin.push_back(handle(2, peer, self, ConnState::Established, 0, 6));
  return s;
}

struct FixedProber : Prober {
  std::map<std::uint64_t, Millis> rtt;
  Millis probe(const ConnectionHandle& c) override { return rtt.at(c.serial); }
};

simnet::SimConfig lab(std::size_t n, std::uint64_t seed, double sigma) {
  simnet::SimConfig c;
  c.seed = seed;
  const auto topo = world::Topology::standard(n, 0);
  c.nodes.push_back({topo.mh, "Lab", 0, 0});
  for (const auto& o : topo.oh) c.nodes.push_back({o, "Lab", 0.1 * static_cast<double>(o.id % 5), 1});
  c.connect_time_model[simnet::PairClass::SameRegion] = {150, sigma};
  c.rtt_jitter_ms = 30;
  c.accept_service_ms = 5;
  return c;
}

}  // namespace

TEST_CASE("start_connection_sequences: one pending attempt per peer") {
  const NodeId a = NodeId::oh(1), b = NodeId::oh(2), c = NodeId::oh(3);
  auto s = start_connection_sequences(make_state(a, {b, c}, 0));
  REQUIRE(s.cout.size() == 2);
  CHECK(s.cout[0].dst == b);
  CHECK(s.cout[1].dst == c);
  for (const auto& h : s.cout) CHECK(h.pending());

  CHECK(start_connection_sequences(make_state(a, {b}, 0)).cout.size() == 1);

  std::vector<NodeId> forty;
  for (std::uint32_t i = 1; i <= 40; ++i) forty.push_back(NodeId::oh(i));
  for (std::uint32_t self = 1; self <= 40; ++self) {
    auto st = start_connection_sequences(make_state(NodeId::oh(self), forty, 0));
    CHECK(st.cout.size() == 39);
  }
}

TEST_CASE("wait_for_completion") {
  const NodeId a = NodeId::oh(1), b = NodeId::oh(2), c = NodeId::oh(3);
  SUBCASE("both succeed: resolution at the later completion") {
    auto s = start_connection_sequences(make_state(a, {b, c}, 0));
    record_outgoing(s, handle(0, a, b, ConnState::Established, 0, 10));
    record_outgoing(s, handle(1, a, c, ConnState::Established, 0, 30));
    s = wait_for_completion(s, 21000);
    CHECK(*s.completed_at == 30);
    CHECK(s.cout.size() == 2);
  }
  SUBCASE("no attempts: immediate, empty") {
    auto s = wait_for_completion(start_connection_sequences(make_state(a, {}, 7)), 21000);
    CHECK(s.cout.empty());
    CHECK(*s.completed_at == 7);
  }
  SUBCASE("a peer that never answers fails with Timeout at the deadline") {
    // Peer 3 is down and the OS budget (30 s) outlasts the 21 s deadline, so
    // the attempt is still pending when the wait ends.
    simnet::SimConfig cfg;
    cfg.nodes = {{a, "Lab", 0, 0}, {b, "Lab", 0, 0}, {c, "Lab", 0, 0}};
    cfg.connect_time_model[simnet::PairClass::SameRegion] = {40, 0};
    cfg.os_timeout_ms = 30000;
    cfg.crash_schedule = {{3, 0}};
    simnet::Simulator sim(cfg);
    auto s = start_connection_sequences(make_state(a, {b, c}, 0));
    for (auto& h : s.cout) {
      h.serial = sim.sim_connect(a.id, h.dst.id, [&](const ConnectionHandle& r) { record_outgoing(s, r); });
    }
    sim.run(21000);
    s = wait_for_completion(s, 21000);
    REQUIRE(s.cout.size() == 1);
    CHECK(s.cout[0].dst == b);
    CHECK(s.cout[0].resolved_at == 40);
    REQUIRE(s.failed.size() == 1);
    CHECK(s.failed[0].dst == c);
    CHECK(s.failed[0].reason == FailReason::Timeout);
    CHECK(s.failed[0].resolved_at == 21000);
    CHECK(*s.completed_at == 21000);
  }
}

TEST_CASE("run_pair_probe") {
  const NodeId a = NodeId::oh(1), b = NodeId::oh(2);
  const auto out = handle(1, a, b, ConnState::Established, 0, 5);
  const auto in = handle(2, b, a, ConnState::Established, 0, 6);
  FixedProber p;
  p.rtt = {{1, 40}, {2, 40}};
  auto r = run_pair_probe(out, in, p);
  CHECK(r.meas_out == 40);
  CHECK(r.meas_in == 40);
  p.rtt[2] = kInfinity;
  r = run_pair_probe(out, in, p);
  CHECK(r.meas_out == 40);
  CHECK(r.meas_in == kInfinity);
  CHECK_THROWS_AS(run_pair_probe(out, out, p), ProtocolError);
}

TEST_CASE("symmetric sim link: both directions see the same RTT") {
  simnet::SimConfig cfg;
  cfg.nodes = {{NodeId::oh(1), "A", 0, 0}, {NodeId::oh(2), "B", 0, 0}};
  cfg.region_rtt_ms["A|B"] = 40;
  simnet::Simulator sim(cfg);
  std::vector<ConnectionHandle> hs;
  sim.sim_connect(1, 2, [&](const ConnectionHandle& h) { hs.push_back(h); });
  sim.sim_connect(2, 1, [&](const ConnectionHandle& h) { hs.push_back(h); });
  sim.run();
  REQUIRE(hs.size() == 2);
  CHECK(sim.rtt_sample(hs[0], 1, 0) == 40);
  CHECK(sim.rtt_sample(hs[1], 1, 0) == 40);
}

TEST_CASE("eliminate_duplicates examples") {
  const NodeId a = NodeId::oh(1), b = NodeId::oh(2);
  SUBCASE("meas_out=10, meas_in=8: outgoing ended") {
    auto s = eliminate_duplicates(duplicated(a, b), {{b, {10, 8}}});
    CHECK(s.cout.empty());
    REQUIRE(s.cin.size() == 1);
    REQUIRE(s.ended.size() == 1);
    CHECK(s.ended[0].serial == 1);
  }
  SUBCASE("meas_out=8, meas_in=10: outgoing retained") {
    auto s = eliminate_duplicates(duplicated(a, b), {{b, {8, 10}}});
    CHECK(s.cout.size() == 1);
    CHECK(s.cin.empty());
  }
  SUBCASE("tie: connection initiated by the lower id retained") {
    auto low = eliminate_duplicates(duplicated(a, b), {{b, {9, 9}}});
    CHECK(low.cout.size() == 1);
    auto high = eliminate_duplicates(duplicated(b, a), {{a, {9, 9}}});
    CHECK(high.cin.size() == 1);
    CHECK(high.cout.empty());
  }
  SUBCASE("listing rule inverts the choice") {
    auto s = eliminate_duplicates(duplicated(a, b), {{b, {10, 8}}}, EliminationRule::Listing);
    CHECK(s.cout.size() == 1);
    CHECK(s.cin.empty());
  }
  SUBCASE("missing probe result: unresolved and reported") {
    auto s = eliminate_duplicates(duplicated(a, b), {});
    CHECK(s.cout.size() == 1);
    CHECK(s.cin.size() == 1);
    CHECK(s.protocol_errors.size() == 1);
  }
  SUBCASE("single direction is kept without probing") {
    auto s = make_state(a, {b}, 0);
    s.cin.push_back(handle(2, b, a, ConnState::Established, 0, 6));
    s = eliminate_duplicates(s, {});
    CHECK(s.cin.size() == 1);
    CHECK(s.protocol_errors.empty());
  }
}

TEST_CASE("1000 random probe pairs: smaller latency retained and both endpoints agree") {
  std::mt19937_64 rng(2024);
  std::uniform_int_distribution<int> ms(1, 200);
  for (int i = 0; i < 1000; ++i) {
    const auto x = static_cast<std::uint32_t>(1 + rng() % 40);
    auto y = static_cast<std::uint32_t>(1 + rng() % 39);
    if (y >= x) ++y;
    const NodeId p = NodeId::oh(x), q = NodeId::oh(y);
    const Millis out = ms(rng);
    const Millis in = i % 5 == 0 ? out : ms(rng);  // force ties regularly
    // p's outgoing is q's incoming, so q sees the pair mirrored.
    auto sp = eliminate_duplicates(duplicated(p, q), {{q, {out, in}}});
    auto sq = make_state(q, {p}, 0);
    sq.cout.push_back(handle(2, q, p, ConnState::Established, 0, 6));
    sq.cin.push_back(handle(1, p, q, ConnState::Established, 0, 5));
    sq = eliminate_duplicates(sq, {{p, {in, out}}});
    const auto lp = links_of(sp);
    const auto lq = links_of(sq);
    REQUIRE(lp.size() == 1);
    REQUIRE(lq.size() == 1);
    CHECK(lp[0] == lq[0]);
    const NodeId initiator = lp[0].retained == Direction::AtoB ? lp[0].a : lp[0].b;
    if (out < in) CHECK(initiator == p);
    if (in < out) CHECK(initiator == q);
    if (in == out) CHECK(initiator == std::min(p, q));
  }
}

TEST_CASE("finalize_g_time") {
  auto s = finalize_g_time(make_state(NodeId::oh(1), {}, 100), 250);
  CHECK(s.g_time == 150);
  CHECK(s.t2 == 250);
  CHECK(finalize_g_time(make_state(NodeId::oh(1), {}, 0), 0).g_time == 0);
  CHECK_THROWS_AS(finalize_g_time(make_state(NodeId::oh(1), {}, 100), 99), InvariantViolation);
}

TEST_CASE("aggregate_construction") {
  const NodeId a = NodeId::oh(1), b = NodeId::oh(2), c = NodeId::oh(3);
  auto r = aggregate_construction({a, b, c}, {{a, 100}, {b, 250}, {c, 180}}, {});
  CHECK(r.overlay_time == 250);
  auto single = aggregate_construction({a}, {{a, 0}}, {});
  CHECK(single.overlay_time == 0);
  CHECK(single.links.empty());
  CHECK_THROWS_AS(aggregate_construction({a, b}, {{a, 1}}, {}), Error);

  std::vector<OverlayLink> links;
  std::map<NodeId, Millis> g;
  for (std::uint32_t i = 1; i <= 5; ++i) {
    g[NodeId::oh(i)] = i;
    for (std::uint32_t j = i + 1; j <= 5; ++j) {
      // Reported once from each endpoint, the second with swapped fields.
      links.push_back({NodeId::oh(i), NodeId::oh(j), Direction::AtoB, 1, 2, true});
      links.push_back({NodeId::oh(j), NodeId::oh(i), Direction::BtoA, 2, 1, true});
    }
  }
  auto five = aggregate_construction({}, g, links);
  CHECK(five.links.size() == 10);
  CHECK(five.overlay_time == 5);

  std::vector<OverlayLink> disagree = {{a, b, Direction::AtoB}, {a, b, Direction::BtoA}};
  CHECK_THROWS_AS(aggregate_construction({}, {}, disagree), ProtocolError);
}

TEST_CASE("OverlayNode: lower id decides, higher id awaits") {
  const NodeId a = NodeId::oh(1), b = NodeId::oh(2);
  OverlayNode na(a, {b}, {});
  OverlayNode nb(b, {a}, {});
  CHECK(na.start(0) == std::vector<NodeId>{b});
  nb.start(0);
  na.outgoing_issued(b, 10, 0);
  nb.outgoing_issued(a, 11, 0);
  na.outgoing_resolved(handle(10, a, b, ConnState::Established, 0, 20));
  nb.outgoing_resolved(handle(11, b, a, ConnState::Established, 0, 25));
  CHECK(na.incoming_established(handle(11, b, a, ConnState::Established, 0, 25)) == OverlayNode::Duplicate::None);
  CHECK(nb.incoming_established(handle(10, a, b, ConnState::Established, 0, 20)) == OverlayNode::Duplicate::None);
  CHECK(na.all_outgoing_resolved());

  const auto sa = na.complete_wait(25);
  const auto sb = nb.complete_wait(25);
  REQUIRE(sa.to_probe.size() == 1);
  CHECK(sa.awaiting.empty());
  CHECK(sb.to_probe.empty());
  CHECK(sb.awaiting == std::vector<NodeId>{a});
  CHECK_FALSE(na.ready_to_finalize());
  CHECK_FALSE(nb.ready_to_finalize());

  const auto loser = na.decide(b, {30, 12});  // incoming (b -> a) is faster
  REQUIRE(loser);
  CHECK(loser->serial == 10);
  nb.remote_ended(10);
  CHECK(na.ready_to_finalize());
  CHECK(nb.ready_to_finalize());
  na.finalize(40);
  nb.finalize(41);
  REQUIRE(na.links().size() == 1);
  CHECK(na.links()[0].retained == Direction::BtoA);
  CHECK(nb.links()[0].retained == Direction::BtoA);
  CHECK(na.state().g_time == 40);
}

TEST_CASE("OverlayNode: decision timeout keeps the lower id's connection") {
  const NodeId a = NodeId::oh(1), b = NodeId::oh(2);
  OverlayNode nb(b, {a}, {});
  nb.start(0);
  nb.outgoing_issued(a, 11, 0);
  nb.outgoing_resolved(handle(11, b, a, ConnState::Established, 0, 25));
  nb.incoming_established(handle(10, a, b, ConnState::Established, 0, 20));
  nb.complete_wait(30);
  const auto ended = nb.decision_timeout(a);
  REQUIRE(ended);
  CHECK(ended->serial == 11);
  CHECK(nb.ready_to_finalize());
  CHECK_FALSE(nb.decision_timeout(a));
}

TEST_CASE("OverlayNode: late second connection forms a duplicate") {
  const NodeId a = NodeId::oh(1), b = NodeId::oh(2);
  OverlayNode na(a, {b}, {});
  na.start(0);
  na.outgoing_issued(b, 10, 0);
  na.outgoing_resolved(handle(10, a, b, ConnState::Established, 0, 20));
  na.complete_wait(20);
  CHECK(na.ready_to_finalize());
  CHECK(na.incoming_established(handle(11, b, a, ConnState::Established, 5, 30)) == OverlayNode::Duplicate::Decide);
  CHECK(na.duplicate_pair(b));
  CHECK_FALSE(na.ready_to_finalize());
  na.decide(b, {5, 5});
  CHECK(na.ready_to_finalize());

  OverlayNode nb(b, {a}, {});
  nb.start(0);
  nb.outgoing_issued(a, 11, 0);
  nb.outgoing_resolved(handle(11, b, a, ConnState::Established, 0, 20));
  nb.complete_wait(20);
  CHECK(nb.incoming_established(handle(10, a, b, ConnState::Established, 5, 30)) == OverlayNode::Duplicate::Await);
}

TEST_CASE("failure-free simulated construction is a complete graph for n <= 40") {
  for (std::size_t n = 2; n <= 40; ++n) {
    world::WorldOptions o;
    o.measure = false;
    auto w = world::run_world(lab(n, 100 + n, 0.6), world::Topology::standard(n, 0), o, false);
    REQUIRE(w.construction);
    CHECK(w.protocol_errors.empty());
    const auto& r = *w.construction;
    CHECK(r.links.size() == n * (n - 1) / 2);
    std::set<std::pair<std::uint32_t, std::uint32_t>> seen;
    for (const auto& l : r.links) {
      CHECK(l.a < l.b);
      CHECK(seen.insert({l.a.id, l.b.id}).second);
      if (l.probed && l.meas_out != l.meas_in) {
        const bool keep_ab = l.meas_out < l.meas_in;
        CHECK((l.retained == Direction::AtoB) == keep_ab);
      }
    }
    for (std::uint32_t i = 1; i <= n; ++i)
      for (std::uint32_t j = i + 1; j <= n; ++j) CHECK(seen.contains({i, j}));

    Millis max_g = 0;
    bool equal = false;
    for (const auto& [node, g] : r.per_node_g_time) {
      CHECK(g <= r.overlay_time);
      max_g = std::max(max_g, g);
      equal = equal || g == r.overlay_time;
    }
    CHECK(equal);
    // Each node retains exactly one direction per peer.
    for (const auto& st : w.oh_states) CHECK(links_of(st).size() == n - 1);
  }
}

TEST_CASE("construction is deterministic per seed") {
  world::WorldOptions o;
  o.measure = false;
  auto a = world::run_world(lab(10, 9, 0.8), world::Topology::standard(10, 0), o, false);
  auto b = world::run_world(lab(10, 9, 0.8), world::Topology::standard(10, 0), o, false);
  REQUIRE(a.construction);
  REQUIRE(b.construction);
  CHECK(a.construction->links == b.construction->links);
  CHECK(a.construction->per_node_g_time == b.construction->per_node_g_time);
}
