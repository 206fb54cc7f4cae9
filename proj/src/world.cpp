#include "almcast/world.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <map>
#include <memory>

#include <fmt/format.h>

#include "almcast/rng.hpp"

namespace almcast::world {

using distribution::Assignment;
using measurement::LatencyRecord;
using measurement::MeasurementReport;
using measurement::TargetProbe;
using simnet::EventKind;

Topology Topology::standard(std::size_t oh_count, std::size_t eh_count) {
  Topology t;
  t.mh = NodeId::mh(0);
  for (std::size_t i = 0; i < oh_count; ++i) t.oh.push_back(NodeId::oh(static_cast<std::uint32_t>(1 + i)));
  for (std::size_t i = 0; i < eh_count; ++i)
    t.eh.push_back(NodeId::eh(static_cast<std::uint32_t>(1 + oh_count + i)));
  return t;
}

std::vector<MeasurementReport> WorldResult::first_reports() const {
  std::vector<MeasurementReport> out;
  for (const auto& e : eh)
    if (!e.rounds.empty()) out.push_back(e.rounds.front());
  return out;
}

namespace {

constexpr std::uint64_t kNoEvent = ~std::uint64_t{0};
constexpr std::uint64_t kJoinKey = 0x4a4f494e;

struct OhAgent {
  explicit OhAgent(overlay::OverlayNode n) : node(std::move(n)) {}
  overlay::OverlayNode node;
  std::deque<NodeId> queued;
  std::map<NodeId, std::uint64_t> issued;  // peer -> serial of the outgoing attempt
  std::size_t in_flight = 0;
  std::uint64_t deadline_event = kNoEvent;
  std::map<NodeId, std::uint64_t> decision_timers;
  std::uint64_t probe_seq = 0;
  bool wait_done = false;
};

struct TargetRun {
  TargetRun(NodeId eh, NodeId oh, const measurement::Strategy& s) : probe(eh, oh, s), oh(oh) {}
  TargetProbe probe;
  NodeId oh;
  std::uint64_t serial = kNoEvent;
  std::uint64_t timer = kNoEvent;
};

struct EhAgent {
  NodeId id;
  std::size_t index = 0;
  std::vector<NodeId> targets;
  std::vector<std::unique_ptr<TargetRun>> runs;
  std::vector<LatencyRecord> records;
  std::deque<std::size_t> queued;
  std::size_t active = 0;
  std::size_t done = 0;
  int round = 0;
  int epoch = 0;  // bumps on every round so stale callbacks can be told apart
  std::optional<NodeId> attached_to;
  bool finished = false;
  EhResult result;
};

class World {
 public:
  World(simnet::SimConfig config, const Topology& topo, const WorldOptions& opts, bool logging)
      : sim_(std::move(config), logging),
        topo_(topo),
        opts_(opts),
        mh_(make_params(topo, opts), opts.mh_service) {
    strategy_ = opts_.strategy;
    if (strategy_.kind == measurement::Strategy::Kind::Partitioned && !strategy_.plan) {
      strategy_ = strategy_.with_plan(distribution::make_partition_plan(
          topo_.oh, static_cast<std::uint32_t>(topo_.eh.size()), distribution::default_group_count(topo_.oh.size())));
    }
    strategy_.validate();
    for (std::size_t i = 0; i < topo_.oh.size(); ++i) {
      oh_index_[topo_.oh[i].id] = i;
      ohs_.push_back(std::make_unique<OhAgent>(overlay::OverlayNode(topo_.oh[i], topo_.oh, opts_.overlay)));
    }
    for (std::size_t i = 0; i < topo_.eh.size(); ++i) {
      auto e = std::make_unique<EhAgent>();
      e->id = topo_.eh[i];
      e->index = i;
      e->result.eh = e->id;
      eh_index_[e->id.id] = i;
      ehs_.push_back(std::move(e));
    }
    sim_.on_crash([this](std::uint32_t node) { on_crash(node); });
    sim_.on_link_failure([this](std::uint32_t a, std::uint32_t b) { on_link_failure(a, b); });
  }

  WorldResult run() {
    for (const NodeId& oh : topo_.oh) {
      const double load = sim_.profile(oh.id).load_factor;
      sim_.send_message(oh.id, topo_.mh.id, "LOAD_REPORT",
                        [this, oh, load] { mh_.update_load({oh, 0, load, sim_.now()}); });
    }
    if (opts_.construct_overlay) {
      for (std::size_t i = 0; i < ohs_.size(); ++i) start_construction(i);
    }
    if (opts_.measure && !ehs_.empty()) {
      if (opts_.eh_sequential) {
        sim_.schedule(opts_.eh_start_ms, EventKind::TimerFired, ehs_[0]->id.id, [this] { start_eh(0); });
      } else {
        for (std::size_t k = 0; k < ehs_.size(); ++k) {
          Millis at = opts_.eh_start_ms;
          if (opts_.eh_join_spread_ms > 0) {
            KeyedStream s(sim_.config().seed, {kJoinKey, ehs_[k]->id.id});
            at += sim_.quantize(s.uniform() * opts_.eh_join_spread_ms);
          }
          sim_.schedule(at, EventKind::TimerFired, ehs_[k]->id.id, [this, k] { start_eh(k); });
        }
      }
    }

    WorldResult out;
    out.truncated = !sim_.run();
    out.end_time = sim_.now();
    out.events = sim_.events_executed();

    if (opts_.construct_overlay) collect_construction(out);
    for (auto& e : ehs_) out.eh.push_back(std::move(e->result));
    out.responses = std::move(responses_);
    out.assignments = mh_.assignments();
    out.readmissions = std::move(readmissions_);
    out.mh_budget_violations = mh_.budget_violations();
    out.log = std::move(sim_.log());
    return out;
  }

 private:
  static distribution::DistributeParams make_params(const Topology& topo, const WorldOptions& opts) {
    distribution::DistributeParams p = opts.distribute;
    if (opts.default_capacity_cap) p.capacity_cap = distribution::default_capacity_cap(topo.eh.size(), topo.oh.size());
    return p;
  }

  bool is_oh(std::uint32_t id) const { return oh_index_.contains(id); }
  OhAgent& oh(std::uint32_t id) { return *ohs_[oh_index_.at(id)]; }

  // ------------------------------------------------------------ overlay

  void start_construction(std::size_t i) {
    OhAgent& a = *ohs_[i];
    const NodeId self = topo_.oh[i];
    const auto peers = a.node.start(sim_.now());
    a.queued.assign(peers.begin(), peers.end());
    sim_.note_lazy(self.id, "overlay_start", [&] { return fmt::format("peers={}", peers.size()); });
    a.deadline_event = sim_.schedule(sim_.now() + opts_.overlay.completion_deadline_ms, EventKind::TimerFired,
                                     self.id, [this, i] { on_wait_deadline(i); });
    pump_overlay(i);
    if (peers.empty()) complete_wait(i);
  }

  void pump_overlay(std::size_t i) {
    OhAgent& a = *ohs_[i];
    const NodeId self = topo_.oh[i];
    const std::size_t cap = opts_.overlay.max_parallel_connects;
    while (!a.queued.empty() && (cap == 0 || a.in_flight < cap)) {
      const NodeId peer = a.queued.front();
      a.queued.pop_front();
      ++a.in_flight;
      const std::uint64_t serial = sim_.sim_connect(
          self.id, peer.id, [this, i](const ConnectionHandle& h) { on_overlay_resolved(i, h); });
      a.issued[peer] = serial;
      a.node.outgoing_issued(peer, serial, sim_.connection(serial).opened_at);
    }
  }

  void on_overlay_resolved(std::size_t i, const ConnectionHandle& h) {
    OhAgent& a = *ohs_[i];
    --a.in_flight;
    if (a.wait_done) return;
    a.node.outgoing_resolved(h);
    if (h.established()) deliver_incoming(h);
    pump_overlay(i);
    if (a.queued.empty() && a.node.all_outgoing_resolved()) complete_wait(i);
  }

  void deliver_incoming(const ConnectionHandle& h) {
    if (!is_oh(h.dst.id)) return;
    OhAgent& b = oh(h.dst.id);
    handle_duplicate(h.dst.id, h.src, b.node.incoming_established(h));
  }

  void handle_duplicate(std::uint32_t self, NodeId peer, overlay::OverlayNode::Duplicate d) {
    using D = overlay::OverlayNode::Duplicate;
    if (d == D::Decide) probe_pair(self, peer);
    if (d == D::Await) arm_decision_timer(self, peer);
  }

  void on_wait_deadline(std::size_t i) {
    OhAgent& a = *ohs_[i];
    a.deadline_event = kNoEvent;
    if (a.wait_done) return;
    a.queued.clear();
    for (const auto& [peer, serial] : a.issued) {
      if (sim_.connection(serial).pending()) sim_.abandon(serial, FailReason::Timeout);
    }
    complete_wait(i);
  }

  void complete_wait(std::size_t i) {
    OhAgent& a = *ohs_[i];
    const NodeId self = topo_.oh[i];
    if (a.wait_done || !sim_.alive(self.id)) return;
    a.wait_done = true;
    if (a.deadline_event != kNoEvent) sim_.cancel(a.deadline_event);
    auto snap = a.node.complete_wait(sim_.now());
    sim_.note_lazy(self.id, "overlay_wait_done", [&] {
      return fmt::format("established={};failed={};decide={};await={}", a.node.state().cout.size(),
                         a.node.state().failed.size(), snap.to_probe.size(), snap.awaiting.size());
    });
    for (const auto& pair : snap.to_probe) probe_pair(self.id, pair.first.dst);
    for (const NodeId& peer : snap.awaiting) arm_decision_timer(self.id, peer);
    try_finalize(self.id);
  }

  void probe_pair(std::uint32_t self, NodeId peer) {
    OhAgent& a = oh(self);
    auto pair = a.node.duplicate_pair(peer);
    if (!pair) {
      a.node.decide(peer, {});
      try_finalize(self);
      return;
    }
    struct Pending {
      overlay::ProbeResult r;
      int left = 2;
    };
    auto st = std::make_shared<Pending>();
    auto finish = [this, self, peer, st] {
      if (--st->left > 0) return;
      OhAgent& a2 = oh(self);
      auto loser = a2.node.decide(peer, st->r);
      sim_.note_lazy(self, "dup_decision", [&] {
        return fmt::format("peer={};out={};in={};kept={}", peer.id, st->r.meas_out, st->r.meas_in,
                           !loser ? "none" : (loser->src.id == self ? "in" : "out"));
      });
      if (loser) end_connection(self, *loser);
      try_finalize(self);
    };
    const std::uint64_t seq = a.probe_seq++;
    probe_one(self, pair->first.serial, seq, [st, finish](Millis rtt) {
      st->r.meas_out = rtt;
      finish();
    });
    probe_one(self, pair->second.serial, seq, [st, finish](Millis rtt) {
      st->r.meas_in = rtt;
      finish();
    });
  }

  void probe_one(std::uint32_t prober, std::uint64_t serial, std::uint64_t seq, std::function<void(Millis)> done) {
    if (!sim_.connection(serial).established()) {
      sim_.schedule(sim_.now(), EventKind::TimerFired, prober, [done = std::move(done)] { done(kInfinity); });
      return;
    }
    sim_.sim_rtt(serial, prober, seq, opts_.overlay.probe_bytes, std::move(done));
  }

  void end_connection(std::uint32_t self, const ConnectionHandle& h) {
    sim_.close(h.serial);
    const std::uint32_t other = h.src.id == self ? h.dst.id : h.src.id;
    const std::uint64_t serial = h.serial;
    sim_.send_message(self, other, "CLOSE", [this, other, self, serial] {
      OhAgent& b = oh(other);
      b.node.remote_ended(serial);
      const NodeId peer = NodeId::oh(self);
      if (!b.node.awaiting().contains(peer)) {
        if (auto it = b.decision_timers.find(peer); it != b.decision_timers.end()) {
          sim_.cancel(it->second);
          b.decision_timers.erase(it);
        }
      }
      try_finalize(other);
    });
  }

  void arm_decision_timer(std::uint32_t self, NodeId peer) {
    OhAgent& a = oh(self);
    if (a.decision_timers.contains(peer)) return;
    a.decision_timers[peer] = sim_.schedule(
        sim_.now() + opts_.overlay.decision_wait_ms, EventKind::TimerFired, self, [this, self, peer] {
          OhAgent& a2 = oh(self);
          a2.decision_timers.erase(peer);
          if (auto loser = a2.node.decision_timeout(peer)) {
            sim_.note_lazy(self, "decision_timeout", [&] { return fmt::format("peer={}", peer.id); });
            end_connection(self, *loser);
          }
          try_finalize(self);
        });
  }

  void try_finalize(std::uint32_t self) {
    OhAgent& a = oh(self);
    if (!sim_.alive(self) || !a.node.ready_to_finalize()) return;
    a.node.finalize(sim_.now());
    sim_.note_lazy(self, "overlay_complete", [&] {
      return fmt::format("g_time={};links={}", a.node.state().g_time, a.node.links().size());
    });
  }

  void start_reconnect(std::uint32_t self, NodeId peer, int attempt) {
    if (!sim_.alive(self)) return;
    OhAgent& a = oh(self);
    if (a.node.has_link(peer)) return;  // the peer reconnected first
    if (attempt > opts_.overlay.reconnect_attempts) {
      sim_.note_lazy(self, "reconnect_gave_up", [&] { return fmt::format("peer={}", peer.id); });
      return;
    }
    sim_.note_lazy(self, "reconnect_attempt", [&] { return fmt::format("peer={};attempt={}", peer.id, attempt); });
    sim_.sim_connect(self, peer.id, [this, self, peer, attempt](const ConnectionHandle& h) {
      if (!h.established()) {
        start_reconnect(self, peer, attempt + 1);
        return;
      }
      sim_.note_lazy(self, "reconnected", [&] { return fmt::format("peer={};conn={}", peer.id, h.serial); });
      handle_duplicate(self, peer, oh(self).node.reconnected(h));
      deliver_incoming(h);
    });
  }

  void on_link_failure(std::uint32_t a, std::uint32_t b) {
    if (!is_oh(a) || !is_oh(b) || !sim_.alive(a) || !sim_.alive(b)) return;
    for (auto [x, y] : {std::pair{a, b}, std::pair{b, a}}) {
      if (oh(x).node.link_lost(NodeId::oh(y), sim_.now())) start_reconnect(x, NodeId::oh(y), 1);
    }
  }

  void collect_construction(WorldResult& out) {
    std::vector<NodeId> expected;
    std::map<NodeId, Millis> g_times;
    std::vector<overlay::OverlayLink> links;
    for (std::size_t i = 0; i < ohs_.size(); ++i) {
      const auto& st = ohs_[i]->node.state();
      out.oh_states.push_back(st);
      for (const auto& e : st.protocol_errors) out.protocol_errors.push_back(e);
      if (!sim_.alive(topo_.oh[i].id)) continue;
      expected.push_back(topo_.oh[i]);
      if (st.finalized) g_times[topo_.oh[i]] = st.g_time;
      for (const auto& l : ohs_[i]->node.links()) links.push_back(l);
    }
    try {
      out.construction = overlay::aggregate_construction(expected, g_times, links);
    } catch (const Error& e) {
      out.protocol_errors.push_back(e.what());
    }
  }

  // ------------------------------------------------------------ end hosts

  void start_eh(std::size_t k) {
    EhAgent& e = *ehs_[k];
    e.result.started_at = sim_.now();
    e.round = 0;
    start_round(k);
  }

  void start_round(std::size_t k) {
    EhAgent& e = *ehs_[k];
    if (!sim_.alive(e.id.id)) return finish_eh(k);
    ++e.epoch;
    if (++e.round > opts_.max_measure_rounds) {
      sim_.note_lazy(e.id.id, "eh_gave_up", [&] { return fmt::format("rounds={}", e.round - 1); });
      return finish_eh(k);
    }
    e.targets = measurement::targets_for(e.index, strategy_, topo_.oh);
    e.runs.clear();
    e.records.assign(e.targets.size(), LatencyRecord{});
    e.queued.clear();
    e.active = 0;
    e.done = 0;
    for (std::size_t t = 0; t < e.targets.size(); ++t) {
      e.runs.push_back(std::make_unique<TargetRun>(e.id, e.targets[t], strategy_));
      e.queued.push_back(t);
    }
    sim_.note_lazy(e.id.id, "measure_start", [&] { return fmt::format("round={};targets={}", e.round, e.targets.size()); });
    if (e.targets.empty()) return finish_eh(k);
    pump_targets(k);
  }

  void pump_targets(std::size_t k) {
    EhAgent& e = *ehs_[k];
    const std::size_t cap = opts_.max_parallel_probes;
    while (!e.queued.empty() && (cap == 0 || e.active < cap)) {
      const std::size_t t = e.queued.front();
      e.queued.pop_front();
      ++e.active;
      TargetRun& r = *e.runs[t];
      const int epoch = e.epoch;
      sim_.note_lazy(e.id.id, "target_begin", [&] { return fmt::format("oh={};round={}", r.oh.id, e.round); });
      auto action = r.probe.begin(sim_.now());
      if (auto at = r.probe.timer_at()) {
        r.timer = sim_.schedule(*at, EventKind::TimerFired, e.id.id, [this, k, t, epoch] { on_target_timer(k, t, epoch); });
      }
      advance(k, t, action);
    }
  }

  bool current(std::size_t k, int epoch) const { return ehs_[k]->epoch == epoch; }

  void advance(std::size_t k, std::size_t t, TargetProbe::Action action) {
    EhAgent& e = *ehs_[k];
    TargetRun& r = *e.runs[t];
    const int round = e.epoch;
    switch (action) {
      case TargetProbe::Action::Connect:
        r.serial = sim_.sim_connect(e.id.id, r.oh.id, [this, k, t, round](const ConnectionHandle& h) {
          if (!current(k, round)) return;
          TargetRun& r2 = *ehs_[k]->runs[t];
          const auto next = r2.probe.on_connect(h, sim_.now());
          if (!r2.probe.connecting() && r2.timer != kNoEvent) {
            sim_.cancel(r2.timer);
            r2.timer = kNoEvent;
          }
          advance(k, t, next);
        });
        break;
      case TargetProbe::Action::Probe: {
        const std::uint64_t serial = r.probe.connection().serial;
        auto on_rtt = [this, k, t, round](Millis rtt) {
          if (!current(k, round)) return;
          advance(k, t, ehs_[k]->runs[t]->probe.on_probe(rtt, sim_.now()));
        };
        if (!sim_.connection(serial).established()) {
          sim_.schedule(sim_.now(), EventKind::TimerFired, e.id.id, [on_rtt] { on_rtt(kInfinity); });
        } else {
          sim_.sim_rtt(serial, e.id.id, static_cast<std::uint64_t>(r.probe.next_probe_seq()),
                       measurement::kProbeFrameBytes, on_rtt);
        }
        break;
      }
      case TargetProbe::Action::Done:
        target_done(k, t);
        break;
    }
  }

  void on_target_timer(std::size_t k, std::size_t t, int epoch) {
    if (!current(k, epoch)) return;
    TargetRun& r = *ehs_[k]->runs[t];
    r.timer = kNoEvent;
    if (!r.probe.connecting()) return;
    const bool app = strategy_.effective().kind == measurement::Strategy::Kind::AppTimeout;
    if (r.serial != kNoEvent) sim_.abandon(r.serial, app ? FailReason::AppTimeout : FailReason::Timeout);
    advance(k, t, r.probe.on_timer(sim_.now()));
  }

  void target_done(std::size_t k, std::size_t t) {
    EhAgent& e = *ehs_[k];
    TargetRun& r = *e.runs[t];
    if (r.timer != kNoEvent) {
      sim_.cancel(r.timer);
      r.timer = kNoEvent;
    }
    if (r.serial != kNoEvent) sim_.close(r.serial);
    e.records[t] = r.probe.record();
    sim_.note_lazy(e.id.id, "target_end", [&] {
      const auto& rec = e.records[t];
      return fmt::format("oh={};round={};status={};conn={};cumm={}", r.oh.id, e.round, rec.status_label(),
                         rec.conn_time, rec.cumm_lat);
    });
    ++e.done;
    --e.active;
    if (e.done == e.targets.size()) {
      send_report(k);
    } else {
      pump_targets(k);
    }
  }

  void send_report(std::size_t k) {
    EhAgent& e = *ehs_[k];
    MeasurementReport rep = measurement::make_report(e.id, e.records);
    sim_.note_lazy(e.id.id, "meas_report", [&] {
      return fmt::format("round={};m_i={};measured_pct={}", e.round, rep.m_i, rep.measured_percentage);
    });
    e.result.rounds.push_back(rep);
    sim_.send_message(e.id.id, topo_.mh.id, "MEAS_REPORT", [this, k, rep = std::move(rep)] { mh_receive(k, rep); });
  }

  void mh_receive(std::size_t k, const MeasurementReport& rep) {
    const std::uint32_t mh = topo_.mh.id;
    const NodeId eh = ehs_[k]->id;
    if (auto why = distribution::check_report(rep)) {
      sim_.note_lazy(mh, "mh_reject", [&] { return fmt::format("eh={};reason={}", eh.id, *why); });
      sim_.send_message(mh, eh.id, "REMEASURE", [this, k] { start_round(k); });
      return;
    }
    distribution::MhResponse resp = mh_.serve({rep, sim_.now()});
    responses_.push_back(resp);
    if (resp.assignment) {
      const Assignment a = *resp.assignment;
      sim_.note_lazy(mh, "assign", [&] {
        return fmt::format("eh={};oh={};cost={};overloaded={};rt={}", a.eh.id, a.oh.id, a.cost, a.overloaded ? 1 : 0,
                           resp.response_time);
      });
      sim_.schedule(resp.departure, EventKind::TimerFired, mh, [this, k, a] {
        sim_.send_message(topo_.mh.id, a.eh.id, "ASSIGN", [this, k, a] { on_assign(k, a); });
      });
    } else {
      sim_.note_lazy(mh, "remeasure", [&] { return fmt::format("eh={};rt={}", eh.id, resp.response_time); });
      sim_.schedule(resp.departure, EventKind::TimerFired, mh, [this, k, eh] {
        sim_.send_message(topo_.mh.id, eh.id, "REMEASURE", [this, k] { start_round(k); });
      });
    }
  }

  void on_assign(std::size_t k, const Assignment& a) {
    EhAgent& e = *ehs_[k];
    e.result.assignment = a;
    if (!opts_.attach) return finish_eh(k);
    sim_.sim_connect(e.id.id, a.oh.id, [this, k, a](const ConnectionHandle& h) {
      EhAgent& e2 = *ehs_[k];
      if (h.established()) {
        e2.attached_to = a.oh;
        e2.result.attached = true;
        sim_.note_lazy(e2.id.id, "eh_attached", [&] { return fmt::format("oh={};conn={}", a.oh.id, h.serial); });
        finish_eh(k);
      } else {
        sim_.note_lazy(e2.id.id, "attach_failed", [&] { return fmt::format("oh={}", a.oh.id); });
        start_round(k);
      }
    });
  }

  void finish_eh(std::size_t k) {
    EhAgent& e = *ehs_[k];
    e.result.finished_at = sim_.now();
    if (e.finished) return;
    e.finished = true;
    if (opts_.eh_sequential && k + 1 < ehs_.size()) start_eh(k + 1);
  }

  // ------------------------------------------------------------ failures

  void on_crash(std::uint32_t node) {
    if (!is_oh(node)) return;
    const NodeId failed = NodeId::oh(node);
    const Millis detect = sim_.now() + opts_.failure_detect_ms;

    sim_.schedule(detect, EventKind::TimerFired, topo_.mh.id, [this, failed] {
      Readmission r;
      r.failed_oh = failed;
      r.at = sim_.now();
      r.eh = mh_.oh_failed(failed);
      for (const NodeId& eh : r.eh)
        sim_.note_lazy(topo_.mh.id, "readmit", [&] { return fmt::format("eh={};oh={}", eh.id, failed.id); });
      readmissions_.push_back(std::move(r));
    });

    if (opts_.construct_overlay) {
      for (std::size_t i = 0; i < ohs_.size(); ++i) {
        const std::uint32_t self = topo_.oh[i].id;
        if (self == node) continue;
        sim_.schedule(detect, EventKind::TimerFired, self, [this, self, failed] {
          if (!sim_.alive(self)) return;
          if (oh(self).node.link_lost(failed, sim_.now())) {
            sim_.note_lazy(self, "link_lost", [&] { return fmt::format("peer={}", failed.id); });
            start_reconnect(self, failed, 1);
          }
          try_finalize(self);
        });
      }
    }

    for (std::size_t k = 0; k < ehs_.size(); ++k) {
      if (ehs_[k]->attached_to != failed) continue;
      sim_.schedule(detect, EventKind::TimerFired, ehs_[k]->id.id, [this, k, failed] {
        EhAgent& e = *ehs_[k];
        if (e.attached_to != failed || !sim_.alive(e.id.id)) return;
        e.attached_to.reset();
        e.result.attached = false;
        sim_.note_lazy(e.id.id, "eh_disconnected", [&] { return fmt::format("oh={}", failed.id); });
        // Reconnect to the designated OH first; measure again if it is gone.
        sim_.sim_connect(e.id.id, failed.id, [this, k, failed](const ConnectionHandle& h) {
          EhAgent& e2 = *ehs_[k];
          if (h.established()) {
            e2.attached_to = failed;
            e2.result.attached = true;
            return;
          }
          e2.finished = false;
          e2.round = 0;
          start_round(k);
        });
      });
    }
  }

  simnet::Simulator sim_;
  Topology topo_;
  WorldOptions opts_;
  measurement::Strategy strategy_;
  distribution::MonitorHost mh_;
  std::map<std::uint32_t, std::size_t> oh_index_;
  std::map<std::uint32_t, std::size_t> eh_index_;
  std::vector<std::unique_ptr<OhAgent>> ohs_;
  std::vector<std::unique_ptr<EhAgent>> ehs_;
  std::vector<distribution::MhResponse> responses_;
  std::vector<Readmission> readmissions_;
};

}  // namespace

WorldResult run_world(simnet::SimConfig config, const Topology& topo, const WorldOptions& options, bool logging) {
  World w(std::move(config), topo, options, logging);
  return w.run();
}

}  // namespace almcast::world
