#include "almcast/overlay.hpp"

#include <algorithm>

#include <fmt/format.h>

namespace almcast::overlay {

EliminationRule parse_elimination_rule(std::string_view s) {
  if (s == "prose") return EliminationRule::Prose;
  if (s == "listing") return EliminationRule::Listing;
  throw Error(fmt::format("unknown elimination rule '{}' (expected prose|listing)", s));
}

OverlayNodeState make_state(NodeId self, std::vector<NodeId> peers, Millis t1) {
  OverlayNodeState s;
  s.self = self;
  std::erase(peers, self);
  std::sort(peers.begin(), peers.end());
  peers.erase(std::unique(peers.begin(), peers.end()), peers.end());
  s.peers = std::move(peers);
  s.t1 = t1;
  return s;
}

OverlayNodeState start_connection_sequences(OverlayNodeState state) {
  if (!state.cout.empty()) throw InvariantViolation("start_connection_sequences: cout must be empty");
  state.cout.reserve(state.peers.size());
  for (const NodeId& peer : state.peers) {
    ConnectionHandle h;
    h.src = state.self;
    h.dst = peer;
    h.opened_at = state.t1;
    h.resolved_at = state.t1;
    state.cout.push_back(h);
  }
  return state;
}

void record_outgoing(OverlayNodeState& state, const ConnectionHandle& resolved) {
  for (auto& h : state.cout) {
    if (h.dst == resolved.dst && h.pending()) {
      h = resolved;
      return;
    }
  }
  throw ProtocolError(fmt::format("node {}: resolution for unknown attempt to {}", state.self.id, resolved.dst.id));
}

OverlayNodeState wait_for_completion(OverlayNodeState state, Millis deadline) {
  Millis last = state.t1;
  std::vector<ConnectionHandle> kept;
  for (auto& h : state.cout) {
    if (h.pending()) h.transition(ConnState::Failed, state.t1 + deadline, FailReason::Timeout);
    last = std::max(last, h.resolved_at);
    if (h.state == ConnState::Failed) {
      state.failed.push_back(h);
    } else {
      kept.push_back(h);
    }
  }
  state.cout = std::move(kept);
  state.completed_at = last;
  return state;
}

ProbeResult run_pair_probe(const ConnectionHandle& c_out, const ConnectionHandle& c_in, Prober& prober) {
  if (!c_out.established() || !c_in.established())
    throw ProtocolError("run_pair_probe: both connections must be established");
  if (c_out.src != c_in.dst || c_out.dst != c_in.src)
    throw ProtocolError("run_pair_probe: connections must join the same pair in opposite directions");
  ProbeResult r;
  r.meas_out = prober.probe(c_out);
  r.meas_in = prober.probe(c_in);
  return r;
}

bool keep_outgoing(NodeId self, NodeId peer, const ProbeResult& r, EliminationRule rule) {
  if (r.meas_out == r.meas_in) return self < peer;
  if (rule == EliminationRule::Prose) return r.meas_out < r.meas_in;
  // Listing reading: the outgoing connection is ended when meas_out < meas_in.
  return !(r.meas_out < r.meas_in);
}

namespace {

ConnectionHandle* find_established(std::vector<ConnectionHandle>& v, NodeId peer, bool outgoing) {
  for (auto& h : v) {
    if (h.established() && (outgoing ? h.dst : h.src) == peer) return &h;
  }
  return nullptr;
}

void move_to_ended(OverlayNodeState& s, std::vector<ConnectionHandle>& from, std::uint64_t serial, NodeId peer,
                   bool outgoing) {
  auto it = std::find_if(from.begin(), from.end(), [&](const ConnectionHandle& h) {
    return h.serial == serial && (outgoing ? h.dst : h.src) == peer && h.established();
  });
  if (it == from.end()) return;
  ConnectionHandle h = *it;
  from.erase(it);
  h.state = ConnState::Closed;
  s.ended.push_back(h);
}

}  // namespace

OverlayNodeState eliminate_duplicates(OverlayNodeState state, const std::map<NodeId, ProbeResult>& probe_results,
                                      EliminationRule rule) {
  for (const NodeId& peer : state.peers) {
    ConnectionHandle* out = find_established(state.cout, peer, true);
    ConnectionHandle* in = find_established(state.cin, peer, false);
    if (!out || !in) continue;
    auto it = probe_results.find(peer);
    if (it == probe_results.end()) {
      state.protocol_errors.push_back(
          fmt::format("node {}: duplicated pair with {} has no probe result", state.self.id, peer.id));
      continue;
    }
    state.probes[peer] = it->second;
    if (keep_outgoing(state.self, peer, it->second, rule)) {
      move_to_ended(state, state.cin, in->serial, peer, false);
    } else {
      move_to_ended(state, state.cout, out->serial, peer, true);
    }
  }
  return state;
}

OverlayNodeState finalize_g_time(OverlayNodeState state, Millis clock) {
  if (clock < state.t1)
    throw InvariantViolation(fmt::format("node {}: clock {} precedes t1 {}", state.self.id, clock, state.t1));
  state.t2 = clock;
  state.g_time = state.t2 - state.t1;
  state.finalized = true;
  return state;
}

std::vector<OverlayLink> links_of(const OverlayNodeState& state) {
  std::vector<OverlayLink> out;
  auto add = [&](const ConnectionHandle& h) {
    const NodeId peer = h.src == state.self ? h.dst : h.src;
    OverlayLink link;
    link.a = std::min(state.self, peer);
    link.b = std::max(state.self, peer);
    link.retained = h.src == link.a ? Direction::AtoB : Direction::BtoA;
    if (auto it = state.probes.find(peer); it != state.probes.end()) {
      link.probed = true;
      const bool self_is_a = state.self == link.a;
      link.meas_out = self_is_a ? it->second.meas_out : it->second.meas_in;
      link.meas_in = self_is_a ? it->second.meas_in : it->second.meas_out;
    }
    out.push_back(link);
  };
  for (const auto& h : state.cout)
    if (h.established()) add(h);
  for (const auto& h : state.cin)
    if (h.established()) add(h);
  std::sort(out.begin(), out.end(), [](const auto& x, const auto& y) { return std::tie(x.a, x.b) < std::tie(y.a, y.b); });
  return out;
}

ConstructionResult aggregate_construction(const std::vector<NodeId>& expected,
                                          const std::map<NodeId, Millis>& g_times,
                                          const std::vector<OverlayLink>& links) {
  std::vector<std::uint32_t> missing;
  for (const auto& n : expected)
    if (!g_times.contains(n)) missing.push_back(n.id);
  if (!missing.empty())
    throw Error(fmt::format("aggregate_construction: no g_time for node(s) {}", fmt::join(missing, ", ")));

  ConstructionResult r;
  r.per_node_g_time = g_times;
  for (const auto& [n, g] : g_times) r.overlay_time = std::max(r.overlay_time, g);

  std::map<std::pair<std::uint32_t, std::uint32_t>, OverlayLink> dedup;
  for (OverlayLink l : links) {
    if (l.b < l.a) {
      std::swap(l.a, l.b);
      std::swap(l.meas_out, l.meas_in);
      l.retained = l.retained == Direction::AtoB ? Direction::BtoA : Direction::AtoB;
    }
    auto [it, inserted] = dedup.try_emplace({l.a.id, l.b.id}, l);
    if (inserted) continue;
    if (it->second.retained != l.retained)
      throw ProtocolError(fmt::format("endpoints {} and {} disagree on the retained direction", l.a.id, l.b.id));
    if (l.probed && !it->second.probed) it->second = l;
  }
  for (auto& [k, l] : dedup) r.links.push_back(l);
  return r;
}

// -------------------------------------------------------------- OverlayNode

OverlayNode::OverlayNode(NodeId self, std::vector<NodeId> peers, OverlayOptions options)
    : options_(options), state_(make_state(self, std::move(peers), 0)) {}

std::vector<NodeId> OverlayNode::start(Millis now) {
  state_.t1 = now;
  state_ = start_connection_sequences(std::move(state_));
  started_ = true;
  return state_.peers;
}

ConnectionHandle* OverlayNode::find_out(NodeId peer) { return find_established(state_.cout, peer, true); }
ConnectionHandle* OverlayNode::find_in(NodeId peer) { return find_established(state_.cin, peer, false); }

void OverlayNode::outgoing_issued(NodeId peer, std::uint64_t serial, Millis opened_at) {
  for (auto& h : state_.cout) {
    if (h.dst == peer && h.pending()) {
      h.serial = serial;
      h.opened_at = opened_at;
      return;
    }
  }
}

void OverlayNode::outgoing_resolved(const ConnectionHandle& handle) {
  if (state_.completed_at) return;  // attempt abandoned at the deadline
  record_outgoing(state_, handle);
}

bool OverlayNode::all_outgoing_resolved() const {
  return std::none_of(state_.cout.begin(), state_.cout.end(), [](const auto& h) { return h.pending(); });
}

OverlayNode::Snapshot OverlayNode::complete_wait(Millis now) {
  state_ = wait_for_completion(std::move(state_), options_.completion_deadline_ms);
  if (*state_.completed_at > now) state_.completed_at = now;
  Snapshot snap;
  for (const NodeId& peer : state_.peers) {
    ConnectionHandle* out = find_out(peer);
    ConnectionHandle* in = find_in(peer);
    if (!out || !in) continue;
    if (state_.self < peer) {
      snap.to_probe.emplace_back(*out, *in);
      deciding_.insert(peer);
    } else {
      snap.awaiting.push_back(peer);
      awaiting_.insert(peer);
    }
  }
  return snap;
}

OverlayNode::Duplicate OverlayNode::classify_second(NodeId peer, bool existed) {
  if (!existed) return Duplicate::None;
  if (state_.self < peer) {
    deciding_.insert(peer);
    return Duplicate::Decide;
  }
  awaiting_.insert(peer);
  return Duplicate::Await;
}

OverlayNode::Duplicate OverlayNode::incoming_established(const ConnectionHandle& handle) {
  const bool existed = state_.completed_at && has_link(handle.src);
  state_.cin.push_back(handle);
  return classify_second(handle.src, existed);
}

std::optional<std::pair<ConnectionHandle, ConnectionHandle>> OverlayNode::duplicate_pair(NodeId peer) {
  ConnectionHandle* out = find_out(peer);
  ConnectionHandle* in = find_in(peer);
  if (!out || !in) return std::nullopt;
  return std::make_pair(*out, *in);
}

std::optional<ConnectionHandle> OverlayNode::decide(NodeId peer, const ProbeResult& result) {
  ConnectionHandle* out = find_out(peer);
  ConnectionHandle* in = find_in(peer);
  if (!out || !in) {
    deciding_.erase(peer);
    return std::nullopt;
  }
  const bool keep_out = keep_outgoing(state_.self, peer, result, options_.elimination_rule);
  ConnectionHandle loser = keep_out ? *in : *out;
  state_.probes[peer] = result;
  move_to_ended(state_, keep_out ? state_.cin : state_.cout, loser.serial, peer, !keep_out);
  deciding_.erase(peer);
  return loser;
}

void OverlayNode::remote_ended(std::uint64_t serial) {
  for (auto* v : {&state_.cout, &state_.cin}) {
    for (const auto& h : *v) {
      if (h.serial == serial && h.established()) {
        const bool outgoing = v == &state_.cout;
        const NodeId peer = outgoing ? h.dst : h.src;
        move_to_ended(state_, *v, serial, peer, outgoing);
        awaiting_.erase(peer);
        return;
      }
    }
  }
}

std::optional<ConnectionHandle> OverlayNode::decision_timeout(NodeId peer) {
  if (!awaiting_.erase(peer)) return std::nullopt;
  ConnectionHandle* out = find_out(peer);
  if (!out || !find_in(peer)) return std::nullopt;
  ConnectionHandle loser = *out;  // the peer has the lower id and initiated `in`
  move_to_ended(state_, state_.cout, loser.serial, peer, true);
  return loser;
}

bool OverlayNode::link_lost(NodeId peer, Millis) {
  bool found = false;
  while (ConnectionHandle* h = find_out(peer)) {
    move_to_ended(state_, state_.cout, h->serial, peer, true);
    found = true;
  }
  while (ConnectionHandle* h = find_in(peer)) {
    move_to_ended(state_, state_.cin, h->serial, peer, false);
    found = true;
  }
  awaiting_.erase(peer);
  deciding_.erase(peer);
  return found;
}

OverlayNode::Duplicate OverlayNode::reconnected(const ConnectionHandle& handle) {
  const bool existed = has_link(handle.dst);
  state_.cout.push_back(handle);
  return classify_second(handle.dst, existed);
}

bool OverlayNode::has_link(NodeId peer) const {
  auto& self = const_cast<OverlayNode&>(*this);
  return self.find_out(peer) != nullptr || self.find_in(peer) != nullptr;
}

bool OverlayNode::ready_to_finalize() const {
  return state_.completed_at && awaiting_.empty() && deciding_.empty() && !state_.finalized;
}

void OverlayNode::finalize(Millis now) { state_ = finalize_g_time(std::move(state_), now); }

}  // namespace almcast::overlay
