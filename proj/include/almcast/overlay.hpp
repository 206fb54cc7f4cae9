#pragma once

// Complete-graph overlay construction for one overlay host (OH).
//
// The free functions are the individual steps of the construction procedure
// and operate on an OverlayNodeState value. OverlayNode sequences them for a
// transport driver (simulated or socket-based) that feeds it connection
// events.
//
// Duplicate elimination protocol: when a pair ends up with both directed
// connections, the lower-id endpoint probes both, decides, and ends the loser.
// The higher-id endpoint learns the decision by observing that end. Both
// endpoints would reach the same decision from the same probe pair, so the
// split only avoids a second measurement round.

#include <functional>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "almcast/types.hpp"

namespace almcast::overlay {

enum class EliminationRule {
  Prose,    // keep the lower-latency connection (default)
  Listing,  // end the outgoing connection when meas_out < meas_in
};

EliminationRule parse_elimination_rule(std::string_view s);

enum class Direction { AtoB, BtoA };

struct OverlayOptions {
  EliminationRule elimination_rule = EliminationRule::Prose;
  Millis completion_deadline_ms = 21000;
  std::size_t max_parallel_connects = 0;  // 0 = unlimited
  Millis decision_wait_ms = 42000;         // higher-id side waiting for a decider
  int reconnect_attempts = 3;
  std::size_t probe_bytes = 1500;
};

struct ProbeResult {
  Millis meas_out = 0;  // RTT on self -> peer
  Millis meas_in = 0;   // RTT on peer -> self
};

struct OverlayNodeState {
  NodeId self;
  std::vector<NodeId> peers;            // other OH, sorted, self excluded
  std::vector<ConnectionHandle> cout;   // outgoing
  std::vector<ConnectionHandle> cin;    // incoming
  std::vector<ConnectionHandle> failed; // outgoing attempts that failed
  std::vector<ConnectionHandle> ended;  // ended by duplicate elimination
  std::map<NodeId, ProbeResult> probes;
  std::vector<std::string> protocol_errors;
  Millis t1 = 0;
  Millis t2 = 0;
  Millis g_time = 0;
  std::optional<Millis> completed_at;
  bool finalized = false;
};

struct OverlayLink {
  NodeId a;  // a.id < b.id
  NodeId b;
  Direction retained = Direction::AtoB;
  Millis meas_out = 0;  // probe RTT on a -> b
  Millis meas_in = 0;   // probe RTT on b -> a
  bool probed = false;

  friend bool operator==(const OverlayLink&, const OverlayLink&) = default;
};

struct ConstructionResult {
  std::map<NodeId, Millis> per_node_g_time;
  Millis overlay_time = 0;
  std::vector<OverlayLink> links;  // sorted by (a, b)
};

OverlayNodeState make_state(NodeId self, std::vector<NodeId> peers, Millis t1);

/// One pending outgoing attempt per peer, all created before anything is
/// awaited. Drivers fill in transport serials as they issue the attempts.
OverlayNodeState start_connection_sequences(OverlayNodeState state);

/// Records the resolution of one outgoing attempt (matched by destination).
void record_outgoing(OverlayNodeState& state, const ConnectionHandle& resolved);

/// Ends the wait: still-pending attempts become Failed(Timeout) at
/// t1 + deadline, failed attempts move out of cout, and completed_at is set to
/// the time the last attempt resolved.
OverlayNodeState wait_for_completion(OverlayNodeState state, Millis deadline);

/// Synchronous probe interface used by run_pair_probe. Returns the RTT of one
/// probe frame on the connection, or kInfinity on failure.
class Prober {
 public:
  virtual ~Prober() = default;
  virtual Millis probe(const ConnectionHandle& conn) = 0;
};

/// Measures both directions of a duplicated pair. `c_out` is self -> peer,
/// `c_in` is peer -> self.
ProbeResult run_pair_probe(const ConnectionHandle& c_out, const ConnectionHandle& c_in, Prober& prober);

/// The retention rule for one duplicated pair, seen from `self`.
bool keep_outgoing(NodeId self, NodeId peer, const ProbeResult& r, EliminationRule rule);

/// For each peer with both an outgoing and an incoming connection, keeps one
/// and moves the other to `ended`. A duplicated pair without a probe result
/// stays unresolved and is reported in protocol_errors.
OverlayNodeState eliminate_duplicates(OverlayNodeState state, const std::map<NodeId, ProbeResult>& probe_results,
                                      EliminationRule rule = EliminationRule::Prose);

/// t2 = clock, g_time = t2 - t1. Throws InvariantViolation if clock < t1.
OverlayNodeState finalize_g_time(OverlayNodeState state, Millis clock);

/// Links retained at this node, canonicalized.
std::vector<OverlayLink> links_of(const OverlayNodeState& state);

/// overlay_time = max g_time; links deduplicated across endpoints. Throws if
/// an expected node has no g_time, or if two endpoints disagree on a link.
ConstructionResult aggregate_construction(const std::vector<NodeId>& expected,
                                          const std::map<NodeId, Millis>& g_times,
                                          const std::vector<OverlayLink>& links);

/// Drives one OH through the construction lifecycle from transport events.
class OverlayNode {
 public:
  OverlayNode(NodeId self, std::vector<NodeId> peers, OverlayOptions options);

  /// Returns the peers to connect to, in order.
  std::vector<NodeId> start(Millis now);
  void outgoing_issued(NodeId peer, std::uint64_t serial, Millis opened_at);
  void outgoing_resolved(const ConnectionHandle& handle);
  bool all_outgoing_resolved() const;
  bool waiting() const { return started_ && !state_.completed_at; }

  struct Snapshot {
    std::vector<std::pair<ConnectionHandle, ConnectionHandle>> to_probe;  // (out, in) pairs this node decides
    std::vector<NodeId> awaiting;  // pairs decided by the lower-id peer
  };
  /// Ends the wait (deadline relative to t1) and classifies every pair.
  Snapshot complete_wait(Millis now);

  /// What a second connection to an already linked peer turns into. The
  /// lower-id endpoint decides; the other one awaits the decision.
  enum class Duplicate { None, Decide, Await };

  /// An incoming connection became established. After the wait completed, a
  /// connection from a peer that is already linked forms a duplicate pair.
  Duplicate incoming_established(const ConnectionHandle& handle);
  /// The (out, in) pair with `peer`, if both directions are established.
  std::optional<std::pair<ConnectionHandle, ConnectionHandle>> duplicate_pair(NodeId peer);

  /// Applies a decision for a pair this node decides; returns the connection
  /// to end, or nothing if the pair dissolved while it was being probed.
  std::optional<ConnectionHandle> decide(NodeId peer, const ProbeResult& result);
  /// The peer ended one of our two connections with it.
  void remote_ended(std::uint64_t serial);
  /// Gives up waiting for `peer`'s decision: keeps the connection initiated by
  /// the lower id, returns the one to end.
  std::optional<ConnectionHandle> decision_timeout(NodeId peer);

  /// A retained link to `peer` was lost; returns true if it was retained.
  bool link_lost(NodeId peer, Millis now);
  /// A reconnection established a fresh outgoing connection.
  Duplicate reconnected(const ConnectionHandle& handle);

  bool ready_to_finalize() const;
  void finalize(Millis now);
  bool finalized() const { return state_.finalized; }

  bool has_link(NodeId peer) const;
  const OverlayNodeState& state() const { return state_; }
  const OverlayOptions& options() const { return options_; }
  std::vector<OverlayLink> links() const { return links_of(state_); }
  const std::set<NodeId>& awaiting() const { return awaiting_; }

 private:
  ConnectionHandle* find_out(NodeId peer);
  ConnectionHandle* find_in(NodeId peer);
  Duplicate classify_second(NodeId peer, bool existed);

  OverlayOptions options_;
  OverlayNodeState state_;
  std::set<NodeId> awaiting_;
  std::set<NodeId> deciding_;
  bool started_ = false;
};

}  // namespace almcast::overlay
