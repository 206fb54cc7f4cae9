#pragma once

// Deterministic discrete-event network simulator.
//
// Supplies ConnectionHandle semantics to the overlay, measurement and
// distribution logic: a connect-time model with per-host accept queues, an
// RTT model, node-load inflation, SYN-timeout failures and crash injection.
// Single-threaded; all concurrency elsewhere is realized as interleaved
// events ordered by (time, ordinal).

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "almcast/types.hpp"
#include "json.hpp"

namespace almcast::simnet {

struct LogNormal {
  Millis median_ms = 40;
  double sigma = 0;
};

enum class PairClass : std::uint8_t { SameRegion, SameContinent, Intercontinental };
std::string_view to_string(PairClass c);

struct NodeProfile {
  NodeId id;
  std::string region;  // country-level label
  double load_factor = 0;
  Millis processing_delay_ms = 0;
};

struct CrashEvent {
  std::uint32_t node = 0;
  Millis at_ms = 0;
};

/// A broken overlay connection between two live nodes.
struct LinkFailure {
  std::uint32_t a = 0;
  std::uint32_t b = 0;
  Millis at_ms = 0;
};

struct SimConfig {
  std::uint64_t seed = 1;
  std::vector<NodeProfile> nodes;

  // Base RTT lookup order: region pair, continent pair, same-region default,
  // global default. Keys are "X|Y" with X <= Y.
  std::map<std::string, Millis> region_rtt_ms;
  std::map<std::string, Millis> continent_rtt_ms;
  Millis same_region_rtt_ms = 60;
  Millis default_rtt_ms = 150;
  Millis rtt_jitter_ms = 0;  // uniform additive jitter in [0, rtt_jitter_ms)

  // Network part of a handshake, per pair class; inflated by
  // (1 + dst.load_factor * load_gain).
  std::map<PairClass, LogNormal> connect_time_model;
  double load_gain = 0;

  // Per-host accept queue: each handshake occupies the destination for
  // accept_service_ms / (1 - load_factor)^load_sensitivity.
  Millis accept_service_ms = 0;
  double load_sensitivity = 1;

  double syn_fail_prob = 0;
  Millis os_timeout_ms = 21000;
  Millis probe_timeout_ms = 5000;

  std::vector<CrashEvent> crash_schedule;
  std::vector<LinkFailure> link_failures;
  Millis clock_resolution_ms = 1;
  Millis horizon_ms = 7'200'000;

  void validate() const;
  LogNormal model_for(PairClass c) const;
};

void to_json(nlohmann::json& j, const SimConfig& c);
void from_json(const nlohmann::json& j, SimConfig& c);

/// Continent label for the countries used by the shipped scenarios; "Other"
/// for anything unknown.
std::string continent_of(std::string_view region);

struct LogEntry {
  Millis time = 0;
  std::uint64_t ordinal = 0;
  std::uint32_t node = 0;
  std::string kind;
  std::string detail;
};

/// Totally ordered, append-only event log. CSV form:
/// time_ms,ordinal,node_id,event_kind,detail
class EventLog {
 public:
  void append(Millis time, std::uint32_t node, std::string_view kind, std::string detail);
  const std::vector<LogEntry>& entries() const { return entries_; }
  bool truncated() const { return truncated_; }
  void mark_truncated() { truncated_ = true; }
  void write_csv(std::ostream& out) const;
  static EventLog read_csv(std::istream& in);

 private:
  std::vector<LogEntry> entries_;
  bool truncated_ = false;
};

/// Parses "k=v;k=v" detail strings.
std::map<std::string, std::string> parse_detail(std::string_view detail);

enum class EventKind : std::uint8_t { ConnectResolved, FrameDelivered, TimerFired, NodeCrashed };

class Simulator {
 public:
  using Callback = std::function<void()>;
  using ConnectCallback = std::function<void(const ConnectionHandle&)>;
  using RttCallback = std::function<void(Millis rtt)>;

  explicit Simulator(SimConfig config, bool logging = true);

  const SimConfig& config() const { return config_; }
  Millis now() const { return now_; }
  EventLog& log() { return log_; }
  const EventLog& log() const { return log_; }
  bool logging() const { return logging_; }

  /// Log-only entry at the current time.
  void note(std::uint32_t node, std::string_view kind, std::string detail);
  template <typename F>
  void note_lazy(std::uint32_t node, std::string_view kind, F&& make_detail) {
    if (logging_) note(node, kind, make_detail());
  }

  std::uint64_t schedule(Millis at, EventKind kind, std::uint32_t node, Callback fn);
  void cancel(std::uint64_t event_id);

  /// Executes events in (time, ordinal) order up to `horizon`. Returns false
  /// (and flags the log truncated) if events remain beyond it.
  bool run(Millis horizon);
  bool run() { return run(config_.horizon_ms); }
  std::uint64_t events_executed() const { return executed_; }

  const NodeProfile& profile(std::uint32_t node) const;
  bool has_node(std::uint32_t node) const;
  bool alive(std::uint32_t node) const;
  void on_crash(std::function<void(std::uint32_t)> handler) { crash_handlers_.push_back(std::move(handler)); }
  void on_link_failure(std::function<void(std::uint32_t, std::uint32_t)> handler) {
    link_failure_handlers_.push_back(std::move(handler));
  }

  // ---- network model ----

  /// Starts a connect attempt at now(). The callback fires exactly once when
  /// the attempt resolves, unless the attempt was abandoned first.
  std::uint64_t sim_connect(std::uint32_t src, std::uint32_t dst, ConnectCallback on_resolved);
  /// Resolves a pending attempt as Failed(reason) now. The destination's
  /// accept slot, if already reserved, stays consumed.
  void abandon(std::uint64_t serial, FailReason reason);
  /// Closes an established connection (no-op if not established).
  void close(std::uint64_t serial);
  const ConnectionHandle& connection(std::uint64_t serial) const;
  std::size_t connection_count() const { return connections_.size(); }
  int attempt_index(std::uint64_t serial) const;

  /// Deterministic RTT for one probe frame on `conn` sent by `prober`.
  Millis rtt_sample(const ConnectionHandle& conn, std::uint32_t prober, std::uint64_t seq) const;
  /// Sends one probe frame of `frame_bytes` and reports its round trip, or
  /// infinity after probe_timeout_ms if an endpoint died in flight.
  void sim_rtt(std::uint64_t serial, std::uint32_t prober, std::uint64_t seq, std::size_t frame_bytes,
               RttCallback done);
  /// One-way control message; dropped silently if `dst` is dead on arrival.
  void send_message(std::uint32_t src, std::uint32_t dst, std::string_view what, Callback on_delivered);

  Millis base_rtt(std::uint32_t a, std::uint32_t b) const;
  Millis one_way(std::uint32_t a, std::uint32_t b) const;
  PairClass pair_class(std::uint32_t a, std::uint32_t b) const;
  Millis accept_service(std::uint32_t dst) const;
  Millis quantize(Millis t) const;

 private:
  struct QueuedEvent {
    Millis time;
    std::uint64_t ordinal;
    EventKind kind;
    std::uint32_t node;
  };
  struct Conn {
    ConnectionHandle handle;
    int attempt = 0;
    ConnectCallback on_resolved;
  };

  std::size_t index_of(std::uint32_t node) const;
  void resolve(std::uint64_t serial, ConnState state, FailReason reason);
  void crash(std::uint32_t node);

  SimConfig config_;
  bool logging_;
  EventLog log_;
  Millis now_ = 0;
  std::uint64_t next_ordinal_ = 0;
  std::uint64_t executed_ = 0;
  std::vector<QueuedEvent> heap_;
  std::vector<Callback> callbacks_;  // indexed by ordinal
  std::vector<char> cancelled_;
  std::vector<int> index_;  // node id -> position in config_.nodes
  std::vector<char> alive_;
  std::vector<Millis> accept_free_at_;
  std::vector<Conn> connections_;
  std::map<std::pair<std::uint32_t, std::uint32_t>, int> attempts_;
  std::vector<std::function<void(std::uint32_t)>> crash_handlers_;
  std::vector<std::function<void(std::uint32_t, std::uint32_t)>> link_failure_handlers_;
};

}  // namespace almcast::simnet
