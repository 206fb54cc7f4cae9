#pragma once

// Node roles over real stream sockets: OH server, MH server and EH client,
// plus an in-process loopback cluster that runs all three together.
//
// Every connection starts with a JOIN frame naming the initiator. Each role
// keeps its protocol state on one actor thread; socket threads only post
// events to it.

#include <condition_variable>
#include <cstdint>
#include <deque>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include "almcast/distribution.hpp"
#include "almcast/measurement.hpp"
#include "almcast/overlay.hpp"
#include "almcast/tcp.hpp"

namespace almcast::transport {

struct Peer {
  NodeId id;
  Endpoint addr;
  friend bool operator==(const Peer&, const Peer&) = default;
};

/// Newline-delimited "id host:port" lines; '#' starts a comment.
std::vector<Peer> parse_peers(std::string_view text, NodeRole role = NodeRole::OverlayHost);
std::vector<Peer> read_peer_file(const std::string& path, NodeRole role = NodeRole::OverlayHost);
std::string format_peers(const std::vector<Peer>& peers);

/// Rounds to a multiple of `resolution` (no-op for resolution <= 0).
Millis quantize(Millis t, Millis resolution);

/// Single-threaded task queue with timers.
class Actor {
 public:
  Actor();
  ~Actor();
  void post(std::function<void()> fn);
  std::uint64_t post_at(Millis at, std::function<void()> fn);
  void cancel(std::uint64_t id);
  /// Runs `fn` on the actor thread and waits for it.
  void sync(const std::function<void()>& fn);
  void stop();

 private:
  void loop();

  std::mutex mu_;
  std::condition_variable cv_;
  std::deque<std::function<void()>> tasks_;
  std::multimap<Millis, std::pair<std::uint64_t, std::function<void()>>> timers_;
  std::set<std::uint64_t> cancelled_;
  std::uint64_t next_timer_ = 0;
  bool stopping_ = false;
  std::thread thread_;
};

// ------------------------------------------------------------------ OH

struct OhConfig {
  NodeId id;
  Endpoint listen;
  double load_factor = 0;
  overlay::OverlayOptions overlay;
  Millis rtt_resolution_ms = 1;
  Millis probe_timeout_ms = 5000;
  std::optional<int> syn_retries;
  std::optional<Endpoint> mh;
};

class OhServer {
 public:
  explicit OhServer(OhConfig config);
  ~OhServer();
  OhServer(const OhServer&) = delete;
  OhServer& operator=(const OhServer&) = delete;

  /// Starts listening; returns the bound address (port 0 picks one).
  Endpoint bind();
  /// Sends a LOAD_REPORT to the MH, if one is configured.
  void report_load();
  /// Starts overlay construction towards `peers` (self is ignored).
  void construct(const std::vector<Peer>& peers);
  bool wait_finalized(Millis timeout);

  overlay::OverlayNodeState state();
  std::vector<overlay::OverlayLink> links();
  std::vector<std::string> events();
  void stop();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

// ------------------------------------------------------------------ MH

struct MhConfig {
  Endpoint listen;
  distribution::DistributeParams params;
  distribution::MhServiceParams service;
};

class MhServer {
 public:
  explicit MhServer(MhConfig config);
  ~MhServer();
  MhServer(const MhServer&) = delete;
  MhServer& operator=(const MhServer&) = delete;

  Endpoint bind();
  void stop();

  std::size_t loads_known() const;
  std::vector<distribution::Assignment> assignments() const;
  std::vector<distribution::MhResponse> responses() const;
  std::size_t rejected() const;
  std::set<NodeId> oh_failed(NodeId oh);

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

// ------------------------------------------------------------------ EH

struct EhConfig {
  NodeId id;
  std::vector<Peer> oh;
  Endpoint mh;
  measurement::Strategy strategy = measurement::Strategy::app_timeout();
  std::size_t eh_index = 0;  // position in the EH population (partitioning)
  std::size_t eh_count = 1;
  std::size_t max_parallel = 0;  // 0 = one worker per target
  Millis rtt_resolution_ms = 1;
  Millis probe_timeout_ms = 5000;
  std::optional<int> syn_retries;
  bool attach = true;
  int max_rounds = 3;
  Millis mh_timeout_ms = 30000;
};

struct EhOutcome {
  std::vector<measurement::MeasurementReport> rounds;
  std::optional<distribution::Assignment> assignment;
  bool attached = false;
};

class EhClient {
 public:
  explicit EhClient(EhConfig config);
  ~EhClient();

  /// Measure, request placement, attach; repeats on REMEASURE or a failed
  /// attach up to max_rounds.
  EhOutcome run();
  measurement::MeasurementReport measure_all();
  void detach();

 private:
  EhConfig config_;
  std::optional<Socket> attachment_;
};

// ------------------------------------------------------------ loopback

struct ClusterSpec {
  std::size_t oh_count = 3;
  std::size_t eh_count = 5;
  std::vector<double> oh_load;  // per OH, defaults to 0
  overlay::OverlayOptions overlay;
  measurement::Strategy strategy = measurement::Strategy::app_timeout();
  Millis rtt_resolution_ms = 100;
  distribution::DistributeParams params;
  bool default_capacity_cap = true;
  distribution::MhServiceParams service;
  Millis construct_timeout_ms = 30000;
};

struct ClusterResult {
  std::vector<overlay::OverlayNodeState> oh_states;
  std::optional<overlay::ConstructionResult> construction;
  std::vector<std::string> errors;
  std::vector<EhOutcome> eh;
  std::vector<distribution::Assignment> assignments;
};

/// MH, OH and EH all on 127.0.0.1 in this process, with the standard id
/// layout (MH 0, OH 1..n, EH n+1..n+m). EH run one after another.
ClusterResult run_loopback_cluster(const ClusterSpec& spec);

}  // namespace almcast::transport
