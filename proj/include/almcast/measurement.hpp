#pragma once

// End-host latency measurement.
//
// An EH connects to every targeted OH in parallel, times three probe round
// trips on each established connection and reports, per OH, the connect time
// plus the cumulated latency. The EH's total measurement time is the maximum
// of those per-OH totals. Four strategies bound the per-OH time: unlimited or
// bounded retry, a single attempt, an application-side connect timeout, and
// partitioning into sub-groups so each EH only measures its group's OH.

#include <array>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "almcast/partition.hpp"
#include "almcast/types.hpp"

namespace almcast::measurement {

inline constexpr int kProbesPerTarget = 3;
inline constexpr std::size_t kProbeFrameBytes = 1500;

enum class RecordStatus : std::uint8_t { Measured, Eliminated };
enum class EliminationReason : std::uint8_t { None, ConnectFailed, AppTimeout, ProbeFailed };

std::string_view to_string(EliminationReason r);

struct LatencyRecord {
  NodeId eh;
  NodeId oh;
  Millis conn_time = 0;
  std::array<Millis, kProbesPerTarget> rtt_samples{};  // meaningful only when Measured
  Millis cumm_lat = 0;
  RecordStatus status = RecordStatus::Eliminated;
  EliminationReason reason = EliminationReason::None;
  int attempts = 0;

  bool measured() const { return status == RecordStatus::Measured; }
  /// Contribution to the EH's total: conn_time + cumm_lat when measured,
  /// otherwise the time spent until elimination.
  Millis total() const { return measured() ? conn_time + cumm_lat : conn_time; }
  std::string status_label() const;
};

struct MeasurementReport {
  NodeId eh;
  std::vector<LatencyRecord> records;
  Millis m_i = 0;
  double measured_percentage = 0;
  bool no_candidates = false;
};

struct Strategy {
  enum class Kind : std::uint8_t { BaselineRetry, ZeroReconnect, AppTimeout, Partitioned };

  Kind kind = Kind::BaselineRetry;
  std::optional<int> max_retries;         // BaselineRetry; nullopt = unlimited
  Millis timeout_ms = 10000;              // AppTimeout
  Millis scenario_deadline_ms = 600000;   // BaselineRetry hard stop
  std::shared_ptr<const distribution::PartitionPlan> plan;  // Partitioned
  std::shared_ptr<const Strategy> inner;                    // Partitioned

  static Strategy baseline(std::optional<int> max_retries = std::nullopt);
  static Strategy zero_reconnect();
  static Strategy app_timeout(Millis timeout_ms = 10000);
  static Strategy partitioned(distribution::PartitionPlan plan, Strategy inner);

  /// The strategy governing a single target (unwraps Partitioned).
  const Strategy& effective() const;
  void validate() const;

  /// "baseline", "baseline:<n>", "zero", "apptimeout:<ms>",
  /// "partitioned:<inner spec>". A parsed partitioned strategy has no plan
  /// until with_plan() is called.
  static Strategy parse(std::string_view spec);
  std::string spec() const;
  Strategy with_plan(distribution::PartitionPlan plan) const;
};

/// Targets for the EH at `eh_index` under `strategy`.
std::vector<NodeId> targets_for(std::size_t eh_index, const Strategy& strategy, const std::vector<NodeId>& all_oh);

/// Sum of the three probe round trips.
Millis cumm_lat(const std::array<Millis, kProbesPerTarget>& samples);

/// Per-target measurement state machine. Drivers translate the returned
/// actions into transport operations and feed results back.
class TargetProbe {
 public:
  enum class Action { Connect, Probe, Done };

  TargetProbe(NodeId eh, NodeId oh, const Strategy& strategy);

  Action begin(Millis now);
  Action on_connect(const ConnectionHandle& resolved, Millis now);
  /// The application timeout or the scenario deadline expired.
  Action on_timer(Millis now);
  Action on_probe(Millis rtt, Millis now);

  /// Absolute time at which on_timer must fire, if any.
  std::optional<Millis> timer_at() const;
  /// Remaining connect budget for a blocking connector, if bounded.
  std::optional<Millis> connect_budget(Millis now) const;
  int next_probe_seq() const { return probes_done_; }
  bool connecting() const { return phase_ == Phase::Connecting; }
  bool done() const { return phase_ == Phase::Done; }
  const LatencyRecord& record() const { return record_; }
  const ConnectionHandle& connection() const { return conn_; }

 private:
  enum class Phase { Idle, Connecting, Probing, Done };
  Action finish(RecordStatus status, EliminationReason reason, Millis now);

  Strategy strategy_;
  LatencyRecord record_;
  ConnectionHandle conn_;
  Phase phase_ = Phase::Idle;
  Millis start_ = 0;
  Millis established_at_ = 0;
  int probes_done_ = 0;
};

/// Blocking transport interface for measure_one.
class Connector {
 public:
  virtual ~Connector() = default;
  virtual Millis now() = 0;
  /// Blocks until the attempt resolves; with a budget, gives up after it and
  /// returns Failed(AppTimeout).
  virtual ConnectionHandle connect(NodeId oh, std::optional<Millis> budget) = 0;
  /// Round trip of one probe frame, or kInfinity on failure.
  virtual Millis probe(const ConnectionHandle& conn, std::uint64_t seq) = 0;
  virtual void close(const ConnectionHandle&) {}
};

/// Three sequential probes on an established connection; nullopt if any fails.
std::optional<std::array<Millis, kProbesPerTarget>> probe_cumm_lat(const ConnectionHandle& conn,
                                                                    Connector& connector);

LatencyRecord measure_one(NodeId eh, NodeId oh, const Strategy& strategy, Connector& connector);

/// Builds the report from per-target records: m_i, measured percentage and
/// the no-candidates flag. Throws if `records` is empty.
MeasurementReport make_report(NodeId eh, std::vector<LatencyRecord> records);

/// Mean of per-EH measured percentages. Throws on empty input.
double measured_percentage_stats(const std::vector<MeasurementReport>& reports);

/// eh_id,oh_id,status,conn_ms,lat1_ms,lat2_ms,lat3_ms,cummlat_ms
std::string csv_header();
std::string csv_row(const LatencyRecord& r);

}  // namespace almcast::measurement
