#pragma once

// Monitor-host (MH) logic: load tracking, EH placement, sub-group
// partitioning, OH failure handling and the MH request queue.
//
// The placement heuristic is a weighted greedy stand-in behind the
// Distributor interface:
//   cost(oh) = alpha * (conn_time + cumm_lat / 3) + beta * load_factor * load_scale
// minimized over measured, non-saturated OH, ties to the lower OH id.

#include <cstdint>
#include <limits>
#include <memory>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "almcast/measurement.hpp"
#include "almcast/partition.hpp"
#include "almcast/types.hpp"

namespace almcast::distribution {

struct LoadReport {
  NodeId oh;
  std::uint32_t connected_eh = 0;
  double load_factor = 0;  // [0,1]
  Millis as_of = 0;
};

struct Assignment {
  NodeId eh;
  NodeId oh;
  double cost = 0;
  Millis assigned_at = 0;
  bool overloaded = false;

  friend bool operator==(const Assignment&, const Assignment&) = default;
};

struct DistributeParams {
  double alpha = 1;
  double beta = 1;
  Millis load_scale_ms = 1000;
  std::uint32_t capacity_cap = std::numeric_limits<std::uint32_t>::max();
};

/// ceil(eh_count / oh_count) * 2
std::uint32_t default_capacity_cap(std::size_t eh_count, std::size_t oh_count);

class NoCandidate : public Error {
 public:
  using Error::Error;
};

double assignment_cost(const measurement::LatencyRecord& rec, const LoadReport& load, const DistributeParams& p);

class Distributor {
 public:
  virtual ~Distributor() = default;
  virtual Assignment distribute(const measurement::MeasurementReport& report, std::span<const LoadReport> loads,
                                const DistributeParams& params, Millis now) const = 0;
};

class WeightedGreedyDistributor final : public Distributor {
 public:
  Assignment distribute(const measurement::MeasurementReport& report, std::span<const LoadReport> loads,
                        const DistributeParams& params, Millis now) const override;
};

/// Throws NoCandidate when the report has no measured OH with a load entry.
Assignment distribute(const measurement::MeasurementReport& report, std::span<const LoadReport> loads,
                      const DistributeParams& params = {}, Millis now = 0);

/// 3 groups for 3 OH, otherwise 5.
std::uint32_t default_group_count(std::size_t oh_count);

/// Contiguous equal OH slices (remainder OH to the last group); EH capacity
/// floor(eh_count / groups) per group with the remainder added to the last.
PartitionPlan make_partition_plan(const std::vector<NodeId>& oh, std::uint32_t eh_count, std::uint32_t group_count);

/// Removes and returns the EH assigned to `failed`; other assignments are
/// left untouched.
std::set<NodeId> handle_oh_failure(std::vector<Assignment>& assignments, NodeId failed);

struct MhRequest {
  measurement::MeasurementReport report;
  Millis arrival = 0;
};

struct MhResponse {
  NodeId eh;
  std::optional<Assignment> assignment;
  bool remeasure = false;  // no usable candidate: the EH must measure again
  Millis arrival = 0;
  Millis departure = 0;
  Millis response_time = 0;  // departure - arrival, network delay excluded
};

struct MhRejection {
  NodeId eh;
  Millis arrival = 0;
  std::string reason;
};

struct MhServiceParams {
  Millis processing_ms = 5;
  Millis algorithm_ms = 0.5;  // modeled placement time; must stay under the budget
  Millis algorithm_budget_ms = 1;
  void validate() const;
};

/// Structural checks on an incoming report; returns the reason if malformed.
std::optional<std::string> check_report(const measurement::MeasurementReport& report);

/// Stateful MH: single-server FIFO with a load table and the assignment list.
class MonitorHost {
 public:
  MonitorHost(DistributeParams params, MhServiceParams service,
              std::shared_ptr<const Distributor> distributor = std::make_shared<WeightedGreedyDistributor>());

  void update_load(const LoadReport& report);
  /// Drops `failed` from the candidate set; returns the EH to re-admit.
  std::set<NodeId> oh_failed(NodeId failed);

  /// Serves one well-formed request arriving at `req.arrival`.
  MhResponse serve(const MhRequest& req);

  const std::vector<Assignment>& assignments() const { return assignments_; }
  std::vector<LoadReport> loads() const;
  const DistributeParams& params() const { return params_; }
  std::size_t budget_violations() const { return budget_violations_; }
  double max_algorithm_wall_ms() const { return max_algorithm_wall_ms_; }

 private:
  DistributeParams params_;
  MhServiceParams service_;
  std::shared_ptr<const Distributor> distributor_;
  std::vector<LoadReport> loads_;
  std::set<NodeId> failed_;
  std::vector<Assignment> assignments_;
  Millis busy_until_ = 0;
  std::size_t budget_violations_ = 0;
  double max_algorithm_wall_ms_ = 0;
};

struct MhServeResult {
  std::vector<MhResponse> responses;  // one per well-formed request, FIFO
  std::vector<MhRejection> rejected;
  std::vector<Assignment> assignments;
};

MhServeResult mh_serve(std::vector<MhRequest> queue, const std::vector<LoadReport>& loads,
                       const DistributeParams& params = {}, const MhServiceParams& service = {});

/// eh_id,oh_id,cost_ms,assigned_at_ms
std::string csv_header();
std::string csv_row(const Assignment& a);

}  // namespace almcast::distribution
