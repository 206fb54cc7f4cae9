#pragma once

// Whole-system driver over the simulator: OH overlay construction, EH
// measurement and admission through the MH, and failure handling (OH
// crashes, broken OH links, EH re-admission).

#include <cstdint>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "almcast/distribution.hpp"
#include "almcast/measurement.hpp"
#include "almcast/overlay.hpp"
#include "almcast/simnet.hpp"

namespace almcast::world {

/// Node ids: MH first, then the OH, then the EH.
struct Topology {
  NodeId mh;
  std::vector<NodeId> oh;
  std::vector<NodeId> eh;

  /// mh = 0, oh = 1..n, eh = n+1..n+m.
  static Topology standard(std::size_t oh_count, std::size_t eh_count);
};

struct WorldOptions {
  bool construct_overlay = true;
  overlay::OverlayOptions overlay;

  bool measure = true;
  measurement::Strategy strategy = measurement::Strategy::app_timeout();
  std::size_t max_parallel_probes = 0;  // per EH; 0 = unlimited
  Millis eh_start_ms = 0;
  Millis eh_join_spread_ms = 0;  // EH join uniformly in [start, start + spread)
  bool eh_sequential = false;    // each EH joins once the previous one is done
  bool attach = true;            // EH connects to its assigned OH
  int max_measure_rounds = 3;

  distribution::DistributeParams distribute;
  bool default_capacity_cap = true;  // override distribute.capacity_cap with ceil(|EH|/|OH|)*2
  distribution::MhServiceParams mh_service;

  Millis failure_detect_ms = 1000;  // delay before a crash is noticed by its neighbours
};

struct EhResult {
  NodeId eh;
  std::vector<measurement::MeasurementReport> rounds;
  std::optional<distribution::Assignment> assignment;
  bool attached = false;
  Millis started_at = 0;
  Millis finished_at = 0;
};

struct Readmission {
  NodeId failed_oh;
  Millis at = 0;
  std::set<NodeId> eh;
};

struct WorldResult {
  std::optional<overlay::ConstructionResult> construction;
  std::vector<overlay::OverlayNodeState> oh_states;
  std::vector<std::string> protocol_errors;
  std::vector<EhResult> eh;
  std::vector<distribution::MhResponse> responses;
  std::vector<distribution::Assignment> assignments;  // MH state at the end
  std::vector<Readmission> readmissions;
  std::size_t mh_budget_violations = 0;
  simnet::EventLog log;
  bool truncated = false;
  Millis end_time = 0;
  std::uint64_t events = 0;

  /// First-round report of every EH that produced one, in EH order.
  std::vector<measurement::MeasurementReport> first_reports() const;
};

WorldResult run_world(simnet::SimConfig config, const Topology& topo, const WorldOptions& options,
                      bool logging = true);

}  // namespace almcast::world
