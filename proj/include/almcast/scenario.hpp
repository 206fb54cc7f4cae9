#pragma once

// Scenario files: which experiment to run, on which populations, with which
// simulator parameters. Also builds the per-run SimConfig (node profiles,
// regions, loads) from the scenario's topology block.

#include <cstdint>
#include <string>
#include <vector>

#include "almcast/measurement.hpp"
#include "almcast/simnet.hpp"
#include "almcast/world.hpp"
#include "json.hpp"

namespace almcast::scenario {

enum class Experiment { Construction, Measurement, MhResponse, Solutions };

std::string_view to_string(Experiment e);
Experiment parse_experiment(std::string_view s);

struct TopologySpec {
  // "deployment": OH and EH countries follow the deployment tables, OH loads are
  // drawn per run. "uniform": every node in `region`, loads from oh_load.
  std::string kind = "deployment";
  std::vector<std::uint32_t> loaded_oh = {10, 14, 20};  // OH ids pinned at loaded_factor
  double loaded_factor = 0.85;
  double load_min = 0.0;
  double load_max = 0.3;
  std::vector<double> oh_load;  // explicit per-OH loads (uniform kind); missing entries are 0
  Millis oh_processing_ms = 1;
  Millis eh_processing_ms = 1;
  Millis mh_processing_ms = 1;
  std::string region = "Germany";
};

struct Scenario {
  std::string name = "scenario";
  Experiment experiment = Experiment::Measurement;
  std::vector<std::size_t> oh_counts = {3};
  std::vector<std::size_t> eh_counts = {10};
  measurement::Strategy strategy = measurement::Strategy::baseline();
  std::vector<std::string> solutions = {"baseline", "zero", "apptimeout:10000", "partitioned:apptimeout:10000"};
  int repeats = 10;
  std::uint64_t seed = 1;
  std::vector<std::size_t> burst_sizes = {2, 4};
  Millis burst_gap_ms = 1000;
  TopologySpec topology;
  simnet::SimConfig sim;
  world::WorldOptions world;

  void validate() const;
};

Scenario parse_scenario(const nlohmann::json& j);
Scenario load_scenario(const std::string& path);
nlohmann::json to_json(const Scenario& s);

/// Countries of OH 1..n. The first 40 follow the OH deployment table in the
/// order its 3/10/20/30/40-node sets were built; beyond that it cycles.
std::vector<std::string> oh_regions(std::size_t n);
/// EH countries, apportioned from the EH deployment table by largest
/// remainder and interleaved.
std::vector<std::string> eh_regions(std::size_t m);

/// Default inter-continent RTT tiers (all >= 60 ms).
std::map<std::string, Millis> default_continent_rtt();

/// SimConfig for one run: the scenario's sim block plus generated node
/// profiles for the standard topology (MH 0, OH 1..n, EH n+1..n+m).
simnet::SimConfig build_sim_config(const Scenario& s, std::size_t oh_count, std::size_t eh_count, std::uint64_t seed);

}  // namespace almcast::scenario
