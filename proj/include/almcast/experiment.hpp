#pragma once

// Experiment families over the simulator: overlay construction time, EH
// measurement statistics, MH response time under request bursts, and the
// strategy comparison on paired seeds.

#include <functional>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "almcast/scenario.hpp"
#include "almcast/world.hpp"

namespace almcast::experiment {

struct RepeatRow {
  std::string experiment;
  std::string strategy;
  std::size_t oh_count = 0;
  std::size_t eh_count = 0;
  std::size_t burst = 0;  // mh_response only
  int repeat = 0;
  std::uint64_t seed = 0;

  Millis overlay_time = 0;
  std::size_t links = 0;
  Millis mean_mi = 0;
  Millis max_mi = 0;
  Millis mean_rtt = 0;   // per probe, measured targets of the first round
  Millis mean_cumm = 0;  // per measured target of the first round
  Millis mean_mh_response = 0;
  double measured_pct = 0;
};

struct Stat {
  double mean = 0;
  double min = 0;
  double max = 0;
};

Stat stat_of(const std::vector<double>& values);

struct AggregateRow {
  std::string experiment;
  std::string strategy;
  std::size_t oh_count = 0;
  std::size_t eh_count = 0;
  std::size_t burst = 0;
  int repeats = 0;
  Stat overlay_time, mean_mi, max_mi, mean_rtt, mean_cumm, mean_mh_response, measured_pct;
};

struct ExperimentResult {
  std::string name;
  std::vector<RepeatRow> rows;

  /// Rows grouped by (experiment, strategy, oh, eh, burst) in first-seen order.
  std::vector<AggregateRow> aggregate() const;
};

struct SolutionRow {
  std::string strategy;
  Stat mean_mi;
  double measured_pct = 0;
  double factor = 1;  // first strategy's mean m_i / this one's
};

struct SolutionsTable {
  ExperimentResult result;
  std::vector<SolutionRow> rows;
  /// Mean m_i strictly decreasing in the listed order.
  bool strictly_ordered() const;
};

struct RunOptions {
  std::optional<std::uint64_t> seed;  // overrides the scenario seed
  std::optional<int> repeats;
  bool logging = false;
  /// Called after every simulated run (with the run's log when logging).
  std::function<void(const RepeatRow&, const world::WorldResult&)> on_run;
};

/// Seed of repeat r: base + r.
std::uint64_t repeat_seed(std::uint64_t base, int r);

ExperimentResult run_construction(const scenario::Scenario& s, const RunOptions& opt = {});
ExperimentResult run_measurement(const scenario::Scenario& s, const RunOptions& opt = {});
ExperimentResult run_mh_response(const scenario::Scenario& s, const RunOptions& opt = {});
SolutionsTable run_solutions(const scenario::Scenario& s, const RunOptions& opt = {});

/// One simulated run of `s` with `strategy` on (n, m, seed).
world::WorldResult simulate(const scenario::Scenario& s, const measurement::Strategy& strategy, std::size_t n,
                            std::size_t m, std::uint64_t seed, bool logging);

/// Fills the metrics of `row` from a finished run.
void fill_metrics(RepeatRow& row, const world::WorldResult& w);

/// Recomputes a measurement/construction row's metrics from an event log
/// alone; `key` supplies the identifying columns.
RepeatRow replay_row(const simnet::EventLog& log, const RepeatRow& key);

/// Mean MH response time when `reports` arrive in bursts of `burst`
/// simultaneous requests, bursts `gap` apart.
Millis burst_response_time(const std::vector<measurement::MeasurementReport>& reports,
                           const std::vector<distribution::LoadReport>& loads, std::size_t burst, Millis gap,
                           const distribution::DistributeParams& params,
                           const distribution::MhServiceParams& service);

std::string rows_header();
std::string row_csv(const RepeatRow& r);
void write_rows_csv(std::ostream& out, const std::vector<RepeatRow>& rows);
void write_aggregate_csv(std::ostream& out, const std::vector<AggregateRow>& rows);
void write_solutions_csv(std::ostream& out, const std::vector<SolutionRow>& rows);

}  // namespace almcast::experiment
