#pragma once

// Coordinate search over simulator parameters so that named aggregate
// statistics of a scenario hit target values.
//
// Statistic names are "<strategy>_mean_mi" and "<strategy>_pct", where
// <strategy> is baseline, zero, apptimeout or partitioned and refers to the
// first matching entry of the scenario's solutions list.

#include <functional>
#include <map>
#include <string>
#include <vector>

#include "almcast/scenario.hpp"

namespace almcast::calibrate {

struct Target {
  std::string name;
  double value = 0;
  double tolerance = 0.10;  // relative
};

/// "name=value" or "name=value@tolerance".
Target parse_target(std::string_view text);

/// Tunable parameters, all positive and searched multiplicatively.
inline const std::vector<std::string> kDefaultParams = {"accept_service_ms", "load_sensitivity",
                                                        "connect_median_ms", "load_gain"};

double get_param(const scenario::Scenario& s, std::string_view name);
void set_param(scenario::Scenario& s, std::string_view name, double value);

struct Options {
  int repeats = 2;
  int max_evaluations = 60;
  double initial_step = 2.0;  // multiplicative
  double min_step = 1.02;
  std::vector<std::string> params = kDefaultParams;
  std::function<void(const std::string&)> progress;
};

/// Every statistic the targets name, from one paired run of the strategies.
std::map<std::string, double> evaluate(const scenario::Scenario& s, const std::vector<Target>& targets, int repeats);

/// Sum of squared relative errors.
double loss(const std::map<std::string, double>& achieved, const std::vector<Target>& targets);
bool within_tolerance(const std::map<std::string, double>& achieved, const std::vector<Target>& targets);

struct Result {
  scenario::Scenario best;
  std::map<std::string, double> achieved;
  double loss = 0;
  bool met = false;
  int evaluations = 0;
};

Result calibrate(const scenario::Scenario& s, const std::vector<Target>& targets, const Options& options = {});

}  // namespace almcast::calibrate
