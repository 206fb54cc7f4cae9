#include "almcast/calibrate.hpp"

#include <charconv>
#include <cmath>
#include <set>

#include <fmt/format.h>

#include "almcast/experiment.hpp"

namespace almcast::calibrate {

using scenario::Scenario;

namespace {

double parse_double(std::string_view s, std::string_view what) {
  double v = 0;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size()) throw Error(fmt::format("bad {} '{}'", what, s));
  return v;
}

std::string kind_alias(measurement::Strategy::Kind k) {
  switch (k) {
    case measurement::Strategy::Kind::BaselineRetry: return "baseline";
    case measurement::Strategy::Kind::ZeroReconnect: return "zero";
    case measurement::Strategy::Kind::AppTimeout: return "apptimeout";
    case measurement::Strategy::Kind::Partitioned: return "partitioned";
  }
  return "?";
}

// "<alias>_mean_mi" -> (alias, "mean_mi")
std::pair<std::string, std::string> split_stat(const std::string& name) {
  for (const char* suffix : {"_mean_mi", "_pct"}) {
    const std::string sfx = suffix;
    if (name.size() > sfx.size() && name.ends_with(sfx)) return {name.substr(0, name.size() - sfx.size()), sfx.substr(1)};
  }
  throw Error(fmt::format("unknown statistic '{}' (expected <strategy>_mean_mi or <strategy>_pct)", name));
}

}  // namespace

Target parse_target(std::string_view text) {
  const auto eq = text.find('=');
  if (eq == std::string_view::npos || eq == 0) throw Error(fmt::format("bad target '{}' (expected name=value)", text));
  Target t;
  t.name = std::string(text.substr(0, eq));
  auto rest = text.substr(eq + 1);
  if (auto at = rest.find('@'); at != std::string_view::npos) {
    t.tolerance = parse_double(rest.substr(at + 1), "tolerance");
    rest = rest.substr(0, at);
  }
  t.value = parse_double(rest, "target value");
  split_stat(t.name);
  return t;
}

double get_param(const Scenario& s, std::string_view name) {
  if (name == "accept_service_ms") return s.sim.accept_service_ms;
  if (name == "load_sensitivity") return s.sim.load_sensitivity;
  if (name == "load_gain") return s.sim.load_gain;
  if (name == "connect_median_ms") return s.sim.model_for(simnet::PairClass::Intercontinental).median_ms;
  if (name == "connect_sigma") return s.sim.model_for(simnet::PairClass::Intercontinental).sigma;
  if (name == "eh_join_spread_ms") return s.world.eh_join_spread_ms;
  if (name == "loaded_factor") return s.topology.loaded_factor;
  throw Error(fmt::format("unknown calibration parameter '{}'", name));
}

void set_param(Scenario& s, std::string_view name, double value) {
  if (name == "accept_service_ms") {
    s.sim.accept_service_ms = value;
  } else if (name == "load_sensitivity") {
    s.sim.load_sensitivity = value;
  } else if (name == "load_gain") {
    s.sim.load_gain = value;
  } else if (name == "connect_median_ms" || name == "connect_sigma") {
    // Scales every pair class together, keeping their ratios.
    const bool median = name == "connect_median_ms";
    const double old = get_param(s, name);
    for (auto cls : {simnet::PairClass::SameRegion, simnet::PairClass::SameContinent,
                     simnet::PairClass::Intercontinental}) {
      auto m = s.sim.model_for(cls);
      double& field = median ? m.median_ms : m.sigma;
      field = old > 0 ? field * value / old : value;
      s.sim.connect_time_model[cls] = m;
    }
  } else if (name == "eh_join_spread_ms") {
    s.world.eh_join_spread_ms = value;
  } else if (name == "loaded_factor") {
    s.topology.loaded_factor = std::min(value, 0.99);
  } else {
    throw Error(fmt::format("unknown calibration parameter '{}'", name));
  }
}

std::map<std::string, double> evaluate(const Scenario& s, const std::vector<Target>& targets, int repeats) {
  std::set<std::string> aliases;
  for (const auto& t : targets) aliases.insert(split_stat(t.name).first);
  Scenario run = s;
  run.solutions.clear();
  std::vector<std::string> order;
  for (const auto& spec : s.solutions) {
    const auto alias = kind_alias(measurement::Strategy::parse(spec).kind);
    if (aliases.contains(alias) && std::find(order.begin(), order.end(), alias) == order.end()) {
      run.solutions.push_back(spec);
      order.push_back(alias);
    }
  }
  for (const auto& a : aliases)
    if (std::find(order.begin(), order.end(), a) == order.end())
      throw Error(fmt::format("no '{}' strategy in the scenario's solutions list", a));
  experiment::RunOptions opt;
  opt.repeats = repeats;
  const auto table = experiment::run_solutions(run, opt);
  std::map<std::string, double> out;
  for (std::size_t i = 0; i < order.size(); ++i) {
    out[order[i] + "_mean_mi"] = table.rows[i].mean_mi.mean;
    out[order[i] + "_pct"] = table.rows[i].measured_pct;
  }
  return out;
}

double loss(const std::map<std::string, double>& achieved, const std::vector<Target>& targets) {
  double l = 0;
  for (const auto& t : targets) {
    const double v = achieved.at(t.name);
    const double e = t.value != 0 ? (v - t.value) / t.value : v;
    l += e * e;
  }
  return l;
}

bool within_tolerance(const std::map<std::string, double>& achieved, const std::vector<Target>& targets) {
  for (const auto& t : targets) {
    const double v = achieved.at(t.name);
    if (std::abs(v - t.value) > t.tolerance * std::abs(t.value)) return false;
  }
  return true;
}

Result calibrate(const Scenario& s, const std::vector<Target>& targets, const Options& options) {
  if (targets.empty()) throw Error("calibrate: no targets");
  Result best;
  best.best = s;
  best.achieved = evaluate(s, targets, options.repeats);
  best.loss = loss(best.achieved, targets);
  best.evaluations = 1;
  auto report = [&](const std::string& what) {
    if (options.progress) options.progress(what);
  };
  report(fmt::format("start loss={:.5f}", best.loss));

  std::map<std::string, double> step;
  for (const auto& p : options.params) step[p] = options.initial_step;

  bool any_active = true;
  while (any_active && best.evaluations < options.max_evaluations && !within_tolerance(best.achieved, targets)) {
    any_active = false;
    for (const auto& p : options.params) {
      if (step[p] < options.min_step || best.evaluations >= options.max_evaluations) continue;
      any_active = true;
      const double cur = get_param(best.best, p);
      bool improved = false;
      for (double f : {step[p], 1.0 / step[p]}) {
        if (best.evaluations >= options.max_evaluations) break;
        Scenario trial = best.best;
        set_param(trial, p, cur > 0 ? cur * f : (f > 1 ? 1.0 : 0.0));
        auto got = evaluate(trial, targets, options.repeats);
        ++best.evaluations;
        const double l = loss(got, targets);
        report(fmt::format("eval {} {}={:.5g} loss={:.5f}", best.evaluations, p, get_param(trial, p), l));
        if (l < best.loss) {
          best.best = std::move(trial);
          best.achieved = std::move(got);
          best.loss = l;
          improved = true;
          break;
        }
      }
      if (!improved) step[p] = std::sqrt(step[p]);
      if (within_tolerance(best.achieved, targets)) break;
    }
  }
  best.met = within_tolerance(best.achieved, targets);
  return best;
}

}  // namespace almcast::calibrate
