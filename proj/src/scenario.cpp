#include "almcast/scenario.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include <fmt/format.h>

#include "almcast/rng.hpp"

namespace almcast::scenario {

using nlohmann::json;

namespace {

struct CountryCount {
  const char* country;
  std::size_t count;
};

// OH deployment (40 nodes, 14 countries), in the order the node sets grew:
// three European OH; then more Europe, one US and one Asian node; then Asia,
// Israel, Canada and Europe; then Europe and the US.
constexpr const char* kOhOrder[] = {
    "Germany", "Italy",   "France",  "Poland",  "Germany", "US",      "Spain",       "Italy",   "Romania", "Korea",
    "Germany", "Canada",  "Korea",   "Israel",  "Austria", "Germany", "Greece",      "Canada",  "Hungary", "Germany",
    "US",      "Germany", "Italy",   "France",  "Switzerland", "Poland", "US",       "Germany", "Italy",   "Spain",
    "France",  "US",      "Germany", "Romania", "Italy",   "Poland",  "US",          "France",  "Germany", "Italy",
};

// EH deployment (23 countries). The rows add up to 1010, so populations are
// apportioned from the shares rather than taken literally.
constexpr CountryCount kEhTable[] = {
    {"Argentina", 10}, {"Australia", 10}, {"Austria", 40},  {"Belgium", 20},    {"Canada", 100},
    {"China", 20},     {"Finland", 10},   {"France", 110},  {"Germany", 160},   {"Greece", 10},
    {"Hungary", 20},   {"Italy", 60},     {"Japan", 10},    {"Korea", 20},      {"Netherlands", 20},
    {"Poland", 40},    {"Portugal", 10},  {"Romania", 20},  {"Russia", 20},     {"Spain", 40},
    {"Switzerland", 10}, {"Taiwan", 10},  {"US", 240},
};

constexpr std::uint64_t kLoadTag = 0x4c4f4144;

// Orders quotas[c] copies of each country so that every prefix is close to
// proportional: copy k of country c sits at (k + 0.5) / quota.
std::vector<std::string> interleave(std::span<const CountryCount> table, const std::vector<std::size_t>& quotas) {
  struct Slot {
    double pos;
    std::size_t row;
  };
  std::vector<Slot> slots;
  for (std::size_t c = 0; c < table.size(); ++c)
    for (std::size_t k = 0; k < quotas[c]; ++k)
      slots.push_back({(static_cast<double>(k) + 0.5) / static_cast<double>(quotas[c]), c});
  std::stable_sort(slots.begin(), slots.end(), [](const Slot& a, const Slot& b) {
    return a.pos != b.pos ? a.pos < b.pos : a.row < b.row;
  });
  std::vector<std::string> out;
  out.reserve(slots.size());
  for (const auto& s : slots) out.emplace_back(table[s.row].country);
  return out;
}

std::vector<std::size_t> largest_remainder(std::span<const CountryCount> table, std::size_t total) {
  const double sum = std::accumulate(table.begin(), table.end(), 0.0,
                                     [](double acc, const CountryCount& c) { return acc + static_cast<double>(c.count); });
  std::vector<std::size_t> quotas(table.size());
  std::vector<std::pair<double, std::size_t>> rema;
  std::size_t assigned = 0;
  for (std::size_t c = 0; c < table.size(); ++c) {
    const double exact = static_cast<double>(table[c].count) * static_cast<double>(total) / sum;
    quotas[c] = static_cast<std::size_t>(std::floor(exact));
    assigned += quotas[c];
    rema.emplace_back(exact - std::floor(exact), c);
  }
  std::stable_sort(rema.begin(), rema.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
  for (std::size_t i = 0; assigned < total; ++i, ++assigned) ++quotas[rema[i % rema.size()].second];
  return quotas;
}

template <typename T>
std::vector<T> counts_field(const json& j, const char* plural, const char* single, std::vector<T> fallback) {
  if (j.contains(plural)) return j.at(plural).get<std::vector<T>>();
  if (j.contains(single)) return {j.at(single).get<T>()};
  return fallback;
}

void world_from_json(const json& j, world::WorldOptions& w) {
  w.construct_overlay = j.value("construct_overlay", w.construct_overlay);
  w.measure = j.value("measure", w.measure);
  if (j.contains("overlay")) {
    const auto& o = j.at("overlay");
    if (o.contains("elimination_rule"))
      w.overlay.elimination_rule = overlay::parse_elimination_rule(o.at("elimination_rule").get<std::string>());
    w.overlay.completion_deadline_ms = o.value("completion_deadline_ms", w.overlay.completion_deadline_ms);
    w.overlay.max_parallel_connects = o.value("max_parallel_connects", w.overlay.max_parallel_connects);
    w.overlay.decision_wait_ms = o.value("decision_wait_ms", w.overlay.decision_wait_ms);
    w.overlay.reconnect_attempts = o.value("reconnect_attempts", w.overlay.reconnect_attempts);
  }
  w.max_parallel_probes = j.value("max_parallel_probes", w.max_parallel_probes);
  w.eh_start_ms = j.value("eh_start_ms", w.eh_start_ms);
  w.eh_join_spread_ms = j.value("eh_join_spread_ms", w.eh_join_spread_ms);
  w.eh_sequential = j.value("eh_sequential", w.eh_sequential);
  w.attach = j.value("attach", w.attach);
  w.max_measure_rounds = j.value("max_measure_rounds", w.max_measure_rounds);
  if (j.contains("distribute")) {
    const auto& d = j.at("distribute");
    w.distribute.alpha = d.value("alpha", w.distribute.alpha);
    w.distribute.beta = d.value("beta", w.distribute.beta);
    w.distribute.load_scale_ms = d.value("load_scale_ms", w.distribute.load_scale_ms);
    w.distribute.capacity_cap = d.value("capacity_cap", w.distribute.capacity_cap);
  }
  w.default_capacity_cap = j.value("default_capacity_cap", w.default_capacity_cap);
  if (j.contains("mh_service")) {
    const auto& m = j.at("mh_service");
    w.mh_service.processing_ms = m.value("processing_ms", w.mh_service.processing_ms);
    w.mh_service.algorithm_ms = m.value("algorithm_ms", w.mh_service.algorithm_ms);
    w.mh_service.algorithm_budget_ms = m.value("algorithm_budget_ms", w.mh_service.algorithm_budget_ms);
  }
  w.failure_detect_ms = j.value("failure_detect_ms", w.failure_detect_ms);
}

json world_to_json(const world::WorldOptions& w) {
  return {
      {"construct_overlay", w.construct_overlay},
      {"measure", w.measure},
      {"overlay",
       {{"elimination_rule", w.overlay.elimination_rule == overlay::EliminationRule::Prose ? "prose" : "listing"},
        {"completion_deadline_ms", w.overlay.completion_deadline_ms},
        {"max_parallel_connects", w.overlay.max_parallel_connects},
        {"decision_wait_ms", w.overlay.decision_wait_ms},
        {"reconnect_attempts", w.overlay.reconnect_attempts}}},
      {"max_parallel_probes", w.max_parallel_probes},
      {"eh_start_ms", w.eh_start_ms},
      {"eh_join_spread_ms", w.eh_join_spread_ms},
      {"eh_sequential", w.eh_sequential},
      {"attach", w.attach},
      {"max_measure_rounds", w.max_measure_rounds},
      {"distribute",
       {{"alpha", w.distribute.alpha},
        {"beta", w.distribute.beta},
        {"load_scale_ms", w.distribute.load_scale_ms},
        {"capacity_cap", w.distribute.capacity_cap}}},
      {"default_capacity_cap", w.default_capacity_cap},
      {"mh_service",
       {{"processing_ms", w.mh_service.processing_ms},
        {"algorithm_ms", w.mh_service.algorithm_ms},
        {"algorithm_budget_ms", w.mh_service.algorithm_budget_ms}}},
      {"failure_detect_ms", w.failure_detect_ms},
  };
}

}  // namespace

std::string_view to_string(Experiment e) {
  switch (e) {
    case Experiment::Construction: return "construction";
    case Experiment::Measurement: return "measurement";
    case Experiment::MhResponse: return "mh_response";
    case Experiment::Solutions: return "solutions";
  }
  return "?";
}

Experiment parse_experiment(std::string_view s) {
  if (s == "construction") return Experiment::Construction;
  if (s == "measurement") return Experiment::Measurement;
  if (s == "mh_response") return Experiment::MhResponse;
  if (s == "solutions") return Experiment::Solutions;
  throw Error(fmt::format("unknown experiment '{}'", s));
}

void Scenario::validate() const {
  if (oh_counts.empty() || eh_counts.empty()) throw Error("scenario: oh_counts and eh_counts must not be empty");
  for (auto n : oh_counts)
    if (n == 0) throw Error("scenario: oh_count must be > 0");
  for (auto m : eh_counts)
    if (m == 0) throw Error("scenario: eh_count must be > 0");
  if (repeats < 1) throw Error("scenario: repeats must be >= 1");
  for (auto b : burst_sizes)
    if (b == 0) throw Error("scenario: burst sizes must be > 0");
  if (burst_gap_ms < 0) throw Error("scenario: burst_gap_ms must be >= 0");
  if (topology.kind != "deployment" && topology.kind != "uniform")
    throw Error(fmt::format("scenario: unknown topology kind '{}'", topology.kind));
  auto unit = [](double v) { return v >= 0 && v <= 1; };
  if (!unit(topology.loaded_factor) || !unit(topology.load_min) || !unit(topology.load_max) ||
      topology.load_min > topology.load_max)
    throw Error("scenario: topology loads must lie in [0,1] with load_min <= load_max");
  for (double l : topology.oh_load)
    if (!unit(l)) throw Error("scenario: oh_load entries must lie in [0,1]");
  strategy.effective().validate();
  for (const auto& s : solutions) measurement::Strategy::parse(s);
  world.mh_service.validate();
  sim.validate();
}

Scenario parse_scenario(const json& j) {
  Scenario s;
  s.name = j.value("name", s.name);
  if (j.contains("experiment")) s.experiment = parse_experiment(j.at("experiment").get<std::string>());
  s.oh_counts = counts_field<std::size_t>(j, "oh_counts", "oh_count", s.oh_counts);
  s.eh_counts = counts_field<std::size_t>(j, "eh_counts", "eh_count", s.eh_counts);
  if (j.contains("strategy")) s.strategy = measurement::Strategy::parse(j.at("strategy").get<std::string>());
  if (j.contains("solutions")) s.solutions = j.at("solutions").get<std::vector<std::string>>();
  s.repeats = j.value("repeats", s.repeats);
  s.seed = j.value("seed", s.seed);
  if (j.contains("burst_sizes")) s.burst_sizes = j.at("burst_sizes").get<std::vector<std::size_t>>();
  s.burst_gap_ms = j.value("burst_gap_ms", s.burst_gap_ms);
  if (j.contains("topology")) {
    const auto& t = j.at("topology");
    auto& d = s.topology;
    d.kind = t.value("kind", d.kind);
    if (t.contains("loaded_oh")) d.loaded_oh = t.at("loaded_oh").get<std::vector<std::uint32_t>>();
    d.loaded_factor = t.value("loaded_factor", d.loaded_factor);
    d.load_min = t.value("load_min", d.load_min);
    d.load_max = t.value("load_max", d.load_max);
    if (t.contains("oh_load")) d.oh_load = t.at("oh_load").get<std::vector<double>>();
    d.oh_processing_ms = t.value("oh_processing_ms", d.oh_processing_ms);
    d.eh_processing_ms = t.value("eh_processing_ms", d.eh_processing_ms);
    d.mh_processing_ms = t.value("mh_processing_ms", d.mh_processing_ms);
    d.region = t.value("region", d.region);
  }
  s.sim.continent_rtt_ms = default_continent_rtt();
  if (j.contains("sim")) from_json(j.at("sim"), s.sim);
  if (j.contains("world")) world_from_json(j.at("world"), s.world);
  s.validate();
  return s;
}

Scenario load_scenario(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(fmt::format("cannot read scenario '{}'", path));
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw Error(fmt::format("scenario '{}': {}", path, e.what()));
  }
  return parse_scenario(j);
}

json to_json(const Scenario& s) {
  json sim;
  simnet::to_json(sim, s.sim);
  sim.erase("nodes");
  const auto& t = s.topology;
  return {
      {"name", s.name},
      {"experiment", std::string(to_string(s.experiment))},
      {"oh_counts", s.oh_counts},
      {"eh_counts", s.eh_counts},
      {"strategy", s.strategy.spec()},
      {"solutions", s.solutions},
      {"repeats", s.repeats},
      {"seed", s.seed},
      {"burst_sizes", s.burst_sizes},
      {"burst_gap_ms", s.burst_gap_ms},
      {"topology",
       {{"kind", t.kind},
        {"loaded_oh", t.loaded_oh},
        {"loaded_factor", t.loaded_factor},
        {"load_min", t.load_min},
        {"load_max", t.load_max},
        {"oh_load", t.oh_load},
        {"oh_processing_ms", t.oh_processing_ms},
        {"eh_processing_ms", t.eh_processing_ms},
        {"mh_processing_ms", t.mh_processing_ms},
        {"region", t.region}}},
      {"sim", sim},
      {"world", world_to_json(s.world)},
  };
}

std::vector<std::string> oh_regions(std::size_t n) {
  // Beyond the table, cycle through it again.
  std::vector<std::string> out;
  for (std::size_t i = 0; i < n; ++i) out.emplace_back(kOhOrder[i % std::size(kOhOrder)]);
  return out;
}

std::vector<std::string> eh_regions(std::size_t m) { return interleave(kEhTable, largest_remainder(kEhTable, m)); }

std::map<std::string, Millis> default_continent_rtt() {
  return {
      {"Europe|Europe", 70},
      {"NorthAmerica|NorthAmerica", 80},
      {"Asia|Asia", 110},
      {"Europe|NorthAmerica", 140},
      {"Europe|MiddleEast", 120},
      {"Asia|Europe", 280},
      {"Asia|NorthAmerica", 190},
      {"Europe|SouthAmerica", 250},
      {"NorthAmerica|SouthAmerica", 170},
      {"Europe|Oceania", 330},
      {"NorthAmerica|Oceania", 210},
      {"Asia|Oceania", 150},
      {"Asia|MiddleEast", 260},
      {"MiddleEast|NorthAmerica", 200},
      {"Asia|SouthAmerica", 330},
      {"Oceania|SouthAmerica", 320},
  };
}

simnet::SimConfig build_sim_config(const Scenario& s, std::size_t oh_count, std::size_t eh_count,
                                   std::uint64_t seed) {
  simnet::SimConfig c = s.sim;
  c.seed = seed;
  c.nodes.clear();
  const auto& t = s.topology;
  const bool deployment = t.kind == "deployment";
  const auto topo = world::Topology::standard(oh_count, eh_count);

  c.nodes.push_back({topo.mh, deployment ? std::string("Germany") : t.region, 0.0, t.mh_processing_ms});
  const auto ohr = deployment ? oh_regions(oh_count) : std::vector<std::string>(oh_count, t.region);
  for (std::size_t i = 0; i < oh_count; ++i) {
    const NodeId id = topo.oh[i];
    double load = 0;
    if (deployment) {
      if (std::find(t.loaded_oh.begin(), t.loaded_oh.end(), id.id) != t.loaded_oh.end()) {
        load = t.loaded_factor;
      } else {
        KeyedStream ks(seed, {kLoadTag, id.id});
        load = t.load_min + (t.load_max - t.load_min) * ks.uniform();
      }
    } else if (i < t.oh_load.size()) {
      load = t.oh_load[i];
    }
    c.nodes.push_back({id, ohr[i], load, t.oh_processing_ms});
  }
  const auto ehr = deployment ? eh_regions(eh_count) : std::vector<std::string>(eh_count, t.region);
  for (std::size_t k = 0; k < eh_count; ++k) c.nodes.push_back({topo.eh[k], ehr[k], 0.0, t.eh_processing_ms});
  c.validate();
  return c;
}

}  // namespace almcast::scenario
