#include "almcast/experiment.hpp"

#include <algorithm>
#include <charconv>
#include <map>
#include <numeric>
#include <ostream>
#include <set>
#include <tuple>

#include <fmt/format.h>

namespace almcast::experiment {

using measurement::MeasurementReport;
using scenario::Scenario;

namespace {

double mean_of(const std::vector<double>& v) {
  if (v.empty()) return 0;
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

double to_double(std::string_view s) {
  double v = 0;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc()) {
    // from_chars rejects "inf"; the log writes infinities that way.
    if (s == "inf") return kInfinity;
    throw Error(fmt::format("bad number '{}' in event log", s));
  }
  return v;
}

RepeatRow key_row(std::string_view experiment, const measurement::Strategy& st, std::size_t n, std::size_t m,
                  int r, std::uint64_t seed) {
  RepeatRow row;
  row.experiment = experiment;
  row.strategy = st.spec();
  row.oh_count = n;
  row.eh_count = m;
  row.repeat = r;
  row.seed = seed;
  return row;
}

int repeats_of(const Scenario& s, const RunOptions& o) { return o.repeats.value_or(s.repeats); }
std::uint64_t seed_of(const Scenario& s, const RunOptions& o) { return o.seed.value_or(s.seed); }

std::vector<distribution::LoadReport> loads_of(const simnet::SimConfig& c) {
  std::vector<distribution::LoadReport> out;
  for (const auto& p : c.nodes)
    if (p.id.role == NodeRole::OverlayHost) out.push_back({p.id, 0, p.load_factor, 0});
  return out;
}

}  // namespace

Stat stat_of(const std::vector<double>& values) {
  if (values.empty()) return {};
  auto [lo, hi] = std::minmax_element(values.begin(), values.end());
  return {mean_of(values), *lo, *hi};
}

std::vector<AggregateRow> ExperimentResult::aggregate() const {
  using Key = std::tuple<std::string, std::string, std::size_t, std::size_t, std::size_t>;
  std::vector<Key> order;
  std::map<Key, std::vector<const RepeatRow*>> groups;
  for (const auto& r : rows) {
    Key k{r.experiment, r.strategy, r.oh_count, r.eh_count, r.burst};
    if (!groups.contains(k)) order.push_back(k);
    groups[k].push_back(&r);
  }
  std::vector<AggregateRow> out;
  for (const auto& k : order) {
    const auto& g = groups[k];
    auto col = [&](auto field) {
      std::vector<double> v;
      for (const auto* r : g) v.push_back(static_cast<double>(r->*field));
      return stat_of(v);
    };
    AggregateRow a;
    std::tie(a.experiment, a.strategy, a.oh_count, a.eh_count, a.burst) = k;
    a.repeats = static_cast<int>(g.size());
    a.overlay_time = col(&RepeatRow::overlay_time);
    a.mean_mi = col(&RepeatRow::mean_mi);
    a.max_mi = col(&RepeatRow::max_mi);
    a.mean_rtt = col(&RepeatRow::mean_rtt);
    a.mean_cumm = col(&RepeatRow::mean_cumm);
    a.mean_mh_response = col(&RepeatRow::mean_mh_response);
    a.measured_pct = col(&RepeatRow::measured_pct);
    out.push_back(std::move(a));
  }
  return out;
}

bool SolutionsTable::strictly_ordered() const {
  for (std::size_t i = 1; i < rows.size(); ++i)
    if (!(rows[i].mean_mi.mean < rows[i - 1].mean_mi.mean)) return false;
  return true;
}

std::uint64_t repeat_seed(std::uint64_t base, int r) { return base + static_cast<std::uint64_t>(r); }

world::WorldResult simulate(const Scenario& s, const measurement::Strategy& strategy, std::size_t n, std::size_t m,
                            std::uint64_t seed, bool logging) {
  auto cfg = scenario::build_sim_config(s, n, m, seed);
  auto opts = s.world;
  opts.strategy = strategy;
  return world::run_world(std::move(cfg), world::Topology::standard(n, m), opts, logging);
}

void fill_metrics(RepeatRow& row, const world::WorldResult& w) {
  if (w.construction) {
    row.overlay_time = w.construction->overlay_time;
    row.links = w.construction->links.size();
  }
  const auto reports = w.first_reports();
  std::vector<double> mi, cumm;
  for (const auto& rep : reports) {
    mi.push_back(rep.m_i);
    for (const auto& rec : rep.records)
      if (rec.measured()) cumm.push_back(rec.cumm_lat);
  }
  row.mean_mi = mean_of(mi);
  row.max_mi = mi.empty() ? 0 : *std::max_element(mi.begin(), mi.end());
  row.mean_cumm = mean_of(cumm);
  row.mean_rtt = row.mean_cumm / measurement::kProbesPerTarget;
  row.measured_pct = reports.empty() ? 0 : measurement::measured_percentage_stats(reports);
  std::vector<double> rt;
  for (const auto& r : w.responses) rt.push_back(r.response_time);
  row.mean_mh_response = mean_of(rt);
}

RepeatRow replay_row(const simnet::EventLog& log, const RepeatRow& key) {
  RepeatRow row = key;
  row.overlay_time = 0;
  std::size_t link_ends = 0;
  std::map<std::uint32_t, std::pair<double, double>> first_report;  // eh -> (m_i, pct)
  std::map<std::uint32_t, int> first_round;
  std::vector<std::tuple<std::uint32_t, int, double>> cumm;  // (eh, round, cumm) of measured targets
  std::vector<double> rt;
  for (const auto& e : log.entries()) {
    if (e.kind == "overlay_complete") {
      auto d = simnet::parse_detail(e.detail);
      row.overlay_time = std::max(row.overlay_time, to_double(d.at("g_time")));
      link_ends += static_cast<std::size_t>(to_double(d.at("links")));
    } else if (e.kind == "meas_report") {
      auto d = simnet::parse_detail(e.detail);
      const int round = static_cast<int>(to_double(d.at("round")));
      if (!first_round.contains(e.node) || round < first_round[e.node]) {
        first_round[e.node] = round;
        first_report[e.node] = {to_double(d.at("m_i")), to_double(d.at("measured_pct"))};
      }
    } else if (e.kind == "target_end") {
      auto d = simnet::parse_detail(e.detail);
      if (d.at("status") == "measured")
        cumm.emplace_back(e.node, static_cast<int>(to_double(d.at("round"))), to_double(d.at("cumm")));
    } else if (e.kind == "assign" || e.kind == "remeasure") {
      rt.push_back(to_double(simnet::parse_detail(e.detail).at("rt")));
    }
  }
  row.links = link_ends / 2;
  std::vector<double> mi, pct, cs;
  for (const auto& [eh, v] : first_report) {
    mi.push_back(v.first);
    pct.push_back(v.second);
  }
  for (const auto& [eh, round, c] : cumm)
    if (first_round.contains(eh) && first_round[eh] == round) cs.push_back(c);
  row.mean_mi = mean_of(mi);
  row.max_mi = mi.empty() ? 0 : *std::max_element(mi.begin(), mi.end());
  row.measured_pct = mean_of(pct);
  row.mean_cumm = mean_of(cs);
  row.mean_rtt = row.mean_cumm / measurement::kProbesPerTarget;
  row.mean_mh_response = mean_of(rt);
  return row;
}

Millis burst_response_time(const std::vector<MeasurementReport>& reports,
                           const std::vector<distribution::LoadReport>& loads, std::size_t burst, Millis gap,
                           const distribution::DistributeParams& params,
                           const distribution::MhServiceParams& service) {
  if (burst == 0) throw Error("burst size must be > 0");
  std::vector<distribution::MhRequest> queue;
  for (std::size_t i = 0; i < reports.size(); ++i)
    queue.push_back({reports[i], static_cast<Millis>(i / burst) * gap});
  const auto res = distribution::mh_serve(std::move(queue), loads, params, service);
  std::vector<double> rt;
  for (const auto& r : res.responses) rt.push_back(r.response_time);
  return mean_of(rt);
}

ExperimentResult run_construction(const Scenario& s, const RunOptions& opt) {
  Scenario c = s;
  c.world.construct_overlay = true;
  c.world.measure = false;
  ExperimentResult out{s.name, {}};
  for (std::size_t n : s.oh_counts) {
    for (int r = 0; r < repeats_of(s, opt); ++r) {
      const auto seed = repeat_seed(seed_of(s, opt), r);
      auto w = simulate(c, s.strategy, n, 0, seed, opt.logging);
      auto row = key_row("construction", s.strategy, n, 0, r, seed);
      fill_metrics(row, w);
      if (opt.on_run) opt.on_run(row, w);
      out.rows.push_back(std::move(row));
    }
  }
  return out;
}

ExperimentResult run_measurement(const Scenario& s, const RunOptions& opt) {
  ExperimentResult out{s.name, {}};
  for (std::size_t n : s.oh_counts) {
    for (std::size_t m : s.eh_counts) {
      for (int r = 0; r < repeats_of(s, opt); ++r) {
        const auto seed = repeat_seed(seed_of(s, opt), r);
        auto w = simulate(s, s.strategy, n, m, seed, opt.logging);
        auto row = key_row("measurement", s.strategy, n, m, r, seed);
        fill_metrics(row, w);
        if (opt.on_run) opt.on_run(row, w);
        out.rows.push_back(std::move(row));
      }
    }
  }
  return out;
}

ExperimentResult run_mh_response(const Scenario& s, const RunOptions& opt) {
  ExperimentResult out{s.name, {}};
  for (std::size_t n : s.oh_counts) {
    for (std::size_t m : s.eh_counts) {
      for (int r = 0; r < repeats_of(s, opt); ++r) {
        const auto seed = repeat_seed(seed_of(s, opt), r);
        const auto cfg = scenario::build_sim_config(s, n, m, seed);
        auto w = simulate(s, s.strategy, n, m, seed, opt.logging);
        auto params = s.world.distribute;
        if (s.world.default_capacity_cap) params.capacity_cap = distribution::default_capacity_cap(m, n);
        const auto reports = w.first_reports();
        for (std::size_t b : s.burst_sizes) {
          auto row = key_row("mh_response", s.strategy, n, m, r, seed);
          row.burst = b;
          fill_metrics(row, w);
          row.mean_mh_response =
              burst_response_time(reports, loads_of(cfg), b, s.burst_gap_ms, params, s.world.mh_service);
          out.rows.push_back(std::move(row));
        }
        if (opt.on_run) opt.on_run(out.rows.back(), w);
      }
    }
  }
  return out;
}

SolutionsTable run_solutions(const Scenario& s, const RunOptions& opt) {
  SolutionsTable t{{s.name, {}}, {}};
  std::vector<measurement::Strategy> strategies;
  for (const auto& spec : s.solutions) strategies.push_back(measurement::Strategy::parse(spec));
  const std::size_t n = s.oh_counts.back();
  const std::size_t m = s.eh_counts.back();
  for (const auto& st : strategies) {
    std::vector<double> mi, pct;
    for (int r = 0; r < repeats_of(s, opt); ++r) {
      const auto seed = repeat_seed(seed_of(s, opt), r);  // shared by every strategy
      auto w = simulate(s, st, n, m, seed, opt.logging);
      auto row = key_row("solutions", st, n, m, r, seed);
      fill_metrics(row, w);
      if (opt.on_run) opt.on_run(row, w);
      mi.push_back(row.mean_mi);
      pct.push_back(row.measured_pct);
      t.result.rows.push_back(std::move(row));
    }
    t.rows.push_back({st.spec(), stat_of(mi), mean_of(pct), 1.0});
  }
  for (auto& row : t.rows)
    row.factor = row.mean_mi.mean > 0 ? t.rows.front().mean_mi.mean / row.mean_mi.mean : 0;
  return t;
}

std::string rows_header() {
  return "experiment,strategy,oh_count,eh_count,burst,repeat,seed,overlay_time_ms,links,mean_mi_ms,max_mi_ms,"
         "mean_rtt_ms,mean_cummlat_ms,mean_mh_response_ms,measured_pct";
}

std::string row_csv(const RepeatRow& r) {
  return fmt::format("{},{},{},{},{},{},{},{:.3f},{},{:.3f},{:.3f},{:.3f},{:.3f},{:.3f},{:.3f}", r.experiment,
                     r.strategy, r.oh_count, r.eh_count, r.burst, r.repeat, r.seed, r.overlay_time, r.links,
                     r.mean_mi, r.max_mi, r.mean_rtt, r.mean_cumm, r.mean_mh_response, r.measured_pct);
}

void write_rows_csv(std::ostream& out, const std::vector<RepeatRow>& rows) {
  out << rows_header() << '\n';
  for (const auto& r : rows) out << row_csv(r) << '\n';
}

void write_aggregate_csv(std::ostream& out, const std::vector<AggregateRow>& rows) {
  out << "experiment,strategy,oh_count,eh_count,burst,repeats,metric,mean,min,max\n";
  for (const auto& a : rows) {
    const std::pair<const char*, const Stat*> metrics[] = {
        {"overlay_time_ms", &a.overlay_time},   {"mean_mi_ms", &a.mean_mi},
        {"max_mi_ms", &a.max_mi},               {"mean_rtt_ms", &a.mean_rtt},
        {"mean_cummlat_ms", &a.mean_cumm},      {"mean_mh_response_ms", &a.mean_mh_response},
        {"measured_pct", &a.measured_pct},
    };
    for (const auto& [name, st] : metrics)
      out << fmt::format("{},{},{},{},{},{},{},{:.3f},{:.3f},{:.3f}\n", a.experiment, a.strategy, a.oh_count,
                         a.eh_count, a.burst, a.repeats, name, st->mean, st->min, st->max);
  }
}

void write_solutions_csv(std::ostream& out, const std::vector<SolutionRow>& rows) {
  out << "strategy,mean_mi_ms,min_mi_ms,max_mi_ms,measured_pct,factor\n";
  for (const auto& r : rows)
    out << fmt::format("{},{:.3f},{:.3f},{:.3f},{:.3f},{:.3f}\n", r.strategy, r.mean_mi.mean, r.mean_mi.min,
                       r.mean_mi.max, r.measured_pct, r.factor);
}

}  // namespace almcast::experiment
