// almcast: simulator experiments, calibration and real-transport roles.

#include <atomic>
#include <chrono>
#include <csignal>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <thread>

#include <fmt/format.h>

#include "CLI11.hpp"
#include "almcast/calibrate.hpp"
#include "almcast/experiment.hpp"
#include "almcast/roles.hpp"
#include "almcast/scenario.hpp"

namespace fs = std::filesystem;
using namespace almcast;

namespace {

std::atomic<bool> g_stop{false};

void on_signal(int) { g_stop = true; }

void install_signal_handlers() {
  std::signal(SIGINT, on_signal);
  std::signal(SIGTERM, on_signal);
}

// Sleeps until a signal arrives or `serve_ms` (if positive) elapses.
void serve(double serve_ms) {
  const auto start = std::chrono::steady_clock::now();
  while (!g_stop) {
    std::this_thread::sleep_for(std::chrono::milliseconds(50));
    if (serve_ms > 0 && std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count() >=
                            serve_ms)
      break;
  }
}

std::ofstream open_out(const fs::path& p) {
  std::ofstream out(p);
  if (!out) throw Error(fmt::format("cannot write '{}'", p.string()));
  return out;
}

std::string event_file_name(const experiment::RepeatRow& r) {
  std::string strategy = r.strategy;
  for (char& c : strategy)
    if (c == ':') c = '-';
  return fmt::format("{}_{}_oh{}_eh{}_r{}.csv", r.experiment, strategy, r.oh_count, r.eh_count, r.repeat);
}

int run_sim(const std::string& scenario_path, const std::string& out_dir, std::optional<std::uint64_t> seed,
            std::optional<int> repeats, bool events) {
  const auto s = scenario::load_scenario(scenario_path);
  fs::create_directories(out_dir);
  experiment::RunOptions opt;
  opt.seed = seed;
  opt.repeats = repeats;
  opt.logging = events;
  if (events) {
    fs::create_directories(fs::path(out_dir) / "events");
    opt.on_run = [&](const experiment::RepeatRow& row, const world::WorldResult& w) {
      auto out = open_out(fs::path(out_dir) / "events" / event_file_name(row));
      w.log.write_csv(out);
    };
  }

  experiment::ExperimentResult result;
  switch (s.experiment) {
    case scenario::Experiment::Construction: result = experiment::run_construction(s, opt); break;
    case scenario::Experiment::Measurement: result = experiment::run_measurement(s, opt); break;
    case scenario::Experiment::MhResponse: result = experiment::run_mh_response(s, opt); break;
    case scenario::Experiment::Solutions: {
      auto table = experiment::run_solutions(s, opt);
      auto out = open_out(fs::path(out_dir) / "solutions.csv");
      experiment::write_solutions_csv(out, table.rows);
      for (const auto& r : table.rows)
        fmt::print("{:<32} mean m_i {:>10.1f} ms  measured {:>6.2f}%  factor {:.2f}\n", r.strategy, r.mean_mi.mean,
                   r.measured_pct, r.factor);
      result = std::move(table.result);
      break;
    }
  }
  {
    auto out = open_out(fs::path(out_dir) / "rows.csv");
    experiment::write_rows_csv(out, result.rows);
  }
  {
    auto out = open_out(fs::path(out_dir) / "aggregate.csv");
    experiment::write_aggregate_csv(out, result.aggregate());
  }
  fmt::print("{}: {} rows written to {}\n", s.name, result.rows.size(), out_dir);
  return 0;
}

int run_calibrate(const std::string& scenario_path, const std::vector<std::string>& target_specs,
                  const std::string& out_path, int repeats, int max_evals, const std::vector<std::string>& params) {
  const auto s = scenario::load_scenario(scenario_path);
  std::vector<calibrate::Target> targets;
  for (const auto& t : target_specs) targets.push_back(calibrate::parse_target(t));
  calibrate::Options o;
  o.repeats = repeats;
  o.max_evaluations = max_evals;
  if (!params.empty()) o.params = params;
  o.progress = [](const std::string& line) { fmt::print(stderr, "{}\n", line); };
  const auto res = calibrate::calibrate(s, targets, o);
  {
    auto out = open_out(out_path);
    out << scenario::to_json(res.best).dump(2) << '\n';
  }
  for (const auto& t : targets)
    fmt::print("{} target {:.2f} achieved {:.2f}\n", t.name, t.value, res.achieved.at(t.name));
  fmt::print("evaluations {} loss {:.6f} -> {}\n", res.evaluations, res.loss, res.met ? "met" : "shortfall");
  return res.met ? 0 : 2;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Application-layer multicast overlay: simulator experiments and real-transport roles"};
  app.require_subcommand(1);

  // sim
  auto* sim = app.add_subcommand("sim", "Run a scenario's experiment in the simulator");
  std::string scenario_path, out_dir;
  std::optional<std::uint64_t> seed;
  std::optional<int> repeats;
  bool events = false;
  sim->add_option("--scenario", scenario_path, "Scenario JSON file")->required()->check(CLI::ExistingFile);
  sim->add_option("--out", out_dir, "Output directory")->required();
  sim->add_option("--seed", seed, "Base seed (overrides the scenario)");
  sim->add_option("--repeats", repeats, "Repeats (overrides the scenario)")->check(CLI::PositiveNumber);
  sim->add_flag("--events", events, "Write every run's event log under <out>/events");

  // calibrate
  auto* cal = app.add_subcommand("calibrate", "Fit simulator parameters to target statistics");
  std::vector<std::string> targets, params;
  std::string cal_out;
  int cal_repeats = 2, max_evals = 60;
  cal->add_option("--scenario", scenario_path, "Scenario JSON file")->required()->check(CLI::ExistingFile);
  cal->add_option("--target", targets, "name=value[@tolerance], e.g. baseline_mean_mi=89000")->required();
  cal->add_option("--out", cal_out, "Calibrated scenario output")->required();
  cal->add_option("--repeats", cal_repeats, "Repeats per evaluation")->check(CLI::PositiveNumber);
  cal->add_option("--max-evals", max_evals, "Evaluation budget")->check(CLI::PositiveNumber);
  cal->add_option("--param", params, "Parameters to search (default: all)");

  // oh
  auto* oh = app.add_subcommand("oh", "Run an overlay host");
  std::uint32_t id = 0;
  std::string listen = "127.0.0.1:0", peers_file, mh_addr, strategy_spec = "apptimeout:10000";
  double load = 0, delay_ms = 1000, serve_ms = 0, deadline_ms = 21000, resolution_ms = 1;
  oh->add_option("--id", id, "Node id")->required();
  oh->add_option("--listen", listen, "host:port to listen on");
  oh->add_option("--peers", peers_file, "Peer list: 'id host:port' per line")->required()->check(CLI::ExistingFile);
  oh->add_option("--mh", mh_addr, "MH host:port for the load report");
  oh->add_option("--load", load, "Load factor reported to the MH")->check(CLI::Range(0.0, 1.0));
  oh->add_option("--delay", delay_ms, "Wait before connecting to peers (ms)");
  oh->add_option("--deadline", deadline_ms, "Construction completion deadline (ms)");
  oh->add_option("--resolution", resolution_ms, "RTT quantization (ms)");
  oh->add_option("--serve", serve_ms, "Exit after this long (ms); default: until signalled");

  // mh
  auto* mh = app.add_subcommand("mh", "Run the monitor host");
  std::size_t cap_eh = 0, cap_oh = 0;
  mh->add_option("--listen", listen, "host:port to listen on");
  mh->add_option("--eh-count", cap_eh, "Expected EH population (capacity cap)");
  mh->add_option("--oh-count", cap_oh, "Expected OH population (capacity cap)");
  mh->add_option("--serve", serve_ms, "Exit after this long (ms); default: until signalled");

  // eh
  auto* eh = app.add_subcommand("eh", "Run one end host: measure, request placement, attach");
  std::size_t eh_index = 0, eh_count = 1;
  double hold_ms = 0;
  eh->add_option("--id", id, "Node id")->required();
  eh->add_option("--peers", peers_file, "OH list: 'id host:port' per line")->required()->check(CLI::ExistingFile);
  eh->add_option("--mh", mh_addr, "MH host:port")->required();
  eh->add_option("--strategy", strategy_spec, "baseline[:n] | zero | apptimeout:<ms> | partitioned:<inner>");
  eh->add_option("--index", eh_index, "Position in the EH population (partitioning)");
  eh->add_option("--count", eh_count, "EH population size (partitioning)");
  eh->add_option("--resolution", resolution_ms, "RTT quantization (ms)");
  eh->add_option("--hold", hold_ms, "Stay attached this long before exiting (ms)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 1;
  }

  try {
    if (*sim) return run_sim(scenario_path, out_dir, seed, repeats, events);
    if (*cal) return run_calibrate(scenario_path, targets, cal_out, cal_repeats, max_evals, params);

    install_signal_handlers();
    if (*oh) {
      transport::OhConfig c;
      c.id = NodeId::oh(id);
      c.listen = transport::Endpoint::parse(listen);
      c.load_factor = load;
      c.overlay.completion_deadline_ms = deadline_ms;
      c.rtt_resolution_ms = resolution_ms;
      if (!mh_addr.empty()) c.mh = transport::Endpoint::parse(mh_addr);
      const auto peers = transport::read_peer_file(peers_file);
      transport::OhServer server(c);
      const auto bound = server.bind();
      fmt::print("OH {} listening on {}\n", id, bound.str());
      std::fflush(stdout);
      server.report_load();
      std::this_thread::sleep_for(std::chrono::duration<double, std::milli>(delay_ms));
      server.construct(peers);
      while (!g_stop && !server.wait_finalized(100)) {
      }
      const auto st = server.state();
      if (st.finalized) {
        fmt::print("OH {} overlay complete: g_time {:.1f} ms\n", id, st.g_time);
        for (const auto& l : server.links())
          fmt::print("  link {}-{} retained {}\n", l.a.id, l.b.id,
                     l.retained == overlay::Direction::AtoB ? "a->b" : "b->a");
      }
      std::fflush(stdout);
      serve(serve_ms);
      server.stop();
      return st.finalized ? 0 : 1;
    }
    if (*mh) {
      transport::MhConfig c;
      c.listen = transport::Endpoint::parse(listen);
      if (cap_eh > 0 && cap_oh > 0) c.params.capacity_cap = distribution::default_capacity_cap(cap_eh, cap_oh);
      transport::MhServer server(c);
      fmt::print("MH listening on {}\n", server.bind().str());
      std::fflush(stdout);
      serve(serve_ms);
      for (const auto& a : server.assignments())
        fmt::print("assign eh {} -> oh {} cost {:.1f}{}\n", a.eh.id, a.oh.id, a.cost, a.overloaded ? " (overloaded)" : "");
      server.stop();
      return 0;
    }
    if (*eh) {
      transport::EhConfig c;
      c.id = NodeId::eh(id);
      c.oh = transport::read_peer_file(peers_file);
      c.mh = transport::Endpoint::parse(mh_addr);
      c.strategy = measurement::Strategy::parse(strategy_spec);
      c.eh_index = eh_index;
      c.eh_count = eh_count;
      c.rtt_resolution_ms = resolution_ms;
      transport::EhClient client(c);
      const auto outcome = client.run();
      for (const auto& rep : outcome.rounds) {
        fmt::print("round: m_i {:.1f} ms, measured {:.1f}%\n", rep.m_i, rep.measured_percentage);
        for (const auto& r : rep.records) fmt::print("  {}\n", measurement::csv_row(r));
      }
      if (!outcome.assignment) {
        fmt::print("no assignment\n");
        return 1;
      }
      fmt::print("assigned to OH {} (cost {:.1f}){}\n", outcome.assignment->oh.id, outcome.assignment->cost,
                 outcome.attached ? ", attached" : "");
      std::fflush(stdout);
      if (hold_ms > 0) serve(hold_ms);
      return outcome.attached ? 0 : 1;
    }
  } catch (const std::exception& e) {
    fmt::print(stderr, "error: {}\n", e.what());
    return 1;
  }
  return 1;
}
