#include "almcast/simnet.hpp"

#include <algorithm>
#include <cmath>
#include <istream>
#include <ostream>
#include <sstream>

#include <fmt/format.h>

#include "almcast/rng.hpp"

namespace almcast::simnet {

namespace {

std::string pair_key(std::string_view a, std::string_view b) {
  return a <= b ? fmt::format("{}|{}", a, b) : fmt::format("{}|{}", b, a);
}

PairClass parse_pair_class(std::string_view s) {
  if (s == "same_region") return PairClass::SameRegion;
  if (s == "same_continent") return PairClass::SameContinent;
  if (s == "intercontinental") return PairClass::Intercontinental;
  throw Error(fmt::format("unknown pair class '{}'", s));
}

// Heap order: earliest time first, then lowest ordinal.
bool later(const auto& a, const auto& b) {
  if (a.time != b.time) return a.time > b.time;
  return a.ordinal > b.ordinal;
}

}  // namespace

std::string_view to_string(PairClass c) {
  switch (c) {
    case PairClass::SameRegion: return "same_region";
    case PairClass::SameContinent: return "same_continent";
    case PairClass::Intercontinental: return "intercontinental";
  }
  return "?";
}

std::string continent_of(std::string_view region) {
  static const std::map<std::string, std::string, std::less<>> table = {
      {"Austria", "Europe"},       {"Belgium", "Europe"},     {"Finland", "Europe"},
      {"France", "Europe"},        {"Germany", "Europe"},     {"Greece", "Europe"},
      {"Hungary", "Europe"},       {"Italy", "Europe"},       {"Netherlands", "Europe"},
      {"Poland", "Europe"},        {"Portugal", "Europe"},    {"Romania", "Europe"},
      {"Russia", "Europe"},        {"Spain", "Europe"},       {"Switzerland", "Europe"},
      {"Canada", "NorthAmerica"},  {"US", "NorthAmerica"},    {"Argentina", "SouthAmerica"},
      {"China", "Asia"},           {"Japan", "Asia"},         {"Korea", "Asia"},
      {"Taiwan", "Asia"},          {"Australia", "Oceania"},  {"Israel", "MiddleEast"},
  };
  auto it = table.find(region);
  return it == table.end() ? std::string("Other") : it->second;
}

// ---------------------------------------------------------------- SimConfig

LogNormal SimConfig::model_for(PairClass c) const {
  if (auto it = connect_time_model.find(c); it != connect_time_model.end()) return it->second;
  return LogNormal{};
}

void SimConfig::validate() const {
  auto nonneg = [](Millis v, const char* what) {
    if (!(v >= 0) || std::isinf(v)) throw Error(fmt::format("SimConfig: {} must be finite and >= 0", what));
  };
  if (syn_fail_prob < 0 || syn_fail_prob > 1) throw Error("SimConfig: syn_fail_prob must be in [0,1]");
  nonneg(same_region_rtt_ms, "same_region_rtt_ms");
  nonneg(default_rtt_ms, "default_rtt_ms");
  nonneg(rtt_jitter_ms, "rtt_jitter_ms");
  nonneg(accept_service_ms, "accept_service_ms");
  nonneg(os_timeout_ms, "os_timeout_ms");
  nonneg(probe_timeout_ms, "probe_timeout_ms");
  nonneg(horizon_ms, "horizon_ms");
  if (!(clock_resolution_ms > 0)) throw Error("SimConfig: clock_resolution_ms must be > 0");
  if (load_gain < 0 || load_sensitivity < 0) throw Error("SimConfig: load parameters must be >= 0");
  for (const auto& [k, v] : region_rtt_ms) nonneg(v, "region_rtt_ms entry");
  for (const auto& [k, v] : continent_rtt_ms) nonneg(v, "continent_rtt_ms entry");
  for (const auto& [k, m] : connect_time_model) {
    nonneg(m.median_ms, "connect median");
    nonneg(m.sigma, "connect sigma");
  }
  std::vector<std::uint32_t> ids;
  for (const auto& n : nodes) {
    if (n.load_factor < 0 || n.load_factor > 1)
      throw Error(fmt::format("SimConfig: node {} load_factor must be in [0,1]", n.id.id));
    nonneg(n.processing_delay_ms, "processing_delay_ms");
    ids.push_back(n.id.id);
  }
  std::sort(ids.begin(), ids.end());
  if (std::adjacent_find(ids.begin(), ids.end()) != ids.end()) throw Error("SimConfig: duplicate node id");
  for (const auto& c : crash_schedule) nonneg(c.at_ms, "crash time");
}

void to_json(nlohmann::json& j, const SimConfig& c) {
  j = nlohmann::json::object();
  j["seed"] = c.seed;
  j["region_rtt_ms"] = c.region_rtt_ms;
  j["continent_rtt_ms"] = c.continent_rtt_ms;
  j["same_region_rtt_ms"] = c.same_region_rtt_ms;
  j["default_rtt_ms"] = c.default_rtt_ms;
  j["rtt_jitter_ms"] = c.rtt_jitter_ms;
  nlohmann::json model = nlohmann::json::object();
  for (const auto& [cls, m] : c.connect_time_model)
    model[std::string(to_string(cls))] = {{"median_ms", m.median_ms}, {"sigma", m.sigma}};
  j["connect_time_model"] = model;
  j["load_gain"] = c.load_gain;
  j["accept_service_ms"] = c.accept_service_ms;
  j["load_sensitivity"] = c.load_sensitivity;
  j["syn_fail_prob"] = c.syn_fail_prob;
  j["os_timeout_ms"] = c.os_timeout_ms;
  j["probe_timeout_ms"] = c.probe_timeout_ms;
  j["clock_resolution_ms"] = c.clock_resolution_ms;
  j["horizon_ms"] = c.horizon_ms;
  if (!c.nodes.empty()) {
    auto& arr = j["nodes"] = nlohmann::json::array();
    for (const auto& n : c.nodes)
      arr.push_back({{"id", n.id.id},
                     {"role", std::string(to_string(n.id.role))},
                     {"region", n.region},
                     {"load_factor", n.load_factor},
                     {"processing_delay_ms", n.processing_delay_ms}});
  }
  if (!c.crash_schedule.empty()) {
    auto& arr = j["crash_schedule"] = nlohmann::json::array();
    for (const auto& e : c.crash_schedule) arr.push_back({{"node", e.node}, {"time_ms", e.at_ms}});
  }
  if (!c.link_failures.empty()) {
    auto& arr = j["link_failures"] = nlohmann::json::array();
    for (const auto& e : c.link_failures) arr.push_back({{"a", e.a}, {"b", e.b}, {"time_ms", e.at_ms}});
  }
}

void from_json(const nlohmann::json& j, SimConfig& c) {
  c.seed = j.value("seed", c.seed);
  if (j.contains("region_rtt_ms")) c.region_rtt_ms = j.at("region_rtt_ms").get<std::map<std::string, Millis>>();
  if (j.contains("continent_rtt_ms"))
    c.continent_rtt_ms = j.at("continent_rtt_ms").get<std::map<std::string, Millis>>();
  c.same_region_rtt_ms = j.value("same_region_rtt_ms", c.same_region_rtt_ms);
  c.default_rtt_ms = j.value("default_rtt_ms", c.default_rtt_ms);
  c.rtt_jitter_ms = j.value("rtt_jitter_ms", c.rtt_jitter_ms);
  if (j.contains("connect_time_model")) {
    for (const auto& [key, m] : j.at("connect_time_model").items()) {
      LogNormal ln;
      ln.median_ms = m.value("median_ms", ln.median_ms);
      ln.sigma = m.value("sigma", ln.sigma);
      if (key == "default") {
        for (auto cls : {PairClass::SameRegion, PairClass::SameContinent, PairClass::Intercontinental})
          c.connect_time_model.try_emplace(cls, ln);
      } else {
        c.connect_time_model[parse_pair_class(key)] = ln;
      }
    }
  }
  c.load_gain = j.value("load_gain", c.load_gain);
  c.accept_service_ms = j.value("accept_service_ms", c.accept_service_ms);
  c.load_sensitivity = j.value("load_sensitivity", c.load_sensitivity);
  c.syn_fail_prob = j.value("syn_fail_prob", c.syn_fail_prob);
  c.os_timeout_ms = j.value("os_timeout_ms", c.os_timeout_ms);
  c.probe_timeout_ms = j.value("probe_timeout_ms", c.probe_timeout_ms);
  c.clock_resolution_ms = j.value("clock_resolution_ms", c.clock_resolution_ms);
  c.horizon_ms = j.value("horizon_ms", c.horizon_ms);
  if (j.contains("nodes")) {
    c.nodes.clear();
    for (const auto& n : j.at("nodes")) {
      NodeProfile p;
      p.id = NodeId{n.at("id").get<std::uint32_t>(), parse_role(n.value("role", std::string("oh")))};
      p.region = n.value("region", std::string("Other"));
      p.load_factor = n.value("load_factor", 0.0);
      p.processing_delay_ms = n.value("processing_delay_ms", 0.0);
      c.nodes.push_back(std::move(p));
    }
  }
  if (j.contains("crash_schedule")) {
    c.crash_schedule.clear();
    for (const auto& e : j.at("crash_schedule"))
      c.crash_schedule.push_back({e.at("node").get<std::uint32_t>(), e.at("time_ms").get<Millis>()});
  }
  if (j.contains("link_failures")) {
    c.link_failures.clear();
    for (const auto& e : j.at("link_failures"))
      c.link_failures.push_back(
          {e.at("a").get<std::uint32_t>(), e.at("b").get<std::uint32_t>(), e.at("time_ms").get<Millis>()});
  }
}

// ----------------------------------------------------------------- EventLog

void EventLog::append(Millis time, std::uint32_t node, std::string_view kind, std::string detail) {
  entries_.push_back(LogEntry{time, entries_.size(), node, std::string(kind), std::move(detail)});
}

void EventLog::write_csv(std::ostream& out) const {
  out << "time_ms,ordinal,node_id,event_kind,detail\n";
  for (const auto& e : entries_) {
    out << fmt::format("{},{},{},{},{}\n", e.time, e.ordinal, e.node, e.kind, e.detail);
  }
  if (truncated_) out << "# truncated\n";
}

EventLog EventLog::read_csv(std::istream& in) {
  EventLog log;
  std::string line;
  std::getline(in, line);  // header
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    if (line == "# truncated") {
      log.truncated_ = true;
      continue;
    }
    LogEntry e;
    std::istringstream fields(line);
    std::string tok;
    std::getline(fields, tok, ',');
    e.time = std::stod(tok);
    std::getline(fields, tok, ',');
    e.ordinal = std::stoull(tok);
    std::getline(fields, tok, ',');
    e.node = static_cast<std::uint32_t>(std::stoul(tok));
    std::getline(fields, e.kind, ',');
    std::getline(fields, e.detail);
    log.entries_.push_back(std::move(e));
  }
  return log;
}

std::map<std::string, std::string> parse_detail(std::string_view detail) {
  std::map<std::string, std::string> out;
  while (!detail.empty()) {
    const auto semi = detail.find(';');
    const auto item = detail.substr(0, semi);
    const auto eq = std::find(item.begin(), item.end(), '=');
    if (eq != item.end()) out.emplace(std::string(item.begin(), eq), std::string(eq + 1, item.end()));
    if (semi == std::string_view::npos) break;
    detail.remove_prefix(semi + 1);
  }
  return out;
}

// ---------------------------------------------------------------- Simulator

Simulator::Simulator(SimConfig config, bool logging) : config_(std::move(config)), logging_(logging) {
  config_.validate();
  std::uint32_t max_id = 0;
  for (const auto& n : config_.nodes) max_id = std::max(max_id, n.id.id);
  index_.assign(config_.nodes.empty() ? 0 : max_id + 1, -1);
  for (std::size_t i = 0; i < config_.nodes.size(); ++i) index_[config_.nodes[i].id.id] = static_cast<int>(i);
  alive_.assign(config_.nodes.size(), 1);
  accept_free_at_.assign(config_.nodes.size(), 0.0);

  for (const auto& c : config_.crash_schedule) {
    if (!has_node(c.node)) throw Error(fmt::format("crash_schedule names unknown node {}", c.node));
    const std::uint32_t node = c.node;
    schedule(c.at_ms, EventKind::NodeCrashed, node, [this, node] { crash(node); });
  }
  for (const auto& f : config_.link_failures) {
    const auto a = f.a, b = f.b;
    schedule(f.at_ms, EventKind::TimerFired, a, [this, a, b] {
      note(a, "link_failure", fmt::format("a={};b={}", a, b));
      for (auto& h : link_failure_handlers_) h(a, b);
    });
  }
}

void Simulator::note(std::uint32_t node, std::string_view kind, std::string detail) {
  if (logging_) log_.append(now_, node, kind, std::move(detail));
}

std::uint64_t Simulator::schedule(Millis at, EventKind kind, std::uint32_t node, Callback fn) {
  if (at < now_) throw InvariantViolation(fmt::format("event scheduled in the past ({} < {})", at, now_));
  const std::uint64_t ordinal = next_ordinal_++;
  heap_.push_back(QueuedEvent{at, ordinal, kind, node});
  std::push_heap(heap_.begin(), heap_.end(), [](const auto& a, const auto& b) { return later(a, b); });
  callbacks_.push_back(std::move(fn));
  cancelled_.push_back(0);
  return ordinal;
}

void Simulator::cancel(std::uint64_t event_id) {
  if (event_id < cancelled_.size()) cancelled_[event_id] = 1;
}

bool Simulator::run(Millis horizon) {
  auto cmp = [](const auto& a, const auto& b) { return later(a, b); };
  while (!heap_.empty()) {
    if (heap_.front().time > horizon) {
      log_.mark_truncated();
      return false;
    }
    std::pop_heap(heap_.begin(), heap_.end(), cmp);
    const QueuedEvent ev = heap_.back();
    heap_.pop_back();
    if (cancelled_[ev.ordinal]) {
      callbacks_[ev.ordinal] = nullptr;
      continue;
    }
    now_ = ev.time;
    Callback fn = std::move(callbacks_[ev.ordinal]);
    callbacks_[ev.ordinal] = nullptr;
    ++executed_;
    if (fn) fn();
  }
  return true;
}

std::size_t Simulator::index_of(std::uint32_t node) const {
  if (node >= index_.size() || index_[node] < 0) throw Error(fmt::format("unknown node {}", node));
  return static_cast<std::size_t>(index_[node]);
}

bool Simulator::has_node(std::uint32_t node) const { return node < index_.size() && index_[node] >= 0; }

const NodeProfile& Simulator::profile(std::uint32_t node) const { return config_.nodes[index_of(node)]; }

bool Simulator::alive(std::uint32_t node) const { return alive_[index_of(node)] != 0; }

void Simulator::crash(std::uint32_t node) {
  if (!alive(node)) return;
  alive_[index_of(node)] = 0;
  note(node, "node_crashed", fmt::format("node={}", node));
  for (auto& h : crash_handlers_) h(node);
}

Millis Simulator::quantize(Millis t) const {
  const Millis r = config_.clock_resolution_ms;
  return std::round(t / r) * r;
}

PairClass Simulator::pair_class(std::uint32_t a, std::uint32_t b) const {
  const auto& pa = profile(a);
  const auto& pb = profile(b);
  if (pa.region == pb.region) return PairClass::SameRegion;
  if (continent_of(pa.region) == continent_of(pb.region)) return PairClass::SameContinent;
  return PairClass::Intercontinental;
}

Millis Simulator::base_rtt(std::uint32_t a, std::uint32_t b) const {
  const auto& pa = profile(a);
  const auto& pb = profile(b);
  if (auto it = config_.region_rtt_ms.find(pair_key(pa.region, pb.region)); it != config_.region_rtt_ms.end())
    return it->second;
  if (pa.region == pb.region) return config_.same_region_rtt_ms;
  const auto ca = continent_of(pa.region);
  const auto cb = continent_of(pb.region);
  if (auto it = config_.continent_rtt_ms.find(pair_key(ca, cb)); it != config_.continent_rtt_ms.end())
    return it->second;
  return config_.default_rtt_ms;
}

Millis Simulator::one_way(std::uint32_t a, std::uint32_t b) const {
  return quantize(base_rtt(a, b) / 2 + profile(b).processing_delay_ms);
}

Millis Simulator::accept_service(std::uint32_t dst) const {
  const double load = std::min(profile(dst).load_factor, 0.99);
  return config_.accept_service_ms / std::pow(1.0 - load, config_.load_sensitivity);
}

const ConnectionHandle& Simulator::connection(std::uint64_t serial) const {
  if (serial >= connections_.size()) throw Error(fmt::format("unknown connection {}", serial));
  return connections_[serial].handle;
}

int Simulator::attempt_index(std::uint64_t serial) const { return connections_.at(serial).attempt; }

void Simulator::resolve(std::uint64_t serial, ConnState state, FailReason reason) {
  Conn& c = connections_[serial];
  if (!c.handle.pending()) return;  // abandoned earlier
  c.handle.transition(state, now_, reason);
  note_lazy(c.handle.src.id, "connect_resolved", [&] {
    return fmt::format("conn={};dst={};attempt={};outcome={};reason={};elapsed={}", serial, c.handle.dst.id,
                       c.attempt, to_string(state), to_string(reason), c.handle.conn_time());
  });
  if (c.on_resolved) {
    auto cb = std::move(c.on_resolved);
    c.on_resolved = nullptr;
    cb(c.handle);
  }
}

std::uint64_t Simulator::sim_connect(std::uint32_t src, std::uint32_t dst, ConnectCallback on_resolved) {
  const std::uint64_t serial = connections_.size();
  const int attempt = attempts_[{src, dst}]++;
  Conn c;
  c.handle.serial = serial;
  c.handle.src = profile(src).id;
  c.handle.dst = profile(dst).id;
  c.handle.opened_at = now_;
  c.attempt = attempt;
  c.on_resolved = std::move(on_resolved);
  connections_.push_back(std::move(c));
  note_lazy(src, "connect_start",
            [&] { return fmt::format("conn={};dst={};attempt={}", serial, dst, attempt); });

  const Millis at = now_;
  const Millis fail_at = at + quantize(config_.os_timeout_ms);
  auto fail_later = [this, serial, fail_at, src](FailReason why) {
    schedule(fail_at, EventKind::ConnectResolved, src, [this, serial, why] { resolve(serial, ConnState::Failed, why); });
  };

  if (!alive(src)) {
    resolve(serial, ConnState::Failed, FailReason::Voided);
    return serial;
  }

  KeyedStream stream(config_.seed, {static_cast<std::uint64_t>(StreamTag::Connect), src, dst,
                                    static_cast<std::uint64_t>(attempt)});
  const double u_fail = stream.uniform();
  const LogNormal model = config_.model_for(pair_class(src, dst));
  const Millis network =
      quantize(stream.lognormal(model.median_ms, model.sigma) * (1.0 + profile(dst).load_factor * config_.load_gain));

  if (u_fail < config_.syn_fail_prob || network > config_.os_timeout_ms) {
    fail_later(FailReason::OsTimeout);
    return serial;
  }

  const Millis there = quantize(network / 2);
  const Millis back = network - there;
  schedule(at + there, EventKind::FrameDelivered, dst, [this, serial, src, dst, at, back, fail_at, fail_later] {
    if (!alive(dst)) {
      fail_later(FailReason::OsTimeout);
      return;
    }
    note_lazy(dst, "syn_arrived", [&] { return fmt::format("conn={};src={}", serial, src); });
    const std::size_t di = index_of(dst);
    const Millis start = std::max(now_, accept_free_at_[di]);
    const Millis done = start + accept_service(dst);
    const Millis resolve_at = std::max(now_, quantize(done)) + back;
    if (resolve_at - at > config_.os_timeout_ms) {
      // Backlog too deep: the SYN is dropped and the client times out.
      note_lazy(dst, "syn_dropped", [&] { return fmt::format("conn={};src={}", serial, src); });
      fail_later(FailReason::OsTimeout);
      return;
    }
    accept_free_at_[di] = done;
    schedule(resolve_at, EventKind::ConnectResolved, src, [this, serial, dst, fail_at] {
      const auto& h = connections_[serial].handle;
      if (!h.pending()) return;
      if (!alive(h.src.id)) {
        resolve(serial, ConnState::Failed, FailReason::Voided);
      } else if (!alive(dst)) {
        if (fail_at <= now_) {
          resolve(serial, ConnState::Failed, FailReason::OsTimeout);
        } else {
          schedule(fail_at, EventKind::ConnectResolved, h.src.id,
                   [this, serial] { resolve(serial, ConnState::Failed, FailReason::OsTimeout); });
        }
      } else {
        resolve(serial, ConnState::Established, FailReason::None);
      }
    });
  });
  return serial;
}

void Simulator::abandon(std::uint64_t serial, FailReason reason) {
  Conn& c = connections_.at(serial);
  if (!c.handle.pending()) return;
  c.on_resolved = nullptr;
  resolve(serial, ConnState::Failed, reason);
}

void Simulator::close(std::uint64_t serial) {
  Conn& c = connections_.at(serial);
  if (!c.handle.established()) return;
  c.handle.transition(ConnState::Closed, now_);
  note_lazy(c.handle.src.id, "connection_closed",
            [&] { return fmt::format("conn={};dst={}", serial, c.handle.dst.id); });
}

Millis Simulator::rtt_sample(const ConnectionHandle& conn, std::uint32_t prober, std::uint64_t seq) const {
  const std::uint32_t a = conn.src.id;
  const std::uint32_t b = conn.dst.id;
  KeyedStream stream(config_.seed, {static_cast<std::uint64_t>(StreamTag::Probe), prober, a, b,
                                    static_cast<std::uint64_t>(connections_.at(conn.serial).attempt), seq});
  const Millis jitter = config_.rtt_jitter_ms * stream.uniform();
  return quantize(base_rtt(a, b) + profile(a).processing_delay_ms + profile(b).processing_delay_ms + jitter);
}

void Simulator::sim_rtt(std::uint64_t serial, std::uint32_t prober, std::uint64_t seq, std::size_t frame_bytes,
                        RttCallback done) {
  const ConnectionHandle& h = connection(serial);
  if (!h.established()) throw ProtocolError(fmt::format("probe on connection {} that is not established", serial));
  const Millis rtt = rtt_sample(h, prober, seq);
  const Millis sent = now_;
  const std::uint32_t a = h.src.id;
  const std::uint32_t b = h.dst.id;
  note_lazy(prober, "probe_sent",
            [&] { return fmt::format("conn={};seq={};bytes={}", serial, seq, frame_bytes); });
  schedule(now_ + rtt, EventKind::FrameDelivered, prober,
           [this, serial, seq, rtt, sent, a, b, prober, done = std::move(done)]() mutable {
             if (alive(a) && alive(b) && connections_[serial].handle.established()) {
               note_lazy(prober, "probe_rtt", [&] { return fmt::format("conn={};seq={};rtt={}", serial, seq, rtt); });
               done(rtt);
               return;
             }
             const Millis give_up = std::max(now_, sent + quantize(config_.probe_timeout_ms));
             schedule(give_up, EventKind::TimerFired, prober, [this, serial, seq, prober, done = std::move(done)] {
               note_lazy(prober, "probe_lost", [&] { return fmt::format("conn={};seq={}", serial, seq); });
               done(kInfinity);
             });
           });
}

void Simulator::send_message(std::uint32_t src, std::uint32_t dst, std::string_view what, Callback on_delivered) {
  note_lazy(src, "msg_sent", [&] { return fmt::format("dst={};type={}", dst, what); });
  schedule(now_ + one_way(src, dst), EventKind::FrameDelivered, dst,
           [this, dst, src, what = std::string(what), fn = std::move(on_delivered)] {
             if (!alive(dst)) return;
             note_lazy(dst, "msg_delivered", [&] { return fmt::format("src={};type={}", src, what); });
             if (fn) fn();
           });
}

}  // namespace almcast::simnet
