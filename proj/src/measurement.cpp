#include "almcast/measurement.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>

#include <fmt/format.h>

namespace almcast::measurement {

std::string_view to_string(EliminationReason r) {
  switch (r) {
    case EliminationReason::None: return "none";
    case EliminationReason::ConnectFailed: return "connect_failed";
    case EliminationReason::AppTimeout: return "app_timeout";
    case EliminationReason::ProbeFailed: return "probe_failed";
  }
  return "?";
}

std::string LatencyRecord::status_label() const {
  return measured() ? std::string("measured") : fmt::format("eliminated:{}", to_string(reason));
}

// ------------------------------------------------------------------ Strategy

Strategy Strategy::baseline(std::optional<int> max_retries) {
  Strategy s;
  s.kind = Kind::BaselineRetry;
  s.max_retries = max_retries;
  return s;
}

Strategy Strategy::zero_reconnect() {
  Strategy s;
  s.kind = Kind::ZeroReconnect;
  return s;
}

Strategy Strategy::app_timeout(Millis timeout_ms) {
  Strategy s;
  s.kind = Kind::AppTimeout;
  s.timeout_ms = timeout_ms;
  s.validate();
  return s;
}

Strategy Strategy::partitioned(distribution::PartitionPlan plan, Strategy inner) {
  if (inner.kind == Kind::Partitioned) throw Error("partitioned strategies do not nest");
  Strategy s;
  s.kind = Kind::Partitioned;
  s.plan = std::make_shared<const distribution::PartitionPlan>(std::move(plan));
  s.inner = std::make_shared<const Strategy>(std::move(inner));
  return s;
}

const Strategy& Strategy::effective() const {
  if (kind == Kind::Partitioned) {
    if (!inner) throw Error("partitioned strategy without an inner strategy");
    return *inner;
  }
  return *this;
}

void Strategy::validate() const {
  if (kind == Kind::AppTimeout && !(timeout_ms > 0)) throw Error("apptimeout: timeout must be > 0");
  if (kind == Kind::BaselineRetry && max_retries && *max_retries < 0) throw Error("baseline: retries must be >= 0");
  if (kind == Kind::Partitioned) {
    if (!inner) throw Error("partitioned: missing inner strategy");
    inner->validate();
  }
}

namespace {

double parse_number(std::string_view s, std::string_view what) {
  double v = 0;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size())
    throw Error(fmt::format("bad number '{}' in strategy {}", s, what));
  return v;
}

}  // namespace

Strategy Strategy::parse(std::string_view spec) {
  auto colon = spec.find(':');
  const auto head = spec.substr(0, colon);
  const auto rest = colon == std::string_view::npos ? std::string_view{} : spec.substr(colon + 1);
  if (head == "baseline") {
    if (rest.empty() || rest == "unlimited") return baseline();
    return baseline(static_cast<int>(parse_number(rest, "baseline")));
  }
  if (head == "zero" || head == "zeroreconnect") return zero_reconnect();
  if (head == "apptimeout") return app_timeout(rest.empty() ? 10000 : parse_number(rest, "apptimeout"));
  if (head == "partitioned") {
    Strategy s;
    s.kind = Kind::Partitioned;
    s.inner = std::make_shared<const Strategy>(parse(rest.empty() ? "apptimeout:10000" : rest));
    if (s.inner->kind == Kind::Partitioned) throw Error("partitioned strategies do not nest");
    return s;
  }
  throw Error(fmt::format("unknown strategy '{}'", spec));
}

std::string Strategy::spec() const {
  switch (kind) {
    case Kind::BaselineRetry: return max_retries ? fmt::format("baseline:{}", *max_retries) : "baseline";
    case Kind::ZeroReconnect: return "zero";
    case Kind::AppTimeout: return fmt::format("apptimeout:{}", timeout_ms);
    case Kind::Partitioned: return "partitioned:" + (inner ? inner->spec() : std::string("?"));
  }
  return "?";
}

Strategy Strategy::with_plan(distribution::PartitionPlan p) const {
  if (kind != Kind::Partitioned) return *this;
  Strategy s = *this;
  s.plan = std::make_shared<const distribution::PartitionPlan>(std::move(p));
  return s;
}

std::vector<NodeId> targets_for(std::size_t eh_index, const Strategy& strategy, const std::vector<NodeId>& all_oh) {
  if (strategy.kind != Strategy::Kind::Partitioned) return all_oh;
  if (!strategy.plan || strategy.plan->groups.empty()) throw Error("partitioned strategy has no plan");
  return strategy.plan->groups[strategy.plan->group_of_eh(eh_index)].oh_members;
}

Millis cumm_lat(const std::array<Millis, kProbesPerTarget>& samples) {
  Millis sum = 0;
  for (Millis s : samples) sum += s;
  return sum;
}

// --------------------------------------------------------------- TargetProbe

TargetProbe::TargetProbe(NodeId eh, NodeId oh, const Strategy& strategy) : strategy_(strategy.effective()) {
  record_.eh = eh;
  record_.oh = oh;
}

TargetProbe::Action TargetProbe::begin(Millis now) {
  start_ = now;
  phase_ = Phase::Connecting;
  record_.attempts = 1;
  return Action::Connect;
}

std::optional<Millis> TargetProbe::timer_at() const {
  switch (strategy_.kind) {
    case Strategy::Kind::AppTimeout: return start_ + strategy_.timeout_ms;
    case Strategy::Kind::BaselineRetry: return start_ + strategy_.scenario_deadline_ms;
    default: return std::nullopt;
  }
}

std::optional<Millis> TargetProbe::connect_budget(Millis now) const {
  auto t = timer_at();
  if (!t) return std::nullopt;
  return std::max<Millis>(0, *t - now);
}

TargetProbe::Action TargetProbe::on_connect(const ConnectionHandle& resolved, Millis now) {
  if (phase_ != Phase::Connecting) return done() ? Action::Done : Action::Probe;
  if (resolved.established()) {
    conn_ = resolved;
    established_at_ = now;
    record_.conn_time = now - start_;
    phase_ = Phase::Probing;
    return Action::Probe;
  }
  if (resolved.reason == FailReason::AppTimeout) return on_timer(now);
  if (strategy_.kind == Strategy::Kind::BaselineRetry) {
    const int retries_used = record_.attempts - 1;
    const bool retries_left = !strategy_.max_retries || retries_used < *strategy_.max_retries;
    if (retries_left && now - start_ < strategy_.scenario_deadline_ms) {
      ++record_.attempts;
      return Action::Connect;
    }
  }
  return finish(RecordStatus::Eliminated, EliminationReason::ConnectFailed, now);
}

TargetProbe::Action TargetProbe::on_timer(Millis now) {
  if (phase_ != Phase::Connecting) return done() ? Action::Done : Action::Probe;
  if (strategy_.kind == Strategy::Kind::AppTimeout) {
    finish(RecordStatus::Eliminated, EliminationReason::AppTimeout, now);
    record_.conn_time = std::min(record_.conn_time, strategy_.timeout_ms);
    return Action::Done;
  }
  return finish(RecordStatus::Eliminated, EliminationReason::ConnectFailed, now);
}

TargetProbe::Action TargetProbe::on_probe(Millis rtt, Millis now) {
  if (phase_ != Phase::Probing) return done() ? Action::Done : Action::Connect;
  if (!std::isfinite(rtt) || rtt < 0) return finish(RecordStatus::Eliminated, EliminationReason::ProbeFailed, now);
  record_.rtt_samples[static_cast<std::size_t>(probes_done_++)] = rtt;
  if (probes_done_ < kProbesPerTarget) return Action::Probe;
  return finish(RecordStatus::Measured, EliminationReason::None, now);
}

TargetProbe::Action TargetProbe::finish(RecordStatus status, EliminationReason reason, Millis now) {
  phase_ = Phase::Done;
  record_.status = status;
  record_.reason = reason;
  if (status == RecordStatus::Measured) {
    record_.cumm_lat = cumm_lat(record_.rtt_samples);
  } else {
    record_.conn_time = now - start_;
    record_.rtt_samples = {};
    record_.cumm_lat = 0;
  }
  return Action::Done;
}

// ------------------------------------------------------------ blocking path

std::optional<std::array<Millis, kProbesPerTarget>> probe_cumm_lat(const ConnectionHandle& conn,
                                                                    Connector& connector) {
  if (!conn.established()) throw ProtocolError("probe_cumm_lat: connection not established");
  std::array<Millis, kProbesPerTarget> samples{};
  for (int i = 0; i < kProbesPerTarget; ++i) {
    const Millis rtt = connector.probe(conn, static_cast<std::uint64_t>(i));
    if (!std::isfinite(rtt)) return std::nullopt;
    samples[static_cast<std::size_t>(i)] = rtt;
  }
  return samples;
}

LatencyRecord measure_one(NodeId eh, NodeId oh, const Strategy& strategy, Connector& connector) {
  TargetProbe tp(eh, oh, strategy);
  auto action = tp.begin(connector.now());
  while (!tp.done()) {
    if (action == TargetProbe::Action::Connect) {
      const ConnectionHandle h = connector.connect(oh, tp.connect_budget(connector.now()));
      action = tp.on_connect(h, connector.now());
    } else {
      const Millis rtt = connector.probe(tp.connection(), static_cast<std::uint64_t>(tp.next_probe_seq()));
      action = tp.on_probe(rtt, connector.now());
    }
  }
  if (tp.connection().established()) connector.close(tp.connection());
  return tp.record();
}

MeasurementReport make_report(NodeId eh, std::vector<LatencyRecord> records) {
  if (records.empty()) throw Error(fmt::format("EH {}: no targets to report", eh.id));
  MeasurementReport r;
  r.eh = eh;
  std::size_t measured = 0;
  for (const auto& rec : records) {
    r.m_i = std::max(r.m_i, rec.total());
    if (rec.measured()) ++measured;
  }
  r.measured_percentage = 100.0 * static_cast<double>(measured) / static_cast<double>(records.size());
  r.no_candidates = measured == 0;
  r.records = std::move(records);
  return r;
}

double measured_percentage_stats(const std::vector<MeasurementReport>& reports) {
  if (reports.empty()) throw Error("measured_percentage_stats: no reports");
  double sum = 0;
  for (const auto& r : reports) sum += r.measured_percentage;
  return sum / static_cast<double>(reports.size());
}

std::string csv_header() { return "eh_id,oh_id,status,conn_ms,lat1_ms,lat2_ms,lat3_ms,cummlat_ms"; }

std::string csv_row(const LatencyRecord& r) {
  if (r.measured()) {
    return fmt::format("{},{},{},{},{},{},{},{}", r.eh.id, r.oh.id, r.status_label(), r.conn_time, r.rtt_samples[0],
                       r.rtt_samples[1], r.rtt_samples[2], r.cumm_lat);
  }
  return fmt::format("{},{},{},{},,,,", r.eh.id, r.oh.id, r.status_label(), r.conn_time);
}

}  // namespace almcast::measurement
