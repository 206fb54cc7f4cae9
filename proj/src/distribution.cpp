#include "almcast/distribution.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>

#include <fmt/format.h>

namespace almcast::distribution {

using measurement::LatencyRecord;
using measurement::MeasurementReport;

std::size_t PartitionPlan::group_of_eh(std::size_t eh_index) const {
  std::size_t upper = 0;
  for (std::size_t g = 0; g < groups.size(); ++g) {
    upper += groups[g].eh_capacity;
    if (eh_index < upper) return g;
  }
  return groups.empty() ? 0 : groups.size() - 1;
}

std::uint32_t PartitionPlan::total_capacity() const {
  std::uint32_t sum = 0;
  for (const auto& g : groups) sum += g.eh_capacity;
  return sum;
}

std::uint32_t default_capacity_cap(std::size_t eh_count, std::size_t oh_count) {
  if (oh_count == 0) return 0;
  return static_cast<std::uint32_t>((eh_count + oh_count - 1) / oh_count * 2);
}

double assignment_cost(const LatencyRecord& rec, const LoadReport& load, const DistributeParams& p) {
  return p.alpha * (rec.conn_time + rec.cumm_lat / 3.0) + p.beta * load.load_factor * p.load_scale_ms;
}

Assignment WeightedGreedyDistributor::distribute(const MeasurementReport& report, std::span<const LoadReport> loads,
                                                 const DistributeParams& params, Millis now) const {
  const LatencyRecord* best = nullptr;
  const LatencyRecord* best_any = nullptr;
  double best_cost = 0;
  double best_any_cost = 0;
  auto better = [](double c, NodeId oh, double ref_c, const LatencyRecord* ref) {
    return ref == nullptr || c < ref_c || (c == ref_c && oh < ref->oh);
  };
  for (const auto& rec : report.records) {
    if (!rec.measured()) continue;
    auto load = std::find_if(loads.begin(), loads.end(), [&](const LoadReport& l) { return l.oh == rec.oh; });
    if (load == loads.end()) continue;
    const double c = assignment_cost(rec, *load, params);
    if (better(c, rec.oh, best_any_cost, best_any)) {
      best_any = &rec;
      best_any_cost = c;
    }
    if (load->connected_eh < params.capacity_cap && better(c, rec.oh, best_cost, best)) {
      best = &rec;
      best_cost = c;
    }
  }
  if (!best_any) throw NoCandidate(fmt::format("EH {}: no measured OH to distribute to", report.eh.id));
  Assignment a;
  a.eh = report.eh;
  a.assigned_at = now;
  if (best) {
    a.oh = best->oh;
    a.cost = best_cost;
  } else {
    a.oh = best_any->oh;
    a.cost = best_any_cost;
    a.overloaded = true;
  }
  return a;
}

Assignment distribute(const MeasurementReport& report, std::span<const LoadReport> loads,
                      const DistributeParams& params, Millis now) {
  return WeightedGreedyDistributor{}.distribute(report, loads, params, now);
}

std::uint32_t default_group_count(std::size_t oh_count) { return oh_count == 3 ? 3 : 5; }

PartitionPlan make_partition_plan(const std::vector<NodeId>& oh, std::uint32_t eh_count, std::uint32_t group_count) {
  if (oh.empty()) throw Error("make_partition_plan: no OH");
  if (group_count == 0) throw Error("make_partition_plan: group_count must be > 0");
  if (group_count > oh.size())
    throw Error(fmt::format("make_partition_plan: {} groups for only {} OH", group_count, oh.size()));
  PartitionPlan plan;
  const std::size_t per_group = oh.size() / group_count;
  const std::uint32_t eh_per_group = eh_count / group_count;
  plan.oh_per_eh = static_cast<std::uint32_t>(per_group);
  for (std::uint32_t g = 0; g < group_count; ++g) {
    PartitionPlan::Group group;
    const std::size_t begin = g * per_group;
    const std::size_t end = g + 1 == group_count ? oh.size() : begin + per_group;
    group.oh_members.assign(oh.begin() + static_cast<std::ptrdiff_t>(begin), oh.begin() + static_cast<std::ptrdiff_t>(end));
    group.eh_capacity = eh_per_group;
    plan.groups.push_back(std::move(group));
  }
  plan.groups.back().eh_capacity += eh_count - eh_per_group * group_count;
  return plan;
}

std::set<NodeId> handle_oh_failure(std::vector<Assignment>& assignments, NodeId failed) {
  std::set<NodeId> readmit;
  std::erase_if(assignments, [&](const Assignment& a) {
    if (a.oh != failed) return false;
    readmit.insert(a.eh);
    return true;
  });
  return readmit;
}

void MhServiceParams::validate() const {
  if (processing_ms < 0 || algorithm_ms < 0) throw Error("MH service times must be >= 0");
  if (!(algorithm_ms < algorithm_budget_ms))
    throw Error(fmt::format("modeled algorithm time {} ms exceeds the {} ms budget", algorithm_ms, algorithm_budget_ms));
}

std::optional<std::string> check_report(const MeasurementReport& report) {
  if (report.records.empty()) return "report has no records";
  std::size_t measured = 0;
  Millis m_i = 0;
  for (const auto& r : report.records) {
    if (r.eh != report.eh) return fmt::format("record for EH {} inside report of EH {}", r.eh.id, report.eh.id);
    if (!std::isfinite(r.conn_time) || r.conn_time < 0) return "non-finite or negative conn_time";
    if (r.measured()) {
      ++measured;
      for (Millis s : r.rtt_samples)
        if (!std::isfinite(s) || s < 0) return "non-finite or negative RTT sample";
      if (std::abs(measurement::cumm_lat(r.rtt_samples) - r.cumm_lat) > 1e-6) return "cumm_lat is not the sample sum";
    }
    m_i = std::max(m_i, r.total());
  }
  if (std::abs(m_i - report.m_i) > 1e-6) return "m_i does not match the records";
  const double pct = 100.0 * static_cast<double>(measured) / static_cast<double>(report.records.size());
  if (std::abs(pct - report.measured_percentage) > 1e-6) return "measured_percentage does not match the records";
  return std::nullopt;
}

// --------------------------------------------------------------- MonitorHost

MonitorHost::MonitorHost(DistributeParams params, MhServiceParams service, std::shared_ptr<const Distributor> distributor)
    : params_(params), service_(service), distributor_(std::move(distributor)) {
  service_.validate();
}

void MonitorHost::update_load(const LoadReport& report) {
  if (report.load_factor < 0 || report.load_factor > 1) throw Error("load_factor must be in [0,1]");
  if (failed_.contains(report.oh)) return;  // stale report from a failed OH
  auto it = std::find_if(loads_.begin(), loads_.end(), [&](const LoadReport& l) { return l.oh == report.oh; });
  if (it == loads_.end()) {
    loads_.push_back(report);
    loads_.back().connected_eh = 0;
    std::sort(loads_.begin(), loads_.end(), [](const auto& a, const auto& b) { return a.oh < b.oh; });
    it = std::find_if(loads_.begin(), loads_.end(), [&](const LoadReport& l) { return l.oh == report.oh; });
    it->connected_eh = static_cast<std::uint32_t>(
        std::count_if(assignments_.begin(), assignments_.end(), [&](const Assignment& a) { return a.oh == report.oh; }));
  }
  it->load_factor = report.load_factor;
  it->as_of = report.as_of;
}

std::set<NodeId> MonitorHost::oh_failed(NodeId failed) {
  failed_.insert(failed);
  std::erase_if(loads_, [&](const LoadReport& l) { return l.oh == failed; });
  return handle_oh_failure(assignments_, failed);
}

std::vector<LoadReport> MonitorHost::loads() const { return loads_; }

MhResponse MonitorHost::serve(const MhRequest& req) {
  MhResponse resp;
  resp.eh = req.report.eh;
  resp.arrival = req.arrival;
  const Millis start = std::max(req.arrival, busy_until_);
  resp.departure = start + service_.processing_ms + service_.algorithm_ms;
  busy_until_ = resp.departure;
  resp.response_time = resp.departure - resp.arrival;

  const auto t0 = std::chrono::steady_clock::now();
  try {
    Assignment a = distributor_->distribute(req.report, loads_, params_, resp.departure);
    auto load = std::find_if(loads_.begin(), loads_.end(), [&](const LoadReport& l) { return l.oh == a.oh; });
    ++load->connected_eh;
    // An EH re-admitted after a failure replaces its old assignment.
    std::erase_if(assignments_, [&](const Assignment& old) { return old.eh == a.eh; });
    assignments_.push_back(a);
    resp.assignment = a;
  } catch (const NoCandidate&) {
    resp.remeasure = true;
  }
  const double wall =
      std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
  max_algorithm_wall_ms_ = std::max(max_algorithm_wall_ms_, wall);
  if (wall > service_.algorithm_budget_ms) ++budget_violations_;
  return resp;
}

MhServeResult mh_serve(std::vector<MhRequest> queue, const std::vector<LoadReport>& loads,
                       const DistributeParams& params, const MhServiceParams& service) {
  std::stable_sort(queue.begin(), queue.end(), [](const auto& a, const auto& b) { return a.arrival < b.arrival; });
  MonitorHost mh(params, service);
  for (const auto& l : loads) mh.update_load(l);
  MhServeResult out;
  for (const auto& req : queue) {
    if (auto why = check_report(req.report)) {
      out.rejected.push_back({req.report.eh, req.arrival, *why});
      continue;
    }
    out.responses.push_back(mh.serve(req));
  }
  out.assignments = mh.assignments();
  return out;
}

std::string csv_header() { return "eh_id,oh_id,cost_ms,assigned_at_ms"; }

std::string csv_row(const Assignment& a) {
  return fmt::format("{},{},{},{}", a.eh.id, a.oh.id, a.cost, a.assigned_at);
}

}  // namespace almcast::distribution
