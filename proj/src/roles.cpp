#include "almcast/roles.hpp"

#include <algorithm>
#include <atomic>
#include <charconv>
#include <chrono>
#include <cmath>
#include <fstream>
#include <future>
#include <sstream>

#include <fmt/format.h>

namespace almcast::transport {

using distribution::Assignment;
using measurement::MeasurementReport;

std::vector<Peer> parse_peers(std::string_view text, NodeRole role) {
  std::vector<Peer> out;
  std::istringstream in{std::string(text)};
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    std::istringstream ls(line);
    std::string id_text, addr;
    if (!(ls >> id_text)) continue;
    if (!(ls >> addr)) throw Error(fmt::format("peer list line {}: missing host:port", lineno));
    std::uint32_t id = 0;
    auto [p, ec] = std::from_chars(id_text.data(), id_text.data() + id_text.size(), id);
    if (ec != std::errc() || p != id_text.data() + id_text.size())
      throw Error(fmt::format("peer list line {}: bad id '{}'", lineno, id_text));
    out.push_back({NodeId{id, role}, Endpoint::parse(addr)});
  }
  return out;
}

std::vector<Peer> read_peer_file(const std::string& path, NodeRole role) {
  std::ifstream in(path);
  if (!in) throw Error(fmt::format("cannot read peer file '{}'", path));
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_peers(ss.str(), role);
}

std::string format_peers(const std::vector<Peer>& peers) {
  std::string out;
  for (const auto& p : peers) out += fmt::format("{} {}\n", p.id.id, p.addr.str());
  return out;
}

Millis quantize(Millis t, Millis resolution) {
  if (!(resolution > 0) || !std::isfinite(t)) return t;
  return std::round(t / resolution) * resolution;
}

// ------------------------------------------------------------------ Actor

Actor::Actor() : thread_([this] { loop(); }) {}

Actor::~Actor() { stop(); }

void Actor::post(std::function<void()> fn) {
  {
    std::lock_guard lk(mu_);
    if (stopping_) return;
    tasks_.push_back(std::move(fn));
  }
  cv_.notify_one();
}

std::uint64_t Actor::post_at(Millis at, std::function<void()> fn) {
  std::uint64_t id;
  {
    std::lock_guard lk(mu_);
    id = next_timer_++;
    if (stopping_) return id;
    timers_.emplace(at, std::make_pair(id, std::move(fn)));
  }
  cv_.notify_one();
  return id;
}

void Actor::cancel(std::uint64_t id) {
  std::lock_guard lk(mu_);
  cancelled_.insert(id);
}

void Actor::sync(const std::function<void()>& fn) {
  {
    std::lock_guard lk(mu_);
    if (stopping_) {
      fn();  // the loop is gone; nothing else touches the state any more
      return;
    }
  }
  if (std::this_thread::get_id() == thread_.get_id()) {
    fn();
    return;
  }
  std::promise<void> done;
  auto fut = done.get_future();
  post([&] {
    fn();
    done.set_value();
  });
  fut.wait();
}

void Actor::stop() {
  {
    std::lock_guard lk(mu_);
    if (stopping_) return;
    stopping_ = true;
  }
  cv_.notify_all();
  if (thread_.joinable()) thread_.join();
}

void Actor::loop() {
  std::unique_lock lk(mu_);
  for (;;) {
    if (stopping_) return;
    if (!tasks_.empty()) {
      auto fn = std::move(tasks_.front());
      tasks_.pop_front();
      lk.unlock();
      fn();
      lk.lock();
      continue;
    }
    if (!timers_.empty()) {
      const Millis now = wall_now();
      auto it = timers_.begin();
      if (it->first <= now) {
        auto [id, fn] = std::move(it->second);
        timers_.erase(it);
        if (cancelled_.erase(id)) continue;
        lk.unlock();
        fn();
        lk.lock();
        continue;
      }
      cv_.wait_for(lk, std::chrono::duration<double, std::milli>(it->first - now));
      continue;
    }
    cv_.wait(lk);
  }
}

// ------------------------------------------------------------------ OH

struct OhServer::Impl {
  explicit Impl(OhConfig c) : cfg(std::move(c)) {}

  OhConfig cfg;
  Actor actor;
  Socket listener;
  std::thread accept_thread;
  std::mutex threads_mu;
  std::vector<std::thread> threads;
  std::atomic<bool> stopping{false};
  std::atomic<std::uint64_t> next_serial{1};

  // Owned by the actor thread.
  std::optional<overlay::OverlayNode> node;
  std::map<std::uint32_t, Endpoint> peers;
  std::map<std::uint64_t, std::shared_ptr<Link>> links;
  std::map<std::uint64_t, ConnectionHandle> handles;
  std::vector<ConnectionHandle> early_incoming;
  std::set<std::uint64_t> eh_links;
  std::map<NodeId, std::uint64_t> decision_timers;
  std::deque<NodeId> queued;
  std::size_t in_flight = 0;
  std::uint64_t deadline_timer = 0;
  bool wait_done = false;
  std::uint64_t probe_seq = 0;
  std::vector<std::string> events;

  std::mutex fin_mu;
  std::condition_variable fin_cv;
  bool finalized = false;

  void spawn(std::function<void()> fn) {
    std::lock_guard lk(threads_mu);
    if (stopping) return;
    threads.emplace_back(std::move(fn));
  }

  Millis q(Millis t) const { return quantize(t, cfg.rtt_resolution_ms); }

  void note(std::string what) { events.push_back(fmt::format("{:.1f} {}", wall_now(), what)); }

  void start_reader(const std::shared_ptr<Link>& link, std::uint64_t serial) {
    link->start(
        [this, serial](Link&, const Frame& f) {
          if (f.type != MsgType::Join) return;
          const JoinMsg m = decode_join(f);
          actor.post([this, serial, m] { on_join(serial, m); });
        },
        [this, serial](Link&) { actor.post([this, serial] { on_remote_closed(serial); }); });
  }

  void accept_loop() {
    for (;;) {
      Socket s = accept_one(listener);
      if (!s.valid() || stopping) return;
      const std::uint64_t serial = next_serial++;
      ConnectionHandle h;
      h.serial = serial;
      h.dst = cfg.id;
      h.state = ConnState::Established;
      h.opened_at = h.resolved_at = wall_now();
      auto link = std::make_shared<Link>(std::move(s), h);
      actor.post([this, serial, link] { links[serial] = link; });
      start_reader(link, serial);
    }
  }

  void on_join(std::uint64_t serial, const JoinMsg& m) {
    if (m.id.role == NodeRole::EndHost) {
      eh_links.insert(serial);
      return;
    }
    if (m.id.role != NodeRole::OverlayHost) return;
    ConnectionHandle h;
    h.serial = serial;
    h.src = m.id;
    h.dst = cfg.id;
    h.state = ConnState::Established;
    h.opened_at = h.resolved_at = wall_now();
    handles[serial] = h;
    if (auto it = links.find(serial); it != links.end()) {
      try {
        it->second->send(encode_join({cfg.id}));
      } catch (const Error&) {
        return;  // gone already; the close event follows
      }
    }
    if (!node) {
      early_incoming.push_back(h);
      return;
    }
    deliver_incoming(h);
  }

  void deliver_incoming(const ConnectionHandle& h) {
    note(fmt::format("incoming from {} conn={}", h.src.id, h.serial));
    handle_duplicate(h.src, node->incoming_established(h));
  }

  void handle_duplicate(NodeId peer, overlay::OverlayNode::Duplicate d) {
    using D = overlay::OverlayNode::Duplicate;
    if (d == D::Decide) probe_pair(peer);
    if (d == D::Await) arm_decision_timer(peer);
  }

  void construct(const std::vector<Peer>& list) {
    std::vector<NodeId> ids;
    for (const auto& p : list) {
      if (p.id == cfg.id) continue;
      peers[p.id.id] = p.addr;
      ids.push_back(NodeId::oh(p.id.id));
    }
    node.emplace(cfg.id, ids, cfg.overlay);
    const auto targets = node->start(wall_now());
    note(fmt::format("overlay_start peers={}", targets.size()));
    deadline_timer = actor.post_at(wall_now() + cfg.overlay.completion_deadline_ms, [this] { on_deadline(); });
    queued.assign(targets.begin(), targets.end());
    pump();
    auto early = std::move(early_incoming);
    for (const auto& h : early) deliver_incoming(h);
    if (targets.empty()) complete_wait();
  }

  void connect_async(NodeId peer, std::uint64_t serial, std::function<void(ConnectionHandle, std::shared_ptr<Link>)> done) {
    const Endpoint addr = peers.at(peer.id);
    spawn([this, peer, serial, addr, done = std::move(done)] {
      auto r = tcp_connect(cfg.id, peer, addr, cfg.overlay.completion_deadline_ms, cfg.syn_retries, serial);
      std::shared_ptr<Link> link;
      ConnectionHandle h = r.handle;
      if (h.established()) {
        try {
          // The acceptor answers with its own JOIN once it has registered the
          // connection, so both ends agree it exists before either acts on it.
          send_frame(r.socket, encode_join({cfg.id}));
          auto ack = recv_frame(r.socket, cfg.probe_timeout_ms);
          if (!ack || ack->type != MsgType::Join || decode_join(*ack).id != peer)
            throw TransportError("missing JOIN acknowledgement");
          link = std::make_shared<Link>(std::move(r.socket), h);
        } catch (const Error&) {
          ConnectionHandle failed = h;
          failed.state = ConnState::Failed;
          failed.reason = FailReason::Refused;
          h = failed;
        }
      }
      actor.post([h, link, done] { done(h, link); });
    });
  }

  void pump() {
    const std::size_t cap = cfg.overlay.max_parallel_connects;
    while (!queued.empty() && (cap == 0 || in_flight < cap)) {
      const NodeId peer = queued.front();
      queued.pop_front();
      const std::uint64_t serial = next_serial++;
      node->outgoing_issued(peer, serial, wall_now());
      ++in_flight;
      connect_async(peer, serial, [this](ConnectionHandle h, std::shared_ptr<Link> link) { on_out_resolved(h, link); });
    }
  }

  void on_out_resolved(const ConnectionHandle& h, const std::shared_ptr<Link>& link) {
    --in_flight;
    if (wait_done) {
      if (link) link->close();
      return;
    }
    if (link) {
      links[h.serial] = link;
      handles[h.serial] = h;
      start_reader(link, h.serial);
    }
    node->outgoing_resolved(h);
    note(fmt::format("outgoing to {} {}", h.dst.id, to_string(h.state)));
    pump();
    if (queued.empty() && node->all_outgoing_resolved()) complete_wait();
  }

  void on_deadline() {
    if (wait_done) return;
    queued.clear();
    complete_wait();
  }

  void complete_wait() {
    if (wait_done) return;
    wait_done = true;
    actor.cancel(deadline_timer);
    auto snap = node->complete_wait(wall_now());
    note(fmt::format("wait_done decide={} await={}", snap.to_probe.size(), snap.awaiting.size()));
    for (const auto& pair : snap.to_probe) probe_pair(pair.first.dst);
    for (const NodeId& peer : snap.awaiting) arm_decision_timer(peer);
    try_finalize();
  }

  Millis probe_link(const std::shared_ptr<Link>& link, std::uint64_t seq) {
    if (!link) return kInfinity;
    try {
      return q(link->probe(seq, cfg.probe_timeout_ms));
    } catch (const ProtocolError&) {
      return kInfinity;
    }
  }

  void probe_pair(NodeId peer) {
    auto pair = node->duplicate_pair(peer);
    if (!pair) {
      node->decide(peer, {});
      try_finalize();
      return;
    }
    auto out = links.count(pair->first.serial) ? links[pair->first.serial] : nullptr;
    auto in = links.count(pair->second.serial) ? links[pair->second.serial] : nullptr;
    const std::uint64_t seq = probe_seq++;
    spawn([this, peer, out, in, seq] {
      overlay::ProbeResult r;
      r.meas_out = probe_link(out, seq);
      r.meas_in = probe_link(in, seq);
      actor.post([this, peer, r] { on_probed(peer, r); });
    });
  }

  void on_probed(NodeId peer, const overlay::ProbeResult& r) {
    auto loser = node->decide(peer, r);
    note(fmt::format("dup_decision peer={} out={} in={} kept={}", peer.id, r.meas_out, r.meas_in,
                     !loser ? "none" : (loser->src == cfg.id ? "in" : "out")));
    if (loser) end_connection(loser->serial);
    try_finalize();
  }

  void end_connection(std::uint64_t serial) {
    if (auto it = links.find(serial); it != links.end()) it->second->close();
  }

  void arm_decision_timer(NodeId peer) {
    if (decision_timers.contains(peer)) return;
    decision_timers[peer] = actor.post_at(wall_now() + cfg.overlay.decision_wait_ms, [this, peer] {
      decision_timers.erase(peer);
      if (auto loser = node->decision_timeout(peer)) {
        note(fmt::format("decision_timeout peer={}", peer.id));
        end_connection(loser->serial);
      }
      try_finalize();
    });
  }

  void on_remote_closed(std::uint64_t serial) {
    if (eh_links.erase(serial)) return;
    auto it = handles.find(serial);
    if (it == handles.end() || !node) return;
    const ConnectionHandle h = it->second;
    const NodeId peer = h.src == cfg.id ? h.dst : h.src;
    const bool duplicated = node->duplicate_pair(peer).has_value();
    const bool had_link = node->has_link(peer);
    node->remote_ended(serial);
    if (!node->awaiting().contains(peer)) {
      if (auto t = decision_timers.find(peer); t != decision_timers.end()) {
        actor.cancel(t->second);
        decision_timers.erase(t);
      }
    }
    if (!duplicated && had_link && !node->has_link(peer) && wait_done) {
      note(fmt::format("link_lost peer={}", peer.id));
      reconnect(peer, 1);
    }
    try_finalize();
  }

  void reconnect(NodeId peer, int attempt) {
    if (stopping || node->has_link(peer)) return;
    if (attempt > cfg.overlay.reconnect_attempts) {
      note(fmt::format("reconnect_gave_up peer={}", peer.id));
      return;
    }
    note(fmt::format("reconnect_attempt peer={} attempt={}", peer.id, attempt));
    connect_async(peer, next_serial++, [this, peer, attempt](ConnectionHandle h, std::shared_ptr<Link> link) {
      if (!link) {
        actor.post_at(wall_now() + 100, [this, peer, attempt] { reconnect(peer, attempt + 1); });
        return;
      }
      links[h.serial] = link;
      handles[h.serial] = h;
      start_reader(link, h.serial);
      note(fmt::format("reconnected peer={} conn={}", peer.id, h.serial));
      handle_duplicate(peer, node->reconnected(h));
    });
  }

  void try_finalize() {
    if (!node || !node->ready_to_finalize()) return;
    node->finalize(wall_now());
    note(fmt::format("overlay_complete g_time={}", node->state().g_time));
    {
      std::lock_guard lk(fin_mu);
      finalized = true;
    }
    fin_cv.notify_all();
  }

  void stop() {
    if (stopping.exchange(true)) return;
    listener.shutdown();
    if (accept_thread.joinable()) accept_thread.join();
    actor.sync([this] {
      for (auto& [s, l] : links) l->close();
    });
    std::vector<std::thread> ts;
    {
      std::lock_guard lk(threads_mu);
      ts = std::move(threads);
    }
    for (auto& t : ts) t.join();
    actor.stop();
    links.clear();
  }
};

OhServer::OhServer(OhConfig config) : impl_(std::make_unique<Impl>(std::move(config))) {}

OhServer::~OhServer() { stop(); }

Endpoint OhServer::bind() {
  impl_->listener = listen_on(impl_->cfg.listen);
  impl_->accept_thread = std::thread([this] { impl_->accept_loop(); });
  return local_endpoint(impl_->listener);
}

void OhServer::report_load() {
  if (!impl_->cfg.mh) return;
  auto r = tcp_connect(impl_->cfg.id, NodeId::mh(0), *impl_->cfg.mh, 5000, impl_->cfg.syn_retries);
  if (!r.handle.established()) throw TransportError(fmt::format("OH {}: cannot reach the MH", impl_->cfg.id.id));
  send_frame(r.socket, encode_join({impl_->cfg.id}));
  send_frame(r.socket, encode_load_report({impl_->cfg.id, 0, impl_->cfg.load_factor, wall_now()}));
}

void OhServer::construct(const std::vector<Peer>& peers) {
  impl_->actor.post([this, peers] { impl_->construct(peers); });
}

bool OhServer::wait_finalized(Millis timeout) {
  std::unique_lock lk(impl_->fin_mu);
  return impl_->fin_cv.wait_for(lk, std::chrono::duration<double, std::milli>(timeout),
                                [&] { return impl_->finalized; });
}

overlay::OverlayNodeState OhServer::state() {
  overlay::OverlayNodeState s;
  impl_->actor.sync([&] {
    if (impl_->node) s = impl_->node->state();
  });
  return s;
}

std::vector<overlay::OverlayLink> OhServer::links() {
  std::vector<overlay::OverlayLink> l;
  impl_->actor.sync([&] {
    if (impl_->node) l = impl_->node->links();
  });
  return l;
}

std::vector<std::string> OhServer::events() {
  std::vector<std::string> e;
  impl_->actor.sync([&] { e = impl_->events; });
  return e;
}

void OhServer::stop() { impl_->stop(); }

// ------------------------------------------------------------------ MH

struct MhServer::Impl {
  explicit Impl(MhConfig c) : cfg(std::move(c)), mh(cfg.params, cfg.service) {}

  MhConfig cfg;
  mutable std::mutex mu;
  distribution::MonitorHost mh;
  std::vector<distribution::MhResponse> responses;
  std::set<NodeId> known;
  std::size_t rejected = 0;

  Socket listener;
  std::thread accept_thread;
  std::mutex links_mu;
  std::vector<std::shared_ptr<Link>> links;
  std::atomic<bool> stopping{false};

  void accept_loop() {
    for (;;) {
      Socket s = accept_one(listener);
      if (!s.valid() || stopping) return;
      auto who = std::make_shared<NodeId>();
      auto link = std::make_shared<Link>(std::move(s), ConnectionHandle{});
      {
        std::lock_guard lk(links_mu);
        links.push_back(link);
      }
      link->start([this, who](Link& l, const Frame& f) { on_frame(l, f, *who); }, nullptr);
    }
  }

  void on_frame(Link& link, const Frame& f, NodeId& who) {
    switch (f.type) {
      case MsgType::Join:
        who = decode_join(f).id;
        break;
      case MsgType::LoadReport: {
        const auto lr = decode_load_report(f);
        std::lock_guard lk(mu);
        mh.update_load(lr);
        known.insert(lr.oh);
        break;
      }
      case MsgType::MeasReport: {
        std::optional<MeasurementReport> rep;
        std::optional<std::string> why;
        try {
          rep = decode_meas_report(f);
          why = distribution::check_report(*rep);
        } catch (const DecodeFailure& e) {
          why = e.what();
        }
        const NodeId eh = rep ? rep->eh : NodeId::eh(who.id);
        std::unique_lock lk(mu);
        if (why) {
          ++rejected;
          lk.unlock();
          link.send(encode_remeasure({eh, RemeasureReason::Malformed}));
          return;
        }
        auto resp = mh.serve({*rep, wall_now()});
        responses.push_back(resp);
        lk.unlock();
        if (resp.assignment) {
          link.send(encode_assign(*resp.assignment));
        } else {
          link.send(encode_remeasure({eh, RemeasureReason::NoCandidate}));
        }
        break;
      }
      default:
        break;
    }
  }

  void stop() {
    if (stopping.exchange(true)) return;
    listener.shutdown();
    if (accept_thread.joinable()) accept_thread.join();
    std::vector<std::shared_ptr<Link>> ls;
    {
      std::lock_guard lk(links_mu);
      ls = std::move(links);
    }
    for (auto& l : ls) l->close();
    ls.clear();
  }
};

MhServer::MhServer(MhConfig config) : impl_(std::make_unique<Impl>(std::move(config))) {}
MhServer::~MhServer() { stop(); }

Endpoint MhServer::bind() {
  impl_->listener = listen_on(impl_->cfg.listen);
  impl_->accept_thread = std::thread([this] { impl_->accept_loop(); });
  return local_endpoint(impl_->listener);
}

void MhServer::stop() { impl_->stop(); }

std::size_t MhServer::loads_known() const {
  std::lock_guard lk(impl_->mu);
  return impl_->known.size();
}

std::vector<Assignment> MhServer::assignments() const {
  std::lock_guard lk(impl_->mu);
  return impl_->mh.assignments();
}

std::vector<distribution::MhResponse> MhServer::responses() const {
  std::lock_guard lk(impl_->mu);
  return impl_->responses;
}

std::size_t MhServer::rejected() const {
  std::lock_guard lk(impl_->mu);
  return impl_->rejected;
}

std::set<NodeId> MhServer::oh_failed(NodeId oh) {
  std::lock_guard lk(impl_->mu);
  return impl_->mh.oh_failed(oh);
}

// ------------------------------------------------------------------ EH

namespace {

class SocketConnector final : public measurement::Connector {
 public:
  explicit SocketConnector(const EhConfig& cfg) : cfg_(cfg) {}

  Millis now() override { return quantize(wall_now(), cfg_.rtt_resolution_ms); }

  ConnectionHandle connect(NodeId oh, std::optional<Millis> budget) override {
    const auto it = std::find_if(cfg_.oh.begin(), cfg_.oh.end(), [&](const Peer& p) { return p.id == oh; });
    if (it == cfg_.oh.end()) throw Error(fmt::format("EH {}: no address for OH {}", cfg_.id.id, oh.id));
    auto r = tcp_connect(cfg_.id, oh, it->addr, budget, cfg_.syn_retries, next_serial_++);
    if (r.handle.established()) {
      try {
        send_frame(r.socket, encode_join({cfg_.id}));
        sockets_[r.handle.serial] = std::move(r.socket);
      } catch (const Error&) {
        ConnectionHandle failed = r.handle;
        failed.state = ConnState::Failed;
        failed.reason = FailReason::Refused;
        return failed;
      }
    }
    return r.handle;
  }

  Millis probe(const ConnectionHandle& conn, std::uint64_t seq) override {
    auto it = sockets_.find(conn.serial);
    if (it == sockets_.end()) return kInfinity;
    try {
      return quantize(probe_roundtrip(it->second, seq, cfg_.probe_timeout_ms), cfg_.rtt_resolution_ms);
    } catch (const ProtocolError&) {
      return kInfinity;
    }
  }

  void close(const ConnectionHandle& conn) override { sockets_.erase(conn.serial); }

 private:
  const EhConfig& cfg_;
  std::map<std::uint64_t, Socket> sockets_;
  std::uint64_t next_serial_ = 1;
};

}  // namespace

EhClient::EhClient(EhConfig config) : config_(std::move(config)) {}
EhClient::~EhClient() { detach(); }

MeasurementReport EhClient::measure_all() {
  std::vector<NodeId> all;
  for (const auto& p : config_.oh) all.push_back(NodeId::oh(p.id.id));
  measurement::Strategy s = config_.strategy;
  if (s.kind == measurement::Strategy::Kind::Partitioned && !s.plan) {
    s = s.with_plan(distribution::make_partition_plan(all, static_cast<std::uint32_t>(config_.eh_count),
                                                      distribution::default_group_count(all.size())));
  }
  const auto targets = measurement::targets_for(config_.eh_index, s, all);
  std::vector<measurement::LatencyRecord> records(targets.size());
  std::atomic<std::size_t> next{0};
  const std::size_t workers =
      config_.max_parallel == 0 ? targets.size() : std::min(config_.max_parallel, targets.size());
  std::vector<std::thread> pool;
  std::mutex err_mu;
  std::optional<std::string> error;
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      SocketConnector conn(config_);
      for (std::size_t i; (i = next++) < targets.size();) {
        try {
          records[i] = measurement::measure_one(config_.id, targets[i], s, conn);
        } catch (const std::exception& e) {
          std::lock_guard lk(err_mu);
          error = e.what();
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  if (error) throw Error(*error);
  return measurement::make_report(config_.id, std::move(records));
}

EhOutcome EhClient::run() {
  EhOutcome out;
  for (int round = 0; round < config_.max_rounds; ++round) {
    MeasurementReport rep = measure_all();
    out.rounds.push_back(rep);
    auto r = tcp_connect(config_.id, NodeId::mh(0), config_.mh, 10000, config_.syn_retries);
    if (!r.handle.established()) continue;
    send_frame(r.socket, encode_join({config_.id}));
    send_frame(r.socket, encode_meas_report(rep));
    std::optional<Frame> reply;
    try {
      reply = recv_frame(r.socket, config_.mh_timeout_ms);
    } catch (const Error&) {
      continue;
    }
    if (!reply || reply->type != MsgType::Assign) continue;
    const Assignment a = decode_assign(*reply);
    out.assignment = a;
    if (!config_.attach) return out;
    const auto it = std::find_if(config_.oh.begin(), config_.oh.end(), [&](const Peer& p) { return p.id == a.oh; });
    if (it == config_.oh.end()) continue;
    auto att = tcp_connect(config_.id, a.oh, it->addr, 10000, config_.syn_retries);
    if (!att.handle.established()) continue;
    send_frame(att.socket, encode_join({config_.id}));
    attachment_ = std::move(att.socket);
    out.attached = true;
    return out;
  }
  return out;
}

void EhClient::detach() { attachment_.reset(); }

// ------------------------------------------------------------ loopback

ClusterResult run_loopback_cluster(const ClusterSpec& spec) {
  ClusterResult out;
  const std::size_t n = spec.oh_count;
  const std::size_t m = spec.eh_count;

  MhConfig mc;
  mc.listen = {"127.0.0.1", 0};
  mc.params = spec.params;
  if (spec.default_capacity_cap) mc.params.capacity_cap = distribution::default_capacity_cap(m, n);
  mc.service = spec.service;
  MhServer mh(mc);
  const Endpoint mh_ep = mh.bind();

  std::vector<std::unique_ptr<OhServer>> ohs;
  std::vector<Peer> peers;
  for (std::size_t i = 0; i < n; ++i) {
    OhConfig oc;
    oc.id = NodeId::oh(static_cast<std::uint32_t>(1 + i));
    oc.listen = {"127.0.0.1", 0};
    oc.load_factor = i < spec.oh_load.size() ? spec.oh_load[i] : 0.0;
    oc.overlay = spec.overlay;
    oc.rtt_resolution_ms = spec.rtt_resolution_ms;
    oc.mh = mh_ep;
    ohs.push_back(std::make_unique<OhServer>(oc));
    peers.push_back({oc.id, ohs.back()->bind()});
  }
  for (auto& o : ohs) o->report_load();
  const Millis until = wall_now() + 5000;
  while (mh.loads_known() < n && wall_now() < until) std::this_thread::sleep_for(std::chrono::milliseconds(5));

  for (auto& o : ohs) o->construct(peers);
  std::vector<NodeId> expected;
  std::map<NodeId, Millis> g_times;
  std::vector<overlay::OverlayLink> links;
  for (std::size_t i = 0; i < n; ++i) {
    if (!ohs[i]->wait_finalized(spec.construct_timeout_ms))
      out.errors.push_back(fmt::format("OH {} did not finish construction", peers[i].id.id));
  }
  for (std::size_t i = 0; i < n; ++i) {
    auto st = ohs[i]->state();
    expected.push_back(peers[i].id);
    if (st.finalized) g_times[peers[i].id] = st.g_time;
    for (const auto& e : st.protocol_errors) out.errors.push_back(e);
    for (const auto& l : ohs[i]->links()) links.push_back(l);
    out.oh_states.push_back(std::move(st));
  }
  try {
    out.construction = overlay::aggregate_construction(expected, g_times, links);
  } catch (const Error& e) {
    out.errors.push_back(e.what());
  }

  std::vector<std::unique_ptr<EhClient>> clients;
  for (std::size_t k = 0; k < m; ++k) {
    EhConfig ec;
    ec.id = NodeId::eh(static_cast<std::uint32_t>(1 + n + k));
    ec.oh = peers;
    ec.mh = mh_ep;
    ec.strategy = spec.strategy;
    ec.eh_index = k;
    ec.eh_count = m;
    ec.rtt_resolution_ms = spec.rtt_resolution_ms;
    clients.push_back(std::make_unique<EhClient>(ec));
    try {
      out.eh.push_back(clients.back()->run());
    } catch (const Error& e) {
      out.errors.push_back(fmt::format("EH {}: {}", ec.id.id, e.what()));
      out.eh.emplace_back();
    }
  }
  out.assignments = mh.assignments();

  for (auto& c : clients) c->detach();
  for (auto& o : ohs) o->stop();
  mh.stop();
  return out;
}

}  // namespace almcast::transport
