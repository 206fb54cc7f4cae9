#include "almcast/tcp.hpp"

#include <arpa/inet.h>
#include <fcntl.h>
#include <netdb.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <cerrno>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstring>

#include <fmt/format.h>

namespace almcast::transport {

Millis wall_now() {
  static const auto epoch = std::chrono::steady_clock::now();
  return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - epoch).count();
}

Socket& Socket::operator=(Socket&& o) noexcept {
  if (this != &o) {
    reset();
    fd_ = std::exchange(o.fd_, -1);
  }
  return *this;
}

void Socket::reset() {
  if (fd_ >= 0) ::close(fd_);
  fd_ = -1;
}

void Socket::shutdown() {
  if (fd_ >= 0) ::shutdown(fd_, SHUT_RDWR);
}

Endpoint Endpoint::parse(std::string_view text) {
  const auto colon = text.rfind(':');
  if (colon == std::string_view::npos || colon == 0) throw Error(fmt::format("bad address '{}' (want host:port)", text));
  Endpoint ep;
  ep.host = std::string(text.substr(0, colon));
  const auto port = text.substr(colon + 1);
  unsigned v = 0;
  auto [p, ec] = std::from_chars(port.data(), port.data() + port.size(), v);
  if (ec != std::errc() || p != port.data() + port.size() || v > 65535)
    throw Error(fmt::format("bad port in '{}'", text));
  ep.port = static_cast<std::uint16_t>(v);
  return ep;
}

std::string Endpoint::str() const { return fmt::format("{}:{}", host, port); }

namespace {

sockaddr_in resolve(const Endpoint& ep) {
  sockaddr_in sa{};
  sa.sin_family = AF_INET;
  sa.sin_port = htons(ep.port);
  if (::inet_pton(AF_INET, ep.host.c_str(), &sa.sin_addr) == 1) return sa;
  addrinfo hints{};
  hints.ai_family = AF_INET;
  hints.ai_socktype = SOCK_STREAM;
  addrinfo* res = nullptr;
  if (::getaddrinfo(ep.host.c_str(), nullptr, &hints, &res) != 0 || !res)
    throw TransportError(fmt::format("cannot resolve '{}'", ep.host));
  sa.sin_addr = reinterpret_cast<sockaddr_in*>(res->ai_addr)->sin_addr;
  ::freeaddrinfo(res);
  return sa;
}

[[noreturn]] void sys_fail(std::string_view what) {
  throw TransportError(fmt::format("{}: {}", what, std::strerror(errno)));
}

void set_nonblocking(int fd, bool on) {
  const int flags = ::fcntl(fd, F_GETFL, 0);
  ::fcntl(fd, F_SETFL, on ? flags | O_NONBLOCK : flags & ~O_NONBLOCK);
}

void set_nodelay(int fd) {
  int one = 1;
  ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
}

}  // namespace

Socket listen_on(const Endpoint& ep, int backlog) {
  Socket s(::socket(AF_INET, SOCK_STREAM | SOCK_CLOEXEC, 0));
  if (!s.valid()) sys_fail("socket");
  int one = 1;
  ::setsockopt(s.fd(), SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
  sockaddr_in sa = resolve(ep);
  if (::bind(s.fd(), reinterpret_cast<sockaddr*>(&sa), sizeof sa) != 0) sys_fail(fmt::format("bind {}", ep.str()));
  if (::listen(s.fd(), backlog) != 0) sys_fail("listen");
  return s;
}

Endpoint local_endpoint(const Socket& s) {
  sockaddr_in sa{};
  socklen_t len = sizeof sa;
  if (::getsockname(s.fd(), reinterpret_cast<sockaddr*>(&sa), &len) != 0) sys_fail("getsockname");
  char buf[INET_ADDRSTRLEN] = {};
  ::inet_ntop(AF_INET, &sa.sin_addr, buf, sizeof buf);
  return Endpoint{buf, ntohs(sa.sin_port)};
}

Socket accept_one(const Socket& listener) {
  for (;;) {
    const int fd = ::accept4(listener.fd(), nullptr, nullptr, SOCK_CLOEXEC);
    if (fd >= 0) {
      set_nodelay(fd);
      return Socket(fd);
    }
    if (errno == EINTR) continue;
    return Socket();
  }
}

ConnectResult tcp_connect(NodeId src, NodeId dst, const Endpoint& addr, std::optional<Millis> app_timeout,
                          std::optional<int> syn_retries, std::uint64_t serial) {
  ConnectResult r;
  r.handle.serial = serial;
  r.handle.src = src;
  r.handle.dst = dst;
  r.handle.opened_at = wall_now();

  Socket s(::socket(AF_INET, SOCK_STREAM | SOCK_CLOEXEC, 0));
  if (!s.valid()) sys_fail("socket");
  if (syn_retries) {
    int n = *syn_retries;
    ::setsockopt(s.fd(), IPPROTO_TCP, TCP_SYNCNT, &n, sizeof n);
  }
  set_nonblocking(s.fd(), true);
  const sockaddr_in sa = resolve(addr);
  int rc = ::connect(s.fd(), reinterpret_cast<const sockaddr*>(&sa), sizeof sa);
  int err = rc == 0 ? 0 : errno;
  if (err == EINPROGRESS) {
    pollfd p{s.fd(), POLLOUT, 0};
    for (;;) {
      int wait_ms = -1;
      if (app_timeout) {
        const Millis left = r.handle.opened_at + *app_timeout - wall_now();
        wait_ms = left <= 0 ? 0 : static_cast<int>(std::ceil(left));
      }
      rc = ::poll(&p, 1, wait_ms);
      if (rc < 0 && errno == EINTR) continue;
      break;
    }
    if (rc == 0) {
      s.reset();  // abandon the attempt
      r.handle.transition(ConnState::Failed, wall_now(), FailReason::AppTimeout);
      return r;
    }
    socklen_t len = sizeof err;
    ::getsockopt(s.fd(), SOL_SOCKET, SO_ERROR, &err, &len);
  }
  if (err != 0) {
    const FailReason why = err == ETIMEDOUT ? FailReason::OsTimeout : FailReason::Refused;
    r.handle.transition(ConnState::Failed, wall_now(), why);
    return r;
  }
  set_nonblocking(s.fd(), false);
  set_nodelay(s.fd());
  r.handle.transition(ConnState::Established, wall_now());
  r.socket = std::move(s);
  return r;
}

void send_all(const Socket& s, std::span<const std::uint8_t> bytes) {
  std::size_t off = 0;
  while (off < bytes.size()) {
    const ssize_t n = ::send(s.fd(), bytes.data() + off, bytes.size() - off, MSG_NOSIGNAL);
    if (n < 0) {
      if (errno == EINTR) continue;
      sys_fail("send");
    }
    off += static_cast<std::size_t>(n);
  }
}

void send_frame(const Socket& s, const Frame& f) { send_all(s, encode_frame(f)); }

namespace {

// Returns false on EOF before the first byte; throws on timeout or error.
bool read_exact(const Socket& s, std::uint8_t* out, std::size_t n, std::optional<Millis> deadline) {
  std::size_t got = 0;
  while (got < n) {
    if (deadline) {
      const Millis left = *deadline - wall_now();
      if (left <= 0) throw TransportError("receive timed out");
      pollfd p{s.fd(), POLLIN, 0};
      const int rc = ::poll(&p, 1, static_cast<int>(std::ceil(left)));
      if (rc < 0 && errno == EINTR) continue;
      if (rc == 0) throw TransportError("receive timed out");
    }
    const ssize_t r = ::recv(s.fd(), out + got, n - got, 0);
    if (r == 0) {
      if (got == 0) return false;
      throw DecodeFailure(DecodeError::Truncated, "stream closed inside a frame");
    }
    if (r < 0) {
      if (errno == EINTR) continue;
      sys_fail("recv");
    }
    got += static_cast<std::size_t>(r);
  }
  return true;
}

}  // namespace

std::optional<Frame> recv_frame(const Socket& s, std::optional<Millis> timeout) {
  std::optional<Millis> deadline;
  if (timeout) deadline = wall_now() + *timeout;
  std::vector<std::uint8_t> buf(kHeaderBytes);
  if (!read_exact(s, buf.data(), kHeaderBytes, deadline)) return std::nullopt;
  const Header h = decode_header(buf);
  buf.resize(kHeaderBytes + h.length);
  if (h.length > 0 && !read_exact(s, buf.data() + kHeaderBytes, h.length, deadline))
    throw DecodeFailure(DecodeError::Truncated, "stream closed inside a frame");
  return decode_frame(buf);
}

Millis probe_roundtrip(const Socket& s, std::uint64_t seq, Millis timeout) {
  const Millis t0 = wall_now();
  try {
    send_frame(s, make_probe(seq));
    auto f = recv_frame(s, timeout);
    if (!f) return kInfinity;
    if (f->type != MsgType::ProbeEcho)
      throw ProtocolError(fmt::format("expected PROBE_ECHO, got {}", to_string(f->type)));
    const std::uint64_t got = probe_seq(*f);
    if (got != seq) throw ProtocolError(fmt::format("PROBE_ECHO seq {} does not match {}", got, seq));
  } catch (const TransportError&) {
    return kInfinity;
  }
  return wall_now() - t0;
}

// -------------------------------------------------------------------- Link

Link::Link(Socket socket, ConnectionHandle handle) : socket_(std::move(socket)), handle_(handle) {}

Link::~Link() {
  close();
  if (reader_.joinable()) {
    if (reader_.get_id() == std::this_thread::get_id()) {
      reader_.detach();
    } else {
      reader_.join();
    }
  }
}

void Link::start(FrameHandler on_frame, CloseHandler on_close) {
  on_frame_ = std::move(on_frame);
  on_close_ = std::move(on_close);
  reader_ = std::thread([this] { read_loop(); });
}

void Link::send(const Frame& f) {
  std::lock_guard lk(write_mu_);
  if (!open_) throw TransportError("send on a closed link");
  send_frame(socket_, f);
}

Millis Link::probe(std::uint64_t seq, Millis timeout) {
  std::unique_lock lk(probe_mu_);
  expected_seq_ = seq;
  echoed_seq_.reset();
  const Millis t0 = wall_now();
  lk.unlock();
  try {
    send(make_probe(seq));
  } catch (const TransportError&) {
    return kInfinity;
  }
  lk.lock();
  const bool answered = probe_cv_.wait_for(lk, std::chrono::duration<double, std::milli>(timeout),
                                           [&] { return echoed_seq_.has_value() || !open_; });
  expected_seq_.reset();
  if (!answered || !echoed_seq_) return kInfinity;
  if (*echoed_seq_ != seq) throw ProtocolError(fmt::format("PROBE_ECHO seq {} does not match {}", *echoed_seq_, seq));
  return echo_at_ - t0;
}

void Link::close() {
  if (!open_.exchange(false)) return;
  local_close_ = true;
  socket_.shutdown();
  probe_cv_.notify_all();
}

void Link::read_loop() {
  for (;;) {
    std::optional<Frame> f;
    try {
      f = recv_frame(socket_);
    } catch (const DecodeFailure&) {
      ++decode_errors_;
      f.reset();
    } catch (const Error&) {
      f.reset();
    }
    if (!f) break;
    if (f->type == MsgType::Probe) {
      try {
        send(make_probe_echo(probe_seq(*f)));
      } catch (const Error&) {
      }
      continue;
    }
    if (f->type == MsgType::ProbeEcho) {
      std::lock_guard lk(probe_mu_);
      if (expected_seq_) {
        echoed_seq_ = probe_seq(*f);
        echo_at_ = wall_now();
        probe_cv_.notify_all();
      }
      continue;
    }
    if (!on_frame_) continue;
    try {
      on_frame_(*this, *f);
    } catch (const std::exception&) {
      ++decode_errors_;
    }
  }
  const bool was_open = open_.exchange(false);
  {
    std::lock_guard lk(probe_mu_);
    probe_cv_.notify_all();
  }
  if (was_open && !local_close_ && on_close_) on_close_(*this);
}

}  // namespace almcast::transport
