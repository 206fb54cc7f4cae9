#pragma once

// Stream-socket transport: RAII sockets, connect with an application
// timeout, frame I/O and a Link that owns one connection's reader thread.

#include <atomic>
#include <condition_variable>
#include <cstdint>
#include <functional>
#include <mutex>
#include <optional>
#include <string>
#include <thread>

#include "almcast/frame.hpp"
#include "almcast/types.hpp"

namespace almcast::transport {

/// Milliseconds on a process-wide monotonic clock.
Millis wall_now();

class TransportError : public Error {
 public:
  using Error::Error;
};

class Socket {
 public:
  Socket() = default;
  explicit Socket(int fd) : fd_(fd) {}
  Socket(Socket&& o) noexcept : fd_(std::exchange(o.fd_, -1)) {}
  Socket& operator=(Socket&& o) noexcept;
  Socket(const Socket&) = delete;
  Socket& operator=(const Socket&) = delete;
  ~Socket() { reset(); }

  int fd() const { return fd_; }
  bool valid() const { return fd_ >= 0; }
  void reset();
  /// shutdown(SHUT_RDWR) without releasing the descriptor.
  void shutdown();

 private:
  int fd_ = -1;
};

struct Endpoint {
  std::string host = "127.0.0.1";
  std::uint16_t port = 0;

  /// "host:port"
  static Endpoint parse(std::string_view text);
  std::string str() const;
  friend bool operator==(const Endpoint&, const Endpoint&) = default;
};

Socket listen_on(const Endpoint& ep, int backlog = 128);
Endpoint local_endpoint(const Socket& s);
/// Blocks until a connection arrives; returns an invalid socket if the
/// listener was shut down.
Socket accept_one(const Socket& listener);

struct ConnectResult {
  Socket socket;
  ConnectionHandle handle;
};

/// Non-blocking connect raced against `app_timeout`. On expiry the attempt is
/// abandoned (the socket is closed) and the handle is Failed(AppTimeout).
/// `syn_retries` caps the OS SYN budget via TCP_SYNCNT.
ConnectResult tcp_connect(NodeId src, NodeId dst, const Endpoint& addr, std::optional<Millis> app_timeout,
                          std::optional<int> syn_retries = std::nullopt, std::uint64_t serial = 0);

void send_all(const Socket& s, std::span<const std::uint8_t> bytes);
void send_frame(const Socket& s, const Frame& f);
/// Reads one frame. Returns nullopt on orderly EOF; throws TransportError on
/// timeout or socket error and DecodeFailure on malformed input.
std::optional<Frame> recv_frame(const Socket& s, std::optional<Millis> timeout = std::nullopt);

/// Sends PROBE(seq) and waits for PROBE_ECHO(seq) on a socket nobody else
/// reads. Returns kInfinity on timeout or close; throws ProtocolError on a
/// sequence mismatch.
Millis probe_roundtrip(const Socket& s, std::uint64_t seq, Millis timeout = 5000);

/// One established connection with a reader thread. PROBE frames are echoed
/// automatically, PROBE_ECHO frames complete the outstanding probe(), every
/// other frame goes to `on_frame`. `on_close` runs once when the peer closes
/// or the stream breaks, but not after a local close().
class Link {
 public:
  using FrameHandler = std::function<void(Link&, const Frame&)>;
  using CloseHandler = std::function<void(Link&)>;

  Link(Socket socket, ConnectionHandle handle);
  ~Link();
  Link(const Link&) = delete;
  Link& operator=(const Link&) = delete;

  void start(FrameHandler on_frame, CloseHandler on_close);
  void send(const Frame& f);
  Millis probe(std::uint64_t seq, Millis timeout);
  void close();
  bool open() const { return open_; }
  const ConnectionHandle& handle() const { return handle_; }
  std::size_t decode_errors() const { return decode_errors_; }

 private:
  void read_loop();

  Socket socket_;
  ConnectionHandle handle_;
  FrameHandler on_frame_;
  CloseHandler on_close_;
  std::thread reader_;
  std::mutex write_mu_;

  std::mutex probe_mu_;
  std::condition_variable probe_cv_;
  std::optional<std::uint64_t> expected_seq_;
  std::optional<std::uint64_t> echoed_seq_;
  Millis echo_at_ = 0;

  std::atomic<bool> open_{true};
  std::atomic<bool> local_close_{false};
  std::atomic<std::size_t> decode_errors_{0};
};

}  // namespace almcast::transport
