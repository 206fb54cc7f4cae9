#pragma once

// Core identifiers and value types shared by every almcast module.

#include <cstdint>
#include <functional>
#include <limits>
#include <stdexcept>
#include <string>
#include <string_view>

namespace almcast {

/// Durations and timestamps, in milliseconds. Infinity marks a lost probe.
using Millis = double;
inline constexpr Millis kInfinity = std::numeric_limits<double>::infinity();

enum class NodeRole : std::uint8_t { OverlayHost = 0, EndHost = 1, MonitorHost = 2 };

std::string_view to_string(NodeRole role);
NodeRole parse_role(std::string_view text);

/// Identity of a participant. Ordering and equality use the numeric id only;
/// ids are unique across roles within one scenario.
struct NodeId {
  std::uint32_t id = 0;
  NodeRole role = NodeRole::OverlayHost;

  static NodeId oh(std::uint32_t id) { return {id, NodeRole::OverlayHost}; }
  static NodeId eh(std::uint32_t id) { return {id, NodeRole::EndHost}; }
  static NodeId mh(std::uint32_t id) { return {id, NodeRole::MonitorHost}; }

  friend bool operator==(const NodeId& a, const NodeId& b) { return a.id == b.id; }
  friend auto operator<=>(const NodeId& a, const NodeId& b) { return a.id <=> b.id; }
};

enum class ConnState : std::uint8_t { Pending, Established, Failed, Closed };

enum class FailReason : std::uint8_t {
  None,
  Refused,
  OsTimeout,   // SYN budget exhausted at the OS level
  AppTimeout,  // abandoned by the application-controlled timeout
  Timeout,     // still pending when wait_for_completion hit its deadline
  Crashed,     // endpoint crashed
  Voided,      // source crashed or the attempt was cancelled
};

std::string_view to_string(ConnState s);
std::string_view to_string(FailReason r);

/// One directed connection attempt and its lifecycle. Shared by the
/// simulated and the socket transport.
struct ConnectionHandle {
  std::uint64_t serial = 0;  // unique per transport instance
  NodeId src;
  NodeId dst;
  ConnState state = ConnState::Pending;
  FailReason reason = FailReason::None;
  Millis opened_at = 0;
  Millis resolved_at = 0;

  bool established() const { return state == ConnState::Established; }
  bool pending() const { return state == ConnState::Pending; }
  Millis conn_time() const { return resolved_at - opened_at; }

  /// Pending -> Established | Failed, Established -> Closed. Anything else throws.
  void transition(ConnState next, Millis at, FailReason why = FailReason::None);
};

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A protocol-level inconsistency (e.g. a duplicated pair with no probe result).
class ProtocolError : public Error {
 public:
  using Error::Error;
};

/// A broken internal invariant, such as a clock moving backwards.
class InvariantViolation : public Error {
 public:
  using Error::Error;
};

}  // namespace almcast

template <>
struct std::hash<almcast::NodeId> {
  std::size_t operator()(const almcast::NodeId& n) const noexcept {
    return std::hash<std::uint32_t>{}(n.id);
  }
};
