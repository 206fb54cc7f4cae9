#include "almcast/types.hpp"

#include <fmt/format.h>

namespace almcast {

std::string_view to_string(NodeRole role) {
  switch (role) {
    case NodeRole::OverlayHost: return "oh";
    case NodeRole::EndHost: return "eh";
    case NodeRole::MonitorHost: return "mh";
  }
  return "?";
}

NodeRole parse_role(std::string_view text) {
  if (text == "oh") return NodeRole::OverlayHost;
  if (text == "eh") return NodeRole::EndHost;
  if (text == "mh") return NodeRole::MonitorHost;
  throw Error(fmt::format("unknown node role '{}'", text));
}

std::string_view to_string(ConnState s) {
  switch (s) {
    case ConnState::Pending: return "pending";
    case ConnState::Established: return "established";
    case ConnState::Failed: return "failed";
    case ConnState::Closed: return "closed";
  }
  return "?";
}

std::string_view to_string(FailReason r) {
  switch (r) {
    case FailReason::None: return "none";
    case FailReason::Refused: return "refused";
    case FailReason::OsTimeout: return "os_timeout";
    case FailReason::AppTimeout: return "app_timeout";
    case FailReason::Timeout: return "timeout";
    case FailReason::Crashed: return "crashed";
    case FailReason::Voided: return "voided";
  }
  return "?";
}

void ConnectionHandle::transition(ConnState next, Millis at, FailReason why) {
  const bool ok = (state == ConnState::Pending &&
                   (next == ConnState::Established || next == ConnState::Failed)) ||
                  (state == ConnState::Established && next == ConnState::Closed);
  if (!ok) {
    throw InvariantViolation(fmt::format("connection {}->{}: illegal transition {} -> {}",
                                         src.id, dst.id, to_string(state), to_string(next)));
  }
  state = next;
  if (next != ConnState::Closed) resolved_at = at;
  reason = why;
}

}  // namespace almcast
