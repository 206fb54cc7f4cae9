#pragma once

// Keyed deterministic random streams for the simulator.
//
// Every random quantity is drawn from a stream derived from the scenario seed
// and a tuple of keys naming the quantity (for example: tag, src, dst,
// attempt). Draws therefore do not depend on event interleaving, which keeps
// runs byte-identical and lets paired strategy comparisons share draws.
//
// Derivation (documented so tests can replay it independently):
//   state = seed
//   for each key k: state = splitmix64(state ^ k)
//   the stream then yields splitmix64 outputs starting from that state.
//   uniform() = (next() >> 11) * 2^-53
//   normal()  = sqrt(-2 ln(1 - u1)) * cos(2 pi u2)  (two uniforms, u1 first)

#include <cstdint>
#include <initializer_list>

namespace almcast {

/// One splitmix64 step: advances `state` and returns the mixed output.
std::uint64_t splitmix64(std::uint64_t& state);

class KeyedStream {
 public:
  KeyedStream(std::uint64_t seed, std::initializer_list<std::uint64_t> keys);

  std::uint64_t next() { return splitmix64(state_); }
  double uniform();
  double normal();
  /// median * exp(sigma * normal())
  double lognormal(double median, double sigma);

 private:
  std::uint64_t state_;
};

// Stream tags.
enum class StreamTag : std::uint64_t {
  Connect = 0x434f4e4e,
  Probe = 0x50524f42,
  Message = 0x4d534700,
};

}  // namespace almcast
