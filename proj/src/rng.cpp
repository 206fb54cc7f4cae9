#include "almcast/rng.hpp"

#include <cmath>
#include <numbers>

namespace almcast {

std::uint64_t splitmix64(std::uint64_t& state) {
  state += 0x9E3779B97F4A7C15ULL;
  std::uint64_t z = state;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

KeyedStream::KeyedStream(std::uint64_t seed, std::initializer_list<std::uint64_t> keys)
    : state_(seed) {
  for (std::uint64_t k : keys) {
    state_ ^= k;
    state_ = splitmix64(state_);
  }
}

double KeyedStream::uniform() {
  return static_cast<double>(next() >> 11) * 0x1.0p-53;
}

double KeyedStream::normal() {
  const double u1 = uniform();
  const double u2 = uniform();
  return std::sqrt(-2.0 * std::log(1.0 - u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

double KeyedStream::lognormal(double median, double sigma) {
  return median * std::exp(sigma * normal());
}

}  // namespace almcast
