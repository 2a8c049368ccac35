#pragma once

#include <cstdint>

namespace sit {

/// Counter-based random source.
///
/// Draw i of a stream with key k is `mix(k + (i + 1) * 0x9E3779B97F4A7C15)`,
/// where `mix` is the SplitMix64 finalizer. Because every draw is a pure
/// function of (key, counter), streams are identical on every platform and
/// independent substreams can be handed to parallel workers without sharing
/// state. Distributions are implemented here rather than with <random> since
/// the standard distributions are implementation-defined.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0);

  /// Independent stream derived from this stream's key and `id`; does not
  /// advance this stream.
  Rng substream(std::uint64_t id) const;

  std::uint64_t next_u64();
  /// Uniform in [0, 1) with 53 bits of resolution.
  double uniform();
  /// Uniform integer in [0, n). n must be positive.
  std::uint64_t uniform_index(std::uint64_t n);
  /// Standard normal via Box-Muller (one output per two uniforms).
  double normal();
  /// Normal(0, stddev) resampled until it lies within ±bound·stddev.
  double truncated_normal(double stddev, double bound = 2.0);
  bool bernoulli(double p) { return uniform() < p; }

  std::uint64_t key() const noexcept { return key_; }
  std::uint64_t counter() const noexcept { return counter_; }

  friend bool operator==(const Rng&, const Rng&) = default;

 private:
  Rng(std::uint64_t key, std::uint64_t counter, int) : key_(key), counter_(counter) {}
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
};

std::uint64_t splitmix64_mix(std::uint64_t z);

}  // namespace sit
