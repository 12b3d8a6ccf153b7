#pragma once

#include <cstdint>
#include <string_view>

namespace fedgin {

/// Counter-based pseudorandom stream.
///
/// Draw n of a stream keyed by `key` is mix64(key + (n + 1) * golden), i.e.
/// SplitMix64 viewed as a function of (key, counter). Child streams are keyed
/// by hashing a name into the parent key, so splitting never advances the
/// parent. All transforms to uniform/normal use explicit formulas rather than
/// <random> distributions, which are implementation-defined.
class RngStream {
 public:
  explicit RngStream(std::uint64_t seed = 0);

  /// Independent stream for `name`; does not consume draws from *this.
  [[nodiscard]] RngStream child(std::string_view name) const;
  [[nodiscard]] RngStream child(std::uint64_t index) const;

  std::uint64_t next_u64();
  /// Uniform in [0, 1) with 53 random bits.
  double uniform();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  /// Standard normal via Box-Muller (one output per pair of uniforms).
  double normal();
  double normal(double mean, double stddev) { return mean + stddev * normal(); }
  /// Uniform integer in [0, n), rejection-sampled to avoid modulo bias.
  std::uint64_t uniform_index(std::uint64_t n);

  [[nodiscard]] std::uint64_t key() const { return key_; }
  [[nodiscard]] std::uint64_t counter() const { return counter_; }

  friend bool operator==(const RngStream&, const RngStream&) = default;

 private:
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
};

std::uint64_t mix64(std::uint64_t x);
/// FNV-1a folded through mix64.
std::uint64_t hash_name(std::string_view name);

}  // namespace fedgin
