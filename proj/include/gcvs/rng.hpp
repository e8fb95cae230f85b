#pragma once

// Counter-based splittable random streams. Output k of a stream is
// mix64(key + k * PHI), i.e. splitmix64 keyed by (seed, stream). Child
// streams are derived by remixing the key, so draws in one stream never
// depend on how many values another stream consumed. This is what makes
// replicate-level parallelism reproducible regardless of scheduling.

#include <cstdint>
#include <vector>

#include "gcvs/common.hpp"

namespace gcvs {

class RngStream {
 public:
  explicit RngStream(std::uint64_t seed, std::uint64_t stream = 0)
      : key_(mix64(seed ^ mix64((stream + 1) * kPhi ^ kStreamSalt))) {}

  std::uint64_t next_u64() {
    counter_ += kPhi;
    return mix64(key_ + counter_);
  }

  // Strictly inside (0,1); safe to feed through an inverse CDF.
  double uniform() {
    const std::uint64_t bits = next_u64() >> 11;  // 53 bits
    return (static_cast<double>(bits) + 0.5) * 0x1.0p-53;
  }

  // Standard normal via the inverse CDF: one uniform per draw, so stream
  // positions are easy to reason about.
  double normal() { return normal_quantile(uniform()); }

  bool bernoulli(double p) { return uniform() < p; }

  // Uniform in [0, n). Lemire multiply-shift; bias is < 2^-53 for the
  // index ranges used here.
  std::uint64_t below(std::uint64_t n) {
    return static_cast<std::uint64_t>(
        (static_cast<unsigned __int128>(next_u64()) * n) >> 64);
  }

  // Independent child stream; does not disturb this stream's counter.
  RngStream split(std::uint64_t child) const {
    RngStream out(0, 0);
    out.key_ = mix64(key_ ^ mix64((child + 1) * kPhi ^ kSplitSalt));
    out.counter_ = 0;
    return out;
  }

  template <class T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      const std::size_t j = static_cast<std::size_t>(below(i));
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  static constexpr std::uint64_t kPhi = 0x9E3779B97F4A7C15ull;
  static constexpr std::uint64_t kStreamSalt = 0xD1B54A32D192ED03ull;
  static constexpr std::uint64_t kSplitSalt = 0x8CB92BA72F3D8DD7ull;

  // splitmix64 finalizer
  static std::uint64_t mix64(std::uint64_t z) {
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
  }

  std::uint64_t key_;
  std::uint64_t counter_ = 0;
};

}  // namespace gcvs
