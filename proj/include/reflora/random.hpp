#pragma once

#include <cstdint>

#include "reflora/linalg.hpp"

namespace reflora {

/// Counter-based 64-bit generator.
///
/// Output i of stream (seed, stream_id) is splitmix64(key + (i + 1) * 0x9E3779B97F4A7C15)
/// where key = splitmix64(seed ^ splitmix64(stream_id)). Streams never share state, so
/// an instance stream and an init stream derived from the same seed are independent
/// and each is reproducible from (seed, stream_id) alone. Gaussian samples use the
/// Marsaglia polar method on 53-bit uniforms, which keeps them portable across
/// standard libraries.
class CounterRng {
 public:
  static constexpr std::uint64_t kInstanceStream = 1;
  static constexpr std::uint64_t kInitStream = 2;
  static constexpr std::uint64_t kProbeStream = 3;

  explicit CounterRng(std::uint64_t seed, std::uint64_t stream_id = 0);

  /// Independent generator for a named sub-stream of the same seed.
  CounterRng split(std::uint64_t stream_id) const;

  std::uint64_t next_u64();
  /// Uniform on [0, 1).
  double uniform();
  double normal();

  std::uint64_t seed() const { return seed_; }
  std::uint64_t counter() const { return counter_; }

 private:
  std::uint64_t seed_;
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

std::uint64_t splitmix64(std::uint64_t x);

/// Matrix with i.i.d. N(0, stddev^2) entries, filled row by row.
Matrix gaussian_matrix(CounterRng& rng, Index rows, Index cols, double stddev = 1.0);

}  // namespace reflora
