#pragma once

#include <cstdint>
#include <string_view>

namespace mimforge {

/// Counter-based splittable generator (Philox4x32-10).
///
/// The output at position `counter` is a pure function of
/// (seed, stream_id, counter), so draws are reproducible across runs and
/// platforms and a stream can be skipped or re-created without replay.
/// `split` derives a child stream from the parent's stream id alone; the
/// child never observes how many values the parent has drawn.
class Prng {
 public:
  Prng() = default;
  explicit Prng(std::uint64_t seed, std::uint64_t stream_id = 0)
      : seed_(seed), stream_(stream_id) {}

  std::uint64_t seed() const { return seed_; }
  std::uint64_t stream_id() const { return stream_; }
  std::uint64_t counter() const { return counter_; }

  std::uint64_t next_u64();
  std::uint32_t next_u32() { return static_cast<std::uint32_t>(next_u64() >> 32); }

  /// Uniform in [0, 1) with 53 random bits.
  double uniform();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  /// Uniform integer in [lo, hi] inclusive. Requires lo <= hi.
  std::int64_t uniform_int(std::int64_t lo, std::int64_t hi);
  /// Standard normal via Box-Muller; consumes two uniforms per call.
  double normal();
  bool bernoulli(double p) { return uniform() < p; }

  Prng split(std::uint64_t id) const;
  Prng split(std::string_view tag) const;

 private:
  std::uint64_t seed_ = 0;
  std::uint64_t stream_ = 0;
  std::uint64_t counter_ = 0;
};

/// 64-bit FNV-1a, used for stream tags and fingerprints.
std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t basis = 0xcbf29ce484222325ULL);

}  // namespace mimforge
