#pragma once

#include <cstdint>
#include <string_view>

namespace capdet {

// Counter-based deterministic generator. Draw i of a stream identified by
// (seed, label) is splitmix64(stream_seed + i), where stream_seed mixes the
// master seed with an FNV-1a hash of the label. Streams are independent of
// call order, and identical seeds produce identical sequences on every
// platform.
class Rng {
 public:
  explicit Rng(uint64_t seed) : base_(seed) {}
  Rng(uint64_t seed, std::string_view label);

  // Derive an independent substream. Does not advance this stream.
  Rng stream(std::string_view label) const;
  Rng stream(uint64_t index) const;

  uint64_t next_u64();
  double next_uniform();   // [0, 1)
  double next_gaussian();  // N(0, 1), Box-Muller
  float normal(float stddev) { return static_cast<float>(next_gaussian() * stddev); }
  // Uniform integer in [0, n)
  uint64_t next_below(uint64_t n);

  uint64_t seed() const { return base_; }

 private:
  uint64_t base_ = 0;
  uint64_t counter_ = 0;
  bool have_spare_ = false;
  double spare_ = 0.0;
};

uint64_t fnv1a64(std::string_view s);
uint64_t splitmix64(uint64_t x);

}  // namespace capdet
