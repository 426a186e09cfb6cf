#include "capdet/rng.hpp"

#include <cmath>

namespace capdet {

uint64_t fnv1a64(std::string_view s) {
  uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

Rng::Rng(uint64_t seed, std::string_view label)
    : base_(splitmix64(seed ^ fnv1a64(label))) {}

Rng Rng::stream(std::string_view label) const {
  return Rng(base_, label);
}

Rng Rng::stream(uint64_t index) const {
  return Rng(splitmix64(base_ ^ splitmix64(index + 0x51ed270b0a1ull)));
}

uint64_t Rng::next_u64() { return splitmix64(base_ + counter_++); }

double Rng::next_uniform() {
  // 53 random bits into [0, 1)
  return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double Rng::next_gaussian() {
  if (have_spare_) {
    have_spare_ = false;
    return spare_;
  }
  double u1 = next_uniform();
  double u2 = next_uniform();
  if (u1 < 1e-300) u1 = 1e-300;
  double mag = std::sqrt(-2.0 * std::log(u1));
  spare_ = mag * std::sin(2.0 * M_PI * u2);
  have_spare_ = true;
  return mag * std::cos(2.0 * M_PI * u2);
}

uint64_t Rng::next_below(uint64_t n) {
  // Modulo bias is negligible for n << 2^64 and irrelevant here; what
  // matters is determinism.
  return n == 0 ? 0 : next_u64() % n;
}

}  // namespace capdet
