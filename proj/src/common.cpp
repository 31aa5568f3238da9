#include "ckd/common.hpp"

#include <cmath>
#include <vector>

namespace ckd {

std::uint64_t Rng::bounded(std::uint64_t n) {
  if (n == 0) throw ArgumentError("Rng::bounded: n must be > 0");
  // Rejection sampling keeps the draw unbiased and platform-stable.
  const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
  std::uint64_t x;
  do {
    x = gen_();
  } while (x >= limit);
  return x % n;
}

double Rng::uniform(double a, double b) {
  const double u = static_cast<double>(gen_() >> 11) * 0x1.0p-53;  // [0,1)
  return a + (b - a) * u;
}

double Rng::normal() {
  // Box-Muller; u1 shifted away from 0 so log() stays finite.
  const double u1 = (static_cast<double>(gen_() >> 11) + 0.5) * 0x1.0p-53;
  const double u2 = static_cast<double>(gen_() >> 11) * 0x1.0p-53;
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
}

std::uint64_t mix_seed(std::uint64_t seed, std::string_view stream, std::uint64_t index) {
  std::uint64_t h = fnv1a64(stream.data(), stream.size());
  h = fnv1a64(&seed, sizeof(seed), h);
  h = fnv1a64(&index, sizeof(index), h);
  // splitmix64 finalizer
  h += 0x9e3779b97f4a7c15ull;
  h = (h ^ (h >> 30)) * 0xbf58476d1ce4e5b9ull;
  h = (h ^ (h >> 27)) * 0x94d049bb133111ebull;
  return h ^ (h >> 31);
}

std::uint64_t fnv1a64(const void* data, std::size_t len, std::uint64_t basis) {
  const auto* p = static_cast<const unsigned char*>(data);
  std::uint64_t h = basis;
  for (std::size_t i = 0; i < len; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ull;
  }
  return h;
}

std::string hash_hex(std::uint64_t h) {
  static const char* digits = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i) {
    s[i] = digits[h & 0xf];
    h >>= 4;
  }
  return s;
}

}  // namespace ckd
