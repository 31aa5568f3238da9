#pragma once

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>

namespace ckd {

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Bad caller-supplied value (out-of-range epoch, invalid class id, ...).
struct ArgumentError : Error {
  using Error::Error;
};

/// Tensor/layer dimension mismatch.
struct ShapeError : Error {
  using Error::Error;
};

/// Malformed config file or experiment description.
struct ConfigError : Error {
  using Error::Error;
};

/// Filesystem / serialization failure.
struct IoError : Error {
  using Error::Error;
};

/// Deterministic random stream. All draws go through hand-rolled
/// transformations of the (standardized) mt19937_64 sequence, so the same
/// seed yields the same values on every platform.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : gen_(seed) {}

  std::uint64_t next_u64() { return gen_(); }

  /// Uniform integer in [0, n). n must be > 0.
  std::uint64_t bounded(std::uint64_t n);

  /// Uniform real in [a, b).
  double uniform(double a = 0.0, double b = 1.0);

  /// Standard normal via Box-Muller (one value per draw, no cached spare).
  double normal();

  /// Bernoulli with probability p.
  bool flip(double p) { return uniform() < p; }

  /// In-place Fisher-Yates shuffle with our own bounded draw.
  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::size_t j = static_cast<std::size_t>(bounded(i));
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  std::mt19937_64 gen_;
};

/// Mixes a base seed with stream labels so sub-streams (init, shuffle per
/// epoch, augmentation per epoch, ...) never collide.
std::uint64_t mix_seed(std::uint64_t seed, std::string_view stream, std::uint64_t index = 0);

/// FNV-1a over arbitrary bytes; used for content-addressed run directories
/// and parameter checksums.
std::uint64_t fnv1a64(const void* data, std::size_t len, std::uint64_t basis = 0xcbf29ce484222325ull);
std::string hash_hex(std::uint64_t h);

}  // namespace ckd
