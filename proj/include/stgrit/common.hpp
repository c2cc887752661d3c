#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace stgrit {

/// Training churns through multi-megabyte tensors every step; glibc serves
/// those via mmap/munmap by default, which costs a page-zeroing fault storm.
/// Raising the thresholds keeps large chunks on the reusable heap. Call once
/// at process start from long-running entry points.
inline void tune_allocator() {
#if defined(__GLIBC__)
  mallopt(M_MMAP_THRESHOLD, 256 * 1024 * 1024);
  mallopt(M_TRIM_THRESHOLD, 256 * 1024 * 1024);
#endif
}

/// Base class for all library errors.
class Error : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

/// Tensor shape or axis mismatch.
class ShapeError : public Error {
public:
  using Error::Error;
};

/// Invalid configuration value (bad hyperparameter, unknown config key, ...).
class ConfigError : public Error {
public:
  using Error::Error;
};

/// Non-finite value produced during forward or backward computation.
class NumericsError : public Error {
public:
  using Error::Error;
};

/// Malformed input file.
class ParseError : public Error {
public:
  using Error::Error;
};

/// Input data violates a domain invariant (out-of-range coordinate, ...).
class ValidationError : public Error {
public:
  using Error::Error;
};

/// API misuse (backward called twice, missing gradient, duplicate name, ...).
class ContractError : public Error {
public:
  using Error::Error;
};

/// Deterministic random source. All sampling transforms are implemented
/// locally so that a given seed yields the same stream everywhere;
/// std::<distribution> types are implementation-defined and avoided.
class Rng {
public:
  explicit Rng(std::uint64_t seed) : seed_(seed), gen_(seed) {}

  std::uint64_t seed() const { return seed_; }

  /// Uniform double in [0, 1) with 53 bits of randomness.
  double uniform() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Standard normal via Box-Muller; caches the second deviate.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = 1.0 - uniform();  // (0, 1], keeps log finite
    double u2 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double theta = 6.283185307179586476925286766559 * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return r * std::cos(theta);
  }

  /// Uniform integer in [0, n) via rejection sampling (unbiased).
  std::uint64_t next_below(std::uint64_t n) {
    if (n == 0) throw ContractError("Rng::next_below: n must be positive");
    std::uint64_t bound = std::numeric_limits<std::uint64_t>::max() / n * n;
    std::uint64_t x;
    do {
      x = gen_();
    } while (x >= bound);
    return x % n;
  }

  /// Fisher-Yates shuffle.
  template <class T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::size_t j = static_cast<std::size_t>(next_below(i));
      std::swap(v[i - 1], v[j]);
    }
  }

  /// Derived stream for independent substreams (per record, per stage).
  Rng child(std::uint64_t index) const { return Rng(seed_ ^ index); }

private:
  std::uint64_t seed_;
  std::mt19937_64 gen_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace stgrit
