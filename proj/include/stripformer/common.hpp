// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <cstdlib>
#include <optional>
#include <random>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace stripformer {

// Error taxonomy. Shape mismatches and malformed tensor arguments raise
// ShapeError; bad hyperparameters raise ConfigError; misuse of an API
// contract (non-scalar loss, step out of range, ...) raises UsageError.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class UsageError : public Error {
 public:
  using Error::Error;
};

class CheckpointError : public Error {
 public:
  using Error::Error;
};

using Rng = std::mt19937_64;

// STRICT_FINITE=1 turns on a NaN/Inf sweep after every op. The flag is read
// once; tests can override it in-process.
inline std::optional<bool>& strict_finite_override() {
  static std::optional<bool> v;
  return v;
}

inline bool strict_finite_enabled() {
  if (strict_finite_override().has_value()) return *strict_finite_override();
  static const bool from_env = [] {
    const char* e = std::getenv("STRICT_FINITE");
    return e != nullptr && std::string(e) == "1";
  }();
  return from_env;
}

inline void set_strict_finite(std::optional<bool> v) { strict_finite_override() = v; }

// Normal draw rejected outside two standard deviations.
template <typename T>
void fill_trunc_normal(std::span<T> out, Rng& rng, double stddev) {
  std::normal_distribution<double> dist(0.0, stddev);
  for (auto& v : out) {
    double z = dist(rng);
    while (std::abs(z) > 2.0 * stddev) z = dist(rng);
    v = static_cast<T>(z);
  }
}

template <typename T>
void fill_uniform(std::span<T> out, Rng& rng, double lo, double hi) {
  std::uniform_real_distribution<double> dist(lo, hi);
  for (auto& v : out) v = static_cast<T>(dist(rng));
}

inline std::string join_ints(std::span<const int64_t> xs) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < xs.size(); ++i) {
    if (i) os << ", ";
    os << xs[i];
  }
  os << "]";
  return os.str();
}

}  // namespace stripformer
