#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace crate {

using Scalar = double;
using Mat = Eigen::MatrixXd;
using Vec = Eigen::VectorXd;
using Index = Eigen::Index;

// Token representation matrix, d x (N+1). Column 0 is the class token,
// columns 1..N are patch tokens in row-major patch-grid order.
using TokenMatrix = Mat;

// Raised for invalid configurations, bad arguments, unreadable inputs.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Raised for malformed or corrupt files.
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Raised when a computation produces non-finite or divergent values.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using Rng = std::mt19937_64;

// splitmix64; used to derive independent per-item RNG streams from one seed.
inline uint64_t mix_seed(uint64_t seed, uint64_t item) {
  uint64_t z = seed + 0x9E3779B97F4A7C15ull * (item + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

inline Mat uniform_matrix(Index rows, Index cols, Scalar lo, Scalar hi, Rng& rng) {
  std::uniform_real_distribution<Scalar> dist(lo, hi);
  Mat m(rows, cols);
  for (Index c = 0; c < cols; ++c)
    for (Index r = 0; r < rows; ++r) m(r, c) = dist(rng);
  return m;
}

// Kaiming-style fan-in uniform init, bound sqrt(6 / fan_in).
inline Mat kaiming_uniform(Index rows, Index cols, Index fan_in, Rng& rng) {
  const Scalar bound = std::sqrt(6.0 / static_cast<Scalar>(fan_in));
  return uniform_matrix(rows, cols, -bound, bound, rng);
}

inline Mat gaussian_matrix(Index rows, Index cols, Scalar stddev, Rng& rng) {
  std::normal_distribution<Scalar> dist(0.0, stddev);
  Mat m(rows, cols);
  for (Index c = 0; c < cols; ++c)
    for (Index r = 0; r < rows; ++r) m(r, c) = dist(rng);
  return m;
}

inline bool all_finite(const Mat& m) { return m.allFinite(); }

}  // namespace crate
