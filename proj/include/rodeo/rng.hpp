#pragma once

#include "rodeo/core.hpp"

#include <cstdint>
#include <random>

namespace rodeo {

/// Counter-based key. Children are derived by hashing (parent, index), so any
/// stream of draws is a pure function of the root seed and the path taken.
struct Key {
  std::uint64_t value = 0;
};

namespace detail {
[[nodiscard]] inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}
}  // namespace detail

[[nodiscard]] inline Key split(Key parent, std::uint64_t index) {
  return Key{detail::splitmix64(detail::splitmix64(parent.value) ^ detail::splitmix64(index + 0x5851F42D4C957F2DULL))};
}

[[nodiscard]] inline std::mt19937_64 engine(Key key) {
  std::seed_seq seq{static_cast<std::uint32_t>(key.value), static_cast<std::uint32_t>(key.value >> 32)};
  return std::mt19937_64(seq);
}

[[nodiscard]] inline Vector standard_normal(Key key, Eigen::Index n) {
  auto gen = engine(key);
  std::normal_distribution<double> dist;
  Vector out(n);
  for (Eigen::Index i = 0; i < n; ++i) out(i) = dist(gen);
  return out;
}

[[nodiscard]] inline double uniform01(Key key) {
  auto gen = engine(key);
  return std::uniform_real_distribution<double>(0.0, 1.0)(gen);
}

}  // namespace rodeo
