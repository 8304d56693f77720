#pragma once

#include <cstdint>
#include <numeric>
#include <random>
#include <vector>

namespace cafo {

/// Uniform draw in [0, n) by rejection on a 64-bit Mersenne Twister, so the
/// sequence does not depend on the standard library's distribution code.
inline std::uint64_t uniform_index(std::mt19937_64& rng, std::uint64_t n) {
  // 2^64 mod n: draws below this would bias the modulo.
  const std::uint64_t threshold = (std::uint64_t(0) - n) % n;
  std::uint64_t x = rng();
  while (x < threshold) x = rng();
  return x % n;
}

template <typename T>
void fisher_yates(std::vector<T>& v, std::mt19937_64& rng) {
  for (std::size_t i = v.size(); i > 1; --i) {
    const auto j = std::size_t(uniform_index(rng, i));
    std::swap(v[i - 1], v[j]);
  }
}

}  // namespace cafo
