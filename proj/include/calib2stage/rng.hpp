#pragma once

#include <cstdint>
#include <random>
#include <string_view>
#include <vector>

namespace calib2stage {

// Engine seeded from (seed, key...). Used to give every parameter tensor,
// example index, or epoch its own reproducible stream independent of the
// order in which streams are consumed.
inline std::mt19937_64 keyed_engine(std::uint64_t seed, std::string_view key) {
  std::vector<std::uint32_t> words{static_cast<std::uint32_t>(seed),
                                   static_cast<std::uint32_t>(seed >> 32)};
  for (char c : key) words.push_back(static_cast<unsigned char>(c));
  std::seed_seq seq(words.begin(), words.end());
  return std::mt19937_64(seq);
}

inline std::mt19937_64 keyed_engine(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(a),    static_cast<std::uint32_t>(a >> 32),
                    static_cast<std::uint32_t>(b),    static_cast<std::uint32_t>(b >> 32)};
  return std::mt19937_64(seq);
}

}  // namespace calib2stage
