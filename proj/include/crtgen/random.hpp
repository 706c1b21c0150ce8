#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>

namespace crtgen {

using Engine = std::mt19937_64;

// splitmix64 finalizer
constexpr std::uint64_t mix64(std::uint64_t z) noexcept {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

/// Derives an independent stream seed from a base seed and a path of stream
/// indices. The result depends only on its arguments, never on call order, so
/// per-run and per-replicate streams are identical regardless of scheduling.
constexpr std::uint64_t stream_seed(std::uint64_t base,
                                    std::initializer_list<std::uint64_t> path) noexcept {
  std::uint64_t h = mix64(base);
  for (std::uint64_t p : path) h = mix64(h ^ mix64(p + 0x632be59bd9b4e019ULL));
  return h;
}

inline Engine make_engine(std::uint64_t base, std::initializer_list<std::uint64_t> path) {
  std::seed_seq seq{static_cast<std::uint32_t>(stream_seed(base, path)),
                    static_cast<std::uint32_t>(stream_seed(base, path) >> 32)};
  return Engine(seq);
}

// Stream tags used across modules.
namespace streams {
inline constexpr std::uint64_t kPopulation = 1;
inline constexpr std::uint64_t kSampling = 2;
inline constexpr std::uint64_t kOutcome = 3;
inline constexpr std::uint64_t kBootstrap = 4;
inline constexpr std::uint64_t kOracle = 5;
inline constexpr std::uint64_t kRun = 6;
}  // namespace streams

}  // namespace crtgen
