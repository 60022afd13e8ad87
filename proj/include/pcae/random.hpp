#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>
#include <string_view>

namespace pcae {

using Rng = std::mt19937_64;

namespace detail {

inline constexpr std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline constexpr std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (char c : s) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace detail

/// Derives an independent seed for a named sub-stream ("data", "init", "augment", ...)
/// plus optional integer indices (epoch, sample number, ...).
inline constexpr std::uint64_t derive_seed(std::uint64_t master, std::string_view stream,
                                           std::initializer_list<std::uint64_t> indices = {}) {
  std::uint64_t h = detail::splitmix64(master ^ detail::fnv1a(stream));
  for (std::uint64_t i : indices) h = detail::splitmix64(h ^ detail::splitmix64(i + 1));
  return h;
}

inline Rng make_rng(std::uint64_t master, std::string_view stream,
                    std::initializer_list<std::uint64_t> indices = {}) {
  return Rng(derive_seed(master, stream, indices));
}

}  // namespace pcae
