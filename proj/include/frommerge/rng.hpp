#pragma once

#include <array>
#include <cstdint>
#include <string_view>

#include "frommerge/tensor.hpp"

namespace frommerge {

// Philox4x32-10 counter-based generator (Salmon et al., SC'11). Output is a pure
// function of (counter, key), so any element of a stream can be drawn independently.
struct Philox4x32 {
  using Counter = std::array<std::uint32_t, 4>;
  using Key = std::array<std::uint32_t, 2>;

  static Counter generate(Counter ctr, Key key) noexcept;
};

// A labelled stream: key derived from (seed, label). Element j of the stream depends only
// on (seed, label, j).
class CounterStream {
 public:
  CounterStream(std::uint64_t seed, std::string_view label) noexcept;

  // Uniform double in the open interval (0, 1) with 53 random bits.
  double uniform(std::uint64_t index) const noexcept;
  // Standard normal via Box-Muller on the two uniforms of block `index`.
  double normal(std::uint64_t index) const noexcept;

  Philox4x32::Key key() const noexcept { return key_; }

 private:
  Philox4x32::Key key_{};
};

std::uint64_t fnv1a64(std::string_view bytes) noexcept;

// rows x cols i.i.d. N(0, sigma²), bit-identical for identical arguments.
Tensor2D seeded_normal(std::size_t rows, std::size_t cols, double sigma, std::uint64_t seed,
                       std::string_view stream_label);

}  // namespace frommerge
