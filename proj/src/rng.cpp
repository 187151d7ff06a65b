#include "frommerge/rng.hpp"

#include <cmath>
#include <numbers>

#include "frommerge/errors.hpp"

namespace frommerge {

namespace {

constexpr std::uint32_t kPhiloxM0 = 0xD2511F53u;
constexpr std::uint32_t kPhiloxM1 = 0xCD9E8D57u;
constexpr std::uint32_t kPhiloxW0 = 0x9E3779B9u;
constexpr std::uint32_t kPhiloxW1 = 0xBB67AE85u;
constexpr int kPhiloxRounds = 10;

inline void mulhilo(std::uint32_t a, std::uint32_t b, std::uint32_t& hi, std::uint32_t& lo) noexcept {
  const std::uint64_t p = static_cast<std::uint64_t>(a) * b;
  hi = static_cast<std::uint32_t>(p >> 32);
  lo = static_cast<std::uint32_t>(p);
}

inline std::uint64_t splitmix64(std::uint64_t x) noexcept {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

// 53 high-quality bits mapped to the open interval (0, 1).
inline double to_unit(std::uint32_t hi, std::uint32_t lo) noexcept {
  const std::uint64_t bits = ((static_cast<std::uint64_t>(hi) << 32) | lo) >> 11;
  return (static_cast<double>(bits) + 0.5) * 0x1.0p-53;
}

// Domain tags in counter word 2 keep uniform and normal draws of one stream disjoint.
constexpr std::uint32_t kNormalDomain = 0u;
constexpr std::uint32_t kUniformDomain = 1u;

inline Philox4x32::Counter counter_for(std::uint64_t index, std::uint32_t domain) noexcept {
  return {static_cast<std::uint32_t>(index), static_cast<std::uint32_t>(index >> 32), domain, 0u};
}

}  // namespace

Philox4x32::Counter Philox4x32::generate(Counter ctr, Key key) noexcept {
  for (int round = 0; round < kPhiloxRounds; ++round) {
    if (round > 0) {
      key[0] += kPhiloxW0;
      key[1] += kPhiloxW1;
    }
    std::uint32_t hi0, lo0, hi1, lo1;
    mulhilo(kPhiloxM0, ctr[0], hi0, lo0);
    mulhilo(kPhiloxM1, ctr[2], hi1, lo1);
    ctr = {hi1 ^ ctr[1] ^ key[0], lo1, hi0 ^ ctr[3] ^ key[1], lo0};
  }
  return ctr;
}

std::uint64_t fnv1a64(std::string_view bytes) noexcept {
  std::uint64_t h = 0xCBF29CE484222325ull;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001B3ull;
  }
  return h;
}

CounterStream::CounterStream(std::uint64_t seed, std::string_view label) noexcept {
  const std::uint64_t k = splitmix64(seed ^ splitmix64(fnv1a64(label)));
  key_ = {static_cast<std::uint32_t>(k), static_cast<std::uint32_t>(k >> 32)};
}

double CounterStream::uniform(std::uint64_t index) const noexcept {
  const auto r = Philox4x32::generate(counter_for(index, kUniformDomain), key_);
  return to_unit(r[0], r[1]);
}

double CounterStream::normal(std::uint64_t index) const noexcept {
  const auto r = Philox4x32::generate(counter_for(index, kNormalDomain), key_);
  const double u1 = to_unit(r[0], r[1]);
  const double u2 = to_unit(r[2], r[3]);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

Tensor2D seeded_normal(std::size_t rows, std::size_t cols, double sigma, std::uint64_t seed,
                       std::string_view stream_label) {
  if (!(sigma > 0.0) || !std::isfinite(sigma)) {
    throw ValidationError("seeded_normal: sigma must be positive, got " + std::to_string(sigma));
  }
  const CounterStream stream(seed, stream_label);
  Tensor2D out(rows, cols);
  auto data = out.data();
  const auto n = static_cast<std::ptrdiff_t>(data.size());
#pragma omp parallel for schedule(static) if (n > (1 << 16))
  for (std::ptrdiff_t j = 0; j < n; ++j) {
    data[static_cast<std::size_t>(j)] = sigma * stream.normal(static_cast<std::uint64_t>(j));
  }
  return out;
}

}  // namespace frommerge
