#include "met/rng.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>

namespace met {

namespace {

constexpr uint64_t kGolden = 0x9E3779B97F4A7C15ULL;

uint64_t mix64(uint64_t z) {
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

uint64_t fnv1a(std::string_view s) {
  uint64_t h = 0xCBF29CE484222325ULL;
  for (const char c : s) {
    h ^= static_cast<uint8_t>(c);
    h *= 0x100000001B3ULL;
  }
  return h;
}

}  // namespace

RngStream::RngStream(uint64_t seed, std::string label)
    : seed_(seed), label_(std::move(label)) {
  key_ = mix64(seed_ + kGolden) ^ mix64(fnv1a(label_));
}

uint64_t RngStream::next_u64() {
  ++counter_;
  return mix64(key_ + counter_ * kGolden);
}

double RngStream::uniform01() {
  return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double RngStream::normal() {
  // u1 in (0, 1] so the log is finite.
  const double u1 = (static_cast<double>(next_u64() >> 11) + 1.0) * 0x1.0p-53;
  const double u2 = static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

int64_t RngStream::uniform_int(int64_t n) {
  if (n <= 0) throw std::invalid_argument("RngStream::uniform_int: n must be positive");
  // Widening multiply; bias is O(2^-64), far below anything observable here.
  const unsigned __int128 wide =
      static_cast<unsigned __int128>(next_u64()) * static_cast<unsigned __int128>(n);
  return static_cast<int64_t>(wide >> 64);
}

bool RngStream::bernoulli(double p) { return uniform01() < p; }

RngStream RngStream::child(std::string_view sublabel) const {
  return RngStream(seed_, label_ + "/" + std::string(sublabel));
}

}  // namespace met
