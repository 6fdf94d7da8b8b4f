#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

namespace met {

// Counter-based deterministic random stream. Two streams constructed with the
// same (seed, label) produce identical draw sequences on every platform; the
// counter records how many raw 64-bit words have been consumed.
class RngStream {
 public:
  RngStream(uint64_t seed, std::string label);

  uint64_t next_u64();
  double uniform01();   // [0, 1)
  double normal();      // Box-Muller, consumes two words per call
  int64_t uniform_int(int64_t n);  // [0, n), n > 0
  bool bernoulli(double p);

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (int64_t i = static_cast<int64_t>(v.size()) - 1; i > 0; --i) {
      const int64_t j = uniform_int(i + 1);
      std::swap(v[static_cast<size_t>(i)], v[static_cast<size_t>(j)]);
    }
  }

  uint64_t seed() const { return seed_; }
  const std::string& label() const { return label_; }
  uint64_t counter() const { return counter_; }
  void skip(uint64_t n) { counter_ += n; }

  // Derived stream with label "<label>/<sublabel>" and the same seed.
  RngStream child(std::string_view sublabel) const;

 private:
  uint64_t seed_;
  std::string label_;
  uint64_t key_;
  uint64_t counter_ = 0;
};

}  // namespace met
