#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <string_view>
#include <vector>

namespace dvc {

// Counter-based generator: every draw is a pure function of (key, counter),
// so independent streams can be derived by name and replayed exactly.
class RngStream {
public:
  explicit RngStream(std::uint64_t key) : key_(key) {}

  static RngStream from_seed(std::uint64_t seed, std::string_view name) {
    return RngStream(mix(seed ^ fnv1a(name)));
  }

  RngStream child(std::string_view name) const {
    return RngStream(mix(key_ ^ fnv1a(name)));
  }
  RngStream child(std::uint64_t index) const {
    return RngStream(mix(key_ + (index + 1) * 0x9E3779B97F4A7C15ULL));
  }

  std::uint64_t next_u64() {
    ctr_ += 1;
    return mix(key_ + ctr_ * 0x2D358DCCAA6C78A5ULL);
  }

  // [0, 1)
  float uniform() { return float(next_u64() >> 40) * (1.0f / 16777216.0f); }

  float uniform(float lo, float hi) { return lo + (hi - lo) * uniform(); }

  // (0, 1]
  double open_unit() {
    double u = double(next_u64() >> 11) * 0x1.0p-53;
    return u > 0.0 ? u : 0x1.0p-53;
  }

  // Standard normal via Box-Muller; one value per call so draw order is
  // independent of call-site parity.
  float normal() {
    double u1 = open_unit();
    double u2 = double(next_u64() >> 11) * 0x1.0p-53;
    return float(std::sqrt(-2.0 * std::log(u1)) *
                 std::cos(2.0 * std::numbers::pi * u2));
  }

  float gumbel() { return float(-std::log(-std::log(open_unit()))); }

  // [0, n)
  std::uint64_t below(std::uint64_t n) { return n ? next_u64() % n : 0; }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::size_t j = std::size_t(below(i));
      std::swap(v[i - 1], v[j]);
    }
  }

  std::uint64_t key() const { return key_; }

private:
  static std::uint64_t mix(std::uint64_t z) {
    z += 0x9E3779B97F4A7C15ULL;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  static std::uint64_t fnv1a(std::string_view s) {
    std::uint64_t h = 0xCBF29CE484222325ULL;
    for (unsigned char c : s) {
      h ^= c;
      h *= 0x100000001B3ULL;
    }
    return h;
  }

  std::uint64_t key_;
  std::uint64_t ctr_ = 0;
};

}  // namespace dvc
