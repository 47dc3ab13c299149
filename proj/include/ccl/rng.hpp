#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "ccl/errors.hpp"

namespace ccl {

// Single source of randomness. All sampling goes through explicit helpers
// built on raw mt19937_64 output, so sequences are identical across
// platforms and standard library versions. State is serializable, which
// lets training runs resume/replay bit-exactly.
class Rng {
 public:
  explicit Rng(uint64_t seed = 0) : engine_(seed) {}

  uint64_t next_u64() { return engine_(); }

  // Uniform in [0, 1) with 53 bits of mantissa.
  double uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  // Uniform integer in [0, n). Modulo bias is negligible for the small n
  // used here (ratio sets, template libraries, alphabets).
  int uniform_int(int n) {
    if (n <= 0) throw InvalidArgumentError("uniform_int: n must be positive");
    return static_cast<int>(next_u64() % static_cast<uint64_t>(n));
  }

  // Standard normal via Box-Muller.
  double normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    double u2 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double radius = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * M_PI * u2;
    spare_ = radius * std::sin(theta);
    have_spare_ = true;
    return radius * std::cos(theta);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  // In-place Fisher-Yates shuffle.
  template <typename T>
  void shuffle(std::vector<T>& items) {
    for (size_t i = items.size(); i > 1; --i) {
      const size_t j = static_cast<size_t>(uniform_int(static_cast<int>(i)));
      std::swap(items[i - 1], items[j]);
    }
  }

  // Sample k distinct indices from [0, n) in selection order.
  std::vector<int> sample_distinct(int n, int k) {
    if (k > n) throw CapacityError("sample_distinct: k exceeds population");
    std::vector<int> pool(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) pool[static_cast<size_t>(i)] = i;
    std::vector<int> out;
    out.reserve(static_cast<size_t>(k));
    for (int i = 0; i < k; ++i) {
      const int j = i + uniform_int(n - i);
      std::swap(pool[static_cast<size_t>(i)], pool[static_cast<size_t>(j)]);
      out.push_back(pool[static_cast<size_t>(i)]);
    }
    return out;
  }

  // State capture for TrainState sidecars.
  std::string serialize() const {
    std::ostringstream oss;
    oss << engine_ << " " << (have_spare_ ? 1 : 0) << " " << spare_;
    return oss.str();
  }

  void deserialize(const std::string& text) {
    std::istringstream iss(text);
    int spare_flag = 0;
    iss >> engine_ >> spare_flag >> spare_;
    if (!iss) throw ParseError("Rng::deserialize: malformed state");
    have_spare_ = spare_flag != 0;
  }

 private:
  std::mt19937_64 engine_;
  bool have_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace ccl
