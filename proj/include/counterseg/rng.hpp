#ifndef COUNTERSEG_RNG_HPP
#define COUNTERSEG_RNG_HPP

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "counterseg/common.hpp"

namespace counterseg {

// splitmix64-seeded xoshiro256**. All distributions are implemented here so a
// given (seed, stream) pair produces the same values on every platform; the
// standard library distributions are implementation-defined and would break
// byte-identical reruns across toolchains.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) {
    std::uint64_t x = seed;
    for (auto& si : s_) {
      x += 0x9E3779B97F4A7C15ULL;
      std::uint64_t z = x;
      z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
      z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
      si = z ^ (z >> 31);
    }
  }

  std::uint64_t next_u64() {
    const std::uint64_t result = rotl(s_[1] * 5, 7) * 9;
    const std::uint64_t t = s_[1] << 17;
    s_[2] ^= s_[0];
    s_[3] ^= s_[1];
    s_[1] ^= s_[2];
    s_[0] ^= s_[3];
    s_[2] ^= t;
    s_[3] = rotl(s_[3], 45);
    return result;
  }

  // uniform in [0,1)
  double uniform01() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

  // uniform integer in [0, n)
  std::uint64_t below(std::uint64_t n) {
    CSEG_CHECK(n > 0, "Rng::below: n must be positive");
    // rejection sampling on the top bits keeps the draw unbiased
    std::uint64_t threshold = (~n + 1) % n;
    for (;;) {
      std::uint64_t r = next_u64();
      if (r >= threshold) return r % n;
    }
  }

  int uniform_int(int lo, int hi) {  // inclusive bounds
    CSEG_CHECK(hi >= lo, "Rng::uniform_int: empty range");
    return lo + static_cast<int>(below(static_cast<std::uint64_t>(hi - lo) + 1));
  }

  bool bernoulli(double p) { return uniform01() < p; }

  // Box-Muller; caches the second variate.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = uniform01();
    double u2 = uniform01();
    if (u1 < 1e-300) u1 = 1e-300;
    double mag = std::sqrt(-2.0 * std::log(u1));
    double ang = 6.283185307179586476925286766559 * u2;
    spare_ = mag * std::sin(ang);
    has_spare_ = true;
    return mag * std::cos(ang);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  // Fisher-Yates sample of k distinct indices from [0, n), in draw order.
  std::vector<int> sample_without_replacement(int n, int k) {
    CSEG_CHECK(k >= 0 && k <= n, "sample_without_replacement: k out of range");
    std::vector<int> idx(n);
    for (int i = 0; i < n; ++i) idx[i] = i;
    for (int i = 0; i < k; ++i) {
      int j = i + static_cast<int>(below(static_cast<std::uint64_t>(n - i)));
      std::swap(idx[i], idx[j]);
    }
    idx.resize(k);
    return idx;
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::size_t j = static_cast<std::size_t>(below(i));
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  static std::uint64_t rotl(std::uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }
  std::uint64_t s_[4];
  bool has_spare_ = false;
  double spare_ = 0.0;
};

// Named sub-streams let components re-run independently yet reproducibly: the
// stream for "train" is the same no matter what "phantom" consumed before it.
inline Rng named_stream(std::uint64_t root_seed, const std::string& name) {
  std::uint64_t h = fnv1a64(name.data(), name.size());
  return Rng(root_seed ^ h);
}

}  // namespace counterseg

#endif
