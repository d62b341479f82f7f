#ifndef COUNTERSEG_COMMON_HPP
#define COUNTERSEG_COMMON_HPP

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <functional>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace counterseg {

// Precondition/validation failures -> std::invalid_argument (CLI exit 2).
// Runtime failures (divergence, I/O) -> std::runtime_error (CLI exit 3).
#define CSEG_CHECK(cond, msg)                              \
  do {                                                     \
    if (!(cond)) throw std::invalid_argument(std::string("counterseg: ") + (msg)); \
  } while (0)

#define CSEG_RUNTIME_CHECK(cond, msg)                      \
  do {                                                     \
    if (!(cond)) throw std::runtime_error(std::string("counterseg: ") + (msg)); \
  } while (0)

inline int thread_cap() {
  static int cap = [] {
    if (const char* env = std::getenv("COUNTERSEG_THREADS")) {
      int v = std::atoi(env);
      if (v > 0) return v;
    }
    unsigned hw = std::thread::hardware_concurrency();
    return hw == 0 ? 1 : static_cast<int>(hw);
  }();
  return cap;
}

// Static block partition; every index is computed by exactly one worker, so
// results are bit-identical for any thread count. work_hint is an estimate of
// total scalar operations: small jobs run serially to skip thread spawns.
inline void parallel_for(std::int64_t n, const std::function<void(std::int64_t, std::int64_t)>& body,
                         std::int64_t grain = 1, std::int64_t work_hint = 1 << 30) {
  if (n <= 0) return;
  if (work_hint < (1 << 21)) {
    body(0, n);
    return;
  }
  int threads = thread_cap();
  std::int64_t max_workers = std::max<std::int64_t>(1, n / std::max<std::int64_t>(1, grain));
  int workers = static_cast<int>(std::min<std::int64_t>(threads, max_workers));
  if (workers <= 1) {
    body(0, n);
    return;
  }
  std::vector<std::thread> pool;
  pool.reserve(workers - 1);
  std::int64_t chunk = (n + workers - 1) / workers;
  for (int w = 1; w < workers; ++w) {
    std::int64_t lo = w * chunk;
    std::int64_t hi = std::min<std::int64_t>(n, lo + chunk);
    if (lo >= hi) break;
    pool.emplace_back([&body, lo, hi] { body(lo, hi); });
  }
  body(0, std::min<std::int64_t>(n, chunk));
  for (auto& t : pool) t.join();
}

// FNV-1a 64-bit; used for file checksums in manifests.
inline std::uint64_t fnv1a64(const void* data, std::size_t len) {
  const auto* p = static_cast<const unsigned char*>(data);
  std::uint64_t h = 1469598103934665603ULL;
  for (std::size_t i = 0; i < len; ++i) {
    h ^= p[i];
    h *= 1099511628211ULL;
  }
  return h;
}

inline std::string checksum_hex(const void* data, std::size_t len) {
  static const char* digits = "0123456789abcdef";
  std::uint64_t h = fnv1a64(data, len);
  std::string out(16, '0');
  for (int i = 15; i >= 0; --i) {
    out[i] = digits[h & 0xF];
    h >>= 4;
  }
  return out;
}

inline bool nearly_equal(double a, double b, double tol) { return std::abs(a - b) <= tol; }

}  // namespace counterseg

#endif
