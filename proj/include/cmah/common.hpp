#pragma once

#include <Eigen/Core>
#include <atomic>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace cmah {

// Repo-wide floating precision. Everything numeric runs in 64-bit; file
// formats that store f32/u8 (dataset container) quantize on write only.
using Scalar = double;
using Array = Eigen::ArrayXd;
using RowMat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// Error taxonomy, mapped to CLI exit codes by tools/cmah_main.cpp:
//   UsageError -> 2, FormatError -> 3, NumericError -> 4.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct FormatError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Deterministic RNG wrapper. All draws go through hand-rolled transforms so
// results do not depend on libstdc++ distribution internals.
class Rng {
 public:
  explicit Rng(uint64_t seed) : eng_(seed) {}

  uint64_t next_u64() { return eng_(); }

  // Uniform in [0, 1) with 53 random bits.
  double uniform01() { return static_cast<double>(eng_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

  // Uniform integer in [0, n), rejection-sampled to avoid modulo bias.
  int uniform_int(int n) {
    if (n <= 0) throw std::invalid_argument("Rng::uniform_int: n must be positive");
    const uint64_t un = static_cast<uint64_t>(n);
    const uint64_t limit = UINT64_MAX - UINT64_MAX % un;
    uint64_t x;
    do {
      x = eng_();
    } while (x >= limit);
    return static_cast<int>(x % un);
  }

  // Marsaglia polar method, deterministic given the uniform stream.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u, v, s;
    do {
      u = 2.0 * uniform01() - 1.0;
      v = 2.0 * uniform01() - 1.0;
      s = u * u + v * v;
    } while (s >= 1.0 || s == 0.0);
    const double f = std::sqrt(-2.0 * std::log(s) / s);
    spare_ = v * f;
    has_spare_ = true;
    return u * f;
  }

  double normal(double mu, double sigma) { return mu + sigma * normal(); }

  // Truncated normal, resampling outside [-2 sigma, 2 sigma].
  double trunc_normal(double sigma) {
    double x;
    do {
      x = normal();
    } while (x < -2.0 || x > 2.0);
    return x * sigma;
  }

  // Fisher-Yates permutation of {0..n-1}.
  std::vector<int> permutation(int n) {
    std::vector<int> p(n);
    for (int i = 0; i < n; ++i) p[i] = i;
    for (int i = n - 1; i > 0; --i) {
      const int j = uniform_int(i + 1);
      std::swap(p[i], p[j]);
    }
    return p;
  }

 private:
  std::mt19937_64 eng_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

// splitmix64 step, used to derive sub-seeds from (seed, stream, index, ...).
inline uint64_t seed_mix(uint64_t a, uint64_t b) {
  uint64_t z = a + 0x9e3779b97f4a7c15ULL + b;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

inline uint64_t seed_mix(uint64_t a, uint64_t b, uint64_t c) {
  return seed_mix(seed_mix(a, b), c);
}

// Worker-thread budget, bounded by the CMAH_THREADS environment variable.
int worker_threads();

// Runs fn(i) for i in [0, n) on up to worker_threads() threads. Each call must
// write only its own output slot; then scheduling order cannot affect results.
template <typename Fn>
void parallel_for(int64_t n, Fn&& fn) {
  const int threads = static_cast<int>(std::min<int64_t>(worker_threads(), n));
  if (threads <= 1) {
    for (int64_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<int64_t> next{0};
  std::vector<std::thread> pool;
  pool.reserve(threads);
  for (int t = 0; t < threads; ++t) {
    pool.emplace_back([&]() {
      for (int64_t i; (i = next.fetch_add(1)) < n;) fn(i);
    });
  }
  for (auto& th : pool) th.join();
}

}  // namespace cmah
