#pragma once

#include <atomic>
#include <charconv>
#include <cstdint>
#include <mutex>
#include <random>
#include <stdexcept>
#include <string>
#include <system_error>
#include <thread>
#include <vector>

namespace fairtest {

// ---------------------------------------------------------------------------
// Errors
// ---------------------------------------------------------------------------

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct DimensionMismatch : Error { using Error::Error; };
struct NonFiniteGradient : Error { using Error::Error; };
struct Divergence : Error { using Error::Error; };
struct BadLayer : Error { using Error::Error; };
struct SchemaMismatch : Error { using Error::Error; };
struct ParseError : Error { using Error::Error; };
struct EmptyDataset : Error { using Error::Error; };
struct EmptyPairs : Error { using Error::Error; };
struct NoDiscrimination : Error { using Error::Error; };
struct NoBiasProfile : Error { using Error::Error; };
struct EmptySeedSet : Error { using Error::Error; };
struct DivideByZero : Error { using Error::Error; };
struct LengthMismatch : Error { using Error::Error; };
struct TooFewValues : Error { using Error::Error; };
struct ConfigError : Error { using Error::Error; };

// ---------------------------------------------------------------------------
// Seeded RNG streams
//
// Every randomized routine draws from its own stream derived from (seed,
// stream tag, index) so that per-seed work units are independent of worker
// count and merge order.
// ---------------------------------------------------------------------------

using Rng = std::mt19937_64;

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

enum class Stream : std::uint64_t {
  kWeightInit = 1,
  kTraining,
  kKMeans,
  kSplit,
  kGlobalPhase,
  kLocalPhase,
  kBaselinePhase,
  kImagePhase,
  kDmRs,
  kRetrain,
};

inline Rng derive_rng(std::uint64_t seed, Stream stream, std::uint64_t index = 0) {
  std::uint64_t s = splitmix64(seed);
  s = splitmix64(s ^ splitmix64(static_cast<std::uint64_t>(stream)));
  s = splitmix64(s ^ splitmix64(index));
  return Rng(s);
}

// ---------------------------------------------------------------------------
// Formatting / hashing
// ---------------------------------------------------------------------------

// Shortest decimal form that round-trips the exact double value.
inline std::string format_double(double v) {
  char buf[32];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

inline std::uint64_t fnv1a(const void* data, std::size_t n,
                           std::uint64_t h = 0xcbf29ce484222325ULL) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::string to_hex(std::uint64_t v) {
  static const char* digits = "0123456789abcdef";
  std::string out(16, '0');
  for (int i = 15; i >= 0; --i) {
    out[i] = digits[v & 0xf];
    v >>= 4;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Deterministic parallel map
//
// fn(i) must only write state owned by index i; results are merged by the
// caller in index order, so output never depends on the worker count.
// ---------------------------------------------------------------------------

template <typename Fn>
void parallel_for(std::size_t n, int workers, Fn&& fn) {
  if (workers <= 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr first_error;
  std::mutex error_mutex;
  auto run = [&] {
    for (;;) {
      std::size_t i = next.fetch_add(1);
      if (i >= n) return;
      try {
        fn(i);
      } catch (...) {
        std::lock_guard<std::mutex> lock(error_mutex);
        if (!first_error) first_error = std::current_exception();
        return;
      }
    }
  };
  std::vector<std::thread> pool;
  int count = std::min<std::size_t>(static_cast<std::size_t>(workers), n);
  pool.reserve(count);
  for (int w = 0; w < count; ++w) pool.emplace_back(run);
  for (auto& t : pool) t.join();
  if (first_error) std::rethrow_exception(first_error);
}

}  // namespace fairtest
