#pragma once

#include <atomic>
#include <charconv>
#include <cstdint>
#include <cstdio>
#include <functional>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

namespace odeforge {

/// Loss value assigned to candidates whose evaluation diverged or went
/// non-finite. Large enough to lose against any genuine fit, small enough
/// that arithmetic on it stays finite.
inline constexpr double kSentinelLoss = 1e10;

/// Clipping bound for behaviour-signature statistics.
inline constexpr double kSignatureClip = 1e10;

/// Floor applied inside logarithms of squared distances / probabilities.
inline constexpr double kLogFloor = 1e-12;

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

#define ODEFORGE_DEFINE_ERROR(NAME)   \
  struct NAME : Error {               \
    using Error::Error;               \
  }

ODEFORGE_DEFINE_ERROR(ParseError);
ODEFORGE_DEFINE_ERROR(AmbiguityError);
ODEFORGE_DEFINE_ERROR(IncompleteDerivation);
ODEFORGE_DEFINE_ERROR(LengthError);
ODEFORGE_DEFINE_ERROR(DecodeOverflow);
ODEFORGE_DEFINE_ERROR(ShapeError);
ODEFORGE_DEFINE_ERROR(DataError);
ODEFORGE_DEFINE_ERROR(DegenerateLabels);
ODEFORGE_DEFINE_ERROR(ImplicitUnsolvable);
ODEFORGE_DEFINE_ERROR(SolverDiverged);
ODEFORGE_DEFINE_ERROR(FitError);
ODEFORGE_DEFINE_ERROR(ZeroReference);
ODEFORGE_DEFINE_ERROR(EmptyOperator);
ODEFORGE_DEFINE_ERROR(ExhaustedPopulation);
ODEFORGE_DEFINE_ERROR(PredictorShapeError);
ODEFORGE_DEFINE_ERROR(TimeOverflow);
ODEFORGE_DEFINE_ERROR(IoError);

#undef ODEFORGE_DEFINE_ERROR

using Rng = std::mt19937_64;

/// splitmix64 finalizer; used to derive independent sub-seeds.
inline std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
  return mix64(a ^ mix64(b));
}

inline std::uint64_t fnv1a64(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

/// Shortest round-trip decimal rendering; locale independent, so files
/// produced under the same seed compare byte-identical.
inline std::string format_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

inline std::string format_fixed(double v, int digits) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.*f", digits, v);
  return std::string(buf);
}

/// Deterministic parallel map: body(i) must depend only on i. Results are
/// placed by index, so the outcome is identical for any thread count.
inline void parallel_for(std::size_t n, int threads,
                         const std::function<void(std::size_t)>& body) {
  if (threads <= 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) body(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (;;) {
      std::size_t i = next.fetch_add(1);
      if (i >= n) return;
      body(i);
    }
  };
  std::vector<std::thread> pool;
  int count = std::min<std::size_t>(static_cast<std::size_t>(threads), n);
  pool.reserve(count);
  for (int i = 0; i < count; ++i) pool.emplace_back(worker);
  for (auto& t : pool) t.join();
}

inline double uniform(Rng& rng, double lo, double hi) {
  std::uniform_real_distribution<double> dist(lo, hi);
  return dist(rng);
}

}  // namespace odeforge
