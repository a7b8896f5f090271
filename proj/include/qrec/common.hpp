// Shared plumbing: error types, logging, hashing, deterministic RNG.
#pragma once

#include <cstdint>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace qrec {

using Real = double;

// Error taxonomy. The CLI maps these onto exit codes; library code just throws.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ParseError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ContractError : std::logic_error {
  using std::logic_error::logic_error;
};
struct DependencyError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct TrainingError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

namespace detail {
inline void msg_cat(std::ostringstream&) {}
template <class T, class... Rest>
void msg_cat(std::ostringstream& os, const T& head, const Rest&... rest) {
  os << head;
  msg_cat(os, rest...);
}
template <class... Args>
std::string msg(const Args&... args) {
  std::ostringstream os;
  msg_cat(os, args...);
  return os.str();
}
}  // namespace detail

#define QREC_CHECK(cond, ...)                                  \
  do {                                                         \
    if (!(cond))                                               \
      throw ::qrec::ContractError(::qrec::detail::msg(         \
          "check failed (" #cond "): ", __VA_ARGS__));         \
  } while (0)

// ---------------------------------------------------------------------------
// Logging. Verbosity comes from the QREC_LOG env var (error|warn|info|debug).

enum class LogLevel { kError = 0, kWarn = 1, kInfo = 2, kDebug = 3 };

LogLevel log_level();
void log_line(LogLevel lvl, const std::string& text);

template <class... Args>
void log_error(const Args&... args) {
  log_line(LogLevel::kError, detail::msg(args...));
}
template <class... Args>
void log_warn(const Args&... args) {
  log_line(LogLevel::kWarn, detail::msg(args...));
}
template <class... Args>
void log_info(const Args&... args) {
  log_line(LogLevel::kInfo, detail::msg(args...));
}
template <class... Args>
void log_debug(const Args&... args) {
  log_line(LogLevel::kDebug, detail::msg(args...));
}

// ---------------------------------------------------------------------------
// Hashing (FNV-1a, 64-bit). Used for artifact fingerprints and manifests.

uint64_t fnv1a64(const void* data, size_t len, uint64_t seed = 0xcbf29ce484222325ull);
uint64_t fnv1a64_str(const std::string& s, uint64_t seed = 0xcbf29ce484222325ull);
uint64_t hash_file(const std::string& path);  // throws IoError
std::string to_hex(uint64_t h);

// splitmix64 finalizer; also the basis of the counter-based dropout stream.
uint64_t mix64(uint64_t x);
// Stateless uniform in [0,1) keyed by (seed, step, tensor_id, element index).
Real counter_uniform(uint64_t seed, uint64_t step, uint64_t tensor_id, uint64_t index);

// ---------------------------------------------------------------------------
// Deterministic RNG. mt19937_64 is specified bit-exactly by the standard; the
// distributions are not, so we roll our own on top of the raw stream.

class Rng {
 public:
  explicit Rng(uint64_t seed) : eng_(seed) {}

  uint64_t next_u64() { return eng_(); }

  // [0,1) with 53 bits of resolution
  Real uniform() { return static_cast<Real>(next_u64() >> 11) * 0x1.0p-53; }

  // [0,n), unbiased via rejection
  int64_t uniform_int(int64_t n) {
    QREC_CHECK(n > 0, "uniform_int needs n>0, got ", n);
    const uint64_t un = static_cast<uint64_t>(n);
    const uint64_t limit = UINT64_MAX - UINT64_MAX % un;
    uint64_t r;
    do {
      r = next_u64();
    } while (r >= limit);
    return static_cast<int64_t>(r % un);
  }

  // [lo,hi] inclusive
  int64_t uniform_range(int64_t lo, int64_t hi) {
    QREC_CHECK(hi >= lo, "bad range [", lo, ",", hi, "]");
    return lo + uniform_int(hi - lo + 1);
  }

  Real normal() {
    // Box-Muller, one value per call so the stream layout stays obvious.
    Real u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const Real u2 = uniform();
    constexpr Real two_pi = 6.283185307179586476925286766559;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(two_pi * u2);
  }

  template <class T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      const size_t j = static_cast<size_t>(uniform_int(static_cast<int64_t>(i)));
      std::swap(v[i - 1], v[j]);
    }
  }

  // Derive an independent child stream (per-epoch, per-level, ...).
  Rng fork(uint64_t stream) { return Rng(mix64(next_u64() ^ mix64(stream))); }

 private:
  std::mt19937_64 eng_;
};

}  // namespace qrec
