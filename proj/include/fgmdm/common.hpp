#pragma once

// Shared plumbing: error types, deterministic RNG, string hashing.

#include <cmath>
#include <cstdint>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>

namespace fgmdm {

inline constexpr const char* kVersion = "0.1.0";

// ---------------------------------------------------------------------------
// Errors
// ---------------------------------------------------------------------------

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Precondition or invariant violation (bad shapes, out-of-range arguments).
class ContractError : public Error {
 public:
  using Error::Error;
};

/// Invalid or inconsistent configuration values.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Filesystem failures; message carries the offending path.
class IoError : public Error {
 public:
  using Error::Error;
};

/// Malformed input text; carries a 1-based line number when known.
class ParseError : public Error {
 public:
  explicit ParseError(const std::string& what, int line = 0)
      : Error(line > 0 ? "line " + std::to_string(line) + ": " + what : what),
        line_(line) {}
  int line() const noexcept { return line_; }

 private:
  int line_ = 0;
};

/// Data that parses but violates a documented invariant.
class ValidationError : public Error {
 public:
  using Error::Error;
};

/// Unrecognized binary container (bad magic or corrupted layout).
class FormatError : public Error {
 public:
  using Error::Error;
};

/// Container version newer than this build understands.
class VersionError : public Error {
 public:
  using Error::Error;
};

/// Network failure after retries were exhausted.
class TransportError : public Error {
 public:
  using Error::Error;
};

/// Non-finite values where finite ones are required (diverged training etc).
class NumericError : public Error {
 public:
  using Error::Error;
};

// ---------------------------------------------------------------------------
// Hashing (stable across platforms; used for text features, cache keys, seeds)
// ---------------------------------------------------------------------------

inline std::uint64_t fnv1a64(std::string_view s,
                             std::uint64_t seed = 14695981039346656037ull) {
  std::uint64_t h = seed;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

inline std::uint64_t mix64(std::uint64_t x) {
  // splitmix64 finalizer
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

/// Derives an independent stream seed from a base seed and up to two indices.
inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t a,
                                 std::uint64_t b = 0) {
  return mix64(base ^ mix64(a + 0x9e3779b97f4a7c15ull * (b + 1)));
}

// ---------------------------------------------------------------------------
// RNG
// ---------------------------------------------------------------------------

/// Deterministic RNG with a portable gaussian (Box-Muller, cached spare).
/// std::normal_distribution is implementation-defined, so we roll our own
/// transform on top of mt19937_64 to keep streams identical everywhere.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : gen_(seed) {}

  std::uint64_t next_u64() { return gen_(); }

  /// Uniform in [0, 1) with 53 random bits.
  double uniform() {
    return static_cast<double>(gen_() >> 11) * (1.0 / 9007199254740992.0);
  }

  /// Uniform integer in [lo, hi] inclusive. Modulo bias is irrelevant here;
  /// determinism is what matters.
  int uniform_int(int lo, int hi) {
    if (hi < lo) throw ContractError("uniform_int: empty range");
    const std::uint64_t span = static_cast<std::uint64_t>(hi - lo) + 1;
    return lo + static_cast<int>(gen_() % span);
  }

  /// Standard normal.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    const double u1 = 1.0 - uniform();  // (0, 1]
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * 3.14159265358979323846 * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return r * std::cos(theta);
  }

  double normal(double mu, double sigma) { return mu + sigma * normal(); }

  /// Serializes the full state (engine + gaussian spare) as text.
  std::string save_state() const {
    std::ostringstream os;
    os << gen_ << " " << (has_spare_ ? 1 : 0);
    if (has_spare_) {
      os << " " << std::hexfloat << spare_;
    }
    return os.str();
  }

  void load_state(const std::string& s) {
    std::istringstream is(s);
    is >> gen_;
    int flag = 0;
    is >> flag;
    has_spare_ = flag != 0;
    if (has_spare_) {
      // hexfloat round trip via strtod; istream hexfloat parsing is flaky
      std::string tok;
      is >> tok;
      spare_ = std::strtod(tok.c_str(), nullptr);
    }
    if (is.fail()) throw FormatError("rng state: malformed");
  }

 private:
  std::mt19937_64 gen_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace fgmdm
