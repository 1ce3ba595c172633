#pragma once

// Shared error taxonomy, deterministic RNG, and small shape utilities used
// across the library.

#include <cstdint>
#include <cmath>
#include <numeric>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace hynet {

// ---------------------------------------------------------------------------
// Errors. Each maps to one contract-failure family; constructors take a
// preformatted message so call sites can name the offending axes/paths.
// ---------------------------------------------------------------------------

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct DimensionError : Error { using Error::Error; };      // shape mismatch
struct ContractError : Error { using Error::Error; };       // API precondition
struct StateError : Error { using Error::Error; };          // bad object state
struct NumericError : Error { using Error::Error; };        // non-finite input
struct DomainError : Error { using Error::Error; };         // math domain
struct ConfigurationError : Error { using Error::Error; };  // bad config value
struct FormatError : Error { using Error::Error; };         // bad file format
struct LengthError : Error { using Error::Error; };         // truncated payload
struct ConsistencyError : Error { using Error::Error; };    // cross-file mismatch
struct TrainingError : Error { using Error::Error; };       // optimizer abort
struct IoError : Error { using Error::Error; };             // file I/O

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& s) {
  std::size_t n = 1;
  for (std::size_t d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

template <class... Parts>
std::string msg(Parts&&... parts) {
  std::ostringstream os;
  (os << ... << parts);
  return os.str();
}

inline bool all_finite(const std::vector<double>& v) {
  for (double x : v)
    if (!std::isfinite(x)) return false;
  return true;
}

// ---------------------------------------------------------------------------
// Deterministic RNG. Own uniform/normal transforms on top of mt19937_64 so
// streams are bit-identical across standard libraries and platforms.
// ---------------------------------------------------------------------------

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : eng_(seed) {}

  // Uniform in [0, 1) with 53-bit resolution.
  double uniform() { return static_cast<double>(eng_() >> 11) * 0x1.0p-53; }

  // Uniform in [lo, hi).
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Standard normal via Box-Muller; second deviate cached.
  double normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1 = uniform(), u2 = uniform();
    // Guard log(0); 1-u1 is in (0, 1].
    double r = std::sqrt(-2.0 * std::log(1.0 - u1));
    double theta = 2.0 * 3.14159265358979323846 * u2;
    spare_ = r * std::sin(theta);
    have_spare_ = true;
    return r * std::cos(theta);
  }

  // Integer in [0, n). Modulo bias is irrelevant for shuffling here and the
  // result is deterministic, which is what matters.
  std::uint64_t integer(std::uint64_t n) { return eng_() % n; }

  std::uint64_t raw() { return eng_(); }

 private:
  std::mt19937_64 eng_;
  bool have_spare_ = false;
  double spare_ = 0.0;
};

// Mix two seeds into one (splitmix64 finalizer), e.g. (run seed, epoch index).
inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
  std::uint64_t z = a + 0x9e3779b97f4a7c15ULL * (b + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

// Deterministic Fisher-Yates permutation of 0..n-1.
inline std::vector<std::size_t> random_permutation(std::size_t n, Rng& rng) {
  std::vector<std::size_t> p(n);
  std::iota(p.begin(), p.end(), std::size_t{0});
  for (std::size_t i = n; i > 1; --i) {
    std::size_t j = static_cast<std::size_t>(rng.integer(i));
    std::swap(p[i - 1], p[j]);
  }
  return p;
}

}  // namespace hynet
