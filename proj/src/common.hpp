#pragma once

#include <complex>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>

#include <Eigen/Dense>

namespace semkb {

using rmat = Eigen::MatrixXd;
using rvec = Eigen::VectorXd;
using cmat = Eigen::MatrixXcd;
using cvec = Eigen::VectorXcd;
using cplx = std::complex<double>;

// Error kinds; the C API maps these onto status codes, the CLI onto exit codes.
enum class errc {
  config,            // bad configuration value or file
  invalid_input,     // precondition on data violated
  shape,             // dimension mismatch
  numeric,           // non-finite values, degenerate distributions
  vocab,             // token id out of range
  context_overflow,  // sequence longer than backbone context
  state,             // operation out of order (e.g. backward before forward)
  generation,        // text backend failed
  empty_generation,  // backend produced nothing usable
  metric,            // metric undefined on this input
  format,            // malformed file
  backend,           // remote backend unreachable / non-200
  io                 // filesystem failure
};

class error : public std::runtime_error {
 public:
  error(errc kind, const std::string& msg) : std::runtime_error(msg), kind_(kind) {}
  errc kind() const { return kind_; }

 private:
  errc kind_;
};

[[noreturn]] inline void fail(errc kind, const std::string& msg) { throw error(kind, msg); }

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Named sub-stream derivation: subsystems (channel noise, text generation,
// data shuffling, ...) get independent seeds from one experiment seed, so
// toggling a feature that consumes randomness cannot shift the draws seen
// by unrelated code.
inline std::uint64_t derive_seed(std::uint64_t seed, std::string_view tag, std::uint64_t salt = 0) {
  std::uint64_t h = 1469598103934665603ULL;  // FNV-1a over the tag
  for (char c : tag) {
    h ^= static_cast<unsigned char>(c);
    h *= 1099511628211ULL;
  }
  return splitmix64(splitmix64(seed ^ h) ^ splitmix64(salt ^ 0x6b79u));
}

// mt19937_64 with hand-rolled output maps: std::uniform_real_distribution and
// friends are not bit-stable across standard libraries, and reproducibility
// down to the bit is a contract here.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : gen_(splitmix64(seed ^ 0x5eedULL)) {}

  std::uint64_t next_u64() { return gen_(); }

  // uniform in [0, 1)
  double uniform() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

  // uniform in [lo, hi)
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // unbiased integer in [0, n)
  std::uint64_t below(std::uint64_t n) {
    if (n == 0) fail(errc::invalid_input, "Rng::below: n must be positive");
    const std::uint64_t limit = n * ((~std::uint64_t{0}) / n);
    std::uint64_t v;
    do {
      v = gen_();
    } while (v >= limit);
    return v % n;
  }

  // standard normal via Box-Muller (pair cached)
  double gaussian() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    const double u1 = 1.0 - uniform();  // (0, 1]
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double a = 2.0 * M_PI * u2;
    spare_ = r * std::sin(a);
    have_spare_ = true;
    return r * std::cos(a);
  }

  // CN(0, var): total variance split evenly between components
  cplx cgaussian(double var) {
    const double s = std::sqrt(var * 0.5);
    const double re = s * gaussian();
    const double im = s * gaussian();
    return {re, im};
  }

 private:
  std::mt19937_64 gen_;
  bool have_spare_ = false;
  double spare_ = 0.0;
};

inline bool all_finite(const rmat& m) { return m.allFinite(); }
inline bool all_finite(const cmat& m) { return m.allFinite(); }

}  // namespace semkb
