#ifndef REMIC_RNG_HPP
#define REMIC_RNG_HPP

#include <cmath>
#include <cstdint>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>

namespace remic {

// Deterministic random source. All sampling (weights, masks, style priors,
// data synthesis) goes through this class instead of std distributions, whose
// internal state is not portable and would break bit-exact checkpoint resume.
class Rng {
 public:
  explicit Rng(uint64_t seed = 0) : eng_(seed) {}

  // Uniform in [0, 1).
  double uniform() {
    return static_cast<double>(eng_() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Standard normal via Box-Muller. No cached second value, so the engine
  // state alone captures the full sampler state.
  double normal() {
    double u1 = 0.0;
    do {
      u1 = uniform();
    } while (u1 <= 0.0);
    double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
  }

  // Uniform integer in [0, n). Rejection sampling to avoid modulo bias.
  int uniform_int(int n) {
    if (n <= 0) throw std::invalid_argument("Rng::uniform_int: n must be > 0");
    uint64_t un = static_cast<uint64_t>(n);
    uint64_t limit = UINT64_MAX - UINT64_MAX % un;
    uint64_t v;
    do {
      v = eng_();
    } while (v >= limit);
    return static_cast<int>(v % un);
  }

  // mt19937_64 textual state is specified by the standard, hence portable.
  std::string state() const {
    std::ostringstream os;
    os << eng_;
    return os.str();
  }

  void set_state(const std::string& s) {
    std::istringstream is(s);
    is >> eng_;
    if (is.fail()) throw std::runtime_error("Rng::set_state: malformed state string");
  }

 private:
  std::mt19937_64 eng_;
};

// Stable mix for deriving per-item seeds (sample index, domain index) from a
// base seed without correlated streams.
inline uint64_t mix_seed(uint64_t a, uint64_t b) {
  uint64_t x = a + 0x9e3779b97f4a7c15ULL + (b << 13);
  x ^= x >> 30;
  x *= 0xbf58476d1ce4e5b9ULL;
  x ^= x >> 27;
  x *= 0x94d049bb133111ebULL;
  x ^= x >> 31;
  return x;
}

}  // namespace remic

#endif
