#pragma once

#include <cmath>
#include <random>
#include <sstream>
#include <string>

#include "odg/common.hpp"

namespace odg {

/// Seeded RNG used everywhere randomness is needed. Wraps mt19937_64 and adds
/// the distribution helpers the project needs, implemented by hand so the
/// stream of values is identical across standard libraries.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  // Uniform in [0, 1).
  double uniform() {
    return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n).
  std::uint64_t uniform_index(std::uint64_t n) {
    // rejection sampling keeps the draw unbiased
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    std::uint64_t v;
    do {
      v = engine_();
    } while (v >= limit);
    return v % n;
  }

  // Box-Muller; one value per call (the pair's partner is discarded to keep
  // the stream position a simple function of call count).
  double normal(double mean = 0.0, double stddev = 1.0) {
    double u1 = uniform();
    double u2 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    return mean + stddev * r * std::cos(2.0 * M_PI * u2);
  }

  double lognormal(double mu, double sigma) { return std::exp(normal(mu, sigma)); }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::size_t j = static_cast<std::size_t>(uniform_index(i));
      std::swap(v[i - 1], v[j]);
    }
  }

  std::string serialize() const {
    std::ostringstream out;
    out << engine_;
    return out.str();
  }

  static Rng deserialize(const std::string& state) {
    Rng r;
    std::istringstream in(state);
    in >> r.engine_;
    if (in.fail()) throw IoError("malformed RNG state string");
    return r;
  }

 private:
  std::mt19937_64 engine_;
};

}  // namespace odg
