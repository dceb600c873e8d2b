#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <random>

namespace eqtrack {

// Deterministic RNG wrapper. std::mt19937_64 output is pinned by the standard,
// but the standard distributions are not; all sampling here is hand-rolled so
// that a seed produces identical streams on every platform.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : gen_(seed) {}

  // uniform in [0, 1)
  double uniform() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // standard normal, Box-Muller with one cached value
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u = 1.0 - uniform();  // (0, 1]
    double r = std::sqrt(-2.0 * std::log(u));
    double t = 2.0 * M_PI * uniform();
    spare_ = r * std::sin(t);
    has_spare_ = true;
    return r * std::cos(t);
  }

  int uniform_int(int n) {  // in [0, n)
    int v = static_cast<int>(uniform() * n);
    return v < n ? v : n - 1;
  }

  std::array<double, 3> unit_vector() {
    while (true) {
      double x = uniform(-1, 1), y = uniform(-1, 1), z = uniform(-1, 1);
      double n2 = x * x + y * y + z * z;
      if (n2 > 1e-12 && n2 <= 1.0) {
        double n = std::sqrt(n2);
        return {x / n, y / n, z / n};
      }
    }
  }

  std::uint64_t raw() { return gen_(); }

 private:
  std::mt19937_64 gen_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

}  // namespace eqtrack
