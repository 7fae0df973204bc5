#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string_view>
#include <vector>

namespace fieldreg {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t fnv1a64(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return h;
}

/// Derives the seed for one pipeline stage (and optionally one sample within it)
/// from the master seed. Each stage gets an independent, reproducible stream.
inline std::uint64_t stage_seed(std::uint64_t master, std::string_view stage,
                                std::uint64_t index = 0) {
  std::uint64_t h = splitmix64(master ^ fnv1a64(stage));
  return splitmix64(h + 0x9e3779b97f4a7c15ULL * (index + 1));
}

/// Percent point function of the standard normal. Rational initial guess
/// (Acklam's coefficients) followed by one Newton step through erfc, which
/// brings the CDF residual to machine precision. The upper half folds onto
/// the lower half (1-p is exact there), so the refinement always runs where
/// the CDF is well conditioned and antisymmetry holds bit for bit.
inline double inverse_normal_cdf(double p) {
  if (!(p > 0.0 && p < 1.0))
    throw std::invalid_argument("inverse_normal_cdf: p must lie strictly in (0,1)");
  if (p == 0.5) return 0.0;
  if (p > 0.5) return -inverse_normal_cdf(1.0 - p);

  static constexpr double a[6] = {-3.969683028665376e+01, 2.209460984245205e+02,
                                  -2.759285104469687e+02, 1.383577518672690e+02,
                                  -3.066479806614716e+01, 2.506628277459239e+00};
  static constexpr double b[5] = {-5.447609879822406e+01, 1.615858368580409e+02,
                                  -1.556989798598866e+02, 6.680131188771972e+01,
                                  -1.328068155288572e+01};
  static constexpr double c[6] = {-7.784894002430293e-03, -3.223964580411365e-01,
                                  -2.400758277161838e+00, -2.549732539343734e+00,
                                  4.374664141464968e+00,  2.938163982698783e+00};
  static constexpr double d[4] = {7.784695709041462e-03, 3.224671290700398e-01,
                                  2.445134137142996e+00, 3.754408661907416e+00};
  constexpr double p_low = 0.02425;

  double x;
  if (p < p_low) {
    double q = std::sqrt(-2.0 * std::log(p));
    x = (((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
        ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
  } else {
    double q = p - 0.5;
    double r = q * q;
    x = (((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]) * q /
        (((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1.0);
  }

  double cdf = 0.5 * std::erfc(-x / std::sqrt(2.0));
  double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * 3.14159265358979323846);
  x -= (cdf - p) / pdf;
  return x;
}

/// Deterministic random stream. All value mappings are spelled out here instead
/// of going through std distributions, whose algorithms vary between standard
/// library implementations.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : eng_(seed) {}

  std::uint64_t bits() { return eng_(); }

  /// Uniform double in the open interval (0,1).
  double uniform01() {
    return (static_cast<double>(eng_() >> 11) + 0.5) * 0x1.0p-53;
  }

  double normal() { return inverse_normal_cdf(uniform01()); }

  /// Unbiased integer in [0, n) by rejection.
  std::uint64_t below(std::uint64_t n) {
    if (n == 0) throw std::invalid_argument("Rng::below: n must be positive");
    std::uint64_t limit = ~std::uint64_t{0} - ~std::uint64_t{0} % n;
    std::uint64_t v;
    do {
      v = eng_();
    } while (v >= limit);
    return v % n;
  }

  /// Fisher-Yates shuffle with the rejection sampler above.
  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::size_t j = static_cast<std::size_t>(below(i));
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  std::mt19937_64 eng_;
};

}  // namespace fieldreg
