#pragma once

#include <cmath>
#include <cstdint>
#include <numeric>
#include <utility>
#include <vector>

#include "fieldreg/errors.hpp"
#include "fieldreg/field.hpp"
#include "fieldreg/rng.hpp"

namespace fieldreg {

/// Small dense row-major matrix, enough for covariance work.
struct Mat {
  int rows = 0;
  int cols = 0;
  std::vector<double> a;

  Mat() = default;
  Mat(int r, int c) : rows(r), cols(c), a(static_cast<std::size_t>(r) * c, 0.0) {
    if (r <= 0 || c <= 0) throw std::invalid_argument("Mat: dimensions must be positive");
  }
  double& operator()(int i, int j) { return a[static_cast<std::size_t>(i) * cols + j]; }
  double operator()(int i, int j) const {
    return a[static_cast<std::size_t>(i) * cols + j];
  }
  const double* row(int i) const { return a.data() + static_cast<std::size_t>(i) * cols; }
  double* row(int i) { return a.data() + static_cast<std::size_t>(i) * cols; }
};

/// Stationary squared-exponential field on the unit square, sampled at the
/// centers of a grid_n x grid_n cell grid. The log of the field is Gaussian
/// when log_transform is set, which keeps the physical field positive.
struct RandomFieldSpec {
  int grid_n = 64;
  double sigma = 0.3;
  double corr_len = 0.5;
  double mean = 0.0;
  double nugget = 1e-10;  // relative jitter on the diagonal, scaled by sigma^2
  bool log_transform = true;
  double amplitude = 1.0;

  void validate() const {
    if (grid_n < 1) throw std::invalid_argument("RandomFieldSpec: grid_n must be >= 1");
    if (!(sigma > 0.0)) throw std::invalid_argument("RandomFieldSpec: sigma must be > 0");
    if (!(corr_len > 0.0))
      throw std::invalid_argument("RandomFieldSpec: corr_len must be > 0");
    if (nugget < 0.0) throw std::invalid_argument("RandomFieldSpec: nugget must be >= 0");
    if (!(amplitude > 0.0))
      throw std::invalid_argument("RandomFieldSpec: amplitude must be > 0");
  }
};

/// Cell-center coordinates in row-major order: point r*grid_n + c sits at
/// ((c + 0.5)/grid_n, (r + 0.5)/grid_n).
inline std::vector<std::pair<double, double>> grid_points(int grid_n) {
  if (grid_n < 1) throw std::invalid_argument("grid_points: grid_n must be >= 1");
  std::vector<std::pair<double, double>> pts;
  pts.reserve(static_cast<std::size_t>(grid_n) * grid_n);
  for (int r = 0; r < grid_n; ++r)
    for (int c = 0; c < grid_n; ++c)
      pts.emplace_back((c + 0.5) / grid_n, (r + 0.5) / grid_n);
  return pts;
}

/// Covariance k(s,s') = sigma^2 exp(-|s-s'|^2 / (2 l^2)) over the cell-center
/// grid, with a small diagonal nugget so the Cholesky factor stays stable.
inline Mat rbf_covariance(const RandomFieldSpec& spec) {
  spec.validate();
  auto pts = grid_points(spec.grid_n);
  int n = static_cast<int>(pts.size());
  double s2 = spec.sigma * spec.sigma;
  double inv2l2 = 1.0 / (2.0 * spec.corr_len * spec.corr_len);
  Mat c(n, n);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j <= i; ++j) {
      double dx = pts[i].first - pts[j].first;
      double dy = pts[i].second - pts[j].second;
      double v = s2 * std::exp(-(dx * dx + dy * dy) * inv2l2);
      c(i, j) = v;
      c(j, i) = v;
    }
    c(i, i) += spec.nugget * s2;
  }
  return c;
}

/// Lower Cholesky factor of a symmetric positive definite matrix.
inline Mat cholesky_lower(const Mat& c) {
  if (c.rows != c.cols) throw std::invalid_argument("cholesky_lower: matrix not square");
  int n = c.rows;
  Mat l(n, n);
  for (int i = 0; i < n; ++i) {
    const double* ci = c.row(i);
    double* li = l.row(i);
    for (int j = 0; j <= i; ++j) {
      double sum = ci[j] - std::inner_product(li, li + j, l.row(j), 0.0);
      if (i == j) {
        if (!(sum > 0.0)) throw not_positive_definite(static_cast<std::size_t>(i));
        li[j] = std::sqrt(sum);
      } else {
        li[j] = sum / l(j, j);
      }
    }
  }
  return l;
}

/// Latin hypercube draws mapped to standard normal marginals. Every column is
/// independently stratified: one uniform draw per equiprobable slab, slab
/// order shuffled, then pushed through the normal quantile function.
inline Mat lhs_standard_normal(int n_samples, int dim, std::uint64_t seed) {
  if (n_samples < 1 || dim < 1)
    throw std::invalid_argument("lhs_standard_normal: need n_samples >= 1 and dim >= 1");
  Rng rng(seed);
  Mat m(n_samples, dim);
  std::vector<int> strata(n_samples);
  for (int j = 0; j < dim; ++j) {
    std::iota(strata.begin(), strata.end(), 0);
    rng.shuffle(strata);
    for (int i = 0; i < n_samples; ++i) {
      double u = (strata[i] + rng.uniform01()) / n_samples;
      m(i, j) = inverse_normal_cdf(u);
    }
  }
  return m;
}

/// Colors one standard normal vector with the Cholesky factor and applies the
/// spec's pointwise transform. z must hold grid_n^2 entries.
inline Field sample_field(const RandomFieldSpec& spec, const Mat& l,
                          const std::vector<double>& z) {
  spec.validate();
  int n = spec.grid_n * spec.grid_n;
  if (l.rows != n || l.cols != n)
    throw std::invalid_argument("sample_field: factor size does not match grid");
  if (static_cast<int>(z.size()) != n)
    throw std::invalid_argument("sample_field: noise vector size does not match grid");

  Field f(spec.grid_n, spec.grid_n, 1);
  for (int i = 0; i < n; ++i) {
    double g = spec.mean + std::inner_product(l.row(i), l.row(i) + i + 1, z.begin(), 0.0);
    f.data[i] = spec.amplitude * (spec.log_transform ? std::exp(g) : g);
  }
  if (!f.finite()) throw numerical_error("sample_field: non-finite sample");
  return f;
}

}  // namespace fieldreg
