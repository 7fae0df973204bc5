#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <numbers>
#include <string>
#include <utility>
#include <vector>

#include "fieldreg/case_schema.hpp"
#include "fieldreg/errors.hpp"
#include "fieldreg/field.hpp"
#include "fieldreg/parallel.hpp"
#include "fieldreg/plate_fem.hpp"
#include "fieldreg/random_field.hpp"
#include "fieldreg/rng.hpp"

namespace fieldreg {

/// Single-pass mean/variance over a stream of congruent fields, numerically
/// stable in the Welford form. Variance is the unbiased 1/(N-1) estimate.
class MomentAccumulator {
 public:
  void add(const Field& x) {
    if (n_ == 0) {
      mean_ = Field(x.h, x.w, x.c);
      m2_ = Field(x.h, x.w, x.c);
    } else if (!x.same_shape(mean_)) {
      throw std::invalid_argument("MomentAccumulator: sample shape changed mid-stream");
    }
    ++n_;
    const double inv_n = 1.0 / static_cast<double>(n_);
    for (std::size_t i = 0; i < x.data.size(); ++i) {
      double delta = x.data[i] - mean_.data[i];
      mean_.data[i] += delta * inv_n;
      m2_.data[i] += delta * (x.data[i] - mean_.data[i]);
    }
  }

  std::int64_t count() const { return n_; }

  Field mean() const {
    if (n_ < 1) throw std::invalid_argument("MomentAccumulator: no samples");
    return mean_;
  }

  Field variance() const {
    if (n_ < 2)
      throw std::invalid_argument("MomentAccumulator: insufficient samples, need at least 2");
    Field v = m2_;
    const double inv = 1.0 / static_cast<double>(n_ - 1);
    for (double& x : v.data) x = std::max(0.0, x * inv);
    return v;
  }

 private:
  std::int64_t n_ = 0;
  Field mean_, m2_;
};

inline std::pair<Field, Field> mc_moments(const std::vector<Field>& samples) {
  if (samples.size() < 2)
    throw std::invalid_argument("mc_moments: insufficient samples, need at least 2");
  MomentAccumulator acc;
  for (const Field& f : samples) acc.add(f);
  return {acc.mean(), acc.variance()};
}

namespace detail {

/// Linear-interpolation quantile on a sorted copy, the convention most
/// statistics packages default to.
inline double quantile_sorted(const std::vector<double>& sorted, double p) {
  double pos = p * static_cast<double>(sorted.size() - 1);
  std::size_t lo = static_cast<std::size_t>(pos);
  if (lo + 1 >= sorted.size()) return sorted.back();
  double frac = pos - static_cast<double>(lo);
  return sorted[lo] * (1.0 - frac) + sorted[lo + 1] * frac;
}

}  // namespace detail

/// Silverman's rule with the robust spread estimate min(std, IQR/1.349).
/// An all-ties interquartile range falls back to the plain std.
inline double silverman_bandwidth(const std::vector<double>& samples) {
  const std::size_t n = samples.size();
  if (n < 2)
    throw std::invalid_argument("silverman_bandwidth: need at least 2 samples");
  double mean = 0.0;
  for (double x : samples) mean += x;
  mean /= static_cast<double>(n);
  double ss = 0.0;
  for (double x : samples) ss += (x - mean) * (x - mean);
  double sd = std::sqrt(ss / static_cast<double>(n - 1));

  std::vector<double> sorted = samples;
  std::sort(sorted.begin(), sorted.end());
  double iqr = detail::quantile_sorted(sorted, 0.75) - detail::quantile_sorted(sorted, 0.25);

  double spread = sd;
  if (iqr > 0.0) spread = std::min(sd, iqr / 1.349);
  if (!(spread > 0.0))
    throw numerical_error("silverman_bandwidth: degenerate distribution with zero spread");
  return 1.06 * spread * std::pow(static_cast<double>(n), -0.2);
}

/// Evenly spaced abscissa covering the samples plus three bandwidths.
inline std::vector<double> kde_grid(const std::vector<double>& samples, double bandwidth,
                                    int points = 256) {
  if (samples.empty()) throw std::invalid_argument("kde_grid: no samples");
  if (points < 2) throw std::invalid_argument("kde_grid: need at least 2 grid points");
  auto [lo_it, hi_it] = std::minmax_element(samples.begin(), samples.end());
  double lo = *lo_it - 3.0 * bandwidth;
  double hi = *hi_it + 3.0 * bandwidth;
  std::vector<double> grid(points);
  double step = (hi - lo) / static_cast<double>(points - 1);
  for (int i = 0; i < points; ++i) grid[i] = lo + step * i;
  return grid;
}

/// Gaussian-kernel density estimate on the given abscissa. bandwidth 0 means
/// Silverman's rule.
inline std::vector<double> kde_pdf(const std::vector<double>& samples,
                                   const std::vector<double>& grid,
                                   double bandwidth = 0.0) {
  if (samples.size() < 2)
    throw std::invalid_argument("kde_pdf: need at least 2 samples");
  if (bandwidth == 0.0) bandwidth = silverman_bandwidth(samples);
  if (!(bandwidth > 0.0)) throw std::invalid_argument("kde_pdf: bandwidth must be positive");

  const double inv_h = 1.0 / bandwidth;
  const double norm =
      inv_h / (static_cast<double>(samples.size()) * std::sqrt(2.0 * std::numbers::pi));
  std::vector<double> density(grid.size(), 0.0);
  for (std::size_t j = 0; j < grid.size(); ++j) {
    double s = 0.0;
    for (double y : samples) {
      double u = (grid[j] - y) * inv_h;
      s += std::exp(-0.5 * u * u);
    }
    density[j] = norm * s;
  }
  return density;
}

inline double trapezoid(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size() || x.size() < 2)
    throw std::invalid_argument("trapezoid: need matching grids of length >= 2");
  double s = 0.0;
  for (std::size_t i = 1; i < x.size(); ++i)
    s += 0.5 * (y[i] + y[i - 1]) * (x[i] - x[i - 1]);
  return s;
}

/// Entrywise |a-b| scaled by the max magnitude of the reference b. The guard
/// term keeps the ratio finite; an identically zero reference degrades to the
/// plain absolute difference.
inline Field error_map(const Field& a, const Field& b) {
  if (!a.same_shape(b)) throw std::invalid_argument("error_map: shapes differ");
  double ref = 0.0;
  for (double v : b.data) ref = std::max(ref, std::fabs(v));
  double denom = ref + 1e-12 * ref;
  if (denom == 0.0) denom = 1.0;
  Field out(a.h, a.w, a.c);
  for (std::size_t i = 0; i < a.data.size(); ++i)
    out.data[i] = std::fabs(a.data[i] - b.data[i]) / denom;
  return out;
}

inline double field_max_abs(const Field& f) {
  double m = 0.0;
  for (double v : f.data) m = std::max(m, std::fabs(v));
  return m;
}

struct UqProbe {
  int row = 0;
  int col = 0;
  int channel = 0;
  bool operator==(const UqProbe&) const = default;
};

struct PdfCurve {
  UqProbe probe;
  std::vector<double> grid;
  std::vector<double> density;
};

struct UqResult {
  Field mean_field, var_field;
  std::vector<PdfCurve> pdf_curves;
  int n_samples = 0;
};

namespace detail {

inline double halton(std::uint64_t index, int base) {
  double f = 1.0, r = 0.0;
  while (index > 0) {
    f /= base;
    r += f * static_cast<double>(index % static_cast<std::uint64_t>(base));
    index /= static_cast<std::uint64_t>(base);
  }
  return r;
}

}  // namespace detail

/// Two low-discrepancy interior probe points per output channel.
inline std::vector<UqProbe> default_probes(int h, int w, int channels) {
  if (h < 3 || w < 3 || channels < 1)
    throw std::invalid_argument("default_probes: output schema too small");
  std::vector<UqProbe> probes;
  std::uint64_t k = 1;
  for (int ch = 0; ch < channels; ++ch)
    for (int p = 0; p < 2; ++p, ++k) {
      UqProbe pr;
      pr.row = 1 + static_cast<int>(detail::halton(k, 2) * (h - 2));
      pr.col = 1 + static_cast<int>(detail::halton(k, 3) * (w - 2));
      pr.channel = ch;
      probes.push_back(pr);
    }
  return probes;
}

/// Input-side description of the Monte Carlo study: which case schema, the
/// property-field law, and the load model. Mirrors dataset generation but
/// draws plain independent normals per sample so the stream can be extended
/// without re-stratifying.
struct UqSamplerSpec {
  CaseKind kind = CaseKind::one2one;
  int grid_n = 16;
  RandomFieldSpec e_field;
  RandomFieldSpec load_field;
  double uniform_load = 1.0;
};

struct UqConfig {
  int n_samples = 2000;
  std::uint64_t seed = 0;
  std::vector<UqProbe> probes;  // empty picks default_probes on the output schema
  int pdf_points = 256;
  int threads = 1;
  int chunk = 64;  // samples predicted per parallel wave
};

/// Streams N seeded input realizations through an arbitrary field predictor,
/// accumulating moments in sample order (thread count never changes results)
/// and retaining probe-point scalars for the kernel density estimates. The
/// same spec and seed reproduce the identical input ensemble, so a surrogate
/// run and a reference run form a paired comparison.
inline UqResult run_uq(const UqSamplerSpec& sampler,
                       const std::function<Field(const Field&)>& predictor,
                       const UqConfig& cfg) {
  if (cfg.n_samples < 2)
    throw std::invalid_argument("run_uq: insufficient samples, need at least 2");
  if (cfg.chunk < 1) throw std::invalid_argument("run_uq: chunk must be >= 1");
  RandomFieldSpec e_spec = sampler.e_field;
  e_spec.grid_n = sampler.grid_n;
  e_spec.validate();
  const int dim = sampler.grid_n * sampler.grid_n;
  Mat l_e = cholesky_lower(rbf_covariance(e_spec));

  const bool random_load = sampler.kind == CaseKind::many2many;
  RandomFieldSpec f_spec = sampler.load_field;
  Mat l_f;
  if (random_load) {
    f_spec.grid_n = sampler.grid_n;
    f_spec.validate();
    l_f = cholesky_lower(rbf_covariance(f_spec));
  }
  const int c_in = case_input_channels(sampler.kind);

  auto make_input = [&](int s) {
    Rng rng(stage_seed(cfg.seed, "uq/e", static_cast<std::uint64_t>(s)));
    std::vector<double> z(static_cast<std::size_t>(dim));
    for (double& v : z) v = rng.normal();
    Field e = sample_field(e_spec, l_e, z);
    Field in(sampler.grid_n, sampler.grid_n, c_in);
    std::copy(e.data.begin(), e.data.end(), in.chan(0));
    if (c_in == 2) {
      if (random_load) {
        Rng rf(stage_seed(cfg.seed, "uq/f", static_cast<std::uint64_t>(s)));
        std::vector<double> zf(static_cast<std::size_t>(dim));
        for (double& v : zf) v = rf.normal();
        Field load = sample_field(f_spec, l_f, zf);
        std::copy(load.data.begin(), load.data.end(), in.chan(1));
      } else {
        Field load = uniform_field(sampler.grid_n, sampler.uniform_load);
        std::copy(load.data.begin(), load.data.end(), in.chan(1));
      }
    }
    return in;
  };

  MomentAccumulator acc;
  std::vector<UqProbe> probes = cfg.probes;
  std::vector<std::vector<double>> probe_samples;

  for (int lo = 0; lo < cfg.n_samples; lo += cfg.chunk) {
    const int hi = std::min(cfg.n_samples, lo + cfg.chunk);
    std::vector<Field> outs(static_cast<std::size_t>(hi - lo));
    parallel_for(hi - lo, cfg.threads, [&](int k) {
      try {
        outs[static_cast<std::size_t>(k)] = predictor(make_input(lo + k));
      } catch (const std::exception& e) {
        throw numerical_error("run_uq: sample " + std::to_string(lo + k) + ": " + e.what());
      }
    });

    if (lo == 0) {
      const Field& f0 = outs.front();
      if (probes.empty()) probes = default_probes(f0.h, f0.w, f0.c);
      for (const UqProbe& p : probes)
        if (p.row < 0 || p.row >= f0.h || p.col < 0 || p.col >= f0.w || p.channel < 0 ||
            p.channel >= f0.c)
          throw std::invalid_argument("run_uq: probe outside the output schema");
      probe_samples.assign(probes.size(), {});
      for (auto& v : probe_samples) v.reserve(static_cast<std::size_t>(cfg.n_samples));
    }

    for (const Field& f : outs) {
      acc.add(f);
      for (std::size_t p = 0; p < probes.size(); ++p)
        probe_samples[p].push_back(f.at(probes[p].channel, probes[p].row, probes[p].col));
    }
  }

  UqResult res;
  res.n_samples = cfg.n_samples;
  res.mean_field = acc.mean();
  res.var_field = acc.variance();
  for (std::size_t p = 0; p < probes.size(); ++p) {
    PdfCurve curve;
    curve.probe = probes[p];
    auto [lo, hi] = std::minmax_element(probe_samples[p].begin(), probe_samples[p].end());
    // A spread-free probe (constant predictor output) has no density estimate;
    // the curve stays empty rather than aborting the whole study.
    if (*lo < *hi) {
      double h = silverman_bandwidth(probe_samples[p]);
      curve.grid = kde_grid(probe_samples[p], h, cfg.pdf_points);
      curve.density = kde_pdf(probe_samples[p], curve.grid, h);
    }
    res.pdf_curves.push_back(std::move(curve));
  }
  return res;
}

/// Wraps the plate solver as a predictor with the output schema of the case.
inline std::function<Field(const Field&)> fem_predictor(const UqSamplerSpec& sampler,
                                                        const PlateSpec& plate) {
  PlateSpec p = plate;
  p.n_elem = sampler.grid_n;
  p.validate();
  CaseKind kind = sampler.kind;
  double load_value = sampler.uniform_load;
  int grid_n = sampler.grid_n;
  return [p, kind, load_value, grid_n](const Field& in) {
    Field e(grid_n, grid_n, 1);
    std::copy(in.chan(0), in.chan(0) + e.plane(), e.data.begin());
    Field load = in.c == 2 ? [&] {
      Field l(grid_n, grid_n, 1);
      std::copy(in.chan(1), in.chan(1) + l.plane(), l.data.begin());
      return l;
    }()
                           : uniform_field(grid_n, load_value);
    FemSolution sol = plate_solve(p, e, load);
    return case_outputs(kind, sol);
  };
}

namespace detail {

/// Piecewise-linear interpolation, zero outside the curve's support.
inline double interp_density(const PdfCurve& c, double x) {
  if (c.grid.empty() || x < c.grid.front() || x > c.grid.back()) return 0.0;
  auto it = std::upper_bound(c.grid.begin(), c.grid.end(), x);
  if (it == c.grid.begin()) return c.density.front();
  if (it == c.grid.end()) return c.density.back();
  std::size_t hi = static_cast<std::size_t>(it - c.grid.begin());
  std::size_t lo = hi - 1;
  double t = (x - c.grid[lo]) / (c.grid[hi] - c.grid[lo]);
  return c.density[lo] * (1.0 - t) + c.density[hi] * t;
}

inline std::vector<double> union_grid(const PdfCurve& a, const PdfCurve& b) {
  std::vector<double> grid;
  grid.reserve(a.grid.size() + b.grid.size());
  grid.insert(grid.end(), a.grid.begin(), a.grid.end());
  grid.insert(grid.end(), b.grid.begin(), b.grid.end());
  std::sort(grid.begin(), grid.end());
  grid.erase(std::unique(grid.begin(), grid.end()), grid.end());
  return grid;
}

}  // namespace detail

/// L1 distance between two density curves after normalizing each to unit
/// mass, evaluated on the merged abscissa with linear interpolation. Two
/// identical curves give 0; disjoint supports give 2.
inline double pdf_l1_distance(const PdfCurve& a, const PdfCurve& b) {
  if (a.grid.size() < 2 || b.grid.size() < 2)
    throw std::invalid_argument("pdf_l1_distance: need curves with at least 2 points");
  std::vector<double> grid = detail::union_grid(a, b);
  std::vector<double> da(grid.size()), db(grid.size());
  for (std::size_t i = 0; i < grid.size(); ++i) {
    da[i] = detail::interp_density(a, grid[i]);
    db[i] = detail::interp_density(b, grid[i]);
  }
  double ma = trapezoid(grid, da), mb = trapezoid(grid, db);
  if (!(ma > 0.0) || !(mb > 0.0))
    throw numerical_error("pdf_l1_distance: curve with nonpositive mass");
  std::vector<double> diff(grid.size());
  for (std::size_t i = 0; i < grid.size(); ++i) diff[i] = std::fabs(da[i] / ma - db[i] / mb);
  return trapezoid(grid, diff);
}

inline void write_pdf_csv(const std::filesystem::path& path, const PdfCurve& curve) {
  std::string buf = "value,density\n";
  for (std::size_t i = 0; i < curve.grid.size(); ++i) {
    buf += detail::fmt_g17(curve.grid[i]);
    buf.push_back(',');
    buf += detail::fmt_g17(curve.density[i]);
    buf.push_back('\n');
  }
  detail::spew(path, buf, "write_pdf_csv");
}

/// Both curves resampled onto the merged abscissa, for overlay plots.
inline void write_pdf_overlay_csv(const std::filesystem::path& path, const PdfCurve& a,
                                  const PdfCurve& b) {
  std::vector<double> grid = detail::union_grid(a, b);
  std::string buf = "value,surrogate_density,reference_density\n";
  for (double x : grid) {
    buf += detail::fmt_g17(x);
    buf.push_back(',');
    buf += detail::fmt_g17(detail::interp_density(a, x));
    buf.push_back(',');
    buf += detail::fmt_g17(detail::interp_density(b, x));
    buf.push_back('\n');
  }
  detail::spew(path, buf, "write_pdf_overlay_csv");
}

/// 8-bit grayscale heatmap of one channel, min-max scaled; a constant field
/// renders black.
inline void write_field_ppm(const std::filesystem::path& path, const Field& f, int ch) {
  if (ch < 0 || ch >= f.c) throw std::invalid_argument("write_field_ppm: bad channel");
  double lo = f.chan(ch)[0], hi = lo;
  for (int i = 0; i < f.plane(); ++i) {
    lo = std::min(lo, f.chan(ch)[i]);
    hi = std::max(hi, f.chan(ch)[i]);
  }
  double scale = hi > lo ? 255.0 / (hi - lo) : 0.0;
  std::string buf = "P5\n" + std::to_string(f.w) + " " + std::to_string(f.h) + "\n255\n";
  for (int i = 0; i < f.plane(); ++i)
    buf.push_back(static_cast<char>(
        static_cast<unsigned char>(std::lround((f.chan(ch)[i] - lo) * scale))));
  detail::spew(path, buf, "write_field_ppm");
}

}  // namespace fieldreg
