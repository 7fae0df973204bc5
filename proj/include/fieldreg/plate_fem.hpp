#pragma once

#include <Eigen/Sparse>
#include <Eigen/SparseCholesky>
#include <array>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "fieldreg/case_schema.hpp"
#include "fieldreg/errors.hpp"
#include "fieldreg/field.hpp"
#include "fieldreg/parallel.hpp"
#include "fieldreg/random_field.hpp"

namespace fieldreg {

/// Shear-deformable plate on the unit square, clamped on all four edges,
/// meshed with n_elem x n_elem bilinear quads carrying (w, thx, thy) per node.
/// Stiffness E and transverse load are piecewise constant per element.
struct PlateSpec {
  int n_elem = 64;
  double thickness = 0.1;
  double poisson = 0.3;
  double shear_correction = 5.0 / 6.0;

  void validate() const {
    if (n_elem < 2) throw std::invalid_argument("PlateSpec: n_elem must be >= 2");
    if (!(thickness > 0.0))
      throw std::invalid_argument("PlateSpec: thickness must be > 0");
    if (!(poisson > -1.0 && poisson < 0.5))
      throw std::invalid_argument("PlateSpec: poisson must lie in (-1, 0.5)");
    if (!(shear_correction > 0.0))
      throw std::invalid_argument("PlateSpec: shear_correction must be > 0");
  }

  int nodes_per_side() const { return n_elem + 1; }
  int node_count() const { return nodes_per_side() * nodes_per_side(); }
  int dof_count() const { return 3 * node_count(); }
};

using ElemMatrix = std::array<std::array<double, 12>, 12>;

namespace detail {

// Local node order is counterclockwise from (-1,-1); element DOF order is
// node major: (w, thx, thy) for node 1, then node 2 and so on.
constexpr double kXi[4] = {-1.0, 1.0, 1.0, -1.0};
constexpr double kEta[4] = {-1.0, -1.0, 1.0, 1.0};

struct ShapeEval {
  double n[4];
  double dx[4];
  double dy[4];
};

inline ShapeEval shape_at(double xi, double eta, double h) {
  ShapeEval s;
  double scale = 2.0 / h;  // d(xi)/dx on a square element of side h
  for (int i = 0; i < 4; ++i) {
    s.n[i] = 0.25 * (1.0 + kXi[i] * xi) * (1.0 + kEta[i] * eta);
    s.dx[i] = 0.25 * kXi[i] * (1.0 + kEta[i] * eta) * scale;
    s.dy[i] = 0.25 * kEta[i] * (1.0 + kXi[i] * xi) * scale;
  }
  return s;
}

}  // namespace detail

/// Element stiffness for unit E. Bending uses the 2x2 Gauss rule; the
/// transverse shear term is integrated at the centroid only, which removes
/// the locking that full integration inflicts on thin plates. The matrix is
/// built on the upper triangle and mirrored, so it is symmetric bit for bit.
inline ElemMatrix element_stiffness_unit(const PlateSpec& spec) {
  spec.validate();
  const double h = 1.0 / spec.n_elem;
  const double t = spec.thickness;
  const double nu = spec.poisson;
  const double det_j = h * h / 4.0;

  const double bend = t * t * t / (12.0 * (1.0 - nu * nu));
  const double db[3][3] = {{bend, bend * nu, 0.0},
                           {bend * nu, bend, 0.0},
                           {0.0, 0.0, bend * (1.0 - nu) / 2.0}};
  const double ds = spec.shear_correction * t / (2.0 * (1.0 + nu));

  ElemMatrix k{};
  auto add_btdb = [&k](const double b[][12], const double d[][3], int rows_b,
                       double weight) {
    double db_b[3][12];
    for (int r = 0; r < rows_b; ++r)
      for (int j = 0; j < 12; ++j) {
        double acc = 0.0;
        for (int q = 0; q < rows_b; ++q) acc += d[r][q] * b[q][j];
        db_b[r][j] = acc;
      }
    for (int i = 0; i < 12; ++i)
      for (int j = i; j < 12; ++j) {
        double acc = 0.0;
        for (int r = 0; r < rows_b; ++r) acc += b[r][i] * db_b[r][j];
        k[i][j] += weight * acc;
      }
  };

  const double g = 1.0 / std::sqrt(3.0);
  const double gp[4][2] = {{-g, -g}, {g, -g}, {g, g}, {-g, g}};
  for (auto& pt : gp) {
    auto s = detail::shape_at(pt[0], pt[1], h);
    double bb[3][12] = {};
    for (int i = 0; i < 4; ++i) {
      bb[0][3 * i + 1] = s.dx[i];                   // d(thx)/dx
      bb[1][3 * i + 2] = s.dy[i];                   // d(thy)/dy
      bb[2][3 * i + 1] = s.dy[i];                   // twist
      bb[2][3 * i + 2] = s.dx[i];
    }
    add_btdb(bb, db, 3, det_j);
  }

  {
    auto s = detail::shape_at(0.0, 0.0, h);
    double bs[3][12] = {};
    for (int i = 0; i < 4; ++i) {
      bs[0][3 * i + 0] = s.dx[i];   // dw/dx - thx
      bs[0][3 * i + 1] = -s.n[i];
      bs[1][3 * i + 0] = s.dy[i];   // dw/dy - thy
      bs[1][3 * i + 2] = -s.n[i];
    }
    const double dshear[3][3] = {{ds, 0.0, 0.0}, {0.0, ds, 0.0}, {0.0, 0.0, 0.0}};
    add_btdb(bs, dshear, 2, 4.0 * det_j);
  }

  for (int i = 0; i < 12; ++i)
    for (int j = 0; j < i; ++j) k[i][j] = k[j][i];
  return k;
}

/// Assembled clamped-plate system with boundary DOFs eliminated.
struct PlateSystem {
  PlateSpec spec;
  Eigen::SparseMatrix<double> k;
  Eigen::VectorXd f;
  std::vector<int> reduced_index;  // full DOF id -> reduced id, -1 when clamped
  int free_count = 0;
};

inline void check_plate_fields(const PlateSpec& spec, const Field& e_field,
                               const Field& load_field) {
  if (e_field.h != spec.n_elem || e_field.w != spec.n_elem || e_field.c != 1)
    throw std::invalid_argument("plate: E field must be n_elem x n_elem x 1");
  if (load_field.h != spec.n_elem || load_field.w != spec.n_elem || load_field.c != 1)
    throw std::invalid_argument("plate: load field must be n_elem x n_elem x 1");
  for (double v : e_field.data)
    if (!(v > 0.0)) throw std::invalid_argument("plate: E field entries must be > 0");
  if (!load_field.finite())
    throw std::invalid_argument("plate: load field must be finite");
}

inline PlateSystem assemble(const PlateSpec& spec, const Field& e_field,
                            const Field& load_field) {
  spec.validate();
  check_plate_fields(spec, e_field, load_field);

  const int n = spec.n_elem;
  const int nps = spec.nodes_per_side();
  PlateSystem sys;
  sys.spec = spec;
  sys.reduced_index.assign(spec.dof_count(), -1);
  for (int iy = 0; iy < nps; ++iy)
    for (int ix = 0; ix < nps; ++ix) {
      if (iy == 0 || ix == 0 || iy == n || ix == n) continue;  // clamped edge
      int node = iy * nps + ix;
      for (int comp = 0; comp < 3; ++comp)
        sys.reduced_index[3 * node + comp] = sys.free_count++;
    }

  const ElemMatrix k_unit = element_stiffness_unit(spec);
  const double h = 1.0 / n;
  const double nodal_load_share = h * h / 4.0;  // integral of each shape function

  std::vector<Eigen::Triplet<double>> trips;
  trips.reserve(static_cast<std::size_t>(n) * n * 144);
  sys.f = Eigen::VectorXd::Zero(sys.free_count);

  for (int ey = 0; ey < n; ++ey) {
    for (int ex = 0; ex < n; ++ex) {
      const double e_val = e_field.at(0, ey, ex);
      const double f_val = load_field.at(0, ey, ex);
      const int nodes[4] = {ey * nps + ex, ey * nps + ex + 1, (ey + 1) * nps + ex + 1,
                            (ey + 1) * nps + ex};
      int gdof[12];
      for (int a = 0; a < 4; ++a)
        for (int comp = 0; comp < 3; ++comp) gdof[3 * a + comp] = 3 * nodes[a] + comp;

      for (int i = 0; i < 12; ++i) {
        int ri = sys.reduced_index[gdof[i]];
        if (ri < 0) continue;
        for (int j = 0; j < 12; ++j) {
          int rj = sys.reduced_index[gdof[j]];
          if (rj < 0) continue;
          trips.emplace_back(ri, rj, e_val * k_unit[i][j]);
        }
      }
      for (int a = 0; a < 4; ++a) {
        int rw = sys.reduced_index[3 * nodes[a]];
        if (rw >= 0) sys.f[rw] += f_val * nodal_load_share;
      }
    }
  }

  sys.k.resize(sys.free_count, sys.free_count);
  sys.k.setFromTriplets(trips.begin(), trips.end());
  return sys;
}

struct FemSolution {
  std::vector<double> dof;  // full mesh, 3 per node, clamped entries zero
  Field w_center;           // deflection at element centroids
  Field sigma_x, sigma_y, tau_xy;  // top fiber stresses at centroids
  Field sigma_v, tau_max;
  double residual = 0.0;
  int newton_iters = 0;
};

/// Direct factorization wrapped in a Newton loop. The problem is linear, so
/// the first correction lands on the solution; the loop doubles as iterative
/// refinement if the factorization alone leaves residual above tolerance.
inline FemSolution solve(const PlateSystem& sys, const Field& e_field,
                         const Field& load_field) {
  const double tol = 1e-9;
  const int max_iters = 5;

  Eigen::SimplicialLLT<Eigen::SparseMatrix<double>> llt;
  llt.compute(sys.k);
  if (llt.info() != Eigen::Success)
    throw numerical_error("plate solve: sparse Cholesky factorization failed");

  const double f_norm = sys.f.norm();
  Eigen::VectorXd u = Eigen::VectorXd::Zero(sys.free_count);
  double rel = f_norm == 0.0 ? 0.0 : 1.0;
  int iters = 0;
  while (rel > tol) {
    if (iters >= max_iters)
      throw numerical_error("plate solve: residual stalled at " + std::to_string(rel));
    Eigen::VectorXd r = sys.f - sys.k * u;
    u += llt.solve(r);
    ++iters;
    rel = (sys.f - sys.k * u).norm() / f_norm;
  }

  FemSolution sol;
  sol.residual = rel;
  sol.newton_iters = iters;
  sol.dof.assign(sys.spec.dof_count(), 0.0);
  for (int d = 0; d < sys.spec.dof_count(); ++d)
    if (sys.reduced_index[d] >= 0) sol.dof[d] = u[sys.reduced_index[d]];

  // Centroid postprocess: curvatures from the rotation gradients, stresses at
  // the top fiber z = t/2, deflection by bilinear interpolation.
  const PlateSpec& spec = sys.spec;
  const int n = spec.n_elem;
  const int nps = spec.nodes_per_side();
  const double h = 1.0 / n;
  const double t = spec.thickness;
  const double nu = spec.poisson;
  auto s0 = detail::shape_at(0.0, 0.0, h);

  sol.w_center = Field(n, n, 1);
  sol.sigma_x = Field(n, n, 1);
  sol.sigma_y = Field(n, n, 1);
  sol.tau_xy = Field(n, n, 1);
  sol.sigma_v = Field(n, n, 1);
  sol.tau_max = Field(n, n, 1);

  for (int ey = 0; ey < n; ++ey) {
    for (int ex = 0; ex < n; ++ex) {
      const int nodes[4] = {ey * nps + ex, ey * nps + ex + 1, (ey + 1) * nps + ex + 1,
                            (ey + 1) * nps + ex};
      double w_avg = 0.0, kxx = 0.0, kyy = 0.0, kxy = 0.0;
      for (int a = 0; a < 4; ++a) {
        double w = sol.dof[3 * nodes[a]];
        double thx = sol.dof[3 * nodes[a] + 1];
        double thy = sol.dof[3 * nodes[a] + 2];
        w_avg += 0.25 * w;
        kxx += s0.dx[a] * thx;
        kyy += s0.dy[a] * thy;
        kxy += s0.dy[a] * thx + s0.dx[a] * thy;
      }
      const double e_val = e_field.at(0, ey, ex);
      const double c = e_val * t / (2.0 * (1.0 - nu * nu));
      double sx = c * (kxx + nu * kyy);
      double sy = c * (kyy + nu * kxx);
      double txy = c * (1.0 - nu) / 2.0 * kxy;

      sol.w_center.at(0, ey, ex) = w_avg;
      sol.sigma_x.at(0, ey, ex) = sx;
      sol.sigma_y.at(0, ey, ex) = sy;
      sol.tau_xy.at(0, ey, ex) = txy;
      sol.sigma_v.at(0, ey, ex) =
          std::sqrt(sx * sx - sx * sy + sy * sy + 3.0 * txy * txy);
      sol.tau_max.at(0, ey, ex) =
          std::sqrt(0.25 * (sx - sy) * (sx - sy) + txy * txy);
    }
  }
  return sol;
}

inline FemSolution plate_solve(const PlateSpec& spec, const Field& e_field,
                               const Field& load_field) {
  PlateSystem sys = assemble(spec, e_field, load_field);
  return solve(sys, e_field, load_field);
}

inline Field uniform_field(int n, double value) {
  Field f(n, n, 1);
  for (double& v : f.data) v = value;
  return f;
}

/// Extracts the output channels a case schema asks for.
inline Field case_outputs(CaseKind kind, const FemSolution& sol) {
  auto names = case_output_names(kind);
  Field out(sol.w_center.h, sol.w_center.w, static_cast<int>(names.size()));
  for (std::size_t ch = 0; ch < names.size(); ++ch) {
    const Field* src = nullptr;
    if (names[ch] == "w") src = &sol.w_center;
    else if (names[ch] == "sigma_v") src = &sol.sigma_v;
    else if (names[ch] == "tau_max") src = &sol.tau_max;
    else if (names[ch] == "tau_xy") src = &sol.tau_xy;
    else throw std::invalid_argument("case_outputs: unknown channel " + names[ch]);
    std::copy(src->data.begin(), src->data.end(), out.chan(static_cast<int>(ch)));
  }
  return out;
}

struct DataGenConfig {
  CaseKind kind = CaseKind::one2one;
  int grid_n = 64;
  int n_samples = 0;
  std::uint64_t seed = 0;
  int threads = 1;
  RandomFieldSpec e_field;      // grid_n is overridden to match
  RandomFieldSpec load_field;   // used by the many-to-many case only
  PlateSpec plate;              // n_elem is overridden to match
  double uniform_load = 1.0;
};

/// Draws stratified property fields, runs the plate solver on each, and packs
/// the paired samples. Sample order is the row order of the LHS matrix, and
/// workers write into preallocated slots, so the result does not depend on
/// the thread count.
inline Dataset generate_plate_dataset(const DataGenConfig& cfg) {
  if (cfg.n_samples < 1)
    throw std::invalid_argument("generate_plate_dataset: n_samples must be >= 1");
  RandomFieldSpec e_spec = cfg.e_field;
  e_spec.grid_n = cfg.grid_n;
  e_spec.validate();
  PlateSpec plate = cfg.plate;
  plate.n_elem = cfg.grid_n;
  plate.validate();

  const int dim = cfg.grid_n * cfg.grid_n;
  Mat l_e = cholesky_lower(rbf_covariance(e_spec));
  Mat z_e = lhs_standard_normal(cfg.n_samples, dim, stage_seed(cfg.seed, "gen/e"));

  const bool random_load = cfg.kind == CaseKind::many2many;
  RandomFieldSpec f_spec = cfg.load_field;
  Mat l_f, z_f;
  if (random_load) {
    f_spec.grid_n = cfg.grid_n;
    f_spec.validate();
    l_f = cholesky_lower(rbf_covariance(f_spec));
    z_f = lhs_standard_normal(cfg.n_samples, dim, stage_seed(cfg.seed, "gen/f"));
  }

  Dataset ds;
  ds.seed = cfg.seed;
  ds.input_names = case_input_names(cfg.kind);
  ds.output_names = case_output_names(cfg.kind);
  ds.inputs.resize(cfg.n_samples);
  ds.outputs.resize(cfg.n_samples);

  const int c_in = case_input_channels(cfg.kind);
  parallel_for(cfg.n_samples, cfg.threads, [&](int s) {
    try {
      std::vector<double> z(z_e.row(s), z_e.row(s) + dim);
      Field e = sample_field(e_spec, l_e, z);
      Field load = random_load
                       ? [&] {
                           std::vector<double> zf(z_f.row(s), z_f.row(s) + dim);
                           return sample_field(f_spec, l_f, zf);
                         }()
                       : uniform_field(cfg.grid_n, cfg.uniform_load);

      FemSolution sol = plate_solve(plate, e, load);

      Field in(cfg.grid_n, cfg.grid_n, c_in);
      std::copy(e.data.begin(), e.data.end(), in.chan(0));
      if (c_in == 2) std::copy(load.data.begin(), load.data.end(), in.chan(1));
      ds.inputs[s] = std::move(in);
      ds.outputs[s] = case_outputs(cfg.kind, sol);
    } catch (const std::exception& e) {
      throw numerical_error("sample " + std::to_string(s) + ": " + e.what());
    }
  });
  return ds;
}

}  // namespace fieldreg
