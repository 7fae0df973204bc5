#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "fieldreg/plate_fem.hpp"

using namespace fieldreg;

namespace {

// Independent thin-plate oracle: Galerkin solution of the clamped Kirchhoff
// plate under uniform load, basis (1-cos 2pi m x)(1-cos 2pi n y). For clamped
// edges the bending energy reduces to D * integral of (lap w)^2 / 2, and the
// trigonometric integrals collapse to Kronecker deltas.
double series_center_deflection(double rigidity, double q, int m_max) {
  int nb = m_max * m_max;
  auto a = [](int m) { double w = 2.0 * 3.14159265358979323846 * m; return w * w; };
  Mat k(nb, nb);
  for (int m = 1; m <= m_max; ++m)
    for (int n = 1; n <= m_max; ++n)
      for (int p = 1; p <= m_max; ++p)
        for (int l = 1; l <= m_max; ++l) {
          double v = 0.0;
          if (m == p) v += 0.5 * a(m) * a(p) * (1.0 + 0.5 * (n == l));
          if (m == p && n == l) v += 0.25 * (a(m) * a(l) + a(n) * a(p));
          if (n == l) v += 0.5 * a(n) * a(l) * (1.0 + 0.5 * (m == p));
          k((m - 1) * m_max + (n - 1), (p - 1) * m_max + (l - 1)) = rigidity * v;
        }

  // Load projection of a unit pressure onto every basis function is exactly q.
  // Solve K c = F through the Cholesky factor.
  Mat chol = cholesky_lower(k);
  std::vector<double> c(nb, q);
  for (int i = 0; i < nb; ++i) {
    double s = c[i];
    for (int j = 0; j < i; ++j) s -= chol(i, j) * c[j];
    c[i] = s / chol(i, i);
  }
  for (int i = nb - 1; i >= 0; --i) {
    double s = c[i];
    for (int j = i + 1; j < nb; ++j) s -= chol(j, i) * c[j];
    c[i] = s / chol(i, i);
  }

  double w = 0.0;
  for (int m = 1; m <= m_max; ++m)
    for (int n = 1; n <= m_max; ++n)
      if (m % 2 == 1 && n % 2 == 1) w += 4.0 * c[(m - 1) * m_max + (n - 1)];
  return w;
}

double max_abs(const Field& f) {
  double m = 0.0;
  for (double v : f.data) m = std::max(m, std::fabs(v));
  return m;
}

FemSolution solve_uniform(int n, double t) {
  PlateSpec spec;
  spec.n_elem = n;
  spec.thickness = t;
  return plate_solve(spec, uniform_field(n, 1.0), uniform_field(n, 1.0));
}

}  // namespace

TEST(ElementStiffness, SymmetricAndKillsRigidModes) {
  PlateSpec spec;
  spec.n_elem = 8;
  ElemMatrix k = element_stiffness_unit(spec);
  for (int i = 0; i < 12; ++i)
    for (int j = 0; j < 12; ++j) EXPECT_EQ(k[i][j], k[j][i]);

  double scale = 0.0;
  for (int i = 0; i < 12; ++i) scale = std::max(scale, std::fabs(k[i][i]));

  // Vertical translation: w = 1 at all nodes, rotations zero.
  double translation[12] = {1, 0, 0, 1, 0, 0, 1, 0, 0, 1, 0, 0};
  // Tilt: w = x with matching constant rotation thx = 1 gives zero shear.
  double h = 1.0 / spec.n_elem;
  double tilt[12] = {0, 1, 0, h, 1, 0, h, 1, 0, 0, 1, 0};
  for (auto mode : {translation, tilt}) {
    for (int i = 0; i < 12; ++i) {
      double r = 0.0;
      for (int j = 0; j < 12; ++j) r += k[i][j] * mode[j];
      EXPECT_LE(std::fabs(r), 1e-14 * scale);
    }
  }
}

TEST(Assembly, ExactSymmetryAndLinearityInE) {
  PlateSpec spec;
  spec.n_elem = 4;
  Rng rng(3);
  Field e(4, 4, 1), load(4, 4, 1);
  for (double& v : e.data) v = 0.5 + rng.uniform01();
  for (double& v : load.data) v = rng.normal();

  PlateSystem sys = assemble(spec, e, load);
  Eigen::SparseMatrix<double> kt = sys.k.transpose();
  Eigen::SparseMatrix<double> diff = sys.k - kt;
  for (int c = 0; c < diff.outerSize(); ++c)
    for (Eigen::SparseMatrix<double>::InnerIterator it(diff, c); it; ++it)
      EXPECT_EQ(it.value(), 0.0);

  Field e2 = e;
  for (double& v : e2.data) v *= 2.0;
  PlateSystem sys2 = assemble(spec, e2, load);
  ASSERT_EQ(sys.k.nonZeros(), sys2.k.nonZeros());
  const double* a = sys.k.valuePtr();
  const double* b = sys2.k.valuePtr();
  for (int i = 0; i < sys.k.nonZeros(); ++i) EXPECT_EQ(b[i], 2.0 * a[i]);
}

TEST(Assembly, ZeroLoadGivesZeroForce) {
  PlateSpec spec;
  spec.n_elem = 6;
  PlateSystem sys = assemble(spec, uniform_field(6, 1.0), uniform_field(6, 0.0));
  EXPECT_EQ(sys.f.norm(), 0.0);
}

TEST(Solve, ZeroLoadZeroEverything) {
  PlateSpec spec;
  spec.n_elem = 8;
  FemSolution sol = plate_solve(spec, uniform_field(8, 2.0), uniform_field(8, 0.0));
  EXPECT_EQ(sol.newton_iters, 0);
  EXPECT_EQ(sol.residual, 0.0);
  for (double v : sol.dof) EXPECT_EQ(v, 0.0);
  EXPECT_EQ(max_abs(sol.w_center), 0.0);
  EXPECT_EQ(max_abs(sol.sigma_v), 0.0);
}

TEST(Solve, OneNewtonIterationAndTightResidual) {
  FemSolution sol = solve_uniform(16, 0.1);
  EXPECT_EQ(sol.newton_iters, 1);
  EXPECT_LE(sol.residual, 1e-9);
  EXPECT_GT(max_abs(sol.w_center), 0.0);
}

TEST(Solve, DeflectionScalesInverselyWithE) {
  PlateSpec spec;
  spec.n_elem = 8;
  FemSolution a = plate_solve(spec, uniform_field(8, 1.0), uniform_field(8, 1.0));
  FemSolution b = plate_solve(spec, uniform_field(8, 4.0), uniform_field(8, 1.0));
  for (int i = 0; i < 64; ++i)
    EXPECT_NEAR(b.w_center.data[i], a.w_center.data[i] / 4.0,
                1e-12 * max_abs(a.w_center));
}

TEST(Solve, UniformProblemHasFullSquareSymmetry) {
  const int n = 16;
  FemSolution sol = solve_uniform(n, 0.1);
  const Field& w = sol.w_center;
  double tol = 1e-9 * max_abs(w);
  for (int r = 0; r < n; ++r)
    for (int c = 0; c < n; ++c) {
      double v = w.at(0, r, c);
      EXPECT_NEAR(v, w.at(0, c, r), tol);                  // transpose
      EXPECT_NEAR(v, w.at(0, n - 1 - r, c), tol);          // horizontal mirror
      EXPECT_NEAR(v, w.at(0, r, n - 1 - c), tol);          // vertical mirror
      EXPECT_NEAR(v, w.at(0, n - 1 - c, n - 1 - r), tol);  // anti transpose
    }
}

TEST(Solve, TwistStressSymmetryPattern) {
  const int n = 16;
  FemSolution sol = solve_uniform(n, 0.1);
  const Field& t = sol.tau_xy;
  double tol = 1e-9 * max_abs(t);
  EXPECT_GT(max_abs(t), 0.0);
  for (int r = 0; r < n; ++r)
    for (int c = 0; c < n; ++c) {
      double v = t.at(0, r, c);
      EXPECT_NEAR(v, -t.at(0, r, n - 1 - c), tol);  // odd across vertical median
      EXPECT_NEAR(v, -t.at(0, n - 1 - r, c), tol);  // odd across horizontal median
      EXPECT_NEAR(v, t.at(0, c, r), tol);           // even under transpose
    }
}

TEST(Solve, MeshRefinementConverges) {
  double w16 = max_abs(solve_uniform(16, 0.1).w_center);
  double w32 = max_abs(solve_uniform(32, 0.1).w_center);
  double w64 = max_abs(solve_uniform(64, 0.1).w_center);
  EXPECT_LE(std::fabs(w32 - w16) / w32, 0.03);
  EXPECT_LE(std::fabs(w64 - w32) / w64, 0.01);
}

TEST(Solve, ThinLimitMatchesSeriesOracle) {
  const double t = 0.01;
  const double rigidity = t * t * t / (12.0 * (1.0 - 0.3 * 0.3));
  double w_series = series_center_deflection(rigidity, 1.0, 14);

  // Cross-check the oracle itself against the classical clamped-plate
  // coefficient before trusting it.
  EXPECT_NEAR(w_series * rigidity, 0.00126532, 2e-5);

  double w_fem = max_abs(solve_uniform(32, t).w_center);
  EXPECT_LE(std::fabs(w_fem - w_series) / w_series, 0.15);
}

TEST(Inputs, RejectedWhenInvalid) {
  PlateSpec spec;
  spec.n_elem = 4;
  Field e = uniform_field(4, 1.0);
  Field load = uniform_field(4, 1.0);

  Field e_bad = e;
  e_bad.data[5] = 0.0;
  EXPECT_THROW(assemble(spec, e_bad, load), std::invalid_argument);
  e_bad.data[5] = -2.0;
  EXPECT_THROW(assemble(spec, e_bad, load), std::invalid_argument);
  EXPECT_THROW(assemble(spec, uniform_field(5, 1.0), load), std::invalid_argument);
  PlateSpec bad = spec;
  bad.thickness = 0.0;
  EXPECT_THROW(bad.validate(), std::invalid_argument);
}

TEST(DatasetGeneration, ShapesNamesAndRecomputableOutputs) {
  DataGenConfig cfg;
  cfg.kind = CaseKind::one2many;
  cfg.grid_n = 8;
  cfg.n_samples = 3;
  cfg.seed = 77;
  cfg.plate.thickness = 0.1;
  Dataset ds = generate_plate_dataset(cfg);

  ASSERT_EQ(ds.inputs.size(), 3u);
  EXPECT_EQ(ds.inputs[0].c, 1);
  EXPECT_EQ(ds.outputs[0].c, 3);
  EXPECT_EQ(ds.output_names, (std::vector<std::string>{"sigma_v", "tau_max", "tau_xy"}));
  EXPECT_EQ(ds.seed, 77u);

  // Outputs must be exactly the solver response to the stored inputs.
  for (int s = 0; s < 3; ++s) {
    PlateSpec plate = cfg.plate;
    plate.n_elem = 8;
    FemSolution sol = plate_solve(plate, ds.inputs[s], uniform_field(8, 1.0));
    Field expect = case_outputs(cfg.kind, sol);
    EXPECT_EQ(expect.data, ds.outputs[s].data);
  }
}

TEST(DatasetGeneration, DeterministicAndThreadInvariant) {
  DataGenConfig cfg;
  cfg.kind = CaseKind::many2many;
  cfg.grid_n = 6;
  cfg.n_samples = 5;
  cfg.seed = 1234;

  Dataset a = generate_plate_dataset(cfg);
  cfg.threads = 4;
  Dataset b = generate_plate_dataset(cfg);
  cfg.threads = 1;
  cfg.seed = 1235;
  Dataset c = generate_plate_dataset(cfg);

  for (int s = 0; s < 5; ++s) {
    EXPECT_EQ(a.inputs[s].data, b.inputs[s].data);
    EXPECT_EQ(a.outputs[s].data, b.outputs[s].data);
  }
  EXPECT_NE(a.inputs[0].data, c.inputs[0].data);

  // Load channel is an independent field, not a copy of E.
  EXPECT_EQ(a.inputs[0].c, 2);
  std::vector<double> e_chan(a.inputs[0].chan(0), a.inputs[0].chan(0) + 36);
  std::vector<double> f_chan(a.inputs[0].chan(1), a.inputs[0].chan(1) + 36);
  EXPECT_NE(e_chan, f_chan);
}
