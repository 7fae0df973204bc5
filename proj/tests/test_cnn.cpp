#include <gtest/gtest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numeric>

#include "fieldreg/checkpoint.hpp"
#include "fieldreg/cnn.hpp"
#include "fieldreg/rng.hpp"

using namespace fieldreg;

namespace {

Field random_field(int h, int w, int c, Rng& rng, double scale = 1.0,
                   double shift = 0.0) {
  Field f(h, w, c);
  for (auto& v : f.data) v = shift + scale * rng.normal();
  return f;
}

double batch_dot(const Batch& a, const Batch& b) {
  double acc = 0.0;
  for (std::size_t s = 0; s < a.size(); ++s)
    acc += std::inner_product(a[s].data.begin(), a[s].data.end(), b[s].data.begin(), 0.0);
  return acc;
}

// Scalar loss used by the finite-difference checks: a fixed random projection
// of the network output, so every output entry influences the loss.
struct ProbeLoss {
  Batch weights;
  double value(const Batch& y) const { return batch_dot(y, weights); }
};

ProbeLoss make_probe(const Network& net, int batch, std::uint64_t seed) {
  Rng rng(seed);
  auto os = net.output_shape();
  ProbeLoss p;
  for (int s = 0; s < batch; ++s) p.weights.push_back(random_field(os.h, os.w, os.c, rng));
  return p;
}

double rel_err(double a, double b) {
  double scale = std::max(std::fabs(a), std::fabs(b));
  if (scale < 1e-7) return std::fabs(a - b) > 1e-10 ? 1.0 : 0.0;
  return std::fabs(a - b) / scale;
}

// Central finite differences against the analytic gradient, all parameters.
// Running stats are reset per evaluation so BN batch statistics stay the
// only data-dependent state. The difference quotient carries roundoff of
// order eps*|loss|/step no matter how exact the analytic gradient is, so
// entries are judged against max(|analytic|, |fd|, that noise floor / tol):
// a violation then always means a real gradient defect, never oracle noise.
double max_grad_rel_err(const Network& net, const Batch& x, std::uint64_t seed) {
  std::vector<double> params, running0;
  net.init_params(params, running0, seed);
  ProbeLoss probe = make_probe(net, static_cast<int>(x.size()), seed + 1);

  auto loss_at = [&](const std::vector<double>& p) {
    std::vector<double> running = running0;
    Tape tape;
    Batch y = net.forward(x, p, running, NetMode::train, &tape);
    return probe.value(y);
  };

  std::vector<double> analytic(net.param_count(), 0.0);
  {
    std::vector<double> running = running0;
    Tape tape;
    Batch y = net.forward(x, params, running, NetMode::train, &tape);
    net.backward(tape, probe.weights, params, analytic);
  }

  const double h = 1e-6;
  const double tol = 1e-6;
  const double noise =
      64.0 * std::numeric_limits<double>::epsilon() *
      std::max(1.0, std::fabs(loss_at(params))) / h;
  double worst = 0.0;
  std::vector<double> p = params;
  for (std::size_t i = 0; i < p.size(); ++i) {
    double keep = p[i];
    p[i] = keep + h;
    double up = loss_at(p);
    p[i] = keep - h;
    double dn = loss_at(p);
    p[i] = keep;
    double fd = (up - dn) / (2.0 * h);
    double denom = std::max({std::fabs(analytic[i]), std::fabs(fd), noise / tol});
    worst = std::max(worst, std::fabs(analytic[i] - fd) / denom);
  }
  return worst;
}

std::filesystem::path temp_path(const char* name) {
  return std::filesystem::temp_directory_path() / name;
}

}  // namespace

TEST(ConvArithmetic, OutputDimFormula) {
  EXPECT_EQ(conv_out_dim(5, 3, 2, 1), 3);
  EXPECT_EQ(conv_out_dim(64, 3, 2, 0), 31);
  EXPECT_EQ(conv_out_dim(31, 3, 2, 2), 17);
  EXPECT_EQ(conv_out_dim(7, 7, 1, 0), 1);
  EXPECT_THROW(conv_out_dim(3, 5, 1, 0), std::invalid_argument);
  EXPECT_THROW(conv_out_dim(5, 3, 0, 0), std::invalid_argument);
}

TEST(ConvArithmetic, FivetoThreeWithStrideTwoPadOne) {
  Field x(5, 5, 1);
  for (int i = 0; i < 25; ++i) x.data[i] = i;
  ConvSpec spec{3, 3, 1, 1, 2, 1, 0.0};
  std::vector<double> kernel(9, 0.0);
  kernel[4] = 1.0;  // center tap picks out the strided sample grid
  Field y = conv2d_forward(x, spec, kernel);
  ASSERT_EQ(y.h, 3);
  ASSERT_EQ(y.w, 3);
  EXPECT_DOUBLE_EQ(y.at(0, 0, 0), 0.0);
  EXPECT_DOUBLE_EQ(y.at(0, 1, 1), 12.0);
  EXPECT_DOUBLE_EQ(y.at(0, 2, 2), 24.0);
}

TEST(ConvArithmetic, ScalarKernelScales) {
  Field x(2, 2, 1);
  x.data = {1, 2, 3, 4};
  ConvSpec spec{1, 1, 1, 1, 1, 0, 0.0};
  Field y = conv2d_forward(x, spec, {2.0});
  EXPECT_EQ(y.h, 2);
  std::vector<double> want{2, 4, 6, 8};
  EXPECT_EQ(y.data, want);
}

TEST(ConvArithmetic, ZeroKernelGivesZeroOutput) {
  Rng rng(5);
  Field x = random_field(6, 6, 2, rng);
  ConvSpec spec{3, 3, 2, 4, 1, 1, 0.0};
  Field y = conv2d_forward(x, spec, std::vector<double>(4 * 2 * 9, 0.0));
  for (double v : y.data) EXPECT_EQ(v, 0.0);
}

TEST(ConvArithmetic, HandComputedCrossCorrelation) {
  // 3x3 input, 2x2 kernel, stride 1, no pad: four windows, done by hand.
  Field x(3, 3, 1);
  x.data = {1, 2, 3, 4, 5, 6, 7, 8, 9};
  ConvSpec spec{2, 2, 1, 1, 1, 0, 0.0};
  std::vector<double> kernel{1, 10, 100, 1000};
  Field y = conv2d_forward(x, spec, kernel);
  ASSERT_EQ(y.h, 2);
  ASSERT_EQ(y.w, 2);
  EXPECT_DOUBLE_EQ(y.at(0, 0, 0), 1 + 20 + 400 + 5000);
  EXPECT_DOUBLE_EQ(y.at(0, 0, 1), 2 + 30 + 500 + 6000);
  EXPECT_DOUBLE_EQ(y.at(0, 1, 0), 4 + 50 + 700 + 8000);
  EXPECT_DOUBLE_EQ(y.at(0, 1, 1), 5 + 60 + 800 + 9000);
}

TEST(ConvArithmetic, RectangularKernel) {
  Field x(4, 5, 1);
  for (std::size_t i = 0; i < x.data.size(); ++i) x.data[i] = static_cast<double>(i);
  ConvSpec spec{1, 3, 1, 1, 1, 0, 0.0};
  std::vector<double> kernel{1, 1, 1};
  Field y = conv2d_forward(x, spec, kernel);
  ASSERT_EQ(y.h, 4);
  ASSERT_EQ(y.w, 3);
  EXPECT_DOUBLE_EQ(y.at(0, 0, 0), 0 + 1 + 2);
  EXPECT_DOUBLE_EQ(y.at(0, 3, 2), 17 + 18 + 19);
}

TEST(Bicubic, ConstantFieldStaysConstant) {
  Field x(7, 5, 2);
  std::fill(x.data.begin(), x.data.end(), 3.25);
  Field y = bicubic_resize(x, 13, 29);
  for (double v : y.data) EXPECT_NEAR(v, 3.25, 1e-12);
}

TEST(Bicubic, LinearRampExactAtInteriorPoints) {
  // Cubic convolution reproduces degree-1 polynomials wherever no tap is
  // clamped, so the upsampled ramp must equal the ramp at the mapped
  // source coordinates.
  const int in_n = 16, out_n = 37;
  Field x(in_n, in_n, 1);
  for (int r = 0; r < in_n; ++r)
    for (int c = 0; c < in_n; ++c) x.at(0, r, c) = 2.0 * c - 0.5 * r + 1.0;
  Field y = bicubic_resize(x, out_n, out_n);
  double scale = static_cast<double>(in_n) / out_n;
  for (int oy = 0; oy < out_n; ++oy) {
    for (int ox = 0; ox < out_n; ++ox) {
      double sy = (oy + 0.5) * scale - 0.5;
      double sx = (ox + 0.5) * scale - 0.5;
      bool interior = sy >= 1.0 && sy <= in_n - 2.0 && sx >= 1.0 && sx <= in_n - 2.0;
      if (!interior) continue;
      EXPECT_NEAR(y.at(0, oy, ox), 2.0 * sx - 0.5 * sy + 1.0, 1e-10);
    }
  }
}

TEST(Bicubic, DecoderShapeChain) {
  Field x(17, 17, 3);
  Rng rng(7);
  for (auto& v : x.data) v = rng.normal();
  Field up1 = bicubic_resize(x, 31, 31);
  Field up2 = bicubic_resize(up1, 64, 64);
  EXPECT_EQ(up1.h, 31);
  EXPECT_EQ(up2.h, 64);
  EXPECT_EQ(up2.c, 3);
}

TEST(Bicubic, AdjointIdentity) {
  Rng rng(11);
  for (auto [ih, iw, oh, ow] :
       {std::array<int, 4>{9, 7, 16, 21}, {16, 16, 7, 5}, {8, 8, 8, 8}}) {
    Field u = random_field(ih, iw, 2, rng);
    Field v = random_field(oh, ow, 2, rng);
    Field au = bicubic_resize(u, oh, ow);
    Field atv = bicubic_resize_adjoint(v, ih, iw);
    double lhs = std::inner_product(au.data.begin(), au.data.end(), v.data.begin(), 0.0);
    double rhs = std::inner_product(u.data.begin(), u.data.end(), atv.data.begin(), 0.0);
    EXPECT_NEAR(lhs, rhs, 1e-10 * std::max(1.0, std::fabs(lhs)));
  }
}

TEST(NetworkBuild, ShapeChainAndChannelLaw) {
  NetworkSpec spec;
  spec.in_h = spec.in_w = 16;
  spec.in_channels = 2;
  spec.layers = {ConvSpec{3, 3, 2, 8, 2, 0, 0.0}, DenseBlockSpec{4, 4},
                 ResizeSpec{16, 16}, ConvSpec{3, 3, 24, 1, 1, 1, 0.0}};
  Network net(spec);
  ASSERT_EQ(net.shapes().size(), 5u);
  EXPECT_EQ(net.shapes()[1], (StageShape{7, 7, 8}));
  EXPECT_EQ(net.shapes()[2], (StageShape{7, 7, 24}));
  EXPECT_EQ(net.shapes()[3], (StageShape{16, 16, 24}));
  EXPECT_EQ(net.output_shape(), (StageShape{16, 16, 1}));

  // Dense inner layer l must see block_input + growth*(l-1) channels.
  auto units = net.units();
  ASSERT_EQ(units.size(), 6u);
  EXPECT_EQ(units[1].second.in_channels, 8);
  EXPECT_EQ(units[2].second.in_channels, 12);
  EXPECT_EQ(units[3].second.in_channels, 16);
  EXPECT_EQ(units[4].second.in_channels, 20);
}

TEST(NetworkBuild, RejectsBrokenChains) {
  NetworkSpec spec;
  spec.in_h = spec.in_w = 8;
  spec.in_channels = 1;
  spec.layers = {ConvSpec{3, 3, 2, 4, 1, 1, 0.0}};  // wrong in_channels
  EXPECT_THROW(Network{spec}, std::invalid_argument);

  spec.layers = {ConvSpec{9, 9, 1, 4, 1, 0, 0.0}};  // kernel exceeds input
  EXPECT_THROW(Network{spec}, std::invalid_argument);

  spec.layers = {};
  EXPECT_THROW(Network{spec}, std::invalid_argument);
}

TEST(NetworkBuild, ParameterCountMatchesAnalytic) {
  NetworkSpec spec;
  spec.in_h = spec.in_w = 16;
  spec.in_channels = 2;
  spec.layers = {ConvSpec{3, 3, 2, 8, 2, 0, 0.0}, DenseBlockSpec{2, 4}};
  Network net(spec);
  // conv: 8*2*9 kernel + 8 alpha + 8 beta; inner0: 4*8*9+4+4; inner1: 4*12*9+4+4
  std::size_t want = (8 * 2 * 9 + 16) + (4 * 8 * 9 + 8) + (4 * 12 * 9 + 8);
  EXPECT_EQ(net.param_count(), want);
  EXPECT_EQ(net.running_count(), 2u * (8 + 4 + 4));

  std::size_t sum = 0;
  for (const auto& e : net.layout()) sum += e.count;
  EXPECT_EQ(sum, net.param_count());
}

TEST(NetworkBuild, DenseDepthZeroIsIdentity) {
  NetworkSpec spec;
  spec.in_h = spec.in_w = 8;
  spec.in_channels = 3;
  spec.layers = {DenseBlockSpec{0, 0}, ConvSpec{3, 3, 3, 2, 1, 1, 0.0}};
  Network net(spec);
  EXPECT_EQ(net.shapes()[1], (StageShape{8, 8, 3}));

  std::vector<double> params, running;
  net.init_params(params, running, 3);
  Rng rng(4);
  Batch x{random_field(8, 8, 3, rng)};
  Batch y = net.infer(x, params, running);
  EXPECT_EQ(y[0].c, 2);
}

TEST(BatchNorm, TrainOutputHasMeanBetaStdAlpha) {
  NetworkSpec spec;
  spec.in_h = spec.in_w = 8;
  spec.in_channels = 1;
  spec.bn_eps = 1e-12;  // so batch std ~ |alpha| is visible at 1e-6
  spec.layers = {ConvSpec{3, 3, 1, 3, 1, 1, 0.0}};
  Network net(spec);
  std::vector<double> params, running;
  net.init_params(params, running, 9);
  // alpha and beta sit after the kernel block in the layout
  const auto& lay = net.layout();
  std::size_t a_off = lay[1].offset, b_off = lay[2].offset;
  params[a_off + 0] = 1.7;
  params[a_off + 1] = -0.6;
  params[a_off + 2] = 2.2;
  params[b_off + 0] = 0.3;
  params[b_off + 1] = -1.1;
  params[b_off + 2] = 0.0;

  Rng rng(10);
  Batch x;
  for (int s = 0; s < 4; ++s) x.push_back(random_field(8, 8, 1, rng, 1.0, 0.5));
  Tape tape;
  Batch y = net.forward(x, params, running, NetMode::train, &tape);

  for (int c = 0; c < 3; ++c) {
    double sum = 0.0, count = 0.0;
    for (const Field& f : y)
      for (std::size_t i = 0; i < f.plane(); ++i) {
        sum += f.chan(c)[i];
        count += 1.0;
      }
    double mean = sum / count;
    EXPECT_NEAR(mean, params[b_off + c], 1e-8);
    double ss = 0.0;
    for (const Field& f : y)
      for (std::size_t i = 0; i < f.plane(); ++i) {
        double d = f.chan(c)[i] - mean;
        ss += d * d;
      }
    EXPECT_NEAR(std::sqrt(ss / count), std::fabs(params[a_off + c]), 1e-6);
  }
}

TEST(BatchNorm, ConstantBatchCollapsesToBeta) {
  NetworkSpec spec;
  spec.in_h = spec.in_w = 4;
  spec.in_channels = 1;
  spec.layers = {ConvSpec{1, 1, 1, 1, 1, 0, 0.0}};
  Network net(spec);
  std::vector<double> params, running;
  net.init_params(params, running, 1);
  params[0] = 1.0;  // passthrough kernel
  std::size_t b_off = net.layout()[2].offset;
  params[b_off] = -0.75;

  Field x(4, 4, 1);
  std::fill(x.data.begin(), x.data.end(), 2.0);
  Tape tape;
  Batch y = net.forward({x, x, x}, params, running, NetMode::train, &tape);
  for (const Field& f : y)
    for (double v : f.data) EXPECT_NEAR(v, -0.75, 1e-9);
}

TEST(BatchNorm, InferenceIsAffinePerChannel) {
  NetworkSpec spec;
  spec.in_h = spec.in_w = 6;
  spec.in_channels = 1;
  spec.layers = {ConvSpec{1, 1, 1, 1, 1, 0, 0.0}};
  Network net(spec);
  std::vector<double> params, running;
  net.init_params(params, running, 2);
  params[0] = 1.0;
  // put the running stats somewhere non-trivial
  running[0] = 0.4;
  running[1] = 2.25;

  Rng rng(3);
  Field a = random_field(6, 6, 1, rng, 0.5, 3.0);  // strictly positive inputs
  Field b = random_field(6, 6, 1, rng, 0.5, 3.0);
  Field mid(6, 6, 1);
  for (std::size_t i = 0; i < mid.data.size(); ++i)
    mid.data[i] = 0.5 * (a.data[i] + b.data[i]);

  Batch ya = net.infer({a}, params, running);
  Batch yb = net.infer({b}, params, running);
  Batch ym = net.infer({mid}, params, running);
  for (std::size_t i = 0; i < ym[0].data.size(); ++i)
    EXPECT_NEAR(ym[0].data[i], 0.5 * (ya[0].data[i] + yb[0].data[i]), 1e-12);
}

TEST(BatchNorm, RunningStatsBlendWithMomentum) {
  NetworkSpec spec;
  spec.in_h = spec.in_w = 4;
  spec.in_channels = 1;
  spec.bn_momentum = 0.9;
  spec.layers = {ConvSpec{1, 1, 1, 1, 1, 0, 0.0}};
  Network net(spec);
  std::vector<double> params, running;
  net.init_params(params, running, 1);
  params[0] = 1.0;

  Field x(4, 4, 1);
  std::fill(x.data.begin(), x.data.end(), 5.0);  // batch mean 5, variance 0
  Tape tape;
  net.forward({x, x}, params, running, NetMode::train, &tape);
  EXPECT_NEAR(running[0], 0.9 * 0.0 + 0.1 * 5.0, 1e-12);
  EXPECT_NEAR(running[1], 0.9 * 1.0 + 0.1 * 0.0, 1e-12);
  EXPECT_GE(running[1], 0.0);
}

TEST(SeparateStem, SplitsChannelsIntoGroups) {
  NetworkSpec spec;
  spec.in_h = spec.in_w = 16;
  spec.in_channels = 2;
  spec.stem_mode = StemMode::separate;
  spec.layers = {ConvSpec{3, 3, 2, 8, 2, 0, 0.0}};
  Network net(spec);
  EXPECT_EQ(net.output_shape(), (StageShape{7, 7, 8}));
  // Grouped kernel: 8 outputs * 1 local input channel * 9 taps.
  EXPECT_EQ(net.layout()[0].count, 8u * 1 * 9);

  // Zeroing the second input channel must leave group-0 outputs unchanged,
  // and zeroing the first must leave group-1 outputs unchanged.
  std::vector<double> params, running;
  net.init_params(params, running, 21);
  Rng rng(22);
  Field x = random_field(16, 16, 2, rng);
  Field x0 = x, x1 = x;
  for (std::size_t i = 0; i < x.plane(); ++i) {
    x0.chan(1)[i] = 0.0;
    x1.chan(0)[i] = 0.0;
  }
  Batch full = net.infer({x}, params, running);
  Batch g0 = net.infer({x0}, params, running);
  Batch g1 = net.infer({x1}, params, running);
  for (int c = 0; c < 4; ++c)
    for (std::size_t i = 0; i < full[0].plane(); ++i) {
      EXPECT_DOUBLE_EQ(full[0].chan(c)[i], g0[0].chan(c)[i]);
      EXPECT_DOUBLE_EQ(full[0].chan(c + 4)[i], g1[0].chan(c + 4)[i]);
    }
}

TEST(SeparateStem, RequiresDivisibleChannels) {
  NetworkSpec spec;
  spec.in_h = spec.in_w = 8;
  spec.in_channels = 2;
  spec.stem_mode = StemMode::separate;
  spec.layers = {ConvSpec{3, 3, 2, 7, 1, 1, 0.0}};  // 7 not divisible by 2
  EXPECT_THROW(Network{spec}, std::invalid_argument);

  spec.layers = {ResizeSpec{4, 4}};
  EXPECT_THROW(Network{spec}, std::invalid_argument);
}

TEST(Presets, EncoderResolutionChain) {
  Network fr21(make_preset("fr21", 64, 1, 1));
  const auto& shapes = fr21.shapes();
  EXPECT_EQ(shapes[0], (StageShape{64, 64, 1}));
  EXPECT_EQ(shapes[1].h, 31);
  EXPECT_EQ(shapes[3].h, 17);
  EXPECT_EQ(fr21.output_shape(), (StageShape{64, 64, 1}));
  EXPECT_EQ(fr21.units().size(), 21u);
}

TEST(Presets, VariantArchitectures) {
  Network fr25(make_preset("fr25", 64, 1, 3));
  EXPECT_EQ(fr25.units().size(), 25u);
  EXPECT_EQ(fr25.output_shape(), (StageShape{64, 64, 3}));
  // The late dense block must widen 72 feature maps to 144.
  bool saw_72_to_144 = false;
  const auto& sh = fr25.shapes();
  for (std::size_t i = 0; i + 1 < sh.size(); ++i)
    if (sh[i].c == 72 && sh[i + 1].c == 144) saw_72_to_144 = true;
  EXPECT_TRUE(saw_72_to_144);

  Network sep(make_preset("fr25", 64, 2, 2, StemMode::separate));
  EXPECT_EQ(sep.shapes()[1], (StageShape{31, 31, 64}));
  EXPECT_EQ(sep.layout()[0].count, 64u * 1 * 9);  // two stems of 32 maps each

  Network fr9(make_preset("fr9", 16, 1, 1));
  EXPECT_EQ(fr9.units().size(), 9u);
  EXPECT_EQ(fr9.output_shape(), (StageShape{16, 16, 1}));

  EXPECT_THROW(make_preset("fr99", 64, 1, 1), config_error);
}

TEST(InitParams, DeterministicHeScaled) {
  Network net(make_preset("fr9", 16, 1, 1));
  std::vector<double> p1, r1, p2, r2;
  net.init_params(p1, r1, 77);
  net.init_params(p2, r2, 77);
  EXPECT_EQ(p1, p2);
  EXPECT_EQ(r1, r2);
  std::vector<double> p3, r3;
  net.init_params(p3, r3, 78);
  EXPECT_NE(p1, p3);

  // Spot-check the He scale on the widest kernel block (48 -> 16, 3x3).
  const auto& lay = net.layout();
  for (const auto& e : lay) {
    if (e.name != "conv2.kernel") continue;
    double ss = 0.0;
    for (std::size_t i = 0; i < e.count; ++i) ss += p1[e.offset + i] * p1[e.offset + i];
    double want = std::sqrt(2.0 / (9.0 * 48.0));
    EXPECT_NEAR(std::sqrt(ss / e.count), want, 0.1 * want);
  }
  // Alphas start at one, betas at zero, running stats at (0, 1).
  for (const auto& e : lay) {
    if (e.name.find(".alpha") != std::string::npos)
      for (std::size_t i = 0; i < e.count; ++i) EXPECT_EQ(p1[e.offset + i], 1.0);
    if (e.name.find(".beta") != std::string::npos)
      for (std::size_t i = 0; i < e.count; ++i) EXPECT_EQ(p1[e.offset + i], 0.0);
  }
}

TEST(Gradients, SingleConvUnitMatchesFiniteDifferences) {
  NetworkSpec spec;
  spec.in_h = spec.in_w = 6;
  spec.in_channels = 2;
  spec.layers = {ConvSpec{3, 3, 2, 3, 1, 1, 0.0}};
  Network net(spec);
  Rng rng(31);
  Batch x{random_field(6, 6, 2, rng), random_field(6, 6, 2, rng)};
  EXPECT_LT(max_grad_rel_err(net, x, 100), 1e-6);
}

TEST(Gradients, StridedConvMatchesFiniteDifferences) {
  NetworkSpec spec;
  spec.in_h = spec.in_w = 7;
  spec.in_channels = 1;
  spec.layers = {ConvSpec{3, 3, 1, 4, 2, 0, 0.0}};
  Network net(spec);
  Rng rng(32);
  Batch x{random_field(7, 7, 1, rng), random_field(7, 7, 1, rng)};
  EXPECT_LT(max_grad_rel_err(net, x, 101), 1e-6);
}

TEST(Gradients, DenseBlockMatchesFiniteDifferences) {
  NetworkSpec spec;
  spec.in_h = spec.in_w = 5;
  spec.in_channels = 2;
  spec.layers = {DenseBlockSpec{2, 3}};
  Network net(spec);
  Rng rng(33);
  Batch x{random_field(5, 5, 2, rng), random_field(5, 5, 2, rng)};
  EXPECT_LT(max_grad_rel_err(net, x, 102), 1e-6);
}

TEST(Gradients, ResizeSandwichMatchesFiniteDifferences) {
  NetworkSpec spec;
  spec.in_h = spec.in_w = 8;
  spec.in_channels = 1;
  spec.layers = {ConvSpec{3, 3, 1, 2, 2, 0, 0.0}, ResizeSpec{8, 8},
                 ConvSpec{3, 3, 2, 1, 1, 1, 0.0}};
  Network net(spec);
  Rng rng(34);
  Batch x{random_field(8, 8, 1, rng), random_field(8, 8, 1, rng)};
  EXPECT_LT(max_grad_rel_err(net, x, 103), 1e-6);
}

TEST(Gradients, SeparateStemMatchesFiniteDifferences) {
  NetworkSpec spec;
  spec.in_h = spec.in_w = 6;
  spec.in_channels = 2;
  spec.stem_mode = StemMode::separate;
  spec.layers = {ConvSpec{3, 3, 2, 4, 1, 1, 0.0}, ConvSpec{3, 3, 4, 1, 1, 1, 0.0}};
  Network net(spec);
  Rng rng(35);
  Batch x{random_field(6, 6, 2, rng), random_field(6, 6, 2, rng)};
  EXPECT_LT(max_grad_rel_err(net, x, 104), 1e-6);
}

TEST(Gradients, MixedNetworkEndToEnd) {
  // Conv, dense block, strided downsampler, bicubic upsampler, BN everywhere,
  // batch 4: the full layer mix in one chain.
  NetworkSpec spec;
  spec.in_h = spec.in_w = 8;
  spec.in_channels = 2;
  spec.layers = {ConvSpec{3, 3, 2, 4, 2, 0, 0.0}, DenseBlockSpec{2, 3},
                 ResizeSpec{8, 8}, ConvSpec{3, 3, 10, 2, 1, 1, 0.0}};
  Network net(spec);
  Rng rng(36);
  Batch x;
  for (int s = 0; s < 4; ++s) x.push_back(random_field(8, 8, 2, rng));
  EXPECT_LT(max_grad_rel_err(net, x, 105), 1e-6);
}

TEST(Gradients, InputGradientMatchesFiniteDifferences) {
  NetworkSpec spec;
  spec.in_h = spec.in_w = 6;
  spec.in_channels = 1;
  spec.layers = {ConvSpec{3, 3, 1, 3, 1, 1, 0.0}, DenseBlockSpec{2, 2}};
  Network net(spec);
  std::vector<double> params, running0;
  net.init_params(params, running0, 50);
  Rng rng(51);
  Batch x{random_field(6, 6, 1, rng), random_field(6, 6, 1, rng)};
  ProbeLoss probe = make_probe(net, 2, 52);

  std::vector<double> grads;
  Batch dx;
  {
    std::vector<double> running = running0;
    Tape tape;
    net.forward(x, params, running, NetMode::train, &tape);
    net.backward(tape, probe.weights, params, grads, &dx);
  }

  const double h = 1e-6;
  double worst = 0.0;
  for (int s = 0; s < 2; ++s)
    for (std::size_t i = 0; i < x[s].data.size(); i += 7) {
      Batch xp = x;
      xp[s].data[i] += h;
      std::vector<double> run1 = running0;
      Tape t1;
      double up = probe.value(net.forward(xp, params, run1, NetMode::train, &t1));
      xp[s].data[i] -= 2 * h;
      std::vector<double> run2 = running0;
      Tape t2;
      double dn = probe.value(net.forward(xp, params, run2, NetMode::train, &t2));
      double fd = (up - dn) / (2 * h);
      worst = std::max(worst, rel_err(dx[s].data[i], fd));
    }
  EXPECT_LT(worst, 1e-6);
}

TEST(Gradients, ZeroUpstreamGivesZeroGradients) {
  Network net(make_preset("fr9", 16, 1, 1));
  std::vector<double> params, running;
  net.init_params(params, running, 60);
  Rng rng(61);
  Batch x{random_field(16, 16, 1, rng)};
  Tape tape;
  Batch y = net.forward(x, params, running, NetMode::train, &tape);
  Batch zeros{Field(y[0].h, y[0].w, y[0].c)};
  std::vector<double> grads;
  net.backward(tape, zeros, params, grads);
  for (double g : grads) EXPECT_EQ(g, 0.0);
}

TEST(Tape, ReuseIsRejected) {
  NetworkSpec spec;
  spec.in_h = spec.in_w = 4;
  spec.in_channels = 1;
  spec.layers = {ConvSpec{3, 3, 1, 2, 1, 1, 0.0}};
  Network net(spec);
  std::vector<double> params, running;
  net.init_params(params, running, 70);
  Rng rng(71);
  Batch x{random_field(4, 4, 1, rng), random_field(4, 4, 1, rng)};
  Tape tape;
  Batch y = net.forward(x, params, running, NetMode::train, &tape);
  std::vector<double> grads;
  net.backward(tape, y, params, grads);
  EXPECT_THROW(net.backward(tape, y, params, grads), invalid_state);
}

TEST(Network, RuntimeArgumentChecks) {
  Network net(make_preset("fr9", 16, 1, 1));
  std::vector<double> params, running;
  net.init_params(params, running, 80);
  EXPECT_THROW(net.infer({}, params, running), std::invalid_argument);
  Batch bad{Field(8, 8, 1)};
  EXPECT_THROW(net.infer(bad, params, running), std::invalid_argument);
  Batch ok{Field(16, 16, 1)};
  std::vector<double> short_params(params.begin(), params.end() - 1);
  EXPECT_THROW(net.infer(ok, short_params, running), std::invalid_argument);
  Tape tape;
  EXPECT_THROW(net.forward(ok, params, running, NetMode::train, nullptr),
               std::invalid_argument);
}

TEST(Network, InferenceIsPureAndThreadInvariant) {
  Network net(make_preset("fr9", 16, 1, 1));
  std::vector<double> params, running;
  net.init_params(params, running, 90);
  Rng rng(91);
  Batch x;
  for (int s = 0; s < 3; ++s) x.push_back(random_field(16, 16, 1, rng));
  Batch y1 = net.infer(x, params, running, 1);
  Batch y2 = net.infer(x, params, running, 4);
  Batch y3 = net.infer(x, params, running, 1);
  for (int s = 0; s < 3; ++s) {
    EXPECT_EQ(y1[s].data, y2[s].data);
    EXPECT_EQ(y1[s].data, y3[s].data);
  }
}

TEST(Network, TrainBackwardThreadInvariant) {
  Network net(make_preset("fr9", 16, 1, 1));
  std::vector<double> params, running1, running4;
  std::vector<double> dummy;
  net.init_params(params, running1, 92);
  net.init_params(dummy, running4, 92);
  Rng rng(93);
  Batch x;
  for (int s = 0; s < 5; ++s) x.push_back(random_field(16, 16, 1, rng));

  Tape t1, t4;
  Batch y1 = net.forward(x, params, running1, NetMode::train, &t1, 1);
  Batch y4 = net.forward(x, params, running4, NetMode::train, &t4, 4);
  for (int s = 0; s < 5; ++s) EXPECT_EQ(y1[s].data, y4[s].data);
  EXPECT_EQ(running1, running4);

  std::vector<double> g1, g4;
  net.backward(t1, y1, params, g1, nullptr, 1);
  net.backward(t4, y4, params, g4, nullptr, 4);
  EXPECT_EQ(g1, g4);
}

TEST(Checkpoint, RoundTripIsBitExact) {
  Network net(make_preset("fr9", 16, 1, 1));
  Checkpoint ck;
  ck.spec = net.spec();
  ck.trained_epochs = 17;
  net.init_params(ck.params, ck.running, 123);
  OptState opt;
  opt.step = 940;
  Rng rng(124);
  opt.m.resize(ck.params.size());
  opt.v.resize(ck.params.size());
  for (auto& m : opt.m) m = rng.normal();
  for (auto& v : opt.v) v = std::fabs(rng.normal());
  ck.opt = std::move(opt);

  auto path = temp_path("fieldreg_ck_roundtrip.frm");
  checkpoint_write(path.string(), ck);
  Checkpoint back = checkpoint_read(path.string());
  EXPECT_EQ(back.trained_epochs, 17u);
  EXPECT_EQ(back.params, ck.params);
  EXPECT_EQ(back.running, ck.running);
  ASSERT_TRUE(back.opt.has_value());
  EXPECT_EQ(back.opt->step, 940u);
  EXPECT_EQ(back.opt->m, ck.opt->m);
  EXPECT_EQ(back.opt->v, ck.opt->v);
  EXPECT_TRUE(first_spec_mismatch(ck.spec, back.spec).empty());

  // A second write of the reloaded state must produce identical bytes.
  auto path2 = temp_path("fieldreg_ck_roundtrip2.frm");
  checkpoint_write(path2.string(), back);
  std::ifstream f1(path, std::ios::binary), f2(path2, std::ios::binary);
  std::string b1((std::istreambuf_iterator<char>(f1)), {});
  std::string b2((std::istreambuf_iterator<char>(f2)), {});
  EXPECT_EQ(b1, b2);
  std::filesystem::remove(path);
  std::filesystem::remove(path2);
}

TEST(Checkpoint, CorruptionIsDetected) {
  Network net(make_preset("fr9", 16, 1, 1));
  Checkpoint ck;
  ck.spec = net.spec();
  net.init_params(ck.params, ck.running, 5);
  auto path = temp_path("fieldreg_ck_corrupt.frm");
  checkpoint_write(path.string(), ck);

  std::ifstream in(path, std::ios::binary);
  std::string bytes((std::istreambuf_iterator<char>(in)), {});
  in.close();

  {
    std::string bad = bytes;
    bad[0] = 'X';
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out.write(bad.data(), static_cast<std::streamsize>(bad.size()));
    out.close();
    EXPECT_THROW(checkpoint_read(path.string()), format_error);
  }
  {
    std::string bad = bytes.substr(0, bytes.size() / 2);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out.write(bad.data(), static_cast<std::streamsize>(bad.size()));
    out.close();
    EXPECT_THROW(checkpoint_read(path.string()), format_error);
  }
  {
    std::string bad = bytes + "zz";
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out.write(bad.data(), static_cast<std::streamsize>(bad.size()));
    out.close();
    EXPECT_THROW(checkpoint_read(path.string()), format_error);
  }
  std::filesystem::remove(path);
  EXPECT_THROW(checkpoint_read(path.string()), format_error);
}

TEST(Checkpoint, MismatchNamesFirstDivergentLayer) {
  Network net16(make_preset("fr9", 16, 1, 1));
  Checkpoint ck;
  ck.spec = net16.spec();
  net16.init_params(ck.params, ck.running, 6);
  auto path = temp_path("fieldreg_ck_mismatch.frm");
  checkpoint_write(path.string(), ck);

  NetworkSpec other = make_preset("fr9", 16, 1, 1);
  std::get<ConvSpec>(other.layers.back()).out_channels = 2;
  Network net_other(other);
  try {
    checkpoint_read_for(path.string(), net_other);
    FAIL() << "expected a format_error";
  } catch (const format_error& e) {
    EXPECT_NE(std::string(e.what()).find("layer 6"), std::string::npos) << e.what();
  }

  // Identical spec loads cleanly.
  Checkpoint ok = checkpoint_read_for(path.string(), net16);
  EXPECT_EQ(ok.params, ck.params);
  std::filesystem::remove(path);
}

TEST(Checkpoint, SpecJsonRoundTrip) {
  NetworkSpec spec = make_preset("fr25", 64, 2, 2, StemMode::separate);
  spec.bn_eps = 3e-5;
  spec.bn_momentum = 0.83;
  nlohmann::json j = network_spec_to_json(spec);
  NetworkSpec back = network_spec_from_json(j);
  EXPECT_TRUE(first_spec_mismatch(spec, back).empty());
  EXPECT_EQ(back.bn_eps, spec.bn_eps);
  EXPECT_EQ(back.bn_momentum, spec.bn_momentum);
  EXPECT_EQ(back.stem_mode, StemMode::separate);
  EXPECT_THROW(network_spec_from_json(nlohmann::json{{"in_h", 4}}), config_error);
}
