#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <variant>
#include <vector>

#include "fieldreg/errors.hpp"
#include "fieldreg/field.hpp"
#include "fieldreg/parallel.hpp"
#include "fieldreg/rng.hpp"

namespace fieldreg {

using Batch = std::vector<Field>;

enum class StemMode { joint, separate };
enum class NetMode { train, infer };

/// Cross-correlation kernel bank, no bias term; shifts live in the batch
/// norm that follows every convolution. relu_eps is the threshold of the
/// max(x, eps) nonlinearity applied to this conv's output.
struct ConvSpec {
  int kernel_h = 3;
  int kernel_w = 3;
  int in_channels = 0;
  int out_channels = 0;
  int stride = 1;
  int pad = 0;
  double relu_eps = 0.0;
};

/// Densely connected stack: inner layer l consumes the block input plus every
/// earlier inner output, and the block emits input and all outputs stacked.
/// Inner convs run stride 1 with shape-preserving padding; depth 0 is the
/// identity.
struct DenseBlockSpec {
  int depth = 0;
  int growth = 0;
  int kernel = 3;
  double relu_eps = 0.0;
};

struct ResizeSpec {
  int target_h = 0;
  int target_w = 0;
};

using LayerSpec = std::variant<ConvSpec, DenseBlockSpec, ResizeSpec>;

struct NetworkSpec {
  int in_h = 0;
  int in_w = 0;
  int in_channels = 0;
  StemMode stem_mode = StemMode::joint;
  double bn_eps = 1e-5;
  double bn_momentum = 0.9;
  std::vector<LayerSpec> layers;
};

struct StageShape {
  int h = 0, w = 0, c = 0;
  bool operator==(const StageShape&) const = default;
};

inline int conv_out_dim(int in, int kernel, int stride, int pad) {
  if (kernel < 1 || stride < 1 || pad < 0)
    throw std::invalid_argument("conv: kernel/stride must be >= 1 and pad >= 0");
  int span = in - kernel + 2 * pad;
  if (span < 0) throw std::invalid_argument("conv: kernel exceeds padded input");
  return span / stride + 1;
}

namespace detail {

// Cubic convolution kernel with a = -1/2, the interpolating member of the
// Keys family. Weights at the four taps form a partition of unity.
inline double keys_cubic(double d) {
  d = std::fabs(d);
  if (d <= 1.0) return (1.5 * d - 2.5) * d * d + 1.0;
  if (d < 2.0) return ((-0.5 * d + 2.5) * d - 4.0) * d + 2.0;
  return 0.0;
}

struct ResampleAxis {
  std::vector<int> base;   // first source index of the 4-tap window
  std::vector<double> wt;  // 4 weights per output position
};

/// Half-pixel-centered source positions, edge-clamped taps.
inline ResampleAxis make_axis(int in_n, int out_n) {
  ResampleAxis ax;
  ax.base.resize(out_n);
  ax.wt.resize(static_cast<std::size_t>(out_n) * 4);
  double scale = static_cast<double>(in_n) / out_n;
  for (int o = 0; o < out_n; ++o) {
    double s = (o + 0.5) * scale - 0.5;
    double fl = std::floor(s);
    double t = s - fl;
    ax.base[o] = static_cast<int>(fl) - 1;
    ax.wt[4 * o + 0] = keys_cubic(1.0 + t);
    ax.wt[4 * o + 1] = keys_cubic(t);
    ax.wt[4 * o + 2] = keys_cubic(1.0 - t);
    ax.wt[4 * o + 3] = keys_cubic(2.0 - t);
  }
  return ax;
}

inline int clamp_idx(int i, int n) { return i < 0 ? 0 : (i >= n ? n - 1 : i); }

}  // namespace detail

/// Fixed (not learned) bicubic resampling of every channel.
inline Field bicubic_resize(const Field& x, int target_h, int target_w) {
  if (target_h < 1 || target_w < 1)
    throw std::invalid_argument("bicubic_resize: target dims must be >= 1");
  auto ay = detail::make_axis(x.h, target_h);
  auto ax = detail::make_axis(x.w, target_w);
  Field out(target_h, target_w, x.c);
  for (int ch = 0; ch < x.c; ++ch) {
    const double* src = x.chan(ch);
    double* dst = out.chan(ch);
    for (int oy = 0; oy < target_h; ++oy) {
      for (int ox = 0; ox < target_w; ++ox) {
        double acc = 0.0;
        for (int i = 0; i < 4; ++i) {
          int iy = detail::clamp_idx(ay.base[oy] + i, x.h);
          double wy = ay.wt[4 * oy + i];
          for (int j = 0; j < 4; ++j) {
            int ix = detail::clamp_idx(ax.base[ox] + j, x.w);
            acc += wy * ax.wt[4 * ox + j] * src[iy * x.w + ix];
          }
        }
        dst[oy * target_w + ox] = acc;
      }
    }
  }
  return out;
}

/// Exact transpose of bicubic_resize as a linear map: same taps, same
/// weights, scattered instead of gathered.
inline Field bicubic_resize_adjoint(const Field& grad_out, int in_h, int in_w) {
  if (in_h < 1 || in_w < 1)
    throw std::invalid_argument("bicubic_resize_adjoint: input dims must be >= 1");
  auto ay = detail::make_axis(in_h, grad_out.h);
  auto ax = detail::make_axis(in_w, grad_out.w);
  Field out(in_h, in_w, grad_out.c);
  for (int ch = 0; ch < grad_out.c; ++ch) {
    const double* src = grad_out.chan(ch);
    double* dst = out.chan(ch);
    for (int oy = 0; oy < grad_out.h; ++oy) {
      for (int ox = 0; ox < grad_out.w; ++ox) {
        double g = src[oy * grad_out.w + ox];
        for (int i = 0; i < 4; ++i) {
          int iy = detail::clamp_idx(ay.base[oy] + i, in_h);
          double wy = ay.wt[4 * oy + i];
          for (int j = 0; j < 4; ++j) {
            int ix = detail::clamp_idx(ax.base[ox] + j, in_w);
            dst[iy * in_w + ix] += g * wy * ax.wt[4 * ox + j];
          }
        }
      }
    }
  }
  return out;
}

namespace detail {

inline Field pad_field(const Field& x, int pad) {
  if (pad == 0) return x;
  Field out(x.h + 2 * pad, x.w + 2 * pad, x.c);
  for (int ch = 0; ch < x.c; ++ch) {
    const double* src = x.chan(ch);
    double* dst = out.chan(ch);
    for (int r = 0; r < x.h; ++r)
      std::copy(src + r * x.w, src + (r + 1) * x.w, dst + (r + pad) * out.w + pad);
  }
  return out;
}

inline Field unpad_field(const Field& x, int pad) {
  if (pad == 0) return x;
  Field out(x.h - 2 * pad, x.w - 2 * pad, x.c);
  for (int ch = 0; ch < x.c; ++ch) {
    const double* src = x.chan(ch);
    double* dst = out.chan(ch);
    for (int r = 0; r < out.h; ++r)
      std::copy(src + (r + pad) * x.w + pad, src + (r + pad) * x.w + pad + out.w,
                dst + r * out.w);
  }
  return out;
}

/// Cross-correlation of one padded sample with a flat kernel bank.
/// kernel[o][c][u][v] is stored contiguously with c running over the group's
/// local input channels.
inline void conv_padded(const Field& padded, const double* kernel, int kh, int kw,
                        int stride, int groups, Field& out) {
  const int ci_g = padded.c / groups;
  const int co_g = out.c / groups;
  const int wp = padded.w;
  for (int g = 0; g < groups; ++g) {
    for (int oc = g * co_g; oc < (g + 1) * co_g; ++oc) {
      double* out_plane = out.chan(oc);
      for (int cl = 0; cl < ci_g; ++cl) {
        const double* in_plane = padded.chan(g * ci_g + cl);
        const double* kern =
            kernel + ((static_cast<std::size_t>(oc) * ci_g) + cl) * kh * kw;
        for (int u = 0; u < kh; ++u) {
          for (int v = 0; v < kw; ++v) {
            double wgt = kern[u * kw + v];
            for (int m = 0; m < out.h; ++m) {
              const double* xrow = in_plane + (m * stride + u) * wp + v;
              double* orow = out_plane + m * out.w;
              if (stride == 1)
                for (int n = 0; n < out.w; ++n) orow[n] += wgt * xrow[n];
              else
                for (int n = 0; n < out.w; ++n) orow[n] += wgt * xrow[n * stride];
            }
          }
        }
      }
    }
  }
}

/// Kernel gradient for one sample, accumulated into grad_kernel (same layout).
inline void conv_grad_kernel(const Field& padded, const Field& dy, int kh, int kw,
                             int stride, int groups, double* grad_kernel) {
  const int ci_g = padded.c / groups;
  const int co_g = dy.c / groups;
  const int wp = padded.w;
  for (int g = 0; g < groups; ++g) {
    for (int oc = g * co_g; oc < (g + 1) * co_g; ++oc) {
      const double* dy_plane = dy.chan(oc);
      for (int cl = 0; cl < ci_g; ++cl) {
        const double* in_plane = padded.chan(g * ci_g + cl);
        double* kern =
            grad_kernel + ((static_cast<std::size_t>(oc) * ci_g) + cl) * kh * kw;
        for (int u = 0; u < kh; ++u) {
          for (int v = 0; v < kw; ++v) {
            double acc = 0.0;
            for (int m = 0; m < dy.h; ++m) {
              const double* xrow = in_plane + (m * stride + u) * wp + v;
              const double* dyrow = dy_plane + m * dy.w;
              if (stride == 1)
                for (int n = 0; n < dy.w; ++n) acc += dyrow[n] * xrow[n];
              else
                for (int n = 0; n < dy.w; ++n) acc += dyrow[n] * xrow[n * stride];
            }
            kern[u * kw + v] += acc;
          }
        }
      }
    }
  }
}

/// Input gradient for one sample, accumulated into the padded layout.
inline void conv_grad_input(const Field& dy, const double* kernel, int kh, int kw,
                            int stride, int groups, Field& dpadded) {
  const int ci_g = dpadded.c / groups;
  const int co_g = dy.c / groups;
  const int wp = dpadded.w;
  for (int g = 0; g < groups; ++g) {
    for (int oc = g * co_g; oc < (g + 1) * co_g; ++oc) {
      const double* dy_plane = dy.chan(oc);
      for (int cl = 0; cl < ci_g; ++cl) {
        double* dx_plane = dpadded.chan(g * ci_g + cl);
        const double* kern =
            kernel + ((static_cast<std::size_t>(oc) * ci_g) + cl) * kh * kw;
        for (int u = 0; u < kh; ++u) {
          for (int v = 0; v < kw; ++v) {
            double wgt = kern[u * kw + v];
            for (int m = 0; m < dy.h; ++m) {
              double* dxrow = dx_plane + (m * stride + u) * wp + v;
              const double* dyrow = dy_plane + m * dy.w;
              if (stride == 1)
                for (int n = 0; n < dy.w; ++n) dxrow[n] += wgt * dyrow[n];
              else
                for (int n = 0; n < dy.w; ++n) dxrow[n * stride] += wgt * dyrow[n];
            }
          }
        }
      }
    }
  }
}

}  // namespace detail

/// Plain ungrouped convolution of a single field; a building block for tests
/// and shape experiments. The training path goes through Network.
inline Field conv2d_forward(const Field& x, const ConvSpec& spec,
                            const std::vector<double>& kernel) {
  if (x.c != spec.in_channels)
    throw std::invalid_argument("conv2d_forward: channel mismatch");
  std::size_t want = static_cast<std::size_t>(spec.out_channels) * spec.in_channels *
                     spec.kernel_h * spec.kernel_w;
  if (kernel.size() != want)
    throw std::invalid_argument("conv2d_forward: kernel size mismatch");
  Field padded = detail::pad_field(x, spec.pad);
  Field out(conv_out_dim(x.h, spec.kernel_h, spec.stride, spec.pad),
            conv_out_dim(x.w, spec.kernel_w, spec.stride, spec.pad),
            spec.out_channels);
  detail::conv_padded(padded, kernel.data(), spec.kernel_h, spec.kernel_w, spec.stride,
                      1, out);
  return out;
}

struct ParamEntry {
  std::string name;
  std::size_t offset = 0;
  std::size_t count = 0;
};

/// Adam accumulators travel with the model so training can resume exactly.
struct OptState {
  std::uint64_t step = 0;
  std::vector<double> m, v;
};

namespace detail {

struct UnitPlan {
  ConvSpec conv;
  int groups = 1;
  StageShape in_shape, out_shape;
  std::size_t k_off = 0, k_count = 0;
  std::size_t a_off = 0, b_off = 0;  // alpha and beta, out_channels each
  std::size_t r_off = 0;             // running mean, then running var
  std::string name;
};

struct DensePlan {
  DenseBlockSpec spec;
  std::vector<UnitPlan> units;
  StageShape in_shape, out_shape;
};

struct ResizePlan {
  StageShape in_shape;
  int th = 0, tw = 0;
};

using OpPlan = std::variant<UnitPlan, DensePlan, ResizePlan>;

struct UnitTape {
  Batch padded;   // conv inputs after zero padding
  Batch pre_act;  // conv outputs before the nonlinearity
  Batch xhat;     // normalized activations feeding the affine map
  std::vector<double> mu, var;
};

}  // namespace detail

/// Backward-pass bookkeeping captured by a train-mode forward. One shot: the
/// matching backward consumes it.
struct Tape {
  bool live = false;
  int batch = 0;
  std::vector<std::vector<detail::UnitTape>> ops;  // one slot per op plan
};

/// Validated, compiled network: shape chain, parameter layout and the
/// forward/backward machinery. Learnable values and batch-norm running
/// statistics live outside in flat vectors owned by the caller.
class Network {
 public:
  explicit Network(NetworkSpec spec) : spec_(std::move(spec)) { build(); }

  const NetworkSpec& spec() const { return spec_; }
  const std::vector<StageShape>& shapes() const { return shapes_; }
  StageShape output_shape() const { return shapes_.back(); }
  std::size_t param_count() const { return param_count_; }
  std::size_t running_count() const { return running_count_; }
  const std::vector<ParamEntry>& layout() const { return layout_; }

  /// Flattened conv units in execution order (dense blocks expanded).
  std::vector<std::pair<std::string, ConvSpec>> units() const {
    std::vector<std::pair<std::string, ConvSpec>> out;
    for (const auto& op : plans_)
      if (const auto* u = std::get_if<detail::UnitPlan>(&op))
        out.emplace_back(u->name, u->conv);
      else if (const auto* d = std::get_if<detail::DensePlan>(&op))
        for (const auto& iu : d->units) out.emplace_back(iu.name, iu.conv);
    return out;
  }

  /// Kernel entries start He-scaled for their fan-in, alpha = 1, beta = 0,
  /// running stats at (0, 1). One seeded stream in layout order.
  void init_params(std::vector<double>& params, std::vector<double>& running,
                   std::uint64_t seed) const {
    params.assign(param_count_, 0.0);
    running.assign(running_count_, 0.0);
    Rng rng(seed);
    for_each_unit([&](const detail::UnitPlan& u) {
      int fan_in = u.conv.kernel_h * u.conv.kernel_w * (u.conv.in_channels / u.groups);
      double std_dev = std::sqrt(2.0 / fan_in);
      for (std::size_t i = 0; i < u.k_count; ++i)
        params[u.k_off + i] = std_dev * rng.normal();
      for (int c = 0; c < u.conv.out_channels; ++c) {
        params[u.a_off + c] = 1.0;
        params[u.b_off + c] = 0.0;
        running[u.r_off + c] = 0.0;
        running[u.r_off + u.conv.out_channels + c] = 1.0;
      }
    });
  }

  Batch forward(const Batch& input, const std::vector<double>& params,
                std::vector<double>& running, NetMode mode, Tape* tape,
                int threads = 1) const {
    check_io(input, params, running);
    if (mode == NetMode::train && tape == nullptr)
      throw std::invalid_argument("Network::forward: train mode needs a tape");
    if (tape) {
      tape->live = mode == NetMode::train;
      tape->batch = static_cast<int>(input.size());
      tape->ops.assign(plans_.size(), {});
    }

    Batch cur = input;
    for (std::size_t i = 0; i < plans_.size(); ++i) {
      if (const auto* u = std::get_if<detail::UnitPlan>(&plans_[i])) {
        cur = unit_forward(*u, cur, params, running, mode,
                           tape ? &tape->ops[i] : nullptr, threads);
      } else if (const auto* d = std::get_if<detail::DensePlan>(&plans_[i])) {
        cur = dense_forward(*d, cur, params, running, mode,
                            tape ? &tape->ops[i] : nullptr, threads);
      } else {
        const auto& r = std::get<detail::ResizePlan>(plans_[i]);
        Batch next(cur.size());
        parallel_for(static_cast<int>(cur.size()), threads,
                     [&](int s) { next[s] = bicubic_resize(cur[s], r.th, r.tw); });
        cur = std::move(next);
      }
    }
    return cur;
  }

  /// Consumes the tape; returns the parameter gradient summed over the batch
  /// (no averaging applied here) and optionally the input-field gradient.
  void backward(Tape& tape, const Batch& grad_out, const std::vector<double>& params,
                std::vector<double>& grad_params, Batch* grad_input = nullptr,
                int threads = 1) const {
    if (!tape.live) throw invalid_state("Network::backward: tape already consumed");
    if (static_cast<int>(grad_out.size()) != tape.batch)
      throw std::invalid_argument("Network::backward: gradient batch size mismatch");
    tape.live = false;
    grad_params.assign(param_count_, 0.0);

    Batch g = grad_out;
    for (std::size_t i = plans_.size(); i-- > 0;) {
      if (const auto* u = std::get_if<detail::UnitPlan>(&plans_[i])) {
        g = unit_backward(*u, tape.ops[i][0], g, params, grad_params, threads);
      } else if (const auto* d = std::get_if<detail::DensePlan>(&plans_[i])) {
        g = dense_backward(*d, tape.ops[i], g, params, grad_params, threads);
      } else {
        const auto& r = std::get<detail::ResizePlan>(plans_[i]);
        Batch next(g.size());
        parallel_for(static_cast<int>(g.size()), threads, [&](int s) {
          next[s] = bicubic_resize_adjoint(g[s], r.in_shape.h, r.in_shape.w);
        });
        g = std::move(next);
      }
    }
    if (grad_input) *grad_input = std::move(g);
  }

  Batch infer(const Batch& input, const std::vector<double>& params,
              std::vector<double>& running, int threads = 1) const {
    return forward(input, params, running, NetMode::infer, nullptr, threads);
  }

 private:
  NetworkSpec spec_;
  std::vector<detail::OpPlan> plans_;
  std::vector<StageShape> shapes_;
  std::vector<ParamEntry> layout_;
  std::size_t param_count_ = 0;
  std::size_t running_count_ = 0;

  template <typename F>
  void for_each_unit(F&& f) const {
    for (const auto& op : plans_)
      if (const auto* u = std::get_if<detail::UnitPlan>(&op))
        f(*u);
      else if (const auto* d = std::get_if<detail::DensePlan>(&op))
        for (const auto& iu : d->units) f(iu);
  }

  detail::UnitPlan plan_unit(const ConvSpec& c, int groups, StageShape in,
                             std::string name) {
    if (c.in_channels != in.c)
      throw std::invalid_argument("network: " + name + " expects " +
                                  std::to_string(c.in_channels) + " channels, got " +
                                  std::to_string(in.c));
    if (c.out_channels < 1)
      throw std::invalid_argument("network: " + name + " needs out_channels >= 1");
    if (groups < 1 || c.in_channels % groups != 0 || c.out_channels % groups != 0)
      throw std::invalid_argument("network: " + name +
                                  " channels not divisible by stem group count");
    detail::UnitPlan u;
    u.conv = c;
    u.groups = groups;
    u.in_shape = in;
    u.out_shape = {conv_out_dim(in.h, c.kernel_h, c.stride, c.pad),
                   conv_out_dim(in.w, c.kernel_w, c.stride, c.pad), c.out_channels};
    if (u.out_shape.h < 1 || u.out_shape.w < 1)
      throw std::invalid_argument("network: " + name + " collapses to empty output");
    u.name = std::move(name);

    u.k_count = static_cast<std::size_t>(c.out_channels) * (c.in_channels / groups) *
                c.kernel_h * c.kernel_w;
    u.k_off = param_count_;
    layout_.push_back({u.name + ".kernel", u.k_off, u.k_count});
    param_count_ += u.k_count;
    u.a_off = param_count_;
    layout_.push_back({u.name + ".alpha", u.a_off, (std::size_t)c.out_channels});
    param_count_ += c.out_channels;
    u.b_off = param_count_;
    layout_.push_back({u.name + ".beta", u.b_off, (std::size_t)c.out_channels});
    param_count_ += c.out_channels;
    u.r_off = running_count_;
    running_count_ += 2 * static_cast<std::size_t>(c.out_channels);
    return u;
  }

  void build() {
    if (spec_.in_h < 1 || spec_.in_w < 1 || spec_.in_channels < 1)
      throw std::invalid_argument("network: input schema must be positive");
    if (spec_.layers.empty()) throw std::invalid_argument("network: no layers");
    if (!(spec_.bn_eps > 0.0)) throw std::invalid_argument("network: bn_eps must be > 0");
    if (spec_.bn_momentum < 0.0 || spec_.bn_momentum >= 1.0)
      throw std::invalid_argument("network: bn_momentum must lie in [0, 1)");
    if (spec_.stem_mode == StemMode::separate &&
        !std::holds_alternative<ConvSpec>(spec_.layers.front()))
      throw std::invalid_argument(
          "network: separate stem requires the first layer to be a conv");

    StageShape cur{spec_.in_h, spec_.in_w, spec_.in_channels};
    shapes_.push_back(cur);
    int conv_idx = 0, block_idx = 0;
    for (std::size_t i = 0; i < spec_.layers.size(); ++i) {
      if (const auto* c = std::get_if<ConvSpec>(&spec_.layers[i])) {
        int groups =
            (i == 0 && spec_.stem_mode == StemMode::separate) ? spec_.in_channels : 1;
        auto u = plan_unit(*c, groups, cur, "conv" + std::to_string(conv_idx++));
        cur = u.out_shape;
        plans_.emplace_back(std::move(u));
      } else if (const auto* d = std::get_if<DenseBlockSpec>(&spec_.layers[i])) {
        if (d->depth < 0)
          throw std::invalid_argument("network: dense block depth must be >= 0");
        if (d->depth > 0 && (d->growth < 1 || d->kernel % 2 == 0))
          throw std::invalid_argument(
              "network: dense block needs growth >= 1 and an odd kernel");
        detail::DensePlan plan;
        plan.spec = *d;
        plan.in_shape = cur;
        std::string base = "block" + std::to_string(block_idx++);
        for (int l = 0; l < d->depth; ++l) {
          ConvSpec ic;
          ic.kernel_h = ic.kernel_w = d->kernel;
          ic.in_channels = cur.c + l * d->growth;
          ic.out_channels = d->growth;
          ic.stride = 1;
          ic.pad = d->kernel / 2;
          ic.relu_eps = d->relu_eps;
          StageShape in{cur.h, cur.w, ic.in_channels};
          plan.units.push_back(plan_unit(ic, 1, in, base + ".conv" + std::to_string(l)));
        }
        plan.out_shape = {cur.h, cur.w, cur.c + d->depth * d->growth};
        cur = plan.out_shape;
        plans_.emplace_back(std::move(plan));
      } else {
        const auto& r = std::get<ResizeSpec>(spec_.layers[i]);
        if (r.target_h < 1 || r.target_w < 1)
          throw std::invalid_argument("network: resize target must be positive");
        plans_.emplace_back(detail::ResizePlan{cur, r.target_h, r.target_w});
        cur = {r.target_h, r.target_w, cur.c};
      }
      shapes_.push_back(cur);
    }
  }

  void check_io(const Batch& input, const std::vector<double>& params,
                const std::vector<double>& running) const {
    if (input.empty()) throw std::invalid_argument("network: empty batch");
    for (const Field& f : input)
      if (f.h != spec_.in_h || f.w != spec_.in_w || f.c != spec_.in_channels)
        throw std::invalid_argument("network: input field shape mismatch");
    if (params.size() != param_count_)
      throw std::invalid_argument("network: parameter vector has wrong length");
    if (running.size() != running_count_)
      throw std::invalid_argument("network: running-stat vector has wrong length");
  }

  Batch unit_forward(const detail::UnitPlan& u, const Batch& x,
                     const std::vector<double>& params, std::vector<double>& running,
                     NetMode mode, std::vector<detail::UnitTape>* tape_slot,
                     int threads) const {
    const int n = static_cast<int>(x.size());
    const int co = u.conv.out_channels;
    const double relu_eps = u.conv.relu_eps;
    Batch padded(n), pre(n), out(n);
    parallel_for(n, threads, [&](int s) {
      padded[s] = detail::pad_field(x[s], u.conv.pad);
      pre[s] = Field(u.out_shape.h, u.out_shape.w, co);
      detail::conv_padded(padded[s], params.data() + u.k_off, u.conv.kernel_h,
                          u.conv.kernel_w, u.conv.stride, u.groups, pre[s]);
    });

    const double eps = spec_.bn_eps;
    std::vector<double> mu(co, 0.0), var(co, 0.0);
    const std::size_t plane = pre[0].plane();

    if (mode == NetMode::train) {
      // Batch statistics over samples and spatial positions, fixed order.
      const double count = static_cast<double>(n) * plane;
      for (int c = 0; c < co; ++c) {
        double acc = 0.0;
        for (int s = 0; s < n; ++s) {
          const double* p = pre[s].chan(c);
          for (std::size_t i = 0; i < plane; ++i) acc += std::max(p[i], relu_eps);
        }
        mu[c] = acc / count;
      }
      for (int c = 0; c < co; ++c) {
        double acc = 0.0;
        for (int s = 0; s < n; ++s) {
          const double* p = pre[s].chan(c);
          for (std::size_t i = 0; i < plane; ++i) {
            double d = std::max(p[i], relu_eps) - mu[c];
            acc += d * d;
          }
        }
        var[c] = acc / count;
      }
      for (int c = 0; c < co; ++c) {
        running[u.r_off + c] = spec_.bn_momentum * running[u.r_off + c] +
                               (1.0 - spec_.bn_momentum) * mu[c];
        running[u.r_off + co + c] = spec_.bn_momentum * running[u.r_off + co + c] +
                                    (1.0 - spec_.bn_momentum) * var[c];
      }
    } else {
      for (int c = 0; c < co; ++c) {
        mu[c] = running[u.r_off + c];
        var[c] = running[u.r_off + co + c];
      }
    }

    Batch xhat(n);
    parallel_for(n, threads, [&](int s) {
      xhat[s] = Field(u.out_shape.h, u.out_shape.w, co);
      out[s] = Field(u.out_shape.h, u.out_shape.w, co);
      for (int c = 0; c < co; ++c) {
        const double inv_std = 1.0 / std::sqrt(var[c] + eps);
        const double alpha = params[u.a_off + c];
        const double beta = params[u.b_off + c];
        const double* p = pre[s].chan(c);
        double* xh = xhat[s].chan(c);
        double* o = out[s].chan(c);
        for (std::size_t i = 0; i < plane; ++i) {
          double r = std::max(p[i], relu_eps);
          xh[i] = (r - mu[c]) * inv_std;
          o[i] = alpha * xh[i] + beta;
        }
      }
    });

    if (tape_slot) {
      tape_slot->resize(1);
      auto& t = (*tape_slot)[0];
      t.padded = std::move(padded);
      t.pre_act = std::move(pre);
      t.xhat = std::move(xhat);
      t.mu = std::move(mu);
      t.var = std::move(var);
    }
    return out;
  }

  /// Backward through the normalization, the nonlinearity, then the
  /// convolution. Parameter gradients are reduced over samples in index
  /// order so results do not depend on the thread count.
  Batch unit_backward(const detail::UnitPlan& u, detail::UnitTape& t, const Batch& dy,
                      const std::vector<double>& params, std::vector<double>& grads,
                      int threads) const {
    const int n = static_cast<int>(dy.size());
    const int co = u.conv.out_channels;
    const std::size_t plane = dy[0].plane();
    const double count = static_cast<double>(n) * plane;
    const double relu_eps = u.conv.relu_eps;

    std::vector<double> sum_dy(static_cast<std::size_t>(n) * co, 0.0);
    std::vector<double> sum_dyx(static_cast<std::size_t>(n) * co, 0.0);
    parallel_for(n, threads, [&](int s) {
      for (int c = 0; c < co; ++c) {
        const double* d = dy[s].chan(c);
        const double* xh = t.xhat[s].chan(c);
        double a = 0.0, b = 0.0;
        for (std::size_t i = 0; i < plane; ++i) {
          a += d[i];
          b += d[i] * xh[i];
        }
        sum_dy[static_cast<std::size_t>(s) * co + c] = a;
        sum_dyx[static_cast<std::size_t>(s) * co + c] = b;
      }
    });
    std::vector<double> tot_dy(co, 0.0), tot_dyx(co, 0.0);
    for (int s = 0; s < n; ++s)
      for (int c = 0; c < co; ++c) {
        tot_dy[c] += sum_dy[static_cast<std::size_t>(s) * co + c];
        tot_dyx[c] += sum_dyx[static_cast<std::size_t>(s) * co + c];
      }
    for (int c = 0; c < co; ++c) {
      grads[u.b_off + c] += tot_dy[c];
      grads[u.a_off + c] += tot_dyx[c];
    }

    Batch dx(n);
    std::vector<std::vector<double>> dk(n);
    parallel_for(n, threads, [&](int s) {
      Field dv(u.out_shape.h, u.out_shape.w, co);
      for (int c = 0; c < co; ++c) {
        const double alpha = params[u.a_off + c];
        const double inv_std = 1.0 / std::sqrt(t.var[c] + spec_.bn_eps);
        const double* d = dy[s].chan(c);
        const double* xh = t.xhat[s].chan(c);
        const double* p = t.pre_act[s].chan(c);
        double* o = dv.chan(c);
        const double mean_dy = tot_dy[c] / count;
        const double mean_dyx = tot_dyx[c] / count;
        for (std::size_t i = 0; i < plane; ++i) {
          double dxhat = d[i] * alpha;
          double dr = inv_std * (dxhat - alpha * (mean_dy + xh[i] * mean_dyx));
          o[i] = p[i] > relu_eps ? dr : 0.0;
        }
      }
      dk[s].assign(u.k_count, 0.0);
      detail::conv_grad_kernel(t.padded[s], dv, u.conv.kernel_h, u.conv.kernel_w,
                               u.conv.stride, u.groups, dk[s].data());
      Field dpad(t.padded[s].h, t.padded[s].w, t.padded[s].c);
      detail::conv_grad_input(dv, params.data() + u.k_off, u.conv.kernel_h,
                              u.conv.kernel_w, u.conv.stride, u.groups, dpad);
      dx[s] = detail::unpad_field(dpad, u.conv.pad);
    });
    for (int s = 0; s < n; ++s)
      for (std::size_t i = 0; i < u.k_count; ++i) grads[u.k_off + i] += dk[s][i];
    return dx;
  }

  Batch dense_forward(const detail::DensePlan& d, const Batch& x,
                      const std::vector<double>& params, std::vector<double>& running,
                      NetMode mode, std::vector<detail::UnitTape>* tape_slot,
                      int threads) const {
    const int n = static_cast<int>(x.size());
    if (tape_slot) tape_slot->resize(d.units.size());
    std::vector<Batch> parts;
    parts.push_back(x);
    for (std::size_t l = 0; l < d.units.size(); ++l) {
      Batch cat(n);
      for (int s = 0; s < n; ++s) cat[s] = concat_channels(parts, s);
      std::vector<detail::UnitTape> local;
      Batch y = unit_forward(d.units[l], cat, params, running, mode,
                             tape_slot ? &local : nullptr, threads);
      if (tape_slot) (*tape_slot)[l] = std::move(local[0]);
      parts.push_back(std::move(y));
    }
    if (parts.size() == 1) return parts[0];
    Batch out(n);
    for (int s = 0; s < n; ++s) out[s] = concat_channels(parts, s);
    return out;
  }

  Batch dense_backward(const detail::DensePlan& d, std::vector<detail::UnitTape>& tapes,
                       const Batch& dout, const std::vector<double>& params,
                       std::vector<double>& grads, int threads) const {
    const int n = static_cast<int>(dout.size());
    const int depth = d.spec.depth;
    const int c0 = d.in_shape.c;
    const int k = d.spec.growth;

    // grad_parts[s][0] covers the block input, slot l+1 covers inner output l.
    std::vector<std::vector<Field>> grad_parts(n);
    for (int s = 0; s < n; ++s) {
      grad_parts[s].resize(depth + 1);
      grad_parts[s][0] = slice_channels(dout[s], 0, c0);
      for (int l = 0; l < depth; ++l)
        grad_parts[s][l + 1] = slice_channels(dout[s], c0 + l * k, k);
    }

    for (int l = depth - 1; l >= 0; --l) {
      Batch dy(n);
      for (int s = 0; s < n; ++s) dy[s] = std::move(grad_parts[s][l + 1]);
      Batch dcat = unit_backward(d.units[l], tapes[l], dy, params, grads, threads);
      parallel_for(n, threads, [&](int s) {
        add_slice(grad_parts[s][0], dcat[s], 0);
        for (int j = 0; j < l; ++j) add_slice(grad_parts[s][j + 1], dcat[s], c0 + j * k);
      });
    }

    Batch dx(n);
    for (int s = 0; s < n; ++s) dx[s] = std::move(grad_parts[s][0]);
    return dx;
  }

  static Field concat_channels(const std::vector<Batch>& parts, int s) {
    int c_total = 0;
    for (const auto& p : parts) c_total += p[s].c;
    Field out(parts[0][s].h, parts[0][s].w, c_total);
    double* dst = out.data.data();
    for (const auto& p : parts) {
      std::copy(p[s].data.begin(), p[s].data.end(), dst);
      dst += p[s].data.size();
    }
    return out;
  }

  static Field slice_channels(const Field& f, int from, int count) {
    Field out(f.h, f.w, count);
    std::copy(f.chan(from), f.chan(from) + out.size(), out.data.data());
    return out;
  }

  static void add_slice(Field& dst, const Field& src, int from) {
    const double* s = src.chan(from);
    for (std::size_t i = 0; i < dst.size(); ++i) dst.data[i] += s[i];
  }
};

/// Named presets. Encoders halve the resolution twice through strided convs
/// (kernel 3 with pads 0 then 2, landing 64 on 31 and then 17); decoders
/// mirror the recorded shapes with bicubic upsampling followed by a conv.
inline NetworkSpec make_preset(const std::string& name, int grid_n, int c_in, int c_out,
                               StemMode stem = StemMode::joint) {
  if (grid_n < 8) throw std::invalid_argument("make_preset: grid too small");
  if (c_in < 1 || c_out < 1)
    throw std::invalid_argument("make_preset: channel counts must be >= 1");

  NetworkSpec spec;
  spec.in_h = spec.in_w = grid_n;
  spec.in_channels = c_in;
  spec.stem_mode = stem;

  auto conv = [](int k, int ci, int co, int s, int p) {
    return ConvSpec{k, k, ci, co, s, p, 0.0};
  };
  int half = conv_out_dim(grid_n, 3, 2, 0);

  if (name == "fr9") {
    spec.layers = {conv(3, c_in, 24, 2, 0),    DenseBlockSpec{3, 12},
                   ResizeSpec{grid_n, grid_n}, conv(3, 60, 24, 1, 1),
                   DenseBlockSpec{2, 12},      conv(3, 48, 16, 1, 1),
                   conv(3, 16, c_out, 1, 1)};
    return spec;
  }
  if (name == "fr21") {
    spec.layers = {conv(3, c_in, 48, 2, 0), DenseBlockSpec{4, 16},
                   conv(3, 112, 64, 2, 2),  DenseBlockSpec{6, 16},
                   ResizeSpec{half, half},  conv(3, 160, 64, 1, 1),
                   DenseBlockSpec{4, 16},   ResizeSpec{grid_n, grid_n},
                   conv(3, 128, 48, 1, 1),  conv(3, 48, 24, 1, 1),
                   conv(3, 24, 12, 1, 1),   conv(3, 12, c_out, 1, 1)};
    return spec;
  }
  if (name == "fr25") {
    spec.layers = {conv(3, c_in, 64, 2, 0), DenseBlockSpec{4, 16},
                   conv(3, 128, 64, 2, 2),  DenseBlockSpec{6, 16},
                   ResizeSpec{half, half},  conv(3, 160, 64, 1, 1),
                   DenseBlockSpec{4, 16},   ResizeSpec{grid_n, grid_n},
                   conv(3, 128, 48, 1, 1),  conv(3, 48, 72, 1, 1),
                   DenseBlockSpec{4, 18},   conv(3, 144, 72, 1, 1),
                   conv(3, 72, c_out, 1, 1)};
    return spec;
  }
  throw config_error("make_preset: unknown preset '" + name + "'");
}

}  // namespace fieldreg
