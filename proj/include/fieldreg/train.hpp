#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "fieldreg/cnn.hpp"
#include "fieldreg/errors.hpp"
#include "fieldreg/field.hpp"
#include "fieldreg/rng.hpp"

namespace fieldreg {

/// Optimizer and schedule settings. Defaults are the ones used throughout the
/// bundled cases; validate() rejects combinations that would make the schedule
/// or the moment estimates meaningless.
struct TrainConfig {
  int epochs = 500;
  int batch_size = 8;
  double eta0 = 0.005;        // initial learning rate
  double anneal_rate = 0.75;  // multiplicative decay factor, (0, 1]
  int anneal_every = 20;      // epochs per decay step
  double weight_decay = 7e-6;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  std::uint64_t seed = 0;
  int eval_every = 20;
  /// Per output channel loss weights, empty means uniform.
  std::vector<double> channel_weights;

  void validate() const {
    if (epochs < 0) throw config_error("train config: epochs must be >= 0");
    if (batch_size < 1) throw config_error("train config: batch_size must be >= 1");
    if (!(eta0 > 0.0)) throw config_error("train config: eta0 must be positive");
    if (!(anneal_rate > 0.0) || anneal_rate > 1.0)
      throw config_error("train config: anneal_rate must be in (0, 1]");
    if (anneal_every < 1) throw config_error("train config: anneal_every must be >= 1");
    if (weight_decay < 0.0) throw config_error("train config: weight_decay must be >= 0");
    if (beta1 < 0.0 || beta1 >= 1.0 || beta2 < 0.0 || beta2 >= 1.0)
      throw config_error("train config: beta1 and beta2 must be in [0, 1)");
    if (!(adam_eps > 0.0)) throw config_error("train config: adam_eps must be positive");
    if (eval_every < 1) throw config_error("train config: eval_every must be >= 1");
    for (double w : channel_weights)
      if (!(w >= 0.0)) throw config_error("train config: channel weights must be >= 0");
  }
};

/// Stepped geometric schedule: eta0 * rate^floor(epoch / every). The power is
/// computed by repeated multiplication so reruns agree to the last bit.
inline double lr_at(const TrainConfig& cfg, std::uint64_t epoch) {
  std::uint64_t k = epoch / static_cast<std::uint64_t>(cfg.anneal_every);
  double f = 1.0;
  for (std::uint64_t i = 0; i < k; ++i) f *= cfg.anneal_rate;
  return cfg.eta0 * f;
}

/// Mean over the batch of the squared field distance, optionally weighting
/// each output channel. Writes the gradient with respect to the predictions
/// into *grad when given.
inline double mse_loss(const Batch& pred, const Batch& target,
                       const std::vector<double>& channel_weights = {},
                       Batch* grad = nullptr) {
  if (pred.empty() || pred.size() != target.size())
    throw std::invalid_argument("mse_loss: need matching nonempty batches");
  const Field& f0 = pred.front();
  if (!channel_weights.empty() && channel_weights.size() != static_cast<std::size_t>(f0.c))
    throw std::invalid_argument("mse_loss: channel weight count does not match channels");
  if (grad) grad->assign(pred.size(), Field(f0.h, f0.w, f0.c));

  const double inv_n = 1.0 / static_cast<double>(pred.size());
  double loss = 0.0;
  for (std::size_t s = 0; s < pred.size(); ++s) {
    if (!pred[s].same_shape(f0) || !target[s].same_shape(f0))
      throw std::invalid_argument("mse_loss: prediction and target shapes differ");
    for (int ch = 0; ch < f0.c; ++ch) {
      const double wc = channel_weights.empty() ? 1.0 : channel_weights[ch];
      const double* p = pred[s].chan(ch);
      const double* t = target[s].chan(ch);
      double* g = grad ? (*grad)[s].chan(ch) : nullptr;
      for (int i = 0; i < f0.plane(); ++i) {
        double d = p[i] - t[i];
        loss += wc * d * d;
        if (g) g[i] = 2.0 * wc * d * inv_n;
      }
    }
  }
  return loss * inv_n;
}

/// Sum of squares of every learnable parameter. The ridge penalty is
/// weight_decay times this; running statistics are not parameters and never
/// enter it.
inline double squared_norm(const std::vector<double>& params) {
  double s = 0.0;
  for (double p : params) s += p * p;
  return s;
}

/// Adds the ridge gradient 2*lambda*theta in place.
inline void add_decay_gradient(std::vector<double>& grads,
                               const std::vector<double>& params, double lambda) {
  if (grads.size() != params.size())
    throw std::invalid_argument("add_decay_gradient: buffer sizes differ");
  if (lambda == 0.0) return;
  for (std::size_t i = 0; i < grads.size(); ++i) grads[i] += 2.0 * lambda * params[i];
}

namespace detail {

inline std::string param_block_name(const std::vector<ParamEntry>* layout, std::size_t i) {
  if (layout)
    for (const ParamEntry& e : *layout)
      if (i >= e.offset && i < e.offset + e.count) return e.name;
  return "parameter " + std::to_string(i);
}

}  // namespace detail

/// One Adam update with bias correction. The step counter increments first,
/// so the very first call corrects with beta^1. Moment buffers are allocated
/// lazily on first use. A non-finite gradient aborts the step and names the
/// offending parameter block when a layout is given.
inline void adam_step(std::vector<double>& params, const std::vector<double>& grads,
                      OptState& opt, double lr, const TrainConfig& cfg,
                      const std::vector<ParamEntry>* layout = nullptr) {
  if (grads.size() != params.size())
    throw std::invalid_argument("adam_step: gradient size does not match parameters");
  if (opt.m.empty()) opt.m.assign(params.size(), 0.0);
  if (opt.v.empty()) opt.v.assign(params.size(), 0.0);
  if (opt.m.size() != params.size() || opt.v.size() != params.size())
    throw std::invalid_argument("adam_step: optimizer state size does not match parameters");
  for (std::size_t i = 0; i < grads.size(); ++i)
    if (!std::isfinite(grads[i]))
      throw numerical_error("adam_step: non-finite gradient in " +
                            detail::param_block_name(layout, i));

  opt.step += 1;
  const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(opt.step));
  const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(opt.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    opt.m[i] = cfg.beta1 * opt.m[i] + (1.0 - cfg.beta1) * grads[i];
    opt.v[i] = cfg.beta2 * opt.v[i] + (1.0 - cfg.beta2) * grads[i] * grads[i];
    double mhat = opt.m[i] / c1;
    double vhat = opt.v[i] / c2;
    params[i] -= lr * mhat / (std::sqrt(vhat) + cfg.adam_eps);
  }
}

/// Root mean squared field distance over a set of prediction/target pairs.
/// The mean is over pairs; each pair contributes its full squared distance.
inline double rmse(const Batch& pred, const Batch& target) {
  if (pred.empty() || pred.size() != target.size())
    throw std::invalid_argument("rmse: need matching nonempty sets");
  double s = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (!pred[i].same_shape(target[i]))
      throw std::invalid_argument("rmse: prediction and target shapes differ");
    for (std::size_t j = 0; j < pred[i].data.size(); ++j) {
      double d = pred[i].data[j] - target[i].data[j];
      s += d * d;
    }
  }
  return std::sqrt(s / static_cast<double>(pred.size()));
}

/// Coefficient of determination against the entrywise mean target field,
/// pooled over every output channel. Identical targets make the reference
/// variance vanish and the score undefined.
inline double r_squared(const Batch& pred, const Batch& target) {
  if (pred.empty() || pred.size() != target.size())
    throw std::invalid_argument("r_squared: need matching nonempty sets");
  const Field& f0 = target.front();
  Field mean(f0.h, f0.w, f0.c);
  for (const Field& t : target) {
    if (!t.same_shape(f0)) throw std::invalid_argument("r_squared: target shapes differ");
    for (std::size_t j = 0; j < t.data.size(); ++j) mean.data[j] += t.data[j];
  }
  const double inv_n = 1.0 / static_cast<double>(target.size());
  for (double& v : mean.data) v *= inv_n;

  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (!pred[i].same_shape(f0))
      throw std::invalid_argument("r_squared: prediction and target shapes differ");
    for (std::size_t j = 0; j < f0.data.size(); ++j) {
      double e = pred[i].data[j] - target[i].data[j];
      double b = mean.data[j] - target[i].data[j];
      num += e * e;
      den += b * b;
    }
  }
  if (den == 0.0)
    throw numerical_error("r_squared: targets are all identical, score undefined");
  return 1.0 - num / den;
}

/// Runs the network in inference mode over an arbitrary number of fields,
/// chunking to bound peak memory.
inline Batch predict(const Network& net, const Batch& inputs,
                     const std::vector<double>& params, std::vector<double>& running,
                     int chunk = 8, int threads = 1) {
  if (chunk < 1) throw std::invalid_argument("predict: chunk must be >= 1");
  Batch out;
  out.reserve(inputs.size());
  for (std::size_t i = 0; i < inputs.size(); i += static_cast<std::size_t>(chunk)) {
    std::size_t hi = std::min(inputs.size(), i + static_cast<std::size_t>(chunk));
    Batch part(inputs.begin() + static_cast<std::ptrdiff_t>(i),
               inputs.begin() + static_cast<std::ptrdiff_t>(hi));
    Batch res = net.infer(part, params, running, threads);
    for (Field& f : res) out.push_back(std::move(f));
  }
  return out;
}

/// One history record per evaluation point. train_loss is the epoch mean of
/// the regularized mini-batch losses; the test metrics come from a full
/// inference pass with the running statistics of that moment.
struct EvalRow {
  std::uint64_t epoch = 0;  // one past the epoch just finished
  double lr = 0.0;
  double train_loss = 0.0;
  double test_rmse = 0.0;
  double test_r2 = 0.0;
};

inline void history_write_csv(const std::filesystem::path& path,
                              const std::vector<EvalRow>& history) {
  std::string buf = "epoch,lr,train_loss,test_rmse,test_r2\n";
  for (const EvalRow& r : history) {
    buf += std::to_string(r.epoch);
    buf.push_back(',');
    buf += detail::fmt_g17(r.lr);
    buf.push_back(',');
    buf += detail::fmt_g17(r.train_loss);
    buf.push_back(',');
    buf += detail::fmt_g17(r.test_rmse);
    buf.push_back(',');
    buf += detail::fmt_g17(r.test_r2);
    buf.push_back('\n');
  }
  detail::spew(path, buf, "history_write_csv");
}

/// Mini-batch gradient descent with Adam, a stepped learning rate schedule
/// and ridge regularization. Epoch numbering is absolute: resuming with
/// start_epoch equal to the checkpoint's trained epoch count reproduces the
/// uninterrupted run bit for bit, because shuffles are keyed by the absolute
/// epoch and the optimizer state carries over. The final partial mini-batch
/// of an epoch is trained on like any other. Returns one row per eval_every
/// epochs plus one for the final epoch when it falls off the grid.
inline std::vector<EvalRow> fit(const Network& net, std::vector<double>& params,
                                std::vector<double>& running, OptState& opt,
                                const Dataset& train_ds, const Dataset& test_ds,
                                const TrainConfig& cfg, std::uint64_t start_epoch = 0,
                                int threads = 1) {
  cfg.validate();
  if (train_ds.inputs.empty() || train_ds.inputs.size() != train_ds.outputs.size())
    throw std::invalid_argument("fit: training set needs matching nonempty sample lists");
  if (test_ds.inputs.empty() || test_ds.inputs.size() != test_ds.outputs.size())
    throw std::invalid_argument("fit: test set needs matching nonempty sample lists");

  const std::vector<ParamEntry>& layout = net.layout();
  std::vector<EvalRow> history;
  std::vector<std::size_t> order(train_ds.inputs.size());

  for (std::uint64_t e = 0; e < static_cast<std::uint64_t>(cfg.epochs); ++e) {
    const std::uint64_t epoch = start_epoch + e;
    const double lr = lr_at(cfg, epoch);

    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng shuffler(stage_seed(cfg.seed, "train/shuffle", epoch));
    shuffler.shuffle(order);

    double epoch_loss = 0.0;
    std::size_t batches = 0;
    for (std::size_t lo = 0; lo < order.size(); lo += static_cast<std::size_t>(cfg.batch_size)) {
      std::size_t hi = std::min(order.size(), lo + static_cast<std::size_t>(cfg.batch_size));
      Batch xb, yb;
      xb.reserve(hi - lo);
      yb.reserve(hi - lo);
      for (std::size_t i = lo; i < hi; ++i) {
        xb.push_back(train_ds.inputs[order[i]]);
        yb.push_back(train_ds.outputs[order[i]]);
      }

      const std::string where =
          "epoch " + std::to_string(epoch) + " batch " + std::to_string(batches);
      try {
        Tape tape;
        Batch pred = net.forward(xb, params, running, NetMode::train, &tape, threads);
        Batch grad_out;
        double loss = mse_loss(pred, yb, cfg.channel_weights, &grad_out);
        loss += cfg.weight_decay * squared_norm(params);
        if (!std::isfinite(loss))
          throw numerical_error("loss is not finite");
        epoch_loss += loss;

        std::vector<double> grads;
        net.backward(tape, grad_out, params, grads, nullptr, threads);
        add_decay_gradient(grads, params, cfg.weight_decay);
        adam_step(params, grads, opt, lr, cfg, &layout);
      } catch (const numerical_error& err) {
        throw numerical_error("fit: " + where + ": " + err.what());
      }
      ++batches;
    }

    const bool on_grid = (epoch + 1 - start_epoch) % static_cast<std::uint64_t>(cfg.eval_every) == 0;
    const bool last = e + 1 == static_cast<std::uint64_t>(cfg.epochs);
    if (on_grid || last) {
      Batch pred = predict(net, test_ds.inputs, params, running, cfg.batch_size, threads);
      EvalRow row;
      row.epoch = epoch + 1;
      row.lr = lr;
      row.train_loss = epoch_loss / static_cast<double>(batches);
      row.test_rmse = rmse(pred, test_ds.outputs);
      row.test_r2 = r_squared(pred, test_ds.outputs);
      history.push_back(row);
    }
  }
  return history;
}

}  // namespace fieldreg
