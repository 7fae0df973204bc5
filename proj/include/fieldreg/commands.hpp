#pragma once

#include <chrono>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

#include "fieldreg/checkpoint.hpp"
#include "fieldreg/plate_fem.hpp"
#include "fieldreg/run_config.hpp"
#include "fieldreg/train.hpp"
#include "fieldreg/uq.hpp"

namespace fieldreg {

namespace detail {

class StageTimer {
 public:
  StageTimer() : start_(std::chrono::steady_clock::now()) {}
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  std::chrono::steady_clock::time_point start_;
};

/// The manifest is the one output allowed to differ between reruns: it holds
/// the wall time. Everything else a command writes is byte-reproducible.
inline void write_manifest(const std::filesystem::path& path, const RunConfig& cfg,
                           const std::string& command, double wall_seconds,
                           const std::vector<std::pair<std::string, std::string>>& stats) {
  std::string buf;
  buf += "command: " + command + "\n";
  buf += "wall_seconds: " + fmt_g17(wall_seconds) + "\n";
  for (const auto& [k, v] : stats) buf += k + ": " + v + "\n";
  buf += "config:\n";
  buf += run_config_to_json(cfg).dump(2);
  buf.push_back('\n');
  spew(path, buf, "write_manifest");
}

inline void remove_if_exists(const std::filesystem::path& p) {
  std::error_code ec;
  std::filesystem::remove(p, ec);
}

}  // namespace detail

/// Draws the training and test ensembles and writes them as FRDS files plus
/// a manifest. A failure mid-write removes whatever partial outputs exist so
/// a rerun never reads half a dataset.
inline void cmd_gen_data(const RunConfig& cfg, int threads) {
  validate_run_config(cfg);
  std::filesystem::create_directories(cfg.out_dir);
  detail::StageTimer timer;

  DataGenConfig gen;
  gen.kind = cfg.kind;
  gen.grid_n = cfg.grid_n;
  gen.e_field = cfg.e_field;
  gen.load_field = cfg.load_field;
  gen.plate = cfg.plate;
  gen.uniform_load = cfg.uniform_load;
  gen.threads = threads;

  try {
    gen.n_samples = cfg.n_train;
    gen.seed = stage_seed(cfg.seed, "gen/train");
    Dataset train_ds = generate_plate_dataset(gen);

    gen.n_samples = cfg.n_test;
    gen.seed = stage_seed(cfg.seed, "gen/test");
    Dataset test_ds = generate_plate_dataset(gen);

    dataset_write(cfg.train_data, train_ds);
    dataset_write(cfg.test_data, test_ds);

    double lo = train_ds.outputs[0].data[0], hi = lo;
    for (const Field& f : train_ds.outputs)
      for (double v : f.data) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
      }
    detail::write_manifest(cfg.out_dir / "gen_manifest.txt", cfg, "gen-data", timer.seconds(),
                           {{"n_train", std::to_string(cfg.n_train)},
                            {"n_test", std::to_string(cfg.n_test)},
                            {"train_output_min", detail::fmt_g17(lo)},
                            {"train_output_max", detail::fmt_g17(hi)}});
    std::printf("gen-data: wrote %s (%d) and %s (%d)\n", cfg.train_data.string().c_str(),
                cfg.n_train, cfg.test_data.string().c_str(), cfg.n_test);
  } catch (...) {
    detail::remove_if_exists(cfg.train_data);
    detail::remove_if_exists(cfg.test_data);
    throw;
  }
}

namespace detail {

inline void check_dataset_schema(const RunConfig& cfg, const Dataset& ds, const char* name) {
  if (ds.inputs.empty()) throw config_error(std::string("config: ") + name + " is empty");
  const Field& in = ds.inputs.front();
  const Field& out = ds.outputs.front();
  if (in.h != cfg.grid_n || in.w != cfg.grid_n || in.c != cfg.input_channels() ||
      out.h != cfg.grid_n || out.w != cfg.grid_n || out.c != cfg.output_channels())
    throw config_error(std::string("config: ") + name +
                       " schema does not match the case/grid in the config");
}

}  // namespace detail

/// Trains (or resumes) the configured network on the configured dataset and
/// writes the checkpoint, the history CSV, and a manifest. Resumption is
/// automatic: an existing compatible checkpoint continues from its epoch
/// count with its optimizer state.
inline void cmd_train(const RunConfig& cfg, int threads) {
  validate_run_config(cfg);
  NetworkSpec spec = network_spec_for(cfg);
  Network net(spec);

  Dataset train_ds = dataset_read(cfg.train_data);
  Dataset test_ds = dataset_read(cfg.test_data);
  detail::check_dataset_schema(cfg, train_ds, "train dataset");
  detail::check_dataset_schema(cfg, test_ds, "test dataset");

  std::filesystem::create_directories(cfg.out_dir);
  detail::StageTimer timer;

  std::vector<double> params, running;
  OptState opt;
  std::uint64_t start_epoch = 0;
  if (std::filesystem::exists(cfg.checkpoint)) {
    Checkpoint ck = checkpoint_read_for(cfg.checkpoint, net);
    params = std::move(ck.params);
    running = std::move(ck.running);
    if (ck.opt) opt = std::move(*ck.opt);
    start_epoch = ck.trained_epochs;
  } else {
    net.init_params(params, running, stage_seed(cfg.seed, "net/init"));
  }

  TrainConfig tc = cfg.train;
  tc.seed = stage_seed(cfg.seed, "train");
  std::vector<EvalRow> history =
      fit(net, params, running, opt, train_ds, test_ds, tc, start_epoch, threads);

  Checkpoint ck;
  ck.spec = spec;
  ck.trained_epochs = start_epoch + static_cast<std::uint64_t>(tc.epochs);
  ck.params = std::move(params);
  ck.running = std::move(running);
  ck.opt = std::move(opt);
  checkpoint_write(cfg.checkpoint, ck);
  history_write_csv(cfg.out_dir / "history.csv", history);

  const EvalRow& last = history.back();
  detail::write_manifest(cfg.out_dir / "train_manifest.txt", cfg, "train", timer.seconds(),
                         {{"trained_epochs", std::to_string(ck.trained_epochs)},
                          {"final_train_loss", detail::fmt_g17(last.train_loss)}});
  std::printf("train: epochs=%llu test_rmse=%s test_r2=%s\n",
              static_cast<unsigned long long>(ck.trained_epochs),
              detail::fmt_g17(last.test_rmse).c_str(), detail::fmt_g17(last.test_r2).c_str());
}

/// Runs the checkpointed model over the test set, reports RMSE and R², and
/// dumps the predictions as an FRDS file (inputs paired with predicted
/// fields) for offline recomputation.
inline void cmd_eval(const RunConfig& cfg, int threads) {
  validate_run_config(cfg);
  Network net(network_spec_for(cfg));
  Checkpoint ck = checkpoint_read_for(cfg.checkpoint, net);

  Dataset test_ds = dataset_read(cfg.test_data);
  detail::check_dataset_schema(cfg, test_ds, "test dataset");

  std::filesystem::create_directories(cfg.out_dir);
  detail::StageTimer timer;
  Batch preds =
      predict(net, test_ds.inputs, ck.params, ck.running, cfg.train.batch_size, threads);
  double test_rmse = rmse(preds, test_ds.outputs);
  double test_r2 = r_squared(preds, test_ds.outputs);

  Dataset dump;
  dump.seed = test_ds.seed;
  dump.inputs = test_ds.inputs;
  dump.outputs = preds;
  dataset_write(cfg.out_dir / "predictions.frds", dump);

  detail::write_manifest(cfg.out_dir / "eval_manifest.txt", cfg, "eval", timer.seconds(),
                         {{"n_test", std::to_string(test_ds.inputs.size())},
                          {"test_rmse", detail::fmt_g17(test_rmse)},
                          {"test_r2", detail::fmt_g17(test_r2)}});
  std::printf("eval: test_rmse=%s test_r2=%s\n", detail::fmt_g17(test_rmse).c_str(),
              detail::fmt_g17(test_r2).c_str());
}

namespace detail {

inline std::function<Field(const Field&)> surrogate_predictor(const Network& net,
                                                              Checkpoint& ck) {
  return [&net, &ck](const Field& in) {
    Batch out = net.infer({in}, ck.params, ck.running);
    return out.front();
  };
}

inline void export_uq_fields(const std::filesystem::path& dir, const std::string& tag,
                             const UqResult& res) {
  for (int ch = 0; ch < res.mean_field.c; ++ch) {
    std::string suffix = tag + "_ch" + std::to_string(ch);
    write_channel_csv(dir / ("mean_" + suffix + ".csv"), res.mean_field, ch);
    write_channel_csv(dir / ("var_" + suffix + ".csv"), res.var_field, ch);
    write_field_ppm(dir / ("mean_" + suffix + ".ppm"), res.mean_field, ch);
    write_field_ppm(dir / ("var_" + suffix + ".ppm"), res.var_field, ch);
  }
  for (std::size_t p = 0; p < res.pdf_curves.size(); ++p)
    if (!res.pdf_curves[p].grid.empty())
      write_pdf_csv(dir / ("pdf_" + tag + "_probe" + std::to_string(p) + ".csv"),
                    res.pdf_curves[p]);
}

}  // namespace detail

/// Monte Carlo through the surrogate; with reference_fem also through the
/// plate solver on the identical input ensemble, exporting error maps and
/// overlaid probe densities.
inline void cmd_uq(const RunConfig& cfg, bool reference_fem, int threads) {
  validate_run_config(cfg);
  Network net(network_spec_for(cfg));
  Checkpoint ck = checkpoint_read_for(cfg.checkpoint, net);

  std::filesystem::create_directories(cfg.out_dir);
  detail::StageTimer timer;

  UqSamplerSpec sampler;
  sampler.kind = cfg.kind;
  sampler.grid_n = cfg.grid_n;
  sampler.e_field = cfg.e_field;
  sampler.load_field = cfg.load_field;
  sampler.uniform_load = cfg.uniform_load;

  UqConfig uq;
  uq.n_samples = cfg.uq_samples;
  uq.seed = stage_seed(cfg.seed, "uq");
  uq.probes = cfg.probes;
  uq.pdf_points = cfg.pdf_points;
  uq.threads = threads;

  UqResult sur = run_uq(sampler, detail::surrogate_predictor(net, ck), uq);
  detail::export_uq_fields(cfg.out_dir, "surrogate", sur);

  std::vector<std::pair<std::string, std::string>> stats = {
      {"n_samples", std::to_string(cfg.uq_samples)},
      {"reference", reference_fem ? "fem" : "none"}};

  if (reference_fem) {
    UqResult ref = run_uq(sampler, fem_predictor(sampler, cfg.plate), uq);
    detail::export_uq_fields(cfg.out_dir, "fem", ref);
    Field mean_err = error_map(sur.mean_field, ref.mean_field);
    Field var_err = error_map(sur.var_field, ref.var_field);
    for (int ch = 0; ch < mean_err.c; ++ch) {
      write_channel_csv(cfg.out_dir / ("mean_error_ch" + std::to_string(ch) + ".csv"),
                        mean_err, ch);
      write_channel_csv(cfg.out_dir / ("var_error_ch" + std::to_string(ch) + ".csv"), var_err,
                        ch);
    }
    for (std::size_t p = 0; p < sur.pdf_curves.size(); ++p)
      if (!sur.pdf_curves[p].grid.empty() && !ref.pdf_curves[p].grid.empty())
        write_pdf_overlay_csv(cfg.out_dir / ("pdf_overlay_probe" + std::to_string(p) + ".csv"),
                              sur.pdf_curves[p], ref.pdf_curves[p]);
    stats.emplace_back("mean_rel_max_error", detail::fmt_g17(field_max_abs(mean_err)));
    stats.emplace_back("var_rel_max_error", detail::fmt_g17(field_max_abs(var_err)));
    std::printf("uq: n=%d mean_rel_max_error=%s var_rel_max_error=%s\n", cfg.uq_samples,
                detail::fmt_g17(field_max_abs(mean_err)).c_str(),
                detail::fmt_g17(field_max_abs(var_err)).c_str());
  } else {
    std::printf("uq: n=%d\n", cfg.uq_samples);
  }
  detail::write_manifest(cfg.out_dir / "uq_manifest.txt", cfg, "uq", timer.seconds(), stats);
}

/// Maps the input fields of an FRDS file through the checkpointed model and
/// writes an FRDS pairing each input with its predicted output field.
inline void cmd_predict(const RunConfig& cfg, int threads) {
  validate_run_config(cfg);
  Network net(network_spec_for(cfg));
  Checkpoint ck = checkpoint_read_for(cfg.checkpoint, net);

  Dataset in_ds = dataset_read(cfg.test_data);
  const Field& f0 = in_ds.inputs.front();
  if (f0.h != cfg.grid_n || f0.w != cfg.grid_n || f0.c != cfg.input_channels())
    throw config_error("config: prediction inputs do not match the case/grid in the config");

  std::filesystem::create_directories(cfg.out_dir);
  detail::StageTimer timer;
  Batch preds =
      predict(net, in_ds.inputs, ck.params, ck.running, cfg.train.batch_size, threads);

  Dataset dump;
  dump.seed = in_ds.seed;
  dump.inputs = in_ds.inputs;
  dump.outputs = preds;
  dataset_write(cfg.out_dir / "predictions.frds", dump);
  detail::write_manifest(cfg.out_dir / "predict_manifest.txt", cfg, "predict", timer.seconds(),
                         {{"n_inputs", std::to_string(in_ds.inputs.size())}});
  std::printf("predict: wrote %zu predictions\n", preds.size());
}

}  // namespace fieldreg
