#pragma once

#include <cstdint>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "fieldreg/commands.hpp"
#include "fieldreg/errors.hpp"
#include "fieldreg/run_config.hpp"

#include "CLI11.hpp"

namespace fieldreg::cli {

/// Parses one subcommand invocation and dispatches it. Returns the process
/// exit code instead of throwing: 0 ok, 2 config/argument error, 3 numerical
/// failure, 4 I/O or file-format error.
inline int run(const std::vector<std::string>& args) {
  CLI::App app{"random-field plate surrogate toolkit"};
  app.require_subcommand(1);

  std::string config_path;
  std::optional<std::uint64_t> seed_override;
  int threads = static_cast<int>(std::thread::hardware_concurrency());
  if (threads < 1) threads = 1;
  std::string reference = "none";
  std::string out_override;

  auto add_common = [&](CLI::App* cmd) {
    cmd->add_option("--config", config_path, "JSON run configuration")->required();
    cmd->add_option("--seed", seed_override, "override the master seed");
    cmd->add_option("--threads", threads, "worker cap, default hardware concurrency");
    cmd->add_option("--out", out_override, "override paths.out_dir");
  };

  CLI::App* gen = app.add_subcommand("gen-data", "sample property fields and solve the plate");
  add_common(gen);
  CLI::App* train = app.add_subcommand("train", "fit the surrogate to a generated dataset");
  add_common(train);
  CLI::App* eval = app.add_subcommand("eval", "score a checkpoint on the test set");
  add_common(eval);
  CLI::App* uq = app.add_subcommand("uq", "Monte Carlo moments and densities");
  add_common(uq);
  uq->add_option("--reference", reference, "paired reference ensemble: fem or none")
      ->check(CLI::IsMember({"fem", "none"}));
  CLI::App* pred = app.add_subcommand("predict", "map stored input fields through a checkpoint");
  add_common(pred);

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) {
      std::puts(app.help().c_str());
      return 0;
    }
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }

  try {
    RunConfig cfg = run_config_from_file(config_path);
    if (seed_override) cfg.seed = *seed_override;
    if (!out_override.empty()) {
      RunConfig defaults;
      // Paths that were defaulted follow the new out_dir; explicit paths stay.
      std::filesystem::path old_dir = cfg.out_dir;
      cfg.out_dir = out_override;
      if (cfg.train_data == old_dir / "train.frds") cfg.train_data.clear();
      if (cfg.test_data == old_dir / "test.frds") cfg.test_data.clear();
      if (cfg.checkpoint == old_dir / "model.frm") cfg.checkpoint.clear();
      cfg.apply_path_defaults();
    }
    if (threads < 1) throw config_error("config: --threads must be >= 1");

    if (gen->parsed()) cmd_gen_data(cfg, threads);
    if (train->parsed()) cmd_train(cfg, threads);
    if (eval->parsed()) cmd_eval(cfg, threads);
    if (uq->parsed()) cmd_uq(cfg, reference == "fem", threads);
    if (pred->parsed()) cmd_predict(cfg, threads);
    return 0;
  } catch (const config_error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const std::invalid_argument& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const numerical_error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 3;
  } catch (const format_error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 4;
  } catch (const std::filesystem::filesystem_error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 4;
  } catch (const std::ios_base::failure& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 4;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
}

}  // namespace fieldreg::cli
