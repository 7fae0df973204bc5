#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "fieldreg/case_schema.hpp"
#include "fieldreg/checkpoint.hpp"
#include "fieldreg/cnn.hpp"
#include "fieldreg/errors.hpp"
#include "fieldreg/plate_fem.hpp"
#include "fieldreg/random_field.hpp"
#include "fieldreg/train.hpp"
#include "fieldreg/uq.hpp"

#include "json.hpp"

namespace fieldreg {

/// Everything a run needs, parsed from one JSON document. The master seed is
/// the single source of randomness; every stage derives its own stream from
/// it by name, so adding a stage never shifts another stage's draws.
struct RunConfig {
  CaseKind kind = CaseKind::one2one;
  int grid_n = 16;
  std::uint64_t seed = 0;

  RandomFieldSpec e_field;
  RandomFieldSpec load_field;
  double uniform_load = 1.0;

  PlateSpec plate;

  std::string preset = "fr9";  // fr9 | fr21 | fr25 | custom
  StemMode stem_mode = StemMode::joint;
  std::optional<NetworkSpec> custom_network;

  TrainConfig train;

  int n_train = 256;
  int n_test = 64;

  int uq_samples = 2000;
  std::vector<UqProbe> probes;
  int pdf_points = 256;

  std::filesystem::path out_dir = "out";
  std::filesystem::path train_data;  // default out_dir/train.frds
  std::filesystem::path test_data;   // default out_dir/test.frds
  std::filesystem::path checkpoint;  // default out_dir/model.frm

  void apply_path_defaults() {
    if (train_data.empty()) train_data = out_dir / "train.frds";
    if (test_data.empty()) test_data = out_dir / "test.frds";
    if (checkpoint.empty()) checkpoint = out_dir / "model.frm";
  }

  int input_channels() const { return case_input_channels(kind); }
  int output_channels() const { return case_output_channels(kind); }
};

namespace detail {

inline void reject_unknown_keys(const nlohmann::json& j, const char* section,
                                std::initializer_list<const char*> known) {
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool ok = false;
    for (const char* k : known)
      if (it.key() == k) {
        ok = true;
        break;
      }
    if (!ok)
      throw config_error(std::string("config: unknown key '") + it.key() + "' in " + section);
  }
}

inline void parse_field_law(const nlohmann::json& j, const char* section,
                            RandomFieldSpec& spec) {
  reject_unknown_keys(j, section,
                      {"sigma", "corr_len", "log_transform", "amplitude", "mean", "nugget"});
  if (j.contains("sigma")) spec.sigma = j.at("sigma").get<double>();
  if (j.contains("corr_len")) spec.corr_len = j.at("corr_len").get<double>();
  if (j.contains("log_transform")) spec.log_transform = j.at("log_transform").get<bool>();
  if (j.contains("amplitude")) spec.amplitude = j.at("amplitude").get<double>();
  if (j.contains("mean")) spec.mean = j.at("mean").get<double>();
  if (j.contains("nugget")) spec.nugget = j.at("nugget").get<double>();
}

}  // namespace detail

inline RunConfig run_config_from_json(const nlohmann::json& j) {
  RunConfig cfg;
  try {
    detail::reject_unknown_keys(j, "root",
                                {"case", "grid_n", "seed", "random_field", "fem", "network",
                                 "train", "data", "uq", "paths"});
    if (!j.contains("case")) throw config_error("config: missing required key 'case'");
    cfg.kind = parse_case(j.at("case").get<std::string>());
    if (j.contains("grid_n")) cfg.grid_n = j.at("grid_n").get<int>();
    if (j.contains("seed")) cfg.seed = j.at("seed").get<std::uint64_t>();

    if (j.contains("random_field")) {
      const auto& rf = j.at("random_field");
      detail::reject_unknown_keys(
          rf, "random_field",
          {"sigma", "corr_len", "log_transform", "amplitude", "mean", "nugget", "load",
           "uniform_load"});
      nlohmann::json base = rf;
      base.erase("load");
      base.erase("uniform_load");
      detail::parse_field_law(base, "random_field", cfg.e_field);
      if (rf.contains("load")) detail::parse_field_law(rf.at("load"), "random_field.load",
                                                       cfg.load_field);
      if (rf.contains("uniform_load")) cfg.uniform_load = rf.at("uniform_load").get<double>();
    }

    if (j.contains("fem")) {
      const auto& fem = j.at("fem");
      detail::reject_unknown_keys(fem, "fem", {"thickness", "poisson", "shear_correction"});
      if (fem.contains("thickness")) cfg.plate.thickness = fem.at("thickness").get<double>();
      if (fem.contains("poisson")) cfg.plate.poisson = fem.at("poisson").get<double>();
      if (fem.contains("shear_correction"))
        cfg.plate.shear_correction = fem.at("shear_correction").get<double>();
    }

    if (j.contains("network")) {
      const auto& net = j.at("network");
      detail::reject_unknown_keys(net, "network", {"preset", "stem_mode", "custom"});
      if (net.contains("preset")) cfg.preset = net.at("preset").get<std::string>();
      if (net.contains("stem_mode"))
        cfg.stem_mode = parse_stem_mode(net.at("stem_mode").get<std::string>());
      if (cfg.preset == "custom") {
        if (!net.contains("custom"))
          throw config_error("config: network.preset 'custom' needs a network.custom spec");
        cfg.custom_network = network_spec_from_json(net.at("custom"));
      } else if (net.contains("custom")) {
        throw config_error("config: network.custom is only allowed with preset 'custom'");
      }
    }

    if (j.contains("train")) {
      const auto& t = j.at("train");
      detail::reject_unknown_keys(
          t, "train",
          {"epochs", "batch_size", "eta0", "anneal_rate", "anneal_every", "weight_decay",
           "beta1", "beta2", "adam_eps", "eval_every", "channel_weights"});
      if (t.contains("epochs")) cfg.train.epochs = t.at("epochs").get<int>();
      if (t.contains("batch_size")) cfg.train.batch_size = t.at("batch_size").get<int>();
      if (t.contains("eta0")) cfg.train.eta0 = t.at("eta0").get<double>();
      if (t.contains("anneal_rate")) cfg.train.anneal_rate = t.at("anneal_rate").get<double>();
      if (t.contains("anneal_every")) cfg.train.anneal_every = t.at("anneal_every").get<int>();
      if (t.contains("weight_decay"))
        cfg.train.weight_decay = t.at("weight_decay").get<double>();
      if (t.contains("beta1")) cfg.train.beta1 = t.at("beta1").get<double>();
      if (t.contains("beta2")) cfg.train.beta2 = t.at("beta2").get<double>();
      if (t.contains("adam_eps")) cfg.train.adam_eps = t.at("adam_eps").get<double>();
      if (t.contains("eval_every")) cfg.train.eval_every = t.at("eval_every").get<int>();
      if (t.contains("channel_weights"))
        cfg.train.channel_weights = t.at("channel_weights").get<std::vector<double>>();
    }

    if (j.contains("data")) {
      const auto& d = j.at("data");
      detail::reject_unknown_keys(d, "data", {"n_train", "n_test"});
      if (d.contains("n_train")) cfg.n_train = d.at("n_train").get<int>();
      if (d.contains("n_test")) cfg.n_test = d.at("n_test").get<int>();
    }

    if (j.contains("uq")) {
      const auto& u = j.at("uq");
      detail::reject_unknown_keys(u, "uq", {"n_samples", "probes", "pdf_points"});
      if (u.contains("n_samples")) cfg.uq_samples = u.at("n_samples").get<int>();
      if (u.contains("pdf_points")) cfg.pdf_points = u.at("pdf_points").get<int>();
      if (u.contains("probes"))
        for (const auto& p : u.at("probes")) {
          if (!p.is_array() || p.size() != 3)
            throw config_error("config: each uq probe must be [row, col, channel]");
          cfg.probes.push_back(
              {p.at(0).get<int>(), p.at(1).get<int>(), p.at(2).get<int>()});
        }
    }

    if (j.contains("paths")) {
      const auto& p = j.at("paths");
      detail::reject_unknown_keys(p, "paths",
                                  {"out_dir", "train_data", "test_data", "checkpoint"});
      if (p.contains("out_dir")) cfg.out_dir = p.at("out_dir").get<std::string>();
      if (p.contains("train_data")) cfg.train_data = p.at("train_data").get<std::string>();
      if (p.contains("test_data")) cfg.test_data = p.at("test_data").get<std::string>();
      if (p.contains("checkpoint")) cfg.checkpoint = p.at("checkpoint").get<std::string>();
    }
  } catch (const nlohmann::json::exception& e) {
    throw config_error(std::string("config: ") + e.what());
  }
  cfg.apply_path_defaults();
  return cfg;
}

inline RunConfig run_config_from_file(const std::filesystem::path& path) {
  auto bytes = detail::slurp(path, "run_config");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(bytes.begin(), bytes.end());
  } catch (const nlohmann::json::exception& e) {
    throw config_error("config: " + path.string() + ": " + e.what());
  }
  return run_config_from_json(j);
}

/// Canonical echo of the parsed config, used in manifests and as the rerun
/// recipe. Round-trips through run_config_from_json.
inline nlohmann::json run_config_to_json(const RunConfig& cfg) {
  nlohmann::json j;
  j["case"] = to_string(cfg.kind);
  j["grid_n"] = cfg.grid_n;
  j["seed"] = cfg.seed;
  j["random_field"] = {{"sigma", cfg.e_field.sigma},
                       {"corr_len", cfg.e_field.corr_len},
                       {"log_transform", cfg.e_field.log_transform},
                       {"amplitude", cfg.e_field.amplitude},
                       {"mean", cfg.e_field.mean},
                       {"nugget", cfg.e_field.nugget},
                       {"load",
                        {{"sigma", cfg.load_field.sigma},
                         {"corr_len", cfg.load_field.corr_len},
                         {"log_transform", cfg.load_field.log_transform},
                         {"amplitude", cfg.load_field.amplitude},
                         {"mean", cfg.load_field.mean},
                         {"nugget", cfg.load_field.nugget}}},
                       {"uniform_load", cfg.uniform_load}};
  j["fem"] = {{"thickness", cfg.plate.thickness},
              {"poisson", cfg.plate.poisson},
              {"shear_correction", cfg.plate.shear_correction}};
  j["network"] = {{"preset", cfg.preset}, {"stem_mode", to_string(cfg.stem_mode)}};
  if (cfg.custom_network) j["network"]["custom"] = network_spec_to_json(*cfg.custom_network);
  j["train"] = {{"epochs", cfg.train.epochs},
                {"batch_size", cfg.train.batch_size},
                {"eta0", cfg.train.eta0},
                {"anneal_rate", cfg.train.anneal_rate},
                {"anneal_every", cfg.train.anneal_every},
                {"weight_decay", cfg.train.weight_decay},
                {"beta1", cfg.train.beta1},
                {"beta2", cfg.train.beta2},
                {"adam_eps", cfg.train.adam_eps},
                {"eval_every", cfg.train.eval_every},
                {"channel_weights", cfg.train.channel_weights}};
  j["data"] = {{"n_train", cfg.n_train}, {"n_test", cfg.n_test}};
  nlohmann::json probes = nlohmann::json::array();
  for (const UqProbe& p : cfg.probes)
    probes.push_back(nlohmann::json::array({p.row, p.col, p.channel}));
  j["uq"] = {{"n_samples", cfg.uq_samples}, {"probes", probes}, {"pdf_points", cfg.pdf_points}};
  j["paths"] = {{"out_dir", cfg.out_dir.string()},
                {"train_data", cfg.train_data.string()},
                {"test_data", cfg.test_data.string()},
                {"checkpoint", cfg.checkpoint.string()}};
  return j;
}

/// Structural checks that need no file I/O: channel schemas against the case
/// table, network/probe/grid consistency. Throws config_error.
inline void validate_run_config(const RunConfig& cfg) {
  if (cfg.grid_n < 2) throw config_error("config: grid_n must be >= 2");
  if (cfg.n_train < 1 || cfg.n_test < 1)
    throw config_error("config: data.n_train and data.n_test must be >= 1");
  if (cfg.uq_samples < 2) throw config_error("config: uq.n_samples must be >= 2");
  if (cfg.pdf_points < 2) throw config_error("config: uq.pdf_points must be >= 2");
  try {
    cfg.e_field.validate();
    cfg.load_field.validate();
    cfg.plate.validate();
    cfg.train.validate();
  } catch (const std::invalid_argument& e) {
    throw config_error(std::string("config: ") + e.what());
  }
  if (cfg.preset != "fr9" && cfg.preset != "fr21" && cfg.preset != "fr25" &&
      cfg.preset != "custom")
    throw config_error("config: unknown network preset '" + cfg.preset + "'");
  for (const UqProbe& p : cfg.probes)
    if (p.row < 0 || p.row >= cfg.grid_n || p.col < 0 || p.col >= cfg.grid_n ||
        p.channel < 0 || p.channel >= cfg.output_channels())
      throw config_error("config: uq probe outside the case output schema");
}

/// Builds the network spec the config describes and proves it maps the case
/// input schema onto the case output schema.
inline NetworkSpec network_spec_for(const RunConfig& cfg) {
  NetworkSpec spec;
  if (cfg.preset == "custom") {
    spec = *cfg.custom_network;
    if (spec.in_h != cfg.grid_n || spec.in_w != cfg.grid_n)
      throw config_error("config: custom network input grid does not match grid_n");
    if (spec.in_channels != cfg.input_channels())
      throw config_error("config: custom network input channels do not match the case");
  } else {
    spec = make_preset(cfg.preset, cfg.grid_n, cfg.input_channels(), cfg.output_channels(),
                       cfg.stem_mode);
  }
  StageShape out = Network(spec).output_shape();
  if (out.h != cfg.grid_n || out.w != cfg.grid_n || out.c != cfg.output_channels())
    throw config_error("config: network output schema does not match the case");
  return spec;
}

}  // namespace fieldreg
