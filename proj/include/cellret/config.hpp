#pragma once

// Run configuration: one JSON file, optionally overridden from the command
// line. Relative paths resolve against the directory holding the file.
//
// {
//   "format_version": 1,
//   "paths": {"data_dir": "data", "artifacts_dir": "artifacts", "report_dir": "report"},
//   "gen": {"seed": 20240601, "n_destinations": 60, ...},
//   "model": {"hidden": [64, 128, 64, 32], ..., "shards": {"EU": {"epochs": 8}}},
//   "baseline": {"beta": 0.1, ...},
//   "baseline_beta_sweep": [0.3, 0.1, 0.03],
//   "lambda_grid": {"count": 40, "min": 1e-05, "max": 0.1},
//   "cell_levels": [4, 7, 11],
//   "paper_mode": false,
//   "recall_tolerance": 0.005,
//   "validation_fraction": 0.1
// }

#include <array>
#include <filesystem>
#include <fstream>
#include <initializer_list>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cellret/bounds_baseline.hpp"
#include "cellret/datagen.hpp"
#include "cellret/error.hpp"
#include "cellret/evaluation.hpp"
#include "cellret/features.hpp"
#include "cellret/xmc_model.hpp"

namespace cellret {

inline constexpr int kConfigFormatVersion = 1;

struct LambdaGrid {
  int count = 40;
  double min = 1e-5;
  double max = 1e-1;

  std::vector<double> values() const { return log_grid(count, min, max); }
};

struct RunConfig {
  std::filesystem::path data_dir = "data";
  std::filesystem::path artifacts_dir = "artifacts";
  std::filesystem::path report_dir = "report";
  GenConfig gen;
  ModelConfig model;
  std::map<ShardId, ModelConfig> shard_models;  // per-shard overrides
  BaselineConfig baseline = [] {
    BaselineConfig c;
    c.beta = 0.1;
    c.output_scale_km = 30.0;
    return c;
  }();
  std::vector<double> baseline_beta_sweep = {0.3, 0.1, 0.03};
  LambdaGrid lambda_grid;
  std::vector<int> cell_levels = {4, 7, 11};
  bool paper_mode = false;
  double recall_tolerance = 0.005;
  double validation_fraction = 0.1;

  ModelConfig model_for(ShardId s) const {
    const auto it = shard_models.find(s);
    return it == shard_models.end() ? model : it->second;
  }

  void validate() const {
    gen.validate();
    model.validate();
    for (const auto& [s, m] : shard_models) m.validate();
    baseline.validate();
    for (double b : baseline_beta_sweep) {
      if (!(b >= 0.0)) throw Error(ErrorKind::kConfig, "baseline sweep beta must be >= 0");
    }
    lambda_grid.values();
    check_cell_levels(cell_levels);
    if (!(recall_tolerance >= 0.0)) throw Error(ErrorKind::kConfig, "negative recall tolerance");
    if (!(validation_fraction > 0.0 && validation_fraction < 1.0)) {
      throw Error(ErrorKind::kConfig, "validation_fraction must be in (0, 1)");
    }
    for (const auto* p : {&data_dir, &artifacts_dir, &report_dir}) {
      if (p->empty()) throw Error(ErrorKind::kConfig, "empty path in config");
    }
  }

  void apply_paper_mode() {
    paper_mode = true;
    const uint64_t seed = model.seed;
    model = ModelConfig::paper();
    model.seed = seed;
    shard_models.clear();
  }
};

inline nlohmann::json to_json(const GenConfig& g) {
  return {{"seed", g.seed},
          {"n_destinations", g.n_destinations},
          {"n_listings", g.n_listings},
          {"n_train_events", g.n_train_events},
          {"n_eval_events", g.n_eval_events},
          {"outlier_rate", g.outlier_rate},
          {"pan_discovery_rate", g.pan_discovery_rate},
          {"continent_mix", g.continent_mix}};
}

inline GenConfig gen_config_from_json(const nlohmann::json& j, GenConfig g = GenConfig{}) {
  if (j.contains("seed")) g.seed = j.at("seed").get<uint64_t>();
  if (j.contains("n_destinations")) g.n_destinations = j.at("n_destinations").get<int>();
  if (j.contains("n_listings")) g.n_listings = j.at("n_listings").get<int>();
  if (j.contains("n_train_events")) g.n_train_events = j.at("n_train_events").get<int>();
  if (j.contains("n_eval_events")) g.n_eval_events = j.at("n_eval_events").get<int>();
  if (j.contains("outlier_rate")) g.outlier_rate = j.at("outlier_rate").get<double>();
  if (j.contains("pan_discovery_rate")) {
    g.pan_discovery_rate = j.at("pan_discovery_rate").get<double>();
  }
  if (j.contains("continent_mix")) {
    g.continent_mix = j.at("continent_mix").get<std::array<double, 3>>();
  }
  return g;
}

inline nlohmann::json to_json(const RunConfig& c) {
  nlohmann::json model = to_json(c.model);
  if (!c.shard_models.empty()) {
    nlohmann::json shards = nlohmann::json::object();
    for (const auto& [s, m] : c.shard_models) shards[std::string(to_string(s))] = to_json(m);
    model["shards"] = shards;
  }
  return {{"format_version", kConfigFormatVersion},
          {"paths",
           {{"data_dir", c.data_dir.generic_string()},
            {"artifacts_dir", c.artifacts_dir.generic_string()},
            {"report_dir", c.report_dir.generic_string()}}},
          {"gen", to_json(c.gen)},
          {"model", model},
          {"baseline", to_json(c.baseline)},
          {"baseline_beta_sweep", c.baseline_beta_sweep},
          {"lambda_grid",
           {{"count", c.lambda_grid.count},
            {"min", c.lambda_grid.min},
            {"max", c.lambda_grid.max}}},
          {"cell_levels", c.cell_levels},
          {"paper_mode", c.paper_mode},
          {"recall_tolerance", c.recall_tolerance},
          {"validation_fraction", c.validation_fraction}};
}

namespace config_detail {

inline void check_keys(const nlohmann::json& j, const std::string& section,
                       const nlohmann::json& allowed, std::initializer_list<const char*> extra = {}) {
  if (!j.is_object()) throw Error(ErrorKind::kConfig, section + " must be a JSON object");
  for (const auto& [key, value] : j.items()) {
    bool ok = allowed.contains(key);
    for (const char* e : extra) ok = ok || key == e;
    if (!ok) throw Error(ErrorKind::kConfig, "unknown config key '" + section + "." + key + "'");
  }
}

}  // namespace config_detail

// Unknown keys are rejected so typos do not silently fall back to defaults.
inline RunConfig run_config_from_json(const nlohmann::json& j,
                                      const std::filesystem::path& base_dir = {}) {
  static const std::vector<std::string> kKeys = {
      "format_version", "paths",      "gen",          "model",
      "baseline",       "baseline_beta_sweep", "lambda_grid", "cell_levels",
      "paper_mode",     "recall_tolerance",    "validation_fraction"};
  RunConfig c;
  try {
    if (!j.is_object()) throw Error(ErrorKind::kConfig, "config must be a JSON object");
    for (const auto& [key, value] : j.items()) {
      if (std::find(kKeys.begin(), kKeys.end(), key) == kKeys.end()) {
        throw Error(ErrorKind::kConfig, "unknown config key '" + key + "'");
      }
    }
    if (j.value("format_version", kConfigFormatVersion) != kConfigFormatVersion) {
      throw Error(ErrorKind::kConfig, "unsupported config format_version");
    }
    using config_detail::check_keys;
    if (j.contains("paths")) {
      const auto& p = j.at("paths");
      check_keys(p, "paths", to_json(c).at("paths"));
      auto path = [&](const char* key, std::filesystem::path& out) {
        if (p.contains(key)) out = p.at(key).get<std::string>();
      };
      path("data_dir", c.data_dir);
      path("artifacts_dir", c.artifacts_dir);
      path("report_dir", c.report_dir);
    }
    if (j.contains("gen")) check_keys(j.at("gen"), "gen", to_json(GenConfig{}));
    if (j.contains("gen")) c.gen = gen_config_from_json(j.at("gen"));
    if (j.contains("model")) {
      const auto& m = j.at("model");
      check_keys(m, "model", to_json(ModelConfig{}), {"shards"});
      nlohmann::json base = m;
      base.erase("shards");
      c.model = model_config_from_json(base);
      if (m.contains("shards")) {
        for (const auto& [name, overrides] : m.at("shards").items()) {
          check_keys(overrides, "model.shards." + name, to_json(ModelConfig{}));
          nlohmann::json merged = to_json(c.model);
          merged.update(overrides);
          c.shard_models[parse_continent(name)] = model_config_from_json(merged);
        }
      }
    }
    if (j.contains("baseline")) check_keys(j.at("baseline"), "baseline", to_json(BaselineConfig{}));
    if (j.contains("baseline")) c.baseline = baseline_config_from_json(j.at("baseline"), c.baseline);
    if (j.contains("baseline_beta_sweep")) {
      c.baseline_beta_sweep = j.at("baseline_beta_sweep").get<std::vector<double>>();
    }
    if (j.contains("lambda_grid")) {
      const auto& g = j.at("lambda_grid");
      check_keys(g, "lambda_grid", {{"count", 0}, {"min", 0}, {"max", 0}});
      c.lambda_grid.count = g.value("count", c.lambda_grid.count);
      c.lambda_grid.min = g.value("min", c.lambda_grid.min);
      c.lambda_grid.max = g.value("max", c.lambda_grid.max);
    }
    if (j.contains("cell_levels")) c.cell_levels = j.at("cell_levels").get<std::vector<int>>();
    if (j.value("paper_mode", false)) c.apply_paper_mode();
    c.recall_tolerance = j.value("recall_tolerance", c.recall_tolerance);
    c.validation_fraction = j.value("validation_fraction", c.validation_fraction);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::kConfig, std::string("config: ") + e.what());
  } catch (const Error& e) {
    if (e.kind() == ErrorKind::kConfig) throw;
    throw Error(ErrorKind::kConfig, e.what());
  }
  if (!base_dir.empty()) {
    for (auto* p : {&c.data_dir, &c.artifacts_dir, &c.report_dir}) {
      if (p->is_relative()) *p = base_dir / *p;
    }
  }
  c.validate();
  return c;
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::kConfig, "cannot read config " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw Error(ErrorKind::kConfig, path.string() + ": " + e.what());
  }
  return run_config_from_json(j, path.parent_path());
}

}  // namespace cellret
