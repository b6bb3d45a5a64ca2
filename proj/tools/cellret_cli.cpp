// cellret_cli: dataset generation, training, evaluation and ad-hoc retrieval.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "cellret/config.hpp"
#include "cellret/error.hpp"
#include "cellret/pipeline.hpp"
#include "cellret/selfcheck.hpp"

namespace {

using cellret::ComparisonReport;
using cellret::OperatingPoint;

void print_point(const char* label, const OperatingPoint& p) {
  std::printf("  %-10s recall %.4f  precision %.4f (event %.4f)  cells %.1f  retrieved %.1f\n",
              label, p.recall, p.precision_dest, p.precision_event, p.mean_cells,
              p.mean_retrieved);
}

void print_report(const ComparisonReport& r) {
  for (const auto& s : r.shards) {
    std::printf("%s (K=%d, lambda=%.6g%s)\n", std::string(cellret::to_string(s.shard)).c_str(),
                s.num_classes, s.lambda, s.lambda_warning ? ", target recall not reached" : "");
    print_point("baseline", s.baseline);
    print_point("cells", s.cell);
  }
  std::printf("pooled\n");
  print_point("baseline", r.baseline_pooled);
  print_point("cells", r.cell_pooled);
  std::printf("recall delta %+.4f (%s), gap listings retrieved: baseline %zu, cells %zu\n",
              r.pooled_delta.recall_abs, r.recall_matched ? "matched" : "NOT matched",
              r.gap.baseline_retrieved, r.gap.cell_retrieved);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Cell-based location retrieval: generate, train, evaluate, retrieve"};
  app.require_subcommand(1);
  app.fallthrough();

  std::string config_path;
  std::string data_dir, artifacts_dir, report_dir;
  std::optional<uint64_t> seed;
  bool paper_mode = false;
  app.add_option("-c,--config", config_path, "JSON run configuration")->check(CLI::ExistingFile);
  app.add_option("--data-dir", data_dir, "Override paths.data_dir");
  app.add_option("--artifacts-dir", artifacts_dir, "Override paths.artifacts_dir");
  app.add_option("--report-dir", report_dir, "Override paths.report_dir");
  app.add_option("--seed", seed, "Override gen.seed");
  app.add_flag("--paper-mode", paper_mode, "Use the full-size architecture and schedule");

  auto* gen = app.add_subcommand("gen", "Generate the synthetic dataset");
  auto* train = app.add_subcommand("train", "Fit features, train shard models and baseline");
  auto* sweep = app.add_subcommand("sweep", "Sweep thresholds for each shard model");
  auto* compare = app.add_subcommand("compare", "Compare cell models with the baseline");
  auto* run = app.add_subcommand("run", "gen, train and compare in sequence");
  auto* show = app.add_subcommand("config", "Print the effective configuration");
  auto* selfcheck = app.add_subcommand("selfcheck", "Geometry, gradient and index checks");

  auto* retrieve = app.add_subcommand("retrieve", "Retrieve listings for one search");
  cellret::RetrieveRequest req;
  std::string device = "desktop";
  double lambda = 0.0;
  retrieve->add_option("--dest", req.dest_id, "Destination id")->required();
  retrieve->add_option("--guests", req.guests, "Number of guests");
  retrieve->add_option("--origin", req.origin_country, "Origin country code");
  retrieve->add_option("--device", device, "desktop, phone or tablet")
      ->check(CLI::IsMember({"desktop", "phone", "tablet"}));
  retrieve->add_option("--nights", req.trip_length_nights, "Trip length in nights");
  retrieve->add_flag("--mobile-app", req.is_mobile_app, "Search from the mobile app");
  retrieve->add_flag("--weekend", req.is_weekend, "Weekend search");
  auto* lambda_opt =
      retrieve->add_option("--lambda", lambda, "Threshold (default: chosen by compare)");
  retrieve->add_flag("--rect", req.use_rect, "Use the rectangle baseline");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : cellret::exit_code_for(cellret::ErrorKind::kInvalidArgument);
  }

  try {
    cellret::RunConfig cfg =
        config_path.empty() ? cellret::RunConfig{} : cellret::load_run_config(config_path);
    if (!data_dir.empty()) cfg.data_dir = data_dir;
    if (!artifacts_dir.empty()) cfg.artifacts_dir = artifacts_dir;
    if (!report_dir.empty()) cfg.report_dir = report_dir;
    if (seed) cfg.gen.seed = *seed;
    if (paper_mode) cfg.apply_paper_mode();
    cfg.validate();

    if (*show) {
      std::cout << cellret::to_json(cfg).dump(2) << '\n';
      return 0;
    }
    if (*selfcheck) {
      bool ok = true;
      for (const auto& r : cellret::run_selfcheck()) {
        std::printf("%s %s: %s\n", r.pass ? "PASS" : "FAIL", r.name.c_str(), r.detail.c_str());
        ok = ok && r.pass;
      }
      return ok ? 0 : 1;
    }
    if (*gen || *run) {
      const auto m = cellret::cmd_gen(cfg);
      std::printf("generated %zu destinations, %zu listings, %zu train / %zu eval events in %s\n",
                  m.n_destinations, m.n_listings, m.n_train_events, m.n_eval_events,
                  cfg.data_dir.string().c_str());
    }
    if (*train || *run) {
      const auto s = cellret::cmd_train(cfg, &std::cerr);
      for (const auto& [shard, log] : s.shard_logs) {
        std::printf("%s: %d classes, best epoch %d of %zu\n",
                    std::string(cellret::to_string(shard)).c_str(), s.vocab_sizes.at(shard),
                    log.best_epoch, log.epochs.size());
      }
      std::printf("classes shared between shards: %zu\n", s.vocab_overlap);
    }
    if (*sweep) {
      for (const auto& [shard, curve] : cellret::cmd_sweep(cfg)) {
        std::printf("%s: %zu points\n", std::string(cellret::to_string(shard)).c_str(),
                    curve.size());
      }
    }
    if (*compare || *run) print_report(cellret::cmd_compare(cfg));
    if (*retrieve) {
      req.device_type = cellret::parse_device_type(device);
      if (lambda_opt->count()) req.lambda = lambda;
      std::cout << cellret::to_json(cellret::cmd_retrieve(cfg, req)).dump(1) << '\n';
    }
    return 0;
  } catch (const cellret::Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return cellret::exit_code_for(e.kind());
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
}
