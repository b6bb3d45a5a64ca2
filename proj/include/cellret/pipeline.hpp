#pragma once

// End-to-end commands over on-disk artifacts.
//
//   data_dir       listings.tsv destinations.tsv train.tsv eval.tsv manifest.json
//   artifacts_dir  features.json vocab_<S>.txt model_<S>.ckpt baseline.ckpt
//                  baseline_beta_<b>.ckpt postings.tsv training_log.json
//   report_dir     report.json curves.csv curve_<S>.svg sweep.csv

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cellret/bounds_baseline.hpp"
#include "cellret/config.hpp"
#include "cellret/datagen.hpp"
#include "cellret/error.hpp"
#include "cellret/evaluation.hpp"
#include "cellret/features.hpp"
#include "cellret/geo_index.hpp"
#include "cellret/label_vocab.hpp"
#include "cellret/xmc_model.hpp"

namespace cellret {

struct RunPaths {
  std::filesystem::path data, artifacts, report;

  explicit RunPaths(const RunConfig& c)
      : data(c.data_dir), artifacts(c.artifacts_dir), report(c.report_dir) {}

  std::filesystem::path listings() const { return data / "listings.tsv"; }
  std::filesystem::path destinations() const { return data / "destinations.tsv"; }
  std::filesystem::path train() const { return data / "train.tsv"; }
  std::filesystem::path eval() const { return data / "eval.tsv"; }
  std::filesystem::path manifest() const { return data / "manifest.json"; }

  std::filesystem::path features() const { return artifacts / "features.json"; }
  std::filesystem::path vocab(ShardId s) const {
    return artifacts / ("vocab_" + std::string(to_string(s)) + ".txt");
  }
  std::filesystem::path model(ShardId s) const {
    return artifacts / ("model_" + std::string(to_string(s)) + ".ckpt");
  }
  std::filesystem::path baseline() const { return artifacts / "baseline.ckpt"; }
  std::filesystem::path baseline_variant(double beta) const {
    return artifacts / ("baseline_beta_" + fmt_g(beta) + ".ckpt");
  }
  std::filesystem::path postings() const { return artifacts / "postings.tsv"; }
  std::filesystem::path training_log() const { return artifacts / "training_log.json"; }

  std::filesystem::path report_json() const { return report / "report.json"; }
  std::filesystem::path curves_csv() const { return report / "curves.csv"; }
  std::filesystem::path curve_svg(ShardId s) const {
    return report / ("curve_" + std::string(to_string(s)) + ".svg");
  }
  std::filesystem::path sweep_csv() const { return report / "sweep.csv"; }
};

namespace pipeline_detail {

inline void ensure_dir(const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec || !std::filesystem::is_directory(dir)) {
    throw Error(ErrorKind::kIo, "cannot create directory " + dir.string());
  }
}

inline void require_file(const std::filesystem::path& p, const char* what) {
  if (!std::filesystem::is_regular_file(p)) {
    throw Error(ErrorKind::kData, std::string("missing ") + what + ": " + p.string());
  }
}

inline void write_text(const std::filesystem::path& p, const std::string& text) {
  auto out = io::open_out(p);
  out << text;
  if (!out) throw Error(ErrorKind::kIo, "write failed: " + p.string());
}

inline std::string read_text(const std::filesystem::path& p) {
  auto in = io::open_in(p);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

// 64-bit FNV-1a, hex.
inline std::string checksum(const std::filesystem::path& p) {
  const std::string bytes = read_text(p);
  uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

inline nlohmann::json rect_json(const GeoRect& r) {
  return {{"lat_lo", r.lat_lo}, {"lat_hi", r.lat_hi}, {"lng_lo", r.lng_lo}, {"lng_hi", r.lng_hi}};
}

inline GeoRect rect_from_json(const nlohmann::json& j) {
  return {j.at("lat_lo").get<double>(), j.at("lat_hi").get<double>(),
          j.at("lng_lo").get<double>(), j.at("lng_hi").get<double>()};
}

}  // namespace pipeline_detail

// ---------------------------------------------------------------------------
// gen

struct Manifest {
  uint64_t seed = 0;
  std::size_t n_destinations = 0, n_listings = 0, n_train_events = 0, n_eval_events = 0;
  GapScenario scenario;
  std::map<std::string, std::string> checksums;
};

inline nlohmann::json to_json(const Manifest& m) {
  return {{"seed", m.seed},
          {"counts",
           {{"destinations", m.n_destinations},
            {"listings", m.n_listings},
            {"train_events", m.n_train_events},
            {"eval_events", m.n_eval_events}}},
          {"scenario",
           {{"dest_id", m.scenario.dest_id},
            {"gap_region", pipeline_detail::rect_json(m.scenario.gap_region)}}},
          {"checksums", m.checksums}};
}

inline Manifest load_manifest(const std::filesystem::path& p) {
  pipeline_detail::require_file(p, "manifest");
  try {
    const auto j = nlohmann::json::parse(pipeline_detail::read_text(p));
    Manifest m;
    m.seed = j.at("seed").get<uint64_t>();
    const auto& c = j.at("counts");
    m.n_destinations = c.at("destinations").get<std::size_t>();
    m.n_listings = c.at("listings").get<std::size_t>();
    m.n_train_events = c.at("train_events").get<std::size_t>();
    m.n_eval_events = c.at("eval_events").get<std::size_t>();
    m.scenario.dest_id = j.at("scenario").at("dest_id").get<int64_t>();
    m.scenario.gap_region = pipeline_detail::rect_from_json(j.at("scenario").at("gap_region"));
    m.checksums = j.at("checksums").get<std::map<std::string, std::string>>();
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::kData, p.string() + ": " + e.what());
  }
}

inline Manifest cmd_gen(const RunConfig& cfg) {
  cfg.validate();
  const RunPaths paths(cfg);
  pipeline_detail::ensure_dir(paths.data);
  const World world = generate_world(cfg.gen);
  const SearchLog log = generate_search_log(world, cfg.gen);
  io::write_listings(paths.listings(), world.listings);
  io::write_destinations(paths.destinations(), world.destinations);
  io::write_events(paths.train(), log.train);
  io::write_events(paths.eval(), log.eval);

  Manifest m;
  m.seed = cfg.gen.seed;
  m.n_destinations = world.destinations.size();
  m.n_listings = world.listings.size();
  m.n_train_events = log.train.size();
  m.n_eval_events = log.eval.size();
  m.scenario = world.scenario;
  for (const auto& p : {paths.listings(), paths.destinations(), paths.train(), paths.eval()}) {
    m.checksums[p.filename().string()] = pipeline_detail::checksum(p);
  }
  pipeline_detail::write_text(paths.manifest(), to_json(m).dump(1) + "\n");
  return m;
}

// ---------------------------------------------------------------------------
// Loading and splitting

struct Dataset {
  std::vector<Listing> listings;
  DestinationTable dests;
  std::vector<SearchEvent> train;
  std::vector<SearchEvent> eval;
  Manifest manifest;
};

inline Dataset load_dataset(const RunConfig& cfg) {
  const RunPaths paths(cfg);
  for (const auto& p : {paths.listings(), paths.destinations(), paths.train(), paths.eval()}) {
    pipeline_detail::require_file(p, "dataset file");
  }
  Dataset d;
  d.manifest = load_manifest(paths.manifest());
  d.listings = io::read_listings(paths.listings());
  d.dests = DestinationTable(io::read_destinations(paths.destinations()));
  d.train = io::read_events(paths.train());
  d.eval = io::read_events(paths.eval());
  if (d.train.empty() || d.eval.empty()) throw Error(ErrorKind::kData, "empty event files");
  for (const SearchEvent& e : d.train) d.dests.at(e.dest_id);
  for (const SearchEvent& e : d.eval) d.dests.at(e.dest_id);
  return d;
}

inline std::vector<SearchEvent> shard_events(const std::vector<SearchEvent>& events,
                                             const DestinationTable& dests, ShardId s) {
  std::vector<SearchEvent> out;
  for (const SearchEvent& e : events) {
    if (shard_of(dests.at(e.dest_id)) == s) out.push_back(e);
  }
  return out;
}

// The last `fraction` of a shard's events (by search id) is held out.
inline std::size_t validation_start(std::size_t n, double fraction) {
  const auto held = static_cast<std::size_t>(static_cast<double>(n) * fraction);
  return n - std::min(n, std::max<std::size_t>(held, n > 1 ? 1 : 0));
}

inline std::pair<nn::EncodedSet, nn::EncodedSet> encode_shard_split(
    const std::vector<SearchEvent>& events, const DestinationTable& dests,
    const FeaturePipeline& fp, const LabelVocabulary* vocab, const std::vector<Listing>* listings,
    double validation_fraction) {
  std::vector<std::size_t> order(events.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return events[a].search_id < events[b].search_id;
  });
  const std::size_t split = validation_start(events.size(), validation_fraction);
  nn::EncodedSet fit, val;
  for (std::size_t r = 0; r < order.size(); ++r) {
    const SearchEvent& e = events[order[r]];
    const Destination& d = dests.at(e.dest_id);
    const auto enc = encode(e, d, fp);
    int32_t label = -1;
    if (vocab) {
      if (const auto k = vocab->lookup(e.booked_cell)) label = *k;
    }
    nn::EncodedSet& set = r < split ? fit : val;
    set.push(enc.features, label, order[r]);
    if (listings) {
      const auto id = static_cast<std::size_t>(e.booked_listing_id);
      if (e.booked_listing_id < 0 || id >= listings->size() ||
          (*listings)[id].listing_id != e.booked_listing_id) {
        throw Error(ErrorKind::kData, "unknown booked listing " + std::to_string(id));
      }
      const auto off = offset_from_center(d.center, (*listings)[id].location);
      set.targets.push_back(off[0]);
      set.targets.push_back(off[1]);
    }
  }
  return {std::move(fit), std::move(val)};
}

// ---------------------------------------------------------------------------
// train

struct TrainSummary {
  std::map<ShardId, TrainingLog> shard_logs;
  std::map<ShardId, int> vocab_sizes;
  std::size_t vocab_overlap = 0;  // classes shared by two or more shards
  BaselineTrainingLog baseline_log;
  std::vector<std::filesystem::path> checkpoints;
};

inline TrainSummary cmd_train(const RunConfig& cfg, std::ostream* progress = nullptr) {
  cfg.validate();
  const RunPaths paths(cfg);
  const Dataset data = load_dataset(cfg);
  pipeline_detail::ensure_dir(paths.artifacts);
  auto say = [&](const std::string& s) {
    if (progress) *progress << s << std::endl;
  };

  const FeaturePipeline fp = fit_feature_pipeline(data.train, data.dests, cfg.cell_levels);
  save_feature_pipeline(paths.features(), fp);
  write_postings(paths.postings(), build_index(data.listings));

  TrainSummary summary;
  nlohmann::json log_json;
  std::map<CellId, int> shards_per_cell;
  for (ShardId s : kShards) {
    const std::string name(to_string(s));
    const auto events = shard_events(data.train, data.dests, s);
    const LabelVocabulary vocab = build_vocab(events, s);
    save_vocab(paths.vocab(s), vocab);
    summary.vocab_sizes[s] = vocab.size();
    for (CellId c : vocab.classes()) ++shards_per_cell[c];
    const ModelConfig mc = cfg.model_for(s);
    auto [fit_set, val_set] = encode_shard_split(events, data.dests, fp, &vocab, nullptr,
                                                 cfg.validation_fraction);
    ShardModel model = init_shard_model<float>(mc, vocab.size(), nn::schema_for(fp, mc.embedding_dim));
    say("train " + name + ": " + std::to_string(fit_set.size()) + " events, " +
        std::to_string(vocab.size()) + " classes");
    const TrainingLog log = fit(model, fit_set, val_set);
    save_shard_model(paths.model(s), model, s);
    summary.checkpoints.push_back(paths.model(s));
    log_json["shards"][name] = to_json(log);
    log_json["shards"][name]["num_classes"] = vocab.size();
    summary.shard_logs[s] = log;
  }

  for (const auto& [cell, n] : shards_per_cell) summary.vocab_overlap += n > 1;
  log_json["vocab_overlap"] = summary.vocab_overlap;

  // The baseline sees the same events and the same per-shard holdout.
  nn::EncodedSet base_fit, base_val;
  auto append_rows = [](nn::EncodedSet& dst, const nn::EncodedSet& src) {
    if (dst.empty()) {
      dst.n_cat = src.n_cat;
      dst.n_cont = src.n_cont;
    }
    dst.cat.insert(dst.cat.end(), src.cat.begin(), src.cat.end());
    dst.cont.insert(dst.cont.end(), src.cont.begin(), src.cont.end());
    dst.labels.insert(dst.labels.end(), src.labels.begin(), src.labels.end());
    dst.targets.insert(dst.targets.end(), src.targets.begin(), src.targets.end());
    dst.source.insert(dst.source.end(), src.source.begin(), src.source.end());
  };
  for (ShardId s : kShards) {
    const auto events = shard_events(data.train, data.dests, s);
    auto [f, v] = encode_shard_split(events, data.dests, fp, nullptr, &data.listings,
                                     cfg.validation_fraction);
    append_rows(base_fit, f);
    append_rows(base_val, v);
  }
  const auto schema = nn::schema_for(fp, cfg.baseline.embedding_dim);
  say("train baseline: beta " + fmt_g(cfg.baseline.beta));
  const BoundsModel baseline =
      train_baseline<float>(base_fit, base_val, schema, cfg.baseline, &summary.baseline_log);
  save_bounds_model(paths.baseline(), baseline);
  summary.checkpoints.push_back(paths.baseline());
  log_json["baseline"] = to_json(summary.baseline_log);
  for (double beta : cfg.baseline_beta_sweep) {
    BaselineConfig bc = cfg.baseline;
    bc.beta = beta;
    say("train baseline variant: beta " + fmt_g(beta));
    BaselineTrainingLog blog;
    const BoundsModel variant = train_baseline<float>(base_fit, base_val, schema, bc, &blog);
    save_bounds_model(paths.baseline_variant(beta), variant);
    log_json["baseline_sweep"][fmt_g(beta)] = to_json(blog);
  }
  log_json["config"] = to_json(cfg);
  pipeline_detail::write_text(paths.training_log(), log_json.dump(1) + "\n");
  return summary;
}

// ---------------------------------------------------------------------------
// Loading trained artifacts

struct Trained {
  FeaturePipeline features;
  std::map<ShardId, LabelVocabulary> vocabs;
  std::map<ShardId, ShardModel> models;
  BoundsModel baseline;
};

inline Trained load_trained(const RunConfig& cfg, bool with_baseline = true) {
  const RunPaths paths(cfg);
  pipeline_detail::require_file(paths.features(), "feature pipeline (run train first)");
  Trained t;
  t.features = load_feature_pipeline(paths.features());
  for (ShardId s : kShards) {
    pipeline_detail::require_file(paths.vocab(s), "vocabulary (run train first)");
    pipeline_detail::require_file(paths.model(s), "checkpoint (run train first)");
    t.vocabs[s] = load_vocab(paths.vocab(s), s);
    t.models[s] = load_shard_model(paths.model(s));
    if (t.models[s].num_classes != t.vocabs[s].size()) {
      throw Error(ErrorKind::kData, "checkpoint and vocabulary disagree for shard " +
                                        std::string(to_string(s)));
    }
  }
  if (with_baseline) {
    pipeline_detail::require_file(paths.baseline(), "baseline checkpoint (run train first)");
    t.baseline = load_bounds_model(paths.baseline());
  }
  return t;
}

inline ShardEvalSet make_eval_set(const std::vector<SearchEvent>& eval,
                                  const DestinationTable& dests, const FeaturePipeline& fp,
                                  ShardId s) {
  ShardEvalSet set;
  set.shard = s;
  set.events = shard_events(eval, dests, s);
  std::sort(set.events.begin(), set.events.end(),
            [](const SearchEvent& a, const SearchEvent& b) { return a.search_id < b.search_id; });
  for (const SearchEvent& e : set.events) {
    set.features.push_back(encode(e, dests.at(e.dest_id), fp).features);
  }
  return set;
}

// ---------------------------------------------------------------------------
// sweep / compare

inline std::map<ShardId, std::vector<PRPoint>> cmd_sweep(const RunConfig& cfg) {
  cfg.validate();
  const RunPaths paths(cfg);
  const Dataset data = load_dataset(cfg);
  const Trained t = load_trained(cfg, false);
  const ListingIndex index = build_index(data.listings);
  const TruthTable truth(data.eval);
  const EvalContext ctx{&index, &truth, data.manifest.scenario};
  std::map<ShardId, std::vector<PRPoint>> out;
  std::string csv(kCurveHeader);
  csv += '\n';
  for (ShardId s : kShards) {
    const ShardEvalSet set = make_eval_set(data.eval, data.dests, t.features, s);
    out[s] = sweep_thresholds(t.models.at(s), t.vocabs.at(s), set, ctx, cfg.lambda_grid.values());
    for (const PRPoint& p : out[s]) {
      const auto f = curve_fields(s, p);
      for (std::size_t i = 0; i < f.size(); ++i) csv += (i ? "," : "") + f[i];
      csv += '\n';
    }
  }
  pipeline_detail::ensure_dir(paths.report);
  pipeline_detail::write_text(paths.sweep_csv(), csv);
  return out;
}

inline ComparisonReport cmd_compare(const RunConfig& cfg) {
  cfg.validate();
  const RunPaths paths(cfg);
  const Dataset data = load_dataset(cfg);
  const Trained t = load_trained(cfg, true);
  const ListingIndex index = build_index(data.listings);
  const TruthTable truth(data.eval);
  const EvalContext ctx{&index, &truth, data.manifest.scenario};

  std::vector<ShardEvalSet> sets;
  for (ShardId s : kShards) sets.push_back(make_eval_set(data.eval, data.dests, t.features, s));
  std::vector<ShardInputs> inputs;
  for (std::size_t k = 0; k < kShards.size(); ++k) {
    inputs.push_back({&t.models.at(kShards[k]), &t.vocabs.at(kShards[k]), &sets[k]});
  }
  std::vector<BoundsModel> variants;
  for (double beta : cfg.baseline_beta_sweep) {
    pipeline_detail::require_file(paths.baseline_variant(beta), "baseline variant checkpoint");
    variants.push_back(load_bounds_model(paths.baseline_variant(beta)));
  }
  std::vector<BaselineVariant> sweep;
  for (std::size_t k = 0; k < variants.size(); ++k) {
    sweep.push_back({cfg.baseline_beta_sweep[k], &variants[k]});
  }
  ComparisonReport rep = compare(inputs, t.baseline, sweep, data.dests, ctx,
                                 cfg.lambda_grid.values(), cfg.recall_tolerance);

  pipeline_detail::ensure_dir(paths.report);
  nlohmann::json j = to_json(rep);
  j["config"] = to_json(cfg);
  j["config"].erase("paths");
  pipeline_detail::write_text(paths.report_json(), j.dump(1) + "\n");
  pipeline_detail::write_text(paths.curves_csv(), curves_csv(rep));
  for (const ShardComparison& s : rep.shards) {
    pipeline_detail::write_text(paths.curve_svg(s.shard), curve_svg(s));
  }
  return rep;
}

// ---------------------------------------------------------------------------
// retrieve

struct RetrieveRequest {
  int64_t dest_id = 0;
  int guests = 1;
  std::string origin_country = "US";
  bool is_mobile_app = false;
  DeviceType device_type = DeviceType::kDesktop;
  int trip_length_nights = 3;
  bool is_weekend = false;
  std::optional<double> lambda;  // default: the threshold chosen by compare
  bool use_rect = false;
};

struct RetrieveResult {
  ShardId shard = ShardId::kEU;
  double lambda = 0.0;
  std::optional<GeoRect> rect;
  RetrievalSet cells;
  std::vector<int64_t> listing_ids;
};

inline nlohmann::json to_json(const RetrieveResult& r) {
  nlohmann::json cells = nlohmann::json::array();
  for (std::size_t i = 0; i < r.cells.cells.size(); ++i) {
    nlohmann::json c = {{"cell", r.cells.cells[i].to_string()},
                        {"token", r.cells.cells[i].to_token()}};
    if (!r.cells.probabilities.empty()) c["p"] = r.cells.probabilities[i];
    cells.push_back(c);
  }
  nlohmann::json j = {{"shard", std::string(to_string(r.shard))},
                      {"cells", cells},
                      {"listing_ids", r.listing_ids}};
  if (r.rect) {
    j["rect"] = pipeline_detail::rect_json(*r.rect);
  } else {
    j["lambda"] = r.lambda;
  }
  return j;
}

inline double selected_lambda(const RunConfig& cfg, ShardId s) {
  const RunPaths paths(cfg);
  if (!std::filesystem::is_regular_file(paths.report_json())) {
    throw Error(ErrorKind::kConfig, "no threshold given and no report found; run compare or "
                                    "pass --lambda");
  }
  try {
    const auto j = nlohmann::json::parse(pipeline_detail::read_text(paths.report_json()));
    for (const auto& sh : j.at("shards")) {
      if (sh.at("shard").get<std::string>() == to_string(s)) return sh.at("lambda").get<double>();
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::kData, paths.report_json().string() + ": " + e.what());
  }
  throw Error(ErrorKind::kData, "report has no threshold for shard " + std::string(to_string(s)));
}

inline RetrieveResult cmd_retrieve(const RunConfig& cfg, const RetrieveRequest& req) {
  cfg.validate();
  const RunPaths paths(cfg);
  pipeline_detail::require_file(paths.destinations(), "destinations");
  pipeline_detail::require_file(paths.listings(), "listings");
  const DestinationTable dests(io::read_destinations(paths.destinations()));
  if (!dests.contains(req.dest_id)) {
    throw Error(ErrorKind::kInvalidArgument, "unknown destination " + std::to_string(req.dest_id));
  }
  if (req.guests < 1 || req.trip_length_nights < 1) {
    throw Error(ErrorKind::kInvalidArgument, "guests and nights must be >= 1");
  }
  const Destination& d = dests.at(req.dest_id);
  const Trained t = load_trained(cfg, req.use_rect);
  const ListingIndex index = build_index(io::read_listings(paths.listings()));

  SearchEvent e;
  e.dest_id = req.dest_id;
  e.origin_country = req.origin_country;
  e.num_guests = req.guests;
  e.is_mobile_app = req.is_mobile_app;
  e.device_type = req.device_type;
  e.trip_length_nights = req.trip_length_nights;
  e.is_weekend = req.is_weekend;
  const FeatureVector fv = encode(e, d, t.features).features;
  const SearchFilters filters{req.guests, true};

  RetrieveResult r;
  r.shard = shard_of(d);
  if (req.use_rect) {
    const GeoRect rect = predict_bounds(t.baseline, fv, d.center);
    r.rect = rect;
    r.cells.cells = bounds_to_cellset(rect);
    r.listing_ids = retrieve_rect(index, rect, filters);
    return r;
  }
  r.lambda = req.lambda ? *req.lambda : selected_lambda(cfg, r.shard);
  if (!(r.lambda > 0.0 && r.lambda < 1.0)) {
    throw Error(ErrorKind::kInvalidArgument, "threshold must be in (0, 1)");
  }
  const Prediction pred = forward(t.models.at(r.shard), fv);
  r.cells = threshold_cells(t.vocabs.at(r.shard), pred.probabilities, r.lambda);
  r.listing_ids = retrieve_cells(index, r.cells, filters);
  return r;
}

}  // namespace cellret
