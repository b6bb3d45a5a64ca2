#include "cellret/evaluation.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <memory>
#include <set>
#include <sstream>

#include "cellret/pipeline.hpp"
#include "test_util.hpp"

namespace cellret {
namespace {

using testing::small_gen_config;

CellId cell_at(double lat, double lng) { return cell_from_latlng({lat, lng}, 11); }

SearchEvent event_at(int64_t id, int64_t dest, CellId booked, int guests = 1) {
  SearchEvent e;
  e.search_id = id;
  e.dest_id = dest;
  e.booked_cell = booked;
  e.num_guests = guests;
  return e;
}

TEST(Metrics, HandComputedRecallAndPrecision) {
  const std::vector<CellId> c = {cell_at(1, 1), cell_at(2, 2), cell_at(3, 3), cell_at(4, 4)};
  const std::vector<SearchEvent> events = {event_at(0, 0, c[0]), event_at(1, 0, c[1]),
                                           event_at(2, 0, c[2]), event_at(3, 0, c[3])};
  const TruthTable truth(std::span<const SearchEvent>(events.data(), 3));
  const std::vector<std::vector<CellId>> preds = {{c[0]}, {c[1]}, {c[2]}, {cell_at(9, 9)}};
  EXPECT_DOUBLE_EQ(recall(preds, events), 0.75);
  EXPECT_DOUBLE_EQ(precision(preds, events, truth), 0.75);
}

TEST(Metrics, HalfRightSetsGiveHalfPrecision) {
  const std::vector<SearchEvent> events = {event_at(0, 0, cell_at(1, 1))};
  const TruthTable truth(events);
  const std::vector<std::vector<CellId>> preds = {{cell_at(1, 1), cell_at(50, 50)}};
  EXPECT_DOUBLE_EQ(recall(preds, events), 1.0);
  EXPECT_DOUBLE_EQ(precision(preds, events, truth), 0.5);
}

TEST(Metrics, EmptyPredictedSetsScoreZero) {
  const std::vector<SearchEvent> events = {event_at(0, 0, cell_at(1, 1)),
                                           event_at(1, 0, cell_at(2, 2))};
  const TruthTable truth(events);
  const std::vector<std::vector<CellId>> preds(2);
  EXPECT_EQ(recall(preds, events), 0.0);
  EXPECT_EQ(precision(preds, events, truth), 0.0);
}

TEST(Metrics, MismatchedOrEmptyInputsAreErrors) {
  const std::vector<SearchEvent> events = {event_at(0, 0, cell_at(1, 1))};
  const std::vector<std::vector<CellId>> none;
  EXPECT_THROW(recall(none, events), Error);
  EXPECT_THROW(recall(none, std::vector<SearchEvent>{}), Error);
  EXPECT_THROW(summarize(std::vector<EventOutcome>{}), Error);
}

TEST(Summarize, EventAndQueryWeighting) {
  std::vector<EventOutcome> o(4);
  for (int i = 0; i < 3; ++i) o[i] = {7, true, 2, 1, 10, 0};
  o[3] = {8, false, 4, 0, 2, 0};
  const OperatingPoint p = summarize(o);
  EXPECT_EQ(p.events, 4u);
  EXPECT_DOUBLE_EQ(p.recall, 0.75);
  EXPECT_DOUBLE_EQ(p.recall_q, 0.5);
  EXPECT_DOUBLE_EQ(p.precision_dest, 0.375);
  EXPECT_DOUBLE_EQ(p.precision_dest_q, 0.25);
  EXPECT_DOUBLE_EQ(p.precision_event, 0.375);
  EXPECT_DOUBLE_EQ(p.mean_cells, 2.5);
  EXPECT_DOUBLE_EQ(p.mean_retrieved, 8.0);
  EXPECT_DOUBLE_EQ(p.mean_retrieved_q, 6.0);
}

TEST(LogGrid, EndpointsAndGeometricSpacing) {
  const auto g = log_grid(40, 1e-5, 1e-1);
  ASSERT_EQ(g.size(), 40u);
  EXPECT_EQ(g.front(), 1e-5);
  EXPECT_EQ(g.back(), 1e-1);
  for (std::size_t i = 1; i < g.size(); ++i) {
    EXPECT_GT(g[i], g[i - 1]);
    EXPECT_NEAR(std::log(g[i] / g[i - 1]), std::log(1e4) / 39, 1e-12);
  }
  EXPECT_EQ(log_grid(1, 0.5, 0.5), std::vector<double>{0.5});
  EXPECT_THROW(log_grid(0), Error);
  EXPECT_THROW(log_grid(4, 0.0, 1.0), Error);
  EXPECT_THROW(log_grid(4, 1.0, 0.1), Error);
}

TEST(ThresholdCells, KeepsCellsAtOrAboveLambda) {
  const auto v = build_vocab(std::vector<SearchEvent>{event_at(0, 0, cell_at(1, 1)),
                                                      event_at(1, 0, cell_at(2, 2)),
                                                      event_at(2, 0, cell_at(3, 3))},
                             ShardId::kEU);
  const std::vector<double> p = {0.2, 0.5, 0.3};
  const auto rs = threshold_cells(v, p, 0.3);
  EXPECT_EQ(rs.cells, (std::vector<CellId>{v.cell(1), v.cell(2)}));
  EXPECT_EQ(rs.probabilities, (std::vector<double>{0.5, 0.3}));
  EXPECT_EQ(threshold_cells(v, p, 0.0).cells, v.classes());
  EXPECT_TRUE(threshold_cells(v, p, 0.51).cells.empty());
  EXPECT_THROW(threshold_cells(v, std::vector<double>{1.0}, 0.1), Error);
}

TEST(MatchRecall, PicksLargestQualifyingLambda) {
  std::vector<PRPoint> curve(3);
  curve[0] = {0.01, 0.9};
  curve[1] = {0.02, 0.8};
  curve[2] = {0.04, 0.5};
  EXPECT_EQ(match_recall_threshold(curve, 0.0).lambda, 0.04);
  EXPECT_EQ(match_recall_threshold(curve, 0.8).lambda, 0.02);
  EXPECT_EQ(match_recall_threshold(curve, 0.85).lambda, 0.01);
  EXPECT_FALSE(match_recall_threshold(curve, 0.85).warning);
  const auto none = match_recall_threshold(curve, 0.95);
  EXPECT_EQ(none.lambda, 0.01);
  EXPECT_TRUE(none.warning);
  EXPECT_THROW(match_recall_threshold(std::vector<PRPoint>{}, 0.5), Error);
}

TEST(ExactRecallThreshold, OrderStatisticOfTrueProbabilities) {
  const std::vector<double> p = {0.5, 0.1, 0.0, 0.3};
  EXPECT_EQ(exact_recall_threshold(p, 0.5), 0.3);
  EXPECT_EQ(exact_recall_threshold(p, 0.75), 0.1);
  EXPECT_EQ(exact_recall_threshold(p, 0.25), 0.5);
  EXPECT_FALSE(exact_recall_threshold(p, 1.0).has_value());
  EXPECT_FALSE(exact_recall_threshold(p, 0.0).has_value());
  EXPECT_FALSE(exact_recall_threshold(std::vector<double>{}, 0.5).has_value());
}

TEST(Deltas, SelfComparisonIsZeroAndZeroBaseIsUndefined) {
  std::vector<EventOutcome> o = {{1, true, 3, 2, 5, 0}, {2, false, 1, 0, 1, 0}};
  const OperatingPoint p = summarize(o);
  const Deltas d = deltas(p, p);
  EXPECT_EQ(d.recall_abs, 0.0);
  EXPECT_EQ(*d.recall_rel, 0.0);
  EXPECT_EQ(*d.precision_dest_rel, 0.0);
  EXPECT_EQ(*d.mean_retrieved_rel, 0.0);
  EXPECT_FALSE(rel_delta(0.0, 1.0).has_value());
  EXPECT_DOUBLE_EQ(*rel_delta(2.0, 3.0), 0.5);
  const auto j = to_json(deltas(OperatingPoint{}, p));
  EXPECT_TRUE(j["recall_rel"].is_null());
}

// A small generated world with quickly trained models, shared by the
// end-to-end checks below.
struct Fixture {
  World world;
  SearchLog log;
  DestinationTable dests;
  FeaturePipeline fp;
  std::unique_ptr<ListingIndex> index;
  TruthTable truth;
  EvalContext ctx;
  std::vector<LabelVocabulary> vocabs;
  std::vector<ShardModel> models;
  std::vector<ShardEvalSet> sets;
  BoundsModel baseline;
  std::vector<double> grid;
  ComparisonReport report;
};

const Fixture& fixture() {
  static const std::unique_ptr<Fixture> f = [] {
    auto f = std::make_unique<Fixture>();
    const GenConfig g = small_gen_config(31);
    f->world = generate_world(g);
    f->log = generate_search_log(f->world, g);
    f->dests = DestinationTable(f->world.destinations);
    f->fp = fit_feature_pipeline(f->log.train, f->dests, {4, 7, 11});
    f->index = std::make_unique<ListingIndex>(f->world.listings);
    f->truth = TruthTable(f->log.eval);
    f->ctx = {f->index.get(), &f->truth, f->world.scenario};

    ModelConfig mc;
    mc.hidden = {32, 32};
    mc.epochs = 4;
    mc.num_negatives = 64;
    BaselineConfig bc;
    bc.hidden = {16};
    bc.epochs = 4;
    bc.beta = 0.3;
    bc.output_scale_km = 30.0;
    const auto schema = nn::schema_for(f->fp, mc.embedding_dim);
    nn::EncodedSet base_fit, base_val;
    for (ShardId s : kShards) {
      const auto events = shard_events(f->log.train, f->dests, s);
      f->vocabs.push_back(build_vocab(events, s));
      auto [fit_set, val_set] =
          encode_shard_split(events, f->dests, f->fp, &f->vocabs.back(), nullptr, 0.1);
      ShardModel m = init_shard_model<float>(mc, f->vocabs.back().size(), schema);
      fit(m, fit_set, val_set);
      f->models.push_back(std::move(m));
      f->sets.push_back(make_eval_set(f->log.eval, f->dests, f->fp, s));
      if (s == ShardId::kEU) {
        auto split = encode_shard_split(events, f->dests, f->fp, nullptr, &f->world.listings, 0.1);
        base_fit = std::move(split.first);
        base_val = std::move(split.second);
      }
    }
    f->baseline = train_baseline<float>(base_fit, base_val, schema, bc);
    f->grid = log_grid(12, 1e-4, 1e-1);
    std::vector<ShardInputs> inputs;
    for (std::size_t k = 0; k < f->models.size(); ++k) {
      inputs.push_back({&f->models[k], &f->vocabs[k], &f->sets[k]});
    }
    f->report = compare(inputs, f->baseline, {}, f->dests, f->ctx, f->grid, 0.005);
    return f;
  }();
  return *f;
}

std::vector<std::vector<CellId>> cell_predictions(const Fixture& f, std::size_t k, double lambda) {
  std::vector<std::vector<CellId>> preds;
  for (const FeatureVector& fv : f.sets[k].features) {
    preds.push_back(threshold_cells(f.vocabs[k], forward(f.models[k], fv).probabilities, lambda).cells);
  }
  return preds;
}

TEST(Sweep, MatchesPerEventRecomputation) {
  const Fixture& f = fixture();
  for (std::size_t k = 0; k < f.models.size(); ++k) {
    const auto curve = sweep_thresholds(f.models[k], f.vocabs[k], f.sets[k], f.ctx, f.grid);
    ASSERT_EQ(curve.size(), f.grid.size());
    const auto& events = f.sets[k].events;
    for (std::size_t li = 0; li < f.grid.size(); li += 3) {
      const auto preds = cell_predictions(f, k, f.grid[li]);
      double pe = 0.0, cells = 0.0;
      for (std::size_t i = 0; i < preds.size(); ++i) {
        const bool hit = std::count(preds[i].begin(), preds[i].end(), events[i].booked_cell);
        pe += preds[i].empty() ? 0.0 : hit / static_cast<double>(preds[i].size());
        cells += static_cast<double>(preds[i].size());
      }
      const double n = static_cast<double>(events.size());
      EXPECT_NEAR(curve[li].recall, recall(preds, events), 1e-12);
      EXPECT_NEAR(curve[li].precision_dest, precision(preds, events, f.truth), 1e-9);
      EXPECT_NEAR(curve[li].precision_event, pe / n, 1e-9);
      EXPECT_NEAR(curve[li].mean_cells, cells / n, 1e-9);
      EXPECT_NEAR(curve[li].mean_retrieved, num_retrieved(preds, events, *f.index), 1e-9);
    }
  }
}

TEST(Sweep, RecallAndSetSizeFallAsLambdaRises) {
  const Fixture& f = fixture();
  for (std::size_t k = 0; k < f.models.size(); ++k) {
    auto lambdas = log_grid(30, 1e-6, 0.5);
    lambdas.push_back(1.5);
    const auto curve = sweep_thresholds(f.models[k], f.vocabs[k], f.sets[k], f.ctx, lambdas);
    for (std::size_t i = 1; i < curve.size(); ++i) {
      EXPECT_LE(curve[i].recall, curve[i - 1].recall);
      EXPECT_LE(curve[i].mean_cells, curve[i - 1].mean_cells);
      EXPECT_LE(curve[i].mean_retrieved, curve[i - 1].mean_retrieved);
    }
    EXPECT_EQ(curve.back().recall, 0.0);
    EXPECT_EQ(curve.back().mean_cells, 0.0);
  }
}

TEST(Sweep, ZeroLambdaRetrievesTheWholeVocabulary) {
  const Fixture& f = fixture();
  for (std::size_t k = 0; k < f.models.size(); ++k) {
    const auto curve = sweep_thresholds(f.models[k], f.vocabs[k], f.sets[k], f.ctx, {0.0});
    std::size_t in_vocab = 0;
    for (const SearchEvent& e : f.sets[k].events) in_vocab += f.vocabs[k].lookup(e.booked_cell).has_value();
    EXPECT_DOUBLE_EQ(curve[0].recall, static_cast<double>(in_vocab) / f.sets[k].events.size());
    EXPECT_DOUBLE_EQ(curve[0].mean_cells, f.vocabs[k].size());
  }
}

TEST(Sweep, ExactThresholdReachesTargetRecall) {
  const Fixture& f = fixture();
  const auto sweep = sweep_cell_model(f.models[0], f.vocabs[0], f.sets[0], f.ctx, {0.01});
  int checked = 0;
  for (double target : {0.3, 0.5, 0.7}) {
    const auto lambda = exact_recall_threshold(sweep.true_prob, target);
    if (!lambda) continue;
    ++checked;
    const std::vector<double> at = {*lambda, std::nextafter(*lambda, 2.0)};
    const auto curve = sweep_thresholds(f.models[0], f.vocabs[0], f.sets[0], f.ctx, at);
    EXPECT_GE(curve[0].recall, target - 1e-12);
    EXPECT_LT(curve[1].recall, target);
  }
  EXPECT_GT(checked, 0);
}

TEST(Baseline, OutcomesMatchRectangleRecomputation) {
  const Fixture& f = fixture();
  const auto& set = f.sets[0];
  const auto outcomes = baseline_outcomes(f.baseline, set.events, set.features, f.dests, f.ctx);
  std::vector<std::vector<CellId>> preds;
  for (std::size_t i = 0; i < set.events.size(); ++i) {
    const GeoRect r = predict_bounds(f.baseline, set.features[i], f.dests.at(set.events[i].dest_id).center);
    preds.push_back(bounds_to_cellset(r));
  }
  const OperatingPoint p = summarize(outcomes);
  EXPECT_NEAR(p.recall, recall(preds, set.events), 1e-12);
  EXPECT_NEAR(p.precision_dest, precision(preds, set.events, f.truth), 1e-9);
  EXPECT_NEAR(p.mean_retrieved, num_retrieved(preds, set.events, *f.index), 1e-9);
}

TEST(Compare, ReportIsInternallyConsistent) {
  const Fixture& f = fixture();
  const ComparisonReport& r = f.report;
  ASSERT_EQ(r.shards.size(), 3u);
  std::size_t events = 0;
  for (const ShardComparison& s : r.shards) {
    events += s.cell.events;
    EXPECT_EQ(s.cell.events, s.baseline.events);
    ASSERT_TRUE(std::is_sorted(s.curve.begin(), s.curve.end(),
                               [](const PRPoint& a, const PRPoint& b) { return a.lambda < b.lambda; }));
    const auto it = std::find_if(s.curve.begin(), s.curve.end(),
                                 [&](const PRPoint& p) { return p.lambda == s.lambda; });
    ASSERT_NE(it, s.curve.end());
    EXPECT_EQ(it->recall, s.cell.recall);
    EXPECT_EQ(it->precision_dest, s.cell.precision_dest);
    if (!s.lambda_warning) {
      EXPECT_GE(s.cell.recall, s.baseline.recall);
      for (const PRPoint& p : s.curve) {
        if (p.lambda > s.lambda) {
          EXPECT_LT(p.recall, s.baseline.recall);
        }
      }
    }
    EXPECT_NEAR(s.delta.recall_abs, s.cell.recall - s.baseline.recall, 1e-12);
    EXPECT_NEAR(*s.delta.precision_dest_rel,
                (s.cell.precision_dest - s.baseline.precision_dest) / s.baseline.precision_dest, 1e-9);
    EXPECT_NEAR(*s.delta.mean_retrieved_rel,
                (s.cell.mean_retrieved - s.baseline.mean_retrieved) / s.baseline.mean_retrieved, 1e-9);
  }
  EXPECT_EQ(r.cell_pooled.events, events);
  double pooled = 0.0;
  for (const ShardComparison& s : r.shards) pooled += s.cell.recall * s.cell.events;
  EXPECT_NEAR(r.cell_pooled.recall, pooled / events, 1e-12);
  bool matched = std::abs(r.pooled_delta.recall_abs) <= r.recall_tolerance;
  for (const ShardComparison& s : r.shards) matched = matched && std::abs(s.delta.recall_abs) <= r.recall_tolerance;
  EXPECT_EQ(r.recall_matched, matched);
}

TEST(Compare, GapCountsMatchListingScan) {
  const Fixture& f = fixture();
  const GapScenario& sc = f.world.scenario;
  ASSERT_GE(sc.dest_id, 0);
  std::size_t expect = 0;
  for (const Listing& l : f.world.listings) expect += l.active && sc.gap_region.contains(l.location);
  EXPECT_EQ(f.report.gap.gap_listings, expect);
  std::size_t k = 0;
  while (f.sets[k].shard != shard_of(f.dests.at(sc.dest_id))) ++k;
  const ShardComparison& s = f.report.shards[k];
  const auto preds = cell_predictions(f, k, s.lambda);
  std::size_t cell_gap = 0, base_gap = 0, n = 0;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    const SearchEvent& e = f.sets[k].events[i];
    if (e.dest_id != sc.dest_id) continue;
    ++n;
    const SearchFilters filt{e.num_guests, true};
    for (int64_t id : retrieve_cells(*f.index, preds[i], filt)) {
      cell_gap += sc.gap_region.contains(f.index->listing(id).location);
    }
    const GeoRect r = predict_bounds(f.baseline, f.sets[k].features[i], f.dests.at(e.dest_id).center);
    for (const Listing& l : f.world.listings) {
      base_gap += l.active && l.capacity >= e.num_guests && r.contains(l.location) &&
                  sc.gap_region.contains(l.location);
    }
  }
  EXPECT_EQ(f.report.gap.events, n);
  EXPECT_EQ(f.report.gap.cell_retrieved, cell_gap);
  EXPECT_EQ(f.report.gap.baseline_retrieved, base_gap);
}

TEST(Compare, CsvAndSvgCarryTheCurve) {
  const Fixture& f = fixture();
  const std::string csv = curves_csv(f.report);
  std::istringstream in(csv);
  std::string line;
  std::getline(in, line);
  EXPECT_EQ(line, kCurveHeader);
  for (const ShardComparison& s : f.report.shards) {
    const std::string svg = curve_svg(s);
    EXPECT_EQ(svg.rfind("<svg", 0), 0u);
    for (const PRPoint& p : s.curve) {
      ASSERT_TRUE(std::getline(in, line));
      const auto fields = curve_fields(s.shard, p);
      std::string expect;
      for (std::size_t i = 0; i < fields.size(); ++i) expect += (i ? "," : "") + fields[i];
      EXPECT_EQ(line, expect);
      EXPECT_NE(svg.find("data-lambda=\"" + fields[1] + "\" data-recall=\"" + fields[2] + "\""),
                std::string::npos);
    }
  }
  EXPECT_FALSE(std::getline(in, line));
}

TEST(Compare, JsonReportShape) {
  const Fixture& f = fixture();
  const auto j = to_json(f.report);
  EXPECT_EQ(j["format_version"], kReportFormatVersion);
  EXPECT_EQ(j["shards"].size(), 3u);
  EXPECT_EQ(j["pooled"]["cell_model"]["recall"].get<double>(), f.report.cell_pooled.recall);
  EXPECT_TRUE(j["pooled"]["baseline"].contains("query_weighted"));
  EXPECT_EQ(j["gap_scenario"]["gap_listings"].get<std::size_t>(), f.report.gap.gap_listings);
}

TEST(Compare, CapacityExceededVariantsAreReported) {
  const Fixture& f = fixture();
  BoundsModel wide = f.baseline;
  wide.head_b(2, 0) = wide.head_b(3, 0) = 50.0f;
  wide.config.output_scale_km = 200.0;
  const std::vector<BaselineVariant> variants = {{0.5, &f.baseline}, {0.0, &wide}};
  std::vector<ShardInputs> inputs = {{&f.models[0], &f.vocabs[0], &f.sets[0]}};
  const auto r = compare(inputs, f.baseline, variants, f.dests, f.ctx, f.grid, 0.005);
  ASSERT_EQ(r.baseline_sweep.size(), 2u);
  EXPECT_FALSE(r.baseline_sweep[0].capacity_exceeded);
  EXPECT_EQ(r.baseline_sweep[0].pooled.recall, r.baseline_pooled.recall);
  EXPECT_TRUE(r.baseline_sweep[1].capacity_exceeded);
}

}  // namespace
}  // namespace cellret
