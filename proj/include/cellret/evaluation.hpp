#pragma once

// Offline metrics, threshold sweeps, recall matching, and the cell model vs
// rectangle baseline comparison.
//
// Metric definitions, per eval event:
//   hit          booked cell is in the predicted set
//   precision    |pred ∩ truth(dest)| / |pred|, truth(dest) = cells booked for
//                the destination anywhere in the eval window (0 for empty pred)
//   event prec.  hit / |pred|
//   retrieved    listings in the predicted cells passing the guest filter
// Aggregates are event-weighted; the "_q" variants average per destination
// first and then across destinations.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include <nlohmann/json.hpp>

#include "cellret/bounds_baseline.hpp"
#include "cellret/datagen.hpp"
#include "cellret/error.hpp"
#include "cellret/features.hpp"
#include "cellret/geo_index.hpp"
#include "cellret/label_vocab.hpp"
#include "cellret/xmc_model.hpp"

namespace cellret {

inline constexpr int kReportFormatVersion = 1;

// Thresholds selected for the production shard models; kept for reference.
inline double reference_threshold(ShardId s) {
  switch (s) {
    case ShardId::kEU: return 0.0005;
    case ShardId::kAMER: return 0.00075;
    case ShardId::kOTHER: return 0.000625;
  }
  return 0.0;
}

inline std::vector<double> log_grid(int n = 40, double lo = 1e-5, double hi = 1e-1) {
  if (n < 1 || !(lo > 0.0) || !(hi >= lo)) {
    throw Error(ErrorKind::kConfig, "invalid threshold grid");
  }
  std::vector<double> out(n);
  if (n == 1) {
    out[0] = lo;
    return out;
  }
  const double a = std::log(lo), b = std::log(hi);
  for (int i = 0; i < n; ++i) out[i] = std::exp(a + (b - a) * i / (n - 1));
  out.front() = lo;
  out.back() = hi;
  return out;
}

// ---------------------------------------------------------------------------
// Truth sets

class TruthTable {
 public:
  TruthTable() = default;
  explicit TruthTable(std::span<const SearchEvent> eval) {
    for (const SearchEvent& e : eval) by_dest_[e.dest_id].insert(e.booked_cell);
  }

  bool contains(int64_t dest, CellId cell) const {
    const auto it = by_dest_.find(dest);
    return it != by_dest_.end() && it->second.count(cell) != 0;
  }

  std::size_t size(int64_t dest) const {
    const auto it = by_dest_.find(dest);
    return it == by_dest_.end() ? 0 : it->second.size();
  }

 private:
  std::unordered_map<int64_t, std::unordered_set<CellId, CellIdHash>> by_dest_;
};

// ---------------------------------------------------------------------------
// Per-event outcomes and their aggregates

struct EventOutcome {
  int64_t dest_id = 0;
  bool hit = false;
  std::size_t cells = 0;
  std::size_t truth_hits = 0;
  std::size_t retrieved = 0;
  std::size_t gap_retrieved = 0;

  double precision_dest() const {
    return cells ? static_cast<double>(truth_hits) / static_cast<double>(cells) : 0.0;
  }
  double precision_event() const {
    return cells ? (hit ? 1.0 : 0.0) / static_cast<double>(cells) : 0.0;
  }
};

struct OperatingPoint {
  std::size_t events = 0;
  double recall = 0.0;
  double precision_dest = 0.0;
  double precision_event = 0.0;
  double mean_cells = 0.0;
  double mean_retrieved = 0.0;
  double recall_q = 0.0;
  double precision_dest_q = 0.0;
  double precision_event_q = 0.0;
  double mean_retrieved_q = 0.0;
};

inline OperatingPoint summarize(std::span<const EventOutcome> outcomes) {
  if (outcomes.empty()) throw Error(ErrorKind::kData, "empty eval set");
  OperatingPoint p;
  p.events = outcomes.size();
  struct Acc {
    double n = 0, hit = 0, pd = 0, pe = 0, ret = 0;
  };
  std::map<int64_t, Acc> per_dest;
  for (const EventOutcome& o : outcomes) {
    p.recall += o.hit;
    p.precision_dest += o.precision_dest();
    p.precision_event += o.precision_event();
    p.mean_cells += static_cast<double>(o.cells);
    p.mean_retrieved += static_cast<double>(o.retrieved);
    Acc& a = per_dest[o.dest_id];
    a.n += 1;
    a.hit += o.hit;
    a.pd += o.precision_dest();
    a.pe += o.precision_event();
    a.ret += static_cast<double>(o.retrieved);
  }
  const double n = static_cast<double>(outcomes.size());
  p.recall /= n;
  p.precision_dest /= n;
  p.precision_event /= n;
  p.mean_cells /= n;
  p.mean_retrieved /= n;
  for (const auto& [dest, a] : per_dest) {
    p.recall_q += a.hit / a.n;
    p.precision_dest_q += a.pd / a.n;
    p.precision_event_q += a.pe / a.n;
    p.mean_retrieved_q += a.ret / a.n;
  }
  const double d = static_cast<double>(per_dest.size());
  p.recall_q /= d;
  p.precision_dest_q /= d;
  p.precision_event_q /= d;
  p.mean_retrieved_q /= d;
  return p;
}

// ---------------------------------------------------------------------------
// Metrics over explicit predicted cell sets

inline double recall(std::span<const std::vector<CellId>> preds,
                     std::span<const SearchEvent> events) {
  if (events.empty()) throw Error(ErrorKind::kData, "empty eval set");
  if (preds.size() != events.size()) throw Error(ErrorKind::kData, "one set per event");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < events.size(); ++i) {
    hits += std::find(preds[i].begin(), preds[i].end(), events[i].booked_cell) != preds[i].end();
  }
  return static_cast<double>(hits) / static_cast<double>(events.size());
}

inline double precision(std::span<const std::vector<CellId>> preds,
                        std::span<const SearchEvent> events, const TruthTable& truth) {
  if (events.empty()) throw Error(ErrorKind::kData, "empty eval set");
  if (preds.size() != events.size()) throw Error(ErrorKind::kData, "one set per event");
  double sum = 0.0;
  for (std::size_t i = 0; i < events.size(); ++i) {
    if (preds[i].empty()) continue;
    std::size_t tp = 0;
    for (CellId c : preds[i]) tp += truth.contains(events[i].dest_id, c);
    sum += static_cast<double>(tp) / static_cast<double>(preds[i].size());
  }
  return sum / static_cast<double>(events.size());
}

inline double num_retrieved(std::span<const std::vector<CellId>> preds,
                            std::span<const SearchEvent> events, const ListingIndex& index) {
  if (preds.size() != events.size()) throw Error(ErrorKind::kData, "one set per event");
  if (events.empty()) return 0.0;
  double sum = 0.0;
  for (std::size_t i = 0; i < events.size(); ++i) {
    sum += static_cast<double>(
        retrieve_cells(index, preds[i], SearchFilters{events[i].num_guests, true}).size());
  }
  return sum / static_cast<double>(events.size());
}

// Cells with p >= lambda, in ascending id order.
inline RetrievalSet threshold_cells(const LabelVocabulary& vocab,
                                    std::span<const double> probabilities, double lambda) {
  if (static_cast<int>(probabilities.size()) != vocab.size()) {
    throw Error(ErrorKind::kData, "probability vector does not match vocabulary");
  }
  RetrievalSet rs;
  rs.threshold = lambda;
  for (int k = 0; k < vocab.size(); ++k) {
    if (probabilities[k] >= lambda) {
      rs.cells.push_back(vocab.cell(k));
      rs.probabilities.push_back(probabilities[k]);
    }
  }
  return rs;
}

// ---------------------------------------------------------------------------
// Cell-model sweeps

struct PRPoint {
  double lambda = 0.0;
  double recall = 0.0;
  double precision_dest = 0.0;
  double precision_event = 0.0;
  double mean_cells = 0.0;
  double mean_retrieved = 0.0;
};

inline PRPoint to_pr_point(double lambda, const OperatingPoint& p) {
  return {lambda, p.recall, p.precision_dest, p.precision_event, p.mean_cells, p.mean_retrieved};
}

struct EvalContext {
  const ListingIndex* index = nullptr;
  const TruthTable* truth = nullptr;
  GapScenario scenario;
};

// One shard's eval events with their encoded features.
struct ShardEvalSet {
  ShardId shard = ShardId::kEU;
  std::vector<SearchEvent> events;
  std::vector<FeatureVector> features;
};

namespace eval_detail {

// Filtered listing counts per class, by minimum guest capacity.
class ClassCounts {
 public:
  ClassCounts(const LabelVocabulary& vocab, const EvalContext& ctx) {
    for (CellId c : vocab.classes()) {
      std::vector<std::pair<int, bool>> cell;
      if (const auto* ids = ctx.index->posting(c)) {
        for (int64_t id : *ids) {
          const Listing& l = ctx.index->listing(id);
          cell.emplace_back(l.capacity, ctx.scenario.dest_id >= 0 &&
                                            ctx.scenario.gap_region.contains(l.location));
        }
      }
      listings_.push_back(std::move(cell));
    }
  }

  const std::pair<std::vector<uint32_t>, std::vector<uint32_t>>& for_guests(int guests) {
    auto it = cache_.find(guests);
    if (it != cache_.end()) return it->second;
    std::vector<uint32_t> all(listings_.size()), gap(listings_.size());
    for (std::size_t k = 0; k < listings_.size(); ++k) {
      for (const auto& [cap, in_gap] : listings_[k]) {
        if (cap >= guests) {
          ++all[k];
          gap[k] += in_gap;
        }
      }
    }
    return cache_.emplace(guests, std::make_pair(std::move(all), std::move(gap))).first->second;
  }

 private:
  std::vector<std::vector<std::pair<int, bool>>> listings_;
  std::map<int, std::pair<std::vector<uint32_t>, std::vector<uint32_t>>> cache_;
};

}  // namespace eval_detail

struct CellSweep {
  std::vector<double> lambdas;                      // ascending
  std::vector<std::vector<EventOutcome>> outcomes;  // [lambda][event]
  std::vector<double> true_prob;                    // per event, 0 when out of vocabulary
};

// Evaluates the shard model at every lambda in one pass over the events.
inline CellSweep sweep_cell_model(const ShardModel& model, const LabelVocabulary& vocab,
                                  const ShardEvalSet& set, const EvalContext& ctx,
                                  std::vector<double> lambdas) {
  if (lambdas.empty()) throw Error(ErrorKind::kConfig, "empty threshold grid");
  if (set.events.empty()) throw Error(ErrorKind::kData, "empty eval set");
  if (model.num_classes != vocab.size()) {
    throw Error(ErrorKind::kData, "model and vocabulary sizes differ");
  }
  std::sort(lambdas.begin(), lambdas.end());
  CellSweep out;
  out.lambdas = lambdas;
  out.outcomes.assign(lambdas.size(), std::vector<EventOutcome>(set.events.size()));
  out.true_prob.assign(set.events.size(), 0.0);

  eval_detail::ClassCounts counts(vocab, ctx);
  std::map<int64_t, std::vector<char>> truth_masks;
  auto mask_for = [&](int64_t dest) -> const std::vector<char>& {
    auto it = truth_masks.find(dest);
    if (it != truth_masks.end()) return it->second;
    std::vector<char> m(vocab.size());
    for (int k = 0; k < vocab.size(); ++k) m[k] = ctx.truth->contains(dest, vocab.cell(k));
    return truth_masks.emplace(dest, std::move(m)).first->second;
  };

  const std::size_t chunk = 512;
  const int K = vocab.size();
  std::vector<int> order(K);
  std::vector<std::size_t> pre_truth(K + 1), pre_all(K + 1), pre_gap(K + 1);
  for (std::size_t start = 0; start < set.events.size(); start += chunk) {
    const std::size_t end = std::min(set.events.size(), start + chunk);
    nn::EncodedSet enc;
    for (std::size_t i = start; i < end; ++i) enc.push(set.features[i], -1, i);
    std::vector<std::size_t> rows(end - start);
    for (std::size_t r = 0; r < rows.size(); ++r) rows[r] = r;
    const Eigen::MatrixXd lp = log_probs_batch(model, nn::make_batch<float>(enc, rows));
    for (std::size_t i = start; i < end; ++i) {
      const SearchEvent& e = set.events[i];
      const auto col = lp.col(static_cast<Eigen::Index>(i - start));
      std::vector<double> p(K);
      for (int k = 0; k < K; ++k) p[k] = std::exp(col(k));
      for (int k = 0; k < K; ++k) order[k] = k;
      std::sort(order.begin(), order.end(),
                [&](int a, int b) { return p[a] > p[b] || (p[a] == p[b] && a < b); });
      const auto& mask = mask_for(e.dest_id);
      const auto& [all, gap] = counts.for_guests(e.num_guests);
      const bool scenario = e.dest_id == ctx.scenario.dest_id;
      int rank_true = -1;
      const auto label = vocab.lookup(e.booked_cell);
      if (label) out.true_prob[i] = p[*label];
      for (int r = 0; r < K; ++r) {
        const int k = order[r];
        if (label && k == *label) rank_true = r;
        pre_truth[r + 1] = pre_truth[r] + mask[k];
        pre_all[r + 1] = pre_all[r] + all[k];
        pre_gap[r + 1] = pre_gap[r] + gap[k];
      }
      for (std::size_t li = 0; li < lambdas.size(); ++li) {
        const double lambda = lambdas[li];
        const auto n = static_cast<std::size_t>(
            std::partition_point(order.begin(), order.end(),
                                 [&](int k) { return p[k] >= lambda; }) -
            order.begin());
        EventOutcome& o = out.outcomes[li][i];
        o.dest_id = e.dest_id;
        o.cells = n;
        o.hit = rank_true >= 0 && static_cast<std::size_t>(rank_true) < n;
        o.truth_hits = pre_truth[n];
        o.retrieved = pre_all[n];
        o.gap_retrieved = scenario ? pre_gap[n] : 0;
      }
    }
  }
  return out;
}

inline std::vector<PRPoint> curve_points(const CellSweep& sweep) {
  std::vector<PRPoint> out;
  for (std::size_t li = 0; li < sweep.lambdas.size(); ++li) {
    out.push_back(to_pr_point(sweep.lambdas[li], summarize(sweep.outcomes[li])));
  }
  return out;
}

inline std::vector<PRPoint> sweep_thresholds(const ShardModel& model,
                                             const LabelVocabulary& vocab,
                                             const ShardEvalSet& set, const EvalContext& ctx,
                                             const std::vector<double>& grid) {
  return curve_points(sweep_cell_model(model, vocab, set, ctx, grid));
}

struct ThresholdChoice {
  double lambda = 0.0;
  bool warning = false;  // target recall not reachable on the curve
};

// Largest lambda whose recall reaches the target; otherwise the smallest
// lambda with a warning. The curve must be in ascending lambda order.
inline ThresholdChoice match_recall_threshold(std::span<const PRPoint> curve, double target) {
  if (curve.empty()) throw Error(ErrorKind::kData, "empty curve");
  for (std::size_t i = curve.size(); i-- > 0;) {
    if (curve[i].recall >= target) return {curve[i].lambda, false};
  }
  return {curve.front().lambda, true};
}

// The threshold at which recall first reaches the target, read off the true
// class probabilities: the m-th largest with m = ceil(target * N).
inline std::optional<double> exact_recall_threshold(std::span<const double> true_prob,
                                                    double target) {
  const std::size_t n = true_prob.size();
  if (n == 0) return std::nullopt;
  const auto m = static_cast<std::size_t>(
      std::ceil(std::max(0.0, target) * static_cast<double>(n) - 1e-9));
  if (m == 0) return std::nullopt;
  std::vector<double> p;
  for (double x : true_prob) {
    if (x > 0.0) p.push_back(x);
  }
  if (m > p.size()) return std::nullopt;
  std::nth_element(p.begin(), p.begin() + static_cast<std::ptrdiff_t>(m - 1), p.end(),
                   std::greater<>());
  return p[m - 1];
}

// ---------------------------------------------------------------------------
// Baseline

inline std::vector<EventOutcome> baseline_outcomes(const BoundsModel& model,
                                                   const std::vector<SearchEvent>& events,
                                                   const std::vector<FeatureVector>& features,
                                                   const DestinationTable& dests,
                                                   const EvalContext& ctx) {
  std::vector<EventOutcome> out(events.size());
  for (std::size_t i = 0; i < events.size(); ++i) {
    const SearchEvent& e = events[i];
    const GeoRect rect = predict_bounds(model, features[i], dests.at(e.dest_id).center);
    const auto cells = bounds_to_cellset(rect);
    const SearchFilters f{e.num_guests, true};
    EventOutcome& o = out[i];
    o.dest_id = e.dest_id;
    o.cells = cells.size();
    for (CellId c : cells) {
      o.hit = o.hit || c == e.booked_cell;
      o.truth_hits += ctx.truth->contains(e.dest_id, c);
      o.retrieved += ctx.index->count(c, f);
    }
    if (e.dest_id == ctx.scenario.dest_id) {
      for (int64_t id : retrieve_rect(*ctx.index, rect, f)) {
        o.gap_retrieved += ctx.scenario.gap_region.contains(ctx.index->listing(id).location);
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Comparison report

struct Deltas {
  double recall_abs = 0.0;
  std::optional<double> recall_rel, precision_dest_rel, precision_event_rel, mean_cells_rel,
      mean_retrieved_rel, precision_dest_q_rel;
};

inline std::optional<double> rel_delta(double base, double cell) {
  if (base == 0.0) return std::nullopt;
  return (cell - base) / base;
}

inline Deltas deltas(const OperatingPoint& base, const OperatingPoint& cell) {
  Deltas d;
  d.recall_abs = cell.recall - base.recall;
  d.recall_rel = rel_delta(base.recall, cell.recall);
  d.precision_dest_rel = rel_delta(base.precision_dest, cell.precision_dest);
  d.precision_event_rel = rel_delta(base.precision_event, cell.precision_event);
  d.mean_cells_rel = rel_delta(base.mean_cells, cell.mean_cells);
  d.mean_retrieved_rel = rel_delta(base.mean_retrieved, cell.mean_retrieved);
  d.precision_dest_q_rel = rel_delta(base.precision_dest_q, cell.precision_dest_q);
  return d;
}

struct ShardComparison {
  ShardId shard = ShardId::kEU;
  int num_classes = 0;
  OperatingPoint baseline;
  OperatingPoint cell;
  Deltas delta;
  double lambda = 0.0;
  bool lambda_warning = false;
  double reference_lambda = 0.0;
  std::vector<PRPoint> curve;
};

struct GapComparison {
  int64_t dest_id = -1;
  std::size_t events = 0;
  std::size_t gap_listings = 0;
  std::size_t baseline_retrieved = 0;
  std::size_t cell_retrieved = 0;
};

struct BaselineSweepPoint {
  double beta = 0.0;
  OperatingPoint pooled;
  bool capacity_exceeded = false;  // some rectangle needed too many cells
};

struct ComparisonReport {
  std::vector<ShardComparison> shards;
  OperatingPoint baseline_pooled;
  OperatingPoint cell_pooled;
  Deltas pooled_delta;
  double recall_tolerance = 0.005;
  bool recall_matched = false;
  GapComparison gap;
  std::vector<BaselineSweepPoint> baseline_sweep;
};

struct ShardInputs {
  const ShardModel* model = nullptr;
  const LabelVocabulary* vocab = nullptr;
  const ShardEvalSet* eval = nullptr;
};

struct BaselineVariant {
  double beta = 0.0;
  const BoundsModel* model = nullptr;
};

// Per shard: evaluates the baseline, sweeps the cell model over the grid
// plus the exact recall-matching threshold, and picks the largest lambda
// whose recall reaches the baseline's.
inline ComparisonReport compare(std::span<const ShardInputs> shards,
                                const BoundsModel& baseline,
                                std::span<const BaselineVariant> baseline_sweep,
                                const DestinationTable& dests, const EvalContext& ctx,
                                const std::vector<double>& grid, double recall_tolerance) {
  if (shards.empty()) throw Error(ErrorKind::kData, "no shards to compare");
  if (grid.empty()) throw Error(ErrorKind::kConfig, "empty threshold grid");
  ComparisonReport rep;
  rep.recall_tolerance = recall_tolerance;
  rep.gap.dest_id = ctx.scenario.dest_id;
  if (ctx.scenario.dest_id >= 0) {
    for (const auto& [cell, ids] : ctx.index->postings()) {
      for (int64_t id : ids) {
        rep.gap.gap_listings += ctx.scenario.gap_region.contains(ctx.index->listing(id).location);
      }
    }
  }
  std::vector<EventOutcome> base_all, cell_all;
  for (const ShardInputs& in : shards) {
    if (!in.model || !in.vocab || !in.eval) throw Error(ErrorKind::kData, "missing shard input");
    ShardComparison sc;
    sc.shard = in.eval->shard;
    sc.num_classes = in.vocab->size();
    sc.reference_lambda = reference_threshold(sc.shard);
    const auto base = baseline_outcomes(baseline, in.eval->events, in.eval->features, dests, ctx);
    sc.baseline = summarize(base);

    CellSweep sweep = sweep_cell_model(*in.model, *in.vocab, *in.eval, ctx, grid);
    if (const auto exact = exact_recall_threshold(sweep.true_prob, sc.baseline.recall);
        exact && std::find(grid.begin(), grid.end(), *exact) == grid.end()) {
      auto lambdas = grid;
      lambdas.push_back(*exact);
      sweep = sweep_cell_model(*in.model, *in.vocab, *in.eval, ctx, lambdas);
    }
    sc.curve = curve_points(sweep);
    const ThresholdChoice choice = match_recall_threshold(sc.curve, sc.baseline.recall);
    sc.lambda = choice.lambda;
    sc.lambda_warning = choice.warning;
    const std::size_t li = static_cast<std::size_t>(
        std::find(sweep.lambdas.begin(), sweep.lambdas.end(), choice.lambda) -
        sweep.lambdas.begin());
    const auto& chosen = sweep.outcomes[li];
    sc.cell = summarize(chosen);
    sc.delta = deltas(sc.baseline, sc.cell);

    for (std::size_t i = 0; i < chosen.size(); ++i) {
      if (chosen[i].dest_id != ctx.scenario.dest_id) continue;
      ++rep.gap.events;
      rep.gap.cell_retrieved += chosen[i].gap_retrieved;
      rep.gap.baseline_retrieved += base[i].gap_retrieved;
    }
    base_all.insert(base_all.end(), base.begin(), base.end());
    cell_all.insert(cell_all.end(), chosen.begin(), chosen.end());
    rep.shards.push_back(std::move(sc));
  }
  rep.baseline_pooled = summarize(base_all);
  rep.cell_pooled = summarize(cell_all);
  rep.pooled_delta = deltas(rep.baseline_pooled, rep.cell_pooled);
  rep.recall_matched = std::abs(rep.pooled_delta.recall_abs) <= recall_tolerance;
  for (const ShardComparison& sc : rep.shards) {
    rep.recall_matched =
        rep.recall_matched && std::abs(sc.delta.recall_abs) <= recall_tolerance;
  }

  for (const BaselineVariant& v : baseline_sweep) {
    std::vector<EventOutcome> all;
    try {
      for (const ShardInputs& in : shards) {
        const auto o =
            baseline_outcomes(*v.model, in.eval->events, in.eval->features, dests, ctx);
        all.insert(all.end(), o.begin(), o.end());
      }
    } catch (const Error& e) {
      if (e.kind() != ErrorKind::kCapacity) throw;
      rep.baseline_sweep.push_back({v.beta, {}, true});
      continue;
    }
    rep.baseline_sweep.push_back({v.beta, summarize(all), false});
  }
  return rep;
}

// ---------------------------------------------------------------------------
// Serialization

inline nlohmann::json to_json(const OperatingPoint& p) {
  return {{"events", p.events},
          {"recall", p.recall},
          {"precision_dest", p.precision_dest},
          {"precision_event", p.precision_event},
          {"mean_cells", p.mean_cells},
          {"mean_retrieved", p.mean_retrieved},
          {"query_weighted",
           {{"recall", p.recall_q},
            {"precision_dest", p.precision_dest_q},
            {"precision_event", p.precision_event_q},
            {"mean_retrieved", p.mean_retrieved_q}}}};
}

inline nlohmann::json opt_json(const std::optional<double>& x) {
  return x ? nlohmann::json(*x) : nlohmann::json(nullptr);
}

inline nlohmann::json to_json(const Deltas& d) {
  return {{"recall_abs", d.recall_abs},
          {"recall_rel", opt_json(d.recall_rel)},
          {"precision_dest_rel", opt_json(d.precision_dest_rel)},
          {"precision_event_rel", opt_json(d.precision_event_rel)},
          {"mean_cells_rel", opt_json(d.mean_cells_rel)},
          {"mean_retrieved_rel", opt_json(d.mean_retrieved_rel)},
          {"precision_dest_query_weighted_rel", opt_json(d.precision_dest_q_rel)}};
}

inline nlohmann::json to_json(const ComparisonReport& r) {
  nlohmann::json j;
  j["format_version"] = kReportFormatVersion;
  j["recall_tolerance"] = r.recall_tolerance;
  j["recall_matched"] = r.recall_matched;
  nlohmann::json shards = nlohmann::json::array();
  for (const ShardComparison& s : r.shards) {
    shards.push_back({{"shard", std::string(to_string(s.shard))},
                      {"num_classes", s.num_classes},
                      {"lambda", s.lambda},
                      {"lambda_warning", s.lambda_warning},
                      {"reference_lambda", s.reference_lambda},
                      {"baseline", to_json(s.baseline)},
                      {"cell_model", to_json(s.cell)},
                      {"delta", to_json(s.delta)},
                      {"curve_points", s.curve.size()}});
  }
  j["shards"] = shards;
  j["pooled"] = {{"baseline", to_json(r.baseline_pooled)},
                 {"cell_model", to_json(r.cell_pooled)},
                 {"delta", to_json(r.pooled_delta)}};
  j["gap_scenario"] = {{"dest_id", r.gap.dest_id},
                       {"events", r.gap.events},
                       {"gap_listings", r.gap.gap_listings},
                       {"baseline_retrieved", r.gap.baseline_retrieved},
                       {"cell_model_retrieved", r.gap.cell_retrieved}};
  nlohmann::json sweep = nlohmann::json::array();
  for (const auto& b : r.baseline_sweep) {
    if (b.capacity_exceeded) {
      sweep.push_back({{"beta", b.beta}, {"capacity_exceeded", true}});
    } else {
      sweep.push_back({{"beta", b.beta}, {"pooled", to_json(b.pooled)}});
    }
  }
  j["baseline_beta_sweep"] = sweep;
  return j;
}

inline std::string fmt_g(double x) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.9g", x);
  return buf;
}

inline constexpr std::string_view kCurveHeader =
    "shard,lambda,recall,precision_dest,precision_event,mean_cells,mean_retrieved";

inline std::vector<std::string> curve_fields(ShardId shard, const PRPoint& p) {
  return {std::string(to_string(shard)), fmt_g(p.lambda),          fmt_g(p.recall),
          fmt_g(p.precision_dest),       fmt_g(p.precision_event), fmt_g(p.mean_cells),
          fmt_g(p.mean_retrieved)};
}

inline std::string curves_csv(const ComparisonReport& r) {
  std::string out(kCurveHeader);
  out += '\n';
  for (const ShardComparison& s : r.shards) {
    for (const PRPoint& p : s.curve) {
      const auto f = curve_fields(s.shard, p);
      for (std::size_t i = 0; i < f.size(); ++i) out += (i ? "," : "") + f[i];
      out += '\n';
    }
  }
  return out;
}

// Precision (destination truth) against recall, with the baseline and the
// selected operating point marked. Each curve vertex carries its CSV row.
inline std::string curve_svg(const ShardComparison& s) {
  constexpr double W = 640, H = 480, L = 70, R = 20, T = 40, B = 60;
  auto px = [&](double recall) { return L + recall * (W - L - R); };
  auto py = [&](double prec) { return H - B - prec * (H - T - B); };
  auto num = [](double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.2f", v);
    return std::string(buf);
  };
  const std::string name(to_string(s.shard));
  std::string o;
  o += "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"640\" height=\"480\" "
       "viewBox=\"0 0 640 480\">\n";
  o += "<rect width=\"640\" height=\"480\" fill=\"white\"/>\n";
  o += "<text x=\"320\" y=\"24\" text-anchor=\"middle\" font-family=\"sans-serif\" "
       "font-size=\"16\">Precision vs recall (" + name + ")</text>\n";
  o += "<line x1=\"" + num(L) + "\" y1=\"" + num(H - B) + "\" x2=\"" + num(W - R) + "\" y2=\"" +
       num(H - B) + "\" stroke=\"black\"/>\n";
  o += "<line x1=\"" + num(L) + "\" y1=\"" + num(T) + "\" x2=\"" + num(L) + "\" y2=\"" +
       num(H - B) + "\" stroke=\"black\"/>\n";
  for (int t = 0; t <= 10; t += 2) {
    const double v = t / 10.0;
    o += "<text x=\"" + num(px(v)) + "\" y=\"" + num(H - B + 18) +
         "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"11\">" + num(v) +
         "</text>\n";
    o += "<text x=\"" + num(L - 8) + "\" y=\"" + num(py(v) + 4) +
         "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"11\">" + num(v) +
         "</text>\n";
  }
  o += "<text x=\"" + num((L + W - R) / 2) + "\" y=\"" + num(H - 15) +
       "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"13\">recall</text>\n";
  o += "<text x=\"18\" y=\"" + num((T + H - B) / 2) + "\" text-anchor=\"middle\" "
       "font-family=\"sans-serif\" font-size=\"13\" transform=\"rotate(-90 18 " +
       num((T + H - B) / 2) + ")\">precision</text>\n";
  o += "<polyline fill=\"none\" stroke=\"steelblue\" stroke-width=\"2\" points=\"";
  for (std::size_t i = 0; i < s.curve.size(); ++i) {
    o += (i ? " " : "") + num(px(s.curve[i].recall)) + "," + num(py(s.curve[i].precision_dest));
  }
  o += "\"/>\n";
  for (const PRPoint& p : s.curve) {
    const auto f = curve_fields(s.shard, p);
    o += "<circle cx=\"" + num(px(p.recall)) + "\" cy=\"" + num(py(p.precision_dest)) +
         "\" r=\"2.5\" fill=\"steelblue\" data-shard=\"" + f[0] + "\" data-lambda=\"" + f[1] +
         "\" data-recall=\"" + f[2] + "\" data-precision_dest=\"" + f[3] +
         "\" data-precision_event=\"" + f[4] + "\" data-mean_cells=\"" + f[5] +
         "\" data-mean_retrieved=\"" + f[6] + "\"/>\n";
  }
  o += "<rect x=\"" + num(px(s.baseline.recall) - 5) + "\" y=\"" +
       num(py(s.baseline.precision_dest) - 5) +
       "\" width=\"10\" height=\"10\" fill=\"darkorange\" data-role=\"baseline\" data-recall=\"" +
       fmt_g(s.baseline.recall) + "\" data-precision_dest=\"" +
       fmt_g(s.baseline.precision_dest) + "\"/>\n";
  o += "<circle cx=\"" + num(px(s.cell.recall)) + "\" cy=\"" + num(py(s.cell.precision_dest)) +
       "\" r=\"6\" fill=\"none\" stroke=\"crimson\" stroke-width=\"2\" data-role=\"selected\" "
       "data-lambda=\"" + fmt_g(s.lambda) + "\"/>\n";
  o += "<text x=\"" + num(W - R - 150) + "\" y=\"" + num(T + 14) +
       "\" font-family=\"sans-serif\" font-size=\"11\" fill=\"steelblue\">cell model</text>\n";
  o += "<text x=\"" + num(W - R - 150) + "\" y=\"" + num(T + 30) +
       "\" font-family=\"sans-serif\" font-size=\"11\" fill=\"darkorange\">rectangle "
       "baseline</text>\n";
  o += "</svg>\n";
  return o;
}

}  // namespace cellret
