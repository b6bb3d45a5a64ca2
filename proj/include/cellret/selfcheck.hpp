#pragma once

// Quick built-in verification: grid geometry, analytic gradients against
// finite differences, and index queries against linear scans.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <set>
#include <string>
#include <vector>

#include "cellret/bounds_baseline.hpp"
#include "cellret/datagen.hpp"
#include "cellret/geo_index.hpp"
#include "cellret/nn.hpp"
#include "cellret/s2geom.hpp"
#include "cellret/xmc_model.hpp"

namespace cellret {

struct CheckResult {
  std::string name;
  bool pass = false;
  std::string detail;
};

// Random encoded rows for toy-sized models.
inline nn::EncodedSet toy_set(const nn::InputSchema& schema, int rows, int num_classes,
                              Rng& rng) {
  nn::EncodedSet set;
  for (int r = 0; r < rows; ++r) {
    FeatureVector fv;
    for (int s : schema.cat_sizes) fv.categorical.push_back(static_cast<int32_t>(rng.below(s)));
    for (int k = 0; k < schema.n_continuous; ++k) fv.continuous.push_back(rng.normal());
    set.push(fv, static_cast<int32_t>(rng.below(num_classes)), r);
    set.targets.push_back(rng.uniform(-40.0, 40.0));
    set.targets.push_back(rng.uniform(-40.0, 40.0));
  }
  return set;
}

// Largest entry-wise |analytic - numeric| / max(|analytic|, |numeric|, floor)
// over every parameter, using central differences.
template <typename Model, typename Loss>
double max_gradient_error(Model& model, const Model& analytic, Loss&& loss, double h = 1e-5,
                          double floor = 1e-6) {
  double worst = 0.0;
  auto params = model.tensors();
  const auto grads = analytic.tensors();
  for (std::size_t t = 0; t < params.size(); ++t) {
    for (Eigen::Index i = 0; i < params[t]->size(); ++i) {
      double& x = params[t]->data()[i];
      const double saved = x;
      x = saved + h;
      const double up = loss(model);
      x = saved - h;
      const double down = loss(model);
      x = saved;
      const double numeric = (up - down) / (2.0 * h);
      const double a = grads[t]->data()[i];
      const double err =
          std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), floor});
      worst = std::max(worst, err);
    }
  }
  return worst;
}

inline CheckResult check_cell_counts() {
  for (int level = 0; level <= 4; ++level) {
    const auto cells = all_cells(level);
    if (cells.size() != cell_count(level)) {
      return {"geometry.cell_counts", false, "level " + std::to_string(level)};
    }
  }
  return {"geometry.cell_counts", cell_count(11) == 25'165'824ull, "levels 0-4 and 11"};
}

inline CheckResult check_hilbert_adjacency(int max_level = 6) {
  std::size_t violations = 0;
  for (int level = 1; level <= max_level; ++level) {
    const int shift = kMaxCellLevel - level;
    for (int f = 0; f < kNumFaces; ++f) {
      FaceIJ prev = CellId::from_face_pos_level(f, 0, level).to_face_ij();
      const uint64_t n = uint64_t{1} << (2 * level);
      for (uint64_t k = 1; k < n; ++k) {
        const FaceIJ cur = CellId::from_face_pos_level(f, k, level).to_face_ij();
        const int64_t di = std::abs(int64_t(cur.i >> shift) - int64_t(prev.i >> shift));
        const int64_t dj = std::abs(int64_t(cur.j >> shift) - int64_t(prev.j >> shift));
        violations += di + dj != 1;
        prev = cur;
      }
    }
  }
  return {"geometry.hilbert_adjacency", violations == 0,
          std::to_string(violations) + " violations"};
}

inline CheckResult check_round_trips(int points_per_level = 1000) {
  Rng rng(101);
  std::size_t failures = 0;
  for (int level : {0, 4, 7, 11, 16}) {
    for (int k = 0; k < points_per_level; ++k) {
      const LatLng p{std::asin(rng.uniform(-1.0, 1.0)) * kRadToDeg, rng.uniform(-180.0, 180.0)};
      const CellId c = cell_from_latlng(p, level);
      failures += cell_from_point(cell_center_point(c), level) != c;
    }
  }
  double worst = 0.0;
  for (int k = 0; k <= 1000; ++k) {
    const double s = k / 1000.0;
    worst = std::max(worst, std::abs(uv_to_st(st_to_uv(s)) - s));
  }
  return {"geometry.round_trips", failures == 0 && worst <= 1e-12,
          std::to_string(failures) + " failures, st/uv error " + std::to_string(worst)};
}

inline nn::InputSchema toy_schema() { return {{3, 4}, 2, 3}; }

inline CheckResult check_sampled_softmax_gradient() {
  Rng rng(7);
  const auto schema = toy_schema();
  ModelConfig mc;
  mc.hidden = {5, 4};
  mc.embedding_dim = schema.emb_dim;
  const int K = 9;
  auto model = init_shard_model<double>(mc, K, schema);
  const auto set = toy_set(schema, 6, K, rng);
  std::vector<std::size_t> rows(set.size());
  for (std::size_t i = 0; i < rows.size(); ++i) rows[i] = i;
  const auto batch = nn::make_batch<double>(set, rows);
  const auto positives = distinct_labels(batch.labels, K);
  const auto negatives = sample_negatives(K, positives, 2, rng);
  auto grad = model.zeros_like();
  sampled_softmax_loss(model, batch, negatives, &grad);
  const double err = max_gradient_error(model, grad, [&](const ShardModelT<double>& m) {
    return sampled_softmax_loss(m, batch, negatives, nullptr);
  });
  return {"gradient.sampled_softmax", err < 1e-4, "max relative error " + std::to_string(err)};
}

inline CheckResult check_baseline_gradient() {
  Rng rng(8);
  const auto schema = toy_schema();
  BaselineConfig bc;
  bc.hidden = {5, 4};
  bc.embedding_dim = schema.emb_dim;
  bc.beta = 0.2;
  auto model = init_bounds_model<double>(bc, schema);
  const auto set = toy_set(schema, 6, 1, rng);
  std::vector<std::size_t> rows(set.size());
  for (std::size_t i = 0; i < rows.size(); ++i) rows[i] = i;
  const auto batch = nn::make_batch<double>(set, rows);
  auto grad = model.zeros_like();
  bounds_loss(model, batch, &grad);
  const double err = max_gradient_error(model, grad, [&](const BoundsModelT<double>& m) {
    return bounds_loss(m, batch, nullptr).total;
  });
  return {"gradient.baseline", err < 1e-4, "max relative error " + std::to_string(err)};
}

inline CheckResult check_sampled_full_equivalence() {
  Rng rng(9);
  const auto schema = toy_schema();
  ModelConfig mc;
  mc.hidden = {6};
  mc.embedding_dim = schema.emb_dim;
  const int K = 12;
  auto model = init_shard_model<double>(mc, K, schema);
  auto set = toy_set(schema, 5, K, rng);
  std::fill(set.labels.begin(), set.labels.end(), 4);
  std::vector<std::size_t> rows(set.size());
  for (std::size_t i = 0; i < rows.size(); ++i) rows[i] = i;
  const auto batch = nn::make_batch<double>(set, rows);
  const int positive = 4;
  const auto negatives = sample_negatives(K, std::span<const int>(&positive, 1), K - 1, rng);
  const double sampled = sampled_softmax_loss(model, batch, negatives, nullptr);
  const double full = full_softmax_loss(model, batch, nullptr);
  return {"model.sampled_full_equivalence", std::abs(sampled - full) <= 1e-9,
          "difference " + std::to_string(std::abs(sampled - full))};
}

inline CheckResult check_uniform_calibration() {
  Rng rng(10);
  const auto schema = toy_schema();
  ModelConfig mc;
  mc.hidden = {6};
  mc.embedding_dim = schema.emb_dim;
  const int K = 37;
  auto model = init_shard_model<float>(mc, K, schema);
  model.out_w.setZero();
  model.out_b.setZero();
  const double ce = eval_cross_entropy(model, toy_set(schema, 50, K, rng));
  return {"model.uniform_calibration", std::abs(ce - std::log(K)) <= 1e-6,
          "ce " + std::to_string(ce)};
}

inline std::vector<Listing> random_listings(int n, Rng& rng, const GeoRect& area) {
  std::vector<Listing> out;
  for (int i = 0; i < n; ++i) {
    Listing l;
    l.listing_id = i;
    l.location = {rng.uniform(area.lat_lo, area.lat_hi), rng.uniform(area.lng_lo, area.lng_hi)};
    l.capacity = 1 + static_cast<int>(rng.below(8));
    l.active = rng.bernoulli(0.95);
    out.push_back(l);
  }
  return out;
}

inline CheckResult check_index_oracles(int cell_queries = 200, int rect_queries = 50) {
  Rng rng(11);
  const GeoRect area{40.0, 41.0, -74.5, -73.0};
  const auto listings = random_listings(3000, rng, area);
  const ListingIndex index = build_index(listings);
  std::vector<CellId> cells;
  for (const auto& [c, ids] : index.postings()) cells.push_back(c);
  std::size_t mismatches = 0;
  for (int q = 0; q < cell_queries; ++q) {
    std::vector<CellId> query;
    const int n = 1 + static_cast<int>(rng.below(20));
    for (int k = 0; k < n; ++k) query.push_back(cells[rng.below(cells.size())]);
    const SearchFilters f{1 + static_cast<int>(rng.below(6)), true};
    const std::set<CellId> qs(query.begin(), query.end());
    std::vector<int64_t> expect;
    for (const Listing& l : listings) {
      if (l.active && l.capacity >= f.min_capacity &&
          qs.count(cell_from_latlng(l.location, kLabelLevel))) {
        expect.push_back(l.listing_id);
      }
    }
    mismatches += retrieve_cells(index, query, f) != expect;
  }
  for (int q = 0; q < rect_queries; ++q) {
    double a = rng.uniform(area.lat_lo, area.lat_hi), b = rng.uniform(area.lat_lo, area.lat_hi);
    double c = rng.uniform(area.lng_lo, area.lng_hi), d = rng.uniform(area.lng_lo, area.lng_hi);
    const GeoRect r{std::min(a, b), std::max(a, b), std::min(c, d), std::max(c, d)};
    const SearchFilters f{1 + static_cast<int>(rng.below(6)), true};
    std::vector<int64_t> expect;
    for (const Listing& l : listings) {
      if (l.active && l.capacity >= f.min_capacity && r.contains(l.location)) {
        expect.push_back(l.listing_id);
      }
    }
    mismatches += retrieve_rect(index, r, f) != expect;
  }
  return {"index.oracles", mismatches == 0, std::to_string(mismatches) + " mismatches"};
}

inline std::vector<CheckResult> run_selfcheck() {
  return {check_cell_counts(),
          check_hilbert_adjacency(),
          check_round_trips(),
          check_sampled_softmax_gradient(),
          check_baseline_gradient(),
          check_sampled_full_equivalence(),
          check_uniform_calibration(),
          check_index_oracles()};
}

}  // namespace cellret
