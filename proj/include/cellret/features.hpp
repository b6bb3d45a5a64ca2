#pragma once

// Search events -> model inputs.
//
// Continuous features (num_guests, trip_length_nights, bounds_diagonal_km)
// are standardized with train-split statistics. Categorical features are
// mapped through vocabularies built from the train split; index 0 is the
// unknown bucket. The destination is described by the ids of the cells
// containing its center at each configured level.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "cellret/datagen.hpp"
#include "cellret/error.hpp"
#include "cellret/s2geom.hpp"

namespace cellret {

using ShardId = Continent;
inline constexpr std::array<ShardId, 3> kShards = kContinents;

inline ShardId shard_of(const Destination& d) { return d.continent; }

inline constexpr int kFeatureFormatVersion = 1;
inline constexpr int kNumContinuous = 3;
inline const std::array<const char*, kNumContinuous> kContinuousNames = {
    "num_guests", "trip_length_nights", "bounds_diagonal_km"};

struct NormalizerStats {
  std::array<double, kNumContinuous> mean{};
  std::array<double, kNumContinuous> std{};

  double standardize(int k, double x) const { return (x - mean[k]) / std[k]; }

  friend bool operator==(const NormalizerStats&, const NormalizerStats&) = default;
};

// Value -> index table. Values are assigned 1..n in sorted order.
class CategoricalVocab {
 public:
  CategoricalVocab() = default;
  CategoricalVocab(std::string name, const std::set<std::string>& values)
      : name_(std::move(name)), values_(values.begin(), values.end()) {
    for (std::size_t i = 0; i < values_.size(); ++i) {
      index_.emplace(values_[i], static_cast<int32_t>(i + 1));
    }
  }

  const std::string& name() const { return name_; }
  const std::vector<std::string>& values() const { return values_; }
  // Including the unknown bucket.
  int size() const { return static_cast<int>(values_.size()) + 1; }

  int32_t lookup(const std::string& value) const {
    const auto it = index_.find(value);
    return it == index_.end() ? 0 : it->second;
  }

  friend bool operator==(const CategoricalVocab& a, const CategoricalVocab& b) {
    return a.name_ == b.name_ && a.values_ == b.values_;
  }

 private:
  std::string name_;
  std::vector<std::string> values_;
  std::unordered_map<std::string, int32_t> index_;
};

struct FeatureVector {
  std::vector<double> continuous;
  std::vector<int32_t> categorical;

  friend bool operator==(const FeatureVector&, const FeatureVector&) = default;
};

struct EncodedEvent {
  FeatureVector features;
  ShardId shard = ShardId::kEU;
};

// Lookup of destinations by id.
class DestinationTable {
 public:
  DestinationTable() = default;
  explicit DestinationTable(std::vector<Destination> dests) : dests_(std::move(dests)) {
    for (std::size_t i = 0; i < dests_.size(); ++i) {
      if (!by_id_.emplace(dests_[i].dest_id, i).second) {
        throw Error(ErrorKind::kData,
                    "duplicate destination id " + std::to_string(dests_[i].dest_id));
      }
    }
  }

  const Destination& at(int64_t id) const {
    const auto it = by_id_.find(id);
    if (it == by_id_.end()) {
      throw Error(ErrorKind::kData, "unknown destination " + std::to_string(id));
    }
    return dests_[it->second];
  }

  bool contains(int64_t id) const { return by_id_.count(id) != 0; }
  const std::vector<Destination>& all() const { return dests_; }

 private:
  std::vector<Destination> dests_;
  std::unordered_map<int64_t, std::size_t> by_id_;
};

namespace feature_detail {

inline std::array<double, kNumContinuous> raw_continuous(const SearchEvent& e,
                                                         const Destination& d) {
  return {static_cast<double>(e.num_guests), static_cast<double>(e.trip_length_nights),
          d.bounds_diagonal_km};
}

inline std::vector<std::string> categorical_names(const std::vector<int>& cell_levels) {
  std::vector<std::string> names;
  for (int level : cell_levels) names.push_back("dest_cell_l" + std::to_string(level));
  for (const char* n : {"dest_type", "dest_country", "origin_country", "is_mobile_app",
                        "device_type", "is_weekend"}) {
    names.emplace_back(n);
  }
  return names;
}

inline std::vector<std::string> raw_categorical(const SearchEvent& e, const Destination& d,
                                                const std::vector<int>& cell_levels) {
  std::vector<std::string> out;
  out.reserve(cell_levels.size() + 6);
  for (int level : cell_levels) {
    out.push_back(cell_from_latlng(d.center, level).to_string());
  }
  out.emplace_back(to_string(d.dest_type));
  out.push_back(d.country);
  out.push_back(e.origin_country);
  out.emplace_back(e.is_mobile_app ? "1" : "0");
  out.emplace_back(to_string(e.device_type));
  out.emplace_back(e.is_weekend ? "1" : "0");
  return out;
}

}  // namespace feature_detail

// Fitted front-end. Depends on the training split only.
struct FeaturePipeline {
  std::vector<int> cell_levels = {4, 7, 11};
  NormalizerStats stats;
  std::vector<CategoricalVocab> vocabs;

  int num_categorical() const { return static_cast<int>(vocabs.size()); }

  std::vector<int> categorical_sizes() const {
    std::vector<int> out;
    for (const auto& v : vocabs) out.push_back(v.size());
    return out;
  }

  friend bool operator==(const FeaturePipeline&, const FeaturePipeline&) = default;
};

inline void check_cell_levels(const std::vector<int>& levels) {
  if (levels.empty()) throw Error(ErrorKind::kConfig, "cell_levels is empty");
  for (int l : levels) {
    if (l < 0 || l > kMaxCellLevel) {
      throw Error(ErrorKind::kConfig, "cell level " + std::to_string(l) + " out of range");
    }
  }
}

inline NormalizerStats fit_normalizer(std::span<const SearchEvent> train,
                                      const DestinationTable& dests) {
  if (train.empty()) throw Error(ErrorKind::kData, "cannot fit normalizer on empty set");
  NormalizerStats s;
  std::array<double, kNumContinuous> sum{}, sum_sq{};
  for (const SearchEvent& e : train) {
    const auto x = feature_detail::raw_continuous(e, dests.at(e.dest_id));
    for (int k = 0; k < kNumContinuous; ++k) sum[k] += x[k];
  }
  const double n = static_cast<double>(train.size());
  for (int k = 0; k < kNumContinuous; ++k) s.mean[k] = sum[k] / n;
  for (const SearchEvent& e : train) {
    const auto x = feature_detail::raw_continuous(e, dests.at(e.dest_id));
    for (int k = 0; k < kNumContinuous; ++k) {
      const double d = x[k] - s.mean[k];
      sum_sq[k] += d * d;
    }
  }
  for (int k = 0; k < kNumContinuous; ++k) {
    const double sd = std::sqrt(sum_sq[k] / n);
    s.std[k] = sd > 1e-12 ? sd : 1.0;
  }
  return s;
}

inline std::vector<CategoricalVocab> build_categorical_vocabs(
    std::span<const SearchEvent> train, const DestinationTable& dests,
    const std::vector<int>& cell_levels) {
  const auto names = feature_detail::categorical_names(cell_levels);
  std::vector<std::set<std::string>> seen(names.size());
  for (const SearchEvent& e : train) {
    const auto raw = feature_detail::raw_categorical(e, dests.at(e.dest_id), cell_levels);
    for (std::size_t k = 0; k < raw.size(); ++k) seen[k].insert(raw[k]);
  }
  std::vector<CategoricalVocab> out;
  for (std::size_t k = 0; k < names.size(); ++k) out.emplace_back(names[k], seen[k]);
  return out;
}

inline FeaturePipeline fit_feature_pipeline(std::span<const SearchEvent> train,
                                            const DestinationTable& dests,
                                            std::vector<int> cell_levels) {
  check_cell_levels(cell_levels);
  FeaturePipeline p;
  p.cell_levels = std::move(cell_levels);
  p.stats = fit_normalizer(train, dests);
  p.vocabs = build_categorical_vocabs(train, dests, p.cell_levels);
  return p;
}

inline EncodedEvent encode(const SearchEvent& e, const Destination& d,
                           const FeaturePipeline& p) {
  if (e.dest_id != d.dest_id || e.num_guests < 1 || e.trip_length_nights < 1 ||
      !std::isfinite(d.bounds_diagonal_km) || !d.center.is_valid()) {
    throw Error(ErrorKind::kData, "malformed event " + std::to_string(e.search_id));
  }
  EncodedEvent out;
  out.shard = shard_of(d);
  const auto x = feature_detail::raw_continuous(e, d);
  out.features.continuous.resize(kNumContinuous);
  for (int k = 0; k < kNumContinuous; ++k) {
    out.features.continuous[k] = p.stats.standardize(k, x[k]);
  }
  const auto raw = feature_detail::raw_categorical(e, d, p.cell_levels);
  if (raw.size() != p.vocabs.size()) {
    throw Error(ErrorKind::kData, "feature pipeline does not match cell levels");
  }
  out.features.categorical.resize(raw.size());
  for (std::size_t k = 0; k < raw.size(); ++k) {
    out.features.categorical[k] = p.vocabs[k].lookup(raw[k]);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Persistence

inline nlohmann::json to_json(const FeaturePipeline& p) {
  nlohmann::json j;
  j["format_version"] = kFeatureFormatVersion;
  j["cell_levels"] = p.cell_levels;
  nlohmann::json cont = nlohmann::json::array();
  for (int k = 0; k < kNumContinuous; ++k) {
    cont.push_back({{"name", kContinuousNames[k]},
                    {"mean", p.stats.mean[k]},
                    {"std", p.stats.std[k]}});
  }
  j["continuous"] = cont;
  nlohmann::json vocabs = nlohmann::json::array();
  for (const auto& v : p.vocabs) {
    vocabs.push_back({{"name", v.name()}, {"values", v.values()}});
  }
  j["categorical"] = vocabs;
  return j;
}

inline FeaturePipeline feature_pipeline_from_json(const nlohmann::json& j) {
  try {
    if (j.at("format_version").get<int>() != kFeatureFormatVersion) {
      throw Error(ErrorKind::kData, "unsupported feature pipeline version");
    }
    FeaturePipeline p;
    p.cell_levels = j.at("cell_levels").get<std::vector<int>>();
    const auto& cont = j.at("continuous");
    if (cont.size() != kNumContinuous) {
      throw Error(ErrorKind::kData, "continuous feature count mismatch");
    }
    for (int k = 0; k < kNumContinuous; ++k) {
      p.stats.mean[k] = cont[k].at("mean").get<double>();
      p.stats.std[k] = cont[k].at("std").get<double>();
    }
    for (const auto& v : j.at("categorical")) {
      const auto values = v.at("values").get<std::vector<std::string>>();
      p.vocabs.emplace_back(v.at("name").get<std::string>(),
                            std::set<std::string>(values.begin(), values.end()));
    }
    return p;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::kData, std::string("feature pipeline: ") + e.what());
  }
}

inline void save_feature_pipeline(const std::filesystem::path& path,
                                  const FeaturePipeline& p) {
  auto out = io::open_out(path);
  out << to_json(p).dump(1) << '\n';
}

inline FeaturePipeline load_feature_pipeline(const std::filesystem::path& path) {
  auto in = io::open_in(path);
  try {
    return feature_pipeline_from_json(nlohmann::json::parse(in));
  } catch (const nlohmann::json::parse_error& e) {
    throw Error(ErrorKind::kData, path.string() + ": " + e.what());
  }
}

}  // namespace cellret
