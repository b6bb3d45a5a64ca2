#pragma once

// Synthetic two-sided marketplace: destinations with multimodal booking
// areas, listing inventory, and attributed search -> booking logs.
//
// Everything is a deterministic function of GenConfig::seed. Coordinates are
// quantized to 1e-7 degrees at generation time so that the text files
// round-trip exactly and labels re-derive from the persisted locations.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <random>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "cellret/error.hpp"
#include "cellret/s2geom.hpp"

namespace cellret {

inline constexpr int kLabelLevel = 11;

enum class Continent { kEU = 0, kAMER = 1, kOTHER = 2 };
inline constexpr std::array<Continent, 3> kContinents = {
    Continent::kEU, Continent::kAMER, Continent::kOTHER};

enum class DestType { kAddress, kPoi, kStreet, kNeighborhood, kCity };
enum class DeviceType { kDesktop, kPhone, kTablet };

inline std::string_view to_string(Continent c) {
  switch (c) {
    case Continent::kEU: return "EU";
    case Continent::kAMER: return "AMER";
    case Continent::kOTHER: return "OTHER";
  }
  return "?";
}

inline std::string_view to_string(DestType t) {
  switch (t) {
    case DestType::kAddress: return "address";
    case DestType::kPoi: return "poi";
    case DestType::kStreet: return "street";
    case DestType::kNeighborhood: return "neighborhood";
    case DestType::kCity: return "city";
  }
  return "?";
}

inline std::string_view to_string(DeviceType d) {
  switch (d) {
    case DeviceType::kDesktop: return "desktop";
    case DeviceType::kPhone: return "phone";
    case DeviceType::kTablet: return "tablet";
  }
  return "?";
}

inline Continent parse_continent(std::string_view s) {
  for (Continent c : kContinents) {
    if (to_string(c) == s) return c;
  }
  throw Error(ErrorKind::kData, "unknown continent '" + std::string(s) + "'");
}

inline DestType parse_dest_type(std::string_view s) {
  for (DestType t : {DestType::kAddress, DestType::kPoi, DestType::kStreet,
                     DestType::kNeighborhood, DestType::kCity}) {
    if (to_string(t) == s) return t;
  }
  throw Error(ErrorKind::kData, "unknown destination type '" + std::string(s) + "'");
}

inline DeviceType parse_device_type(std::string_view s) {
  for (DeviceType d : {DeviceType::kDesktop, DeviceType::kPhone, DeviceType::kTablet}) {
    if (to_string(d) == s) return d;
  }
  throw Error(ErrorKind::kData, "unknown device type '" + std::string(s) + "'");
}

struct Listing {
  int64_t listing_id = 0;
  LatLng location;
  int capacity = 1;
  bool active = true;

  friend bool operator==(const Listing&, const Listing&) = default;
};

struct BookingCluster {
  LatLng center;
  double spread_km = 1.0;
  double weight = 1.0;
  bool pan = false;  // only reached through map-pan discovery

  friend bool operator==(const BookingCluster&, const BookingCluster&) = default;
};

struct Destination {
  int64_t dest_id = 0;
  std::string name;
  LatLng center;
  DestType dest_type = DestType::kCity;
  std::string country;
  Continent continent = Continent::kEU;
  double bounds_diagonal_km = 1.0;
  std::vector<BookingCluster> booking_clusters;

  friend bool operator==(const Destination&, const Destination&) = default;
};

struct SearchEvent {
  int64_t search_id = 0;
  int64_t dest_id = 0;
  std::string origin_country;
  int num_guests = 1;
  bool is_mobile_app = false;
  DeviceType device_type = DeviceType::kDesktop;
  int trip_length_nights = 1;
  bool is_weekend = false;
  int64_t booked_listing_id = 0;
  CellId booked_cell;
  bool is_outlier = false;

  friend bool operator==(const SearchEvent&, const SearchEvent&) = default;
};

struct GenConfig {
  uint64_t seed = 20240601;
  int n_destinations = 60;
  int n_listings = 30'000;
  int n_train_events = 200'000;
  int n_eval_events = 20'000;
  double outlier_rate = 0.02;
  double pan_discovery_rate = 0.20;
  std::array<double, 3> continent_mix = {1.0, 1.0, 1.0};  // EU, AMER, OTHER

  void validate() const {
    auto prob = [](double p) { return std::isfinite(p) && p >= 0.0 && p <= 1.0; };
    if (n_destinations <= 0 || n_listings <= 0 || n_train_events <= 0 ||
        n_eval_events <= 0) {
      throw Error(ErrorKind::kConfig, "generator counts must be positive");
    }
    if (!prob(outlier_rate) || !prob(pan_discovery_rate)) {
      throw Error(ErrorKind::kConfig, "generator rates must be in [0, 1]");
    }
    double total = 0.0;
    for (double w : continent_mix) {
      if (!std::isfinite(w) || w < 0.0) {
        throw Error(ErrorKind::kConfig, "continent mix weights must be >= 0");
      }
      total += w;
    }
    if (total <= 0.0) throw Error(ErrorKind::kConfig, "continent mix is all zero");
  }
};

// The "Cancun" destination: two booking clusters with a listing-populated
// region between them that is never booked.
struct GapScenario {
  int64_t dest_id = -1;
  GeoRect gap_region;
};

struct World {
  std::vector<Destination> destinations;
  std::vector<Listing> listings;  // index == listing_id
  GapScenario scenario;

  // Generation-time bookkeeping, not persisted. pools[d][k] are the listing
  // ids bookable through cluster k of destination d.
  std::vector<std::vector<std::vector<int64_t>>> pools;
  std::vector<int64_t> outlier_pool;
};

struct SearchLog {
  std::vector<SearchEvent> train;
  std::vector<SearchEvent> eval;
};

// ---------------------------------------------------------------------------
// Seeded sampling. The engine is fully specified by the standard; the
// transforms below are written out so streams match across standard
// libraries.

class Rng {
 public:
  explicit Rng(uint64_t seed) : engine_(seed) {}

  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n).
  uint64_t below(uint64_t n) {
    const uint64_t limit = ~uint64_t{0} - (~uint64_t{0} % n);
    uint64_t x;
    do {
      x = engine_();
    } while (x >= limit);
    return x % n;
  }

  bool bernoulli(double p) { return uniform() < p; }

  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    spare_ = r * std::sin(2.0 * std::numbers::pi * u2);
    has_spare_ = true;
    return r * std::cos(2.0 * std::numbers::pi * u2);
  }

  template <typename Weights>
  std::size_t categorical(const Weights& w) {
    double total = 0.0;
    for (double x : w) total += x;
    double r = uniform() * total;
    std::size_t last = 0;
    for (std::size_t i = 0; i < std::size(w); ++i) {
      if (w[i] <= 0.0) continue;
      last = i;
      if (r < w[i]) return i;
      r -= w[i];
    }
    return last;
  }

  std::mt19937_64& engine() { return engine_; }

 private:
  std::mt19937_64 engine_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

namespace gen_detail {

inline constexpr double kKmPerDegLat = 111.32;

inline double quantize(double deg) { return std::round(deg * 1e7) / 1e7; }

inline LatLng offset_km(const LatLng& from, double north_km, double east_km) {
  double lat = from.lat + north_km / kKmPerDegLat;
  lat = std::clamp(lat, -89.9, 89.9);
  const double cos_lat = std::max(0.01, std::cos(from.lat * kDegToRad));
  double lng = from.lng + east_km / (kKmPerDegLat * cos_lat);
  while (lng > 180.0) lng -= 360.0;
  while (lng <= -180.0) lng += 360.0;
  return {quantize(lat), quantize(lng)};
}

inline double approx_km(const LatLng& a, const LatLng& b) {
  double dlng = std::abs(a.lng - b.lng);
  if (dlng > 180.0) dlng = 360.0 - dlng;
  const double mean_lat = 0.5 * (a.lat + b.lat) * kDegToRad;
  const double dx = dlng * kKmPerDegLat * std::cos(mean_lat);
  const double dy = (a.lat - b.lat) * kKmPerDegLat;
  return std::hypot(dx, dy);
}

struct ContinentBox {
  double lat_lo, lat_hi, lng_lo, lng_hi;
  std::array<const char*, 6> countries;
};

inline const ContinentBox& continent_box(Continent c) {
  static const ContinentBox kEU{36.0, 60.0, -9.0, 30.0,
                                {"FR", "DE", "ES", "IT", "GB", "PT"}};
  static const ContinentBox kAMER{-35.0, 48.0, -122.0, -45.0,
                                  {"US", "MX", "BR", "CA", "AR", "CO"}};
  static const ContinentBox kOTHER{-35.0, 40.0, 30.0, 150.0,
                                   {"JP", "TH", "AU", "IN", "ZA", "ID"}};
  switch (c) {
    case Continent::kEU: return kEU;
    case Continent::kAMER: return kAMER;
    default: return kOTHER;
  }
}

inline std::vector<std::string> all_countries() {
  std::vector<std::string> out;
  for (Continent c : kContinents) {
    for (const char* code : continent_box(c).countries) out.emplace_back(code);
  }
  return out;
}

inline LatLng sample_truncated_gaussian(Rng& rng, const LatLng& center,
                                        double spread_km, double max_sigma) {
  while (true) {
    const double n = rng.normal(), e = rng.normal();
    if (std::hypot(n, e) <= max_sigma) {
      return offset_km(center, n * spread_km, e * spread_km);
    }
  }
}

inline bool in_rect_with_margin(const GeoRect& r, const LatLng& p, double margin_km) {
  if (r.lat_lo > r.lat_hi) return false;
  const double dlat = margin_km / kKmPerDegLat;
  const double dlng =
      margin_km / (kKmPerDegLat * std::max(0.01, std::cos(p.lat * kDegToRad)));
  return p.lat >= r.lat_lo - dlat && p.lat <= r.lat_hi + dlat &&
         p.lng >= r.lng_lo - dlng && p.lng <= r.lng_hi + dlng;
}

inline int sample_capacity(Rng& rng) {
  static const std::array<double, 10> kWeights = {0.12, 0.18, 0.17, 0.18, 0.10,
                                                  0.10, 0.05, 0.05, 0.03, 0.02};
  return 1 + static_cast<int>(rng.categorical(kWeights));
}

inline constexpr double kGapClusterSeparationKm = 55.0;
inline constexpr double kGapMarginKm = 14.0;
inline constexpr double kGapHalfWidthKm = 8.0;
inline constexpr double kGapExclusionKm = 8.0;
inline constexpr int kGapListings = 80;

}  // namespace gen_detail

inline World generate_world(const GenConfig& cfg) {
  using namespace gen_detail;
  cfg.validate();
  const int per_dest_min = 40;
  const int background = std::max(1, cfg.n_listings * 8 / 100);
  if (cfg.n_listings - background - kGapListings < per_dest_min * cfg.n_destinations) {
    throw Error(ErrorKind::kConfig,
                "too few listings: need at least " +
                    std::to_string(per_dest_min * cfg.n_destinations +
                                   background + kGapListings));
  }

  Rng rng(cfg.seed);
  World world;
  const auto countries = all_countries();

  // Continents: one of each first when every continent has weight, then by mix.
  std::vector<Continent> continents;
  const bool all_present = cfg.continent_mix[0] > 0 && cfg.continent_mix[1] > 0 &&
                           cfg.continent_mix[2] > 0;
  for (int d = 0; d < cfg.n_destinations; ++d) {
    if (all_present && d < 3) {
      continents.push_back(kContinents[d]);
    } else {
      continents.push_back(kContinents[rng.categorical(cfg.continent_mix)]);
    }
  }
  int scenario_idx = 0;
  for (int d = 0; d < cfg.n_destinations; ++d) {
    if (continents[d] == Continent::kAMER) {
      scenario_idx = d;
      break;
    }
  }

  static const std::array<double, 5> kTypeWeights = {0.05, 0.10, 0.10, 0.25, 0.50};
  static const std::array<std::array<double, 2>, 5> kDiagonalKm = {
      {{0.05, 0.3}, {0.2, 2.0}, {0.5, 3.0}, {3.0, 10.0}, {15.0, 60.0}}};

  for (int d = 0; d < cfg.n_destinations; ++d) {
    Destination dest;
    dest.dest_id = d;
    dest.name = "dest" + std::to_string(d);
    dest.continent = continents[d];
    const ContinentBox& box = continent_box(dest.continent);
    if (d == scenario_idx && dest.continent == Continent::kAMER) {
      dest.center = {21.1619, -86.8515};
      dest.name = "cancun";
    } else {
      for (int attempt = 0;; ++attempt) {
        const LatLng c{quantize(rng.uniform(box.lat_lo, box.lat_hi)),
                       quantize(rng.uniform(box.lng_lo, box.lng_hi))};
        bool clear = true;
        for (const Destination& other : world.destinations) {
          if (approx_km(c, other.center) < 300.0) clear = false;
        }
        if (d != scenario_idx && approx_km(c, {21.1619, -86.8515}) < 400.0) {
          clear = false;
        }
        if (clear || attempt > 2000) {
          dest.center = c;
          break;
        }
      }
    }
    dest.dest_type = static_cast<DestType>(rng.categorical(kTypeWeights));
    const auto& diag = kDiagonalKm[static_cast<int>(dest.dest_type)];
    dest.bounds_diagonal_km = std::round(rng.uniform(diag[0], diag[1]) * 1000.0) / 1000.0;
    dest.country = box.countries[rng.below(box.countries.size())];

    const double core_mass = 1.0 - cfg.pan_discovery_rate;
    if (d == scenario_idx) {
      dest.booking_clusters.push_back({dest.center, 2.5, 0.55, false});
      dest.booking_clusters.push_back(
          {offset_km(dest.center, -kGapClusterSeparationKm, 0.0), 2.5, 0.45, false});
      world.scenario.dest_id = d;
      const LatLng top = offset_km(dest.center, -kGapMarginKm, kGapHalfWidthKm);
      const LatLng bottom = offset_km(dest.center, -kGapClusterSeparationKm + kGapMarginKm,
                                      -kGapHalfWidthKm);
      world.scenario.gap_region = {bottom.lat, top.lat, bottom.lng, top.lng};
    } else {
      const int n_core = 1 + static_cast<int>(rng.below(3));
      std::vector<double> raw;
      for (int k = 0; k < n_core; ++k) {
        BookingCluster c;
        if (k == 0) {
          c.center = dest.center;
        } else {
          const double dist = rng.uniform(8.0, 35.0);
          const double bearing = rng.uniform(0.0, 2.0 * std::numbers::pi);
          c.center = offset_km(dest.center, dist * std::cos(bearing),
                               dist * std::sin(bearing));
        }
        c.spread_km = std::round(rng.uniform(1.0, 4.0) * 1000.0) / 1000.0;
        raw.push_back(k == 0 ? rng.uniform(1.0, 2.0) : rng.uniform(0.3, 1.0));
        dest.booking_clusters.push_back(c);
      }
      double total = 0.0;
      for (double r : raw) total += r;
      const bool has_pan = cfg.pan_discovery_rate > 0.0 && rng.bernoulli(0.5);
      const double mass = has_pan ? core_mass : 1.0;
      for (int k = 0; k < n_core; ++k) {
        dest.booking_clusters[k].weight = mass * raw[k] / total;
      }
      if (has_pan) {
        const double dist = rng.uniform(40.0, 120.0);
        const double bearing = rng.uniform(0.0, 2.0 * std::numbers::pi);
        BookingCluster pan;
        pan.center = offset_km(dest.center, dist * std::cos(bearing),
                               dist * std::sin(bearing));
        pan.spread_km = std::round(rng.uniform(2.0, 5.0) * 1000.0) / 1000.0;
        pan.weight = cfg.pan_discovery_rate;
        pan.pan = true;
        dest.booking_clusters.push_back(pan);
      }
    }
    world.destinations.push_back(std::move(dest));
  }

  const GeoRect& gap = world.scenario.gap_region;
  auto add_listing = [&](const LatLng& p) {
    Listing l;
    l.listing_id = static_cast<int64_t>(world.listings.size());
    l.location = p;
    l.capacity = sample_capacity(rng);
    l.active = rng.bernoulli(0.97);
    world.listings.push_back(l);
    return l.listing_id;
  };
  auto in_gap_zone = [&](const LatLng& p) {
    return world.scenario.dest_id >= 0 && in_rect_with_margin(gap, p, kGapExclusionKm);
  };

  // Gap listings first: they are never bookable.
  std::vector<int64_t> gap_ids;
  if (world.scenario.dest_id >= 0) {
    for (int n = 0; n < kGapListings; ++n) {
      const LatLng p{quantize(rng.uniform(gap.lat_lo, gap.lat_hi)),
                     quantize(rng.uniform(gap.lng_lo, gap.lng_hi))};
      gap_ids.push_back(add_listing(p));
    }
  }

  const int per_dest = (cfg.n_listings - background - static_cast<int>(gap_ids.size())) /
                       cfg.n_destinations;
  world.pools.resize(world.destinations.size());
  for (std::size_t d = 0; d < world.destinations.size(); ++d) {
    const Destination& dest = world.destinations[d];
    const int n_clusters = static_cast<int>(dest.booking_clusters.size());
    const int cluster_total = per_dest * 65 / 100;
    const int per_cluster = cluster_total / n_clusters;
    world.pools[d].resize(n_clusters);
    double reach_km = 0.0;
    for (int k = 0; k < n_clusters; ++k) {
      const BookingCluster& c = dest.booking_clusters[k];
      reach_km = std::max(reach_km, approx_km(dest.center, c.center));
      for (int n = 0; n < per_cluster; ++n) {
        const LatLng p = sample_truncated_gaussian(rng, c.center, c.spread_km, 2.5);
        world.pools[d][k].push_back(add_listing(p));
      }
    }
    // Unbooked supply spread around the destination.
    const int halo = per_dest - per_cluster * n_clusters;
    const double radius = std::max(20.0, reach_km + 15.0);
    for (int n = 0; n < halo;) {
      const double r = radius * std::sqrt(rng.uniform());
      const double bearing = rng.uniform(0.0, 2.0 * std::numbers::pi);
      const LatLng p = offset_km(dest.center, r * std::cos(bearing), r * std::sin(bearing));
      if (in_gap_zone(p)) continue;
      add_listing(p);
      ++n;
    }
  }
  while (static_cast<int>(world.listings.size()) < cfg.n_listings) {
    const double z = rng.uniform(std::sin(-50.0 * kDegToRad), std::sin(65.0 * kDegToRad));
    LatLng p{quantize(std::asin(z) * kRadToDeg), quantize(rng.uniform(-180.0, 180.0))};
    if (p.lng <= -180.0) p.lng = 180.0;
    if (in_gap_zone(p)) continue;
    add_listing(p);
  }

  std::vector<bool> is_gap(world.listings.size(), false);
  for (int64_t id : gap_ids) is_gap[id] = true;
  for (const Listing& l : world.listings) {
    if (l.active && !is_gap[l.listing_id]) world.outlier_pool.push_back(l.listing_id);
  }
  for (auto& dest_pools : world.pools) {
    for (auto& pool : dest_pools) {
      std::erase_if(pool, [&](int64_t id) { return !world.listings[id].active; });
    }
  }
  return world;
}

namespace gen_detail {

inline int sample_guests(Rng& rng) {
  static const std::array<double, 8> kWeights = {0.20, 0.35, 0.12, 0.15,
                                                 0.06, 0.06, 0.03, 0.03};
  return 1 + static_cast<int>(rng.categorical(kWeights));
}

inline SearchEvent sample_event(Rng& rng, const World& world, const GenConfig& cfg,
                                const std::vector<double>& popularity,
                                const std::vector<std::string>& countries,
                                int64_t search_id) {
  SearchEvent ev;
  ev.search_id = search_id;
  const std::size_t d = rng.categorical(popularity);
  const Destination& dest = world.destinations[d];
  ev.dest_id = dest.dest_id;
  ev.origin_country =
      rng.bernoulli(0.5) ? dest.country : countries[rng.below(countries.size())];
  ev.num_guests = sample_guests(rng);
  ev.is_mobile_app = rng.bernoulli(0.55);
  if (ev.is_mobile_app) {
    ev.device_type = rng.bernoulli(0.75) ? DeviceType::kPhone : DeviceType::kTablet;
  } else {
    ev.device_type = rng.bernoulli(0.8) ? DeviceType::kDesktop : DeviceType::kPhone;
  }
  ev.trip_length_nights = 1 + static_cast<int>(std::min<uint64_t>(13, rng.below(4) + rng.below(5) + rng.below(6)));
  ev.is_weekend = rng.bernoulli(0.4);

  const bool outlier = rng.bernoulli(cfg.outlier_rate);
  int64_t booked = -1;
  if (outlier) {
    while (true) {
      const int64_t id = world.outlier_pool[rng.below(world.outlier_pool.size())];
      if (world.listings[id].capacity >= ev.num_guests) {
        booked = id;
        break;
      }
    }
  } else {
    std::vector<double> core, pan;
    for (const BookingCluster& c : dest.booking_clusters) {
      core.push_back(c.pan ? 0.0 : c.weight);
      pan.push_back(c.pan ? c.weight : 0.0);
    }
    // Larger groups lean towards the secondary areas.
    if (ev.num_guests >= 5) {
      for (std::size_t k = 1; k < core.size(); ++k) core[k] *= 1.5;
    }
    double pan_total = 0.0;
    for (double w : pan) pan_total += w;
    const bool panned = pan_total > 0.0 && rng.bernoulli(cfg.pan_discovery_rate);
    const std::size_t k = rng.categorical(panned ? pan : core);
    const auto& pool = world.pools[d][k];
    std::vector<int64_t> fits;
    int max_cap = 0;
    for (int64_t id : pool) {
      max_cap = std::max(max_cap, world.listings[id].capacity);
      if (world.listings[id].capacity >= ev.num_guests) fits.push_back(id);
    }
    if (fits.empty()) {
      ev.num_guests = max_cap;
      for (int64_t id : pool) {
        if (world.listings[id].capacity >= ev.num_guests) fits.push_back(id);
      }
    }
    booked = fits[rng.below(fits.size())];
  }
  ev.booked_listing_id = booked;
  ev.booked_cell = cell_from_latlng(world.listings[booked].location, kLabelLevel);
  ev.is_outlier = outlier;
  return ev;
}

}  // namespace gen_detail

// Train events first, then eval events, from one stream: eval search ids
// follow the train ids and never overlap them.
inline SearchLog generate_search_log(const World& world, const GenConfig& cfg) {
  cfg.validate();
  if (world.destinations.empty() || world.outlier_pool.empty()) {
    throw Error(ErrorKind::kConfig, "world has no bookable inventory");
  }
  for (const auto& dest_pools : world.pools) {
    for (const auto& pool : dest_pools) {
      if (pool.empty()) throw Error(ErrorKind::kConfig, "empty booking cluster pool");
    }
  }
  Rng rng(cfg.seed ^ 0x5eed5eed5eed5eedull);
  std::vector<double> popularity;
  for (std::size_t d = 0; d < world.destinations.size(); ++d) {
    popularity.push_back(rng.uniform(0.5, 1.5));
  }
  const auto countries = gen_detail::all_countries();
  SearchLog log;
  log.train.reserve(cfg.n_train_events);
  log.eval.reserve(cfg.n_eval_events);
  int64_t next_id = 0;
  for (int n = 0; n < cfg.n_train_events; ++n) {
    log.train.push_back(
        gen_detail::sample_event(rng, world, cfg, popularity, countries, next_id++));
  }
  for (int n = 0; n < cfg.n_eval_events; ++n) {
    log.eval.push_back(
        gen_detail::sample_event(rng, world, cfg, popularity, countries, next_id++));
  }
  return log;
}

// ---------------------------------------------------------------------------
// Line-delimited text records. One header line naming the columns, then one
// tab-separated record per line.
//
//   listings.tsv       listing_id lat lng capacity active
//   destinations.tsv   dest_id name lat lng dest_type country continent
//                      bounds_diagonal_km clusters
//                      (clusters: lat:lng:spread_km:weight:pan joined by ';')
//   *_events.tsv       search_id dest_id origin_country num_guests
//                      is_mobile_app device_type trip_length_nights
//                      is_weekend booked_listing_id booked_cell is_outlier

namespace io {

inline constexpr std::string_view kListingHeader = "listing_id\tlat\tlng\tcapacity\tactive";
inline constexpr std::string_view kDestinationHeader =
    "dest_id\tname\tlat\tlng\tdest_type\tcountry\tcontinent\tbounds_diagonal_km\tclusters";
inline constexpr std::string_view kEventHeader =
    "search_id\tdest_id\torigin_country\tnum_guests\tis_mobile_app\tdevice_type\t"
    "trip_length_nights\tis_weekend\tbooked_listing_id\tbooked_cell\tis_outlier";

inline std::string fmt_coord(double x) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.7f", x);
  return buf;
}

inline std::string fmt_real(double x) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.6f", x);
  return buf;
}

inline std::vector<std::string_view> split(std::string_view line, char sep) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const std::size_t pos = line.find(sep, start);
    if (pos == std::string_view::npos) {
      out.push_back(line.substr(start));
      return out;
    }
    out.push_back(line.substr(start, pos - start));
    start = pos + 1;
  }
}

inline int64_t parse_int(std::string_view s) {
  try {
    std::size_t used = 0;
    const long long v = std::stoll(std::string(s), &used);
    if (used != s.size()) throw std::invalid_argument("trailing");
    return v;
  } catch (const std::exception&) {
    throw Error(ErrorKind::kData, "bad integer '" + std::string(s) + "'");
  }
}

inline uint64_t parse_uint(std::string_view s) {
  try {
    std::size_t used = 0;
    const unsigned long long v = std::stoull(std::string(s), &used);
    if (used != s.size() || s.empty() || s[0] == '-') throw std::invalid_argument("bad");
    return v;
  } catch (const std::exception&) {
    throw Error(ErrorKind::kData, "bad unsigned integer '" + std::string(s) + "'");
  }
}

inline double parse_real(std::string_view s) {
  try {
    std::size_t used = 0;
    const double v = std::stod(std::string(s), &used);
    if (used != s.size() || !std::isfinite(v)) throw std::invalid_argument("bad");
    return v;
  } catch (const std::exception&) {
    throw Error(ErrorKind::kData, "bad number '" + std::string(s) + "'");
  }
}

inline bool parse_flag(std::string_view s) {
  if (s == "1") return true;
  if (s == "0") return false;
  throw Error(ErrorKind::kData, "bad flag '" + std::string(s) + "'");
}

inline std::ofstream open_out(const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorKind::kIo, "cannot write " + path.string());
  return out;
}

inline std::ifstream open_in(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::kData, "cannot read " + path.string());
  return in;
}

// Reads the records of a file with the expected header, calling fn per row.
template <typename Fn>
void read_records(const std::filesystem::path& path, std::string_view header,
                  std::size_t n_fields, Fn&& fn) {
  std::ifstream in = open_in(path);
  std::string line;
  if (!std::getline(in, line) || line != header) {
    throw Error(ErrorKind::kData, path.string() + ": unexpected header");
  }
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const auto fields = split(line, '\t');
    if (fields.size() != n_fields) {
      throw Error(ErrorKind::kData, path.string() + ":" + std::to_string(line_no) +
                                        ": expected " + std::to_string(n_fields) +
                                        " fields");
    }
    fn(fields);
  }
}

inline std::string format_listing(const Listing& l) {
  return std::to_string(l.listing_id) + '\t' + fmt_coord(l.location.lat) + '\t' +
         fmt_coord(l.location.lng) + '\t' + std::to_string(l.capacity) + '\t' +
         (l.active ? "1" : "0");
}

inline std::string format_event(const SearchEvent& e) {
  std::string s;
  s.reserve(96);
  s += std::to_string(e.search_id);
  s += '\t';
  s += std::to_string(e.dest_id);
  s += '\t';
  s += e.origin_country;
  s += '\t';
  s += std::to_string(e.num_guests);
  s += '\t';
  s += e.is_mobile_app ? '1' : '0';
  s += '\t';
  s += to_string(e.device_type);
  s += '\t';
  s += std::to_string(e.trip_length_nights);
  s += '\t';
  s += e.is_weekend ? '1' : '0';
  s += '\t';
  s += std::to_string(e.booked_listing_id);
  s += '\t';
  s += e.booked_cell.to_string();
  s += '\t';
  s += e.is_outlier ? '1' : '0';
  return s;
}

inline SearchEvent parse_event(const std::vector<std::string_view>& f) {
  SearchEvent e;
  e.search_id = parse_int(f[0]);
  e.dest_id = parse_int(f[1]);
  e.origin_country = std::string(f[2]);
  e.num_guests = static_cast<int>(parse_int(f[3]));
  e.is_mobile_app = parse_flag(f[4]);
  e.device_type = parse_device_type(f[5]);
  e.trip_length_nights = static_cast<int>(parse_int(f[6]));
  e.is_weekend = parse_flag(f[7]);
  e.booked_listing_id = parse_int(f[8]);
  e.booked_cell = CellId(parse_uint(f[9]));
  e.is_outlier = parse_flag(f[10]);
  if (!e.booked_cell.is_valid() || e.num_guests < 1 || e.trip_length_nights < 1) {
    throw Error(ErrorKind::kData, "malformed event " + std::to_string(e.search_id));
  }
  return e;
}

inline void write_listings(const std::filesystem::path& path,
                           const std::vector<Listing>& listings) {
  auto out = open_out(path);
  out << kListingHeader << '\n';
  for (const Listing& l : listings) out << format_listing(l) << '\n';
  if (!out) throw Error(ErrorKind::kIo, "write failed: " + path.string());
}

inline std::vector<Listing> read_listings(const std::filesystem::path& path) {
  std::vector<Listing> out;
  read_records(path, kListingHeader, 5, [&](const auto& f) {
    Listing l;
    l.listing_id = parse_int(f[0]);
    l.location = {parse_real(f[1]), parse_real(f[2])};
    l.capacity = static_cast<int>(parse_int(f[3]));
    l.active = parse_flag(f[4]);
    if (!l.location.is_valid()) throw Error(ErrorKind::kData, "invalid listing location");
    out.push_back(l);
  });
  return out;
}

inline void write_destinations(const std::filesystem::path& path,
                               const std::vector<Destination>& dests) {
  auto out = open_out(path);
  out << kDestinationHeader << '\n';
  for (const Destination& d : dests) {
    out << d.dest_id << '\t' << d.name << '\t' << fmt_coord(d.center.lat) << '\t'
        << fmt_coord(d.center.lng) << '\t' << to_string(d.dest_type) << '\t' << d.country
        << '\t' << to_string(d.continent) << '\t' << fmt_real(d.bounds_diagonal_km) << '\t';
    for (std::size_t k = 0; k < d.booking_clusters.size(); ++k) {
      const BookingCluster& c = d.booking_clusters[k];
      if (k) out << ';';
      out << fmt_coord(c.center.lat) << ':' << fmt_coord(c.center.lng) << ':'
          << fmt_real(c.spread_km) << ':' << fmt_real(c.weight) << ':' << (c.pan ? 1 : 0);
    }
    out << '\n';
  }
  if (!out) throw Error(ErrorKind::kIo, "write failed: " + path.string());
}

inline std::vector<Destination> read_destinations(const std::filesystem::path& path) {
  std::vector<Destination> out;
  read_records(path, kDestinationHeader, 9, [&](const auto& f) {
    Destination d;
    d.dest_id = parse_int(f[0]);
    d.name = std::string(f[1]);
    d.center = {parse_real(f[2]), parse_real(f[3])};
    d.dest_type = parse_dest_type(f[4]);
    d.country = std::string(f[5]);
    d.continent = parse_continent(f[6]);
    d.bounds_diagonal_km = parse_real(f[7]);
    for (std::string_view item : split(f[8], ';')) {
      const auto parts = split(item, ':');
      if (parts.size() != 5) throw Error(ErrorKind::kData, "bad cluster record");
      d.booking_clusters.push_back({{parse_real(parts[0]), parse_real(parts[1])},
                                    parse_real(parts[2]),
                                    parse_real(parts[3]),
                                    parse_flag(parts[4])});
    }
    out.push_back(std::move(d));
  });
  return out;
}

inline void write_events(const std::filesystem::path& path,
                         const std::vector<SearchEvent>& events) {
  auto out = open_out(path);
  out << kEventHeader << '\n';
  for (const SearchEvent& e : events) out << format_event(e) << '\n';
  if (!out) throw Error(ErrorKind::kIo, "write failed: " + path.string());
}

inline std::vector<SearchEvent> read_events(const std::filesystem::path& path) {
  std::vector<SearchEvent> out;
  read_records(path, kEventHeader, 11,
               [&](const auto& f) { out.push_back(parse_event(f)); });
  return out;
}

}  // namespace io

}  // namespace cellret
