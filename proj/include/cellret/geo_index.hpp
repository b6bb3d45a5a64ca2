#pragma once

// Inverted index from level-11 cells to listings. Only active listings are
// indexed; each sits in the posting list of the cell containing it.

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "cellret/bounds_baseline.hpp"
#include "cellret/datagen.hpp"
#include "cellret/error.hpp"
#include "cellret/s2geom.hpp"

namespace cellret {

struct SearchFilters {
  int min_capacity = 1;
  bool active_only = true;

  void validate() const {
    if (min_capacity < 1) throw Error(ErrorKind::kInvalidArgument, "capacity must be >= 1");
  }
};

struct RetrievalSet {
  std::vector<CellId> cells;
  std::vector<double> probabilities;  // parallel to cells
  double threshold = 0.0;
};

class ListingIndex {
 public:
  using Postings = std::map<CellId, std::vector<int64_t>>;

  ListingIndex() = default;

  explicit ListingIndex(std::span<const Listing> listings) {
    for (const Listing& l : listings) {
      if (!l.location.is_valid() || l.capacity < 1) {
        throw Error(ErrorKind::kData, "invalid listing " + std::to_string(l.listing_id));
      }
      if (!by_id_.emplace(l.listing_id, store_.size()).second) {
        throw Error(ErrorKind::kData, "duplicate listing id " + std::to_string(l.listing_id));
      }
      store_.push_back(l);
      if (!l.active) continue;
      postings_[cell_from_latlng(l.location, kLabelLevel)].push_back(l.listing_id);
      ++doc_count_;
    }
    for (auto& [cell, ids] : postings_) std::sort(ids.begin(), ids.end());
  }

  const Postings& postings() const { return postings_; }
  std::size_t doc_count() const { return doc_count_; }
  std::size_t num_listings() const { return store_.size(); }

  const Listing& listing(int64_t id) const {
    const auto it = by_id_.find(id);
    if (it == by_id_.end()) throw Error(ErrorKind::kData, "unknown listing " + std::to_string(id));
    return store_[it->second];
  }

  const std::vector<int64_t>* posting(CellId cell) const {
    const auto it = postings_.find(cell);
    return it == postings_.end() ? nullptr : &it->second;
  }

  bool passes(const Listing& l, const SearchFilters& f) const {
    return l.capacity >= f.min_capacity && (l.active || !f.active_only);
  }

  // Number of listings in `cell` passing the filters.
  std::size_t count(CellId cell, const SearchFilters& f) const {
    const auto* ids = posting(cell);
    if (!ids) return 0;
    std::size_t n = 0;
    for (int64_t id : *ids) n += passes(listing(id), f);
    return n;
  }

 private:
  std::vector<Listing> store_;
  std::unordered_map<int64_t, std::size_t> by_id_;
  Postings postings_;
  std::size_t doc_count_ = 0;
};

inline ListingIndex build_index(std::span<const Listing> listings) {
  return ListingIndex(listings);
}

inline std::vector<int64_t> retrieve_cells(const ListingIndex& index,
                                           std::span<const CellId> cells,
                                           const SearchFilters& f) {
  f.validate();
  std::vector<CellId> uniq(cells.begin(), cells.end());
  std::sort(uniq.begin(), uniq.end());
  uniq.erase(std::unique(uniq.begin(), uniq.end()), uniq.end());
  std::vector<int64_t> out;
  for (CellId c : uniq) {
    const auto* ids = index.posting(c);
    if (!ids) continue;
    for (int64_t id : *ids) {
      if (index.passes(index.listing(id), f)) out.push_back(id);
    }
  }
  std::sort(out.begin(), out.end());
  return out;
}

inline std::vector<int64_t> retrieve_cells(const ListingIndex& index, const RetrievalSet& rs,
                                           const SearchFilters& f) {
  return retrieve_cells(index, std::span<const CellId>(rs.cells), f);
}

// Listings inside the rectangle. Walks the covering at its natural
// resolution: wholly-contained coarse cells become id-range scans over the
// postings, so large rectangles cost no more than small ones.
inline std::vector<int64_t> retrieve_rect(const ListingIndex& index, const GeoRect& rect,
                                          const SearchFilters& f) {
  f.validate();
  std::vector<int64_t> out;
  const auto& postings = index.postings();
  for (CellId c : cover_rect_compact(rect, kLabelLevel)) {
    auto it = postings.lower_bound(CellId(c.range_min()).parent(kLabelLevel));
    const CellId hi = CellId(c.range_max()).parent(kLabelLevel);
    for (; it != postings.end() && it->first <= hi; ++it) {
      for (int64_t id : it->second) {
        const Listing& l = index.listing(id);
        if (index.passes(l, f) && rect.contains(l.location)) out.push_back(id);
      }
    }
  }
  std::sort(out.begin(), out.end());
  return out;
}

// ---------------------------------------------------------------------------
// Persistence: "cell_id\tcount\tid,id,..." per posting list.

inline constexpr std::string_view kPostingsHeader = "cell_id\tcount\tlisting_ids";

inline void write_postings(const std::filesystem::path& path, const ListingIndex& index) {
  auto out = io::open_out(path);
  out << kPostingsHeader << '\n';
  for (const auto& [cell, ids] : index.postings()) {
    out << cell.raw() << '\t' << ids.size() << '\t';
    for (std::size_t i = 0; i < ids.size(); ++i) out << (i ? "," : "") << ids[i];
    out << '\n';
  }
  if (!out) throw Error(ErrorKind::kIo, "write failed: " + path.string());
}

inline ListingIndex::Postings read_postings(const std::filesystem::path& path) {
  ListingIndex::Postings out;
  io::read_records(path, kPostingsHeader, 3, [&](const std::vector<std::string_view>& f) {
    const CellId cell = CellId::from_raw_checked(io::parse_uint(f[0]));
    const auto n = static_cast<std::size_t>(io::parse_uint(f[1]));
    std::vector<int64_t> ids;
    for (auto s : io::split(f[2], ',')) ids.push_back(io::parse_int(s));
    if (ids.size() != n) throw Error(ErrorKind::kData, path.string() + ": count mismatch");
    if (!out.emplace(cell, std::move(ids)).second) {
      throw Error(ErrorKind::kData, path.string() + ": duplicate cell");
    }
  });
  return out;
}

}  // namespace cellret
