#pragma once

// Per-shard label space: the level-11 cells that received at least one
// training booking, indexed in ascending id order.

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "cellret/datagen.hpp"
#include "cellret/error.hpp"
#include "cellret/features.hpp"
#include "cellret/s2geom.hpp"

namespace cellret {

struct VocabDiagnostics {
  std::size_t wrong_level = 0;
  std::size_t out_of_vocab = 0;
};

class LabelVocabulary {
 public:
  LabelVocabulary() = default;
  LabelVocabulary(ShardId shard, std::vector<CellId> classes)
      : shard_(shard), classes_(std::move(classes)) {
    std::sort(classes_.begin(), classes_.end());
    classes_.erase(std::unique(classes_.begin(), classes_.end()), classes_.end());
    index_.reserve(classes_.size());
    for (std::size_t i = 0; i < classes_.size(); ++i) {
      if (!classes_[i].is_valid() || classes_[i].level() != kLabelLevel) {
        throw Error(ErrorKind::kData, "label vocabulary cells must be level " +
                                          std::to_string(kLabelLevel));
      }
      index_.emplace(classes_[i], static_cast<int>(i));
    }
  }

  ShardId shard() const { return shard_; }
  const std::vector<CellId>& classes() const { return classes_; }
  int size() const { return static_cast<int>(classes_.size()); }
  CellId cell(int index) const { return classes_.at(static_cast<std::size_t>(index)); }

  std::optional<int> lookup(CellId cell, VocabDiagnostics* diag = nullptr) const {
    if (!cell.is_valid() || cell.level() != kLabelLevel) {
      if (diag) ++diag->wrong_level;
      return std::nullopt;
    }
    const auto it = index_.find(cell);
    if (it == index_.end()) {
      if (diag) ++diag->out_of_vocab;
      return std::nullopt;
    }
    return it->second;
  }

  friend bool operator==(const LabelVocabulary& a, const LabelVocabulary& b) {
    return a.shard_ == b.shard_ && a.classes_ == b.classes_;
  }

 private:
  ShardId shard_ = ShardId::kEU;
  std::vector<CellId> classes_;
  std::unordered_map<CellId, int, CellIdHash> index_;
};

// events must already be routed to `shard`.
inline LabelVocabulary build_vocab(std::span<const SearchEvent> events, ShardId shard) {
  if (events.empty()) {
    throw Error(ErrorKind::kData,
                "shard " + std::string(to_string(shard)) + " has no training events");
  }
  std::vector<CellId> cells;
  cells.reserve(events.size());
  for (const SearchEvent& e : events) cells.push_back(e.booked_cell);
  return LabelVocabulary(shard, std::move(cells));
}

inline std::optional<int> lookup(const LabelVocabulary& vocab, CellId cell,
                                 VocabDiagnostics* diag = nullptr) {
  return vocab.lookup(cell, diag);
}

// Number of classes present in both vocabularies.
inline std::size_t vocab_overlap(const LabelVocabulary& a, const LabelVocabulary& b) {
  std::size_t n = 0;
  auto i = a.classes().begin(), j = b.classes().begin();
  while (i != a.classes().end() && j != b.classes().end()) {
    if (*i < *j) {
      ++i;
    } else if (*j < *i) {
      ++j;
    } else {
      ++n, ++i, ++j;
    }
  }
  return n;
}

// One decimal cell id per line; line number == class index.
inline void save_vocab(const std::filesystem::path& path, const LabelVocabulary& vocab) {
  auto out = io::open_out(path);
  for (CellId c : vocab.classes()) out << c.raw() << '\n';
  if (!out) throw Error(ErrorKind::kIo, "write failed: " + path.string());
}

inline LabelVocabulary load_vocab(const std::filesystem::path& path, ShardId shard) {
  auto in = io::open_in(path);
  std::vector<CellId> cells;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    cells.push_back(CellId::from_raw_checked(io::parse_uint(line)));
  }
  if (!std::is_sorted(cells.begin(), cells.end()) ||
      std::adjacent_find(cells.begin(), cells.end()) != cells.end()) {
    throw Error(ErrorKind::kData, path.string() + ": vocabulary not strictly ascending");
  }
  return LabelVocabulary(shard, std::move(cells));
}

}  // namespace cellret
