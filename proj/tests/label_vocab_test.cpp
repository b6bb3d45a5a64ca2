#include "cellret/label_vocab.hpp"

#include <gtest/gtest.h>

#include <set>

#include "test_util.hpp"

namespace cellret {
namespace {

using testing::small_gen_config;
using testing::TempDir;

SearchEvent booked_at(LatLng p) {
  SearchEvent e;
  e.booked_cell = cell_from_latlng(p, 11);
  return e;
}

TEST(BuildVocab, CountsDistinctCells) {
  const std::vector<SearchEvent> events = {booked_at({10, 10}), booked_at({10, 10}),
                                           booked_at({20, 20}), booked_at({-30, 40}),
                                           booked_at({20, 20})};
  const auto v = build_vocab(events, ShardId::kEU);
  EXPECT_EQ(v.size(), 3);
  EXPECT_TRUE(std::is_sorted(v.classes().begin(), v.classes().end()));
}

TEST(BuildVocab, OverlapCountsSharedClasses) {
  const std::vector<SearchEvent> a = {booked_at({10, 10}), booked_at({20, 20}), booked_at({30, 30})};
  const std::vector<SearchEvent> b = {booked_at({20, 20}), booked_at({30, 30}), booked_at({-5, 5})};
  const auto va = build_vocab(a, ShardId::kEU), vb = build_vocab(b, ShardId::kAMER);
  EXPECT_EQ(vocab_overlap(va, vb), 2u);
  EXPECT_EQ(vocab_overlap(vb, va), 2u);
  EXPECT_EQ(vocab_overlap(va, va), 3u);
}

TEST(BuildVocab, EmptyShardIsAnError) {
  EXPECT_THROW(build_vocab({}, ShardId::kOTHER), Error);
}

TEST(BuildVocab, RejectsNonLevel11Cells) {
  EXPECT_THROW(LabelVocabulary(ShardId::kEU, {cell_from_latlng({1, 1}, 10)}), Error);
}

class GeneratedVocab : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    const GenConfig g = small_gen_config(21);
    const World w = generate_world(g);
    log_ = new SearchLog(generate_search_log(w, g));
    dests_ = new DestinationTable(w.destinations);
  }
  static void TearDownTestSuite() {
    delete log_;
    delete dests_;
  }

  static std::vector<SearchEvent> shard(const std::vector<SearchEvent>& events, ShardId s) {
    std::vector<SearchEvent> out;
    for (const auto& e : events) {
      if (shard_of(dests_->at(e.dest_id)) == s) out.push_back(e);
    }
    return out;
  }

  static SearchLog* log_;
  static DestinationTable* dests_;
};

SearchLog* GeneratedVocab::log_ = nullptr;
DestinationTable* GeneratedVocab::dests_ = nullptr;

TEST_F(GeneratedVocab, DeterministicAndExactInverse) {
  for (ShardId s : kShards) {
    const auto events = shard(log_->train, s);
    const auto a = build_vocab(events, s);
    const auto b = build_vocab(events, s);
    EXPECT_EQ(a, b);
    for (int i = 0; i < a.size(); ++i) ASSERT_EQ(lookup(a, a.cell(i)), i);
  }
}

TEST_F(GeneratedVocab, ClassesAreTheBookedCells) {
  for (ShardId s : kShards) {
    const auto events = shard(log_->train, s);
    std::set<CellId> expect;
    for (const auto& e : events) expect.insert(e.booked_cell);
    const auto v = build_vocab(events, s);
    EXPECT_EQ(std::vector<CellId>(expect.begin(), expect.end()), v.classes());
    EXPECT_LT(static_cast<double>(v.size()), 1e-3 * static_cast<double>(cell_count(11)));
  }
}

TEST_F(GeneratedVocab, CoverageAccountingOnTrain) {
  for (ShardId s : kShards) {
    const auto events = shard(log_->train, s);
    const auto v = build_vocab(events, s);
    VocabDiagnostics diag;
    std::size_t found = 0;
    for (const auto& e : events) found += lookup(v, e.booked_cell, &diag).has_value();
    EXPECT_EQ(found, events.size());
    EXPECT_EQ(diag.out_of_vocab + diag.wrong_level, 0u);
  }
}

TEST_F(GeneratedVocab, EvalOnlyCellsAreAbsentAndCounted) {
  const auto events = shard(log_->train, ShardId::kEU);
  const auto v = build_vocab(events, ShardId::kEU);
  std::set<CellId> train_cells(v.classes().begin(), v.classes().end());
  VocabDiagnostics diag;
  std::size_t eval_only = 0;
  for (const auto& e : shard(log_->eval, ShardId::kEU)) {
    const bool known = train_cells.count(e.booked_cell) != 0;
    eval_only += !known;
    EXPECT_EQ(lookup(v, e.booked_cell, &diag).has_value(), known);
  }
  EXPECT_EQ(diag.out_of_vocab, eval_only);
}

TEST(Lookup, WrongLevelIsAbsentAndCounted) {
  const auto v = build_vocab(std::vector<SearchEvent>{booked_at({5, 5})}, ShardId::kEU);
  VocabDiagnostics diag;
  EXPECT_FALSE(lookup(v, cell_from_latlng({5, 5}, 10), &diag).has_value());
  EXPECT_FALSE(lookup(v, cell_from_latlng({5, 5}, 12), &diag).has_value());
  EXPECT_EQ(diag.wrong_level, 2u);
  EXPECT_EQ(diag.out_of_vocab, 0u);
}

TEST(Persistence, OneDecimalIdPerLine) {
  const std::vector<SearchEvent> events = {booked_at({1, 2}), booked_at({3, 4}),
                                           booked_at({-5, 6})};
  const auto v = build_vocab(events, ShardId::kAMER);
  TempDir dir;
  save_vocab(dir / "vocab.txt", v);
  std::ifstream in(dir / "vocab.txt");
  std::string line;
  int n = 0;
  while (std::getline(in, line)) {
    EXPECT_EQ(line, std::to_string(v.cell(n).raw()));
    ++n;
  }
  EXPECT_EQ(n, v.size());
  EXPECT_EQ(load_vocab(dir / "vocab.txt", ShardId::kAMER), v);
}

TEST(Persistence, UnsortedFileIsRejected) {
  TempDir dir;
  const auto a = cell_from_latlng({3, 4}, 11), b = cell_from_latlng({1, 2}, 11);
  {
    std::ofstream out(dir / "vocab.txt");
    out << std::max(a, b).raw() << '\n' << std::min(a, b).raw() << '\n';
  }
  EXPECT_THROW(load_vocab(dir / "vocab.txt", ShardId::kEU), Error);
  {
    std::ofstream out(dir / "bad.txt");
    out << "12345\n";
  }
  EXPECT_THROW(load_vocab(dir / "bad.txt", ShardId::kEU), Error);
}

}  // namespace
}  // namespace cellret
