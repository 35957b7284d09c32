#include <gtest/gtest.h>

#include "ovvad/data/synthetic.hpp"
#include "ovvad/nas.hpp"
#include "test_util.hpp"

namespace ovvad::nas {
namespace {

using ovvad::testing::random_matrix;
using ovvad::testing::TempDir;

Matrix ramp(std::size_t n, double base) {
  Matrix m(n, 2);
  for (std::size_t i = 0; i < n; ++i) {
    m(i, 0) = base + static_cast<double>(i);
    m(i, 1) = -m(i, 0);
  }
  return m;
}

TEST(Splice, BoundaryPositions) {
  auto seq = data::make_sequence(ramp(3, 0.0));
  NormalSource normal{"n0", &seq};
  Snippet snip{"s0", ramp(2, 100.0), "novel_0", SnippetSource::kSyntheticFixture};

  auto head = splice_at(normal, snip, 0);
  EXPECT_EQ(head.frame_gt, (std::vector<std::uint8_t>{1, 1, 0, 0, 0}));
  EXPECT_EQ(head.features.features(0, 0), 100.0);
  EXPECT_EQ(head.features.features(2, 0), 0.0);

  auto tail = splice_at(normal, snip, 3);
  EXPECT_EQ(tail.frame_gt, (std::vector<std::uint8_t>{0, 0, 0, 1, 1}));
  EXPECT_EQ(tail.features.features(3, 0), 100.0);
  EXPECT_EQ(tail.provenance, (Provenance{"n0", "s0", 3}));
  EXPECT_EQ(tail.category, "novel_0");

  EXPECT_THROW(splice_at(normal, snip, 4), ConfigError);
  Snippet wide{"s1", Matrix(2, 3), "novel_0", SnippetSource::kSyntheticFixture};
  EXPECT_THROW(splice_at(normal, wide, 0), ShapeError);
}

TEST(Splice, ExhaustiveSmallCases) {
  for (std::size_t n = 1; n <= 8; ++n) {
    auto seq = data::make_sequence(ramp(n, 0.0));
    NormalSource normal{"n", &seq};
    for (std::size_t m = 1; m <= 4; ++m) {
      Snippet snip{"s", ramp(m, 1000.0), "x", SnippetSource::kSyntheticFixture};
      for (std::size_t u = 0; u <= n; ++u) {
        auto v = splice_at(normal, snip, u);
        ASSERT_EQ(v.features.length(), n + m);
        std::size_t ones = 0, first = n + m, last = 0;
        for (std::size_t i = 0; i < v.frame_gt.size(); ++i)
          if (v.frame_gt[i]) {
            ++ones;
            first = std::min(first, i);
            last = i;
          }
        EXPECT_EQ(ones, m);
        EXPECT_EQ(last - first + 1, m);
        EXPECT_EQ(first, u);
        // Dropping the positive rows gives back the normal sequence.
        Matrix rest(n, 2);
        std::size_t r = 0;
        for (std::size_t i = 0; i < n + m; ++i)
          if (!v.frame_gt[i]) {
            rest(r, 0) = v.features.features(i, 0);
            rest(r++, 1) = v.features.features(i, 1);
          }
        EXPECT_EQ(rest, seq.features);
      }
    }
  }
}

TEST(Splice, InsertionIndexCoversFullRange) {
  auto seq = data::make_sequence(ramp(4, 0.0));
  NormalSource normal{"n", &seq};
  Snippet snip{"s", ramp(1, 9.0), "x", SnippetSource::kSyntheticFixture};
  Rng rng(1);
  std::vector<int> hits(5, 0);
  for (int i = 0; i < 2000; ++i) ++hits[splice_insert(normal, snip, rng).provenance.insertion];
  for (int h : hits) EXPECT_GT(h, 300);
}

class PseudoSetFixture : public ::testing::Test {
 protected:
  Rng rng{3};
  std::vector<data::FeatureSequence> seqs;
  std::vector<NormalSource> normals;
  SnippetBank bank;

  void SetUp() override {
    for (std::size_t i = 0; i < 4; ++i) seqs.push_back(data::make_sequence(random_matrix(10 + 3 * i, 3, rng)));
    for (std::size_t i = 0; i < seqs.size(); ++i) normals.push_back({"normal_" + std::to_string(i), &seqs[i]});
    for (int i = 0; i < 3; ++i) {
      bank.snippets.push_back({"a" + std::to_string(i), random_matrix(4, 3, rng), "novel_a", SnippetSource::kGeneratedImage});
      bank.snippets.push_back({"b" + std::to_string(i), random_matrix(5, 3, rng), "novel_b", SnippetSource::kGeneratedVideo});
    }
  }
};

TEST_F(PseudoSetFixture, CountsCategoriesAndReplay) {
  Rng r1(9), r2(9);
  auto a = build_pseudo_set(normals, bank, {"novel_a", "novel_b"}, 3, r1);
  auto b = build_pseudo_set(normals, bank, {"novel_a", "novel_b"}, 3, r2);
  ASSERT_EQ(a.size(), 6u);
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].category, i < 3 ? "novel_a" : "novel_b");
    EXPECT_EQ(a[i].provenance, b[i].provenance);
    EXPECT_EQ(a[i].features.features, b[i].features.features);
  }
  EXPECT_THROW(build_pseudo_set(normals, bank, {"novel_c"}, 1, r1), DataError);
  EXPECT_THROW(build_pseudo_set(normals, bank, {"novel_a"}, 0, r1), ConfigError);
  EXPECT_THROW(build_pseudo_set({}, bank, {"novel_a"}, 1, r1), DataError);
}

TEST_F(PseudoSetFixture, CapKeepsLabelsAlignedWithFeatures) {
  // Cap below every spliced length so sub-sampling always happens.
  Rng r(4);
  auto set = build_pseudo_set(normals, bank, {"novel_a", "novel_b"}, 20, r, 8);
  for (const auto& v : set) {
    ASSERT_EQ(v.features.length(), 8u);
    ASSERT_EQ(v.frame_gt.size(), 8u);
    const auto& src = seqs[std::stoul(v.provenance.normal_id.substr(7))].features;
    const Snippet* snip = nullptr;
    for (const auto& s : bank.snippets)
      if (s.id == v.provenance.snippet_id) snip = &s;
    ASSERT_NE(snip, nullptr);
    // Each kept row is either a snippet row (gt 1) or a normal row (gt 0).
    for (std::size_t i = 0; i < 8; ++i) {
      auto row = v.features.features.row(i);
      auto in = [&](const Matrix& m) {
        for (std::size_t r2 = 0; r2 < m.rows(); ++r2)
          if (std::equal(row.begin(), row.end(), m.row(r2).begin())) return true;
        return false;
      };
      EXPECT_EQ(v.frame_gt[i] == 1, in(snip->features));
      EXPECT_EQ(v.frame_gt[i] == 0, in(src));
    }
  }
}

TEST(SnippetBankIo, LoadsSyntheticFixturesAndValidates) {
  TempDir dir("nas");
  data::SyntheticConfig cfg;
  cfg.feature_dim = 8;
  cfg.train_videos_per_class = 2;
  cfg.test_videos_per_class = 1;
  cfg.normal_train = 3;
  cfg.normal_test = 2;
  cfg.snippets_per_novel_class = 2;
  auto corpus = data::gen_synthetic(cfg, dir.path());
  auto bank = load_snippet_bank(corpus.snippet_dir);
  EXPECT_EQ(bank.snippets.size(), 4u);
  EXPECT_EQ(bank.categories(), (std::vector<std::string>{"novel_0", "novel_1"}));
  EXPECT_NO_THROW(bank.validate(corpus.catalog));
  EXPECT_EQ(bank.snippets[0].source, SnippetSource::kSyntheticFixture);

  SnippetBank bad = bank;
  bad.snippets[0].category = "base_0";
  EXPECT_THROW(bad.validate(corpus.catalog), DataError);
  bad.snippets[0].category = "unknown";
  EXPECT_THROW(bad.validate(corpus.catalog), DataError);

  std::filesystem::remove(corpus.snippet_dir / "novel_0_0.json");
  EXPECT_THROW(load_snippet_bank(corpus.snippet_dir), DataError);
  EXPECT_THROW(load_snippet_bank(dir.path() / "missing"), DataError);
}

TEST_F(PseudoSetFixture, PseudoSetRoundTrip) {
  TempDir dir("pseudo");
  auto set = build_pseudo_set(normals, bank, {"novel_a", "novel_b"}, 2, rng);
  save_pseudo_set(set, dir.path());
  auto back = load_pseudo_set(dir.path());
  ASSERT_EQ(back.size(), set.size());
  for (std::size_t i = 0; i < set.size(); ++i) {
    EXPECT_EQ(back[i].frame_gt, set[i].frame_gt);
    EXPECT_EQ(back[i].provenance, set[i].provenance);
    EXPECT_EQ(back[i].category, set[i].category);
    EXPECT_LT(max_abs_diff(back[i].features.features, set[i].features.features), 1e-6);
  }
  EXPECT_THROW(load_pseudo_set(dir.path() / "nope"), DataError);
}

}  // namespace
}  // namespace ovvad::nas
