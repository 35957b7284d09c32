#include <gtest/gtest.h>

#include <bit>
#include <cstring>
#include <fstream>
#include <limits>
#include <random>
#include <set>

#include "ovvad/data/batch.hpp"
#include "ovvad/data/feature_io.hpp"
#include "ovvad/data/manifest.hpp"
#include "ovvad/data/sampling.hpp"
#include "ovvad/data/synthetic.hpp"
#include "test_util.hpp"

namespace ovvad::data {
namespace {

using ovvad::testing::TempDir;

std::vector<unsigned char> file_bytes(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return std::vector<unsigned char>(std::istreambuf_iterator<char>(in), {});
}

TEST(FeatureIo, ZerosRoundTrip) {
  TempDir dir("ovff");
  write_matrix(Matrix(3, 4), dir.path() / "z.ovff");
  Matrix back = read_matrix(dir.path() / "z.ovff");
  EXPECT_EQ(back, Matrix(3, 4));
  EXPECT_EQ(file_bytes(dir.path() / "z.ovff").size(), 16u + 4u * 12u);
}

TEST(FeatureIo, HeaderLayoutIsLittleEndian) {
  auto bytes = encode_features(Matrix{{1.0, -2.0}});
  const std::vector<unsigned char> header{'O', 'V', 'F', 'F', 1, 0, 0, 0, 1, 0, 0, 0, 2, 0, 0, 0};
  ASSERT_GE(bytes.size(), header.size());
  EXPECT_TRUE(std::equal(header.begin(), header.end(), bytes.begin()));
  // 1.0f = 0x3F800000
  EXPECT_EQ(bytes[16], 0x00);
  EXPECT_EQ(bytes[19], 0x3F);
}

TEST(FeatureIo, BadMagicNamesThePath) {
  TempDir dir("ovff");
  auto bytes = encode_features(Matrix(2, 2));
  std::memcpy(bytes.data(), "XXXX", 4);
  detail::write_all(dir.path() / "bad.ovff", bytes);
  try {
    read_matrix(dir.path() / "bad.ovff");
    FAIL();
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("bad magic"), std::string::npos);
    EXPECT_NE(std::string(e.what()).find("bad.ovff"), std::string::npos);
  }
}

TEST(FeatureIo, TruncatedAndOversizedPayloadsAreRejected) {
  auto bytes = encode_features(Matrix(3, 3));
  auto cut = bytes;
  cut.resize(cut.size() - 1);
  EXPECT_THROW(decode_features(cut, "cut"), DataError);
  EXPECT_THROW(decode_features(std::vector<unsigned char>(bytes.begin(), bytes.begin() + 10), "hdr"), DataError);
  // Header claiming 2^32-1 × 2^32-1 floats.
  auto huge = bytes;
  for (int i = 8; i < 16; ++i) huge[i] = 0xFF;
  EXPECT_THROW(decode_features(huge, "huge"), DataError);
  auto ver = bytes;
  ver[4] = 2;
  EXPECT_THROW(decode_features(ver, "ver"), DataError);
}

TEST(FeatureIo, ZeroFrameSequenceIsRejected) {
  TempDir dir("ovff");
  write_matrix(Matrix(0, 8), dir.path() / "e.ovff");
  EXPECT_THROW(read_features(dir.path() / "e.ovff"), DataError);
}

TEST(FeatureIo, RandomPayloadsRoundTripBitExact) {
  TempDir dir("ovff");
  Rng rng(11);
  std::uniform_int_distribution<std::uint32_t> bits;
  for (auto [n, c] : {std::pair<std::size_t, std::size_t>{17, 512}, {1, 1}, {5, 3}, {64, 7}}) {
    // Arbitrary finite float32 bit patterns, including denormals and -0.
    std::vector<double> vals;
    std::vector<std::uint32_t> raw;
    while (vals.size() < n * c) {
      const std::uint32_t b = bits(rng);
      const float f = std::bit_cast<float>(b);
      if (!std::isfinite(f)) continue;
      raw.push_back(b);
      vals.push_back(f);
    }
    const auto path = dir.path() / "r.ovff";
    write_matrix(Matrix(n, c, vals), path);
    auto bytes = file_bytes(path);
    ASSERT_EQ(bytes.size(), 16 + 4 * n * c);
    for (std::size_t i = 0; i < raw.size(); ++i) {
      std::uint32_t got = 0;
      for (int b = 0; b < 4; ++b) got |= static_cast<std::uint32_t>(bytes[16 + 4 * i + b]) << (8 * b);
      ASSERT_EQ(got, raw[i]);
    }
    Matrix back = read_matrix(path);
    for (std::size_t i = 0; i < raw.size(); ++i)
      ASSERT_EQ(std::bit_cast<std::uint32_t>(static_cast<float>(back[i])), raw[i]);
    EXPECT_EQ(encode_features(back), bytes);
  }
}

// ---------------------------------------------------------------------------

TEST(SampleFrames, UnderLimitIsUnchanged) {
  Rng rng(1);
  FeatureSequence s = make_sequence(Matrix(100, 4, 1.0));
  auto out = sample_frames(s, kMaxTrainLength, rng);
  EXPECT_EQ(out.features, s.features);
}

TEST(SampleFrames, OverLimitKeepsOrderedDistinctIndices) {
  Rng rng(2);
  auto idx = sample_indices(512, 256, rng);
  ASSERT_EQ(idx.size(), 256u);
  for (std::size_t i = 1; i < idx.size(); ++i) EXPECT_LT(idx[i - 1], idx[i]);
}

TEST(SampleFrames, FixedSeedReplaysSameIndices) {
  Rng a(3), b(3);
  EXPECT_EQ(sample_indices(300, 256, a), sample_indices(300, 256, b));
}

TEST(SampleFrames, PropertyOneIndexPerBin) {
  Rng rng(4);
  std::uniform_int_distribution<std::size_t> dn(1, 2000), dm(1, 300);
  for (int trial = 0; trial < 500; ++trial) {
    const std::size_t n = dn(rng), m = dm(rng);
    auto idx = sample_indices(n, m, rng);
    ASSERT_EQ(idx.size(), std::min(n, m));
    for (std::size_t i = 0; i < idx.size(); ++i) {
      ASSERT_LT(idx[i], n);
      if (i) ASSERT_LT(idx[i - 1], idx[i]);
      if (n > m) {
        ASSERT_GE(idx[i], i * n / m);
        ASSERT_LT(idx[i], (i + 1) * n / m);
      }
    }
  }
  EXPECT_THROW(sample_indices(10, 0, rng), ConfigError);
}

TEST(SampleFrames, GatherMatchesIndices) {
  Rng rng(5);
  Matrix m(400, 2);
  for (std::size_t i = 0; i < 400; ++i) m(i, 0) = static_cast<double>(i);
  std::vector<std::size_t> kept;
  auto out = sample_frames(make_sequence(m), 256, rng, &kept);
  ASSERT_EQ(out.length(), 256u);
  for (std::size_t i = 0; i < kept.size(); ++i) EXPECT_EQ(out.features(i, 0), static_cast<double>(kept[i]));
}

// ---------------------------------------------------------------------------

Manifest toy_manifest(std::size_t normals, std::size_t abnormals) {
  Manifest m;
  for (std::size_t i = 0; i < normals; ++i) m.videos.push_back({"n" + std::to_string(i), "x", "normal", Split::kTrain});
  for (std::size_t i = 0; i < abnormals; ++i) m.videos.push_back({"a" + std::to_string(i), "x", "A", Split::kTrain});
  m.videos.push_back({"t0", "x", "A", Split::kTest});
  return m;
}

TEST(MakeBatch, ExactCorpusFitsOneBatch) {
  Rng rng(1);
  auto m = toy_manifest(32, 32);
  auto batch = make_batch(m, 64, rng);
  ASSERT_EQ(batch.size(), 64u);
  std::set<std::string> ids;
  for (const auto& v : batch) ids.insert(v.id);
  EXPECT_EQ(ids.size(), 64u);
  EXPECT_EQ(ids.count("t0"), 0u);
}

TEST(MakeBatch, BalancedOnLargeCorpus) {
  Rng rng(2);
  auto m = toy_manifest(300, 150);
  BalancedBatcher b(m, 64);
  EXPECT_EQ(b.batches_per_epoch(), 4u);
  std::set<std::size_t> seen;
  for (const auto& batch : b.epoch(rng)) {
    std::size_t normals = 0;
    for (std::size_t i : batch) {
      normals += m.videos[i].is_normal();
      EXPECT_TRUE(seen.insert(i).second) << "sampled twice within an epoch";
    }
    EXPECT_EQ(normals, 32u);
    EXPECT_EQ(batch.size() - normals, 32u);
  }
}

TEST(MakeBatch, SeedReplaysEpochSequence) {
  auto m = toy_manifest(100, 80);
  BalancedBatcher b(m, 16);
  Rng r1(9), r2(9);
  auto e1a = b.epoch(r1), e1b = b.epoch(r1);
  auto e2a = b.epoch(r2), e2b = b.epoch(r2);
  EXPECT_EQ(e1a, e2a);
  EXPECT_EQ(e1b, e2b);
  EXPECT_NE(e1a, e1b);
}

TEST(MakeBatch, ConfigurationErrors) {
  auto m = toy_manifest(10, 40);
  Rng rng(1);
  EXPECT_THROW(make_batch(m, 64, rng), ConfigError);
  EXPECT_THROW(make_batch(m, 7, rng), ConfigError);
  EXPECT_THROW(make_batch(m, 0, rng), ConfigError);
}

// ---------------------------------------------------------------------------

class ManifestIo : public ::testing::Test {
 protected:
  TempDir dir{"manifest"};
  void touch(const std::string& rel) { write_matrix(Matrix(2, 3), dir.path() / rel); }
  std::filesystem::path write(const std::string& text) {
    std::ofstream(dir.path() / "manifest.json") << text;
    return dir.path() / "manifest.json";
  }
  void SetUp() override {
    touch("f/a.ovff");
    touch("f/b.ovff");
    std::ofstream(dir.path() / "catalog.json") << "{}";
    std::ofstream(dir.path() / "knowledge.json") << "{}";
  }
};

TEST_F(ManifestIo, LoadsRelativePathsAndOptionalFields) {
  auto p = write(R"({"feature_dim": 3, "class_catalog_path": "catalog.json", "knowledge_bank_path": "knowledge.json",
    "videos": [{"id": "a", "feature_path": "f/a.ovff", "label": "normal", "split": "train"},
               {"id": "b", "feature_path": "f/b.ovff", "label": "Fighting", "split": "test",
                "frame_gt": [0, 1], "stride": 8, "original_frame_count": 15}]})");
  Manifest m = load_manifest(p);
  ASSERT_EQ(m.videos.size(), 2u);
  EXPECT_EQ(m.videos[1].feature_path, dir.path() / "f/b.ovff");
  EXPECT_EQ(m.videos[1].frame_gt, (std::vector<std::uint8_t>{0, 1}));
  EXPECT_EQ(m.videos[1].stride, 8u);
  auto seq = load_sequence(m.videos[1]);
  EXPECT_EQ(seq.original_frame_count, 15u);
  EXPECT_EQ(m.indices(Split::kTest), std::vector<std::size_t>{1});

  save_manifest(m, dir.path() / "copy.json");
  Manifest again = load_manifest(dir.path() / "copy.json");
  EXPECT_EQ(again.videos[1].feature_path, m.videos[1].feature_path);
  EXPECT_EQ(again.videos[1].original_frame_count, 15u);
}

TEST_F(ManifestIo, RejectsDuplicateIdsMissingFilesAndDirtyNormals) {
  const std::string head =
      R"({"feature_dim": 3, "class_catalog_path": "catalog.json", "knowledge_bank_path": "knowledge.json", "videos": )";
  EXPECT_THROW(load_manifest(write(head + R"([{"id": "a", "feature_path": "f/a.ovff", "label": "normal", "split": "train"},
      {"id": "a", "feature_path": "f/b.ovff", "label": "normal", "split": "train"}]})")),
               DataError);
  EXPECT_THROW(load_manifest(write(head + R"([{"id": "a", "feature_path": "f/zz.ovff", "label": "normal", "split": "train"}]})")),
               DataError);
  EXPECT_THROW(load_manifest(write(head + R"([{"id": "a", "feature_path": "f/a.ovff", "label": "normal", "split": "train",
      "frame_gt": [0, 1]}]})")),
               DataError);
  EXPECT_THROW(load_manifest(write(head + R"([{"id": "a", "feature_path": "f/a.ovff", "label": "normal", "split": "dev"}]})")),
               DataError);
  EXPECT_THROW(load_manifest(write("{not json")), DataError);
}

// ---------------------------------------------------------------------------

// All-pairs AUC, independent of the eval module.
double pairwise_auc(const std::vector<double>& s, const std::vector<int>& y) {
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < s.size(); ++i)
    for (std::size_t j = 0; j < s.size(); ++j)
      if (y[i] == 1 && y[j] == 0) {
        den += 1.0;
        num += s[i] > s[j] ? 1.0 : (s[i] == s[j] ? 0.5 : 0.0);
      }
  return num / den;
}

// Scores each test frame by its largest projection onto a class direction.
double projection_oracle_auc(const SyntheticCorpus& corpus) {
  std::vector<double> scores;
  std::vector<int> labels;
  for (std::size_t i : corpus.manifest.indices(Split::kTest)) {
    const auto& v = corpus.manifest.videos[i];
    Matrix f = read_matrix(v.feature_path);
    for (std::size_t r = 0; r < f.rows(); ++r) {
      double best = -1e300;
      for (std::size_t k = 0; k < corpus.class_directions.rows(); ++k) {
        double d = 0.0;
        for (std::size_t j = 0; j < f.cols(); ++j) d += f(r, j) * corpus.class_directions(k, j);
        best = std::max(best, d);
      }
      scores.push_back(best);
      labels.push_back((*v.frame_gt)[r]);
    }
  }
  return pairwise_auc(scores, labels);
}

SyntheticConfig small_config() {
  SyntheticConfig cfg;
  cfg.feature_dim = 16;
  cfg.train_videos_per_class = 4;
  cfg.test_videos_per_class = 4;
  cfg.normal_train = 6;
  cfg.normal_test = 6;
  cfg.video_length = {20, 40};
  cfg.segment_length = {4, 10};
  cfg.snippets_per_novel_class = 2;
  return cfg;
}

TEST(GenSynthetic, CatalogAndSplitContract) {
  TempDir dir("synth");
  auto corpus = gen_synthetic(small_config(), dir.path());
  EXPECT_EQ(corpus.catalog.size(), 5u);
  EXPECT_EQ(corpus.catalog.base_indices().size(), 3u);
  EXPECT_EQ(corpus.catalog.novel_indices().size(), 2u);

  Manifest m = load_manifest(corpus.manifest_path);
  m.validate_labels(corpus.catalog);
  std::size_t novel_train = 0, novel_test = 0;
  for (const auto& v : m.videos) {
    const bool novel = v.is_abnormal() && !corpus.catalog.is_base[*corpus.catalog.index_of(v.label)];
    if (novel) (v.split == Split::kTrain ? novel_train : novel_test)++;
    Matrix f = read_matrix(v.feature_path);
    ASSERT_EQ(v.frame_gt->size(), f.rows());
    const auto ones = std::count(v.frame_gt->begin(), v.frame_gt->end(), 1);
    if (v.is_normal()) {
      EXPECT_EQ(ones, 0);
    } else {
      // One contiguous positive segment.
      auto first = std::find(v.frame_gt->begin(), v.frame_gt->end(), 1);
      EXPECT_TRUE(std::all_of(first, first + ones, [](auto g) { return g == 1; }));
      EXPECT_GE(ones, 4);
    }
    EXPECT_LE(*v.original_frame_count, f.rows() * 16);
    EXPECT_GT(*v.original_frame_count, (f.rows() - 1) * 16);
  }
  EXPECT_EQ(novel_train, 0u);
  EXPECT_EQ(novel_test, 8u);

  auto cat = model::load_catalog(m.class_catalog_path);
  for (std::size_t i = 0; i < cat.size(); ++i) EXPECT_NEAR(l2_norm(cat.embeddings.row(i)), 1.0, 1e-12);
  auto kb = model::load_knowledge(m.knowledge_bank_path);
  EXPECT_EQ(kb.rows_of(model::KnowledgeGroup::kNormal).size(), 8u);
}

TEST(GenSynthetic, SeedDeterministic) {
  TempDir a("synth"), b("synth");
  auto ca = gen_synthetic(small_config(), a.path());
  auto cb = gen_synthetic(small_config(), b.path());
  ASSERT_EQ(ca.manifest.videos.size(), cb.manifest.videos.size());
  for (std::size_t i = 0; i < ca.manifest.videos.size(); ++i)
    EXPECT_EQ(file_bytes(ca.manifest.videos[i].feature_path), file_bytes(cb.manifest.videos[i].feature_path));
}

TEST(GenSynthetic, ZeroSeparationGivesChanceLevelOracle) {
  TempDir dir("synth");
  auto cfg = small_config();
  cfg.separation = 0.0;
  cfg.test_videos_per_class = 10;
  const double auc = projection_oracle_auc(gen_synthetic(cfg, dir.path()));
  EXPECT_NEAR(auc, 0.5, 0.06);
}

TEST(GenSynthetic, LargeSeparationProjectionOracleIsNearPerfect) {
  TempDir dir("synth");
  auto cfg = small_config();
  cfg.separation = 5.0;
  EXPECT_GT(projection_oracle_auc(gen_synthetic(cfg, dir.path())), 0.99);
}

TEST(GenSynthetic, InvalidConfigs) {
  TempDir dir("synth");
  auto cfg = small_config();
  cfg.video_length = {10, 300};
  EXPECT_THROW(gen_synthetic(cfg, dir.path()), ConfigError);
  cfg = small_config();
  cfg.feature_dim = 4;
  EXPECT_THROW(gen_synthetic(cfg, dir.path()), ConfigError);
}

}  // namespace
}  // namespace ovvad::data
