#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "micro.hpp"
#include "ovvad/gradcheck.hpp"
#include "ovvad/losses.hpp"

namespace ovvad::losses {
namespace {

using ovvad::testing::make_micro;
using ovvad::testing::random_matrix;

double eval_video_bce(const std::vector<double>& p, bool abnormal) {
  ad::Tape t;
  return video_bce(t.constant(Matrix::column_vector(p)), abnormal).scalar();
}

double eval_topk(const std::vector<double>& p, std::size_t k) {
  ad::Tape t;
  return topk_mean(t.constant(Matrix::column_vector(p)), k).scalar();
}

double eval_ce(const std::vector<double>& logits, std::size_t y) {
  ad::Tape t;
  return class_ce(t.constant(Matrix::row_vector(logits)), y).scalar();
}

double eval_frame_bce(const std::vector<double>& p, const std::vector<std::uint8_t>& gt) {
  ad::Tape t;
  return frame_bce(t.constant(Matrix::column_vector(p)), gt).scalar();
}

double eval_sim(const Matrix& x, const model::KnowledgeBank& bank, const std::vector<double>& p, bool abnormal) {
  ad::Tape t;
  return ski_sim_loss(t.constant(x), t.constant(bank.embeddings), bank, p, abnormal).scalar();
}

std::vector<double> random_vec(std::size_t n, Rng& rng, double scale = 1.0) {
  std::normal_distribution<double> nd(0.0, scale);
  std::vector<double> v(n);
  for (double& x : v) x = nd(rng);
  return v;
}

// ---------------------------------------------------------------------------

TEST(TopkMean, Examples) {
  EXPECT_DOUBLE_EQ(eval_topk({0.9, 0.1, 0.2, 0.8}, 1), 0.9);
  EXPECT_DOUBLE_EQ(eval_topk({1, 2, 3, 6}, 4), 3.0);
  EXPECT_THROW(eval_topk({1, 2}, 0), ConfigError);
  EXPECT_THROW(eval_topk({1, 2}, 3), ConfigError);
}

TEST(TopkMean, MatchesSortOracle) {
  Rng rng(1);
  for (int trial = 0; trial < 200; ++trial) {
    auto p = random_vec(3 + trial % 20, rng);
    auto sorted = p;
    std::sort(sorted.begin(), sorted.end(), std::greater<>());
    EXPECT_NEAR(eval_topk(p, 3), (sorted[0] + sorted[1] + sorted[2]) / 3.0, 1e-15);
  }
}

TEST(VideoBce, Examples) {
  EXPECT_LT(eval_video_bce({-3, 20, 1}, true), 1e-6);
  EXPECT_NEAR(eval_video_bce(std::vector<double>(7, 0.0), false), std::log(2.0), 1e-12);
  EXPECT_EQ(abnormal_topk(20), 2u);
  EXPECT_EQ(abnormal_topk(16), 1u);
  EXPECT_EQ(abnormal_topk(17), 2u);
  EXPECT_EQ(abnormal_topk(1), 1u);
  // n = 20 abnormal: the two largest logits are averaged.
  std::vector<double> p(20, -5.0);
  p[3] = 1.0;
  p[11] = 3.0;
  EXPECT_NEAR(eval_video_bce(p, true), -std::log(1.0 / (1.0 + std::exp(-2.0))), 1e-12);
}

TEST(VideoBce, ClampKeepsLossFinite) {
  const double worst = -std::log(kProbClamp);
  EXPECT_NEAR(eval_video_bce({-1e6}, true), worst, 1e-9);
  EXPECT_NEAR(eval_video_bce({1e6, 1e6}, false), worst, 1e-6);
}

TEST(VideoBce, AbnormalMonotoneAndBlindOutsideTopk) {
  Rng rng(2);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 17 + trial % 40;
    auto p = random_vec(n, rng, 2.0);
    const double base = eval_video_bce(p, true);
    const auto top = ad::topk_indices(p, abnormal_topk(n));
    auto up = p;
    up[top[0]] += 0.5;
    EXPECT_LE(eval_video_bce(up, true), base);
    // Lowering a frame outside the selection leaves the loss unchanged.
    std::vector<bool> selected(n, false);
    for (auto i : top) selected[i] = true;
    auto down = p;
    for (std::size_t i = 0; i < n; ++i)
      if (!selected[i]) {
        down[i] -= 1.0;
        break;
      }
    EXPECT_EQ(eval_video_bce(down, true), base);
  }
}

TEST(ClassCe, Examples) {
  EXPECT_NEAR(eval_ce({0.3, 0.3, 0.3, 0.3}, 2), std::log(4.0), 1e-12);
  EXPECT_LT(eval_ce({0, 20, 0, 0}, 1), 1e-6);
  EXPECT_THROW(eval_ce({0, 0}, 2), ConfigError);
}

TEST(ClassCe, MatchesLoopOracle) {
  Rng rng(3);
  for (int trial = 0; trial < 100; ++trial) {
    auto z = random_vec(2 + trial % 8, rng, 10.0);
    const std::size_t y = trial % z.size();
    double denom = 0.0;
    for (double v : z) denom += std::exp(v);
    EXPECT_NEAR(eval_ce(z, y), -std::log(std::exp(z[y]) / denom), 1e-10);
  }
}

TEST(FrameBce, Examples) {
  EXPECT_LT(eval_frame_bce({20, -20, 20}, {1, 0, 1}), 1e-6);
  EXPECT_NEAR(eval_frame_bce({0, 0, 0, 0}, {1, 0, 0, 1}), std::log(2.0), 1e-12);
  EXPECT_THROW(eval_frame_bce({0, 0}, {1}), ShapeError);
  EXPECT_THROW(eval_frame_bce({0}, {2}), DataError);
}

TEST(FrameBce, MatchesLoopOracle) {
  Rng rng(4);
  std::bernoulli_distribution coin(0.4);
  for (int trial = 0; trial < 100; ++trial) {
    auto p = random_vec(1 + trial % 30, rng, 3.0);
    std::vector<std::uint8_t> gt(p.size());
    for (auto& g : gt) g = coin(rng);
    double acc = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double s = 1.0 / (1.0 + std::exp(-p[i]));
      acc += gt[i] ? -std::log(s) : -std::log(1.0 - s);
    }
    EXPECT_NEAR(eval_frame_bce(p, gt), acc / static_cast<double>(p.size()), 1e-12);
  }
}

model::KnowledgeBank bank_of(const Matrix& e, const std::vector<model::KnowledgeGroup>& g) {
  model::KnowledgeBank b;
  b.embeddings = e;
  b.groups = g;
  for (std::size_t i = 0; i < g.size(); ++i) b.phrases.push_back("p" + std::to_string(i));
  return b;
}

TEST(SkiSimLoss, SingletonGroupsUsePlainDotProducts) {
  using G = model::KnowledgeGroup;
  auto bank = bank_of(Matrix{{1, 0}, {0, 1}}, {G::kNormal, G::kAbnormal});
  Matrix x{{0.2, 0.1}, {0.0, 0.3}};
  // Normal video: both frames, target normal.
  double want = 0.0;
  for (std::size_t i = 0; i < 2; ++i) {
    const double sn = x(i, 0) * kSimScale, sa = x(i, 1) * kSimScale;
    want += -(sn - std::log(std::exp(sn) + std::exp(sa)));
  }
  EXPECT_NEAR(eval_sim(x, bank, {0.0, 0.0}, false), want / 2.0, 1e-12);
}

TEST(SkiSimLoss, ConfidentNormalVideoHasSmallLoss) {
  using G = model::KnowledgeGroup;
  auto bank = bank_of(Matrix{{1, 0}, {0, 1}}, {G::kNormal, G::kAbnormal});
  // s_normal - s_abnormal = 10 before the 1/0.07 scale.
  Matrix x{{10, 0}, {10.5, 0.5}, {9, -1}};
  EXPECT_LT(eval_sim(x, bank, {0, 0, 0}, false), 1e-3);
  EXPECT_GT(eval_sim(x, bank, {0, 0, 0}, true), 1.0);
}

TEST(SkiSimLoss, MatchesBruteForceOracle) {
  Rng rng(5);
  std::uniform_int_distribution<std::size_t> n_dist(1, 32), l_dist(2, 16);
  for (int trial = 0; trial < 300; ++trial) {
    const std::size_t n = n_dist(rng), l = l_dist(rng), c = 4;
    std::vector<model::KnowledgeGroup> groups(l);
    for (std::size_t r = 0; r < l; ++r) groups[r] = r == 0 ? model::KnowledgeGroup::kNormal
                                                  : r == 1 ? model::KnowledgeGroup::kAbnormal
                                                           : (rng() % 2 ? model::KnowledgeGroup::kNormal
                                                                        : model::KnowledgeGroup::kAbnormal);
    auto bank = bank_of(random_matrix(l, c, rng, 0.2), groups);
    Matrix x = random_matrix(n, c, rng);
    auto p = random_vec(n, rng);
    const bool abnormal = trial % 2;

    // Frame set by full sort of (logit desc, index asc).
    std::vector<std::size_t> frames(n);
    std::iota(frames.begin(), frames.end(), 0);
    if (abnormal) {
      std::sort(frames.begin(), frames.end(), [&](auto a, auto b) { return p[a] > p[b] || (p[a] == p[b] && a < b); });
      frames.resize(std::max<std::size_t>(1, (n + 15) / 16));
    }
    double total = 0.0;
    for (auto i : frames) {
      double score[2];
      for (int g = 0; g < 2; ++g) {
        std::vector<double> sims;
        for (std::size_t r = 0; r < l; ++r) {
          if (static_cast<int>(groups[r]) != g) continue;
          double d = 0.0;
          for (std::size_t j = 0; j < c; ++j) d += x(i, j) * bank.embeddings(r, j);
          sims.push_back(d);
        }
        std::sort(sims.begin(), sims.end(), std::greater<>());
        const auto k = static_cast<std::size_t>(std::ceil(0.1 * static_cast<double>(sims.size())));
        score[g] = std::accumulate(sims.begin(), sims.begin() + k, 0.0) / static_cast<double>(k) * kSimScale;
      }
      const double lse = std::max(score[0], score[1]) +
                         std::log(std::exp(score[0] - std::max(score[0], score[1])) +
                                  std::exp(score[1] - std::max(score[0], score[1])));
      total += lse - score[abnormal ? 1 : 0];
    }
    EXPECT_NEAR(eval_sim(x, bank, p, abnormal), total / static_cast<double>(frames.size()), 1e-10)
        << "trial " << trial;
  }
}

TEST(SkiSimLoss, RejectsMissingGroup) {
  using G = model::KnowledgeGroup;
  auto bank = bank_of(Matrix{{1, 0}, {0, 1}}, {G::kNormal, G::kNormal});
  EXPECT_THROW(eval_sim(Matrix{{1, 1}}, bank, {0.0}, false), DataError);
}

// ---------------------------------------------------------------------------

TEST(TrainLoss, OnlyNormalBatchGatesTerms) {
  auto m = make_micro(11);
  std::vector<WeakSample> batch{m.weak[0], {&m.features[2], false, std::nullopt}};
  auto r = train_loss(m.params, batch, m.ctx, false);
  EXPECT_FALSE(r.breakdown[kCe]);
  EXPECT_FALSE(r.breakdown[kSimA]);
  EXPECT_FALSE(r.breakdown[kBce2]);
  ASSERT_TRUE(r.breakdown[kBce] && r.breakdown[kSimN]);
  EXPECT_DOUBLE_EQ(r.breakdown.total, *r.breakdown[kBce] + *r.breakdown[kSimN]);
}

TEST(TrainLoss, ComponentsNonNegativeAndComposed) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    auto m = make_micro(seed);
    auto r = train_loss(m.params, m.weak, m.ctx, false);
    double sum = 0.0;
    for (Term t : {kBce, kCe, kSimN, kSimA}) {
      ASSERT_TRUE(r.breakdown[t]) << kTermNames[t];
      EXPECT_GE(*r.breakdown[t], 0.0);
      sum += *r.breakdown[t];
    }
    EXPECT_NEAR(r.breakdown.total, sum, 1e-12);
  }
}

TEST(TrainLoss, SimilarityTermsSwitchOff) {
  auto m = make_micro(12);
  m.ctx.similarity_terms = false;
  auto r = train_loss(m.params, m.weak, m.ctx, false);
  EXPECT_FALSE(r.breakdown[kSimN]);
  EXPECT_FALSE(r.breakdown[kSimA]);
  m.ctx.similarity_terms = true;
  m.ctx.model.use_knowledge = false;
  EXPECT_FALSE(train_loss(m.params, m.weak, m.ctx, false).breakdown[kSimN]);
}

TEST(TrainLoss, RejectsOutOfSpaceLabel) {
  auto m = make_micro(13);
  m.ctx.label_space = {0};
  EXPECT_THROW(train_loss(m.params, m.weak, m.ctx, false), ConfigError);
}

TEST(TrainLoss, GradientMatchesFiniteDifferences) {
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    auto m = make_micro(100 + seed);
    auto analytic = train_loss(m.params, m.weak, m.ctx).grads;
    auto res = grad_check([&](const model::ModelParams& p) { return train_loss(p, m.weak, m.ctx, false).breakdown.total; },
                          m.params, analytic);
    EXPECT_LT(res.max_rel_error, 1e-4) << res.worst_param << "[" << res.worst_index << "]";
  }
}

TEST(TrainLoss, ThreadCountDoesNotChangeResults) {
  auto m = make_micro(14);
  std::vector<WeakSample> batch(m.weak.begin(), m.weak.end());
  batch.push_back({&m.features[2], true, std::size_t{0}});
  batch.push_back({&m.features[3], false, std::nullopt});
  auto one = train_loss(m.params, batch, m.ctx);
  m.ctx.threads = 4;
  auto four = train_loss(m.params, batch, m.ctx);
  EXPECT_EQ(one.breakdown.total, four.breakdown.total);
  visit_pair(one.grads, four.grads, [](std::string_view, Matrix& a, const Matrix& b) { EXPECT_EQ(a, b); });
}

TEST(TuneLoss, LambdaZeroIgnoresBaseVideos) {
  auto m = make_micro(15);
  auto with_base = tune_loss(m.params, m.pseudo, m.weak, 0.0, m.ctx);
  auto pseudo_only = tune_loss(m.params, m.pseudo, {}, 0.0, m.ctx);
  EXPECT_DOUBLE_EQ(with_base.breakdown.total, *with_base.breakdown[kBce2] + *with_base.breakdown[kCe2]);
  EXPECT_DOUBLE_EQ(with_base.breakdown.total, pseudo_only.breakdown.total);
  visit_pair(with_base.grads, pseudo_only.grads, [](std::string_view, Matrix& a, const Matrix& b) {
    EXPECT_LT(max_abs_diff(a, b), 1e-15);
  });
}

TEST(TuneLoss, LambdaOneComposition) {
  auto m = make_micro(16);
  // Same videos used as pseudo (with frame labels) and as base (weak labels).
  std::vector<WeakSample> base{{&m.features[2], true, std::size_t{2}}, {&m.features[3], true, std::size_t{3}}};
  auto r = tune_loss(m.params, m.pseudo, base, 1.0, m.ctx, false);
  EXPECT_NEAR(r.breakdown.total, *r.breakdown[kBce2] + *r.breakdown[kCe2] + *r.breakdown[kBce] + *r.breakdown[kCe],
              1e-12);
  // The class term is shared: same videos, same labels.
  EXPECT_NEAR(*r.breakdown[kCe2], *r.breakdown[kCe], 1e-12);
  auto half = tune_loss(m.params, m.pseudo, base, 0.5, m.ctx, false);
  EXPECT_NEAR(half.breakdown.total,
              *r.breakdown[kBce2] + *r.breakdown[kCe2] + 0.5 * (*r.breakdown[kBce] + *r.breakdown[kCe]), 1e-12);
}

TEST(TuneLoss, RejectsUnlabelledPseudoAndNegativeLambda) {
  auto m = make_micro(17);
  std::vector<PseudoSample> bad{{&m.features[2], nullptr, 2}};
  EXPECT_THROW(tune_loss(m.params, bad, m.weak, 1.0, m.ctx), DataError);
  EXPECT_THROW(tune_loss(m.params, m.pseudo, m.weak, -1.0, m.ctx), ConfigError);
}

TEST(TuneLoss, GradientMatchesFiniteDifferences) {
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    auto m = make_micro(200 + seed);
    const double lambda = 0.1 + seed;
    auto analytic = tune_loss(m.params, m.pseudo, m.weak, lambda, m.ctx).grads;
    auto res = grad_check(
        [&](const model::ModelParams& p) { return tune_loss(p, m.pseudo, m.weak, lambda, m.ctx, false).breakdown.total; },
        m.params, analytic);
    EXPECT_LT(res.max_rel_error, 1e-4) << res.worst_param << "[" << res.worst_index << "]";
  }
}

TEST(VerifySuite, EveryPrimitiveOperationAndLossPassesFiniteDifferences) {
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    const auto errs = verify::full_suite(seed);
    EXPECT_GE(errs.size(), 30u);
    for (const auto& e : errs) EXPECT_LT(e.error, 1e-4) << e.name << " seed " << seed;
  }
}

}  // namespace
}  // namespace ovvad::losses
