#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "benchmark.hpp"
#include "cafo/ensemble.hpp"
#include "oracle.hpp"

using namespace cafo;

namespace {

RowMatrix<double> row(std::initializer_list<double> v) {
  RowMatrix<double> m(1, Eigen::Index(v.size()));
  Eigen::Index i = 0;
  for (double x : v) m(0, i++) = x;
  return m;
}

RowMatrix<double> random_logits(std::mt19937_64& rng, Eigen::Index q, Eigen::Index n) {
  std::normal_distribution<double> nd(0.0, 1.0);
  RowMatrix<double> m(q, n);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = nd(rng);
  return m;
}

oracle::Vec vec(const RowMatrix<double>& m, Eigen::Index r) {
  return oracle::Vec(m.row(r).data(), m.row(r).data() + m.cols());
}

}  // namespace

TEST(Znorm, Analytic) {
  const auto z = znorm(Vector<double>((Vector<double>(3) << 1, 2, 3).finished()));
  EXPECT_NEAR(z(0), -1.224745, 1e-6);
  EXPECT_NEAR(z(1), 0.0, 1e-15);
  EXPECT_NEAR(z(2), 1.224745, 1e-6);
}

TEST(Znorm, ConstantVectorIsZeroWithWarning) {
  bool constant = false;
  const auto z = znorm(Vector<double>::Constant(3, 5.0), &constant);
  EXPECT_TRUE(constant);
  EXPECT_EQ(z, Vector<double>::Zero(3));
  EXPECT_THROW(znorm(Vector<double>::Ones(1)), Error);
}

TEST(Znorm, IdempotentAndStandardized) {
  std::mt19937_64 rng(8);
  for (int t = 0; t < 50; ++t) {
    const Vector<double> x = random_logits(rng, 1, 2 + t % 12).row(0).transpose() * 3.0;
    const auto z = znorm(x);
    EXPECT_LE((znorm(z) - z).cwiseAbs().maxCoeff(), 1e-6);
    EXPECT_NEAR(z.mean(), 0.0, 1e-6);
    EXPECT_NEAR(std::sqrt(z.squaredNorm() / double(z.size())), 1.0, 1e-5);
  }
}

TEST(SimilarityWeights, Analytic) {
  std::mt19937_64 rng(3);
  const Vector<double> pz = znorm(Vector<double>(random_logits(rng, 1, 6).row(0).transpose()));
  const Vector<double> zero = Vector<double>::Zero(6);
  const auto w = similarity_weights(pz, pz, zero);
  EXPECT_NEAR(w.clip, 6.0, 1e-12);
  EXPECT_EQ(w.dino, 0.0);
  EXPECT_NEAR(similarity_weights(pz, pz, Vector<double>(-pz)).dino, -6.0, 1e-12);
  EXPECT_THROW(similarity_weights(pz, pz, Vector<double>::Zero(5)), Error);
}

TEST(Fuse, IdenticalCacheStreamsSplitEvenly) {
  std::mt19937_64 rng(1);
  const auto pz = random_logits(rng, 4, 7);
  const auto pc = random_logits(rng, 4, 7);
  const auto r = fuse(pz, pc, pc);
  for (Eigen::Index q = 0; q < 4; ++q) {
    EXPECT_NEAR(r.sw_clip(q), 0.5, 1e-15);
    EXPECT_NEAR(r.sw_dino(q), 0.5, 1e-15);
  }
  EXPECT_LE((r.fused - (znorm_rows(pz) + znorm_rows(pc))).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Fuse, ConstantDinoAgainstMatchingClip) {
  std::mt19937_64 rng(2);
  const auto pz = random_logits(rng, 1, 10);
  const RowMatrix<double> flat = RowMatrix<double>::Constant(1, 10, 3.0);
  const auto r = fuse(pz, pz, flat);
  EXPECT_NEAR(r.w_clip(0), 10.0, 1e-12);
  EXPECT_EQ(r.w_dino(0), 0.0);
  EXPECT_NEAR(r.sw_clip(0), 0.9999546, 1e-7);
  EXPECT_EQ(r.constant_rows, 1u);
}

TEST(Fuse, MatchesIndependentOracle) {
  std::mt19937_64 rng(555);
  const auto pz = random_logits(rng, 6, 5);
  const auto pc = random_logits(rng, 6, 5);
  const auto pd = random_logits(rng, 6, 5);
  for (int base = 0; base < 3; ++base) {
    for (bool raw : {false, true}) {
      const auto r = fuse(pz, pc, pd, FuseOptions{Stream(base), raw});
      for (Eigen::Index q = 0; q < 6; ++q) {
        const auto o = oracle::fuse(vec(pz, q), vec(pc, q), vec(pd, q), base, raw);
        for (int s = 0; s < 3; ++s) {
          EXPECT_NEAR(r.weights(q, s), o.w[s], 1e-6);
          EXPECT_NEAR(r.soft_weights(q, s), o.sw[s], 1e-6);
          for (Eigen::Index c = 0; c < 5; ++c) EXPECT_NEAR(r.normalized[s](q, c), o.z[s][std::size_t(c)], 1e-6);
        }
        for (Eigen::Index c = 0; c < 5; ++c) EXPECT_NEAR(r.fused(q, c), o.p_en[std::size_t(c)], 1e-6);
        EXPECT_EQ(r.sw(q, Stream(base)), 1.0);
      }
    }
  }
}

TEST(Fuse, SoftWeightsSumToOne) {
  std::mt19937_64 rng(12);
  const auto r = fuse(random_logits(rng, 30, 8), random_logits(rng, 30, 8), random_logits(rng, 30, 8));
  for (Eigen::Index q = 0; q < 30; ++q) {
    EXPECT_NEAR(r.sw_clip(q) + r.sw_dino(q), 1.0, 1e-6);
    EXPECT_GE(r.sw_clip(q), 0.0);
    EXPECT_GE(r.sw_dino(q), 0.0);
    for (int s = 0; s < 3; ++s) {
      EXPECT_NEAR(r.normalized[s].row(q).mean(), 0.0, 1e-6);
      EXPECT_NEAR(std::sqrt(r.normalized[s].row(q).squaredNorm() / 8.0), 1.0, 1e-5);
    }
  }
}

TEST(Fuse, InvariantUnderPositiveAffineMaps) {
  std::mt19937_64 rng(77);
  std::uniform_real_distribution<double> scale(0.1, 20.0), shift(-5.0, 5.0);
  for (int t = 0; t < 20; ++t) {
    const auto pz = random_logits(rng, 3, 9), pc = random_logits(rng, 3, 9), pd = random_logits(rng, 3, 9);
    const auto r = fuse(pz, pc, pd);
    const RowMatrix<double> pz2 = (pz * scale(rng)).array() + shift(rng);
    const RowMatrix<double> pc2 = (pc * scale(rng)).array() + shift(rng);
    const RowMatrix<double> pd2 = (pd * scale(rng)).array() + shift(rng);
    const auto r2 = fuse(pz2, pc2, pd2);
    EXPECT_LE((r.fused - r2.fused).cwiseAbs().maxCoeff(), 1e-6);
    EXPECT_LE((r.soft_weights - r2.soft_weights).cwiseAbs().maxCoeff(), 1e-6);
    EXPECT_EQ(argmax_rows(r.fused), argmax_rows(r2.fused));
  }
}

TEST(Fuse, WeightOrdering) {
  std::mt19937_64 rng(31);
  const auto r = fuse(random_logits(rng, 200, 6), random_logits(rng, 200, 6), random_logits(rng, 200, 6));
  for (Eigen::Index q = 0; q < 200; ++q) {
    if (r.w_clip(q) > r.w_dino(q)) EXPECT_GT(r.sw_clip(q), r.sw_dino(q));
    if (r.w_dino(q) > r.w_clip(q)) EXPECT_GT(r.sw_dino(q), r.sw_clip(q));
  }
}

TEST(Fuse, AntiCorrelatedStreamIsSuppressed) {
  std::mt19937_64 rng(40);
  for (Eigen::Index n : {20, 32, 64}) {
    const auto pz = random_logits(rng, 5, n);
    const RowMatrix<double> pc = pz + 0.5 * random_logits(rng, 5, n);
    const RowMatrix<double> pd = -pz;
    const auto r = fuse(pz, pc, pd);
    for (Eigen::Index q = 0; q < 5; ++q) EXPECT_LT(r.sw_dino(q), 1e-4);
    EXPECT_LE((r.fused - (znorm_rows(pz) + znorm_rows(pc))).cwiseAbs().maxCoeff(), 1e-3);
  }
}

TEST(Fuse, EqualsZsBaseline) {
  std::mt19937_64 rng(9);
  const auto pz = random_logits(rng, 5, 4), pc = random_logits(rng, 5, 4), pd = random_logits(rng, 5, 4);
  EXPECT_EQ(fuse(pz, pc, pd).fused, fuse_with_baseline(Stream::Zs, pz, pc, pd).fused);
}

TEST(Fuse, ClipBaselineWithDinoEqualToZs) {
  std::mt19937_64 rng(10);
  const auto pz = random_logits(rng, 3, 6), pc = random_logits(rng, 3, 6);
  const auto r = fuse_with_baseline(Stream::Clip, pz, pc, pz);
  for (Eigen::Index q = 0; q < 3; ++q) {
    const auto o = oracle::fuse(vec(pz, q), vec(pc, q), vec(pz, q), 1);
    EXPECT_NEAR(r.sw(q, Stream::Zs), 0.5, 1e-12);
    EXPECT_NEAR(r.sw(q, Stream::Dino), 0.5, 1e-12);
    for (Eigen::Index c = 0; c < 6; ++c) EXPECT_NEAR(r.fused(q, c), o.p_en[std::size_t(c)], 1e-6);
  }
}

TEST(Fuse, AllStreamsIdenticalGiveTwiceBaseline) {
  std::mt19937_64 rng(13);
  const auto p = random_logits(rng, 4, 5);
  const RowMatrix<double> expected = 2.0 * znorm_rows(p);
  for (Stream b : {Stream::Zs, Stream::Clip, Stream::Dino}) {
    EXPECT_LE((fuse_with_baseline(b, p, p, p).fused - expected).cwiseAbs().maxCoeff(), 1e-12);
  }
}

TEST(Fuse, ShapeMismatch) {
  EXPECT_THROW(fuse(row({1, 2}), row({1, 2, 3}), row({1, 2})), Error);
  EXPECT_THROW(fuse(row({1}), row({1}), row({1})), Error);
  EXPECT_THROW(fuse_average(row({1, 2}), row({1, 2}), row({1, 2, 3})), Error);
}

TEST(Pooling, IdenticalCacheStreamsAgreeWithAdaptive) {
  std::mt19937_64 rng(14);
  const auto pz = random_logits(rng, 4, 6), pc = random_logits(rng, 4, 6);
  const auto adaptive = fuse(pz, pc, pc).fused;
  EXPECT_LE((fuse_average(pz, pc, pc) - adaptive).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_LE((fuse_maximum(pz, pc, pc) - adaptive).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Pooling, MaximumOfShiftedCopy) {
  // A uniformly shifted copy z-normalizes to the same vector, so the maximum
  // branch reduces to the CLIP stream.
  std::mt19937_64 rng(15);
  const auto pz = random_logits(rng, 3, 7), pc = random_logits(rng, 3, 7);
  const RowMatrix<double> pd = znorm_rows(pc).array() - 1.0;
  EXPECT_LE((fuse_maximum(pz, pc, pd) - (znorm_rows(pz) + znorm_rows(pc))).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Pooling, AverageOfOppositeStreamsCancels) {
  std::mt19937_64 rng(16);
  const auto pz = random_logits(rng, 3, 7), pc = random_logits(rng, 3, 7);
  const RowMatrix<double> pd = -pc;
  EXPECT_LE((fuse_average(pz, pc, pd) - znorm_rows(pz)).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Argmax, TiesGoToLowestIndex) {
  EXPECT_EQ(argmax_rows(row({1, 3, 3, 2})), std::vector<std::uint32_t>{1});
  EXPECT_EQ(accuracy(row({0, 1}), LabelSet{{1}, 2}), 1.0);
}
