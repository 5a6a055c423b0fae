#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <limits>
#include <numbers>

#include "support.hpp"
#include "xfic/synth.hpp"
#include "xfic/trainer.hpp"

using namespace xfic;
using xfic::testing::random_corpus;
using xfic::testing::random_matrix;

namespace {

Matrix normalized_rows(const Matrix& m) {
  Matrix out(m.rows(), m.cols());
  for (std::size_t i = 0; i < m.rows(); ++i) {
    const auto r = l2_normalize(m.row(i));
    std::ranges::copy(r, out.row(i).begin());
  }
  return out;
}

// Direct softmax cross-entropy in both directions, no max-shift.
double naive_info_nce(const Matrix& u, const Matrix& v, double tau) {
  const std::size_t b = u.rows();
  double total = 0.0;
  for (std::size_t i = 0; i < b; ++i) {
    double row = 0.0, col = 0.0;
    for (std::size_t j = 0; j < b; ++j) {
      row += std::exp(dot(u.row(i), v.row(j)) / tau);
      col += std::exp(dot(u.row(j), v.row(i)) / tau);
    }
    const double self = std::exp(dot(u.row(i), v.row(i)) / tau);
    total += -std::log(self / row) - std::log(self / col);
  }
  return total / (2.0 * static_cast<double>(b));
}

}  // namespace

TEST(InfoNce, MatchesNaiveFormula) {
  Rng rng(1);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t b = 1 + rng.below(10), d = 2 + rng.below(6);
    const Matrix u = normalized_rows(random_matrix(rng, b, d));
    const Matrix v = normalized_rows(random_matrix(rng, b, d));
    const double tau = 0.05 + rng.uniform();
    EXPECT_NEAR(info_nce(u, v, tau), naive_info_nce(u, v, tau), 1e-10);
  }
}

TEST(InfoNce, ClosedForms) {
  Matrix e(2, 2);
  e(0, 0) = e(1, 1) = 1.0;
  for (double tau : {0.1, 0.5, 1.0}) EXPECT_NEAR(info_nce(e, e, tau), std::log1p(std::exp(-1.0 / tau)), 1e-12);
  // Identical rows carry no signal: loss is log B.
  Matrix same(5, 3);
  for (std::size_t i = 0; i < 5; ++i) same(i, 0) = 1.0;
  EXPECT_NEAR(info_nce(same, same, 0.07), std::log(5.0), 1e-12);
  Matrix one(1, 3);
  one(0, 1) = 1.0;
  EXPECT_EQ(info_nce(one, one, 0.01), 0.0);
}

TEST(InfoNce, NonnegativeAndPermutationInvariant) {
  Rng rng(2);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t b = 2 + rng.below(8);
    const Matrix u = normalized_rows(random_matrix(rng, b, 4));
    const Matrix v = normalized_rows(random_matrix(rng, b, 4));
    const double loss = info_nce(u, v, 0.01 + rng.uniform());
    EXPECT_GE(loss, 0.0);
    const auto perm = rng.permutation(b);
    Matrix pu(b, 4), pv(b, 4);
    for (std::size_t i = 0; i < b; ++i) {
      std::ranges::copy(u.row(perm[i]), pu.row(i).begin());
      std::ranges::copy(v.row(perm[i]), pv.row(i).begin());
    }
    const double tau = 0.3;
    EXPECT_NEAR(info_nce(u, v, tau), info_nce(pu, pv, tau), 1e-12);
  }
}

TEST(InfoNce, StableAtMinimumTemperature) {
  Rng rng(3);
  const Matrix u = normalized_rows(random_matrix(rng, 64, 8));
  const Matrix v = normalized_rows(random_matrix(rng, 64, 8));
  EXPECT_TRUE(std::isfinite(info_nce(u, v, kTauMin)));
}

TEST(InfoNce, Errors) {
  Matrix a(3, 2), b(2, 2);
  EXPECT_THROW(info_nce(a, b, 0.1), ShapeError);
  EXPECT_THROW(info_nce(a, a, 0.0), UsageError);
  EXPECT_THROW(info_nce(Matrix(), Matrix(), 0.1), ShapeError);
}

TEST(InfoNceGrad, MatchesCentralDifferences) {
  Rng rng(4);
  for (int trial = 0; trial < 6; ++trial) {
    const std::size_t b = 2 + rng.below(5), di = 2 + rng.below(3), dt = 2 + rng.below(3), ds = 2 + rng.below(3);
    ProjectionHead head = ProjectionHead::random(di, dt, ds, 0.2 + 0.2 * rng.uniform(), 10 + trial);
    for (std::size_t c = 0; c < ds; ++c) {
      head.params()[head.b_img_offset() + c] = 0.3 * rng.normal();
      head.params()[head.b_txt_offset() + c] = 0.3 * rng.normal();
    }
    const Matrix img = random_matrix(rng, b, di), txt = random_matrix(rng, b, dt);
    const auto lg = info_nce_grad(img, txt, head);
    EXPECT_NEAR(lg.loss, info_nce_loss(img, txt, head), 1e-12);
    const double h = 1e-6;
    for (std::size_t p = 0; p < head.parameter_count(); ++p) {
      ProjectionHead plus = head, minus = head;
      plus.params()[p] += h;
      minus.params()[p] -= h;
      const double fd = (info_nce_loss(img, txt, plus) - info_nce_loss(img, txt, minus)) / (2 * h);
      EXPECT_NEAR(lg.grad[p], fd, 1e-6 * std::max(1.0, std::abs(fd))) << "trial " << trial << " param " << p;
    }
  }
}

TEST(CosineLr, Endpoints) {
  EXPECT_DOUBLE_EQ(cosine_lr(0.1, 0, 100), 0.1);
  EXPECT_NEAR(cosine_lr(0.1, 50, 100), 0.05, 1e-15);
  EXPECT_NEAR(cosine_lr(0.1, 100, 100), 0.0, 1e-15);
  EXPECT_NEAR(cosine_lr(2.0, 25, 100), 1.0 + std::cos(std::numbers::pi / 4.0), 1e-15);
  double prev = 1.0;
  for (std::size_t t = 0; t <= 40; ++t) {
    const double lr = cosine_lr(1.0, t, 40);
    EXPECT_LE(lr, prev);
    prev = lr;
  }
}

TEST(AdamW, TwoStepsByHand) {
  AdamWConfig cfg{0.1, 0.01, 0.9, 0.999, 1e-8};
  OptimizerState st(cfg, 1);
  std::vector<double> p{2.0};
  const double lr0 = adamw_update(st, p, std::vector<double>{0.5}, 0, 4);
  EXPECT_DOUBLE_EQ(lr0, 0.1);
  // Step 1: m_hat = g, v_hat = g^2.
  double want = 2.0 * (1 - 0.1 * 0.01) - 0.1 * 0.5 / (0.5 + 1e-8);
  EXPECT_NEAR(p[0], want, 1e-14);
  const double lr1 = adamw_update(st, p, std::vector<double>{-1.0}, 1, 4);
  EXPECT_NEAR(lr1, 0.1 * 0.5 * (1 + std::cos(std::numbers::pi / 4)), 1e-15);
  const double m = 0.9 * 0.05 + 0.1 * -1.0, v = 0.999 * 0.00025 + 0.001 * 1.0;
  const double mhat = m / (1 - 0.81), vhat = v / (1 - 0.999 * 0.999);
  want = want * (1 - lr1 * 0.01) - lr1 * mhat / (std::sqrt(vhat) + 1e-8);
  EXPECT_NEAR(p[0], want, 1e-14);
  EXPECT_EQ(st.steps, 2u);
}

TEST(AdamW, MaskSkipsDecayAndShapesAreChecked) {
  OptimizerState st(AdamWConfig{0.1, 0.5, 0.9, 0.999, 1e-8}, 2, {1.0, 0.0});
  std::vector<double> p{1.0, 1.0};
  adamw_update(st, p, std::vector<double>{0.0, 0.0}, 0, 10);
  EXPECT_DOUBLE_EQ(p[0], 0.95);
  EXPECT_DOUBLE_EQ(p[1], 1.0);
  EXPECT_THROW(adamw_update(st, p, std::vector<double>{0.0}, 0, 10), ShapeError);
  EXPECT_THROW(OptimizerState(AdamWConfig{}, 3, {1.0}), ShapeError);
}

TEST(ProjectionHead, LayoutAndInit) {
  const auto h = ProjectionHead::random(5, 3, 4, 0.01, 7);
  EXPECT_EQ(h.parameter_count(), (5 + 1 + 3 + 1) * 4 + 1u);
  EXPECT_NEAR(h.tau(), 0.01, 1e-15);
  for (std::size_t c = 0; c < 4; ++c) {
    EXPECT_EQ(h.params()[h.b_img_offset() + c], 0.0);
    EXPECT_EQ(h.params()[h.b_txt_offset() + c], 0.0);
  }
  const auto mask = h.decay_mask();
  double ones = 0.0;
  for (double m : mask) ones += m;
  EXPECT_EQ(ones, (5 + 3) * 4.0);
  EXPECT_EQ(mask[h.log_tau_offset()], 0.0);
  EXPECT_EQ(mask[h.b_img_offset()], 0.0);
  EXPECT_EQ(mask[h.w_txt_offset()], 1.0);
  EXPECT_EQ(h, ProjectionHead::random(5, 3, 4, 0.01, 7));
  EXPECT_NE(h, ProjectionHead::random(5, 3, 4, 0.01, 8));
  EXPECT_THROW(ProjectionHead(0, 3, 4), UsageError);
  EXPECT_THROW(ProjectionHead::random(5, 3, 4, 0.0, 1), UsageError);
}

TEST(ProjectionHead, WeightScaleFollowsFanIn) {
  const auto h = ProjectionHead::random(64, 16, 256, 0.01, 3);
  double s = 0.0;
  for (std::size_t i = 0; i < 64 * 256; ++i) s += h.params()[i] * h.params()[i];
  EXPECT_NEAR(s / (64 * 256), 1.0 / 64.0, 0.05 / 64.0);
}

TEST(ProjectionHead, ProjectIsAffine) {
  ProjectionHead h(2, 1, 2);
  auto p = h.params();
  // W_img rows are per input coordinate.
  p[0] = 1.0;
  p[1] = 2.0;
  p[2] = 3.0;
  p[3] = 4.0;
  p[h.b_img_offset()] = 0.5;
  p[h.b_img_offset() + 1] = -0.5;
  const auto y = h.project_img(std::vector<double>{1.0, 10.0});
  EXPECT_EQ(y, (std::vector<double>{31.5, 41.5}));
  EXPECT_THROW(h.project_img(std::vector<double>{1.0}), ShapeError);
}

TEST(OptimizerStep, ClampsTemperatureAndGuardsHorizon) {
  auto h = ProjectionHead::random(3, 3, 2, 0.4, 1);
  OptimizerState st(AdamWConfig{1.0, 0.0, 0.9, 0.999, 1e-8}, h.parameter_count(), h.decay_mask());
  std::vector<double> g(h.parameter_count(), 0.0);
  g[h.log_tau_offset()] = -1.0;  // pushes tau upward
  optimizer_step(st, h, g, 0, 5);
  EXPECT_DOUBLE_EQ(h.tau(), kTauMax);
  g[h.log_tau_offset()] = 1.0;
  for (std::size_t t = 1; t < 5; ++t) optimizer_step(st, h, g, t, 5);
  EXPECT_GE(h.tau(), kTauMin);
  EXPECT_THROW(optimizer_step(st, h, g, 5, 5), UsageError);
}

TEST(BatchesPerEpoch, DropsSingletonTail) {
  EXPECT_EQ(batches_per_epoch(240, 120), 2u);
  EXPECT_EQ(batches_per_epoch(241, 120), 2u);
  EXPECT_EQ(batches_per_epoch(242, 120), 3u);
  EXPECT_EQ(batches_per_epoch(1, 120), 0u);
  EXPECT_THROW(batches_per_epoch(10, 1), UsageError);
}

TEST(TrainHead, DeterministicScheduledAndLearns) {
  MixtureSpec spec;
  spec.n_samples = 600;
  spec.holdout_samples = 0;
  spec.d_img = spec.d_txt = 8;
  const Corpus c = generate_corpus(spec).corpus;
  std::vector<const EmbeddingPair*> ptrs;
  for (const auto& r : c.records) ptrs.push_back(&r);
  TrainerConfig cfg;
  cfg.epochs = 8;
  cfg.batch_size = 64;
  cfg.d_shared = 16;
  cfg.tau_init = 0.1;
  cfg.adamw.lr = 1e-2;
  const auto a = train_head(ptrs, 8, 8, cfg);
  const auto b = train_head(ptrs, 8, 8, cfg);
  EXPECT_EQ(a.head, b.head);
  EXPECT_EQ(loss_curve_csv(a.curve), loss_curve_csv(b.curve));
  const std::size_t per = batches_per_epoch(600, 64);
  ASSERT_EQ(a.curve.size(), 8 * per);
  for (std::size_t i = 0; i < a.curve.size(); ++i) {
    EXPECT_EQ(a.curve[i].step, i);
    EXPECT_EQ(a.curve[i].epoch, i / per);
    EXPECT_NEAR(a.curve[i].lr, cosine_lr(1e-2, i, a.curve.size()), 1e-15);
  }
  double first = 0.0, last = 0.0;
  for (std::size_t i = 0; i < per; ++i) {
    first += a.curve[i].loss;
    last += a.curve[a.curve.size() - per + i].loss;
  }
  EXPECT_LT(last, first);
  cfg.seed = 1;
  EXPECT_NE(train_head(ptrs, 8, 8, cfg).head, a.head);
}

TEST(TrainHead, Errors) {
  TrainerConfig cfg;
  EXPECT_THROW(train_head({}, 4, 4, cfg), UsageError);
  Rng rng(1);
  const Corpus c = random_corpus(rng, 4, 4, 4);
  std::vector<const EmbeddingPair*> ptrs{&c.records[0], &c.records[1]};
  cfg.epochs = 0;
  EXPECT_THROW(train_head(ptrs, 4, 4, cfg), UsageError);
}

TEST(HeadCheckpoint, RoundTripAndCorruption) {
  const auto h = ProjectionHead::random(3, 4, 5, 0.02, 9);
  const Bytes bytes = encode_head(h);
  EXPECT_EQ(bytes.size(), 20 + 8 * h.parameter_count());
  EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 8), "XFICHEAD");
  EXPECT_EQ(decode_head(bytes), h);

  Bytes bad = bytes;
  bad[0] = 'Y';
  EXPECT_THROW(decode_head(bad), FormatError);
  bad = bytes;
  bad.pop_back();
  EXPECT_THROW(decode_head(bad), FormatError);
  bad = bytes;
  bad[8] = 0;  // d_img = 0
  EXPECT_THROW(decode_head(bad), FormatError);
  bad = bytes;
  const double nan = std::numeric_limits<double>::quiet_NaN();
  std::memcpy(bad.data() + 20, &nan, 8);
  EXPECT_THROW(decode_head(bad), FormatError);

  xfic::testing::TempDir dir("head");
  save_head(dir / "h.bin", h);
  EXPECT_EQ(load_head(dir / "h.bin"), h);
}

TEST(LossCurveCsv, Format) {
  const std::vector<LossRecord> curve{{0, 0, 0.001, 4.5}, {1, 0, 0.0005, 1.0 / 3.0}};
  EXPECT_EQ(loss_curve_csv(curve), "step,epoch,lr,loss\n0,0,0.001,4.5\n1,0,0.0005,0.333333333\n");
}
