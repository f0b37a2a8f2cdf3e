#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <vector>

#include "lpsac/optim.hpp"
#include "oracle.hpp"
#include "reference.hpp"

using namespace lpsac;
using namespace lpsac::optim;

namespace {

const Quantizer kWide = Quantizer::wide();
const Quantizer kHalf(FloatFormat::fp16());

using refimpl::Quadratic;
using refimpl::RefAdam;

}  // namespace

TEST(HAdam, FirstStepIsMinusLr) {
  HAdamConfig cfg;
  HAdamState st;
  Tensor p = Tensor::scalar(0.0);
  hadam_step(st, cfg, p, Tensor::scalar(1.0), 1.0, kWide);
  EXPECT_NEAR(p[0], -cfg.lr, cfg.lr * 1e-7);

  AdamState as;
  Tensor r = Tensor::scalar(0.0);
  adam_step_reference(as, cfg, r, Tensor::scalar(1.0));
  EXPECT_NEAR(r[0], -cfg.lr, cfg.lr * 1e-7);
}

TEST(HAdam, HypotenuseAfterTwoSteps) {
  HAdamConfig cfg;
  HAdamState st;
  Tensor p = Tensor::scalar(0.0);
  hadam_step(st, cfg, p, Tensor::scalar(1.0), 1.0, kWide);
  hadam_step(st, cfg, p, Tensor::scalar(1.0), 1.0, kWide);
  EXPECT_NEAR(st.w[0], std::sqrt(0.999 * 0.001 + 0.001), 1e-15);
  EXPECT_NEAR(st.w[0], 0.0447102, 1e-7);
  EXPECT_EQ(st.t, 2);
}

TEST(HAdam, EquivalentToReferenceAdam) {
  const Quadratic f(50, 42);
  HAdamConfig cfg;
  cfg.lr = 1e-2;
  Tensor x(1, 50);
  std::vector<double> xr(50, 0.0);
  HAdamState st;
  RefAdam ref{cfg, {}, {}};
  for (int s = 0; s < 1000; ++s) {
    const Tensor g = f.grad(x);
    std::vector<double> gr(50);
    for (std::size_t i = 0; i < 50; ++i) gr[i] = f.a[i] * (xr[i] - f.c[i]);
    hadam_step(st, cfg, x, g, 1.0, kWide);
    ref.step(xr, gr);
    for (std::size_t i = 0; i < 50; ++i) {
      ASSERT_NEAR(st.w[i], std::sqrt(ref.v[i]), 1e-10);
    }
  }
  double max_diff = 0.0;
  for (std::size_t i = 0; i < 50; ++i) max_diff = std::max(max_diff, std::fabs(x[i] - xr[i]));
  EXPECT_LT(max_diff, 1e-10);
}

TEST(HAdam, LibraryReferenceAdamMatchesIndependentAdam) {
  const Quadratic f(20, 1);
  HAdamConfig cfg;
  cfg.lr = 1e-2;
  Tensor x(1, 20);
  std::vector<double> xr(20, 0.0);
  AdamState st;
  RefAdam ref{cfg, {}, {}};
  for (int s = 0; s < 300; ++s) {
    std::vector<double> gr(20);
    for (std::size_t i = 0; i < 20; ++i) gr[i] = f.a[i] * (xr[i] - f.c[i]);
    adam_step_reference(st, cfg, x, f.grad(x));
    ref.step(xr, gr);
  }
  for (std::size_t i = 0; i < 20; ++i) EXPECT_NEAR(x[i], xr[i], 1e-12);
}

TEST(HAdam, CompoundScaleInvariance) {
  const Quadratic f(30, 7);
  HAdamConfig cfg;
  cfg.lr = 1e-2;
  std::vector<Tensor> finals;
  for (double gamma : {1.0, 1024.0, 1e4}) {
    Tensor x(1, 30);
    HAdamState st;
    for (int s = 0; s < 500; ++s) hadam_step(st, cfg, x, f.grad(x, gamma), gamma, kWide);
    finals.push_back(x);
  }
  for (std::size_t i = 0; i < 30; ++i) {
    EXPECT_NEAR(finals[0][i], finals[1][i], 1e-8);
    EXPECT_NEAR(finals[0][i], finals[2][i], 1e-8);
  }
}

TEST(HAdam, ZeroGradientLeavesParameters) {
  HAdamConfig cfg;
  HAdamState st, scaled;
  AdamState as;
  Tensor p(1, 4, 0.3), r(1, 4, 0.3), h(1, 4, 0.375);
  for (int s = 0; s < 100; ++s) {
    hadam_step(st, cfg, p, Tensor(1, 4), 1.0, kWide);
    adam_step_reference(as, cfg, r, Tensor(1, 4));
    hadam_step(scaled, cfg, h, Tensor(1, 4), 1e4, kHalf);
  }
  EXPECT_EQ(p, Tensor(1, 4, 0.3));
  EXPECT_EQ(r, Tensor(1, 4, 0.3));
  EXPECT_EQ(h, Tensor(1, 4, 0.375));
}

TEST(HAdam, UnscaledEpsilonUnderflowsInHalf) {
  // eps = 1e-8 is below the smallest fp16 subnormal, so a zero gradient
  // yields 0 / 0 unless gamma lifts gamma * eps into range.
  HAdamConfig cfg;
  HAdamState st;
  Tensor p(1, 1, 0.375);
  EXPECT_EQ(kHalf(cfg.eps), 0.0);
  hadam_step(st, cfg, p, Tensor(1, 1), 1.0, kHalf);
  EXPECT_TRUE(std::isnan(p[0]));
  EXPECT_GT(kHalf(1e4 * cfg.eps), 0.0);
}

TEST(HAdam, RejectsNonFiniteGradient) {
  HAdamState st;
  Tensor p(1, 2);
  EXPECT_THROW(hadam_step(st, {}, p, Tensor(1, 2, {1.0, NAN}), 1.0, kWide), NonFiniteGradient);
  EXPECT_THROW(hadam_step(st, {}, p, Tensor(1, 3), 1.0, kWide), ShapeMismatch);
}

TEST(HAdam, CompoundScalingKeepsTinyMomentsAlive) {
  // g = 1e-6: (1 - beta1) g = 1e-7 is two subnormal steps above zero, so
  // the unscaled first moment is off by 10% or more (and exactly zero
  // without subnormals). Scaled by 1e4 it tracks the fp64 recursion.
  HAdamConfig cfg;
  const Quantizer fz(FloatFormat{5, 10, false});
  HAdamState scaled, plain, flushed;
  Tensor p1(1, 1), p2(1, 1), p3(1, 1);
  double m_ref = 0.0, plain_worst = 0.0;
  for (int s = 0; s < 200; ++s) {
    hadam_step(scaled, cfg, p1, Tensor::scalar(kHalf(1e-6 * 1e4)), 1e4, kHalf);
    hadam_step(plain, cfg, p2, Tensor::scalar(kHalf(1e-6)), 1.0, kHalf);
    hadam_step(flushed, cfg, p3, Tensor::scalar(fz(1e-6)), 1.0, fz);
    m_ref = 0.9 * m_ref + 0.1 * 1e-6;
    EXPECT_LT(std::fabs(scaled.m[0] / 1e4 - m_ref) / m_ref, 1e-2);
    plain_worst = std::max(plain_worst, std::fabs(plain.m[0] - m_ref) / m_ref);
  }
  EXPECT_GT(plain_worst, 0.1);
  EXPECT_EQ(flushed.m[0], 0.0);
}

TEST(HAdam, HypotBufferSurvivesWhereSquaredBufferUnderflows) {
  HAdamConfig cfg;
  HAdamState hs;
  AdamState as;
  Tensor p1(1, 1), p2(1, 1);
  const Tensor g = Tensor::scalar(kHalf(1e-3));
  hadam_step(hs, cfg, p1, g, 1.0, kHalf);
  adam_step(as, cfg, p2, g, 1.0, kHalf);
  EXPECT_GT(hs.w[0], 0.0);
  EXPECT_EQ(as.v[0], 0.0);  // 0.001 * 1e-6 is below the smallest subnormal
}

TEST(LossScaler, Examples) {
  LossScaler sc;
  EXPECT_EQ(scaler_scale_loss(sc, 0.5), 5000.0);
  EXPECT_EQ(scaler_scale_loss(LossScaler(1.0, 10), 0.123), 0.123);
  EXPECT_EQ(scaler_scale_loss(LossScaler(8192.0, 10), 3e-5), 8192.0 * 3e-5);
  EXPECT_NEAR(scaler_scale_loss(LossScaler(8192.0, 10), 3e-5), 0.24576, 1e-15);

  LossScaler a;
  EXPECT_TRUE(scaler_update(a, true).apply);
  EXPECT_EQ(a.gamma, 1e4);

  LossScaler b;
  EXPECT_FALSE(scaler_update(b, false).apply);
  EXPECT_EQ(b.gamma, 5e3);
  EXPECT_EQ(b.good_steps, 0);

  LossScaler c;
  for (int i = 0; i < 9999; ++i) scaler_update(c, true);
  EXPECT_EQ(c.gamma, 1e4);
  scaler_update(c, true);
  EXPECT_EQ(c.gamma, 2e4);
  EXPECT_EQ(c.good_steps, 0);
}

TEST(LossScaler, GammaStaysPowerOfTwoMultiple) {
  std::mt19937_64 rng(9);
  LossScaler sc(1e4, 5);
  for (int i = 0; i < 5000; ++i) {
    scaler_update(sc, rng() % 7 != 0);
    int e = 0;
    EXPECT_EQ(std::frexp(sc.gamma / 1e4, &e), 0.5);
  }
}

TEST(Optimizer, SkippedStepsTouchNothing) {
  OptimizerSettings s;
  s.hypot_buffer = true;
  s.scaling = ScalingMode::Compound;
  s.storage = kHalf;
  Tensor p(1, 3, 0.5);
  Optimizer opt(s, {&p});
  ASSERT_TRUE(opt.step({&p}, {Tensor(1, 3, {1.0, -2.0, 3.0})}));
  const Tensor p_before = p;
  const auto st_before = opt.hadam_states()[0];
  EXPECT_FALSE(opt.step({&p}, {Tensor(1, 3, {1.0, INFINITY, 3.0})}));
  EXPECT_EQ(p, p_before);
  EXPECT_EQ(opt.hadam_states()[0].m, st_before.m);
  EXPECT_EQ(opt.hadam_states()[0].w, st_before.w);
  EXPECT_EQ(opt.hadam_states()[0].t, 1);
  EXPECT_EQ(opt.skipped_steps(), 1);
  EXPECT_EQ(opt.loss_scale(), 5e3);
}

TEST(Optimizer, RescalesBuffersWhenGammaChanges) {
  // With a clean halving in fp64 the trajectory equals one run at a fixed
  // scale, because m and w are moved to the new scale before use.
  const Quadratic f(10, 3);
  OptimizerSettings s;
  s.hypot_buffer = true;
  s.scaling = ScalingMode::Compound;
  s.adam.lr = 1e-2;
  Tensor x(1, 10), y(1, 10);
  Optimizer a(s, {&x});
  s.init_grad_scale = 1.0;
  Optimizer b(s, {&y});
  for (int k = 0; k < 200; ++k) {
    if (k == 50) a.step({&x}, {Tensor(1, 10, NAN)});
    a.step({&x}, {f.grad(x, a.loss_scale())});
    b.step({&y}, {f.grad(y, b.loss_scale())});
  }
  EXPECT_EQ(a.loss_scale(), 5e3);
  for (std::size_t i = 0; i < 10; ++i) EXPECT_NEAR(x[i], y[i], 1e-9);
}

TEST(Optimizer, UnscaleModeMatchesUnscaledAdam) {
  const Quadratic f(10, 4);
  OptimizerSettings s;
  s.scaling = ScalingMode::Unscale;
  s.init_grad_scale = 1024.0;
  s.adam.lr = 1e-2;
  Tensor x(1, 10);
  Optimizer opt(s, {&x});
  AdamState ref;
  Tensor y(1, 10);
  for (int k = 0; k < 100; ++k) {
    opt.step({&x}, {f.grad(x, opt.loss_scale())});
    adam_step_reference(ref, s.adam, y, f.grad(y));
  }
  for (std::size_t i = 0; i < 10; ++i) EXPECT_NEAR(x[i], y[i], 1e-12);
}

TEST(Optimizer, KahanUpdatesAccumulateTinySteps) {
  OptimizerSettings s;
  s.hypot_buffer = true;
  s.storage = kHalf;
  s.adam.lr = 1e-4;
  Tensor p = Tensor::scalar(1.0), q = Tensor::scalar(1.0);
  s.kahan_updates = true;
  Optimizer with(s, {&p});
  s.kahan_updates = false;
  Optimizer without(s, {&q});
  for (int k = 0; k < 500; ++k) {
    with.step({&p}, {Tensor::scalar(1.0)});
    without.step({&q}, {Tensor::scalar(1.0)});
  }
  // hAdam's fp16 state makes each step about 7% longer than lr.
  EXPECT_NEAR(1.0 - p[0], 500 * 1e-4, 5e-3);
  EXPECT_EQ(q[0], 1.0);  // 1e-4 is below half an ulp of 1.0
}

TEST(HAdamConfig, Validation) {
  HAdamConfig c;
  EXPECT_EQ(c.lr, 1e-4);
  EXPECT_EQ(c.eps, 1e-8);
  EXPECT_EQ(c.beta1, 0.9);
  EXPECT_EQ(c.beta2, 0.999);
  c.beta2 = 1.0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = {};
  c.lr = 0.0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
}
