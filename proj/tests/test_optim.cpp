#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "ttnf/optim.hpp"

using namespace ttnf;

namespace {

Rows<double> rows_of(std::size_t r, std::size_t c, std::vector<double> v) {
  Rows<double> out(r, c);
  out.data.assign(v.begin(), v.end());
  return out;
}

}  // namespace

TEST(LrSchedule, Examples) {
  const LrSchedule s{1000, 0.05, 3e-2, 3e-4};
  EXPECT_DOUBLE_EQ(lr_at(s, 50), 3e-2);
  EXPECT_NEAR(lr_at(s, 999), 3e-4, 1e-18);
  EXPECT_EQ(lr_at(s, 0), 0.0);
  EXPECT_NEAR(lr_at(s, 25), 1.5e-2, 1e-17);
  EXPECT_THROW(lr_at(s, 1000), IndexError);
}

TEST(LrSchedule, ContinuousAtWarmupBoundary) {
  const LrSchedule s{1000, 0.05, 3e-2, 3e-4};
  const double below = 3e-2 * 49.999999 / 50.0;
  EXPECT_NEAR(lr_at(s, 49), 3e-2 * 49 / 50, 1e-17);
  EXPECT_NEAR(lr_at(s, 50), 3e-2, std::nextafter(3e-2, 1.0) - 3e-2);
  EXPECT_LE(below, lr_at(s, 50));
  // Geometric interpolation in log space after the warmup.
  for (std::size_t t = 50; t < 999; ++t) {
    const double expect = 3e-2 * std::pow(1e-2, static_cast<double>(t - 50) / 949.0);
    EXPECT_NEAR(lr_at(s, t), expect, 1e-15);
    EXPECT_GE(lr_at(s, t), lr_at(s, t + 1));
  }
}

TEST(LrSchedule, DegenerateLengths) {
  EXPECT_EQ(lr_at(LrSchedule{1, 0.05, 1.0, 0.1}, 0), 0.1);
  const LrSchedule two{2, 0.5, 1.0, 0.1};
  EXPECT_EQ(lr_at(two, 0), 0.0);
  EXPECT_EQ(lr_at(two, 1), 0.1);
  const LrSchedule none{10, 0.0, 1.0, 0.1};
  EXPECT_EQ(lr_at(none, 0), 1.0);
  EXPECT_EQ(lr_at(none, 9), 0.1);
  EXPECT_THROW((LrSchedule{10, 0.05, 0.1, 1.0}.validate()), ConfigError);
  EXPECT_THROW((LrSchedule{10, 1.0, 1.0, 0.1}.validate()), ConfigError);
}

TEST(Loss, Examples) {
  const auto p = rows_of(2, 2, {1, 2, 3, 4});
  for (auto kind : {LossKind::L1, LossKind::L2}) {
    auto [v, g] = loss_and_grad(kind, p, p);
    EXPECT_EQ(v, 0.0);
    for (double x : g.data) EXPECT_EQ(x, 0.0);
  }
  auto [v, g] = loss_and_grad(LossKind::L2, rows_of(1, 1, {1}), rows_of(1, 1, {0}));
  EXPECT_EQ(v, 1.0);
  EXPECT_EQ(g.data[0], 2.0);
  EXPECT_THROW(loss_and_grad(LossKind::L2, p, rows_of(1, 4, {0, 0, 0, 0})), ShapeError);
}

TEST(Loss, GradientMatchesFiniteDifferences) {
  std::mt19937_64 gen(1);
  std::normal_distribution<double> nd;
  Rows<double> pred(7, 3), target(7, 3);
  for (std::size_t i = 0; i < 21; ++i) {
    pred.data[i] = nd(gen);
    target.data[i] = nd(gen);
  }
  for (auto kind : {LossKind::L1, LossKind::L2}) {
    auto [v, g] = loss_and_grad(kind, pred, target);
    for (std::size_t i = 0; i < 21; ++i) {
      if (kind == LossKind::L1 && std::abs(pred.data[i] - target.data[i]) <= 1e-3) continue;
      const double h = 1e-6, x = pred.data[i];
      pred.data[i] = x + h;
      const double fp = loss_and_grad(kind, pred, target).first;
      pred.data[i] = x - h;
      const double fm = loss_and_grad(kind, pred, target).first;
      pred.data[i] = x;
      EXPECT_NEAR(g.data[i], (fp - fm) / (2 * h), 1e-6);
    }
  }
}

TEST(Loss, L1SubgradientAtZeroIsZero) {
  auto [v, g] = loss_and_grad(LossKind::L1, rows_of(1, 3, {1, 2, 3}), rows_of(1, 3, {1, 0, 5}));
  EXPECT_DOUBLE_EQ(v, 4.0 / 3.0);
  EXPECT_EQ(g.data[0], 0.0);
  EXPECT_DOUBLE_EQ(g.data[1], 1.0 / 3.0);
  EXPECT_DOUBLE_EQ(g.data[2], -1.0 / 3.0);
}

TEST(Adam, ZeroGradientIsNoOp) {
  auto tt = init_random({{3, 4}, 2}, {{1, 3, 2}}, 1.0, 1);
  const auto before = tt;
  AdamState<double> st(tt);
  const auto g = tt.make_grads();
  for (int i = 0; i < 20; ++i) adam_step(st, tt, g, 0.1);
  EXPECT_EQ(tt, before);
}

TEST(Adam, SingleScalarClosedForm) {
  // Constant gradient g: m_t = g (1 - b1^t), v_t = g^2 (1 - b2^t), so every
  // bias-corrected step is lr * g / (|g| + eps).
  FlatAdam<double> opt(1);
  std::vector<double> p{0.0};
  const std::vector<double> g{0.37};
  double expect = 0;
  for (int t = 0; t < 50; ++t) {
    opt.update(p, g, 0.01);
    expect -= 0.01 * 0.37 / (0.37 + 1e-8);
    EXPECT_NEAR(p[0], expect, 1e-14);
  }
}

TEST(Adam, FirstStepMagnitudeIsLr) {
  TensorTrain<double> tt({{2}, 1}, {{1, 1}});
  AdamState<double> st(tt);
  auto g = tt.make_grads();
  g.cores[0] = {-3.0, 1e-3};
  adam_step(st, tt, g, 0.05);
  EXPECT_NEAR(tt.core(0)[0], 0.05, 1e-9);
  EXPECT_NEAR(tt.core(0)[1], -0.05, 1e-6);
}

TEST(Adam, Deterministic) {
  auto run = [] {
    auto tt = init_random({{3, 4, 2}, 1}, {{1, 3, 2, 1}}, 1.0, 4);
    AdamState<double> st(tt);
    std::mt19937_64 gen(2);
    std::normal_distribution<double> nd;
    for (int i = 0; i < 30; ++i) {
      auto g = tt.make_grads();
      for (auto& c : g.cores)
        for (double& x : c) x = nd(gen);
      adam_step(st, tt, g, 0.01);
    }
    return tt;
  };
  EXPECT_EQ(run(), run());
}

TEST(Adam, IdentityCoresStayFixed) {
  const TtShape s{{2, 2, 2, 2, 2}, 1};
  auto tt = full_to_reduced(init_random(s, clamp_ranks(max_rank_pyramid(s), 2), 1.0, 3));
  ASSERT_TRUE(tt.any_identity());
  const auto before = tt;
  AdamState<double> st(tt);
  std::mt19937_64 gen(5);
  std::normal_distribution<double> nd;
  for (int i = 0; i < 100; ++i) {
    auto g = tt.make_grads();
    for (auto& c : g.cores)
      for (double& x : c) x = nd(gen);
    adam_step(st, tt, g, 0.1);
  }
  for (std::size_t k = 0; k < s.num_dims(); ++k) {
    if (!tt.is_identity(k)) continue;
    EXPECT_TRUE(std::equal(tt.core(k).begin(), tt.core(k).end(), before.core(k).begin()));
  }
  EXPECT_TRUE(identity_cores_valid(tt));
}

TEST(Adam, PerElementScale) {
  TensorTrain<double> tt({{2}, 1}, {{1, 1}});
  AdamState<double> st(tt);
  st.lr_scale = {{1.0, 0.0}};
  auto g = tt.make_grads();
  g.cores[0] = {1.0, 1.0};
  adam_step(st, tt, g, 0.1);
  EXPECT_NEAR(tt.core(0)[0], -0.1, 1e-9);
  EXPECT_EQ(tt.core(0)[1], 0.0);
}
