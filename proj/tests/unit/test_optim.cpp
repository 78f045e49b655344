#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "encforge/errors.hpp"
#include "encforge/optim.hpp"
#include "encforge/schedule.hpp"

using namespace encforge;

namespace {

// Textbook bias-corrected AdamW with multiplicative decoupled decay.
void adamw_reference(std::vector<double>& p, const std::vector<double>& g, std::vector<double>& m,
                     std::vector<double>& v, std::uint64_t t, double lr, double b1, double b2, double eps,
                     double wd) {
  for (std::size_t i = 0; i < p.size(); ++i) {
    m[i] = b1 * m[i] + (1 - b1) * g[i];
    v[i] = b2 * v[i] + (1 - b2) * g[i] * g[i];
    const double mh = m[i] / (1 - std::pow(b1, t)), vh = v[i] / (1 - std::pow(b2, t));
    p[i] = (p[i] - lr * mh / (std::sqrt(vh) + eps)) * (1 - wd);
  }
}

double rms(std::span<const double> x) {
  double s = 0;
  for (double v : x) s += v * v;
  return std::sqrt(s / x.size());
}

}  // namespace

TEST(StableAdamW, ZeroGradZeroDecayIsNoop) {
  std::vector<double> p{0.5, -1.0}, g{0, 0}, m{0, 0}, v{0, 0};
  OptConfig cfg;
  cfg.weight_decay = 0;
  auto before = p;
  stableadamw_update<double>(p, g, m, v, 1, cfg, 1e-3, true);
  EXPECT_EQ(p, before);
}

TEST(StableAdamW, ColdStartConstantGradient) {
  std::vector<double> p(16, 0.0), g(16, 0.3), m(16, 0.0), v(16, 0.0);
  OptConfig cfg;
  cfg.weight_decay = 0;
  auto info = stableadamw_update<double>(p, g, m, v, 1, cfg, 1e-3, true);
  EXPECT_NEAR(info.clip_rms, 1.0, 1e-12);
  EXPECT_EQ(info.effective_lr, 1e-3);
  for (double x : p) EXPECT_NEAR(x, -1e-3 * 0.3 / (0.3 + 1e-6), 1e-15);
}

TEST(StableAdamW, ReducesToAdamWWithoutClipping) {
  Pcg64Dxsm rng(1);
  OptConfig cfg;
  cfg.clip_threshold = std::numeric_limits<double>::infinity();
  cfg.weight_decay = 1e-2;
  std::vector<double> p(50), m(50, 0), v(50, 0), g(50);
  for (auto& x : p) x = rng.normal();
  auto rp = p, rm = m, rv = v;
  for (std::uint64_t t = 1; t <= 30; ++t) {
    for (auto& x : g) x = rng.normal() * (t % 7 == 0 ? 50.0 : 1.0);
    stableadamw_update<double>(p, g, m, v, t, cfg, 1e-2, true);
    adamw_reference(rp, g, rm, rv, t, 1e-2, cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay);
    for (std::size_t i = 0; i < p.size(); ++i) ASSERT_NEAR(p[i], rp[i], 1e-12);
  }
}

TEST(StableAdamW, SpikeIsClipped) {
  Pcg64Dxsm rng(2);
  OptConfig cfg;
  cfg.weight_decay = 0;
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<double> p(64, 0.0), m(64, 0.0), v(64, 1e-14), g(64);
    for (auto& x : g) x = rng.normal() * 10.0;
    const double lr = 1e-3;
    const auto before = p;
    auto info = stableadamw_update<double>(p, g, m, v, 1000, cfg, lr, false);
    EXPECT_GT(info.clip_rms, 1.0);
    std::vector<double> delta(64);
    for (std::size_t i = 0; i < 64; ++i) delta[i] = p[i] - before[i];
    EXPECT_LE(rms(delta), lr * cfg.clip_threshold);
    EXPECT_NEAR(info.update_rms, rms(delta), 1e-18);
  }
}

TEST(StableAdamW, DecaySkipsNormsAndBias) {
  auto m = init_megatron<double>(ModelConfig::tiny(), 1);
  auto params = m.parameters();
  OptConfig cfg;
  cfg.weight_decay = 0.1;
  OptimizerState<double> state;
  std::vector<std::vector<double>> before;
  for (auto& p : params) before.push_back(p.tensor.values());
  stableadamw_step<double>(params, state, cfg, 1e-3);  // no grads: only decay can move anything
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i].kind == ParamKind::kWeight) {
      for (std::size_t j = 0; j < before[i].size(); ++j)
        EXPECT_EQ(params[i].tensor.values()[j], before[i][j] * (1.0 - 0.1));
    } else {
      EXPECT_EQ(params[i].tensor.values(), before[i]) << params[i].name;
      EXPECT_FALSE(params[i].decays());
    }
  }
  EXPECT_EQ(state.step, 1u);
}

TEST(StableAdamW, NanGradientRefusedBeforeMutation) {
  auto a = Tensor64::parameter({2}, {1.0, 2.0});
  auto b = Tensor64::parameter({2}, {3.0, 4.0});
  a.grad()[0] = 0.5;
  b.grad()[1] = std::numeric_limits<double>::quiet_NaN();
  std::vector<ParamRef<double>> params{{"a", a, ParamKind::kWeight}, {"b", b, ParamKind::kWeight}};
  OptimizerState<double> state;
  EXPECT_THROW(stableadamw_step<double>(params, state, OptConfig{}, 1e-3), NumericError);
  EXPECT_EQ(a.values(), (std::vector<double>{1.0, 2.0}));
  EXPECT_EQ(state.step, 0u);
}

TEST(StableAdamW, ScheduledDecayWithZeroPeakIsNoop) {
  std::vector<double> p{0.5, -1.0}, g{0.1, 0.2}, m{0, 0}, v{0, 0};
  OptConfig cfg;
  cfg.lr_peak = 0.0;
  cfg.decay_mode = DecayMode::kScheduled;
  auto before = p;
  stableadamw_update<double>(p, g, m, v, 1, cfg, 0.0, true);
  EXPECT_EQ(p, before);
}

TEST(Schedule, BoundaryValues) {
  ScheduleSpec s;
  s.warmup_tokens = 3000;
  s.stable_tokens = 10000;
  s.decay_tokens = 4000;
  const double peak = 8e-4;
  EXPECT_EQ(lr_at(0, s, peak), 0.0);
  EXPECT_DOUBLE_EQ(lr_at(1500, s, peak), peak / 2);
  EXPECT_EQ(lr_at(3000, s, peak), peak);
  EXPECT_EQ(lr_at(13000, s, peak), peak);
  EXPECT_EQ(lr_at(14000, s, peak), 0.5 * peak);
  EXPECT_EQ(lr_at(17000, s, peak), 0.0);
  EXPECT_EQ(lr_at(99999, s, peak), 0.0);
  double prev = peak;
  for (std::uint64_t t = 3000; t <= 17000; t += 7) {
    const double lr = lr_at(t, s, peak);
    EXPECT_LE(lr, prev);
    EXPECT_LE(prev - lr, peak * 0.05);  // continuity at this resolution
    prev = lr;
  }
  EXPECT_NEAR(lr_at(2999, s, peak), peak, peak * 1e-3);
  EXPECT_NEAR(lr_at(13001, s, peak), peak, peak * 0.02);
  EXPECT_NEAR(lr_at(16999, s, peak), 0.0, peak * 0.02);
}

TEST(Ladder, SingleStageAndArithmetic) {
  auto one = build_batch_ladder(8, 8, 100, 6, 1);
  ASSERT_EQ(one.stages.size(), 1u);
  EXPECT_EQ(one.stages[0], (LadderStage{8, 12}));

  auto l = build_batch_ladder(1, 3, 60, 3, 1);
  ASSERT_EQ(l.stages.size(), 3u);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(l.stages[i], (LadderStage{i + 1, 10}));
  EXPECT_EQ(l.terminal_steps, 0u);

  EXPECT_EQ(batch_size_at(0, l, 1), 1u);
  EXPECT_EQ(batch_size_at(15, l, 1), 2u);
  EXPECT_EQ(batch_size_at(59, l, 1), 3u);
  EXPECT_EQ(batch_size_at(100000, l, 1), 3u);
  EXPECT_THROW(build_batch_ladder(1, 3, 5, 3, 1), ConfigError);
  EXPECT_THROW(build_batch_ladder(4, 3, 500, 3, 1), ConfigError);
}

TEST(Ladder, ScaledRecipeEndpoints) {
  const std::uint64_t tps = 1024, warmup = 50'000'000;
  auto l = build_batch_ladder(768, 4608, warmup, 6, tps, 64);
  ASSERT_EQ(l.stages.front().batch_size, 768u);
  ASSERT_EQ(l.stages.back().batch_size, 4608u);
  for (const auto& st : l.stages) EXPECT_EQ(st.steps, l.stages.front().steps);
  for (std::size_t i = 1; i < l.stages.size(); ++i) EXPECT_GT(l.stages[i].batch_size, l.stages[i - 1].batch_size);
  const std::uint64_t used = l.stage_tokens(tps);
  EXPECT_LE(used, warmup);
  const std::uint64_t terminal = l.terminal_steps * 4608 * tps;
  EXPECT_LE(used + terminal, warmup);
  EXPECT_LT(warmup, used + terminal + 4608 * tps);
}
