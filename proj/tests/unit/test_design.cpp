#include <gtest/gtest.h>

#include "encforge/design.hpp"
#include "encforge/errors.hpp"

using namespace encforge;

TEST(Design, TensorCoreDivisibility) {
  auto r = check_tensor_core({768, 2304, 770, 50368, 1152});
  EXPECT_EQ(r, (std::vector<bool>{true, true, false, true, true}));
  EXPECT_THROW(check_tensor_core({0}), InputError);
}

TEST(Design, TileBlocks) {
  EXPECT_EQ(tile_blocks(128, 256), 1u);
  EXPECT_EQ(tile_blocks(768, 2304), 54u);
  EXPECT_EQ(tile_blocks(1024, 5248), 168u);
  EXPECT_EQ(tile_blocks(129, 256), 2u);
  for (std::size_t m = 1; m < 600; m += 37)
    for (std::size_t n = 1; n < 900; n += 53) {
      EXPECT_LE(tile_blocks(m, n), tile_blocks(m + 1, n));
      EXPECT_LE(tile_blocks(m, n), tile_blocks(m, n + 1));
    }
}

TEST(Design, SmUtilization) {
  EXPECT_EQ(sm_utilization(108, 108), 1.0);
  EXPECT_DOUBLE_EQ(sm_utilization(109, 108), 109.0 / 216.0);
  EXPECT_NEAR(sm_utilization(54, 128), 0.4219, 5e-5);
  for (std::size_t sm : {40u, 58u, 132u})
    for (std::size_t b = 1; b < 500; ++b) {
      const double u = sm_utilization(b, sm);
      EXPECT_GT(u, 0.0);
      EXPECT_LE(u, 1.0);
      EXPECT_EQ(u == 1.0, b % sm == 0) << b << " on " << sm;
      const double mod = sm_utilization(b, sm, UtilizationModel::kModulus);
      EXPECT_GT(mod, 0.0);
      EXPECT_LE(mod, 1.0);
    }
  EXPECT_DOUBLE_EQ(sm_utilization(150, 132, UtilizationModel::kModulus), 18.0 / 132.0);
}

TEST(Design, AuditPresets) {
  const auto basket = default_gpu_basket();
  ASSERT_EQ(basket.size(), 7u);
  for (const auto& cfg : {ModelConfig::base(), ModelConfig::large()}) {
    auto r = audit_config(cfg, basket);
    EXPECT_EQ(r.tensor_core_failures, 0u);
    ASSERT_EQ(r.matrices.size(), 5u);
    EXPECT_GT(r.score, 0.0);
    EXPECT_LE(r.score, 1.0);
  }
  auto base = audit_config(ModelConfig::base(), basket);
  EXPECT_EQ(base.matrices[2].name, "mlp.wglu");
  EXPECT_EQ(base.matrices[2].block_count, 54u);
  EXPECT_EQ(audit_config(ModelConfig::large(), basket).matrices[2].block_count, 168u);
  EXPECT_TRUE(base.matrices[4].rows_ok);  // vocab 50,368
}

TEST(Design, AuditFlagsOddHidden) {
  auto cfg = ModelConfig::base();
  cfg.hidden = 770;
  auto r = audit_config(cfg, default_gpu_basket());
  EXPECT_EQ(r.tensor_core_failures, r.matrices.size());
  for (const auto& m : r.matrices) EXPECT_FALSE(m.tensor_core_ok()) << m.name;
}

TEST(Design, BasketJson) {
  const auto basket = default_gpu_basket();
  EXPECT_EQ(gpu_basket_from_json(to_json(basket)), basket);
  EXPECT_THROW(gpu_basket_from_json(Json::array()), ConfigError);
  EXPECT_THROW(gpu_basket_from_json(Json::parse(R"([{"name":"x","sm_count":0}])")), ConfigError);
  EXPECT_THROW(gpu_basket_from_json(Json::parse(R"([{"name":"x","sm_count":4,"weight":-1}])")), ConfigError);
  EXPECT_THROW(audit_config(ModelConfig::base(), {}), ConfigError);
  auto j = to_json(audit_config(ModelConfig::base(), basket));
  EXPECT_EQ(j["matrices"][1]["dims"], Json({768, 768}));
  EXPECT_EQ(j["tensor_core_failures"], 0);
}
