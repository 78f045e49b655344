#include <gtest/gtest.h>

#include <cmath>

#include "encforge/errors.hpp"
#include "encforge/model.hpp"

using namespace encforge;

namespace {

PackedBatch ragged_batch(std::span<const std::size_t> lens, std::size_t vocab, Pcg64Dxsm& rng) {
  PackedBatch b;
  for (auto n : lens) {
    std::vector<std::int32_t> seq(n);
    for (auto& t : seq) t = static_cast<std::int32_t>(kFirstRegularToken + rng.below(vocab - kFirstRegularToken));
    b.append(seq);
  }
  return b;
}

double sample_std(std::span<const double> v) {
  double m = 0, s = 0;
  for (double x : v) m += x;
  m /= v.size();
  for (double x : v) s += (x - m) * (x - m);
  return std::sqrt(s / v.size());
}

}  // namespace

TEST(Config, ShippedShapesValidate) {
  for (const auto& c : {ModelConfig::base(), ModelConfig::large(), ModelConfig::tiny(), ModelConfig::base_pretraining()})
    EXPECT_NO_THROW(c.validate());
  auto bad = ModelConfig::tiny();
  bad.vocab = 70;
  EXPECT_THROW(bad.validate(), ConfigError);
  bad = ModelConfig::tiny();
  bad.glu_expansion = 100;
  EXPECT_THROW(bad.validate(), ConfigError);
  EXPECT_EQ(ModelConfig::base().norm_eps, 1e-5);
  EXPECT_EQ(ModelConfig::base().vocab, 50368u);
}

TEST(Config, LayerTypeCensus) {
  auto count = [](const ModelConfig& c) {
    std::size_t g = 0;
    for (std::size_t l = 0; l < c.layers; ++l) g += c.is_global(l);
    return g;
  };
  EXPECT_EQ(count(ModelConfig::base()), 8u);
  EXPECT_EQ(count(ModelConfig::large()), 10u);
  auto b = ModelConfig::base();
  EXPECT_TRUE(b.is_global(0) && b.is_global(3) && b.is_global(21) && !b.is_global(1));
  EXPECT_FALSE(b.attention_spec(0).window.has_value());
  EXPECT_EQ(b.attention_spec(1).window, 128u);
  EXPECT_EQ(b.attention_spec(1).rope.theta, 10000.0);
  EXPECT_EQ(b.attention_spec(0).rope.theta, 160000.0);
}

TEST(Model, OutputShapeAndBiasCensus) {
  auto cfg = ModelConfig::tiny();
  auto m = init_megatron<double>(cfg, 1);
  Pcg64Dxsm rng(1);
  std::vector<std::size_t> lens{5, 9};
  auto logits = m.forward(ragged_batch(lens, cfg.vocab, rng));
  EXPECT_EQ(logits.shape(), (Shape{14, 64}));
  std::size_t biases = 0;
  for (const auto& p : m.parameters()) biases += p.kind == ParamKind::kBias;
  EXPECT_EQ(biases, 1u);
  EXPECT_FALSE(m.layers()[0].attn_norm.defined());
  EXPECT_TRUE(m.layers()[1].attn_norm.defined());
  EXPECT_TRUE(m.decoder_weight().same_storage(m.embedding()));
  std::size_t total = 0;
  for (const auto& p : m.parameters()) total += p.tensor.numel();
  EXPECT_EQ(total, cfg.parameter_count());
}

TEST(Model, InputErrors) {
  auto cfg = ModelConfig::tiny();
  EncoderModel<double> m(cfg);
  std::vector<std::int32_t> ids{1, 64};
  std::vector<std::size_t> cu{0, 2};
  EXPECT_THROW(m.forward(ids, cu), InputError);
  std::vector<std::int32_t> long_ids(cfg.max_seq + 1, 5);
  std::vector<std::size_t> cu2{0, long_ids.size()};
  EXPECT_THROW(m.forward(long_ids, cu2), InputError);
}

TEST(Model, PackedEqualsSeparateForwards) {
  auto cfg = ModelConfig::tiny();
  auto m = init_megatron<double>(cfg, 2);
  Pcg64Dxsm rng(2);
  std::vector<std::size_t> lens{5, 3};
  auto packed = ragged_batch(lens, cfg.vocab, rng);
  auto all = m.forward(packed);
  std::size_t offset = 0;
  for (std::size_t s = 0; s < 2; ++s) {
    std::span<const std::int32_t> ids(packed.tokens.data() + offset, lens[s]);
    std::vector<std::size_t> cu{0, lens[s]};
    auto one = m.forward(ids, cu);
    for (std::size_t i = 0; i < one.numel(); ++i) EXPECT_NEAR(one.values()[i], all.values()[offset * 64 + i], 1e-5);
    offset += lens[s];
  }
}

TEST(Init, DeterministicAndCalibrated) {
  auto a = init_megatron<float>(ModelConfig::tiny(), 7);
  auto b = init_megatron<float>(ModelConfig::tiny(), 7);
  auto pa = a.parameters(), pb = b.parameters();
  for (std::size_t i = 0; i < pa.size(); ++i) EXPECT_EQ(pa[i].tensor.values(), pb[i].tensor.values());

  auto cfg = ModelConfig::tiny();
  cfg.vocab = 2048;  // 2048 * 64 > 1e5 samples
  auto m = init_megatron<double>(cfg, 3);
  EXPECT_NEAR(sample_std(m.embedding().values()), 0.02, 0.001);
  for (double g : m.final_norm().values()) EXPECT_EQ(g, 1.0);
  for (double bias : m.decoder_bias().values()) EXPECT_EQ(bias, 0.0);

  auto deep = ModelConfig::tiny();
  deep.layers = 22;
  deep.hidden = 256;
  deep.heads = 4;
  auto md = init_megatron<double>(deep, 4);
  std::vector<double> wo;
  for (const auto& l : md.layers()) wo.insert(wo.end(), l.wo.values().begin(), l.wo.values().end());
  EXPECT_NEAR(sample_std(wo), 0.02 / std::sqrt(44.0), 0.05 * 0.02 / std::sqrt(44.0));
}

TEST(Model, EndToEndGradCheck) {
  auto cfg = ModelConfig::tiny();
  auto m = init_megatron<double>(cfg, 5);
  // Give norms and bias non-trivial values so their gradients are exercised.
  Pcg64Dxsm rng(5);
  for (auto& p : m.parameters()) {
    if (p.kind == ParamKind::kWeight) continue;
    Tensor64 h = p.tensor;
    for (auto& x : h.data()) x += 0.1 * rng.normal();
  }
  std::vector<std::size_t> lens{6, 4};
  auto batch = ragged_batch(lens, cfg.vocab, rng);
  Pcg64Dxsm mask_rng(6);
  MlmOptions o;
  o.rate = 0.5;
  apply_mlm_mask(batch, cfg.vocab, mask_rng, o);
  std::vector<Tensor64> params;
  for (const auto& p : m.parameters()) params.push_back(p.tensor);
  GradCheckOptions opts;
  opts.max_entries_per_tensor = 24;
  auto r = grad_check_params([&] { return cross_entropy_masked(m.forward(batch), batch.labels); }, params, opts);
  EXPECT_LT(r.max_rel_error, 1e-3);
  EXPECT_LT(r.directional_rel_error, 1e-4);
}

TEST(Tiling, CenterWrapMap) {
  EXPECT_EQ(center_wrap_map(4, 4), (std::vector<std::size_t>{0, 1, 2, 3}));
  // large 8, base 4: base sits at offset 2; index 6 wraps to base 0.
  EXPECT_EQ(center_wrap_map(4, 8), (std::vector<std::size_t>{2, 3, 0, 1, 2, 3, 0, 1}));
  EXPECT_THROW(center_wrap_map(4, 3), ConfigError);
}

TEST(Tiling, MatrixOracle4x6To8x10) {
  std::vector<double> base(24);
  for (std::size_t i = 0; i < 24; ++i) base[i] = static_cast<double>(i);
  auto rows = center_wrap_map(4, 8), cols = center_wrap_map(6, 10);
  auto big = tile_matrix<double>(base, 6, rows, cols);
  const std::size_t r0 = 2, c0 = 2;
  for (std::size_t i = 0; i < 8; ++i)
    for (std::size_t j = 0; j < 10; ++j) {
      // independent oracle: shift so the base block starts at (r0, c0), wrap toroidally
      const std::size_t bi = (i + 4 - r0 % 4) % 4, bj = (j + 6 - c0 % 6) % 6;
      EXPECT_EQ(big[i * 10 + j], base[bi * 6 + bj]);
    }
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 6; ++j) EXPECT_EQ(big[(i + r0) * 10 + j + c0], base[i * 6 + j]);
  // one column right of the centered block repeats the base row's first value
  EXPECT_EQ(big[(r0 + 1) * 10 + c0 + 6], base[1 * 6 + 0]);
}

TEST(Tiling, DegenerateIsIdentity) {
  auto cfg = ModelConfig::tiny();
  auto m = init_megatron<double>(cfg, 9);
  auto t = tile_from_base(m, cfg);
  auto pa = m.parameters(), pb = t.parameters();
  ASSERT_EQ(pa.size(), pb.size());
  for (std::size_t i = 0; i < pa.size(); ++i) EXPECT_EQ(pa[i].tensor.values(), pb[i].tensor.values());
  Pcg64Dxsm rng(9);
  std::vector<std::size_t> lens{7};
  auto batch = ragged_batch(lens, cfg.vocab, rng);
  EXPECT_EQ(m.forward(batch).values(), t.forward(batch).values());
}

TEST(Tiling, LargerModelRunsAndKeepsCenter) {
  auto base = ModelConfig::tiny();
  auto large = base;
  large.layers = 5;
  large.hidden = 96;
  large.heads = 3;
  large.intermediate = 128;
  large.glu_expansion = 256;
  auto m = init_megatron<double>(base, 10);
  auto t = tile_from_base(m, large);
  EXPECT_EQ(t.layers().size(), 5u);
  // wo rows are head-major: layer 3 copies base layer 0, rescaled for depth
  const auto rows = head_wrap_map(2, 32, 3, 32);
  const auto cols = center_wrap_map(64, 96);
  const double scale = std::sqrt(3.0 / 5.0);
  for (std::size_t i : {0u, 40u, 95u})
    for (std::size_t j : {0u, 17u, 95u})
      EXPECT_NEAR(t.layers()[3].wo.at({i, j}), m.layers()[0].wo.at({rows[i], cols[j]}) * scale, 1e-15);
  Pcg64Dxsm rng(10);
  std::vector<std::size_t> lens{6};
  EXPECT_EQ(t.forward(ragged_batch(lens, 64, rng)).shape(), (Shape{6, 64}));
  auto smaller = base;
  smaller.hidden = 32;
  smaller.heads = 1;
  EXPECT_THROW(tile_from_base(m, smaller), ConfigError);
}

TEST(Averaging, Identities) {
  auto cfg = ModelConfig::tiny();
  auto w = init_megatron<double>(cfg, 11);
  std::vector<EncoderModel<double>> one{w.clone()};
  auto a1 = average_checkpoints<double>(one);
  std::vector<EncoderModel<double>> two{w.clone(), w.clone()};
  auto a2 = average_checkpoints<double>(two);
  std::vector<EncoderModel<double>> half{EncoderModel<double>(cfg), w.clone()};
  auto ah = average_checkpoints<double>(half);
  auto pw = w.parameters(), p1 = a1.parameters(), p2 = a2.parameters(), ph = ah.parameters(),
       pz = EncoderModel<double>(cfg).parameters();
  for (std::size_t i = 0; i < pw.size(); ++i) {
    EXPECT_EQ(p1[i].tensor.values(), pw[i].tensor.values());
    EXPECT_EQ(p2[i].tensor.values(), pw[i].tensor.values());
    for (std::size_t j = 0; j < pw[i].tensor.numel(); ++j)
      EXPECT_EQ(ph[i].tensor.values()[j], (pz[i].tensor.values()[j] + pw[i].tensor.values()[j]) / 2);
  }
  std::vector<EncoderModel<double>> none;
  EXPECT_THROW(average_checkpoints<double>(none), InputError);
  auto other = cfg;
  other.layers = 2;
  std::vector<EncoderModel<double>> mixed{w.clone(), EncoderModel<double>(other)};
  EXPECT_THROW(average_checkpoints<double>(mixed), ConfigError);
}

TEST(ContextExtension, ThetaSwapAndLongerInputs) {
  auto cfg = ModelConfig::tiny();
  EXPECT_EQ(cfg.theta_global, 10000.0);
  EXPECT_EQ(ModelConfig::base_pretraining().theta_global, 10000.0);
  EXPECT_EQ(ModelConfig::base_pretraining().max_seq, 1024u);
  auto m = init_megatron<float>(cfg, 12);
  auto e = extend_context(m, 160000.0, cfg.max_seq * 8);
  EXPECT_EQ(e.config().theta_global, 160000.0);
  EXPECT_EQ(e.config().theta_local, 10000.0);
  EXPECT_EQ(e.config().attention_spec(1).rope.theta, 10000.0);
  EXPECT_EQ(e.config().attention_spec(0).rope.theta, 160000.0);
  std::vector<std::int32_t> ids(cfg.max_seq * 8, 7);
  std::vector<std::size_t> cu{0, ids.size()};
  EXPECT_EQ(e.forward(ids, cu).dim(0), ids.size());
  EXPECT_THROW(extend_context(m, 0.0, 256), ConfigError);
  EXPECT_THROW(extend_context(m, 1e5, 64), ConfigError);
}
