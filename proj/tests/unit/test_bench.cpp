#include <gtest/gtest.h>

#include <cmath>

#include "encforge/attention.hpp"
#include "encforge/bench.hpp"
#include "encforge/errors.hpp"

using namespace encforge;

TEST(Bench, FixedSets) {
  BenchSpec s{512, LengthMode::kFixed, 64, 1};
  auto docs = gen_bench_sets(s);
  std::size_t total = 0;
  for (const auto& d : docs) {
    EXPECT_EQ(d.size(), 512u);
    total += d.size();
  }
  EXPECT_EQ(total, 32768u);
}

TEST(Bench, VariableSets) {
  BenchSpec s{512, LengthMode::kVariable, 8192, 3};
  auto docs = gen_bench_sets(s);
  double sum = 0;
  std::size_t lo = 1 << 30, hi = 0;
  for (const auto& d : docs) {
    sum += static_cast<double>(d.size());
    lo = std::min(lo, d.size());
    hi = std::max(hi, d.size());
  }
  EXPECT_NEAR(sum / 8192.0, 256.0, 10.0);
  EXPECT_GE(lo, 32u);
  EXPECT_LE(hi, 481u);
  EXPECT_EQ(gen_bench_sets(s)[17].tokens, docs[17].tokens);

  BenchSpec big{8192, LengthMode::kVariable, 256, 3};
  double s2 = 0;
  for (const auto& d : gen_bench_sets(big)) s2 += static_cast<double>(d.size());
  EXPECT_NEAR(s2 / 256.0, 4096.0, 4096.0 * 0.03);
}

TEST(Bench, PairRatioLongContext) {
  EXPECT_LT(local_global_pair_ratio(8192, 128), 0.02);
  const std::size_t h = 64, n = 8192;
  EXPECT_DOUBLE_EQ(local_global_pair_ratio(n, 128), static_cast<double>(n * (2 * h + 1) - h * (h + 1)) /
                                                        static_cast<double>(n * n));
}

TEST(Bench, PairCountsMatchEnumeration) {
  auto cfg = ModelConfig::tiny();
  cfg.window = 4;
  std::vector<std::size_t> lens{5, 9, 1, 12};
  std::vector<std::size_t> cu{0};
  for (auto l : lens) cu.push_back(cu.back() + l);
  auto got = model_pair_counts(cfg, lens);
  std::uint64_t local = attended_pairs(cu, cfg.window).size(), global = attended_pairs(cu, std::nullopt).size();
  EXPECT_EQ(got.global, global * 1);  // layer 0 of 3 is global
  EXPECT_EQ(got.local, local * 2);
}

TEST(Bench, ThroughputModes) {
  auto cfg = ModelConfig::tiny();
  cfg.max_seq = 64;
  auto m = init_megatron<float>(cfg, 1);
  auto fixed = gen_bench_sets({64, LengthMode::kFixed, 8, 2});
  BenchOptions o;
  o.runs = 2;
  auto pf = bench_throughput<float>(m, fixed, BenchMode::kPadded, o);
  auto uf = bench_throughput<float>(m, fixed, BenchMode::kUnpadded, o);
  EXPECT_EQ(pf.pairs.total(), uf.pairs.total());
  EXPECT_EQ(pf.slot_tokens, uf.slot_tokens);
  EXPECT_GT(uf.tokens_per_second_mean, 0.0);

  auto var = gen_bench_sets({64, LengthMode::kVariable, 64, 2});
  auto pv = bench_throughput<float>(m, var, BenchMode::kPadded, o);
  auto uv = bench_throughput<float>(m, var, BenchMode::kUnpadded, o);
  EXPECT_EQ(pv.slot_tokens, 64u * 64u);
  EXPECT_EQ(uv.slot_tokens, uv.real_tokens);
  EXPECT_NEAR(static_cast<double>(uv.real_tokens) / static_cast<double>(pv.slot_tokens), 0.5, 0.05);
  EXPECT_LT(uv.pairs.total(), pv.pairs.total());
  EXPECT_EQ(to_json(uv)["mode"], "unpadded");

  std::vector<Document> too_long{Document{std::vector<std::int32_t>(65, 5)}};
  EXPECT_THROW(bench_throughput<float>(m, too_long, BenchMode::kPadded, o), InputError);
}

TEST(Bench, MaxBatchSearch) {
  auto cfg = ModelConfig::base();
  const std::uint64_t one = estimate_footprint_bytes(cfg, 8192, 1);
  EXPECT_THROW(max_batch_search(cfg, 8192, one - 1), CapacityError);
  EXPECT_EQ(max_batch_search(cfg, 8192, one), 1u);
  for (std::uint64_t budget : {one * 3, one * 10 + 7, one * 33}) {
    const auto b = max_batch_search(cfg, 8192, budget);
    EXPECT_LE(estimate_footprint_bytes(cfg, 8192, b), budget);
    EXPECT_GT(estimate_footprint_bytes(cfg, 8192, b + 1), budget);
    EXPECT_GE(max_batch_search(cfg, 8192, 2 * budget), 2 * b - 1);
  }
  auto global = cfg;
  global.global_every = 1;
  const std::uint64_t budget = 80ull << 30;
  EXPECT_GT(max_batch_search(cfg, 8192, budget), max_batch_search(global, 8192, budget));
}

TEST(Bench, SpecJson) {
  BenchSpec s{1024, LengthMode::kFixed, 9, 4};
  auto back = bench_spec_from_json(to_json(s));
  EXPECT_EQ(back.max_len, 1024u);
  EXPECT_EQ(back.mode, LengthMode::kFixed);
  EXPECT_EQ(back.seed, 4u);
  EXPECT_THROW(bench_spec_from_json(Json{{"mode", "weird"}}), ConfigError);
  EXPECT_THROW(bench_spec_from_json(Json{{"extra", 1}}), ConfigError);
}
