#include <gtest/gtest.h>

#include <set>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <map>

#include "encforge/batching.hpp"
#include "encforge/errors.hpp"

using namespace encforge;

namespace {

Document doc_of_length(std::size_t n) {
  Document d;
  d.tokens.assign(n, 5);
  d.tokens.front() = kClsToken;
  d.tokens.back() = kSepToken;
  return d;
}

std::vector<Document> short_variable_docs(std::size_t count, std::uint64_t seed) {
  CorpusSpec spec;
  spec.docs = count;
  spec.seed = seed;
  spec.lengths = {LengthDistribution::Kind::kNormal, 256, 64, 32, 476};
  return synth_corpus(spec);
}

}  // namespace

TEST(Pack, TwoHalvesFillOneBin) {
  std::vector<Document> docs{doc_of_length(512), doc_of_length(512)};
  auto r = pack_greedy(docs, 1024, 0);
  EXPECT_EQ(r.bins.size(), 1u);
  EXPECT_DOUBLE_EQ(r.efficiency, 1.0);
}

TEST(Pack, LongShortPairsFillTwoBins) {
  std::vector<Document> docs{doc_of_length(600), doc_of_length(600), doc_of_length(400), doc_of_length(400)};
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    auto r = pack_greedy(docs, 1024, seed);
    ASSERT_EQ(r.bins.size(), 2u);
    for (const auto& b : r.bins) {
      auto lens = b.seq_lens();
      std::sort(lens.begin(), lens.end());
      EXPECT_EQ(lens, (std::vector<std::size_t>{400, 600}));
    }
    EXPECT_NEAR(r.efficiency, 2000.0 / 2048.0, 1e-15);
  }
}

TEST(Pack, OversizedDocIsInputError) {
  std::vector<Document> docs{doc_of_length(1025)};
  EXPECT_THROW(pack_greedy(docs, 1024, 0), InputError);
}

TEST(Pack, InvariantsAndEfficiency) {
  auto docs = short_variable_docs(10000, 9);
  auto r = pack_greedy(docs, 1024, 1);
  std::vector<int> seen(docs.size(), 0);
  std::size_t total = 0;
  for (std::size_t b = 0; b < r.bins.size(); ++b) {
    EXPECT_LE(r.bins[b].num_tokens(), 1024u);
    r.bins[b].validate();
    std::size_t expect = 0;
    for (auto d : r.assignment[b]) {
      ++seen[d];
      expect += docs[d].size();
    }
    EXPECT_EQ(expect, r.bins[b].num_tokens());
    total += r.bins[b].num_tokens();
  }
  for (int s : seen) EXPECT_EQ(s, 1);
  EXPECT_DOUBLE_EQ(r.efficiency, static_cast<double>(total) / (r.bins.size() * 1024.0));
  EXPECT_GE(r.efficiency, 0.99);
  auto again = pack_greedy(docs, 1024, 1);
  EXPECT_EQ(again.assignment, r.assignment);
}

TEST(Unpad, RowLengthsGiveBoundaries) {
  TokenGrid g{2, 4, {1, 5, 2, 0, 1, 0, 0, 0}, {1, 1, 1, 0, 1, 0, 0, 0}};
  auto b = unpad(g);
  EXPECT_EQ(b.cu_seqlens, (std::vector<std::size_t>{0, 3, 4}));
  EXPECT_EQ(b.tokens, (std::vector<std::int32_t>{1, 5, 2, 1}));
  EXPECT_EQ(b.positions, (std::vector<std::size_t>{0, 1, 2, 0}));
}

TEST(Unpad, NonPrefixMaskIsInputError) {
  TokenGrid g{1, 3, {1, 0, 2}, {1, 0, 1}};
  EXPECT_THROW(unpad(g), InputError);
}

TEST(Repad, ZerosAtPadSlotsAndRoundTrip) {
  std::vector<double> vals{1, 2, 3, 4, 5};
  Tensor64 t({5, 1}, vals);
  std::vector<std::size_t> cu{0, 2, 5};
  auto r = repad(t, cu, 4);
  EXPECT_EQ(r.shape(), (Shape{2, 4, 1}));
  EXPECT_EQ(r.values(), (std::vector<double>{1, 2, 0, 0, 3, 4, 5, 0}));
  EXPECT_THROW(repad(t, cu, 2), InputError);

  Pcg64Dxsm rng(4);
  for (int trial = 0; trial < 20; ++trial) {
    TokenGrid g;
    g.rows = 1 + rng.below(5);
    g.cols = 1 + rng.below(9);
    for (std::size_t r2 = 0; r2 < g.rows; ++r2) {
      std::size_t len = 1 + rng.below(g.cols);
      for (std::size_t c = 0; c < g.cols; ++c) {
        g.ids.push_back(c < len ? static_cast<std::int32_t>(4 + rng.below(60)) : kPadToken);
        g.mask.push_back(c < len);
      }
    }
    auto b = unpad(g);
    std::vector<double> as_double(b.tokens.begin(), b.tokens.end());
    auto back = repad(Tensor64({b.num_tokens(), 1}, as_double), b.cu_seqlens, g.cols);
    for (std::size_t i = 0; i < g.ids.size(); ++i)
      EXPECT_EQ(back.values()[i], g.mask[i] ? g.ids[i] : 0.0);
    EXPECT_EQ(pad_batch(b, g.cols).ids, g.ids);
  }
}

TEST(Mlm, RateZeroLeavesInputIntact) {
  auto docs = short_variable_docs(10, 1);
  auto b = PackedBatch::from_documents(docs);
  Pcg64Dxsm rng(1);
  MlmOptions o;
  o.rate = 0.0;
  apply_mlm_mask(b, 64, rng, o);
  EXPECT_EQ(b.mlm_input, b.tokens);
  EXPECT_EQ(b.labeled_count(), 0u);
}

TEST(Mlm, StatisticsAndSpecialsUntouched) {
  auto docs = short_variable_docs(500, 2);
  auto b = PackedBatch::from_documents(docs);
  Pcg64Dxsm rng(2);
  auto st = apply_mlm_mask(b, 64, rng);
  ASSERT_GE(st.eligible, 100000u);
  EXPECT_NEAR(static_cast<double>(st.selected) / st.eligible, 0.30, 0.01);
  EXPECT_NEAR(static_cast<double>(st.masked) / st.selected, 0.8, 0.02);
  EXPECT_NEAR(static_cast<double>(st.randomized) / st.selected, 0.1, 0.02);
  EXPECT_NEAR(static_cast<double>(st.kept) / st.selected, 0.1, 0.02);
  std::size_t labeled = 0;
  for (std::size_t i = 0; i < b.num_tokens(); ++i) {
    if (is_special_token(b.tokens[i])) {
      EXPECT_EQ(b.labels[i], kIgnoreLabel);
      EXPECT_EQ(b.mlm_input[i], b.tokens[i]);
    }
    if (b.labels[i] != kIgnoreLabel) {
      ++labeled;
      EXPECT_EQ(b.labels[i], b.tokens[i]);
    } else {
      EXPECT_EQ(b.mlm_input[i], b.tokens[i]);
    }
    EXPECT_FALSE(is_special_token(b.mlm_input[i]) && b.mlm_input[i] != kMaskToken && !is_special_token(b.tokens[i]));
  }
  EXPECT_EQ(labeled, st.selected);
  b.validate();
}

TEST(Corpus, DeterministicFramedAndStructured) {
  CorpusSpec spec;
  spec.docs = 300;
  spec.seed = 5;
  auto a = synth_corpus(spec), b = synth_corpus(spec);
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i].tokens, b[i].tokens);
  std::map<std::pair<int, int>, double> bigram;
  std::map<int, double> unigram;
  double n = 0;
  for (const auto& d : a) {
    EXPECT_EQ(d.tokens.front(), kClsToken);
    EXPECT_EQ(d.tokens.back(), kSepToken);
    for (std::size_t i = 1; i + 1 < d.size(); ++i) {
      EXPECT_GE(d.tokens[i], kFirstRegularToken);
      EXPECT_LT(d.tokens[i], 64);
      if (i + 2 < d.size()) {
        bigram[{d.tokens[i], d.tokens[i + 1]}] += 1;
        unigram[d.tokens[i]] += 1;
        n += 1;
      }
    }
  }
  double h = 0;
  for (auto& [key, c] : bigram) h -= c / n * std::log(c / unigram[key.first]);
  EXPECT_LT(h, std::log(64.0) - 1.0);
}

TEST(Corpus, FileRoundTrip) {
  auto docs = short_variable_docs(20, 3);
  auto path = (std::filesystem::temp_directory_path() / "encforge_corpus_test.txt").string();
  write_corpus(path, docs);
  auto back = read_corpus(path);
  ASSERT_EQ(back.size(), docs.size());
  for (std::size_t i = 0; i < docs.size(); ++i) EXPECT_EQ(back[i].tokens, docs[i].tokens);
  std::filesystem::remove(path);
}

TEST(LongRange, KeysAndProbesAreFar) {
  LongRangeSpec spec;
  spec.filler.docs = 20;
  spec.filler.seed = 8;
  auto lr = synth_long_range_corpus(spec);
  ASSERT_EQ(lr.docs.size(), 20u);
  for (std::size_t d = 0; d < lr.docs.size(); ++d) {
    const auto& t = lr.docs[d].tokens;
    EXPECT_EQ(t.size(), spec.length);
    ASSERT_EQ(lr.probes[d].size(), spec.probes);
    for (auto p : lr.probes[d]) {
      EXPECT_GE(p - 1, spec.min_distance);
      EXPECT_EQ(t[p], t[1]);
    }
  }
  auto batch = make_probe_batch(lr.docs, lr.probes);
  EXPECT_EQ(batch.labeled_count(), 20u * spec.probes);
}

TEST(LongRange, CueMarksEveryProbeOnly) {
  LongRangeSpec spec;
  spec.filler.docs = 20;
  spec.filler.seed = 9;
  spec.cue = true;
  const auto cue = long_range_cue_token(spec);
  EXPECT_EQ(cue, 64 - 1 - 8);
  auto lr = synth_long_range_corpus(spec);
  for (std::size_t d = 0; d < lr.docs.size(); ++d) {
    const auto& t = lr.docs[d].tokens;
    std::set<std::size_t> keys{1}, cues;
    for (auto p : lr.probes[d]) {
      keys.insert(p);
      cues.insert(p - 1);
      EXPECT_EQ(t[p - 1], cue);
    }
    for (std::size_t i = 0; i < t.size(); ++i) {
      EXPECT_EQ(t[i] > cue, keys.count(i) == 1) << i;
      EXPECT_EQ(t[i] == cue, cues.count(i) == 1) << i;
    }
  }
}
