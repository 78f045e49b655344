#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "encforge/errors.hpp"
#include "encforge/trainer.hpp"

using namespace encforge;
namespace fs = std::filesystem;

namespace {

std::vector<Document> corpus(std::size_t docs, std::uint64_t seed) {
  CorpusSpec cs;
  cs.docs = docs;
  cs.seed = seed;
  cs.lengths = {LengthDistribution::Kind::kNormal, 24, 6, 8, 32};
  return synth_corpus(cs);
}

RunConfig small_run(std::uint64_t steps) {
  RunConfig r;
  r.model = ModelConfig::tiny();
  r.model.max_seq = 32;
  r.max_seq = 32;
  r.microbatch = 2;
  r.schedule.batch_size = 4;
  r.max_steps = steps;
  r.eval_every_steps = 2;
  r.checkpoint_every_steps = 3;
  r.opt.lr_peak = 2e-3;
  r.seed = 7;
  return r;
}

fs::path fresh_dir(const std::string& name) {
  auto d = fs::temp_directory_path() / "encforge_trainer_tests" / name;
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

}  // namespace

TEST(Evaluate, UniformModelGivesLogVocab) {
  auto cfg = ModelConfig::tiny();
  EncoderModel<double> zero(cfg);
  auto held = make_heldout(corpus(20, 1), 32, 64, 3);
  auto r = evaluate<double>(zero, held);
  EXPECT_NEAR(r.val_loss, std::log(64.0), 1e-12);
  auto again = evaluate<double>(zero, held);
  EXPECT_EQ(r.val_loss, again.val_loss);
  EXPECT_EQ(r.masked_token_accuracy, again.masked_token_accuracy);
}

TEST(Evaluate, ForcedCorrectLogitsGiveFullAccuracy) {
  auto cfg = ModelConfig::tiny();
  EncoderModel<double> m(cfg);
  Tensor64 bias = m.decoder_bias();
  bias.data()[9] = 50.0;
  PackedBatch b;
  std::vector<std::int32_t> seq{1, 9, 9, 9, 2};
  b.append(seq);
  std::vector<std::size_t> pos{1, 2, 3};
  mask_positions(b, pos);
  std::vector<PackedBatch> held{b};
  EXPECT_EQ(evaluate<double>(m, held).masked_token_accuracy, 1.0);
  PackedBatch unlabeled;
  unlabeled.append(seq);
  std::vector<PackedBatch> none{unlabeled};
  EXPECT_THROW(evaluate<double>(m, none), InputError);
}

TEST(Accumulate, MicrobatchSplitMatchesFullBatch) {
  auto cfg = ModelConfig::tiny();
  auto m = init_megatron<double>(cfg, 3);
  auto packed = pack_greedy(corpus(40, 2), 32, 1);
  std::vector<PackedBatch> batch(packed.bins.begin(), packed.bins.begin() + 8);
  Pcg64Dxsm rng(4);
  for (auto& b : batch) apply_mlm_mask(b, cfg.vocab, rng);

  m.zero_grad();
  const double full = accumulate_gradients<double>(m, batch, 8);
  std::vector<std::vector<double>> g_full;
  for (const auto& p : m.parameters()) g_full.push_back(std::vector<double>(p.tensor.grad().begin(), p.tensor.grad().end()));
  m.zero_grad();
  const double split = accumulate_gradients<double>(m, batch, 2);
  EXPECT_NEAR(full, split, 1e-12);
  auto params = m.parameters();
  for (std::size_t i = 0; i < params.size(); ++i)
    for (std::size_t j = 0; j < g_full[i].size(); ++j) ASSERT_NEAR(params[i].tensor.grad()[j], g_full[i][j], 1e-6);
}

TEST(Trainer, ZeroPeakLeavesParametersBitwise) {
  auto docs = corpus(60, 5);
  auto held = make_heldout(corpus(10, 6), 32, 64, 1);
  for (DecayMode mode : {DecayMode::kIndependent, DecayMode::kScheduled}) {
    auto run = small_run(1);
    run.opt.lr_peak = 0.0;
    run.opt.decay_mode = mode;
    run.opt.weight_decay = mode == DecayMode::kIndependent ? 0.0 : 1e-2;
    auto init = init_megatron<double>(run.model, 1);
    Trainer<double> t(run, {docs}, held, init.clone());
    t.step();
    auto a = init.parameters(), b = t.model().parameters();
    for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i].tensor.values(), b[i].tensor.values());
  }
}

TEST(Trainer, TokenAccountingAndTying) {
  auto run = small_run(5);
  auto docs = corpus(60, 5);
  auto held = make_heldout(corpus(10, 6), 32, 64, 1);
  Trainer<double> t(run, {docs}, held, init_megatron<double>(run.model, 1));
  std::uint64_t sum = 0;
  while (!t.done()) {
    auto r = t.step();
    EXPECT_GT(r.tokens, 0u);
    EXPECT_LE(r.tokens, 4u * 32u);
    sum += r.tokens;
    EXPECT_EQ(t.tokens_seen(), sum);
  }
  EXPECT_EQ(t.steps_taken(), 5u);
  EXPECT_TRUE(t.model().decoder_weight().same_storage(t.model().embedding()));
  EXPECT_EQ(t.model().decoder_weight().values(), t.model().embedding().values());
}

TEST(Trainer, DeterministicLogsAndCheckpoints) {
  auto docs = corpus(60, 5);
  auto held = make_heldout(corpus(10, 6), 32, 64, 1);
  std::vector<std::string> logs, ckpts;
  for (int rep = 0; rep < 2; ++rep) {
    auto run = small_run(6);
    run.out_dir = fresh_dir("det" + std::to_string(rep)).string();
    auto res = train<double>(run, {docs}, held, init_megatron<double>(run.model, 9));
    logs.push_back(slurp(fs::path(run.out_dir) / "metrics.jsonl"));
    ASSERT_FALSE(res.checkpoints.empty());
    ckpts.push_back(slurp(res.checkpoints.back().path));
  }
  EXPECT_FALSE(logs[0].empty());
  EXPECT_EQ(logs[0], logs[1]);
  // checkpoints embed out_dir in the run config, so compare blobs past the header
  auto blob = [](const std::string& s) { return s.substr(s.find('\n')); };
  EXPECT_EQ(blob(ckpts[0]), blob(ckpts[1]));
}

TEST(Trainer, ResumeMatchesUninterruptedRun) {
  auto docs = corpus(60, 5);
  auto held = make_heldout(corpus(10, 6), 32, 64, 1);
  auto run = small_run(8);
  run.schedule.warmup_tokens = 200;
  run.schedule.stable_tokens = 400;
  run.schedule.decay_tokens = 400;

  Trainer<double> straight(run, {docs}, held, init_megatron<double>(run.model, 2));
  for (int i = 0; i < 5; ++i) straight.step();
  const auto dir = fresh_dir("resume");
  const auto path = (dir / "mid.ckpt").string();
  straight.save(path);
  const auto next = straight.step();

  auto resumed = Trainer<double>::resume(path, {docs}, held);
  EXPECT_EQ(resumed.steps_taken(), 5u);
  const auto again = resumed.step();
  EXPECT_EQ(next.loss, again.loss);
  EXPECT_EQ(next.lr, again.lr);
  EXPECT_EQ(next.tokens_seen, again.tokens_seen);
  auto a = straight.model().parameters(), b = resumed.model().parameters();
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i].tensor.values(), b[i].tensor.values());
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(straight.optimizer().v[i], resumed.optimizer().v[i]);

  ResumeOverrides o;
  o.lr_peak = 5e-5;
  o.weight_decay = 1e-6;
  auto rolled = Trainer<double>::resume(path, {docs}, held, o);
  EXPECT_EQ(rolled.config().opt.lr_peak, 5e-5);
  EXPECT_EQ(rolled.config().opt.weight_decay, 1e-6);
  EXPECT_NE(rolled.step().lr, next.lr);

  EXPECT_THROW(Trainer<double>::resume(path, {corpus(60, 99)}, held), CheckpointError);
  {
    std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(-3, std::ios::end);
    f.put('\x7f');
  }
  EXPECT_THROW(Trainer<double>::resume(path, {docs}, held), CheckpointError);
}

TEST(Trainer, NonFiniteLossNamesLastCheckpoint) {
  auto run = small_run(4);
  run.out_dir = fresh_dir("nan").string();
  run.checkpoint_every_steps = 1;
  auto docs = corpus(60, 5);
  auto held = make_heldout(corpus(10, 6), 32, 64, 1);
  auto init = init_megatron<float>(run.model, 1);
  Trainer<float> t(run, {docs}, held, init.clone());
  t.run();
  ASSERT_FALSE(t.last_checkpoint().empty());
  auto resumed = Trainer<float>::resume(t.last_checkpoint(), {docs}, held, ResumeOverrides{std::nullopt, std::nullopt, 8, std::nullopt});
  Tensor32 emb = resumed.model().embedding();
  for (auto& x : emb.data()) x = x < 0 ? -1e38f : 1e38f;  // logits overflow f32
  try {
    resumed.step();
    FAIL() << "expected a numeric error";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find(t.last_checkpoint()), std::string::npos) << e.what();
  }
}

TEST(Trainer, ConfigChecks) {
  auto docs = corpus(20, 5);
  auto held = make_heldout(corpus(10, 6), 32, 64, 1);
  auto run = small_run(2);
  run.microbatch = 8;
  EXPECT_THROW(run.validate(), ConfigError);
  run = small_run(0);
  EXPECT_THROW(run.validate(), ConfigError);
  run = small_run(2);
  auto other = ModelConfig::tiny();
  EXPECT_THROW(Trainer<double>(run, {docs}, held, EncoderModel<double>(other)), ConfigError);
  EXPECT_THROW(Trainer<double>(run, {}, held, EncoderModel<double>(run.model)), InputError);
}

TEST(Trainer, CorpusWeightsUpsampleInDecay) {
  auto run = small_run(0);
  run.schedule.stable_tokens = 400;
  run.schedule.decay_tokens = 400;
  run.corpus_weights = {1.0, 0.0};
  run.decay_corpus_weights = {0.0, 1.0};
  auto a = corpus(40, 5), b = corpus(40, 6);
  auto held = make_heldout(corpus(10, 6), 32, 64, 1);
  Trainer<double> t(run, {a, b}, held, init_megatron<double>(run.model, 1));
  t.run();
  EXPECT_GE(t.tokens_seen(), 800u);
  EXPECT_TRUE(t.in_decay_phase());
}

TEST(Averaging, SelectionRule) {
  std::vector<CheckpointRecord> recs{{"a", 1, 10, 3.0, false}, {"b", 2, 20, 1.0, false}, {"c", 3, 30, 2.5, true},
                                     {"d", 4, 40, 2.0, true},  {"e", 5, 50, 2.2, true},  {"f", 6, 60, 2.4, true},
                                     {"g", 7, 70, 2.6, true}};
  auto pick = select_for_averaging(recs);
  ASSERT_EQ(pick.size(), 4u);
  EXPECT_EQ(pick[0].path, "d");
  EXPECT_EQ(pick[1].path, "e");
  EXPECT_EQ(pick[2].path, "f");
  EXPECT_EQ(pick[3].path, "g");
  recs.back().val_loss = 0.5;
  auto pick2 = select_for_averaging(recs);
  EXPECT_EQ(pick2.size(), 3u);
  EXPECT_EQ(pick2[0].path, "g");
}

TEST(ContextExtension, PhaseBudgetsAndGeometry) {
  EXPECT_EQ(context_extension_schedule(6000, 5.0 / 6.0, 2).stable_tokens, 5000u);
  EXPECT_EQ(context_extension_schedule(6000, 5.0 / 6.0, 2).decay_tokens, 1000u);
  auto cfg = ModelConfig::tiny();
  cfg.max_seq = 16;
  auto m = init_megatron<double>(cfg, 1);
  ContextExtensionConfig ce;
  ce.run = small_run(0);
  ce.run.model = cfg;
  ce.run.max_seq = 128;
  ce.run.schedule.batch_size = 2;
  ce.run.eval_every_steps = 100;
  ce.total_tokens = 6 * 2 * 120;
  CorpusSpec cs;
  cs.docs = 20;
  cs.seed = 3;
  cs.lengths = {LengthDistribution::Kind::kNormal, 100, 10, 80, 120};
  auto docs = synth_corpus(cs);
  auto held = make_heldout(docs, 128, 64, 5);
  auto r = run_context_extension<double>(m, {docs}, held, ce);
  EXPECT_EQ(r.extended.config().max_seq, 128u);
  EXPECT_EQ(r.extended.config().theta_global, 160000.0);
  EXPECT_EQ(r.extended.config().theta_local, 10000.0);
  EXPECT_GT(r.phase_one_tokens, 0u);
  EXPECT_GT(r.phase_two_tokens, 0u);
  EXPECT_GE(r.phase_one_tokens, ce.total_tokens * 5 / 6);
}
