#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "encforge/bench.hpp"
#include "encforge/checkpoint.hpp"
#include "encforge/config_io.hpp"
#include "encforge/design.hpp"
#include "encforge/errors.hpp"
#include "encforge/trainer.hpp"

namespace fs = std::filesystem;
using namespace encforge;

namespace {

struct Globals {
  std::string config;
  std::optional<std::uint64_t> seed;
  bool f64 = false;
  std::string out;
};

struct CorpusArgs {
  std::vector<std::string> files;
  std::string heldout;
  std::size_t synthetic = 0;
  std::size_t heldout_docs = 64;

  void add(CLI::App* cmd) {
    cmd->add_option("--corpus", files, "Corpus file(s), one document of ids per line; one source each");
    cmd->add_option("--heldout", heldout, "Held-out corpus file");
    cmd->add_option("--synthetic", synthetic, "Generate this many Markov documents instead of reading files");
    cmd->add_option("--heldout-docs", heldout_docs, "Synthetic held-out documents");
  }
};

void print_json(const Json& j) { std::cout << j.dump(2) << '\n'; }

fs::path out_path(const Globals& g, const std::string& name) {
  fs::path dir = g.out.empty() ? fs::path(".") : fs::path(g.out);
  fs::create_directories(dir);
  return dir / name;
}

CorpusSpec synthetic_spec(std::size_t docs, std::size_t vocab, std::size_t max_len, std::uint64_t seed) {
  CorpusSpec cs;
  cs.vocab = vocab;
  cs.docs = docs;
  cs.seed = seed;
  const double m = static_cast<double>(max_len);
  cs.lengths = {LengthDistribution::Kind::kNormal, m / 2, m / 8, std::min<std::size_t>(32, max_len), max_len};
  return cs;
}

std::vector<std::vector<Document>> load_sources(const CorpusArgs& a, std::size_t vocab, std::size_t max_len,
                                                std::uint64_t seed) {
  std::vector<std::vector<Document>> out;
  if (a.synthetic) out.push_back(synth_corpus(synthetic_spec(a.synthetic, vocab, max_len, seed)));
  for (const auto& f : a.files) out.push_back(read_corpus(f));
  if (out.empty()) throw InputError("no corpus: pass --corpus or --synthetic");
  return out;
}

std::vector<Document> load_heldout_docs(const CorpusArgs& a, std::size_t vocab, std::size_t max_len,
                                        std::uint64_t seed) {
  if (!a.heldout.empty()) return read_corpus(a.heldout);
  if (a.synthetic == 0) throw InputError("no held-out data: pass --heldout or --synthetic");
  // same chain and stream as the training corpus, continued past its end
  auto all = synth_corpus(synthetic_spec(a.synthetic + a.heldout_docs, vocab, max_len, seed));
  return {all.end() - static_cast<std::ptrdiff_t>(a.heldout_docs), all.end()};
}

RunConfig load_run(const Globals& g) {
  RunConfig r = g.config.empty() ? RunConfig{} : run_config_from_json(read_json_file(g.config));
  if (g.seed) r.seed = *g.seed;
  if (!g.out.empty()) r.out_dir = g.out;
  return r;
}

Json metrics_json(const Metrics& m) {
  return {{"step", m.step},           {"tokens_seen", m.tokens_seen},
          {"train_loss", m.train_loss}, {"val_loss", m.val_loss},
          {"masked_token_accuracy", m.masked_token_accuracy}, {"lr_now", m.lr_now},
          {"batch_size_now", m.batch_size_now}};
}

bool want_f64(const Globals& g, const std::string& ckpt) {
  return g.f64 || (!ckpt.empty() && checkpoint_dtype(ckpt) == "f64");
}

// ---- commands ---------------------------------------------------------------

struct TrainArgs {
  CorpusArgs corpus;
  std::string resume;
  std::optional<double> lr;
  std::optional<double> weight_decay;
  std::optional<std::uint64_t> max_steps;
};

template <typename T>
int cmd_train(const Globals& g, const TrainArgs& a) {
  if (!a.resume.empty()) {
    const Json header = read_checkpoint_header(a.resume);
    const RunConfig stored = run_config_from_json(header.at("extra").at("run"));
    auto sources = load_sources(a.corpus, stored.model.vocab, stored.max_seq, stored.seed);
    auto held = make_heldout(load_heldout_docs(a.corpus, stored.model.vocab, stored.max_seq, stored.seed),
                             stored.max_seq, stored.model.vocab, stored.seed, stored.mlm);
    ResumeOverrides o{a.lr, a.weight_decay, a.max_steps, g.out.empty() ? std::nullopt : std::optional(g.out)};
    auto t = Trainer<T>::resume(a.resume, std::move(sources), std::move(held), o);
    t.run();
    print_json({{"final", metrics_json(t.metrics().back())}, {"checkpoint", t.last_checkpoint()}});
    return 0;
  }
  RunConfig run = load_run(g);
  if (a.lr) run.opt.lr_peak = *a.lr;
  if (a.weight_decay) run.opt.weight_decay = *a.weight_decay;
  if (a.max_steps) run.max_steps = *a.max_steps;
  auto sources = load_sources(a.corpus, run.model.vocab, run.max_seq, run.seed);
  auto held = make_heldout(load_heldout_docs(a.corpus, run.model.vocab, run.max_seq, run.seed), run.max_seq,
                           run.model.vocab, run.seed, run.mlm);
  auto res = train<T>(run, std::move(sources), std::move(held), init_megatron<T>(run.model, run.seed));
  Json ck = Json::array();
  for (const auto& c : res.checkpoints) ck.push_back(c.path);
  print_json({{"final", metrics_json(res.metrics.back())}, {"checkpoints", ck}});
  return 0;
}

struct EvalArgs {
  std::string ckpt;
  CorpusArgs corpus;
  std::size_t capacity = 0;
};

template <typename T>
int cmd_eval(const Globals& g, const EvalArgs& a) {
  auto ck = load_checkpoint<T>(a.ckpt);
  const auto& cfg = ck.model.config();
  const std::size_t cap = a.capacity ? a.capacity : std::min<std::size_t>(cfg.max_seq, 1024);
  const std::uint64_t seed = g.seed.value_or(0);
  std::vector<Document> docs;
  for (const auto& s : load_sources(a.corpus, cfg.vocab, cap, seed)) docs.insert(docs.end(), s.begin(), s.end());
  auto held = make_heldout(docs, cap, cfg.vocab, seed);
  auto r = evaluate<T>(ck.model, held);
  print_json({{"val_loss", r.val_loss}, {"masked_token_accuracy", r.masked_token_accuracy}, {"labeled", r.labeled},
              {"seed", seed}});
  return 0;
}

struct PackArgs {
  CorpusArgs corpus;
  std::size_t capacity = 1024;
  std::size_t pool_bins = 8;
  std::size_t vocab = 64;
};

int cmd_pack(const Globals& g, const PackArgs& a) {
  const std::uint64_t seed = g.seed.value_or(0);
  std::vector<Document> docs;
  for (const auto& s : load_sources(a.corpus, a.vocab, a.capacity / 2, seed)) docs.insert(docs.end(), s.begin(), s.end());
  auto r = pack_greedy(docs, a.capacity, seed, {a.pool_bins});
  Json out{{"documents", docs.size()}, {"bins", r.bins.size()}, {"capacity", a.capacity},
           {"efficiency", r.efficiency}, {"seed", seed}};
  if (!g.out.empty()) {
    std::vector<Document> packed;
    for (const auto& b : r.bins) packed.push_back({b.tokens});
    const auto p = out_path(g, "packed.txt");
    write_corpus(p.string(), packed);
    out["output"] = p.string();
  }
  print_json(out);
  return 0;
}

struct DesignArgs {
  std::string preset;
  std::string basket;
  std::string utilization = "occupancy";
};

int cmd_design(const Globals& g, const DesignArgs& a) {
  ModelConfig cfg = !g.config.empty() ? model_config_from_json(read_json_file(g.config))
                                      : model_config_preset(a.preset.empty() ? "base" : a.preset);
  auto basket = a.basket.empty() ? default_gpu_basket() : gpu_basket_from_json(read_json_file(a.basket));
  if (a.utilization != "occupancy" && a.utilization != "modulus")
    throw ConfigError("--utilization must be occupancy or modulus");
  auto report = audit_config(cfg, basket,
                             a.utilization == "occupancy" ? UtilizationModel::kOccupancy : UtilizationModel::kModulus);
  std::cout << format_report(report);
  Json j = to_json(report);
  j["config"] = to_json(cfg);
  if (!g.out.empty()) {
    const auto p = out_path(g, "design_report.json");
    write_json_file(p.string(), j);
    std::cout << "report: " << p.string() << '\n';
  } else {
    print_json(j);
  }
  return report.tensor_core_failures == 0 ? 0 : 2;
}

struct TileArgs {
  std::string from;
  std::string to;
  bool no_depth_scaling = false;
};

template <typename T>
int cmd_tile(const Globals& g, const TileArgs& a) {
  auto base = load_checkpoint<T>(a.from);
  const ModelConfig large = model_config_from_json(read_json_file(a.to));
  auto tiled = tile_from_base<T>(base.model, large, {!a.no_depth_scaling});
  const auto p = out_path(g, "tiled.ckpt");
  save_checkpoint<T>(p.string(), tiled, nullptr, {{"tiled_from", a.from}});
  print_json({{"output", p.string()}, {"parameters", large.parameter_count()}});
  return 0;
}

struct ExtendArgs {
  std::string from;
  double theta = 160000.0;
  std::size_t max_seq = 0;
  std::uint64_t tokens = 0;
  CorpusArgs corpus;
};

template <typename T>
int cmd_extend(const Globals& g, const ExtendArgs& a) {
  auto ck = load_checkpoint<T>(a.from);
  const auto p = out_path(g, "extended.ckpt");
  if (a.tokens == 0) {
    auto ext = extend_context(ck.model, a.theta, a.max_seq ? a.max_seq : 8 * ck.model.config().max_seq);
    save_checkpoint<T>(p.string(), ext);
    print_json({{"output", p.string()}, {"model", to_json(ext.config())}});
    return 0;
  }
  ContextExtensionConfig ce;
  ce.theta_global = a.theta;
  ce.max_seq = a.max_seq;
  ce.run = load_run(g);
  ce.total_tokens = a.tokens;
  const std::size_t new_max = a.max_seq ? a.max_seq : 8 * ck.model.config().max_seq;
  if (g.config.empty()) ce.run.max_seq = new_max;
  const auto& vocab = ck.model.config().vocab;
  auto sources = load_sources(a.corpus, vocab, ce.run.max_seq, ce.run.seed);
  auto held = make_heldout(load_heldout_docs(a.corpus, vocab, ce.run.max_seq, ce.run.seed), ce.run.max_seq, vocab,
                           ce.run.seed, ce.run.mlm);
  auto r = run_context_extension<T>(ck.model, std::move(sources), std::move(held), ce);
  save_checkpoint<T>(p.string(), r.model);
  print_json({{"output", p.string()},
              {"phase_one_tokens", r.phase_one_tokens},
              {"phase_two_tokens", r.phase_two_tokens},
              {"final", metrics_json(r.metrics.back())}});
  return 0;
}

struct BenchArgs {
  std::string preset = "tiny";
  std::size_t runs = 10;
  std::size_t rows = 8;
};

template <typename T>
int cmd_bench(const Globals& g, const BenchArgs& a) {
  BenchSpec spec = g.config.empty() ? BenchSpec{} : bench_spec_from_json(read_json_file(g.config));
  if (g.seed) spec.seed = *g.seed;
  ModelConfig cfg = model_config_preset(a.preset);
  cfg.max_seq = std::max(cfg.max_seq, spec.max_len);
  auto model = init_megatron<T>(cfg, spec.seed);
  auto docs = gen_bench_sets(spec);
  BenchOptions o{a.runs, a.rows, spec.max_len};
  Json results = Json::array();
  double rate[2] = {0, 0};
  for (BenchMode mode : {BenchMode::kPadded, BenchMode::kUnpadded}) {
    auto r = bench_throughput<T>(model, docs, mode, o);
    rate[mode == BenchMode::kUnpadded] = r.tokens_per_second_mean;
    results.push_back(to_json(r));
  }
  Json out{{"spec", to_json(spec)},
           {"seed", spec.seed},
           {"model", to_json(cfg)},
           {"results", results},
           {"unpadded_speedup", rate[1] / rate[0]},
           {"local_global_pair_ratio", local_global_pair_ratio(spec.max_len, cfg.window)}};
  if (!g.out.empty()) write_json_file(out_path(g, "bench_report.json").string(), out);
  print_json(out);
  return 0;
}

struct AvgArgs {
  std::vector<std::string> ckpts;
};

template <typename T>
int cmd_avg(const Globals& g, const AvgArgs& a) {
  std::vector<EncoderModel<T>> models;
  for (const auto& c : a.ckpts) models.push_back(load_checkpoint<T>(c).model);
  auto avg = average_checkpoints<T>(models);
  const auto p = out_path(g, "averaged.ckpt");
  save_checkpoint<T>(p.string(), avg, nullptr, {{"averaged", a.ckpts}});
  print_json({{"output", p.string()}, {"inputs", a.ckpts.size()}});
  return 0;
}

struct GenArgs {
  std::size_t docs = 1000;
  std::size_t vocab = 64;
  double mean = 64, stddev = 16;
  std::size_t min = 32, max = 128;
  bool long_range = false;
  std::size_t length = 1000;
};

int cmd_gen(const Globals& g, const GenArgs& a) {
  const std::uint64_t seed = g.seed.value_or(0);
  std::vector<Document> docs;
  if (a.long_range) {
    LongRangeSpec s;
    s.filler.vocab = a.vocab;
    s.filler.docs = a.docs;
    s.filler.seed = seed;
    s.length = a.length;
    docs = synth_long_range_corpus(s).docs;
  } else {
    docs = synth_corpus({a.vocab, a.docs, {LengthDistribution::Kind::kNormal, a.mean, a.stddev, a.min, a.max}, seed});
  }
  const auto p = out_path(g, "corpus.txt");
  write_corpus(p.string(), docs);
  print_json({{"output", p.string()}, {"documents", docs.size()}, {"seed", seed}});
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"encforge: encoder pretraining toolkit"};
  app.require_subcommand(1);
  Globals g;
  app.add_option("--config", g.config, "JSON config for the command");
  app.add_option("--seed", g.seed, "Seed override");
  app.add_flag("--f64", g.f64, "Run in 64-bit precision");
  app.add_option("--out", g.out, "Output directory");
  app.fallthrough();

  TrainArgs train_a;
  auto* train_cmd = app.add_subcommand("train", "Train an encoder with MLM");
  train_a.corpus.add(train_cmd);
  train_cmd->add_option("--resume", train_a.resume, "Continue from a checkpoint");
  train_cmd->add_option("--lr", train_a.lr, "Override peak learning rate");
  train_cmd->add_option("--weight-decay", train_a.weight_decay, "Override weight decay");
  train_cmd->add_option("--max-steps", train_a.max_steps, "Override step limit");

  EvalArgs eval_a;
  auto* eval_cmd = app.add_subcommand("eval", "Masked-token loss and accuracy of a checkpoint");
  eval_cmd->add_option("--ckpt", eval_a.ckpt)->required();
  eval_a.corpus.add(eval_cmd);
  eval_cmd->add_option("--capacity", eval_a.capacity, "Packing capacity");

  PackArgs pack_a;
  auto* pack_cmd = app.add_subcommand("pack", "Greedy sequence packing");
  pack_a.corpus.add(pack_cmd);
  pack_cmd->add_option("--capacity", pack_a.capacity);
  pack_cmd->add_option("--pool-bins", pack_a.pool_bins);
  pack_cmd->add_option("--vocab", pack_a.vocab, "Vocabulary for --synthetic");

  DesignArgs design_a;
  auto* design_cmd = app.add_subcommand("design-check", "Audit model dimensions against a GPU basket");
  design_cmd->add_option("--preset", design_a.preset, "Model preset when no --config is given");
  design_cmd->add_option("--basket", design_a.basket, "GPU basket JSON");
  design_cmd->add_option("--utilization", design_a.utilization, "occupancy or modulus");

  TileArgs tile_a;
  auto* tile_cmd = app.add_subcommand("tile-init", "Initialize a larger model by tiling a smaller checkpoint");
  tile_cmd->add_option("--from", tile_a.from)->required();
  tile_cmd->add_option("--to", tile_a.to, "Target model config JSON")->required();
  tile_cmd->add_flag("--no-depth-scaling", tile_a.no_depth_scaling);

  ExtendArgs ext_a;
  auto* ext_cmd = app.add_subcommand("extend", "Context extension: theta swap, optional long training");
  ext_cmd->add_option("--from", ext_a.from)->required();
  ext_cmd->add_option("--theta", ext_a.theta);
  ext_cmd->add_option("--max-seq", ext_a.max_seq, "New max_seq, default 8x");
  ext_cmd->add_option("--tokens", ext_a.tokens, "Long-phase token budget; 0 only swaps geometry");
  ext_a.corpus.add(ext_cmd);

  BenchArgs bench_a;
  auto* bench_cmd = app.add_subcommand("bench", "Padded vs unpadded throughput on synthetic sets");
  bench_cmd->add_option("--model", bench_a.preset, "Model preset");
  bench_cmd->add_option("--runs", bench_a.runs);
  bench_cmd->add_option("--rows", bench_a.rows, "Documents per batch");

  AvgArgs avg_a;
  auto* avg_cmd = app.add_subcommand("avg-ckpt", "Average checkpoints");
  avg_cmd->add_option("checkpoints", avg_a.ckpts)->required();

  GenArgs gen_a;
  auto* gen_cmd = app.add_subcommand("gen-corpus", "Write a synthetic Markov corpus");
  gen_cmd->add_option("--docs", gen_a.docs);
  gen_cmd->add_option("--vocab", gen_a.vocab);
  gen_cmd->add_option("--mean", gen_a.mean);
  gen_cmd->add_option("--std", gen_a.stddev);
  gen_cmd->add_option("--min", gen_a.min);
  gen_cmd->add_option("--max", gen_a.max);
  gen_cmd->add_flag("--long-range", gen_a.long_range, "Plant long-distance copy patterns");
  gen_cmd->add_option("--length", gen_a.length, "Document length for --long-range");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : static_cast<int>(ExitCode::kConfig);
  }

  try {
    if (*train_cmd) {
      const bool f64 = g.f64 || (!train_a.resume.empty() && checkpoint_dtype(train_a.resume) == "f64");
      return f64 ? cmd_train<double>(g, train_a) : cmd_train<float>(g, train_a);
    }
    if (*eval_cmd) return want_f64(g, eval_a.ckpt) ? cmd_eval<double>(g, eval_a) : cmd_eval<float>(g, eval_a);
    if (*pack_cmd) return cmd_pack(g, pack_a);
    if (*design_cmd) return cmd_design(g, design_a);
    if (*tile_cmd) return want_f64(g, tile_a.from) ? cmd_tile<double>(g, tile_a) : cmd_tile<float>(g, tile_a);
    if (*ext_cmd) return want_f64(g, ext_a.from) ? cmd_extend<double>(g, ext_a) : cmd_extend<float>(g, ext_a);
    if (*bench_cmd) return g.f64 ? cmd_bench<double>(g, bench_a) : cmd_bench<float>(g, bench_a);
    if (*avg_cmd) {
      return want_f64(g, avg_a.ckpts.front()) ? cmd_avg<double>(g, avg_a) : cmd_avg<float>(g, avg_a);
    }
    if (*gen_cmd) return cmd_gen(g, gen_a);
  } catch (const Error& e) {
    std::cerr << e.what() << '\n';
    return static_cast<int>(e.exit_code());
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return static_cast<int>(ExitCode::kInput);
  }
  return 0;
}
