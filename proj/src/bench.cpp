#include "encforge/bench.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>

#include "encforge/attention.hpp"
#include "encforge/errors.hpp"

namespace encforge {

void BenchSpec::validate() const {
  if (docs == 0) throw ConfigError("bench needs at least one document");
  if (mode == LengthMode::kVariable && std::floor(0.94 * static_cast<double>(max_len)) < 32)
    throw ConfigError("variable bench sets need max_len >= 35");
  if (max_len < 3) throw ConfigError("bench max_len must be at least 3");
}

LengthDistribution BenchSpec::lengths() const {
  const double m = static_cast<double>(max_len);
  if (mode == LengthMode::kFixed) return {LengthDistribution::Kind::kFixed, m, 0, max_len, max_len};
  return {LengthDistribution::Kind::kNormal, m / 2, m / 8, 32, static_cast<std::size_t>(std::floor(0.94 * m))};
}

std::vector<Document> gen_bench_sets(const BenchSpec& spec) {
  spec.validate();
  CorpusSpec cs;
  cs.vocab = spec.vocab;
  cs.docs = spec.docs;
  cs.seed = spec.seed;
  cs.lengths = spec.lengths();
  return synth_corpus(cs);
}

PairCounts model_pair_counts(const ModelConfig& config, std::span<const std::size_t> seq_lens) {
  PairCounts out;
  const std::uint64_t local = attention_pair_count(seq_lens, config.window);
  const std::uint64_t global = attention_pair_count(seq_lens, std::nullopt);
  for (std::size_t l = 0; l < config.layers; ++l) {
    if (config.is_global(l))
      out.global += global;
    else
      out.local += local;
  }
  return out;
}

double local_global_pair_ratio(std::size_t len, std::size_t window) {
  const std::size_t lens[] = {len};
  return static_cast<double>(attention_pair_count(lens, window)) /
         static_cast<double>(attention_pair_count(lens, std::nullopt));
}

namespace {

struct BatchInput {
  std::vector<std::int32_t> ids;
  std::vector<std::size_t> cu{0};
};

std::vector<BatchInput> build_inputs(std::span<const Document> docs, BenchMode mode, std::size_t rows,
                                     std::size_t pad_to, std::vector<std::size_t>& computed_lens) {
  std::vector<BatchInput> out;
  for (std::size_t start = 0; start < docs.size(); start += rows) {
    BatchInput b;
    for (std::size_t d = start; d < std::min(docs.size(), start + rows); ++d) {
      const auto& t = docs[d].tokens;
      b.ids.insert(b.ids.end(), t.begin(), t.end());
      std::size_t len = t.size();
      if (mode == BenchMode::kPadded) {
        b.ids.resize(b.ids.size() + (pad_to - len), kPadToken);
        len = pad_to;
      }
      b.cu.push_back(b.cu.back() + len);
      computed_lens.push_back(len);
    }
    out.push_back(std::move(b));
  }
  return out;
}

}  // namespace

template <typename T>
BenchResult bench_throughput(const EncoderModel<T>& model, std::span<const Document> docs, BenchMode mode,
                             const BenchOptions& options) {
  if (docs.empty()) throw InputError("bench needs documents");
  if (options.runs == 0 || options.rows_per_batch == 0) throw ConfigError("bench runs and rows must be positive");
  const std::size_t pad_to = options.pad_to ? options.pad_to : model.config().max_seq;
  BenchResult r;
  r.mode = mode;
  r.runs = options.runs;
  for (const auto& d : docs) {
    if (d.size() > pad_to || d.size() > model.config().max_seq)
      throw InputError("document of " + std::to_string(d.size()) + " tokens exceeds the bench row length");
    r.real_tokens += d.size();
  }
  std::vector<std::size_t> lens;
  const auto inputs = build_inputs(docs, mode, options.rows_per_batch, pad_to, lens);
  for (auto l : lens) r.slot_tokens += l;
  r.pairs = model_pair_counts(model.config(), lens);

  NoGradGuard no_grad;
  auto pass = [&] {
    for (const auto& b : inputs) (void)model.forward(b.ids, b.cu);
  };
  pass();
  std::vector<double> rates;
  for (std::size_t i = 0; i < options.runs; ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    pass();
    const std::chrono::duration<double> dt = std::chrono::steady_clock::now() - t0;
    rates.push_back(static_cast<double>(r.real_tokens) / std::max(dt.count(), 1e-12));
  }
  double mean = 0;
  for (double x : rates) mean += x;
  mean /= static_cast<double>(rates.size());
  double var = 0;
  for (double x : rates) var += (x - mean) * (x - mean);
  r.tokens_per_second_mean = mean;
  r.tokens_per_second_std = rates.size() > 1 ? std::sqrt(var / static_cast<double>(rates.size() - 1)) : 0.0;
  return r;
}

std::uint64_t estimate_footprint_bytes(const ModelConfig& config, std::size_t seq_len, std::size_t batch,
                                       std::size_t bytes_per_value) {
  if (seq_len == 0) throw ConfigError("seq_len must be positive");
  const std::size_t lens[] = {seq_len};
  const auto pairs = model_pair_counts(config, lens);
  const std::uint64_t n = seq_len;
  std::uint64_t per_seq = config.heads * pairs.total();                                 // attention scores
  per_seq += config.layers * n * (config.glu_expansion + config.intermediate);          // GeGLU input and product
  per_seq += config.layers * n * (6 * config.hidden);                                   // norm, qkv, attn out, residual
  per_seq += n * config.vocab;                                                          // logits
  return (config.parameter_count() + static_cast<std::uint64_t>(batch) * per_seq) * bytes_per_value;
}

std::size_t max_batch_search(const ModelConfig& config, std::size_t seq_len, std::uint64_t memory_budget_bytes,
                             std::size_t bytes_per_value) {
  auto fits = [&](std::size_t b) { return estimate_footprint_bytes(config, seq_len, b, bytes_per_value) <= memory_budget_bytes; };
  if (!fits(1))
    throw CapacityError("budget of " + std::to_string(memory_budget_bytes) + " bytes is below one sequence (" +
                        std::to_string(estimate_footprint_bytes(config, seq_len, 1, bytes_per_value)) + ")");
  std::size_t lo = 1, hi = 2;
  while (fits(hi)) {
    lo = hi;
    if (hi > (std::size_t{1} << 40)) return hi;
    hi *= 2;
  }
  while (hi - lo > 1) {
    const std::size_t mid = lo + (hi - lo) / 2;
    (fits(mid) ? lo : hi) = mid;
  }
  return lo;
}

const char* to_string(BenchMode mode) { return mode == BenchMode::kPadded ? "padded" : "unpadded"; }

Json to_json(const BenchSpec& spec) {
  return {{"max_len", spec.max_len},
          {"mode", spec.mode == LengthMode::kFixed ? "fixed" : "variable"},
          {"docs", spec.docs},
          {"seed", spec.seed},
          {"vocab", spec.vocab}};
}

BenchSpec bench_spec_from_json(const Json& j) {
  BenchSpec s;
  if (!j.is_object()) throw ConfigError("bench spec must be an object");
  try {
    for (const auto& [k, v] : j.items()) {
      if (k == "max_len")
        s.max_len = v.get<std::size_t>();
      else if (k == "mode") {
        const auto m = v.get<std::string>();
        if (m != "fixed" && m != "variable") throw ConfigError("bench mode must be fixed or variable");
        s.mode = m == "fixed" ? LengthMode::kFixed : LengthMode::kVariable;
      } else if (k == "docs")
        s.docs = v.get<std::size_t>();
      else if (k == "seed")
        s.seed = v.get<std::uint64_t>();
      else if (k == "vocab")
        s.vocab = v.get<std::size_t>();
      else
        throw ConfigError("unknown bench field: " + k);
    }
  } catch (const Json::exception& e) {
    throw ConfigError(std::string("bench spec: ") + e.what());
  }
  s.validate();
  return s;
}

Json to_json(const BenchResult& r) {
  return {{"mode", to_string(r.mode)},
          {"runs", r.runs},
          {"tokens_per_second", {{"mean", r.tokens_per_second_mean}, {"std", r.tokens_per_second_std}}},
          {"real_tokens", r.real_tokens},
          {"slot_tokens", r.slot_tokens},
          {"pair_counts", {{"local", r.pairs.local}, {"global", r.pairs.global}, {"total", r.pairs.total()}}}};
}

template BenchResult bench_throughput<float>(const EncoderModel<float>&, std::span<const Document>, BenchMode,
                                             const BenchOptions&);
template BenchResult bench_throughput<double>(const EncoderModel<double>&, std::span<const Document>, BenchMode,
                                              const BenchOptions&);

}  // namespace encforge
