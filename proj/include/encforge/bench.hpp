#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "encforge/batching.hpp"
#include "encforge/config_io.hpp"
#include "encforge/model.hpp"

namespace encforge {

enum class LengthMode { kFixed, kVariable };
enum class BenchMode { kPadded, kUnpadded };

struct BenchSpec {
  std::size_t max_len = 512;
  LengthMode mode = LengthMode::kVariable;
  std::size_t docs = 64;
  std::uint64_t seed = 0;
  std::size_t vocab = 64;

  void validate() const;
  /// Fixed: every doc is max_len. Variable: Normal(max_len/2, max_len/8) clipped to [32, floor(0.94 max_len)].
  LengthDistribution lengths() const;
};

std::vector<Document> gen_bench_sets(const BenchSpec& spec);

struct PairCounts {
  std::uint64_t local = 0;   // summed over local layers
  std::uint64_t global = 0;  // summed over global layers
  std::uint64_t total() const { return local + global; }
};

/// Pairs visited by every layer of `config` for the given sequence lengths.
PairCounts model_pair_counts(const ModelConfig& config, std::span<const std::size_t> seq_lens);

/// attention_pair_count(len, window) / attention_pair_count(len, global).
double local_global_pair_ratio(std::size_t len, std::size_t window);

struct BenchOptions {
  std::size_t runs = 10;
  std::size_t rows_per_batch = 8;
  /// Padded row length; 0 means the model's max_seq.
  std::size_t pad_to = 0;
};

struct BenchResult {
  BenchMode mode = BenchMode::kUnpadded;
  std::size_t runs = 0;
  double tokens_per_second_mean = 0;
  double tokens_per_second_std = 0;
  std::uint64_t real_tokens = 0;  // per pass
  std::uint64_t slot_tokens = 0;  // positions actually computed per pass
  PairCounts pairs;
};

/// One untimed warmup pass, then `runs` timed forward passes. Rates count real tokens only.
template <typename T>
BenchResult bench_throughput(const EncoderModel<T>& model, std::span<const Document> docs, BenchMode mode,
                             const BenchOptions& options = {});

/// Parameters plus per-sequence activations: attention scores under each layer's mask,
/// GeGLU intermediates, residual-stream buffers and logits.
std::uint64_t estimate_footprint_bytes(const ModelConfig& config, std::size_t seq_len, std::size_t batch,
                                       std::size_t bytes_per_value = 4);

/// Largest batch fitting the budget; doubling then binary search. CapacityError below one sequence.
std::size_t max_batch_search(const ModelConfig& config, std::size_t seq_len, std::uint64_t memory_budget_bytes,
                             std::size_t bytes_per_value = 4);

Json to_json(const BenchSpec& spec);
BenchSpec bench_spec_from_json(const Json& j);
Json to_json(const BenchResult& result);
const char* to_string(BenchMode mode);

}  // namespace encforge
