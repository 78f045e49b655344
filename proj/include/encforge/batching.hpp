#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "encforge/random.hpp"
#include "encforge/tensor.hpp"

namespace encforge {

/// Reserved ids. Every id below kFirstRegularToken is special and is never
/// selected for masking.
inline constexpr std::int32_t kPadToken = 0;
inline constexpr std::int32_t kClsToken = 1;
inline constexpr std::int32_t kSepToken = 2;
inline constexpr std::int32_t kMaskToken = 3;
inline constexpr std::int32_t kFirstRegularToken = 4;

inline bool is_special_token(std::int32_t id) { return id < kFirstRegularToken; }

struct Document {
  std::vector<std::int32_t> tokens;  // [CLS] ... [SEP]

  std::size_t size() const { return tokens.size(); }
};

/// Sequences concatenated into one stream with cumulative boundaries.
struct PackedBatch {
  std::vector<std::int32_t> tokens;
  std::vector<std::size_t> cu_seqlens{0};
  std::vector<std::size_t> positions;
  std::vector<std::int32_t> mlm_input;  // empty until masked
  std::vector<std::int32_t> labels;     // empty until masked

  std::size_t num_tokens() const { return tokens.size(); }
  std::size_t num_sequences() const { return cu_seqlens.size() - 1; }
  std::vector<std::size_t> seq_lens() const;
  std::size_t labeled_count() const;
  bool masked() const { return !mlm_input.empty(); }
  /// What the encoder consumes: the corrupted stream if masked, else raw tokens.
  std::span<const std::int32_t> model_input() const { return masked() ? mlm_input : tokens; }

  void append(std::span<const std::int32_t> sequence);
  /// Throws BatchError when any structural invariant is broken.
  void validate() const;

  static PackedBatch from_documents(std::span<const Document> docs);
};

/// Concatenates batches, carrying masks/labels when every part has them.
PackedBatch concat_batches(std::span<const PackedBatch> parts);

// ---- packing --------------------------------------------------------------

struct PackResult {
  std::vector<PackedBatch> bins;
  /// Document indices (into the input) per bin.
  std::vector<std::vector<std::size_t>> assignment;
  double efficiency = 0.0;
};

struct PackOptions {
  /// The sorting pool holds documents worth this many bins of capacity.
  std::size_t pool_bins = 8;
};

/// Seeded shuffle feeding a sliding pool; bins are filled one at a time.
/// Each move takes either the longest pooled document that fits or the
/// pooled pair leaving the least room, whichever leaves less. A bin closes
/// once nothing in the pool fits.
PackResult pack_greedy(std::span<const Document> docs, std::size_t capacity, std::uint64_t seed,
                       const PackOptions& options = {});

// ---- padding ----------------------------------------------------------------

struct TokenGrid {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<std::int32_t> ids;  // rows * cols
  std::vector<std::uint8_t> mask;  // 1 = real token; each row a contiguous prefix
};

PackedBatch unpad(const TokenGrid& grid);

/// Pads a batch out to a rectangular grid (ids only).
TokenGrid pad_batch(const PackedBatch& batch, std::size_t pad_to);

/// values[total_tokens, d] -> [rows, pad_to, d] with zeros at pad slots.
template <typename T>
Tensor<T> repad(const Tensor<T>& values, std::span<const std::size_t> cu_seqlens, std::size_t pad_to);

// ---- masking ----------------------------------------------------------------

struct MlmOptions {
  double rate = 0.30;
  double mask_fraction = 0.8;    // of selected: replaced by [MASK]
  double random_fraction = 0.1;  // of selected: replaced by a random regular token

  bool operator==(const MlmOptions&) const = default;
};

struct MaskStats {
  std::size_t eligible = 0;
  std::size_t selected = 0;
  std::size_t masked = 0;
  std::size_t randomized = 0;
  std::size_t kept = 0;
};

MaskStats apply_mlm_mask(PackedBatch& batch, std::size_t vocab, Pcg64Dxsm& rng, const MlmOptions& options = {});

/// Masks exactly the given stream positions with [MASK] and labels them.
void mask_positions(PackedBatch& batch, std::span<const std::size_t> positions);

// ---- synthetic corpora ------------------------------------------------------

struct LengthDistribution {
  enum class Kind { kFixed, kNormal };
  Kind kind = Kind::kNormal;
  double mean = 64;
  double stddev = 16;
  std::size_t min = 32;
  std::size_t max = 128;

  std::size_t sample(Pcg64Dxsm& rng) const;
};

struct CorpusSpec {
  std::size_t vocab = 64;
  std::size_t docs = 1000;
  LengthDistribution lengths;
  std::uint64_t seed = 0;
  /// Successors per state in the transition table.
  std::size_t fanout = 3;
  /// Successor k has weight decay^k before normalization.
  double decay = 0.35;
  /// Highest ids excluded from the chain (kept free for planted patterns).
  std::size_t reserved_tail = 0;
};

/// Sparse first-order Markov chain over regular tokens.
class MarkovChain {
 public:
  MarkovChain(std::size_t vocab, std::size_t fanout, double decay, std::size_t reserved_tail,
              std::uint64_t seed);
  std::int32_t start(Pcg64Dxsm& rng) const;
  std::int32_t next(std::int32_t current, Pcg64Dxsm& rng) const;
  /// Exact conditional entropy H(next | current) in nats under a uniform state prior.
  double conditional_entropy() const;

 private:
  std::int32_t first_;
  std::int32_t count_;
  std::vector<std::vector<std::int32_t>> successors_;
  std::vector<double> cumulative_;  // shared CDF over successor rank
};

std::vector<Document> synth_corpus(const CorpusSpec& spec);

struct LongRangeSpec {
  CorpusSpec filler;  // filler.reserved_tail is overwritten with key_count
  std::size_t length = 1000;
  std::size_t key_count = 8;
  std::size_t probes = 3;
  /// Minimum distance between the key and every probe.
  std::size_t min_distance = 513;
  /// Minimum spacing between probes.
  std::size_t probe_spacing = 80;
  /// Put a cue token (the id just below the keys) right before every probe.
  bool cue = false;
};

struct LongRangeCorpus {
  std::vector<Document> docs;
  /// Per document, in-document positions of the probe copies of the key.
  std::vector<std::vector<std::size_t>> probes;
};

/// Markov filler with one key token right after [CLS] and `probes` copies of
/// it at least `min_distance` later. Key ids are the top `key_count` ids.
std::int32_t long_range_cue_token(const LongRangeSpec& spec);
LongRangeCorpus synth_long_range_corpus(const LongRangeSpec& spec);

/// Packs documents one per sequence with exactly the probe positions masked.
PackedBatch make_probe_batch(std::span<const Document> docs,
                             std::span<const std::vector<std::size_t>> probes);

// ---- corpus files -----------------------------------------------------------

/// One document per line, space-separated integer ids.
std::vector<Document> read_corpus(const std::string& path);
void write_corpus(const std::string& path, std::span<const Document> docs);

}  // namespace encforge
