#include "encforge/batching.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>

#include "encforge/errors.hpp"

namespace encforge {

// ---- PackedBatch ------------------------------------------------------------

std::vector<std::size_t> PackedBatch::seq_lens() const {
  std::vector<std::size_t> lens;
  lens.reserve(num_sequences());
  for (std::size_t i = 1; i < cu_seqlens.size(); ++i) lens.push_back(cu_seqlens[i] - cu_seqlens[i - 1]);
  return lens;
}

std::size_t PackedBatch::labeled_count() const {
  return static_cast<std::size_t>(
      std::count_if(labels.begin(), labels.end(), [](std::int32_t l) { return l != kIgnoreLabel; }));
}

void PackedBatch::append(std::span<const std::int32_t> sequence) {
  if (sequence.empty()) throw BatchError("cannot append an empty sequence");
  tokens.insert(tokens.end(), sequence.begin(), sequence.end());
  for (std::size_t p = 0; p < sequence.size(); ++p) positions.push_back(p);
  cu_seqlens.push_back(tokens.size());
}

void PackedBatch::validate() const {
  if (cu_seqlens.empty() || cu_seqlens.front() != 0) throw BatchError("cu_seqlens must start at 0");
  for (std::size_t i = 1; i < cu_seqlens.size(); ++i) {
    if (cu_seqlens[i] <= cu_seqlens[i - 1]) throw BatchError("cu_seqlens must be strictly increasing");
  }
  if (cu_seqlens.back() != tokens.size()) throw BatchError("cu_seqlens does not end at token count");
  if (positions.size() != tokens.size()) throw BatchError("positions length mismatch");
  for (std::size_t s = 0; s + 1 < cu_seqlens.size(); ++s) {
    for (std::size_t t = cu_seqlens[s]; t < cu_seqlens[s + 1]; ++t) {
      if (positions[t] != t - cu_seqlens[s]) throw BatchError("positions must restart at each sequence");
    }
  }
  if (masked()) {
    if (mlm_input.size() != tokens.size() || labels.size() != tokens.size()) {
      throw BatchError("mlm_input/labels length mismatch");
    }
    for (std::size_t t = 0; t < tokens.size(); ++t) {
      if (labels[t] != kIgnoreLabel && labels[t] != tokens[t]) {
        throw BatchError("label does not carry the original token");
      }
    }
  }
}

PackedBatch PackedBatch::from_documents(std::span<const Document> docs) {
  PackedBatch batch;
  for (const auto& d : docs) batch.append(d.tokens);
  return batch;
}

PackedBatch concat_batches(std::span<const PackedBatch> parts) {
  PackedBatch out;
  const bool all_masked =
      !parts.empty() && std::all_of(parts.begin(), parts.end(), [](const PackedBatch& b) { return b.masked(); });
  for (const auto& part : parts) {
    const std::size_t offset = out.tokens.size();
    out.tokens.insert(out.tokens.end(), part.tokens.begin(), part.tokens.end());
    out.positions.insert(out.positions.end(), part.positions.begin(), part.positions.end());
    for (std::size_t i = 1; i < part.cu_seqlens.size(); ++i) out.cu_seqlens.push_back(offset + part.cu_seqlens[i]);
    if (all_masked) {
      out.mlm_input.insert(out.mlm_input.end(), part.mlm_input.begin(), part.mlm_input.end());
      out.labels.insert(out.labels.end(), part.labels.begin(), part.labels.end());
    }
  }
  return out;
}

// ---- packing ------------------------------------------------------------------

PackResult pack_greedy(std::span<const Document> docs, std::size_t capacity, std::uint64_t seed,
                       const PackOptions& options) {
  if (capacity == 0) throw ConfigError("packing capacity must be positive");
  std::size_t total_tokens = 0;
  for (std::size_t i = 0; i < docs.size(); ++i) {
    const std::size_t len = docs[i].size();
    if (len == 0) throw InputError("document " + std::to_string(i) + " is empty");
    if (len > capacity) {
      throw InputError("document " + std::to_string(i) + " has " + std::to_string(len) +
                       " tokens, capacity is " + std::to_string(capacity));
    }
    total_tokens += len;
  }

  std::vector<std::size_t> order(docs.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  Pcg64Dxsm rng(seed, 0x7061636b);
  rng.shuffle(std::span(order));

  // Pool keyed by length; equal lengths keep arrival order.
  std::multimap<std::size_t, std::size_t> pool;
  std::size_t pool_tokens = 0;
  const std::size_t pool_limit = std::max<std::size_t>(1, options.pool_bins) * capacity;
  std::size_t next = 0;
  auto refill = [&] {
    while (next < order.size() && pool_tokens < pool_limit) {
      const std::size_t d = order[next++];
      pool.emplace(docs[d].size(), d);
      pool_tokens += docs[d].size();
    }
  };
  auto take = [&](std::multimap<std::size_t, std::size_t>::iterator it, std::vector<std::size_t>& bin) {
    pool_tokens -= it->first;
    bin.push_back(it->second);
    pool.erase(it);
  };

  std::vector<std::vector<std::size_t>> bins;
  refill();
  while (!pool.empty()) {
    std::vector<std::size_t> bin;
    std::size_t room = capacity;
    while (!pool.empty()) {
      auto single = pool.upper_bound(room);
      if (single == pool.begin()) break;  // nothing fits: close the bin
      --single;
      const std::size_t single_left = room - single->first;
      // Best pair (sum <= room) by two pointers over the length-sorted pool.
      auto best_lo = pool.end(), best_hi = pool.end();
      std::size_t pair_left = room + 1;
      if (single_left > 0 && pool.size() >= 2) {
        auto lo = pool.begin();
        auto hi = std::prev(pool.end());
        while (lo != hi) {
          const std::size_t s = lo->first + hi->first;
          if (s <= room) {
            if (room - s < pair_left) {
              pair_left = room - s;
              best_lo = lo;
              best_hi = hi;
            }
            ++lo;
          } else {
            --hi;
          }
        }
      }
      if (pair_left < single_left) {
        room = pair_left;
        take(best_hi, bin);
        take(best_lo, bin);
      } else {
        room = single_left;
        take(single, bin);
      }
      refill();
    }
    bins.push_back(std::move(bin));
  }

  PackResult result;
  result.bins.reserve(bins.size());
  for (auto& bin : bins) {
    PackedBatch batch;
    for (std::size_t d : bin) batch.append(docs[d].tokens);
    result.bins.push_back(std::move(batch));
    result.assignment.push_back(std::move(bin));
  }
  result.efficiency = bins.empty() ? 0.0
                                   : static_cast<double>(total_tokens) /
                                         (static_cast<double>(bins.size()) * static_cast<double>(capacity));
  return result;
}

// ---- padding --------------------------------------------------------------------

PackedBatch unpad(const TokenGrid& grid) {
  if (grid.ids.size() != grid.rows * grid.cols || grid.mask.size() != grid.ids.size()) {
    throw InputError("token grid size does not match rows x cols");
  }
  PackedBatch batch;
  for (std::size_t r = 0; r < grid.rows; ++r) {
    std::size_t len = 0;
    while (len < grid.cols && grid.mask[r * grid.cols + len]) ++len;
    for (std::size_t c = len; c < grid.cols; ++c) {
      if (grid.mask[r * grid.cols + c]) {
        throw InputError("pad mask row " + std::to_string(r) + " is not a contiguous prefix");
      }
    }
    if (len == 0) throw InputError("pad mask row " + std::to_string(r) + " has no real tokens");
    batch.append(std::span(grid.ids).subspan(r * grid.cols, len));
  }
  return batch;
}

TokenGrid pad_batch(const PackedBatch& batch, std::size_t pad_to) {
  TokenGrid grid;
  grid.rows = batch.num_sequences();
  grid.cols = pad_to;
  grid.ids.assign(grid.rows * pad_to, kPadToken);
  grid.mask.assign(grid.rows * pad_to, 0);
  const auto input = batch.model_input();
  for (std::size_t r = 0; r < grid.rows; ++r) {
    const std::size_t begin = batch.cu_seqlens[r], len = batch.cu_seqlens[r + 1] - begin;
    if (len > pad_to) throw InputError("pad_to " + std::to_string(pad_to) + " shorter than a row");
    for (std::size_t c = 0; c < len; ++c) {
      grid.ids[r * pad_to + c] = input[begin + c];
      grid.mask[r * pad_to + c] = 1;
    }
  }
  return grid;
}

template <typename T>
Tensor<T> repad(const Tensor<T>& values, std::span<const std::size_t> cu_seqlens, std::size_t pad_to) {
  if (values.rank() != 2) throw DimensionError("repad expects [tokens, d], got " + shape_str(values.shape()));
  if (cu_seqlens.size() < 2 || cu_seqlens.front() != 0 || cu_seqlens.back() != values.dim(0)) {
    throw BatchError("cu_seqlens do not describe the value rows");
  }
  const std::size_t rows = cu_seqlens.size() - 1, d = values.dim(1);
  for (std::size_t r = 0; r < rows; ++r) {
    if (cu_seqlens[r + 1] <= cu_seqlens[r]) throw BatchError("cu_seqlens must be strictly increasing");
    if (cu_seqlens[r + 1] - cu_seqlens[r] > pad_to) {
      throw InputError("pad_to " + std::to_string(pad_to) + " is shorter than row " + std::to_string(r));
    }
  }
  std::vector<T> out(rows * pad_to * d, T(0));
  auto vd = values.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const std::size_t begin = cu_seqlens[r], len = cu_seqlens[r + 1] - begin;
    std::copy_n(vd.data() + begin * d, len * d, out.data() + r * pad_to * d);
  }
  return Tensor<T>({rows, pad_to, d}, std::move(out));
}

template Tensor<float> repad(const Tensor<float>&, std::span<const std::size_t>, std::size_t);
template Tensor<double> repad(const Tensor<double>&, std::span<const std::size_t>, std::size_t);

// ---- masking ---------------------------------------------------------------------

MaskStats apply_mlm_mask(PackedBatch& batch, std::size_t vocab, Pcg64Dxsm& rng, const MlmOptions& options) {
  if (options.rate < 0.0 || options.rate > 1.0) throw ConfigError("masking rate must be in [0, 1]");
  if (options.mask_fraction < 0.0 || options.random_fraction < 0.0 ||
      options.mask_fraction + options.random_fraction > 1.0) {
    throw ConfigError("mask/random fractions must be nonnegative and sum to at most 1");
  }
  if (vocab <= static_cast<std::size_t>(kFirstRegularToken)) throw ConfigError("vocabulary has no regular tokens");
  const std::size_t regular = vocab - static_cast<std::size_t>(kFirstRegularToken);
  MaskStats stats;
  batch.mlm_input = batch.tokens;
  batch.labels.assign(batch.tokens.size(), kIgnoreLabel);
  for (std::size_t t = 0; t < batch.tokens.size(); ++t) {
    const std::int32_t id = batch.tokens[t];
    if (is_special_token(id)) continue;
    ++stats.eligible;
    if (!rng.bernoulli(options.rate)) continue;
    ++stats.selected;
    batch.labels[t] = id;
    const double u = rng.uniform();
    if (u < options.mask_fraction) {
      batch.mlm_input[t] = kMaskToken;
      ++stats.masked;
    } else if (u < options.mask_fraction + options.random_fraction) {
      batch.mlm_input[t] = kFirstRegularToken + static_cast<std::int32_t>(rng.below(regular));
      ++stats.randomized;
    } else {
      ++stats.kept;
    }
  }
  return stats;
}

void mask_positions(PackedBatch& batch, std::span<const std::size_t> positions) {
  batch.mlm_input = batch.tokens;
  batch.labels.assign(batch.tokens.size(), kIgnoreLabel);
  for (std::size_t p : positions) {
    if (p >= batch.tokens.size()) throw InputError("mask position outside the batch");
    batch.labels[p] = batch.tokens[p];
    batch.mlm_input[p] = kMaskToken;
  }
}

// ---- synthetic corpora ------------------------------------------------------------

std::size_t LengthDistribution::sample(Pcg64Dxsm& rng) const {
  if (kind == Kind::kFixed) return static_cast<std::size_t>(std::llround(mean));
  const double draw = std::round(rng.normal(mean, stddev));
  const double clipped = std::clamp(draw, static_cast<double>(min), static_cast<double>(max));
  return static_cast<std::size_t>(clipped);
}

MarkovChain::MarkovChain(std::size_t vocab, std::size_t fanout, double decay, std::size_t reserved_tail,
                         std::uint64_t seed)
    : first_(kFirstRegularToken) {
  if (vocab < 8) throw ConfigError("synthetic corpus needs vocab >= 8");
  if (reserved_tail + static_cast<std::size_t>(kFirstRegularToken) + 2 > vocab) {
    throw ConfigError("reserved ids leave fewer than two chain tokens");
  }
  if (!(decay > 0.0) || decay > 1.0) throw ConfigError("transition decay must be in (0, 1]");
  count_ = static_cast<std::int32_t>(vocab - reserved_tail - static_cast<std::size_t>(kFirstRegularToken));
  fanout = std::clamp<std::size_t>(fanout, 1, static_cast<std::size_t>(count_));
  Pcg64Dxsm rng(seed, 0x6d61726b);
  std::vector<std::int32_t> ids(static_cast<std::size_t>(count_));
  std::iota(ids.begin(), ids.end(), first_);
  successors_.resize(ids.size());
  for (auto& succ : successors_) {
    // Partial Fisher-Yates picks `fanout` distinct successors.
    for (std::size_t k = 0; k < fanout; ++k) {
      std::size_t j = k + static_cast<std::size_t>(rng.below(ids.size() - k));
      std::swap(ids[k], ids[j]);
    }
    succ.assign(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(fanout));
  }
  double total = 0.0, w = 1.0;
  for (std::size_t k = 0; k < fanout; ++k, w *= decay) total += w;
  double acc = 0.0;
  w = 1.0;
  for (std::size_t k = 0; k < fanout; ++k, w *= decay) {
    acc += w / total;
    cumulative_.push_back(acc);
  }
  cumulative_.back() = 1.0;
}

std::int32_t MarkovChain::start(Pcg64Dxsm& rng) const {
  return first_ + static_cast<std::int32_t>(rng.below(static_cast<std::uint64_t>(count_)));
}

std::int32_t MarkovChain::next(std::int32_t current, Pcg64Dxsm& rng) const {
  const auto& succ = successors_.at(static_cast<std::size_t>(current - first_));
  const double u = rng.uniform();
  std::size_t k = 0;
  while (k + 1 < cumulative_.size() && u >= cumulative_[k]) ++k;
  return succ[k];
}

double MarkovChain::conditional_entropy() const {
  double h = 0.0, prev = 0.0;
  for (double c : cumulative_) {
    const double p = c - prev;
    if (p > 0.0) h -= p * std::log(p);
    prev = c;
  }
  return h;
}

std::vector<Document> synth_corpus(const CorpusSpec& spec) {
  if (spec.lengths.min < 3) throw ConfigError("documents need room for [CLS], [SEP] and a token");
  MarkovChain chain(spec.vocab, spec.fanout, spec.decay, spec.reserved_tail, spec.seed);
  Pcg64Dxsm rng(spec.seed, 0x636f7270);
  std::vector<Document> docs;
  docs.reserve(spec.docs);
  for (std::size_t d = 0; d < spec.docs; ++d) {
    const std::size_t len = std::max<std::size_t>(3, spec.lengths.sample(rng));
    Document doc;
    doc.tokens.reserve(len);
    doc.tokens.push_back(kClsToken);
    std::int32_t cur = chain.start(rng);
    doc.tokens.push_back(cur);
    while (doc.tokens.size() + 1 < len) {
      cur = chain.next(cur, rng);
      doc.tokens.push_back(cur);
    }
    doc.tokens.push_back(kSepToken);
    docs.push_back(std::move(doc));
  }
  return docs;
}

std::int32_t long_range_cue_token(const LongRangeSpec& spec) {
  return static_cast<std::int32_t>(spec.filler.vocab - 1 - spec.key_count);
}

LongRangeCorpus synth_long_range_corpus(const LongRangeSpec& spec) {
  CorpusSpec filler = spec.filler;
  filler.reserved_tail = spec.key_count + (spec.cue ? 1 : 0);
  if (spec.cue && spec.probe_spacing < 2) throw ConfigError("cued probes need spacing >= 2");
  filler.lengths = {LengthDistribution::Kind::kFixed, static_cast<double>(spec.length), 0, spec.length,
                    spec.length};
  if (spec.key_count == 0 || spec.probes == 0) throw ConfigError("need at least one key and one probe");
  const std::size_t first_probe = 1 + spec.min_distance;
  if (first_probe + spec.probes * spec.probe_spacing > spec.length - 1) {
    throw ConfigError("document too short for the requested probes");
  }
  LongRangeCorpus out;
  out.docs = synth_corpus(filler);
  Pcg64Dxsm rng(spec.filler.seed, 0x6b657973);
  const std::size_t span_len = (spec.length - 1) - first_probe;  // probe slots [first_probe, length-2]
  const std::size_t segment = span_len / spec.probes;
  for (auto& doc : out.docs) {
    const auto key = static_cast<std::int32_t>(filler.vocab - 1 - rng.below(spec.key_count));
    doc.tokens[1] = key;
    std::vector<std::size_t> probes;
    for (std::size_t p = 0; p < spec.probes; ++p) {
      const std::size_t lo = first_probe + p * segment;
      const std::size_t room = segment > spec.probe_spacing ? segment - spec.probe_spacing : 1;
      const std::size_t pos = lo + static_cast<std::size_t>(rng.below(room));
      doc.tokens[pos] = key;
      if (spec.cue) doc.tokens[pos - 1] = long_range_cue_token(spec);
      probes.push_back(pos);
    }
    out.probes.push_back(std::move(probes));
  }
  return out;
}

PackedBatch make_probe_batch(std::span<const Document> docs, std::span<const std::vector<std::size_t>> probes) {
  if (docs.size() != probes.size()) throw InputError("one probe list per document required");
  PackedBatch batch = PackedBatch::from_documents(docs);
  std::vector<std::size_t> stream_positions;
  for (std::size_t d = 0; d < docs.size(); ++d) {
    for (std::size_t p : probes[d]) {
      if (p >= docs[d].size()) throw InputError("probe outside its document");
      stream_positions.push_back(batch.cu_seqlens[d] + p);
    }
  }
  mask_positions(batch, stream_positions);
  return batch;
}

// ---- corpus files -------------------------------------------------------------------

std::vector<Document> read_corpus(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open corpus file " + path);
  std::vector<Document> docs;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    Document doc;
    const char* p = line.data();
    const char* end = p + line.size();
    while (p < end) {
      while (p < end && (*p == ' ' || *p == '\t' || *p == '\r')) ++p;
      if (p == end) break;
      std::int32_t id = 0;
      auto [ptr, ec] = std::from_chars(p, end, id);
      if (ec != std::errc() || id < 0 || (ptr < end && *ptr != ' ' && *ptr != '\t' && *ptr != '\r')) {
        throw InputError(path + ":" + std::to_string(line_no) + ": bad token id");
      }
      doc.tokens.push_back(id);
      p = ptr;
    }
    if (!doc.tokens.empty()) docs.push_back(std::move(doc));
  }
  return docs;
}

void write_corpus(const std::string& path, std::span<const Document> docs) {
  std::ofstream out(path);
  if (!out) throw InputError("cannot write corpus file " + path);
  for (const auto& doc : docs) {
    for (std::size_t i = 0; i < doc.tokens.size(); ++i) out << (i ? " " : "") << doc.tokens[i];
    out << '\n';
  }
}

}  // namespace encforge
