#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <utility>
#include <vector>

#include "encforge/tensor.hpp"

namespace encforge {

struct RopeParams {
  double theta = 10000.0;
  std::size_t head_dim = 64;

  /// Throws ConfigError on odd head_dim or nonpositive theta.
  void validate() const;
};

struct AttentionSpec {
  std::size_t heads = 1;
  /// Absent means global attention. A window w admits keys with |i - j| <= w / 2.
  std::optional<std::size_t> window;
  RopeParams rope;
};

/// Rotates dimension pairs (2i, 2i+1) of every head by position * theta^(-2i/head_dim).
/// x has shape [tokens, heads, head_dim].
template <typename T>
Tensor<T> rope_apply(const Tensor<T>& x, std::span<const std::size_t> positions, const RopeParams& params);

/// Throws BatchError unless cu_seqlens starts at 0, strictly increases and ends at `tokens`.
void validate_cu_seqlens(std::span<const std::size_t> cu_seqlens, std::size_t tokens);

/// Sequence-relative positions: restart at 0 at each boundary.
std::vector<std::size_t> positions_from_cu_seqlens(std::span<const std::size_t> cu_seqlens);

/// Inclusive key range [first, last] that query `i` attends to inside the
/// sequence [seq_begin, seq_end).
std::pair<std::size_t, std::size_t> key_range(std::size_t i, std::size_t seq_begin, std::size_t seq_end,
                                              std::optional<std::size_t> window);

/// Every (query, key) pair the attention kernel visits, in visiting order.
std::vector<std::pair<std::size_t, std::size_t>> attended_pairs(std::span<const std::size_t> cu_seqlens,
                                                                std::optional<std::size_t> window);

/// Scaled dot-product attention over a packed stream without rotary embedding.
template <typename T>
Tensor<T> masked_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                           std::span<const std::size_t> cu_seqlens, std::optional<std::size_t> window);

/// RoPE on q and k with sequence-relative positions, then masked attention.
template <typename T>
Tensor<T> attend(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                 std::span<const std::size_t> cu_seqlens, const AttentionSpec& spec);

/// Exact number of attended (query, key) pairs summed over sequences.
std::uint64_t attention_pair_count(std::span<const std::size_t> seq_lens, std::optional<std::size_t> window);

}  // namespace encforge
