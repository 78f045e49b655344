#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

namespace encforge {

struct LadderStage {
  std::size_t batch_size = 0;
  std::uint64_t steps = 0;

  bool operator==(const LadderStage&) const = default;
};

/// Batch-size warmup: every stage runs the same number of steps. Tokens the
/// stages leave unused go to a terminal phase at the final size.
struct BatchLadder {
  std::vector<LadderStage> stages;
  std::uint64_t terminal_steps = 0;

  bool empty() const { return stages.empty(); }
  std::size_t final_batch_size() const { return stages.empty() ? 0 : stages.back().batch_size; }
  /// Tokens covered by the equal-step stages.
  std::uint64_t stage_tokens(std::uint64_t tokens_per_sample) const;
  bool operator==(const BatchLadder&) const = default;
};

struct ScheduleSpec {
  std::uint64_t warmup_tokens = 0;
  std::uint64_t stable_tokens = 0;
  std::uint64_t decay_tokens = 0;
  BatchLadder ladder;
  std::uint64_t tokens_per_sample = 1;
  /// Batch size used when the ladder is empty.
  std::size_t batch_size = 8;

  void validate() const;
  std::uint64_t total_tokens() const { return warmup_tokens + stable_tokens + decay_tokens; }
  bool operator==(const ScheduleSpec&) const = default;
};

/// Warmup 0 -> peak, flat, then peak * (1 - sqrt(u)) over the decay budget, 0 after.
double lr_at(std::uint64_t tokens_seen, const ScheduleSpec& spec, double lr_peak);

/// Sizes spaced linearly from start to end over `stages` values and rounded to
/// `granularity` (duplicates dropped). The common step count s is the largest
/// with s * sum(sizes) * tokens_per_sample <= warmup_tokens.
BatchLadder build_batch_ladder(std::size_t start_bs, std::size_t end_bs, std::uint64_t warmup_tokens,
                               std::size_t stages, std::uint64_t tokens_per_sample, std::size_t granularity = 1);

/// Stage size containing tokens_seen; the final size once the stages are spent.
std::size_t batch_size_at(std::uint64_t tokens_seen, const BatchLadder& ladder, std::uint64_t tokens_per_sample);

}  // namespace encforge
