#include "encforge/schedule.hpp"

#include <cmath>
#include <string>

#include "encforge/errors.hpp"

namespace encforge {

std::uint64_t BatchLadder::stage_tokens(std::uint64_t tokens_per_sample) const {
  std::uint64_t total = 0;
  for (const auto& s : stages) total += s.batch_size * s.steps * tokens_per_sample;
  return total;
}

void ScheduleSpec::validate() const {
  if (tokens_per_sample == 0) throw ConfigError("tokens_per_sample must be >= 1");
  if (ladder.empty() && batch_size == 0) throw ConfigError("batch_size must be >= 1");
  for (std::size_t i = 0; i < ladder.stages.size(); ++i) {
    if (ladder.stages[i].batch_size == 0) throw ConfigError("ladder batch sizes must be >= 1");
    if (i > 0 && ladder.stages[i].batch_size < ladder.stages[i - 1].batch_size)
      throw ConfigError("ladder batch sizes must be nondecreasing");
  }
}

double lr_at(std::uint64_t tokens_seen, const ScheduleSpec& spec, double lr_peak) {
  const std::uint64_t w = spec.warmup_tokens;
  const std::uint64_t stable_end = w + spec.stable_tokens;
  const std::uint64_t decay_end = stable_end + spec.decay_tokens;
  if (tokens_seen < w) return lr_peak * static_cast<double>(tokens_seen) / static_cast<double>(w);
  if (tokens_seen <= stable_end) return lr_peak;
  if (tokens_seen >= decay_end) return 0.0;
  const double u = static_cast<double>(tokens_seen - stable_end) / static_cast<double>(spec.decay_tokens);
  return lr_peak * (1.0 - std::sqrt(u));
}

BatchLadder build_batch_ladder(std::size_t start_bs, std::size_t end_bs, std::uint64_t warmup_tokens,
                               std::size_t stages, std::uint64_t tokens_per_sample, std::size_t granularity) {
  if (start_bs == 0 || start_bs > end_bs) throw ConfigError("ladder needs 1 <= start_bs <= end_bs");
  if (stages == 0) throw ConfigError("ladder needs at least one stage");
  if (tokens_per_sample == 0 || granularity == 0) throw ConfigError("tokens_per_sample and granularity must be >= 1");

  std::vector<std::size_t> sizes;
  const std::size_t count = start_bs == end_bs ? 1 : stages;
  for (std::size_t i = 0; i < count; ++i) {
    const double frac = count == 1 ? 1.0 : static_cast<double>(i) / static_cast<double>(count - 1);
    const double raw = static_cast<double>(start_bs) + frac * static_cast<double>(end_bs - start_bs);
    auto rounded = static_cast<std::size_t>(std::llround(raw / static_cast<double>(granularity))) * granularity;
    if (rounded < granularity) rounded = granularity;
    if (i + 1 == count) rounded = end_bs;
    if (i == 0 && count > 1) rounded = start_bs;
    if (!sizes.empty() && rounded <= sizes.back()) continue;
    sizes.push_back(rounded);
  }

  std::uint64_t per_step = 0;
  for (auto b : sizes) per_step += b * tokens_per_sample;
  const std::uint64_t s = warmup_tokens / per_step;
  if (s == 0) {
    throw ConfigError("warmup of " + std::to_string(warmup_tokens) + " tokens cannot cover one step per stage (" +
                      std::to_string(per_step) + " needed)");
  }
  BatchLadder ladder;
  for (auto b : sizes) ladder.stages.push_back({b, s});
  const std::uint64_t remainder = warmup_tokens - s * per_step;
  ladder.terminal_steps = remainder / (end_bs * tokens_per_sample);
  return ladder;
}

std::size_t batch_size_at(std::uint64_t tokens_seen, const BatchLadder& ladder, std::uint64_t tokens_per_sample) {
  if (ladder.empty()) throw ConfigError("empty batch ladder");
  std::uint64_t boundary = 0;
  for (const auto& stage : ladder.stages) {
    boundary += stage.batch_size * stage.steps * tokens_per_sample;
    if (tokens_seen < boundary) return stage.batch_size;
  }
  return ladder.final_batch_size();
}

}  // namespace encforge
