#pragma once

#include <cstdint>
#include <limits>
#include <span>
#include <vector>

#include "encforge/model.hpp"

namespace encforge {

/// How the per-step multiplicative weight decay is scaled.
enum class DecayMode {
  /// theta *= (1 - weight_decay), whatever the learning rate.
  kIndependent,
  /// theta *= (1 - weight_decay * lr_now / lr_peak): follows the schedule shape only.
  kScheduled,
};

struct OptConfig {
  double lr_peak = 8e-4;
  double beta1 = 0.90;
  double beta2 = 0.98;
  double eps = 1e-6;
  double weight_decay = 1e-5;
  /// Update-clipping threshold d; infinity disables clipping.
  double clip_threshold = 1.0;
  DecayMode decay_mode = DecayMode::kIndependent;

  void validate() const;
  bool operator==(const OptConfig&) const = default;
};

template <typename T>
struct OptimizerState {
  std::vector<std::vector<T>> m;
  std::vector<std::vector<T>> v;
  std::uint64_t step = 0;

  bool initialized() const { return !m.empty(); }
};

struct TensorStepInfo {
  double clip_rms = 0.0;        // sqrt(mean(g^2 / max(v_hat, eps^2)))
  double effective_lr = 0.0;    // lr_now / max(1, clip_rms / d)
  double update_rms = 0.0;      // RMS of the realized step, decay excluded
};

/// One StableAdamW step on a single tensor with step count `t` (1-based).
template <typename T>
TensorStepInfo stableadamw_update(std::span<T> param, std::span<const T> grad, std::span<T> m, std::span<T> v,
                                  std::uint64_t t, const OptConfig& cfg, double lr_now, bool apply_decay);

/// Steps every parameter using its accumulated grad. Refuses (NumericError)
/// before touching anything if any gradient is non-finite.
template <typename T>
std::vector<TensorStepInfo> stableadamw_step(std::span<const ParamRef<T>> params, OptimizerState<T>& state,
                                             const OptConfig& cfg, double lr_now);

}  // namespace encforge
