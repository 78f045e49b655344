#include "encforge/optim.hpp"

#include <algorithm>
#include <cmath>

#include "encforge/errors.hpp"

namespace encforge {

void OptConfig::validate() const {
  if (!(beta1 > 0.0 && beta1 < 1.0) || !(beta2 > 0.0 && beta2 < 1.0)) throw ConfigError("betas must lie in (0, 1)");
  if (!(eps > 0.0)) throw ConfigError("epsilon must be positive");
  if (!(clip_threshold > 0.0)) throw ConfigError("clip threshold must be positive");
  if (!(lr_peak >= 0.0) || !std::isfinite(lr_peak)) throw ConfigError("learning rate must be finite and >= 0");
  if (!(weight_decay >= 0.0 && weight_decay < 1.0)) throw ConfigError("weight decay must be in [0, 1)");
}

template <typename T>
TensorStepInfo stableadamw_update(std::span<T> param, std::span<const T> grad, std::span<T> m, std::span<T> v,
                                  std::uint64_t t, const OptConfig& cfg, double lr_now, bool apply_decay) {
  const std::size_t n = param.size();
  if (grad.size() != n || m.size() != n || v.size() != n) throw DimensionError("optimizer state shape mismatch");
  if (t == 0) throw InputError("optimizer step count is 1-based");
  const double b1 = cfg.beta1, b2 = cfg.beta2;
  const double bc1 = 1.0 - std::pow(b1, static_cast<double>(t));
  const double bc2 = 1.0 - std::pow(b2, static_cast<double>(t));
  const double eps_sq = cfg.eps * cfg.eps;

  double ratio_sum = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double g = grad[i];
    const double mi = b1 * m[i] + (1.0 - b1) * g;
    const double vi = b2 * v[i] + (1.0 - b2) * g * g;
    m[i] = static_cast<T>(mi);
    v[i] = static_cast<T>(vi);
    const double v_hat = static_cast<double>(v[i]) / bc2;
    ratio_sum += g * g / std::max(v_hat, eps_sq);
  }
  TensorStepInfo info;
  info.clip_rms = n ? std::sqrt(ratio_sum / static_cast<double>(n)) : 0.0;
  info.effective_lr = lr_now / std::max(1.0, info.clip_rms / cfg.clip_threshold);

  double decay = 1.0;
  if (apply_decay) {
    if (cfg.decay_mode == DecayMode::kIndependent) {
      decay = 1.0 - cfg.weight_decay;
    } else if (cfg.lr_peak > 0.0) {
      decay = 1.0 - cfg.weight_decay * lr_now / cfg.lr_peak;
    }
  }
  double update_sq = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double m_hat = static_cast<double>(m[i]) / bc1;
    const double v_hat = static_cast<double>(v[i]) / bc2;
    const double step = info.effective_lr * m_hat / (std::sqrt(v_hat) + cfg.eps);
    const double before = param[i];
    const T moved = static_cast<T>(before - step);
    const double delta = static_cast<double>(moved) - before;
    update_sq += delta * delta;
    param[i] = decay == 1.0 ? moved : static_cast<T>(static_cast<double>(moved) * decay);
  }
  info.update_rms = n ? std::sqrt(update_sq / static_cast<double>(n)) : 0.0;
  return info;
}

template <typename T>
std::vector<TensorStepInfo> stableadamw_step(std::span<const ParamRef<T>> params, OptimizerState<T>& state,
                                             const OptConfig& cfg, double lr_now) {
  cfg.validate();
  if (!(lr_now >= 0.0) || !std::isfinite(lr_now)) throw ConfigError("lr_now must be finite and >= 0");
  if (!state.initialized()) {
    for (const auto& p : params) {
      state.m.emplace_back(p.tensor.numel(), T(0));
      state.v.emplace_back(p.tensor.numel(), T(0));
    }
  }
  if (state.m.size() != params.size()) throw DimensionError("optimizer state does not match parameters");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (state.m[i].size() != params[i].tensor.numel()) throw DimensionError("optimizer state does not match " + params[i].name);
    if (!params[i].tensor.has_grad()) continue;
    for (T g : params[i].tensor.grad()) {
      if (!std::isfinite(g)) throw NumericError("non-finite gradient in " + params[i].name);
    }
  }
  ++state.step;
  std::vector<TensorStepInfo> infos;
  infos.reserve(params.size());
  std::vector<T> zeros;
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor<T> handle = params[i].tensor;
    std::span<const T> grad;
    if (handle.has_grad()) {
      grad = handle.grad();
    } else {
      zeros.assign(handle.numel(), T(0));
      grad = zeros;
    }
    infos.push_back(stableadamw_update<T>(handle.data(), grad, state.m[i], state.v[i], state.step, cfg, lr_now,
                                          params[i].decays()));
  }
  return infos;
}

template TensorStepInfo stableadamw_update(std::span<float>, std::span<const float>, std::span<float>,
                                           std::span<float>, std::uint64_t, const OptConfig&, double, bool);
template TensorStepInfo stableadamw_update(std::span<double>, std::span<const double>, std::span<double>,
                                           std::span<double>, std::uint64_t, const OptConfig&, double, bool);
template std::vector<TensorStepInfo> stableadamw_step(std::span<const ParamRef<float>>, OptimizerState<float>&,
                                                      const OptConfig&, double);
template std::vector<TensorStepInfo> stableadamw_step(std::span<const ParamRef<double>>, OptimizerState<double>&,
                                                      const OptConfig&, double);

}  // namespace encforge
