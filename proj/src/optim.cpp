#include "dmtd/optim.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

#include "dmtd/errors.hpp"

namespace dmtd {

void AdamWConfig::validate() const {
  if (!(lr > 0.0)) throw ConfigError("lr must be positive");
  if (!(beta1 > 0.0 && beta1 < 1.0)) throw ConfigError("beta1 must lie in (0, 1)");
  if (!(beta2 > 0.0 && beta2 < 1.0)) throw ConfigError("beta2 must lie in (0, 1)");
  if (!(eps > 0.0)) throw ConfigError("eps must be positive");
  if (!(weight_decay >= 0.0)) throw ConfigError("weight_decay must be non-negative");
  if (!(max_grad_norm > 0.0)) throw ConfigError("max_grad_norm must be positive");
  if (!(warmup_ratio >= 0.0 && warmup_ratio <= 1.0)) throw ConfigError("warmup_ratio must lie in [0, 1]");
  if (total_steps < 1) throw ConfigError("total_steps must be at least 1");
}

double scheduled_lr(const AdamWConfig& config, std::int64_t step) {
  const auto warmup = static_cast<std::int64_t>(std::ceil(config.warmup_ratio * static_cast<double>(config.total_steps)));
  if (step <= 0) return 0.0;
  if (step <= warmup) return config.lr * static_cast<double>(step) / static_cast<double>(warmup);
  if (config.schedule == LrSchedule::Constant) return config.lr;
  const std::int64_t decay_steps = config.total_steps - warmup;
  if (decay_steps <= 0) return config.lr;
  double progress = static_cast<double>(step - warmup) / static_cast<double>(decay_steps);
  progress = std::min(1.0, std::max(0.0, progress));
  return config.lr * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

template <typename T>
AdamW<T>::AdamW(std::vector<BasicTensor<T>> params, AdamWConfig config)
    : params_(std::move(params)), config_(config) {
  config_.validate();
  for (const auto& p : params_) {
    first_.emplace_back(p.numel(), T(0));
    second_.emplace_back(p.numel(), T(0));
  }
}

template <typename T>
void AdamW<T>::zero_grad() {
  for (auto& p : params_) p.clear_grad();
}

template <typename T>
StepStats AdamW<T>::step() {
  double sq = 0.0;
  for (std::size_t i = 0; i < params_.size(); ++i) {
    if (!params_[i].has_grad()) {
      throw ContractError("adamw: parameter " + std::to_string(i) + " has no gradient");
    }
    for (T g : params_[i].grad()) sq += static_cast<double>(g) * static_cast<double>(g);
  }
  StepStats stats;
  stats.grad_norm = std::sqrt(sq);
  if (!std::isfinite(stats.grad_norm)) throw NumericError("adamw: non-finite gradient norm");
  if (stats.grad_norm > config_.max_grad_norm) {
    stats.clip_scale = config_.max_grad_norm / stats.grad_norm;
    for (auto& p : params_) {
      for (T& g : p.mutable_grad()) g = static_cast<T>(g * stats.clip_scale);
    }
  }

  ++step_count_;
  stats.lr = scheduled_lr(config_, step_count_);
  const T lr = static_cast<T>(stats.lr);
  const T b1 = static_cast<T>(config_.beta1), b2 = static_cast<T>(config_.beta2);
  const T bias1 = static_cast<T>(1.0 - std::pow(config_.beta1, static_cast<double>(step_count_)));
  const T bias2 = static_cast<T>(1.0 - std::pow(config_.beta2, static_cast<double>(step_count_)));
  const T eps = static_cast<T>(config_.eps), decay = static_cast<T>(config_.weight_decay);
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto w = params_[i].mutable_data();
    auto g = params_[i].grad();
    auto& m = first_[i];
    auto& v = second_[i];
    for (std::size_t j = 0; j < w.size(); ++j) {
      m[j] = b1 * m[j] + (T(1) - b1) * g[j];
      v[j] = b2 * v[j] + (T(1) - b2) * g[j] * g[j];
      const T mhat = m[j] / bias1;
      const T vhat = v[j] / bias2;
      w[j] -= lr * (mhat / (std::sqrt(vhat) + eps) + decay * w[j]);
    }
  }
  return stats;
}

template class AdamW<float>;
template class AdamW<double>;

}  // namespace dmtd
