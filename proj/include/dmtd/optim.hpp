#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "dmtd/tensor.hpp"

namespace dmtd {

enum class LrSchedule { Constant, Cosine };

struct AdamWConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
  double weight_decay = 0.0;
  double max_grad_norm = 1.0;
  double warmup_ratio = 0.0;
  LrSchedule schedule = LrSchedule::Constant;
  std::int64_t total_steps = 1;

  void validate() const;
};

// Learning rate used by the `step`-th update (1-based): linear warmup over
// ceil(warmup_ratio * total_steps) steps, then constant or cosine decay to 0.
double scheduled_lr(const AdamWConfig& config, std::int64_t step);

struct StepStats {
  double grad_norm = 0.0;   // global norm before clipping
  double clip_scale = 1.0;  // factor applied to every gradient
  double lr = 0.0;
};

// AdamW with bias correction, decoupled weight decay and global-norm clipping.
template <typename T>
class AdamW {
 public:
  AdamW(std::vector<BasicTensor<T>> params, AdamWConfig config);

  // Clips gradients in place, then updates every parameter. Throws
  // ContractError if any parameter has no gradient.
  StepStats step();
  void zero_grad();

  const AdamWConfig& config() const { return config_; }
  std::int64_t step_count() const { return step_count_; }
  std::size_t size() const { return params_.size(); }
  std::span<T> first_moment(std::size_t i) { return first_[i]; }
  std::span<T> second_moment(std::size_t i) { return second_[i]; }
  std::span<const T> first_moment(std::size_t i) const { return first_[i]; }
  std::span<const T> second_moment(std::size_t i) const { return second_[i]; }
  void set_step_count(std::int64_t steps) { step_count_ = steps; }

 private:
  std::vector<BasicTensor<T>> params_;
  std::vector<std::vector<T>> first_;
  std::vector<std::vector<T>> second_;
  AdamWConfig config_;
  std::int64_t step_count_ = 0;
};

}  // namespace dmtd
