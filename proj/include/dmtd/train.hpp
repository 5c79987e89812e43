#pragma once

// Cyclical-mask training: one forward pass per sequence trains the full
// path (positions whose mask bit is 1) and the decode-only paths (mask 0)
// at the same time.

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dmtd/model.hpp"
#include "dmtd/optim.hpp"
#include "dmtd/tensor.hpp"

namespace dmtd {

enum class MaskVariant {
  EmbeddingBase,  // decoding input = h_emb (+ h_think at cycle starts)
  EncodingBase,   // decoding input = h_enc (+ h_think at cycle starts)
};

const char* variant_name(MaskVariant variant);
MaskVariant parse_variant(const std::string& name);

struct CyclePlan {
  int tau_train = 1;
  int tau_infer = 1;
  MaskVariant variant = MaskVariant::EmbeddingBase;
  int mask_anchor = 0;

  // Throws ConfigError. With a model config, also checks that EncodingBase
  // has at least one encoding layer.
  void validate(const ModelConfig* model = nullptr) const;
};

struct CycleMask {
  std::vector<std::uint8_t> bits;
  int tau = 1;
  int anchor = 0;

  std::size_t ones() const;
};

// bits[p] = 1 iff (p - anchor) mod tau == 0, for p in [0, n).
CycleMask build_cycle_mask(int n, int tau, int anchor = 0);

template <typename T>
struct MaskedForwardParts {
  BasicTensor<T> h_emb;
  BasicTensor<T> h_enc;
  BasicTensor<T> h_think;
  BasicTensor<T> h_masked;
  BasicTensor<T> logits;
  CycleMask mask;
};

// Decoding layers + LM head over base + h_think * M, with M broadcast over
// channels and repeated for every sequence of the batch.
template <typename T>
MaskedForwardParts<T> decode_masked(const Model<T>& model, const BasicTensor<T>& base,
                                    const BasicTensor<T>& h_think, int seq_len, int tau, int anchor);

// Full training-mode forward over `tokens` (batch*seq_len ids, row-major).
template <typename T>
MaskedForwardParts<T> masked_forward_parts(const Model<T>& model, std::span<const int> tokens,
                                           int seq_len, const CyclePlan& plan);

// Logits [batch*seq_len x vocab] of masked_forward_parts.
template <typename T>
BasicTensor<T> masked_forward(const Model<T>& model, std::span<const int> tokens, int seq_len,
                              const CyclePlan& plan);

// Next-token targets for batch*seq_len ids; the last position of each
// sequence has no target and is flagged ignored (target 0).
struct NextTokenTargets {
  std::vector<int> targets;
  std::vector<std::uint8_t> ignore;
};
NextTokenTargets next_token_targets(std::span<const int> tokens, int seq_len);

struct OffsetLosses {
  std::vector<double> loss;         // per cycle offset, NaN where count is 0
  std::vector<std::size_t> count;   // contributing positions
};

// Mean cross-entropy grouped by (position - anchor) mod tau.
template <typename T>
OffsetLosses loss_by_offset(const BasicTensor<T>& logits, std::span<const int> targets,
                            std::span<const std::uint8_t> ignore, int seq_len, int tau, int anchor);

struct StepResult {
  double loss = 0.0;
  OffsetLosses offsets;
  double grad_norm = 0.0;
  double lr = 0.0;
};

// masked_forward + mean next-token cross-entropy, backward, clipped AdamW.
template <typename T>
StepResult training_step(const Model<T>& model, AdamW<T>& optimizer, std::span<const int> tokens,
                         int seq_len, const CyclePlan& plan);

// Loss of the same computation without touching gradients or weights.
template <typename T>
StepResult evaluate_batch(const Model<T>& model, std::span<const int> tokens, int seq_len,
                          const CyclePlan& plan);

// Mean loss over equal-length windows, `batch_size` windows per forward.
// Throws ConfigError on an empty split.
template <typename T>
double evaluate(const Model<T>& model, const std::vector<std::vector<int>>& windows,
                const CyclePlan& plan, int batch_size = 8);

struct TrainConfig {
  int batch_size = 8;
  int seq_len = 64;
  std::int64_t steps = 1000;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double weight_decay = 0.1;
  double warmup_ratio = 0.1;
  LrSchedule schedule = LrSchedule::Cosine;
  double grad_clip = 1.0;
  std::uint64_t seed = 0;
  double eval_fraction = 0.05;
  int log_interval = 50;
  int eval_max_windows = 64;
  int checkpoint_interval = 0;  // 0 = only at the end

  void validate() const;
  AdamWConfig optimizer_config() const;
};

struct TrainRecord {
  std::int64_t step = 0;
  std::int64_t tokens_seen = 0;
  double train_loss = 0.0;
  std::vector<double> offset_losses;
  double eval_loss = 0.0;
  double lr = 0.0;
};

// Deterministic batch order: the window order is a seeded permutation per
// epoch, so the batch for a given step depends only on (seed, step).
class BatchSampler {
 public:
  BatchSampler(std::size_t n_windows, int batch_size, std::uint64_t seed);
  // Window indices for 0-based step `step`.
  std::vector<std::size_t> batch(std::int64_t step);

 private:
  const std::vector<std::size_t>& permutation(std::int64_t epoch);

  std::size_t n_windows_;
  int batch_size_;
  std::uint64_t seed_;
  std::int64_t cached_epoch_ = -1;
  std::vector<std::size_t> cached_perm_;
};

// Runs steps (start, config.steps] and reports a record every log_interval
// steps and at the last step. A step-0 record is emitted when starting fresh.
// `on_checkpoint` is called after every checkpoint_interval steps and at the end.
class Trainer {
 public:
  Trainer(Model<float>& model, TrainConfig config, CyclePlan plan,
          std::vector<std::vector<int>> train_windows, std::vector<std::vector<int>> eval_windows);

  AdamW<float>& optimizer() { return optimizer_; }
  const std::vector<std::vector<int>>& eval_windows() const { return eval_windows_; }

  void run(const std::function<void(const TrainRecord&)>& on_record,
           const std::function<void(std::int64_t step)>& on_checkpoint);

  double eval_loss() const;

 private:
  std::vector<int> gather(const std::vector<std::size_t>& indices) const;

  Model<float>& model_;
  TrainConfig config_;
  CyclePlan plan_;
  std::vector<std::vector<int>> train_windows_;
  std::vector<std::vector<int>> eval_windows_;
  AdamW<float> optimizer_;
  BatchSampler sampler_;
};

}  // namespace dmtd
