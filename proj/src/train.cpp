#include "dmtd/train.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>

#include "dmtd/errors.hpp"

namespace dmtd {

const char* variant_name(MaskVariant variant) {
  return variant == MaskVariant::EmbeddingBase ? "embedding" : "encoding";
}

MaskVariant parse_variant(const std::string& name) {
  if (name == "embedding") return MaskVariant::EmbeddingBase;
  if (name == "encoding") return MaskVariant::EncodingBase;
  throw ConfigError("unknown masking variant '" + name + "' (expected embedding or encoding)");
}

void CyclePlan::validate(const ModelConfig* model) const {
  if (tau_train < 1) throw ConfigError("tau_train must be at least 1");
  if (tau_infer < 1) throw ConfigError("tau_infer must be at least 1");
  if (mask_anchor < 0 || mask_anchor >= tau_train) throw ConfigError("mask_anchor must lie in [0, tau_train)");
  if (model && variant == MaskVariant::EncodingBase && model->n_encoding < 1) {
    throw ConfigError("the encoding-base variant needs at least one encoding layer");
  }
}

std::size_t CycleMask::ones() const {
  return static_cast<std::size_t>(std::count(bits.begin(), bits.end(), std::uint8_t{1}));
}

CycleMask build_cycle_mask(int n, int tau, int anchor) {
  if (tau < 1) throw ConfigError("cycle length must be at least 1");
  if (n < 1) throw ConfigError("mask length must be at least 1");
  if (anchor < 0 || anchor >= tau) throw ConfigError("mask anchor must lie in [0, tau)");
  CycleMask mask{std::vector<std::uint8_t>(static_cast<std::size_t>(n), 0), tau, anchor};
  for (int p = anchor; p < n; p += tau) mask.bits[static_cast<std::size_t>(p)] = 1;
  return mask;
}

template <typename T>
MaskedForwardParts<T> decode_masked(const Model<T>& model, const BasicTensor<T>& base,
                                    const BasicTensor<T>& h_think, int seq_len, int tau, int anchor) {
  if (seq_len < 1 || base.rows() % static_cast<std::size_t>(seq_len) != 0) {
    throw DimensionError("decode_masked: rows are not a multiple of seq_len");
  }
  MaskedForwardParts<T> parts;
  parts.mask = build_cycle_mask(seq_len, tau, anchor);
  std::vector<T> factors(base.rows());
  for (std::size_t r = 0; r < factors.size(); ++r) factors[r] = static_cast<T>(parts.mask.bits[r % seq_len]);

  std::vector<int> positions(static_cast<std::size_t>(seq_len));
  std::iota(positions.begin(), positions.end(), 0);
  parts.h_think = h_think;
  parts.h_masked = add(base, mul_rows<T>(h_think, factors));
  parts.logits = model.lm_head(model.forward_range(parts.h_masked, model.partition().decoding, positions));
  return parts;
}

template <typename T>
MaskedForwardParts<T> masked_forward_parts(const Model<T>& model, std::span<const int> tokens, int seq_len,
                                           const CyclePlan& plan) {
  plan.validate(&model.config());
  if (seq_len < 1 || seq_len > model.config().max_seq_len) {
    throw ConfigError("sequence length " + std::to_string(seq_len) + " exceeds max_seq_len " +
                      std::to_string(model.config().max_seq_len));
  }
  if (tokens.empty() || tokens.size() % static_cast<std::size_t>(seq_len) != 0) {
    throw DimensionError("masked_forward: token count is not a multiple of seq_len");
  }
  std::vector<int> positions(static_cast<std::size_t>(seq_len));
  std::iota(positions.begin(), positions.end(), 0);

  const LayerPartition part = model.partition();
  auto h_emb = model.embed(tokens);
  auto h_enc = model.forward_range(h_emb, part.encoding, positions);
  auto h_think = model.forward_range(h_enc, part.thinking, positions);
  const auto& base = plan.variant == MaskVariant::EmbeddingBase ? h_emb : h_enc;
  auto parts = decode_masked(model, base, h_think, seq_len, plan.tau_train, plan.mask_anchor);
  parts.h_emb = h_emb;
  parts.h_enc = h_enc;
  return parts;
}

template <typename T>
BasicTensor<T> masked_forward(const Model<T>& model, std::span<const int> tokens, int seq_len,
                              const CyclePlan& plan) {
  return masked_forward_parts(model, tokens, seq_len, plan).logits;
}

NextTokenTargets next_token_targets(std::span<const int> tokens, int seq_len) {
  NextTokenTargets out;
  out.targets.assign(tokens.size(), 0);
  out.ignore.assign(tokens.size(), 1);
  const auto n = static_cast<std::size_t>(seq_len);
  for (std::size_t r = 0; r < tokens.size(); ++r) {
    if (r % n + 1 < n) {
      out.targets[r] = tokens[r + 1];
      out.ignore[r] = 0;
    }
  }
  return out;
}

template <typename T>
OffsetLosses loss_by_offset(const BasicTensor<T>& logits, std::span<const int> targets,
                            std::span<const std::uint8_t> ignore, int seq_len, int tau, int anchor) {
  if (tau < 1) throw ConfigError("cycle length must be at least 1");
  const std::size_t rows = logits.rows(), vocab = logits.cols();
  if (targets.size() != rows || (!ignore.empty() && ignore.size() != rows)) {
    throw DimensionError("loss_by_offset: targets do not match logits");
  }
  std::vector<double> total(static_cast<std::size_t>(tau), 0.0);
  OffsetLosses out;
  out.count.assign(static_cast<std::size_t>(tau), 0);
  for (std::size_t r = 0; r < rows; ++r) {
    if (!ignore.empty() && ignore[r]) continue;
    const int pos = static_cast<int>(r % static_cast<std::size_t>(seq_len));
    const auto k = static_cast<std::size_t>(((pos - anchor) % tau + tau) % tau);
    const T* row = logits.data().data() + r * vocab;
    double mx = row[0];
    for (std::size_t c = 1; c < vocab; ++c) mx = std::max(mx, static_cast<double>(row[c]));
    double z = 0.0;
    for (std::size_t c = 0; c < vocab; ++c) z += std::exp(static_cast<double>(row[c]) - mx);
    total[k] += std::log(z) + mx - static_cast<double>(row[targets[r]]);
    ++out.count[k];
  }
  out.loss.resize(total.size());
  for (std::size_t k = 0; k < total.size(); ++k) {
    out.loss[k] = out.count[k] ? total[k] / static_cast<double>(out.count[k])
                               : std::numeric_limits<double>::quiet_NaN();
  }
  return out;
}

template <typename T>
StepResult training_step(const Model<T>& model, AdamW<T>& optimizer, std::span<const int> tokens, int seq_len,
                         const CyclePlan& plan) {
  auto parts = masked_forward_parts(model, tokens, seq_len, plan);
  auto tgt = next_token_targets(tokens, seq_len);
  auto loss = cross_entropy(parts.logits, tgt.targets, tgt.ignore);

  StepResult result;
  result.loss = static_cast<double>(loss.item());
  if (!std::isfinite(result.loss)) throw NumericError("training_step: non-finite loss");
  result.offsets = loss_by_offset(parts.logits, tgt.targets, tgt.ignore, seq_len, plan.tau_train, plan.mask_anchor);

  optimizer.zero_grad();
  loss.backward();
  auto stats = optimizer.step();
  result.grad_norm = stats.grad_norm;
  result.lr = stats.lr;
  return result;
}

template <typename T>
StepResult evaluate_batch(const Model<T>& model, std::span<const int> tokens, int seq_len, const CyclePlan& plan) {
  NoGradGuard no_grad;
  auto logits = masked_forward(model, tokens, seq_len, plan);
  auto tgt = next_token_targets(tokens, seq_len);
  StepResult result;
  result.loss = static_cast<double>(cross_entropy(logits, tgt.targets, tgt.ignore).item());
  result.offsets = loss_by_offset(logits, tgt.targets, tgt.ignore, seq_len, plan.tau_train, plan.mask_anchor);
  return result;
}

template <typename T>
double evaluate(const Model<T>& model, const std::vector<std::vector<int>>& windows, const CyclePlan& plan,
                int batch_size) {
  if (windows.empty()) throw ConfigError("evaluate: empty split");
  if (batch_size < 1) throw ConfigError("evaluate: batch_size must be positive");
  const std::size_t len = windows.front().size();
  double total = 0.0;
  for (std::size_t start = 0; start < windows.size(); start += static_cast<std::size_t>(batch_size)) {
    const std::size_t end = std::min(windows.size(), start + static_cast<std::size_t>(batch_size));
    std::vector<int> tokens;
    for (std::size_t w = start; w < end; ++w) {
      if (windows[w].size() != len) throw DimensionError("evaluate: windows differ in length");
      tokens.insert(tokens.end(), windows[w].begin(), windows[w].end());
    }
    total += evaluate_batch(model, tokens, static_cast<int>(len), plan).loss * static_cast<double>(end - start);
  }
  return total / static_cast<double>(windows.size());
}

// ---------------------------------------------------------------------------
// Training loop

void TrainConfig::validate() const {
  if (batch_size < 1) throw ConfigError("batch_size must be positive");
  if (seq_len < 2) throw ConfigError("seq_len must be at least 2");
  if (steps < 1) throw ConfigError("steps must be positive");
  if (!(eval_fraction > 0.0 && eval_fraction < 1.0)) throw ConfigError("eval_fraction must lie in (0, 1)");
  if (log_interval < 1) throw ConfigError("log_interval must be positive");
  if (eval_max_windows < 1) throw ConfigError("eval_max_windows must be positive");
  if (checkpoint_interval < 0) throw ConfigError("checkpoint_interval must be non-negative");
  if (checkpoint_interval > 0 && checkpoint_interval % log_interval != 0) {
    throw ConfigError("checkpoint_interval must be a multiple of log_interval");
  }
  optimizer_config().validate();
}

AdamWConfig TrainConfig::optimizer_config() const {
  AdamWConfig c;
  c.lr = lr;
  c.beta1 = beta1;
  c.beta2 = beta2;
  c.weight_decay = weight_decay;
  c.max_grad_norm = grad_clip;
  c.warmup_ratio = warmup_ratio;
  c.schedule = schedule;
  c.total_steps = steps;
  return c;
}

BatchSampler::BatchSampler(std::size_t n_windows, int batch_size, std::uint64_t seed)
    : n_windows_(n_windows), batch_size_(batch_size), seed_(seed) {
  if (n_windows_ == 0) throw ConfigError("training split is empty");
}

const std::vector<std::size_t>& BatchSampler::permutation(std::int64_t epoch) {
  if (epoch != cached_epoch_) {
    cached_perm_.resize(n_windows_);
    std::iota(cached_perm_.begin(), cached_perm_.end(), std::size_t{0});
    std::mt19937_64 rng(seed_ * 0x9E3779B97F4A7C15ULL + static_cast<std::uint64_t>(epoch) + 1);
    // Fisher-Yates with an explicit draw so the order does not depend on the
    // standard library's shuffle.
    for (std::size_t i = n_windows_; i > 1; --i) {
      const std::size_t j = static_cast<std::size_t>(rng() % i);
      std::swap(cached_perm_[i - 1], cached_perm_[j]);
    }
    cached_epoch_ = epoch;
  }
  return cached_perm_;
}

std::vector<std::size_t> BatchSampler::batch(std::int64_t step) {
  std::vector<std::size_t> out;
  for (int j = 0; j < batch_size_; ++j) {
    const std::int64_t flat = step * batch_size_ + j;
    const auto epoch = flat / static_cast<std::int64_t>(n_windows_);
    const auto offset = static_cast<std::size_t>(flat % static_cast<std::int64_t>(n_windows_));
    out.push_back(permutation(epoch)[offset]);
  }
  return out;
}

Trainer::Trainer(Model<float>& model, TrainConfig config, CyclePlan plan,
                 std::vector<std::vector<int>> train_windows, std::vector<std::vector<int>> eval_windows)
    : model_(model),
      config_(config),
      plan_(plan),
      train_windows_(std::move(train_windows)),
      eval_windows_(std::move(eval_windows)),
      optimizer_(model.parameters(), config.optimizer_config()),
      sampler_(train_windows_.size(), config.batch_size, config.seed) {
  config_.validate();
  plan_.validate(&model_.config());
  if (eval_windows_.size() > static_cast<std::size_t>(config_.eval_max_windows)) {
    eval_windows_.resize(static_cast<std::size_t>(config_.eval_max_windows));
  }
}

std::vector<int> Trainer::gather(const std::vector<std::size_t>& indices) const {
  std::vector<int> tokens;
  for (std::size_t i : indices) tokens.insert(tokens.end(), train_windows_[i].begin(), train_windows_[i].end());
  return tokens;
}

double Trainer::eval_loss() const { return evaluate(model_, eval_windows_, plan_, config_.batch_size); }

void Trainer::run(const std::function<void(const TrainRecord&)>& on_record,
                  const std::function<void(std::int64_t)>& on_checkpoint) {
  const std::int64_t tokens_per_step = static_cast<std::int64_t>(config_.batch_size) * config_.seq_len;
  std::int64_t step = optimizer_.step_count();

  if (step == 0 && on_record) {
    auto first = evaluate_batch(model_, gather(sampler_.batch(0)), config_.seq_len, plan_);
    on_record({0, 0, first.loss, first.offsets.loss, eval_loss(), 0.0});
  }

  double loss_sum = 0.0;
  std::vector<double> offset_sum(static_cast<std::size_t>(plan_.tau_train), 0.0);
  std::vector<std::size_t> offset_count(offset_sum.size(), 0);
  int in_interval = 0;
  while (step < config_.steps) {
    const auto tokens = gather(sampler_.batch(step));
    auto result = training_step(model_, optimizer_, tokens, config_.seq_len, plan_);
    ++step;
    loss_sum += result.loss;
    for (std::size_t k = 0; k < offset_sum.size(); ++k) {
      if (result.offsets.count[k]) {
        offset_sum[k] += result.offsets.loss[k];
        ++offset_count[k];
      }
    }
    ++in_interval;

    if (step % config_.log_interval == 0 || step == config_.steps) {
      TrainRecord record;
      record.step = step;
      record.tokens_seen = step * tokens_per_step;
      record.train_loss = loss_sum / in_interval;
      for (std::size_t k = 0; k < offset_sum.size(); ++k) {
        record.offset_losses.push_back(offset_count[k] ? offset_sum[k] / static_cast<double>(offset_count[k])
                                                       : std::numeric_limits<double>::quiet_NaN());
      }
      record.eval_loss = eval_loss();
      record.lr = result.lr;
      if (on_record) on_record(record);
      loss_sum = 0.0;
      std::fill(offset_sum.begin(), offset_sum.end(), 0.0);
      std::fill(offset_count.begin(), offset_count.end(), 0);
      in_interval = 0;
    }
    const bool periodic = config_.checkpoint_interval > 0 && step % config_.checkpoint_interval == 0;
    if (on_checkpoint && (periodic || step == config_.steps)) on_checkpoint(step);
  }
}

#define DMTD_INSTANTIATE(T)                                                                                   \
  template MaskedForwardParts<T> decode_masked(const Model<T>&, const BasicTensor<T>&, const BasicTensor<T>&, \
                                               int, int, int);                                                \
  template MaskedForwardParts<T> masked_forward_parts(const Model<T>&, std::span<const int>, int,             \
                                                      const CyclePlan&);                                      \
  template BasicTensor<T> masked_forward(const Model<T>&, std::span<const int>, int, const CyclePlan&);       \
  template OffsetLosses loss_by_offset(const BasicTensor<T>&, std::span<const int>,                           \
                                       std::span<const std::uint8_t>, int, int, int);                         \
  template StepResult training_step(const Model<T>&, AdamW<T>&, std::span<const int>, int, const CyclePlan&); \
  template StepResult evaluate_batch(const Model<T>&, std::span<const int>, int, const CyclePlan&);           \
  template double evaluate(const Model<T>&, const std::vector<std::vector<int>>&, const CyclePlan&, int);

DMTD_INSTANTIATE(float)
DMTD_INSTANTIATE(double)

#undef DMTD_INSTANTIATE

}  // namespace dmtd
