#pragma once

// Decoder-only transformer split into three contiguous layer ranges
// (encoding, thinking, decoding) that can be run independently over a shared
// KV cache with explicit per-slot occupancy.

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "dmtd/tensor.hpp"

namespace dmtd {

enum class RangeId : std::uint8_t { Encoding = 0, Thinking = 1, Decoding = 2 };

const char* range_name(RangeId id);

// Half-open interval of layer indices.
struct LayerRange {
  int begin = 0;
  int end = 0;

  int size() const { return end - begin; }
  bool empty() const { return end <= begin; }
  bool contains(int layer) const { return layer >= begin && layer < end; }
  bool operator==(const LayerRange&) const = default;
};

struct LayerPartition {
  LayerRange encoding;
  LayerRange thinking;
  LayerRange decoding;

  LayerRange get(RangeId id) const;
  LayerRange all() const { return {encoding.begin, decoding.end}; }
  RangeId owner(int layer) const;
};

struct ModelConfig {
  int vocab_size = 257;
  int d_model = 64;
  int n_heads = 4;
  int d_ff = 256;
  int n_layers = 6;
  int n_encoding = 2;
  int n_thinking = 2;
  int n_decoding = 2;
  int max_seq_len = 256;
  double norm_eps = 1e-6;
  double rope_base = 10000.0;
  std::uint64_t seed = 0;

  // Throws ConfigError on any violated invariant, including
  // n_encoding + n_thinking + n_decoding != n_layers and n_decoding < 1.
  void validate() const;
  LayerPartition partition() const;
};

enum class SlotState : std::uint8_t { Empty = 0, Filled = 1, PendingRefill = 2 };

const char* slot_state_name(SlotState state);

// Per-layer key/value rows (post-rotary keys) indexed by absolute position.
template <typename T>
class KvCache {
 public:
  KvCache(int n_layers, int max_seq_len, int width);

  int n_layers() const { return n_layers_; }
  int max_seq_len() const { return max_seq_len_; }
  int width() const { return width_; }
  // One past the highest position holding any non-Empty slot.
  int length() const { return length_; }

  SlotState state(int layer, int position) const;
  void set_state(int layer, int position, SlotState state);
  // Stores the rows and marks the slot Filled.
  void write(int layer, int position, std::span<const T> key, std::span<const T> value);
  std::span<const T> key(int layer, int position) const;
  std::span<const T> value(int layer, int position) const;

  std::size_t count(SlotState state, LayerRange layers) const;

 private:
  std::size_t slot(int layer, int position) const;

  int n_layers_;
  int max_seq_len_;
  int width_;
  int length_ = 0;
  std::vector<T> keys_;
  std::vector<T> values_;
  std::vector<SlotState> occupancy_;
};

template <typename T>
struct BlockWeights {
  BasicTensor<T> attn_norm;  // [d]
  BasicTensor<T> wq, wk, wv, wo;  // [d x d]
  BasicTensor<T> mlp_norm;  // [d]
  BasicTensor<T> w_up;  // [d x d_ff]
  BasicTensor<T> w_down;  // [d_ff x d]
};

template <typename T>
struct NamedParameter {
  std::string name;
  BasicTensor<T> tensor;
};

template <typename T>
class Model {
 public:
  // Seeded scaled-normal initialization; throws ConfigError for invalid configs.
  explicit Model(ModelConfig config);

  const ModelConfig& config() const { return config_; }
  const LayerPartition& partition() const { return partition_; }

  // [n x d_model] rows of the embedding matrix.
  BasicTensor<T> embed(std::span<const int> tokens) const;

  // Runs the blocks of `layers` in order over `states` ([batch*k x d_model],
  // one row per entry of `positions` for each batch element). Without a
  // cache, attention covers the in-flight rows only. With a cache (batch 1),
  // every position below the last in-flight position that is not itself
  // in flight must be Filled at each layer, otherwise CacheIntegrityError.
  BasicTensor<T> forward_range(const BasicTensor<T>& states, LayerRange layers,
                               std::span<const int> positions, KvCache<T>* cache = nullptr,
                               bool write_cache = false) const;

  // Final norm then projection to vocabulary logits.
  BasicTensor<T> lm_head(const BasicTensor<T>& states) const;

  KvCache<T> make_cache() const;

  // Fixed serialization order: embedding, layers.{i}.{attn_norm,wq,wk,wv,wo,
  // mlp_norm,w_up,w_down} for each layer, final_norm, lm_head.
  std::vector<NamedParameter<T>> named_parameters() const;
  std::vector<BasicTensor<T>> parameters() const;
  std::size_t parameter_count() const;

  const std::vector<BlockWeights<T>>& blocks() const { return blocks_; }

 private:
  ModelConfig config_;
  LayerPartition partition_;
  BasicTensor<T> embedding_;   // [vocab x d]
  std::vector<BlockWeights<T>> blocks_;
  BasicTensor<T> final_norm_;  // [d]
  BasicTensor<T> head_;        // [d x vocab]
};

// Same weights at a different precision.
template <typename To, typename From>
Model<To> convert_model(const Model<From>& source);

}  // namespace dmtd
