#include "dmtd/model.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <string>

#include "dmtd/errors.hpp"

namespace dmtd {

const char* range_name(RangeId id) {
  switch (id) {
    case RangeId::Encoding: return "encoding";
    case RangeId::Thinking: return "thinking";
    case RangeId::Decoding: return "decoding";
  }
  return "unknown";
}

const char* slot_state_name(SlotState state) {
  switch (state) {
    case SlotState::Empty: return "Empty";
    case SlotState::Filled: return "Filled";
    case SlotState::PendingRefill: return "PendingRefill";
  }
  return "unknown";
}

LayerRange LayerPartition::get(RangeId id) const {
  switch (id) {
    case RangeId::Encoding: return encoding;
    case RangeId::Thinking: return thinking;
    case RangeId::Decoding: return decoding;
  }
  return {};
}

RangeId LayerPartition::owner(int layer) const {
  if (encoding.contains(layer)) return RangeId::Encoding;
  if (thinking.contains(layer)) return RangeId::Thinking;
  if (decoding.contains(layer)) return RangeId::Decoding;
  throw IndexError("layer " + std::to_string(layer) + " outside the partition");
}

void ModelConfig::validate() const {
  if (vocab_size < 1) throw ConfigError("vocab_size must be positive");
  if (d_model < 1) throw ConfigError("d_model must be positive");
  if (n_heads < 1 || d_model % n_heads != 0) throw ConfigError("n_heads must divide d_model");
  if ((d_model / n_heads) % 2 != 0) throw ConfigError("head dimension must be even for rotary encoding");
  if (d_ff < 1) throw ConfigError("d_ff must be positive");
  if (n_encoding < 0 || n_thinking < 0) throw ConfigError("layer counts must be non-negative");
  if (n_decoding < 1) throw ConfigError("n_decoding must be at least 1");
  if (n_encoding + n_thinking + n_decoding != n_layers) {
    throw ConfigError("n_encoding + n_thinking + n_decoding (" +
                      std::to_string(n_encoding + n_thinking + n_decoding) + ") != n_layers (" +
                      std::to_string(n_layers) + ")");
  }
  if (max_seq_len < 1) throw ConfigError("max_seq_len must be positive");
  if (!(norm_eps > 0.0)) throw ConfigError("norm_eps must be positive");
  if (!(rope_base > 0.0)) throw ConfigError("rope_base must be positive");
}

LayerPartition ModelConfig::partition() const {
  return {{0, n_encoding}, {n_encoding, n_encoding + n_thinking}, {n_encoding + n_thinking, n_layers}};
}

// ---------------------------------------------------------------------------
// KvCache

template <typename T>
KvCache<T>::KvCache(int n_layers, int max_seq_len, int width)
    : n_layers_(n_layers),
      max_seq_len_(max_seq_len),
      width_(width),
      keys_(static_cast<std::size_t>(n_layers) * max_seq_len * width, T(0)),
      values_(keys_.size(), T(0)),
      occupancy_(static_cast<std::size_t>(n_layers) * max_seq_len, SlotState::Empty) {}

template <typename T>
std::size_t KvCache<T>::slot(int layer, int position) const {
  if (layer < 0 || layer >= n_layers_ || position < 0 || position >= max_seq_len_) {
    throw IndexError("kv cache slot (" + std::to_string(layer) + ", " + std::to_string(position) +
                     ") out of range");
  }
  return static_cast<std::size_t>(layer) * max_seq_len_ + position;
}

template <typename T>
SlotState KvCache<T>::state(int layer, int position) const {
  return occupancy_[slot(layer, position)];
}

template <typename T>
void KvCache<T>::set_state(int layer, int position, SlotState state) {
  occupancy_[slot(layer, position)] = state;
  if (state != SlotState::Empty) length_ = std::max(length_, position + 1);
}

template <typename T>
void KvCache<T>::write(int layer, int position, std::span<const T> key, std::span<const T> value) {
  const std::size_t s = slot(layer, position);
  if (key.size() != static_cast<std::size_t>(width_) || value.size() != key.size()) {
    throw DimensionError("kv cache write: row width mismatch");
  }
  std::copy(key.begin(), key.end(), keys_.begin() + static_cast<std::ptrdiff_t>(s * width_));
  std::copy(value.begin(), value.end(), values_.begin() + static_cast<std::ptrdiff_t>(s * width_));
  set_state(layer, position, SlotState::Filled);
}

template <typename T>
std::span<const T> KvCache<T>::key(int layer, int position) const {
  return {keys_.data() + slot(layer, position) * width_, static_cast<std::size_t>(width_)};
}

template <typename T>
std::span<const T> KvCache<T>::value(int layer, int position) const {
  return {values_.data() + slot(layer, position) * width_, static_cast<std::size_t>(width_)};
}

template <typename T>
std::size_t KvCache<T>::count(SlotState state, LayerRange layers) const {
  std::size_t n = 0;
  for (int l = layers.begin; l < layers.end; ++l)
    for (int p = 0; p < length_; ++p) n += occupancy_[slot(l, p)] == state;
  return n;
}

// ---------------------------------------------------------------------------
// Model

namespace {

template <typename T>
BasicTensor<T> normal_matrix(std::size_t rows, std::size_t cols, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  std::vector<T> data(rows * cols);
  for (auto& v : data) v = static_cast<T>(dist(rng));
  return BasicTensor<T>::from_data({rows, cols}, std::move(data), true);
}

template <typename T>
BasicTensor<T> ones(std::size_t n) {
  return BasicTensor<T>::from_data({n}, std::vector<T>(n, T(1)), true);
}

}  // namespace

template <typename T>
Model<T>::Model(ModelConfig config) : config_(config) {
  config_.validate();
  partition_ = config_.partition();
  const auto d = static_cast<std::size_t>(config_.d_model);
  const auto ff = static_cast<std::size_t>(config_.d_ff);
  const auto vocab = static_cast<std::size_t>(config_.vocab_size);
  const double stddev = 0.02;
  const double out_stddev = stddev / std::sqrt(2.0 * config_.n_layers);

  std::mt19937_64 rng(config_.seed);
  embedding_ = normal_matrix<T>(vocab, d, stddev, rng);
  for (int l = 0; l < config_.n_layers; ++l) {
    BlockWeights<T> b;
    b.attn_norm = ones<T>(d);
    b.wq = normal_matrix<T>(d, d, stddev, rng);
    b.wk = normal_matrix<T>(d, d, stddev, rng);
    b.wv = normal_matrix<T>(d, d, stddev, rng);
    b.wo = normal_matrix<T>(d, d, out_stddev, rng);
    b.mlp_norm = ones<T>(d);
    b.w_up = normal_matrix<T>(d, ff, stddev, rng);
    b.w_down = normal_matrix<T>(ff, d, out_stddev, rng);
    blocks_.push_back(std::move(b));
  }
  final_norm_ = ones<T>(d);
  head_ = normal_matrix<T>(d, vocab, stddev, rng);
}

template <typename T>
BasicTensor<T> Model<T>::embed(std::span<const int> tokens) const {
  return embedding(embedding_, tokens);
}

template <typename T>
BasicTensor<T> Model<T>::forward_range(const BasicTensor<T>& states, LayerRange layers,
                                       std::span<const int> positions, KvCache<T>* cache,
                                       bool write_cache) const {
  if (layers.begin < 0 || layers.end > config_.n_layers || layers.begin > layers.end) {
    throw IndexError("forward_range: layer range out of bounds");
  }
  if (layers.empty()) return states;
  const std::size_t n = positions.size();
  if (n == 0 || states.rank() != 2 || states.rows() % n != 0 ||
      states.cols() != static_cast<std::size_t>(config_.d_model)) {
    throw DimensionError("forward_range: states do not match positions and d_model");
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (positions[i] < 0 || positions[i] >= config_.max_seq_len) {
      throw IndexError("forward_range: position " + std::to_string(positions[i]) + " outside max_seq_len");
    }
    if (i > 0 && positions[i] <= positions[i - 1]) {
      throw ContractError("forward_range: positions must be strictly increasing");
    }
  }
  if (cache && states.rows() != n) throw ContractError("forward_range: cached passes take a single sequence");

  // Positions read from the cache: everything below the last in-flight
  // position that is not itself in flight.
  std::vector<int> cached_positions;
  if (cache) {
    for (int p = 0, i = 0; p < positions.back(); ++p) {
      if (static_cast<std::size_t>(i) < n && positions[i] == p) {
        ++i;
        continue;
      }
      cached_positions.push_back(p);
    }
  }
  std::vector<int> key_positions = cached_positions;
  key_positions.insert(key_positions.end(), positions.begin(), positions.end());

  const auto d = static_cast<std::size_t>(config_.d_model);
  BasicTensor<T> x = states;
  for (int l = layers.begin; l < layers.end; ++l) {
    const BlockWeights<T>& b = blocks_[static_cast<std::size_t>(l)];
    auto h = rms_norm(x, b.attn_norm, config_.norm_eps);
    auto q = rope(matmul(h, b.wq), positions, config_.n_heads, config_.rope_base);
    auto k = rope(matmul(h, b.wk), positions, config_.n_heads, config_.rope_base);
    auto v = matmul(h, b.wv);

    BasicTensor<T> keys = k, values = v;
    if (cache && !cached_positions.empty()) {
      std::vector<T> ck, cv;
      ck.reserve(cached_positions.size() * d);
      cv.reserve(cached_positions.size() * d);
      for (int p : cached_positions) {
        const SlotState s = cache->state(l, p);
        if (s != SlotState::Filled) {
          throw CacheIntegrityError("attention at layer " + std::to_string(l) + " would read position " +
                                    std::to_string(p) + " in state " + slot_state_name(s));
        }
        auto kr = cache->key(l, p);
        auto vr = cache->value(l, p);
        ck.insert(ck.end(), kr.begin(), kr.end());
        cv.insert(cv.end(), vr.begin(), vr.end());
      }
      keys = concat_rows<T>({BasicTensor<T>::from_data({cached_positions.size(), d}, std::move(ck)), k});
      values = concat_rows<T>({BasicTensor<T>::from_data({cached_positions.size(), d}, std::move(cv)), v});
    }
    auto attn = causal_attention(q, keys, values, positions, key_positions, config_.n_heads);
    if (cache && write_cache) {
      for (std::size_t i = 0; i < n; ++i) {
        cache->write(l, positions[i], k.data().subspan(i * d, d), v.data().subspan(i * d, d));
      }
    }
    x = add(x, matmul(attn, b.wo));
    auto m = rms_norm(x, b.mlp_norm, config_.norm_eps);
    x = add(x, matmul(silu(matmul(m, b.w_up)), b.w_down));
  }
  return x;
}

template <typename T>
BasicTensor<T> Model<T>::lm_head(const BasicTensor<T>& states) const {
  return matmul(rms_norm(states, final_norm_, config_.norm_eps), head_);
}

template <typename T>
KvCache<T> Model<T>::make_cache() const {
  return KvCache<T>(config_.n_layers, config_.max_seq_len, config_.d_model);
}

template <typename T>
std::vector<NamedParameter<T>> Model<T>::named_parameters() const {
  std::vector<NamedParameter<T>> out;
  out.push_back({"embedding", embedding_});
  for (std::size_t l = 0; l < blocks_.size(); ++l) {
    const std::string prefix = "layers." + std::to_string(l) + ".";
    const auto& b = blocks_[l];
    out.push_back({prefix + "attn_norm", b.attn_norm});
    out.push_back({prefix + "wq", b.wq});
    out.push_back({prefix + "wk", b.wk});
    out.push_back({prefix + "wv", b.wv});
    out.push_back({prefix + "wo", b.wo});
    out.push_back({prefix + "mlp_norm", b.mlp_norm});
    out.push_back({prefix + "w_up", b.w_up});
    out.push_back({prefix + "w_down", b.w_down});
  }
  out.push_back({"final_norm", final_norm_});
  out.push_back({"lm_head", head_});
  return out;
}

template <typename T>
std::vector<BasicTensor<T>> Model<T>::parameters() const {
  std::vector<BasicTensor<T>> out;
  for (auto& p : named_parameters()) out.push_back(p.tensor);
  return out;
}

template <typename T>
std::size_t Model<T>::parameter_count() const {
  std::size_t n = 0;
  for (auto& p : named_parameters()) n += p.tensor.numel();
  return n;
}

template <typename To, typename From>
Model<To> convert_model(const Model<From>& source) {
  Model<To> out(source.config());
  auto src = source.named_parameters();
  auto dst = out.named_parameters();
  for (std::size_t i = 0; i < src.size(); ++i) {
    auto from = src[i].tensor.data();
    auto to = dst[i].tensor.mutable_data();
    for (std::size_t j = 0; j < from.size(); ++j) to[j] = static_cast<To>(from[j]);
  }
  return out;
}

template class KvCache<float>;
template class KvCache<double>;
template class Model<float>;
template class Model<double>;
template Model<double> convert_model<double, float>(const Model<float>&);
template Model<float> convert_model<float, double>(const Model<double>&);
template Model<float> convert_model<float, float>(const Model<float>&);

}  // namespace dmtd
