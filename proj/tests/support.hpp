#pragma once

// Independent reference implementations for the tests: a naive double
// precision transformer over row vectors, finite differences and small model
// factories.

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <span>
#include <vector>

#include "dmtd/model.hpp"
#include "dmtd/tensor.hpp"

namespace dmtd::testing {

using Rows = std::vector<std::vector<double>>;

inline ModelConfig tiny_config(int enc, int think, int dec, int d = 16, int heads = 2, int vocab = 257) {
  ModelConfig c;
  c.vocab_size = vocab;
  c.d_model = d;
  c.n_heads = heads;
  c.d_ff = 2 * d;
  c.n_layers = enc + think + dec;
  c.n_encoding = enc;
  c.n_thinking = think;
  c.n_decoding = dec;
  c.max_seq_len = 96;
  return c;
}

// Re-draws every parameter so residual contributions are far from negligible.
template <typename T>
void randomize(Model<T>& model, std::uint64_t seed, double scale = 0.25) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd(0.0, 1.0);
  for (auto& p : model.named_parameters()) {
    auto data = p.tensor.mutable_data();
    const bool gain = p.name.find("norm") != std::string::npos;
    const double fan_in = p.tensor.rank() == 2 ? static_cast<double>(p.tensor.shape()[0]) : 1.0;
    for (auto& v : data) {
      v = static_cast<T>(gain ? 1.0 + 0.2 * nd(rng) : nd(rng) * scale * (p.name == "embedding" ? 4.0 : 4.0 / std::sqrt(fan_in)));
    }
  }
}

inline std::vector<int> random_tokens(std::size_t n, int vocab, std::mt19937_64& rng) {
  std::vector<int> t(n);
  for (auto& v : t) v = static_cast<int>(rng() % static_cast<std::uint64_t>(vocab));
  return t;
}

template <typename T>
std::vector<double> to_vec(std::span<const T> s) {
  return {s.begin(), s.end()};
}

template <typename T>
Rows to_rows(const BasicTensor<T>& t) {
  Rows out(t.rows(), std::vector<double>(t.cols()));
  for (std::size_t r = 0; r < t.rows(); ++r)
    for (std::size_t c = 0; c < t.cols(); ++c) out[r][c] = static_cast<double>(t.data()[r * t.cols() + c]);
  return out;
}

inline double max_abs_diff(const Rows& a, const Rows& b) {
  double m = 0.0;
  for (std::size_t r = 0; r < a.size(); ++r)
    for (std::size_t c = 0; c < a[r].size(); ++c) m = std::max(m, std::abs(a[r][c] - b[r][c]));
  return m;
}

// --- naive linear algebra -------------------------------------------------

template <typename T>
Rows weight_rows(const BasicTensor<T>& w) {
  return to_rows(w);
}

inline std::vector<double> vec_mat(const std::vector<double>& x, const Rows& w) {
  std::vector<double> out(w[0].size(), 0.0);
  for (std::size_t i = 0; i < x.size(); ++i)
    for (std::size_t j = 0; j < out.size(); ++j) out[j] += x[i] * w[i][j];
  return out;
}

inline Rows naive_matmul(const Rows& a, const Rows& b) {
  Rows out(a.size(), std::vector<double>(b[0].size(), 0.0));
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < b[0].size(); ++j)
      for (std::size_t k = 0; k < b.size(); ++k) out[i][j] += a[i][k] * b[k][j];
  return out;
}

inline std::vector<double> naive_rms_norm(const std::vector<double>& x, std::span<const double> gain, double eps) {
  double ms = 0.0;
  for (double v : x) ms += v * v;
  ms /= static_cast<double>(x.size());
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] / std::sqrt(ms + eps) * gain[i];
  return out;
}

inline std::vector<double> naive_rope(std::vector<double> x, int pos, int heads, double base) {
  const std::size_t dh = x.size() / static_cast<std::size_t>(heads), half = dh / 2;
  for (int h = 0; h < heads; ++h) {
    double* v = x.data() + static_cast<std::size_t>(h) * dh;
    for (std::size_t j = 0; j < half; ++j) {
      const double a = pos * std::pow(base, -2.0 * static_cast<double>(j) / static_cast<double>(dh));
      const double x0 = v[j], x1 = v[j + half];
      v[j] = x0 * std::cos(a) - x1 * std::sin(a);
      v[j + half] = x0 * std::sin(a) + x1 * std::cos(a);
    }
  }
  return x;
}

inline double silu(double v) { return v / (1.0 + std::exp(-v)); }

struct NaiveLayerKv {
  Rows keys;    // post-rotary
  Rows values;
};

// Layers [begin, end) over one sequence of rows at positions 0..n-1, causal.
// Optionally returns per-layer keys/values.
template <typename T>
Rows naive_layers(const Model<T>& model, Rows x, int begin, int end, std::vector<NaiveLayerKv>* kv = nullptr) {
  const auto& cfg = model.config();
  const std::size_t n = x.size(), d = static_cast<std::size_t>(cfg.d_model);
  const std::size_t heads = static_cast<std::size_t>(cfg.n_heads), dh = d / heads;
  for (int l = begin; l < end; ++l) {
    const auto& b = model.blocks()[static_cast<std::size_t>(l)];
    const auto an = to_vec(b.attn_norm.data()), mn = to_vec(b.mlp_norm.data());
    const Rows wq = weight_rows(b.wq), wk = weight_rows(b.wk), wv = weight_rows(b.wv), wo = weight_rows(b.wo);
    const Rows wu = weight_rows(b.w_up), wd = weight_rows(b.w_down);
    Rows q(n), k(n), v(n);
    for (std::size_t i = 0; i < n; ++i) {
      const auto h = naive_rms_norm(x[i], an, cfg.norm_eps);
      q[i] = naive_rope(vec_mat(h, wq), static_cast<int>(i), cfg.n_heads, cfg.rope_base);
      k[i] = naive_rope(vec_mat(h, wk), static_cast<int>(i), cfg.n_heads, cfg.rope_base);
      v[i] = vec_mat(h, wv);
    }
    if (kv) kv->push_back({k, v});
    Rows next = x;
    for (std::size_t i = 0; i < n; ++i) {
      std::vector<double> attn(d, 0.0);
      for (std::size_t h = 0; h < heads; ++h) {
        std::vector<double> s(i + 1);
        double mx = -1e300;
        for (std::size_t j = 0; j <= i; ++j) {
          double dot = 0.0;
          for (std::size_t c = 0; c < dh; ++c) dot += q[i][h * dh + c] * k[j][h * dh + c];
          s[j] = dot / std::sqrt(static_cast<double>(dh));
          mx = std::max(mx, s[j]);
        }
        double total = 0.0;
        for (auto& e : s) total += (e = std::exp(e - mx));
        for (std::size_t j = 0; j <= i; ++j)
          for (std::size_t c = 0; c < dh; ++c) attn[h * dh + c] += s[j] / total * v[j][h * dh + c];
      }
      const auto o = vec_mat(attn, wo);
      for (std::size_t c = 0; c < d; ++c) next[i][c] += o[c];
      const auto m = naive_rms_norm(next[i], mn, cfg.norm_eps);
      auto up = vec_mat(m, wu);
      for (auto& e : up) e = silu(e);
      const auto down = vec_mat(up, wd);
      for (std::size_t c = 0; c < d; ++c) next[i][c] += down[c];
    }
    x = std::move(next);
  }
  return x;
}

template <typename T>
Rows naive_embed(const Model<T>& model, std::span<const int> tokens) {
  const auto emb = to_rows(model.named_parameters().front().tensor);
  Rows out;
  for (int t : tokens) out.push_back(emb[static_cast<std::size_t>(t)]);
  return out;
}

template <typename T>
Rows naive_head(const Model<T>& model, const Rows& x) {
  const auto params = model.named_parameters();
  const auto gain = to_vec(params[params.size() - 2].tensor.data());
  const Rows head = to_rows(params.back().tensor);
  Rows out;
  for (const auto& r : x) out.push_back(vec_mat(naive_rms_norm(r, gain, model.config().norm_eps), head));
  return out;
}

// Per-position routing: decoding input at p is base[p] + h_think[p] when
// (p - anchor) mod tau == 0 and base[p] otherwise.
template <typename T>
Rows routing_oracle_logits(const Model<T>& model, std::span<const int> tokens, int tau, int anchor,
                           bool encoding_base) {
  const auto part = model.partition();
  const Rows emb = naive_embed(model, tokens);
  const Rows enc = naive_layers(model, emb, part.encoding.begin, part.encoding.end);
  const Rows think = naive_layers(model, enc, part.thinking.begin, part.thinking.end);
  const Rows& base = encoding_base ? enc : emb;
  Rows dec_in = base;
  for (std::size_t p = 0; p < tokens.size(); ++p) {
    const long diff = static_cast<long>(p) - anchor;
    if (((diff % tau) + tau) % tau == 0) {
      for (std::size_t c = 0; c < dec_in[p].size(); ++c) dec_in[p][c] += think[p][c];
    }
  }
  return naive_head(model, naive_layers(model, dec_in, part.decoding.begin, part.decoding.end));
}

// --- finite differences ---------------------------------------------------

// ||analytic - numeric|| / (||analytic|| + ||numeric||) over the checked
// entries of `leaf`, with central differences of step h. At most
// `max_entries` entries are probed (evenly strided).
inline double fd_relative_error(const std::function<Tensor64()>& loss_fn, Tensor64 leaf,
                                std::size_t max_entries = 64, double h = 1e-6) {
  leaf.clear_grad();
  auto loss = loss_fn();
  loss.backward();
  const std::vector<double> analytic(leaf.grad().begin(), leaf.grad().end());
  auto data = leaf.mutable_data();
  const std::size_t n = data.size();
  const std::size_t stride = std::max<std::size_t>(1, n / max_entries);
  double diff2 = 0.0, a2 = 0.0, n2 = 0.0;
  for (std::size_t i = 0; i < n; i += stride) {
    const double orig = data[i];
    data[i] = orig + h;
    const double up = loss_fn().item();
    data[i] = orig - h;
    const double down = loss_fn().item();
    data[i] = orig;
    const double numeric = (up - down) / (2.0 * h);
    diff2 += (analytic[i] - numeric) * (analytic[i] - numeric);
    a2 += analytic[i] * analytic[i];
    n2 += numeric * numeric;
  }
  const double denom = std::sqrt(a2) + std::sqrt(n2);
  return denom == 0.0 ? 0.0 : std::sqrt(diff2) / denom;
}

inline Tensor64 random_leaf(Shape shape, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> nd(0.0, scale);
  std::vector<double> v(shape_numel(shape));
  for (auto& e : v) e = nd(rng);
  return Tensor64::from_data(std::move(shape), std::move(v), true);
}

// Fixed random projection so every output element influences the loss.
inline Tensor64 project(const Tensor64& y, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd;
  std::vector<double> w(y.numel());
  for (auto& e : w) e = nd(rng);
  return sum(mul(y, Tensor64::from_data(y.shape(), std::move(w))));
}

}  // namespace dmtd::testing
