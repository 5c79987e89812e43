#include "dmtd/tensor.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>
#include <unordered_set>
#include <utility>

#include "dmtd/errors.hpp"

namespace dmtd {

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

namespace {

thread_local bool g_grad_enabled = true;

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using ConstMap = Eigen::Map<const RowMat<T>>;
template <typename T>
using MutMap = Eigen::Map<RowMat<T>>;

template <typename T>
using NodePtr = std::shared_ptr<detail::Node<T>>;

std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += "x";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

// Builds an op result. The backward closure is recorded only while grad mode
// is on and at least one parent needs gradients.
template <typename T>
BasicTensor<T> make_result(Shape shape, std::vector<T> data, std::vector<NodePtr<T>> parents,
                           std::function<void(detail::Node<T>&)> backward) {
  auto node = std::make_shared<detail::Node<T>>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  const bool track =
      g_grad_enabled && std::any_of(parents.begin(), parents.end(),
                                    [](const NodePtr<T>& p) { return p->requires_grad; });
  if (track) {
    node->requires_grad = true;
    node->parents = std::move(parents);
    node->backward = std::move(backward);
  }
  return BasicTensor<T>(std::move(node));
}

template <typename T>
void require_2d(const BasicTensor<T>& t, const char* op) {
  if (!t.defined() || t.rank() != 2) {
    throw DimensionError(std::string(op) + ": expected a 2-D tensor");
  }
}

}  // namespace

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

// ---------------------------------------------------------------------------
// BasicTensor

template <typename T>
BasicTensor<T> BasicTensor<T>::zeros(Shape shape, bool requires_grad) {
  std::vector<T> data(shape_numel(shape), T(0));
  return from_data(std::move(shape), std::move(data), requires_grad);
}

template <typename T>
BasicTensor<T> BasicTensor<T>::from_data(Shape shape, std::vector<T> data, bool requires_grad) {
  if (shape_numel(shape) != data.size()) {
    throw DimensionError("tensor: shape " + shape_str(shape) + " does not match " +
                         std::to_string(data.size()) + " values");
  }
  auto node = std::make_shared<detail::Node<T>>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  node->requires_grad = requires_grad;
  return BasicTensor(std::move(node));
}

template <typename T>
BasicTensor<T> BasicTensor<T>::scalar(T value, bool requires_grad) {
  return from_data(Shape{}, std::vector<T>{value}, requires_grad);
}

template <typename T>
std::size_t BasicTensor<T>::cols() const {
  return node_->shape.empty() ? 1 : node_->shape.back();
}

template <typename T>
std::size_t BasicTensor<T>::rows() const {
  const std::size_t c = cols();
  return c == 0 ? 0 : numel() / c;
}

template <typename T>
T BasicTensor<T>::item() const {
  if (numel() != 1) throw ContractError("item(): tensor has " + std::to_string(numel()) + " elements");
  return node_->data[0];
}

template <typename T>
BasicTensor<T> BasicTensor<T>::detach() const {
  return from_data(node_->shape, node_->data, false);
}

template <typename T>
void BasicTensor<T>::backward() const {
  if (!defined() || numel() != 1) {
    throw ContractError("backward(): loss must be a scalar");
  }
  if (!node_->requires_grad) {
    throw ContractError("backward(): loss was not produced by recorded operations");
  }

  // Iterative post-order DFS gives a topological order (parents first).
  std::vector<detail::Node<T>*> order;
  std::unordered_set<detail::Node<T>*> seen;
  std::vector<std::pair<detail::Node<T>*, bool>> stack{{node_.get(), false}};
  while (!stack.empty()) {
    auto [n, expanded] = stack.back();
    stack.pop_back();
    if (expanded) {
      order.push_back(n);
      continue;
    }
    if (!seen.insert(n).second) continue;
    stack.push_back({n, true});
    for (auto it = n->parents.rbegin(); it != n->parents.rend(); ++it) {
      if ((*it)->requires_grad && !seen.count(it->get())) stack.push_back({it->get(), false});
    }
  }

  node_->grad_buffer()[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::Node<T>* n = *it;
    if (n->backward && !n->grad.empty()) n->backward(*n);
  }
  // The tape is single use.
  for (detail::Node<T>* n : order) {
    n->backward = nullptr;
    n->parents.clear();
  }
}

// ---------------------------------------------------------------------------
// Ops

template <typename T>
BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  require_2d(a, "matmul");
  require_2d(b, "matmul");
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  if (b.shape()[0] != k) {
    throw DimensionError("matmul: inner dimensions differ " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
  }
  std::vector<T> out(m * n);
  MutMap<T>(out.data(), m, n).noalias() =
      ConstMap<T>(a.data().data(), m, k) * ConstMap<T>(b.data().data(), k, n);
  return make_result<T>({m, n}, std::move(out), {a.node(), b.node()},
                        [m, k, n](detail::Node<T>& self) {
                          auto& pa = *self.parents[0];
                          auto& pb = *self.parents[1];
                          ConstMap<T> g(self.grad.data(), m, n);
                          if (pa.requires_grad) {
                            MutMap<T>(pa.grad_buffer().data(), m, k).noalias() +=
                                g * ConstMap<T>(pb.data.data(), k, n).transpose();
                          }
                          if (pb.requires_grad) {
                            MutMap<T>(pb.grad_buffer().data(), k, n).noalias() +=
                                ConstMap<T>(pa.data.data(), m, k).transpose() * g;
                          }
                        });
}

template <typename T>
BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError("add: shapes differ " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
  return make_result<T>(a.shape(), std::move(out), {a.node(), b.node()}, [](detail::Node<T>& self) {
    for (auto& p : self.parents) {
      if (!p->requires_grad) continue;
      auto& g = p->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
  });
}

template <typename T>
BasicTensor<T> mul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError("mul: shapes differ " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
  return make_result<T>(a.shape(), std::move(out), {a.node(), b.node()}, [](detail::Node<T>& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    if (pa.requires_grad) {
      auto& g = pa.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pb.data[i];
    }
    if (pb.requires_grad) {
      auto& g = pb.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pa.data[i];
    }
  });
}

template <typename T>
BasicTensor<T> scale(const BasicTensor<T>& a, T factor) {
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * factor;
  return make_result<T>(a.shape(), std::move(out), {a.node()}, [factor](detail::Node<T>& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * factor;
  });
}

template <typename T>
BasicTensor<T> mul_rows(const BasicTensor<T>& a, std::span<const T> factors) {
  const std::size_t rows = a.rows(), cols = a.cols();
  if (factors.size() != rows) {
    throw DimensionError("mul_rows: " + std::to_string(factors.size()) + " factors for " +
                         std::to_string(rows) + " rows");
  }
  std::vector<T> f(factors.begin(), factors.end());
  std::vector<T> out(a.numel());
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] = a.data()[r * cols + c] * f[r];
  return make_result<T>(a.shape(), std::move(out), {a.node()},
                        [f = std::move(f), cols](detail::Node<T>& self) {
                          auto& g = self.parents[0]->grad_buffer();
                          for (std::size_t r = 0; r < f.size(); ++r)
                            for (std::size_t c = 0; c < cols; ++c)
                              g[r * cols + c] += self.grad[r * cols + c] * f[r];
                        });
}

template <typename T>
BasicTensor<T> sum(const BasicTensor<T>& a) {
  T total = T(0);
  for (T v : a.data()) total += v;
  return make_result<T>(Shape{}, {total}, {a.node()}, [](detail::Node<T>& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (auto& v : g) v += self.grad[0];
  });
}

template <typename T>
BasicTensor<T> silu(const BasicTensor<T>& a) {
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const T x = a.data()[i];
    out[i] = x / (T(1) + std::exp(-x));
  }
  return make_result<T>(a.shape(), std::move(out), {a.node()}, [](detail::Node<T>& self) {
    auto& p = *self.parents[0];
    auto& g = p.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) {
      const T x = p.data[i];
      const T s = T(1) / (T(1) + std::exp(-x));
      g[i] += self.grad[i] * s * (T(1) + x * (T(1) - s));
    }
  });
}

template <typename T>
BasicTensor<T> softmax(const BasicTensor<T>& x, int axis) {
  const int rank = static_cast<int>(x.rank());
  if (rank == 0) throw DimensionError("softmax: scalar input");
  if (axis < 0) axis += rank;
  if (axis < 0 || axis >= rank) throw DimensionError("softmax: invalid axis");
  const Shape& s = x.shape();
  std::size_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= s[i];
  for (int i = axis + 1; i < rank; ++i) inner *= s[i];
  const std::size_t len = s[axis];

  std::vector<T> out(x.numel());
  for (T v : x.data()) {
    if (!std::isfinite(v)) throw NumericError("softmax: non-finite input");
  }
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * len * inner + in;
      T mx = x.data()[base];
      for (std::size_t j = 1; j < len; ++j) mx = std::max(mx, x.data()[base + j * inner]);
      T total = T(0);
      for (std::size_t j = 0; j < len; ++j) {
        const T e = std::exp(x.data()[base + j * inner] - mx);
        out[base + j * inner] = e;
        total += e;
      }
      for (std::size_t j = 0; j < len; ++j) out[base + j * inner] /= total;
    }
  }
  return make_result<T>(s, out, {x.node()}, [out, outer, inner, len](detail::Node<T>& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t in = 0; in < inner; ++in) {
        const std::size_t base = o * len * inner + in;
        T dot = T(0);
        for (std::size_t j = 0; j < len; ++j) dot += self.grad[base + j * inner] * out[base + j * inner];
        for (std::size_t j = 0; j < len; ++j) {
          const std::size_t i = base + j * inner;
          g[i] += out[i] * (self.grad[i] - dot);
        }
      }
    }
  });
}

template <typename T>
BasicTensor<T> rms_norm(const BasicTensor<T>& x, const BasicTensor<T>& gain, double eps) {
  const std::size_t d = x.cols(), rows = x.rows();
  if (gain.numel() != d) {
    throw DimensionError("rms_norm: gain length " + std::to_string(gain.numel()) +
                         " does not match trailing dimension " + std::to_string(d));
  }
  std::vector<T> out(x.numel());
  std::vector<T> inv_rms(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = x.data().data() + r * d;
    T ms = T(0);
    for (std::size_t c = 0; c < d; ++c) ms += row[c] * row[c];
    ms /= static_cast<T>(d);
    const T inv = T(1) / std::sqrt(ms + static_cast<T>(eps));
    inv_rms[r] = inv;
    for (std::size_t c = 0; c < d; ++c) out[r * d + c] = row[c] * inv * gain.data()[c];
  }
  return make_result<T>(
      x.shape(), std::move(out), {x.node(), gain.node()},
      [inv_rms = std::move(inv_rms), d, rows](detail::Node<T>& self) {
        auto& px = *self.parents[0];
        auto& pg = *self.parents[1];
        for (std::size_t r = 0; r < rows; ++r) {
          const T* xr = px.data.data() + r * d;
          const T* dy = self.grad.data() + r * d;
          const T inv = inv_rms[r];
          if (px.requires_grad) {
            T dot = T(0);
            for (std::size_t c = 0; c < d; ++c) dot += dy[c] * pg.data[c] * xr[c];
            const T coeff = dot * inv * inv * inv / static_cast<T>(d);
            T* gx = px.grad_buffer().data() + r * d;
            for (std::size_t c = 0; c < d; ++c) gx[c] += inv * pg.data[c] * dy[c] - xr[c] * coeff;
          }
          if (pg.requires_grad) {
            auto& gg = pg.grad_buffer();
            for (std::size_t c = 0; c < d; ++c) gg[c] += dy[c] * xr[c] * inv;
          }
        }
      });
}

template <typename T>
BasicTensor<T> embedding(const BasicTensor<T>& weight, std::span<const int> ids) {
  require_2d(weight, "embedding");
  const std::size_t vocab = weight.shape()[0], d = weight.shape()[1];
  std::vector<int> idx(ids.begin(), ids.end());
  const std::size_t n = idx.size();
  std::vector<T> out(n * d);
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] < 0 || static_cast<std::size_t>(idx[i]) >= vocab) {
      throw IndexError("embedding: token id " + std::to_string(idx[i]) + " outside vocabulary of " +
                       std::to_string(vocab));
    }
    std::copy_n(weight.data().data() + static_cast<std::size_t>(idx[i]) * d, d, out.data() + i * d);
  }
  return make_result<T>({n, d}, std::move(out), {weight.node()},
                        [idx = std::move(idx), d](detail::Node<T>& self) {
                          auto& g = self.parents[0]->grad_buffer();
                          for (std::size_t i = 0; i < idx.size(); ++i) {
                            T* row = g.data() + static_cast<std::size_t>(idx[i]) * d;
                            for (std::size_t c = 0; c < d; ++c) row[c] += self.grad[i * d + c];
                          }
                        });
}

template <typename T>
BasicTensor<T> rope(const BasicTensor<T>& x, std::span<const int> positions, int n_heads, double base) {
  require_2d(x, "rope");
  const std::size_t rows = x.shape()[0], d = x.shape()[1], n = positions.size();
  if (n_heads <= 0 || d % static_cast<std::size_t>(n_heads) != 0) {
    throw DimensionError("rope: model width not divisible by head count");
  }
  const std::size_t heads = static_cast<std::size_t>(n_heads), dh = d / heads, half = dh / 2;
  if (dh % 2 != 0) throw DimensionError("rope: head dimension must be even");
  if (n == 0 || rows % n != 0) throw DimensionError("rope: rows not a multiple of positions");

  // Angles depend only on (position, frequency index) so the incremental and
  // batched paths see bit-identical rotations.
  std::vector<T> cosv(n * half), sinv(n * half);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < half; ++j) {
      const double freq = std::pow(base, -2.0 * static_cast<double>(j) / static_cast<double>(dh));
      const double angle = static_cast<double>(positions[i]) * freq;
      cosv[i * half + j] = static_cast<T>(std::cos(angle));
      sinv[i * half + j] = static_cast<T>(std::sin(angle));
    }
  }
  std::vector<T> out(x.numel());
  for (std::size_t r = 0; r < rows; ++r) {
    const std::size_t pi = r % n;
    for (std::size_t h = 0; h < heads; ++h) {
      const T* in = x.data().data() + r * d + h * dh;
      T* o = out.data() + r * d + h * dh;
      for (std::size_t j = 0; j < half; ++j) {
        const T c = cosv[pi * half + j], s = sinv[pi * half + j];
        o[j] = in[j] * c - in[j + half] * s;
        o[j + half] = in[j] * s + in[j + half] * c;
      }
    }
  }
  return make_result<T>(
      x.shape(), std::move(out), {x.node()},
      [cosv = std::move(cosv), sinv = std::move(sinv), rows, d, n, heads, dh, half](detail::Node<T>& self) {
        auto& g = self.parents[0]->grad_buffer();
        for (std::size_t r = 0; r < rows; ++r) {
          const std::size_t pi = r % n;
          for (std::size_t h = 0; h < heads; ++h) {
            const T* dy = self.grad.data() + r * d + h * dh;
            T* gx = g.data() + r * d + h * dh;
            for (std::size_t j = 0; j < half; ++j) {
              const T c = cosv[pi * half + j], s = sinv[pi * half + j];
              gx[j] += dy[j] * c + dy[j + half] * s;
              gx[j + half] += -dy[j] * s + dy[j + half] * c;
            }
          }
        }
      });
}

template <typename T>
BasicTensor<T> causal_attention(const BasicTensor<T>& q, const BasicTensor<T>& k, const BasicTensor<T>& v,
                                std::span<const int> query_positions, std::span<const int> key_positions,
                                int n_heads) {
  require_2d(q, "causal_attention");
  require_2d(k, "causal_attention");
  require_2d(v, "causal_attention");
  const std::size_t d = q.shape()[1], nq = query_positions.size(), nk = key_positions.size();
  if (k.shape()[1] != d || v.shape() != k.shape()) throw DimensionError("causal_attention: q/k/v widths differ");
  if (n_heads <= 0 || d % static_cast<std::size_t>(n_heads) != 0) {
    throw DimensionError("causal_attention: width not divisible by head count");
  }
  if (nq == 0 || q.shape()[0] % nq != 0) throw DimensionError("causal_attention: query rows vs positions");
  const std::size_t batch = q.shape()[0] / nq;
  if (k.shape()[0] != batch * nk) throw DimensionError("causal_attention: key rows vs positions");
  const std::size_t heads = static_cast<std::size_t>(n_heads), dh = d / heads;
  const T scale_factor = T(1) / std::sqrt(static_cast<T>(dh));

  std::vector<int> qpos(query_positions.begin(), query_positions.end());
  std::vector<int> kpos(key_positions.begin(), key_positions.end());
  // visible[i*nk + j]
  std::vector<std::uint8_t> visible(nq * nk);
  for (std::size_t i = 0; i < nq; ++i) {
    bool any = false;
    for (std::size_t j = 0; j < nk; ++j) {
      visible[i * nk + j] = kpos[j] <= qpos[i];
      any = any || visible[i * nk + j];
    }
    if (!any) throw ContractError("causal_attention: query at position " + std::to_string(qpos[i]) + " sees no keys");
  }

  const T* Q = q.data().data();
  const T* K = k.data().data();
  const T* V = v.data().data();
  std::vector<T> probs(batch * heads * nq * nk, T(0));
  std::vector<T> out(batch * nq * d, T(0));
  std::vector<T> scores(nk);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t h = 0; h < heads; ++h) {
      for (std::size_t i = 0; i < nq; ++i) {
        const T* qi = Q + (b * nq + i) * d + h * dh;
        T mx = -std::numeric_limits<T>::infinity();
        for (std::size_t j = 0; j < nk; ++j) {
          if (!visible[i * nk + j]) continue;
          const T* kj = K + (b * nk + j) * d + h * dh;
          T dot = T(0);
          for (std::size_t c = 0; c < dh; ++c) dot += qi[c] * kj[c];
          scores[j] = dot * scale_factor;
          mx = std::max(mx, scores[j]);
        }
        T* p = probs.data() + ((b * heads + h) * nq + i) * nk;
        T total = T(0);
        for (std::size_t j = 0; j < nk; ++j) {
          if (!visible[i * nk + j]) continue;
          p[j] = std::exp(scores[j] - mx);
          total += p[j];
        }
        T* oi = out.data() + (b * nq + i) * d + h * dh;
        for (std::size_t j = 0; j < nk; ++j) {
          if (!visible[i * nk + j]) continue;
          p[j] /= total;
          const T* vj = V + (b * nk + j) * d + h * dh;
          for (std::size_t c = 0; c < dh; ++c) oi[c] += p[j] * vj[c];
        }
      }
    }
  }

  return make_result<T>(
      {batch * nq, d}, std::move(out), {q.node(), k.node(), v.node()},
      [probs = std::move(probs), visible = std::move(visible), batch, heads, nq, nk, d, dh,
       scale_factor](detail::Node<T>& self) {
        auto& pq = *self.parents[0];
        auto& pk = *self.parents[1];
        auto& pv = *self.parents[2];
        T* gq = pq.requires_grad ? pq.grad_buffer().data() : nullptr;
        T* gk = pk.requires_grad ? pk.grad_buffer().data() : nullptr;
        T* gv = pv.requires_grad ? pv.grad_buffer().data() : nullptr;
        std::vector<T> dp(nk);
        for (std::size_t b = 0; b < batch; ++b) {
          for (std::size_t h = 0; h < heads; ++h) {
            for (std::size_t i = 0; i < nq; ++i) {
              const T* p = probs.data() + ((b * heads + h) * nq + i) * nk;
              const T* dout = self.grad.data() + (b * nq + i) * d + h * dh;
              T weighted = T(0);
              for (std::size_t j = 0; j < nk; ++j) {
                if (!visible[i * nk + j]) continue;
                const T* vj = pv.data.data() + (b * nk + j) * d + h * dh;
                T dot = T(0);
                for (std::size_t c = 0; c < dh; ++c) dot += dout[c] * vj[c];
                dp[j] = dot;
                weighted += p[j] * dot;
                if (gv) {
                  T* gvj = gv + (b * nk + j) * d + h * dh;
                  for (std::size_t c = 0; c < dh; ++c) gvj[c] += p[j] * dout[c];
                }
              }
              const T* qi = pq.data.data() + (b * nq + i) * d + h * dh;
              T* gqi = gq ? gq + (b * nq + i) * d + h * dh : nullptr;
              for (std::size_t j = 0; j < nk; ++j) {
                if (!visible[i * nk + j]) continue;
                const T ds = p[j] * (dp[j] - weighted) * scale_factor;
                const T* kj = pk.data.data() + (b * nk + j) * d + h * dh;
                if (gqi) {
                  for (std::size_t c = 0; c < dh; ++c) gqi[c] += ds * kj[c];
                }
                if (gk) {
                  T* gkj = gk + (b * nk + j) * d + h * dh;
                  for (std::size_t c = 0; c < dh; ++c) gkj[c] += ds * qi[c];
                }
              }
            }
          }
        }
      });
}

template <typename T>
BasicTensor<T> cross_entropy(const BasicTensor<T>& logits, std::span<const int> targets,
                             std::span<const std::uint8_t> ignore) {
  require_2d(logits, "cross_entropy");
  const std::size_t n = logits.shape()[0], vocab = logits.shape()[1];
  if (targets.size() != n) throw DimensionError("cross_entropy: target count differs from rows");
  if (!ignore.empty() && ignore.size() != n) throw DimensionError("cross_entropy: ignore mask length");
  std::vector<int> tgt(targets.begin(), targets.end());
  std::vector<std::uint8_t> skip(n, 0);
  if (!ignore.empty()) std::copy(ignore.begin(), ignore.end(), skip.begin());
  std::size_t count = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (tgt[i] < 0 || static_cast<std::size_t>(tgt[i]) >= vocab) {
      throw IndexError("cross_entropy: target " + std::to_string(tgt[i]) + " outside vocabulary");
    }
    if (!skip[i]) ++count;
  }

  // Softmax rows are kept for the backward pass.
  std::vector<T> soft(n * vocab, T(0));
  T total = T(0);
  for (std::size_t i = 0; i < n; ++i) {
    if (skip[i]) continue;
    const T* row = logits.data().data() + i * vocab;
    T mx = row[0];
    for (std::size_t c = 1; c < vocab; ++c) mx = std::max(mx, row[c]);
    if (!std::isfinite(mx)) throw NumericError("cross_entropy: non-finite logits");
    T z = T(0);
    for (std::size_t c = 0; c < vocab; ++c) {
      soft[i * vocab + c] = std::exp(row[c] - mx);
      z += soft[i * vocab + c];
    }
    for (std::size_t c = 0; c < vocab; ++c) soft[i * vocab + c] /= z;
    total += std::log(z) + mx - row[tgt[i]];
  }
  const T loss = count ? total / static_cast<T>(count) : T(0);
  return make_result<T>(Shape{}, {loss}, {logits.node()},
                        [soft = std::move(soft), tgt = std::move(tgt), skip = std::move(skip), n, vocab,
                         count](detail::Node<T>& self) {
                          if (count == 0) return;
                          auto& g = self.parents[0]->grad_buffer();
                          const T coeff = self.grad[0] / static_cast<T>(count);
                          for (std::size_t i = 0; i < n; ++i) {
                            if (skip[i]) continue;
                            for (std::size_t c = 0; c < vocab; ++c) g[i * vocab + c] += coeff * soft[i * vocab + c];
                            g[i * vocab + static_cast<std::size_t>(tgt[i])] -= coeff;
                          }
                        });
}

template <typename T>
BasicTensor<T> slice_rows(const BasicTensor<T>& a, std::size_t begin, std::size_t end) {
  require_2d(a, "slice_rows");
  const std::size_t cols = a.shape()[1];
  if (begin > end || end > a.shape()[0]) throw IndexError("slice_rows: range out of bounds");
  std::vector<T> out(a.data().begin() + static_cast<std::ptrdiff_t>(begin * cols),
                     a.data().begin() + static_cast<std::ptrdiff_t>(end * cols));
  return make_result<T>({end - begin, cols}, std::move(out), {a.node()},
                        [begin, cols](detail::Node<T>& self) {
                          auto& g = self.parents[0]->grad_buffer();
                          for (std::size_t i = 0; i < self.grad.size(); ++i) g[begin * cols + i] += self.grad[i];
                        });
}

template <typename T>
BasicTensor<T> concat_rows(const std::vector<BasicTensor<T>>& parts) {
  if (parts.empty()) throw DimensionError("concat_rows: no inputs");
  const std::size_t cols = parts.front().cols();
  std::size_t rows = 0;
  std::vector<NodePtr<T>> parents;
  for (const auto& p : parts) {
    require_2d(p, "concat_rows");
    if (p.cols() != cols) throw DimensionError("concat_rows: column counts differ");
    rows += p.rows();
    parents.push_back(p.node());
  }
  std::vector<T> out;
  out.reserve(rows * cols);
  for (const auto& p : parts) out.insert(out.end(), p.data().begin(), p.data().end());
  return make_result<T>({rows, cols}, std::move(out), std::move(parents), [](detail::Node<T>& self) {
    std::size_t offset = 0;
    for (auto& p : self.parents) {
      if (p->requires_grad) {
        auto& g = p->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[offset + i];
      }
      offset += p->data.size();
    }
  });
}

#define DMTD_INSTANTIATE(T)                                                                          \
  template class BasicTensor<T>;                                                                     \
  template BasicTensor<T> matmul(const BasicTensor<T>&, const BasicTensor<T>&);                      \
  template BasicTensor<T> add(const BasicTensor<T>&, const BasicTensor<T>&);                         \
  template BasicTensor<T> mul(const BasicTensor<T>&, const BasicTensor<T>&);                         \
  template BasicTensor<T> scale(const BasicTensor<T>&, T);                                           \
  template BasicTensor<T> mul_rows(const BasicTensor<T>&, std::span<const T>);                       \
  template BasicTensor<T> sum(const BasicTensor<T>&);                                                \
  template BasicTensor<T> silu(const BasicTensor<T>&);                                               \
  template BasicTensor<T> softmax(const BasicTensor<T>&, int);                                       \
  template BasicTensor<T> rms_norm(const BasicTensor<T>&, const BasicTensor<T>&, double);            \
  template BasicTensor<T> embedding(const BasicTensor<T>&, std::span<const int>);                    \
  template BasicTensor<T> rope(const BasicTensor<T>&, std::span<const int>, int, double);            \
  template BasicTensor<T> causal_attention(const BasicTensor<T>&, const BasicTensor<T>&,             \
                                           const BasicTensor<T>&, std::span<const int>,              \
                                           std::span<const int>, int);                               \
  template BasicTensor<T> cross_entropy(const BasicTensor<T>&, std::span<const int>,                 \
                                        std::span<const std::uint8_t>);                              \
  template BasicTensor<T> slice_rows(const BasicTensor<T>&, std::size_t, std::size_t);               \
  template BasicTensor<T> concat_rows(const std::vector<BasicTensor<T>>&);

DMTD_INSTANTIATE(float)
DMTD_INSTANTIATE(double)

#undef DMTD_INSTANTIATE

}  // namespace dmtd
