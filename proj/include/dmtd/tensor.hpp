#pragma once

// Dense tensors with a reverse-mode tape.
//
// A tensor is a cheap handle onto a shared node. Operations on tensors that
// require grad record a backward closure plus their parents; backward() on a
// scalar replays the recorded graph once in reverse topological order and
// then releases it. Every op is instantiated for float (default) and double
// (gradient checks).

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <vector>

namespace dmtd {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);

namespace detail {

template <typename T>
struct Node {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until the first accumulation
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  std::vector<T>& grad_buffer() {
    if (grad.empty()) grad.assign(data.size(), T(0));
    return grad;
  }
};

}  // namespace detail

// Whether new ops record onto the tape (thread-local, default on).
bool grad_enabled();

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

template <typename T>
class BasicTensor {
 public:
  using Scalar = T;
  using NodePtr = std::shared_ptr<detail::Node<T>>;

  BasicTensor() = default;
  explicit BasicTensor(NodePtr node) : node_(std::move(node)) {}

  static BasicTensor zeros(Shape shape, bool requires_grad = false);
  static BasicTensor from_data(Shape shape, std::vector<T> data, bool requires_grad = false);
  static BasicTensor scalar(T value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t numel() const { return node_->data.size(); }
  // Trailing dimension, and the product of every leading dimension.
  std::size_t cols() const;
  std::size_t rows() const;

  std::span<const T> data() const { return node_->data; }
  std::span<T> mutable_data() { return node_->data; }
  T item() const;
  T at(std::size_t row, std::size_t col) const { return node_->data[row * cols() + col]; }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool flag) { node_->requires_grad = flag; }
  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const T> grad() const { return node_->grad; }
  std::span<T> mutable_grad() { return node_->grad_buffer(); }
  void clear_grad() { node_->grad.clear(); }

  // New leaf holding a copy of the values; gradients never flow through it.
  BasicTensor detach() const;

  // Seeds d(self)/d(self) = 1 and accumulates into every requires_grad
  // ancestor. Throws ContractError unless this is a one-element tensor.
  void backward() const;

  const NodePtr& node() const { return node_; }

 private:
  NodePtr node_;
};

using Tensor = BasicTensor<float>;
using Tensor64 = BasicTensor<double>;

// [m x k] * [k x n] -> [m x n].
template <typename T>
BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b);

template <typename T>
BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b);

// Elementwise product of equal shapes.
template <typename T>
BasicTensor<T> mul(const BasicTensor<T>& a, const BasicTensor<T>& b);

template <typename T>
BasicTensor<T> scale(const BasicTensor<T>& a, T factor);

// Row r of a (leading dims flattened) multiplied by factors[r]; factors are constants.
template <typename T>
BasicTensor<T> mul_rows(const BasicTensor<T>& a, std::span<const T> factors);

template <typename T>
BasicTensor<T> sum(const BasicTensor<T>& a);

template <typename T>
BasicTensor<T> silu(const BasicTensor<T>& a);

// Max-subtracted softmax along `axis` (negative counts from the back).
template <typename T>
BasicTensor<T> softmax(const BasicTensor<T>& x, int axis = -1);

// x / sqrt(mean(x^2) + eps) * gain over the trailing dimension.
template <typename T>
BasicTensor<T> rms_norm(const BasicTensor<T>& x, const BasicTensor<T>& gain, double eps);

// Row lookup into a [vocab x d] matrix.
template <typename T>
BasicTensor<T> embedding(const BasicTensor<T>& weight, std::span<const int> ids);

// Rotary position encoding on [batch*n x d] rows, positions has length n and
// repeats across the batch. Each head rotates pairs (j, j + head_dim/2).
template <typename T>
BasicTensor<T> rope(const BasicTensor<T>& x, std::span<const int> positions, int n_heads,
                    double base);

// Multi-head scaled dot-product attention with a position-causal mask: query
// i sees key j iff key_positions[j] <= query_positions[i]. q has batch*nq rows
// and k/v batch*nk rows; batches never attend across each other.
template <typename T>
BasicTensor<T> causal_attention(const BasicTensor<T>& q, const BasicTensor<T>& k,
                                const BasicTensor<T>& v, std::span<const int> query_positions,
                                std::span<const int> key_positions, int n_heads);

// Mean of -log softmax(logits)[target] over rows whose ignore flag is 0.
// Zero (with zero gradient) when every row is ignored.
template <typename T>
BasicTensor<T> cross_entropy(const BasicTensor<T>& logits, std::span<const int> targets,
                             std::span<const std::uint8_t> ignore = {});

// Rows [begin, end) of a 2-D tensor.
template <typename T>
BasicTensor<T> slice_rows(const BasicTensor<T>& a, std::size_t begin, std::size_t end);

template <typename T>
BasicTensor<T> concat_rows(const std::vector<BasicTensor<T>>& parts);

}  // namespace dmtd
