#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace hsproj {

using Shape = std::vector<std::size_t>;

std::string shape_string(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until a backward pass reaches this node
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  // Reads this->grad and accumulates into parents' grads.
  std::function<void(Node&)> backward_fn;

  std::vector<double>& ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
    return grad;
  }
};

}  // namespace detail

// Dense row-major tensor of doubles with reverse-mode autodiff.
//
// A Tensor is a cheap handle; copies share storage. Operations on tensors that
// require gradients record a node in an implicit graph. Calling backward() on a
// scalar result propagates gradients to every reachable tensor with
// requires_grad set, then releases the recorded graph.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor filled(Shape shape, double value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t axis) const { return node_->shape.at(axis); }
  std::size_t numel() const { return node_->data.size(); }
  bool requires_grad() const { return node_->requires_grad; }

  std::span<const double> data() const { return node_->data; }
  std::span<double> mutable_data() { return node_->data; }

  // Zero-length until a backward pass has touched this tensor.
  std::span<const double> grad() const { return node_->grad; }
  std::span<double> mutable_grad() { return node_->ensure_grad(); }
  bool has_grad() const { return node_->grad.size() == node_->data.size(); }
  void zero_grad();

  double item() const;
  double at(std::size_t i) const { return node_->data.at(i); }
  double at(std::size_t r, std::size_t c) const;

  // Reverse-mode accumulation from this scalar. Throws ContractError otherwise.
  void backward();

  // Same storage, no gradient tracking.
  Tensor detach() const;

  // Internal: used by the op implementations.
  const std::shared_ptr<detail::Node>& node() const { return node_; }
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

 private:
  std::shared_ptr<detail::Node> node_;
};

// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_mode_enabled();

// Validity mask over sequence positions; true marks a real token.
using Mask = std::vector<bool>;

// --- elementwise and shape ops ---------------------------------------------

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double factor);
Tensor add_scalar(const Tensor& x, double value);
// x: [m×n], bias: [n]
Tensor add_row_bias(const Tensor& x, const Tensor& bias);
Tensor gelu(const Tensor& x);
Tensor reshape(const Tensor& x, Shape shape);
Tensor transpose(const Tensor& x);
Tensor slice_rows(const Tensor& x, std::size_t begin, std::size_t count);
Tensor slice_cols(const Tensor& x, std::size_t begin, std::size_t count);
Tensor concat_cols(std::span<const Tensor> parts);
// Stacks B tensors of shape [d] into [B×d].
Tensor stack_rows(std::span<const Tensor> rows);

// --- reductions ----------------------------------------------------------

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);

// --- linear algebra and normalization ------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5);
// Softmax / log-softmax over the last axis, max-subtracted.
Tensor softmax(const Tensor& x);
Tensor log_softmax(const Tensor& x);
Tensor masked_mean_pool(const Tensor& x, const Mask& mask);
Tensor l2_normalize(const Tensor& x);

struct AttentionWeights {
  Tensor w_q, b_q, w_k, b_k, w_v, b_v, w_o, b_o;
};

// Additive logit applied to masked key positions.
inline constexpr double kMaskedLogit = -1e9;

Tensor multi_head_self_attention(const Tensor& x, const Mask& mask, const AttentionWeights& weights,
                                 std::size_t heads);

// --- gradient checking -----------------------------------------------------

// Max over every coordinate of every input of
//   |analytic - central| / max(|analytic|, |central|, 1e-8).
// f must rebuild its graph from `inputs` on each call and return a scalar.
double grad_check(const std::function<Tensor()>& f, std::span<Tensor> inputs, double h = 1e-5);

}  // namespace hsproj
