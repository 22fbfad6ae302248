#pragma once

// Dense float64 tensors with a reverse-mode gradient tape.
//
// Every operation that has at least one requires_grad input records its
// inputs and a backward rule on the result. backward() collects the
// recorded operations reachable from the loss and replays them in reverse
// recording order.
//
// Accumulation contract: gradients on leaf tensors (parameters) accumulate
// across backward() calls and must be cleared with zero_grad(). Gradients
// of intermediate results are recomputed from scratch on every call, so
// calling backward() twice on the same loss leaves exactly twice the
// single-call gradient on every leaf.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "flipdistill/rng.hpp"

namespace flipdistill {

using Shape = std::vector<std::size_t>;

std::size_t shape_size(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;
  bool requires_grad = false;
  bool leaf = true;
  std::uint64_t seq = 0;
  std::vector<std::shared_ptr<Node>> parents;
  // Reads this node's grad and accumulates into parents' grads.
  std::function<void(Node&)> backward;
};

}  // namespace detail

class Tensor {
 public:
  Tensor();
  Tensor(Shape shape, std::vector<double> values, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);
  static Tensor randn(Shape shape, double stddev, Rng& rng, bool requires_grad = false);

  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t size() const { return node_->value.size(); }
  std::size_t dim(std::size_t axis) const;

  std::span<const double> values() const { return node_->value; }
  // Direct write access, meant for optimizers and test fixtures touching leaves.
  std::span<double> mutable_values() { return node_->value; }

  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const double> grad() const { return node_->grad; }
  std::span<double> mutable_grad();
  void zero_grad();

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool flag);
  bool is_leaf() const { return node_->leaf; }

  double item() const;
  double at(std::size_t i) const;
  double at(std::size_t i, std::size_t j) const;

  // Copy of the values with no history.
  Tensor detach() const;
  Tensor clone() const { return detach(); }

  bool same_node(const Tensor& other) const { return node_ == other.node_; }

  // Internal: used by op implementations.
  const std::shared_ptr<detail::Node>& node() const { return node_; }
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

 private:
  std::shared_ptr<detail::Node> node_;
};

// Populates gradients of every requires_grad tensor reachable from `loss`.
// Throws ContractError if loss is not a single finite value.
void backward(const Tensor& loss);

// Disables history recording on this thread for the guard's lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};
bool grad_enabled();

// ---- linear algebra ----
Tensor matmul(const Tensor& a, const Tensor& b);     // [m,k] x [k,n]
Tensor matmul_nt(const Tensor& a, const Tensor& b);  // [m,k] x [n,k]^T
Tensor transpose(const Tensor& a);
Tensor outer(const Tensor& a, const Tensor& b);  // [m] x [n] -> [m,n]

// ---- elementwise; b may be a single-element tensor (broadcast) ----
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double c);
Tensor add_scalar(const Tensor& x, double c);
Tensor exp(const Tensor& x);
// log(x + eps); DomainError if any x + eps <= 0.
Tensor log(const Tensor& x, double eps = 0.0);
Tensor clamp(const Tensor& x, double lo, double hi);
Tensor sqrt(const Tensor& x);
Tensor cos(const Tensor& x);

inline constexpr double kArccosClamp = 1e-7;
// arccos of x clamped to [-1 + kArccosClamp, 1 - kArccosClamp].
Tensor arccos(const Tensor& x);
Tensor gelu(const Tensor& x);

// ---- reductions ----
Tensor softmax(const Tensor& x, std::size_t axis);
Tensor reduce_mean(const Tensor& x, std::size_t axis);
Tensor reduce_sum(const Tensor& x, std::size_t axis);
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);

// ---- indexing / layout ----
Tensor reshape(const Tensor& x, Shape shape);
Tensor slice_rows(const Tensor& x, std::size_t begin, std::size_t end);
Tensor slice_cols(const Tensor& x, std::size_t begin, std::size_t end);
Tensor concat_rows(std::span<const Tensor> parts);
Tensor concat_cols(std::span<const Tensor> parts);
// Flat gather: out[n] = x.flat[indices[n]]; result shape [indices.size()].
Tensor gather(const Tensor& x, std::span<const std::size_t> indices);
// Row lookup: out[t] = table[ids[t]].
Tensor embedding(const Tensor& table, std::span<const int> ids);

// ---- neural-net helpers ----
// Row-wise x / sqrt(mean(x^2) + eps).
Tensor rms_norm_rows(const Tensor& x, double eps = 1e-6);
// Inverted dropout. Identity when rate == 0.
Tensor dropout(const Tensor& x, double rate, Rng& rng);

}  // namespace flipdistill
