#pragma once

// Minimal reverse-mode automatic differentiation over dense double tensors.
//
// A Tensor is a cheap handle to a node on the gradient tape. Ops build new
// nodes that remember their inputs and a backward rule; Tensor::backward()
// replays the rules in reverse topological order. Data is row-major.

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace bdb {

using Shape = std::vector<std::size_t>;

std::size_t numel_of(const Shape& shape);
std::string shape_str(const Shape& shape);

// Receives the gradient of the op output and one pointer per input; the
// pointer is null when that input does not need a gradient.
using BackwardFn = std::function<void(std::span<const double> out_grad,
                                      std::span<std::vector<double>*> in_grads)>;

namespace detail {
struct Node;
}

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> data, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  // Builds an op result. Gradient tracking is attached only when some input
  // requires it and no NoGradGuard is active.
  static Tensor from_op(Shape shape, std::vector<double> data, std::vector<Tensor> inputs,
                        BackwardFn backward);

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const;
  std::size_t dim(std::size_t axis) const;
  std::size_t rank() const { return shape().size(); }
  std::size_t numel() const;

  std::span<const double> data() const;
  // Leaf tensors only; used by optimizers and initializers.
  std::span<double> mutable_data();
  double item() const;
  double at(std::initializer_list<std::size_t> index) const;

  bool requires_grad() const;
  bool has_grad() const;
  std::span<const double> grad() const;
  void zero_grad();

  Tensor detach() const;

  // Accumulates d(this)/d(leaf) into every reachable leaf requiring grad.
  void backward() const;

  bool same_node(const Tensor& other) const { return node_ == other.node_; }

 private:
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
  std::shared_ptr<detail::Node> node_;
};

// Disables tape recording on the current thread while alive.
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

// ---- ops -------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);
// x[M×K]·w[K×N] (+ bias[N] added to every row)
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias = {});

// Elementwise binary ops accept equal shapes, or one operand with a single
// element that is broadcast to the other.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor add_scalar(const Tensor& a, double s);
Tensor mul_scalar(const Tensor& a, double s);

Tensor relu(const Tensor& a);
Tensor softplus(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);

enum class ReduceOp { sum, mean, max };

// Reduces the listed axes away (no keepdim). An empty axis list reduces all.
Tensor reduce(ReduceOp op, const Tensor& t, std::vector<std::size_t> axes = {});
inline Tensor sum(const Tensor& t, std::vector<std::size_t> axes = {}) {
  return reduce(ReduceOp::sum, t, std::move(axes));
}
inline Tensor mean(const Tensor& t, std::vector<std::size_t> axes = {}) {
  return reduce(ReduceOp::mean, t, std::move(axes));
}
inline Tensor max(const Tensor& t, std::vector<std::size_t> axes = {}) {
  return reduce(ReduceOp::max, t, std::move(axes));
}

Tensor concat(const Tensor& a, const Tensor& b, std::size_t axis);
Tensor slice(const Tensor& t, std::size_t axis, std::size_t begin, std::size_t end);
Tensor reshape(const Tensor& t, Shape shape);
Tensor permute(const Tensor& t, const std::vector<std::size_t>& order);
// Picks elements by flat row-major index into a 1-D tensor.
Tensor gather(const Tensor& t, std::vector<std::size_t> flat_indices);
// Rows scaled to unit L2 norm; all-zero rows stay zero.
Tensor l2_normalize_rows(const Tensor& t);

enum class Mode { train, eval };

// Batch normalization over the batch axis of a B×F input with learnable
// scale and shift.
class BatchNorm {
 public:
  static constexpr double kMomentum = 0.1;
  static constexpr double kEpsilon = 1e-5;

  explicit BatchNorm(std::size_t features);

  Tensor forward(const Tensor& x, Mode mode);

  std::size_t features() const { return gamma_.numel(); }
  Tensor& gamma() { return gamma_; }
  Tensor& beta() { return beta_; }
  const Tensor& gamma() const { return gamma_; }
  const Tensor& beta() const { return beta_; }
  std::vector<double>& running_mean() { return running_mean_; }
  std::vector<double>& running_var() { return running_var_; }
  const std::vector<double>& running_mean() const { return running_mean_; }
  const std::vector<double>& running_var() const { return running_var_; }

 private:
  Tensor gamma_;
  Tensor beta_;
  std::vector<double> running_mean_;
  std::vector<double> running_var_;
};

}  // namespace bdb
