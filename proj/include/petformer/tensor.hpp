#pragma once

// Dense f64 tensors with tape-based reverse-mode differentiation.
//
// Values are immutable once an op has produced them; only leaf parameters
// are mutated (by the optimizer) between steps. An op records itself on the
// thread's active Tape when at least one operand requires a gradient. With
// no active tape nothing is recorded and results never require gradients,
// which is how inference runs.

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "petformer/errors.hpp"

namespace petformer {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

class Tape;

namespace detail {

struct Storage {
  Shape shape;
  std::vector<double> data;
  // Empty until a gradient reaches this tensor.
  std::vector<double> grad;
  bool requires_grad = false;
  const Tape* tape = nullptr;
  std::optional<std::size_t> node;

  std::vector<double>& grad_buffer();
};

using StoragePtr = std::shared_ptr<Storage>;

}  // namespace detail

class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<double> data, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const;

  // Views alias the storage; calling them on a temporary would dangle.
  std::span<const double> data() const&;
  std::span<const double> data() const&& = delete;
  // Direct write access; reserved for leaf parameters and buffers.
  std::span<double> mutable_data();

  double item() const;
  double at(std::initializer_list<std::size_t> index) const;

  bool requires_grad() const;
  std::optional<std::size_t> node_id() const;

  // Accumulated gradient, zeros if nothing reached this tensor.
  Tensor grad() const;
  std::span<const double> grad_data() const&;
  std::span<const double> grad_data() const&& = delete;
  bool has_grad() const;
  void zero_grad();

  // New leaf holding a copy of the values, outside any tape.
  Tensor detach() const;

  const detail::StoragePtr& storage() const { return impl_; }

 private:
  explicit Tensor(detail::StoragePtr impl) : impl_(std::move(impl)) {}
  detail::StoragePtr impl_;

  friend Tensor make_op_result(Shape, std::vector<double>, const std::vector<Tensor>&,
                               std::function<void(std::span<const double>)>);
};

/// Append-only record of differentiable ops for one forward/backward pass.
///
/// Constructing a Tape makes it the active tape of the calling thread until
/// it is destroyed (the previous one is restored). Nodes are appended in
/// execution order, so the list is already topologically sorted. backward()
/// may run once; gradients land in the `grad` of every requires_grad leaf.
class Tape {
 public:
  Tape();
  ~Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* active();

  void backward(const Tensor& loss);
  std::size_t size() const { return nodes_.size(); }

  struct Node {
    std::vector<detail::StoragePtr> operands;
    detail::StoragePtr output;
    std::function<void(std::span<const double>)> rule;
  };

  std::size_t record(Node node);

 private:
  std::vector<Node> nodes_;
  Tape* previous_ = nullptr;
  bool consumed_ = false;
};

/// Builds an op output; records `rule` on the active tape when any operand
/// requires a gradient. `rule` receives the gradient of the output.
Tensor make_op_result(Shape shape, std::vector<double> data,
                      std::initializer_list<const Tensor*> operands,
                      std::function<void(std::span<const double>)> rule);
Tensor make_op_result(Shape shape, std::vector<double> data, const std::vector<Tensor>& operands,
                      std::function<void(std::span<const double>)> rule);

/// Gradient buffer of an operand inside a backward rule, or nullptr when the
/// operand does not track gradients.
double* grad_target(const Tensor& operand);

// Linear algebra.
// a: [..., r, k]; b: [k, c] (shared across batch) or [..., k, c].
Tensor matmul(const Tensor& a, const Tensor& b);

// Elementwise. Binary ops broadcast the lower-rank operand: it is aligned to
// the trailing axes of the other and each of its extents must match or be 1.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor neg(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor square(const Tensor& a);
Tensor sqrt(const Tensor& a);
Tensor abs(const Tensor& a);
Tensor scale(const Tensor& a, double factor);
Tensor add_scalar(const Tensor& a, double value);
// Elementwise f with derivative df, both evaluated at the input.
Tensor map_unary(const Tensor& a, const std::function<double(double)>& f,
                 const std::function<double(double)>& df);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
inline Tensor operator-(const Tensor& a) { return neg(a); }

// Max-subtracted softmax along `axis`.
Tensor softmax(const Tensor& a, std::size_t axis);

// Reductions. With keepdim the reduced axis stays with extent 1.
Tensor sum(const Tensor& a, std::size_t axis, bool keepdim = true);
Tensor mean(const Tensor& a, std::size_t axis, bool keepdim = true);
// Population variance (divides by the axis extent).
Tensor var(const Tensor& a, std::size_t axis, bool keepdim = true);
Tensor sum_all(const Tensor& a);
Tensor mean_all(const Tensor& a);

// Layout.
Tensor reshape(const Tensor& a, Shape shape);
Tensor permute(const Tensor& a, const std::vector<std::size_t>& order);
Tensor transpose(const Tensor& a, std::size_t axis0, std::size_t axis1);
Tensor concat(const std::vector<Tensor>& parts, std::size_t axis);
Tensor slice(const Tensor& a, std::size_t axis, std::size_t start, std::size_t length);
// Sliding windows over the last axis: [..., L] -> [..., n, size] with
// n = floor((L - size) / step) + 1.
Tensor unfold(const Tensor& a, std::size_t size, std::size_t step);
// Tiles `a` over new leading axes: result shape is lead ++ a.shape.
Tensor expand(const Tensor& a, const Shape& lead);

bool all_finite(const Tensor& a);

}  // namespace petformer
