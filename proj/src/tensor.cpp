#include "petformer/tensor.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

namespace petformer {

namespace {

thread_local Tape* g_active_tape = nullptr;

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

void check_axis(const Tensor& a, std::size_t axis, const char* op) {
  if (axis >= a.rank()) {
    throw DimensionError(std::string(op) + ": axis " + std::to_string(axis) +
                         " out of range for shape " + shape_str(a.shape()));
  }
}

// Splits a shape around `axis` into (outer, extent, inner) block sizes.
struct AxisSplit {
  std::size_t outer = 1;
  std::size_t extent = 1;
  std::size_t inner = 1;
};

AxisSplit split_at(const Shape& shape, std::size_t axis) {
  AxisSplit s;
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  s.extent = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

// True when `small` can be broadcast onto `big` (right-aligned, extents
// equal or 1).
bool broadcastable(const Shape& small, const Shape& big) {
  if (small.size() > big.size()) return false;
  const std::size_t off = big.size() - small.size();
  for (std::size_t i = 0; i < small.size(); ++i) {
    if (small[i] != big[off + i] && small[i] != 1) return false;
  }
  return true;
}

// For every flat index of `big`, the flat index of the broadcast `small`.
std::vector<std::size_t> broadcast_map(const Shape& small, const Shape& big) {
  const std::size_t total = shape_numel(big);
  std::vector<std::size_t> map(total);
  const std::size_t small_n = shape_numel(small);
  if (small == big) {
    std::iota(map.begin(), map.end(), std::size_t{0});
    return map;
  }
  // Pure suffix tiling (bias add).
  const std::size_t off = big.size() - small.size();
  if (std::equal(small.begin(), small.end(), big.begin() + static_cast<std::ptrdiff_t>(off))) {
    for (std::size_t i = 0; i < total; ++i) map[i] = i % small_n;
    return map;
  }
  // General: walk the multi-index of `big`.
  const std::size_t r = big.size();
  std::vector<std::size_t> small_stride(r, 0);
  std::size_t acc = 1;
  for (std::size_t k = small.size(); k-- > 0;) {
    small_stride[off + k] = small[k] == 1 ? 0 : acc;
    acc *= small[k];
  }
  std::vector<std::size_t> idx(r, 0);
  std::size_t pos = 0;
  for (std::size_t i = 0; i < total; ++i) {
    map[i] = pos;
    for (std::size_t k = r; k-- > 0;) {
      ++idx[k];
      pos += small_stride[k];
      if (idx[k] < big[k]) break;
      pos -= small_stride[k] * big[k];
      idx[k] = 0;
    }
  }
  return map;
}

template <typename F, typename DA, typename DB>
Tensor binary_op(const char* name, const Tensor& a, const Tensor& b, F f, DA dfa, DB dfb) {
  const bool b_onto_a = broadcastable(b.shape(), a.shape());
  const bool a_onto_b = !b_onto_a && broadcastable(a.shape(), b.shape());
  if (!b_onto_a && !a_onto_b) {
    throw DimensionError(std::string(name) + ": cannot broadcast shapes " + shape_str(a.shape()) +
                         " and " + shape_str(b.shape()));
  }
  const Shape out_shape = b_onto_a ? a.shape() : b.shape();
  const std::size_t total = shape_numel(out_shape);
  const bool a_same = a.shape() == out_shape;
  const bool b_same = b.shape() == out_shape;
  auto amap = std::make_shared<std::vector<std::size_t>>(
      a_same ? std::vector<std::size_t>{} : broadcast_map(a.shape(), out_shape));
  auto bmap = std::make_shared<std::vector<std::size_t>>(
      b_same ? std::vector<std::size_t>{} : broadcast_map(b.shape(), out_shape));

  const auto av = a.data();
  const auto bv = b.data();
  std::vector<double> out(total);
  for (std::size_t i = 0; i < total; ++i) {
    const double x = av[a_same ? i : (*amap)[i]];
    const double y = bv[b_same ? i : (*bmap)[i]];
    out[i] = f(x, y);
  }
  Tensor ta = a;
  Tensor tb = b;
  return make_op_result(out_shape, std::move(out), {&a, &b},
                        [ta, tb, amap, bmap, a_same, b_same, dfa, dfb](std::span<const double> g) {
                          double* ga = grad_target(ta);
                          double* gb = grad_target(tb);
                          const auto xs = ta.data();
                          const auto ys = tb.data();
                          for (std::size_t i = 0; i < g.size(); ++i) {
                            const std::size_t ia = a_same ? i : (*amap)[i];
                            const std::size_t ib = b_same ? i : (*bmap)[i];
                            if (ga) ga[ia] += g[i] * dfa(xs[ia], ys[ib]);
                            if (gb) gb[ib] += g[i] * dfb(xs[ia], ys[ib]);
                          }
                        });
}

template <typename F, typename DF>
Tensor unary_op(const Tensor& a, F f, DF df) {
  const auto av = a.data();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = f(av[i]);
  Tensor ta = a;
  return make_op_result(a.shape(), std::move(out), {&a}, [ta, df](std::span<const double> g) {
    double* ga = grad_target(ta);
    if (!ga) return;
    const auto xs = ta.data();
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * df(xs[i]);
  });
}

}  // namespace

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto e : shape) n *= e;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::vector<double>& detail::Storage::grad_buffer() {
  if (grad.empty()) grad.assign(data.size(), 0.0);
  return grad;
}

// ---------------------------------------------------------------------------
// Tensor

Tensor::Tensor(Shape shape, std::vector<double> data, bool requires_grad) {
  if (shape_numel(shape) != data.size()) {
    throw DimensionError("tensor: shape " + shape_str(shape) + " holds " +
                         std::to_string(shape_numel(shape)) + " elements, got " +
                         std::to_string(data.size()));
  }
  impl_ = std::make_shared<detail::Storage>();
  impl_->shape = std::move(shape);
  impl_->data = std::move(data);
  impl_->requires_grad = requires_grad;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  const std::size_t n = shape_numel(shape);
  return Tensor(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) { return Tensor({}, {value}, requires_grad); }

const Shape& Tensor::shape() const {
  static const Shape kEmpty;
  return impl_ ? impl_->shape : kEmpty;
}

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= rank()) throw DimensionError("dim: axis out of range for " + shape_str(shape()));
  return shape()[axis];
}

std::size_t Tensor::numel() const { return impl_ ? impl_->data.size() : 0; }

std::span<const double> Tensor::data() const& {
  if (!impl_) return {};
  return impl_->data;
}

std::span<double> Tensor::mutable_data() {
  if (!impl_) return {};
  return impl_->data;
}

double Tensor::item() const {
  if (numel() != 1) throw ContractError("item: tensor of shape " + shape_str(shape()) + " is not a scalar");
  return impl_->data[0];
}

double Tensor::at(std::initializer_list<std::size_t> index) const {
  if (index.size() != rank()) throw DimensionError("at: index rank mismatch for " + shape_str(shape()));
  std::size_t flat = 0;
  std::size_t k = 0;
  for (auto i : index) {
    if (i >= shape()[k]) throw DimensionError("at: index out of range for " + shape_str(shape()));
    flat = flat * shape()[k] + i;
    ++k;
  }
  return impl_->data[flat];
}

bool Tensor::requires_grad() const { return impl_ && impl_->requires_grad; }

std::optional<std::size_t> Tensor::node_id() const { return impl_ ? impl_->node : std::nullopt; }

Tensor Tensor::grad() const {
  if (!impl_) return {};
  if (impl_->grad.empty()) return Tensor::zeros(impl_->shape);
  return Tensor(impl_->shape, impl_->grad);
}

std::span<const double> Tensor::grad_data() const& {
  if (!impl_) return {};
  return impl_->grad;
}

bool Tensor::has_grad() const { return impl_ && !impl_->grad.empty(); }

void Tensor::zero_grad() {
  if (impl_) impl_->grad.clear();
}

Tensor Tensor::detach() const {
  if (!impl_) return {};
  return Tensor(impl_->shape, impl_->data, false);
}

// ---------------------------------------------------------------------------
// Tape

Tape::Tape() : previous_(g_active_tape) { g_active_tape = this; }

Tape::~Tape() { g_active_tape = previous_; }

Tape* Tape::active() { return g_active_tape; }

std::size_t Tape::record(Node node) {
  node.output->tape = this;
  node.output->node = nodes_.size();
  nodes_.push_back(std::move(node));
  return nodes_.size() - 1;
}

void Tape::backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw ContractError("backward: loss must be a scalar, got shape " + shape_str(loss.shape()));
  }
  if (consumed_) throw ContractError("backward: tape already consumed");
  if (nodes_.empty()) throw ContractError("backward: tape is empty");
  const auto& st = loss.storage();
  if (!st->requires_grad || st->tape != this || !st->node) {
    throw ContractError("backward: loss was not recorded on this tape");
  }
  consumed_ = true;
  st->grad_buffer()[0] += 1.0;
  for (std::size_t i = *st->node + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (n.output->grad.empty()) continue;
    n.rule(n.output->grad);
  }
  // Intermediate buffers die with the tape; drop them eagerly.
  for (auto& n : nodes_) {
    n.output->grad.clear();
    n.output->grad.shrink_to_fit();
  }
  nodes_.clear();
}

Tensor make_op_result(Shape shape, std::vector<double> data, std::initializer_list<const Tensor*> operands,
                      std::function<void(std::span<const double>)> rule) {
  std::vector<Tensor> ops;
  ops.reserve(operands.size());
  for (const Tensor* t : operands) ops.push_back(*t);
  return make_op_result(std::move(shape), std::move(data), ops, std::move(rule));
}

Tensor make_op_result(Shape shape, std::vector<double> data, const std::vector<Tensor>& operands,
                      std::function<void(std::span<const double>)> rule) {
  Tensor out(std::move(shape), std::move(data), false);
  Tape* tape = Tape::active();
  if (!tape) return out;
  const bool tracked = std::any_of(operands.begin(), operands.end(), [](const Tensor& t) { return t.requires_grad(); });
  if (!tracked) return out;
  out.impl_->requires_grad = true;
  Tape::Node node;
  for (const Tensor& t : operands) node.operands.push_back(t.storage());
  node.output = out.impl_;
  node.rule = std::move(rule);
  tape->record(std::move(node));
  return out;
}

double* grad_target(const Tensor& operand) {
  if (!operand.requires_grad()) return nullptr;
  return operand.storage()->grad_buffer().data();
}

// ---------------------------------------------------------------------------
// matmul

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() < 2 || b.rank() < 2) {
    throw DimensionError("matmul: operands must have rank >= 2, got " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
  }
  const std::size_t r = a.shape()[a.rank() - 2];
  const std::size_t k = a.shape()[a.rank() - 1];
  const std::size_t kb = b.shape()[b.rank() - 2];
  const std::size_t c = b.shape()[b.rank() - 1];
  const bool shared_b = b.rank() == 2;
  Shape batch_shape(a.shape().begin(), a.shape().end() - 2);
  if (k != kb || (!shared_b && !std::equal(batch_shape.begin(), batch_shape.end(), b.shape().begin(),
                                           b.shape().end() - 2)) ||
      (!shared_b && b.rank() != a.rank())) {
    throw DimensionError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  }
  const std::size_t batch = shape_numel(batch_shape);
  Shape out_shape = batch_shape;
  out_shape.push_back(r);
  out_shape.push_back(c);

  std::vector<double> out(batch * r * c);
  const double* ap = a.data().data();
  const double* bp = b.data().data();
  if (shared_b) {
    // Fold the batch into rows.
    MutMap(out.data(), static_cast<Eigen::Index>(batch * r), static_cast<Eigen::Index>(c)).noalias() =
        ConstMap(ap, static_cast<Eigen::Index>(batch * r), static_cast<Eigen::Index>(k)) *
        ConstMap(bp, static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(c));
  } else {
    for (std::size_t i = 0; i < batch; ++i) {
      MutMap(out.data() + i * r * c, r, c).noalias() = ConstMap(ap + i * r * k, r, k) * ConstMap(bp + i * k * c, k, c);
    }
  }

  Tensor ta = a;
  Tensor tb = b;
  return make_op_result(std::move(out_shape), std::move(out), {&a, &b},
                        [ta, tb, batch, r, k, c, shared_b](std::span<const double> g) {
                          double* ga = grad_target(ta);
                          double* gb = grad_target(tb);
                          const double* av = ta.data().data();
                          const double* bv = tb.data().data();
                          if (shared_b) {
                            const auto rows = static_cast<Eigen::Index>(batch * r);
                            ConstMap gm(g.data(), rows, c);
                            if (ga) MutMap(ga, rows, k).noalias() += gm * ConstMap(bv, k, c).transpose();
                            if (gb) MutMap(gb, k, c).noalias() += ConstMap(av, rows, k).transpose() * gm;
                            return;
                          }
                          for (std::size_t i = 0; i < batch; ++i) {
                            ConstMap gm(g.data() + i * r * c, r, c);
                            if (ga) MutMap(ga + i * r * k, r, k).noalias() += gm * ConstMap(bv + i * k * c, k, c).transpose();
                            if (gb) MutMap(gb + i * k * c, k, c).noalias() += ConstMap(av + i * r * k, r, k).transpose() * gm;
                          }
                        });
}

// ---------------------------------------------------------------------------
// elementwise

Tensor add(const Tensor& a, const Tensor& b) {
  return binary_op(
      "add", a, b, [](double x, double y) { return x + y; }, [](double, double) { return 1.0; },
      [](double, double) { return 1.0; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary_op(
      "sub", a, b, [](double x, double y) { return x - y; }, [](double, double) { return 1.0; },
      [](double, double) { return -1.0; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary_op(
      "mul", a, b, [](double x, double y) { return x * y; }, [](double, double y) { return y; },
      [](double x, double) { return x; });
}

Tensor div(const Tensor& a, const Tensor& b) {
  return binary_op(
      "div", a, b, [](double x, double y) { return x / y; }, [](double, double y) { return 1.0 / y; },
      [](double x, double y) { return -x / (y * y); });
}

Tensor neg(const Tensor& a) {
  return unary_op(a, [](double x) { return -x; }, [](double) { return -1.0; });
}

Tensor relu(const Tensor& a) {
  return unary_op(a, [](double x) { return x > 0.0 ? x : 0.0; }, [](double x) { return x > 0.0 ? 1.0 : 0.0; });
}

Tensor square(const Tensor& a) {
  return unary_op(a, [](double x) { return x * x; }, [](double x) { return 2.0 * x; });
}

Tensor sqrt(const Tensor& a) {
  return unary_op(a, [](double x) { return std::sqrt(x); }, [](double x) { return 0.5 / std::sqrt(x); });
}

Tensor abs(const Tensor& a) {
  return unary_op(
      a, [](double x) { return std::fabs(x); },
      [](double x) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); });
}

Tensor scale(const Tensor& a, double factor) {
  return unary_op(a, [factor](double x) { return x * factor; }, [factor](double) { return factor; });
}

Tensor add_scalar(const Tensor& a, double value) {
  return unary_op(a, [value](double x) { return x + value; }, [](double) { return 1.0; });
}

Tensor map_unary(const Tensor& a, const std::function<double(double)>& f, const std::function<double(double)>& df) {
  return unary_op(a, f, df);
}

// ---------------------------------------------------------------------------
// softmax and reductions

Tensor softmax(const Tensor& a, std::size_t axis) {
  check_axis(a, axis, "softmax");
  const AxisSplit s = split_at(a.shape(), axis);
  const auto av = a.data();
  std::vector<double> out(av.size());
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t in = 0; in < s.inner; ++in) {
      const std::size_t base = o * s.extent * s.inner + in;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < s.extent; ++j) mx = std::max(mx, av[base + j * s.inner]);
      double total = 0.0;
      for (std::size_t j = 0; j < s.extent; ++j) {
        const double e = std::exp(av[base + j * s.inner] - mx);
        out[base + j * s.inner] = e;
        total += e;
      }
      for (std::size_t j = 0; j < s.extent; ++j) out[base + j * s.inner] /= total;
    }
  }
  Tensor ta = a;
  auto y = std::make_shared<std::vector<double>>(out);
  return make_op_result(a.shape(), std::move(out), {&a}, [ta, y, s](std::span<const double> g) {
    double* ga = grad_target(ta);
    if (!ga) return;
    for (std::size_t o = 0; o < s.outer; ++o) {
      for (std::size_t in = 0; in < s.inner; ++in) {
        const std::size_t base = o * s.extent * s.inner + in;
        double dot = 0.0;
        for (std::size_t j = 0; j < s.extent; ++j) dot += g[base + j * s.inner] * (*y)[base + j * s.inner];
        for (std::size_t j = 0; j < s.extent; ++j) {
          const std::size_t p = base + j * s.inner;
          ga[p] += (*y)[p] * (g[p] - dot);
        }
      }
    }
  });
}

namespace {

Shape reduced_shape(const Shape& shape, std::size_t axis, bool keepdim) {
  Shape out = shape;
  if (keepdim) {
    out[axis] = 1;
  } else {
    out.erase(out.begin() + static_cast<std::ptrdiff_t>(axis));
  }
  return out;
}

// Sum along an axis scaled by `factor` (1 for sum, 1/n for mean).
Tensor scaled_sum(const Tensor& a, std::size_t axis, bool keepdim, double factor) {
  const AxisSplit s = split_at(a.shape(), axis);
  const auto av = a.data();
  std::vector<double> out(s.outer * s.inner, 0.0);
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t j = 0; j < s.extent; ++j) {
      const double* row = av.data() + (o * s.extent + j) * s.inner;
      double* dst = out.data() + o * s.inner;
      for (std::size_t in = 0; in < s.inner; ++in) dst[in] += row[in];
    }
  }
  for (double& v : out) v *= factor;
  Tensor ta = a;
  return make_op_result(reduced_shape(a.shape(), axis, keepdim), std::move(out), {&a},
                        [ta, s, factor](std::span<const double> g) {
                          double* ga = grad_target(ta);
                          if (!ga) return;
                          for (std::size_t o = 0; o < s.outer; ++o) {
                            for (std::size_t j = 0; j < s.extent; ++j) {
                              double* dst = ga + (o * s.extent + j) * s.inner;
                              const double* src = g.data() + o * s.inner;
                              for (std::size_t in = 0; in < s.inner; ++in) dst[in] += factor * src[in];
                            }
                          }
                        });
}

}  // namespace

Tensor sum(const Tensor& a, std::size_t axis, bool keepdim) {
  check_axis(a, axis, "sum");
  return scaled_sum(a, axis, keepdim, 1.0);
}

Tensor mean(const Tensor& a, std::size_t axis, bool keepdim) {
  check_axis(a, axis, "mean");
  return scaled_sum(a, axis, keepdim, 1.0 / static_cast<double>(a.shape()[axis]));
}

Tensor var(const Tensor& a, std::size_t axis, bool keepdim) {
  check_axis(a, axis, "var");
  const AxisSplit s = split_at(a.shape(), axis);
  const auto av = a.data();
  const double inv_n = 1.0 / static_cast<double>(s.extent);
  auto mu = std::make_shared<std::vector<double>>(s.outer * s.inner, 0.0);
  std::vector<double> out(s.outer * s.inner, 0.0);
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t in = 0; in < s.inner; ++in) {
      const std::size_t base = o * s.extent * s.inner + in;
      double m = 0.0;
      for (std::size_t j = 0; j < s.extent; ++j) m += av[base + j * s.inner];
      m *= inv_n;
      double v = 0.0;
      for (std::size_t j = 0; j < s.extent; ++j) {
        const double dlt = av[base + j * s.inner] - m;
        v += dlt * dlt;
      }
      (*mu)[o * s.inner + in] = m;
      out[o * s.inner + in] = v * inv_n;
    }
  }
  Tensor ta = a;
  return make_op_result(reduced_shape(a.shape(), axis, keepdim), std::move(out), {&a},
                        [ta, s, mu, inv_n](std::span<const double> g) {
                          double* ga = grad_target(ta);
                          if (!ga) return;
                          const auto xs = ta.data();
                          for (std::size_t o = 0; o < s.outer; ++o) {
                            for (std::size_t in = 0; in < s.inner; ++in) {
                              const std::size_t base = o * s.extent * s.inner + in;
                              const double m = (*mu)[o * s.inner + in];
                              const double gi = g[o * s.inner + in];
                              for (std::size_t j = 0; j < s.extent; ++j) {
                                const std::size_t p = base + j * s.inner;
                                ga[p] += gi * 2.0 * (xs[p] - m) * inv_n;
                              }
                            }
                          }
                        });
}

Tensor sum_all(const Tensor& a) { return sum(reshape(a, {a.numel()}), 0, false); }

Tensor mean_all(const Tensor& a) { return mean(reshape(a, {a.numel()}), 0, false); }

// ---------------------------------------------------------------------------
// layout

Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) {
    throw DimensionError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  }
  Tensor ta = a;
  std::vector<double> out(a.data().begin(), a.data().end());
  return make_op_result(std::move(shape), std::move(out), {&a}, [ta](std::span<const double> g) {
    double* ga = grad_target(ta);
    if (!ga) return;
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
  });
}

Tensor permute(const Tensor& a, const std::vector<std::size_t>& order) {
  const std::size_t r = a.rank();
  if (order.size() != r) throw DimensionError("permute: order rank mismatch for " + shape_str(a.shape()));
  std::vector<bool> seen(r, false);
  for (auto o : order) {
    if (o >= r || seen[o]) throw DimensionError("permute: invalid axis order for " + shape_str(a.shape()));
    seen[o] = true;
  }
  Shape out_shape(r);
  for (std::size_t i = 0; i < r; ++i) out_shape[i] = a.shape()[order[i]];
  std::vector<std::size_t> in_stride(r, 1);
  for (std::size_t k = r; k-- > 1;) in_stride[k - 1] = in_stride[k] * a.shape()[k];
  // Stride in the source for each output axis.
  std::vector<std::size_t> src_stride(r);
  for (std::size_t i = 0; i < r; ++i) src_stride[i] = in_stride[order[i]];

  const std::size_t total = a.numel();
  auto map = std::make_shared<std::vector<std::size_t>>(total);
  std::vector<std::size_t> idx(r, 0);
  std::size_t pos = 0;
  for (std::size_t i = 0; i < total; ++i) {
    (*map)[i] = pos;
    for (std::size_t k = r; k-- > 0;) {
      ++idx[k];
      pos += src_stride[k];
      if (idx[k] < out_shape[k]) break;
      pos -= src_stride[k] * out_shape[k];
      idx[k] = 0;
    }
  }
  const auto av = a.data();
  std::vector<double> out(total);
  for (std::size_t i = 0; i < total; ++i) out[i] = av[(*map)[i]];
  Tensor ta = a;
  return make_op_result(std::move(out_shape), std::move(out), {&a}, [ta, map](std::span<const double> g) {
    double* ga = grad_target(ta);
    if (!ga) return;
    for (std::size_t i = 0; i < g.size(); ++i) ga[(*map)[i]] += g[i];
  });
}

Tensor transpose(const Tensor& a, std::size_t axis0, std::size_t axis1) {
  check_axis(a, axis0, "transpose");
  check_axis(a, axis1, "transpose");
  std::vector<std::size_t> order(a.rank());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::swap(order[axis0], order[axis1]);
  return permute(a, order);
}

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) throw DimensionError("concat: no operands");
  const Shape& ref = parts.front().shape();
  if (axis >= ref.size()) throw DimensionError("concat: axis out of range for " + shape_str(ref));
  Shape out_shape = ref;
  out_shape[axis] = 0;
  for (const auto& p : parts) {
    const Shape& sh = p.shape();
    bool ok = sh.size() == ref.size();
    for (std::size_t i = 0; ok && i < sh.size(); ++i) ok = i == axis || sh[i] == ref[i];
    if (!ok) throw DimensionError("concat: incompatible shapes " + shape_str(ref) + " and " + shape_str(sh));
    out_shape[axis] += sh[axis];
  }
  const AxisSplit so = split_at(out_shape, axis);
  std::vector<double> out(shape_numel(out_shape));
  std::vector<std::size_t> offsets;
  std::size_t off = 0;
  for (const auto& p : parts) {
    offsets.push_back(off);
    const std::size_t chunk = p.shape()[axis] * so.inner;
    const auto pv = p.data();
    for (std::size_t o = 0; o < so.outer; ++o) {
      std::copy_n(pv.data() + o * chunk, chunk, out.data() + o * so.extent * so.inner + off * so.inner);
    }
    off += p.shape()[axis];
  }

  // Operand list for the tape: at most a handful of parts in practice.
  auto saved = std::make_shared<std::vector<Tensor>>(parts);
  auto rule = [saved, offsets, so, axis](std::span<const double> g) {
    for (std::size_t pi = 0; pi < saved->size(); ++pi) {
      const Tensor& p = (*saved)[pi];
      double* gp = grad_target(p);
      if (!gp) continue;
      const std::size_t chunk = p.shape()[axis] * so.inner;
      for (std::size_t o = 0; o < so.outer; ++o) {
        const double* src = g.data() + o * so.extent * so.inner + offsets[pi] * so.inner;
        double* dst = gp + o * chunk;
        for (std::size_t i = 0; i < chunk; ++i) dst[i] += src[i];
      }
    }
  };
  return make_op_result(std::move(out_shape), std::move(out), parts, std::move(rule));
}

Tensor slice(const Tensor& a, std::size_t axis, std::size_t start, std::size_t length) {
  check_axis(a, axis, "slice");
  if (start + length > a.shape()[axis] || length == 0) {
    throw DimensionError("slice: range [" + std::to_string(start) + ", " + std::to_string(start + length) +
                         ") invalid for axis " + std::to_string(axis) + " of " + shape_str(a.shape()));
  }
  const AxisSplit s = split_at(a.shape(), axis);
  Shape out_shape = a.shape();
  out_shape[axis] = length;
  const std::size_t chunk = length * s.inner;
  std::vector<double> out(s.outer * chunk);
  const auto av = a.data();
  for (std::size_t o = 0; o < s.outer; ++o) {
    std::copy_n(av.data() + o * s.extent * s.inner + start * s.inner, chunk, out.data() + o * chunk);
  }
  Tensor ta = a;
  return make_op_result(std::move(out_shape), std::move(out), {&a}, [ta, s, start, chunk](std::span<const double> g) {
    double* ga = grad_target(ta);
    if (!ga) return;
    for (std::size_t o = 0; o < s.outer; ++o) {
      double* dst = ga + o * s.extent * s.inner + start * s.inner;
      const double* src = g.data() + o * chunk;
      for (std::size_t i = 0; i < chunk; ++i) dst[i] += src[i];
    }
  });
}

Tensor unfold(const Tensor& a, std::size_t size, std::size_t step) {
  if (a.rank() == 0) throw DimensionError("unfold: scalar input");
  const std::size_t len = a.shape().back();
  if (size == 0 || step == 0 || size > len) {
    throw DimensionError("unfold: window " + std::to_string(size) + " / step " + std::to_string(step) +
                         " invalid for length " + std::to_string(len));
  }
  const std::size_t n = (len - size) / step + 1;
  const std::size_t rows = a.numel() / len;
  Shape out_shape(a.shape().begin(), a.shape().end() - 1);
  out_shape.push_back(n);
  out_shape.push_back(size);
  std::vector<double> out(rows * n * size);
  const auto av = a.data();
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t p = 0; p < n; ++p) {
      std::copy_n(av.data() + r * len + p * step, size, out.data() + (r * n + p) * size);
    }
  }
  Tensor ta = a;
  return make_op_result(std::move(out_shape), std::move(out), {&a},
                        [ta, rows, n, size, step, len](std::span<const double> g) {
                          double* ga = grad_target(ta);
                          if (!ga) return;
                          for (std::size_t r = 0; r < rows; ++r) {
                            for (std::size_t p = 0; p < n; ++p) {
                              const double* src = g.data() + (r * n + p) * size;
                              double* dst = ga + r * len + p * step;
                              for (std::size_t i = 0; i < size; ++i) dst[i] += src[i];
                            }
                          }
                        });
}

Tensor expand(const Tensor& a, const Shape& lead) {
  const std::size_t reps = shape_numel(lead);
  Shape out_shape = lead;
  out_shape.insert(out_shape.end(), a.shape().begin(), a.shape().end());
  const std::size_t n = a.numel();
  std::vector<double> out(reps * n);
  const auto av = a.data();
  for (std::size_t r = 0; r < reps; ++r) std::copy_n(av.data(), n, out.data() + r * n);
  Tensor ta = a;
  return make_op_result(std::move(out_shape), std::move(out), {&a}, [ta, reps, n](std::span<const double> g) {
    double* ga = grad_target(ta);
    if (!ga) return;
    for (std::size_t r = 0; r < reps; ++r) {
      for (std::size_t i = 0; i < n; ++i) ga[i] += g[r * n + i];
    }
  });
}

bool all_finite(const Tensor& a) {
  const auto v = a.data();
  return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}

}  // namespace petformer
