// SPDX-License-Identifier: Apache-2.0

#include "raed/tensor.hpp"

#include <cblas.h>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <numbers>
#include <sstream>
#include <limits>
#include <unordered_set>

#include "raed/error.hpp"

namespace raed {

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
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

namespace detail {

void Node::ensure_grad() {
  if (grad.empty()) grad.assign(data.size(), 0.0);
}

}  // namespace detail

namespace {

std::atomic<std::uint64_t> g_next_node_id{1};
thread_local bool t_grad_enabled = true;

std::shared_ptr<detail::Node> new_node(Shape shape, std::vector<double> data) {
  auto node = std::make_shared<detail::Node>();
  node->id = g_next_node_id.fetch_add(1, std::memory_order_relaxed);
  node->shape = std::move(shape);
  node->data = std::move(data);
  return node;
}

void check_finite([[maybe_unused]] const detail::Node& node,
                  [[maybe_unused]] const char* op) {
#ifndef NDEBUG
  for (double v : node.data) {
    if (!std::isfinite(v)) {
      throw NumericError(std::string("non-finite value produced by ") + op);
    }
  }
#endif
}

// Builds an op result; records the graph edge only when some input needs
// gradients and recording is enabled on this thread.
Tensor make_result(const char* op, Shape shape, std::vector<double> data,
                   std::initializer_list<const Tensor*> inputs,
                   std::function<void(detail::Node&)> backward) {
  auto node = new_node(std::move(shape), std::move(data));
  check_finite(*node, op);
  bool needs = false;
  if (t_grad_enabled) {
    for (const Tensor* t : inputs) needs = needs || t->requires_grad();
  }
  if (needs) {
    node->requires_grad = true;
    for (const Tensor* t : inputs) node->parents.push_back(t->node());
    node->backward = std::move(backward);
  }
  return Tensor(std::move(node));
}

Tensor make_result_n(const char* op, Shape shape, std::vector<double> data,
                     const std::vector<Tensor>& inputs,
                     std::function<void(detail::Node&)> backward) {
  auto node = new_node(std::move(shape), std::move(data));
  check_finite(*node, op);
  bool needs = false;
  if (t_grad_enabled) {
    for (const Tensor& t : inputs) needs = needs || t.requires_grad();
  }
  if (needs) {
    node->requires_grad = true;
    for (const Tensor& t : inputs) node->parents.push_back(t.node());
    node->backward = std::move(backward);
  }
  return Tensor(std::move(node));
}

// Parent grad buffer if that parent participates in differentiation.
double* grad_of(detail::Node& self, std::size_t i) {
  auto& p = *self.parents[i];
  if (!p.requires_grad) return nullptr;
  p.ensure_grad();
  return p.grad.data();
}

void require_defined(const Tensor& t, const char* op) {
  if (!t.defined()) throw ValueError(std::string(op) + ": undefined tensor");
}

std::size_t normalize_axis(int axis, std::size_t rank, const char* op) {
  int r = static_cast<int>(rank);
  int a = axis < 0 ? axis + r : axis;
  if (a < 0 || a >= r) {
    throw ShapeError(std::string(op) + ": axis " + std::to_string(axis) +
                     " invalid for rank " + std::to_string(rank));
  }
  return static_cast<std::size_t>(a);
}

Shape broadcast_shapes(const Shape& a, const Shape& b, const char* op) {
  std::size_t rank = std::max(a.size(), b.size());
  Shape out(rank, 1);
  for (std::size_t i = 0; i < rank; ++i) {
    std::size_t da = i < rank - a.size() ? 1 : a[i - (rank - a.size())];
    std::size_t db = i < rank - b.size() ? 1 : b[i - (rank - b.size())];
    if (da != db && da != 1 && db != 1) {
      throw ShapeError(std::string(op) + ": cannot broadcast " + shape_str(a) +
                       " with " + shape_str(b));
    }
    out[i] = std::max(da, db);
  }
  return out;
}

// For every flat index of `out`, the flat index of the broadcast source.
std::vector<std::size_t> broadcast_index(const Shape& src, const Shape& out) {
  std::size_t rank = out.size();
  std::vector<std::size_t> strides(rank, 0);
  std::size_t stride = 1;
  for (std::size_t k = 0; k < src.size(); ++k) {
    std::size_t i = src.size() - 1 - k;
    std::size_t o = rank - 1 - k;
    strides[o] = src[i] == 1 ? 0 : stride;
    stride *= src[i];
  }
  std::size_t n = shape_numel(out);
  std::vector<std::size_t> index(n);
  std::vector<std::size_t> counter(rank, 0);
  std::size_t offset = 0;
  for (std::size_t flat = 0; flat < n; ++flat) {
    index[flat] = offset;
    for (std::size_t k = rank; k-- > 0;) {
      ++counter[k];
      offset += strides[k];
      if (counter[k] < out[k]) break;
      offset -= strides[k] * counter[k];
      counter[k] = 0;
    }
  }
  return index;
}

// Elementwise binary op. GradA/GradB receive (x, y) and return the partial
// derivative of f with respect to that argument.
template <class F, class GradA, class GradB>
Tensor binary_op(const char* op, const Tensor& a, const Tensor& b, F f,
                 GradA grad_a, GradB grad_b) {
  require_defined(a, op);
  require_defined(b, op);
  const auto& av = a.node()->data;
  const auto& bv = b.node()->data;
  if (a.shape() == b.shape()) {
    std::vector<double> out(av.size());
    for (std::size_t i = 0; i < av.size(); ++i) out[i] = f(av[i], bv[i]);
    return make_result(op, a.shape(), std::move(out), {&a, &b},
                       [grad_a, grad_b](detail::Node& self) {
                         const auto& x = self.parents[0]->data;
                         const auto& y = self.parents[1]->data;
                         const auto& g = self.grad;
                         if (double* ga = grad_of(self, 0)) {
                           for (std::size_t i = 0; i < g.size(); ++i)
                             ga[i] += g[i] * grad_a(x[i], y[i]);
                         }
                         if (double* gb = grad_of(self, 1)) {
                           for (std::size_t i = 0; i < g.size(); ++i)
                             gb[i] += g[i] * grad_b(x[i], y[i]);
                         }
                       });
  }
  Shape shape = broadcast_shapes(a.shape(), b.shape(), op);
  auto ia = std::make_shared<std::vector<std::size_t>>(
      broadcast_index(a.shape(), shape));
  auto ib = std::make_shared<std::vector<std::size_t>>(
      broadcast_index(b.shape(), shape));
  std::vector<double> out(ia->size());
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = f(av[(*ia)[i]], bv[(*ib)[i]]);
  return make_result(op, std::move(shape), std::move(out), {&a, &b},
                     [grad_a, grad_b, ia, ib](detail::Node& self) {
                       const auto& x = self.parents[0]->data;
                       const auto& y = self.parents[1]->data;
                       const auto& g = self.grad;
                       if (double* ga = grad_of(self, 0)) {
                         for (std::size_t i = 0; i < g.size(); ++i) {
                           std::size_t j = (*ia)[i], k = (*ib)[i];
                           ga[j] += g[i] * grad_a(x[j], y[k]);
                         }
                       }
                       if (double* gb = grad_of(self, 1)) {
                         for (std::size_t i = 0; i < g.size(); ++i) {
                           std::size_t j = (*ia)[i], k = (*ib)[i];
                           gb[k] += g[i] * grad_b(x[j], y[k]);
                         }
                       }
                     });
}

// Elementwise unary op; Deriv receives (x, y) with y = f(x).
template <class F, class Deriv>
Tensor unary_op(const char* op, const Tensor& x, F f, Deriv deriv) {
  require_defined(x, op);
  const auto& xv = x.node()->data;
  std::vector<double> out(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = f(xv[i]);
  return make_result(op, x.shape(), std::move(out), {&x},
                     [deriv](detail::Node& self) {
                       double* gx = grad_of(self, 0);
                       if (!gx) return;
                       const auto& xv = self.parents[0]->data;
                       for (std::size_t i = 0; i < self.grad.size(); ++i)
                         gx[i] += self.grad[i] * deriv(xv[i], self.data[i]);
                     });
}

using blas_int_t = int;

blas_int_t blas_int(std::size_t n) {
  if (n > static_cast<std::size_t>(std::numeric_limits<blas_int_t>::max()))
    throw ShapeError("matmul: dimension exceeds BLAS index range");
  return static_cast<blas_int_t>(n);
}

// C[m x n] += A[m x k] * B[k x n]
void gemm_nn(const double* a, const double* b, double* c, std::size_t m,
             std::size_t k, std::size_t n) {
  if (m == 0 || k == 0 || n == 0) return;
  cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasNoTrans, blas_int(m),
              blas_int(n), blas_int(k), 1.0, a, blas_int(k), b, blas_int(n),
              1.0, c, blas_int(n));
}

// A[m x k] += C[m x n] * B[k x n]^T
void gemm_nt(const double* c, const double* b, double* a, std::size_t m,
             std::size_t k, std::size_t n) {
  if (m == 0 || k == 0 || n == 0) return;
  cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasTrans, blas_int(m),
              blas_int(k), blas_int(n), 1.0, c, blas_int(n), b, blas_int(n),
              1.0, a, blas_int(k));
}

// B[k x n] += A[m x k]^T * C[m x n]
void gemm_tn(const double* a, const double* c, double* b, std::size_t m,
             std::size_t k, std::size_t n) {
  if (m == 0 || k == 0 || n == 0) return;
  cblas_dgemm(CblasRowMajor, CblasTrans, CblasNoTrans, blas_int(k),
              blas_int(n), blas_int(m), 1.0, a, blas_int(k), c, blas_int(n),
              1.0, b, blas_int(n));
}

}  // namespace

// ---------------------------------------------------------------------------
// Tensor

Tensor::Tensor(Shape shape, std::vector<double> data, bool requires_grad) {
  if (shape_numel(shape) != data.size()) {
    throw ShapeError("tensor: shape " + shape_str(shape) + " holds " +
                     std::to_string(shape_numel(shape)) + " values, got " +
                     std::to_string(data.size()));
  }
  node_ = new_node(std::move(shape), std::move(data));
  node_->requires_grad = requires_grad;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), 0.0, requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  std::size_t n = shape_numel(shape);
  return Tensor(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return Tensor(Shape{1}, {value}, requires_grad);
}

const Shape& Tensor::shape() const {
  if (!node_) throw ValueError("shape of undefined tensor");
  return node_->shape;
}

std::size_t Tensor::dim(int axis) const {
  return shape()[normalize_axis(axis, rank(), "dim")];
}

std::size_t Tensor::numel() const { return node_ ? node_->data.size() : 0; }

std::span<const double> Tensor::data() const {
  if (!node_) return {};
  return node_->data;
}

std::span<double> Tensor::mutable_data() {
  if (!node_) return {};
  return node_->data;
}

double Tensor::item() const {
  if (numel() != 1) {
    throw ShapeError("item: tensor of shape " + shape_str(shape()) +
                     " is not a scalar");
  }
  return node_->data[0];
}

double Tensor::at(std::size_t r, std::size_t c) const {
  return node_->data[r * node_->shape.back() + c];
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }

bool Tensor::has_grad() const { return node_ && !node_->grad.empty(); }

std::span<const double> Tensor::grad() const {
  if (!node_) return {};
  return node_->grad;
}

std::span<double> Tensor::mutable_grad() {
  if (!node_) return {};
  node_->ensure_grad();
  return node_->grad;
}

void Tensor::zero_grad() {
  if (node_ && !node_->grad.empty())
    std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
}

void Tensor::backward() const {
  if (numel() != 1) {
    throw ShapeError("backward: loss must be a scalar, got shape " +
                     shape_str(shape()));
  }
  if (!node_->requires_grad) return;

  std::vector<detail::Node*> order;
  std::unordered_set<detail::Node*> seen;
  std::vector<detail::Node*> stack{node_.get()};
  seen.insert(node_.get());
  while (!stack.empty()) {
    detail::Node* n = stack.back();
    stack.pop_back();
    order.push_back(n);
    for (const auto& p : n->parents) {
      if (p->requires_grad && seen.insert(p.get()).second) {
        stack.push_back(p.get());
      }
    }
  }
  std::sort(order.begin(), order.end(),
            [](const detail::Node* a, const detail::Node* b) {
              return a->id > b->id;
            });
  for (detail::Node* n : order) {
    if (n->backward) n->grad.assign(n->data.size(), 0.0);
  }
  node_->ensure_grad();
  node_->grad[0] += 1.0;
  for (detail::Node* n : order) {
    if (!n->backward) continue;
    n->backward(*n);
    std::vector<double>().swap(n->grad);
  }
}

Tensor Tensor::detach() const {
  return Tensor(shape(), node_->data, false);
}

bool grad_enabled() { return t_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(t_grad_enabled) {
  t_grad_enabled = false;
}

NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }

// ---------------------------------------------------------------------------
// Rng

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

Rng::Rng(std::uint64_t seed) : engine_(seed) {}

std::uint64_t Rng::next_u64() { return engine_(); }

double Rng::uniform() {
  return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double Rng::uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

double Rng::normal() {
  if (has_spare_) {
    has_spare_ = false;
    return spare_;
  }
  double u1 = 1.0 - uniform();  // (0, 1]
  double u2 = uniform();
  double r = std::sqrt(-2.0 * std::log(u1));
  double theta = 2.0 * std::numbers::pi * u2;
  spare_ = r * std::sin(theta);
  has_spare_ = true;
  return r * std::cos(theta);
}

std::size_t Rng::below(std::size_t n) {
  if (n == 0) throw ValueError("Rng::below(0)");
  const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
  std::uint64_t v;
  do {
    v = next_u64();
  } while (v >= limit);
  return static_cast<std::size_t>(v % n);
}

Rng Rng::derive(std::uint64_t seed, std::uint64_t a, std::uint64_t b) {
  return Rng(splitmix64(seed ^ splitmix64(a ^ splitmix64(b + 0x51ED27ull))));
}

// ---------------------------------------------------------------------------
// Elementwise

Tensor add(const Tensor& a, const Tensor& b) {
  return binary_op(
      "add", a, b, [](double x, double y) { return x + y; },
      [](double, double) { return 1.0; }, [](double, double) { return 1.0; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary_op(
      "sub", a, b, [](double x, double y) { return x - y; },
      [](double, double) { return 1.0; }, [](double, double) { return -1.0; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary_op(
      "mul", a, b, [](double x, double y) { return x * y; },
      [](double, double y) { return y; }, [](double x, double) { return x; });
}

Tensor scale(const Tensor& x, double factor) {
  return unary_op(
      "scale", x, [factor](double v) { return v * factor; },
      [factor](double, double) { return factor; });
}

Tensor add_scalar(const Tensor& x, double value) {
  return unary_op(
      "add_scalar", x, [value](double v) { return v + value; },
      [](double, double) { return 1.0; });
}

Tensor neg(const Tensor& x) { return scale(x, -1.0); }

Tensor tanh(const Tensor& x) {
  return unary_op(
      "tanh", x, [](double v) { return std::tanh(v); },
      [](double, double y) { return 1.0 - y * y; });
}

Tensor relu(const Tensor& x) {
  return unary_op(
      "relu", x, [](double v) { return v > 0.0 ? v : 0.0; },
      [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

Tensor sigmoid(const Tensor& x) {
  return unary_op(
      "sigmoid", x,
      [](double v) {
        if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
        double e = std::exp(v);
        return e / (1.0 + e);
      },
      [](double, double y) { return y * (1.0 - y); });
}

Tensor exp(const Tensor& x) {
  return unary_op(
      "exp", x, [](double v) { return std::exp(v); },
      [](double, double y) { return y; });
}

Tensor log(const Tensor& x) {
  for (double v : x.data()) {
    if (!(v > 0.0)) throw ValueError("log: non-positive input");
  }
  return unary_op(
      "log", x, [](double v) { return std::log(v); },
      [](double v, double) { return 1.0 / v; });
}

// ---------------------------------------------------------------------------
// Linear algebra and layout

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_defined(a, "matmul");
  require_defined(b, "matmul");
  if (a.rank() < 2 || b.rank() < 2 || a.dim(-1) != b.dim(-2)) {
    throw ShapeError("matmul: incompatible shapes " + shape_str(a.shape()) +
                     " and " + shape_str(b.shape()));
  }
  const std::size_t m = a.dim(-2), k = a.dim(-1), n = b.dim(-1);
  Shape batch_a(a.shape().begin(), a.shape().end() - 2);
  Shape batch_b(b.shape().begin(), b.shape().end() - 2);
  Shape batch;
  try {
    batch = broadcast_shapes(batch_a, batch_b, "matmul");
  } catch (const ShapeError&) {
    throw ShapeError("matmul: incompatible shapes " + shape_str(a.shape()) +
                     " and " + shape_str(b.shape()));
  }
  auto ia = std::make_shared<std::vector<std::size_t>>(
      broadcast_index(batch_a, batch));
  auto ib = std::make_shared<std::vector<std::size_t>>(
      broadcast_index(batch_b, batch));
  const std::size_t nb = ia->size();
  std::vector<double> out(nb * m * n, 0.0);
  const double* ad = a.data().data();
  const double* bd = b.data().data();
  for (std::size_t i = 0; i < nb; ++i) {
    gemm_nn(ad + (*ia)[i] * m * k, bd + (*ib)[i] * k * n, out.data() + i * m * n,
            m, k, n);
  }
  Shape shape = batch;
  shape.push_back(m);
  shape.push_back(n);
  return make_result("matmul", std::move(shape), std::move(out), {&a, &b},
                     [ia, ib, m, k, n](detail::Node& self) {
                       const double* ad = self.parents[0]->data.data();
                       const double* bd = self.parents[1]->data.data();
                       const double* g = self.grad.data();
                       double* ga = grad_of(self, 0);
                       double* gb = grad_of(self, 1);
                       for (std::size_t i = 0; i < ia->size(); ++i) {
                         const double* gi = g + i * m * n;
                         if (ga)
                           gemm_nt(gi, bd + (*ib)[i] * k * n,
                                   ga + (*ia)[i] * m * k, m, k, n);
                         if (gb)
                           gemm_tn(ad + (*ia)[i] * m * k, gi,
                                   gb + (*ib)[i] * k * n, m, k, n);
                       }
                     });
}

Tensor permute(const Tensor& x, const std::vector<std::size_t>& order) {
  require_defined(x, "permute");
  const Shape& in = x.shape();
  if (order.size() != in.size()) {
    throw ShapeError("permute: order size mismatch for shape " + shape_str(in));
  }
  std::vector<bool> used(in.size(), false);
  Shape out_shape(in.size());
  for (std::size_t i = 0; i < order.size(); ++i) {
    if (order[i] >= in.size() || used[order[i]])
      throw ShapeError("permute: invalid axis order");
    used[order[i]] = true;
    out_shape[i] = in[order[i]];
  }
  std::vector<std::size_t> in_strides(in.size(), 1);
  for (std::size_t i = in.size(); i-- > 1;)
    in_strides[i - 1] = in_strides[i] * in[i];
  Shape src_strides(in.size());
  for (std::size_t i = 0; i < order.size(); ++i)
    src_strides[i] = in_strides[order[i]];

  const std::size_t n = x.numel();
  auto index = std::make_shared<std::vector<std::size_t>>(n);
  std::vector<std::size_t> counter(in.size(), 0);
  std::size_t offset = 0;
  for (std::size_t flat = 0; flat < n; ++flat) {
    (*index)[flat] = offset;
    for (std::size_t k = in.size(); k-- > 0;) {
      ++counter[k];
      offset += src_strides[k];
      if (counter[k] < out_shape[k]) break;
      offset -= src_strides[k] * counter[k];
      counter[k] = 0;
    }
  }
  const auto& xv = x.node()->data;
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = xv[(*index)[i]];
  return make_result("permute", std::move(out_shape), std::move(out), {&x},
                     [index](detail::Node& self) {
                       double* gx = grad_of(self, 0);
                       if (!gx) return;
                       for (std::size_t i = 0; i < self.grad.size(); ++i)
                         gx[(*index)[i]] += self.grad[i];
                     });
}

Tensor transpose(const Tensor& x) {
  require_defined(x, "transpose");
  if (x.rank() < 2) throw ShapeError("transpose: rank < 2");
  std::vector<std::size_t> order(x.rank());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::swap(order[order.size() - 1], order[order.size() - 2]);
  return permute(x, order);
}

Tensor reshape(const Tensor& x, Shape shape) {
  require_defined(x, "reshape");
  if (shape_numel(shape) != x.numel()) {
    throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " +
                     shape_str(shape));
  }
  return make_result("reshape", std::move(shape), x.node()->data, {&x},
                     [](detail::Node& self) {
                       double* gx = grad_of(self, 0);
                       if (!gx) return;
                       for (std::size_t i = 0; i < self.grad.size(); ++i)
                         gx[i] += self.grad[i];
                     });
}

Tensor concat(const std::vector<Tensor>& parts, int axis) {
  if (parts.empty()) throw ValueError("concat: no inputs");
  for (const auto& p : parts) require_defined(p, "concat");
  const Shape& first = parts[0].shape();
  const std::size_t ax = normalize_axis(axis, first.size(), "concat");
  Shape out_shape = first;
  out_shape[ax] = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    bool ok = s.size() == first.size();
    for (std::size_t i = 0; ok && i < s.size(); ++i)
      ok = i == ax || s[i] == first[i];
    if (!ok) {
      throw ShapeError("concat: shape " + shape_str(s) +
                       " incompatible with " + shape_str(first) +
                       " along axis " + std::to_string(axis));
    }
    out_shape[ax] += s[ax];
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < ax; ++i) outer *= first[i];
  for (std::size_t i = ax + 1; i < first.size(); ++i) inner *= first[i];
  const std::size_t out_row = out_shape[ax] * inner;
  std::vector<double> out(outer * out_row);
  auto widths = std::make_shared<std::vector<std::size_t>>();
  std::size_t col = 0;
  for (const auto& p : parts) {
    const std::size_t w = p.shape()[ax] * inner;
    widths->push_back(w);
    const double* src = p.data().data();
    for (std::size_t o = 0; o < outer; ++o)
      std::copy(src + o * w, src + (o + 1) * w, out.data() + o * out_row + col);
    col += w;
  }
  return make_result_n("concat", std::move(out_shape), std::move(out), parts,
                       [widths, outer, out_row](detail::Node& self) {
                         std::size_t col = 0;
                         for (std::size_t pi = 0; pi < widths->size(); ++pi) {
                           const std::size_t w = (*widths)[pi];
                           if (double* gp = grad_of(self, pi)) {
                             for (std::size_t o = 0; o < outer; ++o) {
                               const double* g =
                                   self.grad.data() + o * out_row + col;
                               for (std::size_t j = 0; j < w; ++j)
                                 gp[o * w + j] += g[j];
                             }
                           }
                           col += w;
                         }
                       });
}

Tensor slice(const Tensor& x, int axis, std::size_t start, std::size_t length) {
  require_defined(x, "slice");
  const Shape& in = x.shape();
  const std::size_t ax = normalize_axis(axis, in.size(), "slice");
  if (start + length > in[ax]) {
    throw ShapeError("slice: range [" + std::to_string(start) + ", " +
                     std::to_string(start + length) + ") exceeds axis of size " +
                     std::to_string(in[ax]));
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < ax; ++i) outer *= in[i];
  for (std::size_t i = ax + 1; i < in.size(); ++i) inner *= in[i];
  const std::size_t in_row = in[ax] * inner;
  const std::size_t w = length * inner;
  const std::size_t off = start * inner;
  Shape out_shape = in;
  out_shape[ax] = length;
  std::vector<double> out(outer * w);
  const double* src = x.data().data();
  for (std::size_t o = 0; o < outer; ++o)
    std::copy(src + o * in_row + off, src + o * in_row + off + w,
              out.data() + o * w);
  return make_result("slice", std::move(out_shape), std::move(out), {&x},
                     [outer, in_row, off, w](detail::Node& self) {
                       double* gx = grad_of(self, 0);
                       if (!gx) return;
                       for (std::size_t o = 0; o < outer; ++o) {
                         const double* g = self.grad.data() + o * w;
                         double* dst = gx + o * in_row + off;
                         for (std::size_t j = 0; j < w; ++j) dst[j] += g[j];
                       }
                     });
}

Tensor gather_rows(const Tensor& table, std::span<const int> rows) {
  require_defined(table, "gather_rows");
  if (table.rank() != 2) throw ShapeError("gather_rows: table must be 2-D");
  const std::size_t nrows = table.dim(0), width = table.dim(1);
  auto ids = std::make_shared<std::vector<int>>(rows.begin(), rows.end());
  std::vector<double> out(ids->size() * width);
  const double* src = table.data().data();
  for (std::size_t i = 0; i < ids->size(); ++i) {
    const int r = (*ids)[i];
    if (r < 0 || static_cast<std::size_t>(r) >= nrows) {
      throw ValueError("gather_rows: index " + std::to_string(r) +
                       " out of range for " + std::to_string(nrows) + " rows");
    }
    std::copy(src + r * width, src + (r + 1) * width, out.data() + i * width);
  }
  return make_result("gather_rows", Shape{ids->size(), width}, std::move(out),
                     {&table}, [ids, width](detail::Node& self) {
                       double* gt = grad_of(self, 0);
                       if (!gt) return;
                       for (std::size_t i = 0; i < ids->size(); ++i) {
                         const double* g = self.grad.data() + i * width;
                         double* dst = gt + (*ids)[i] * width;
                         for (std::size_t j = 0; j < width; ++j) dst[j] += g[j];
                       }
                     });
}

Tensor embedding_lookup(const Tensor& table, std::span<const int> ids) {
  return gather_rows(table, ids);
}

// ---------------------------------------------------------------------------
// Reductions

Tensor sum(const Tensor& x) {
  require_defined(x, "sum");
  double s = 0.0;
  for (double v : x.data()) s += v;
  return make_result("sum", Shape{1}, {s}, {&x}, [](detail::Node& self) {
    double* gx = grad_of(self, 0);
    if (!gx) return;
    const double g = self.grad[0];
    for (std::size_t i = 0; i < self.parents[0]->data.size(); ++i) gx[i] += g;
  });
}

Tensor mean(const Tensor& x) {
  require_defined(x, "mean");
  if (x.numel() == 0) throw ShapeError("mean: empty tensor");
  return scale(sum(x), 1.0 / static_cast<double>(x.numel()));
}

// ---------------------------------------------------------------------------
// Softmax family

Tensor softmax(const Tensor& x, int axis) {
  require_defined(x, "softmax");
  const Shape& in = x.shape();
  const std::size_t ax = normalize_axis(axis, in.size(), "softmax");
  const std::size_t len = in[ax];
  if (len == 0) throw ShapeError("softmax: empty axis");
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < ax; ++i) outer *= in[i];
  for (std::size_t i = ax + 1; i < in.size(); ++i) inner *= in[i];
  const double* xv = x.data().data();
  std::vector<double> out(x.numel());
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t j = 0; j < inner; ++j) {
      const std::size_t base = o * len * inner + j;
      double mx = xv[base];
      for (std::size_t t = 1; t < len; ++t) mx = std::max(mx, xv[base + t * inner]);
      double z = 0.0;
      for (std::size_t t = 0; t < len; ++t) {
        double e = std::exp(xv[base + t * inner] - mx);
        out[base + t * inner] = e;
        z += e;
      }
      for (std::size_t t = 0; t < len; ++t) out[base + t * inner] /= z;
    }
  }
  return make_result("softmax", in, std::move(out), {&x},
                     [outer, inner, len](detail::Node& self) {
                       double* gx = grad_of(self, 0);
                       if (!gx) return;
                       const auto& y = self.data;
                       const auto& g = self.grad;
                       for (std::size_t o = 0; o < outer; ++o) {
                         for (std::size_t j = 0; j < inner; ++j) {
                           const std::size_t base = o * len * inner + j;
                           double dot = 0.0;
                           for (std::size_t t = 0; t < len; ++t)
                             dot += g[base + t * inner] * y[base + t * inner];
                           for (std::size_t t = 0; t < len; ++t) {
                             const std::size_t i = base + t * inner;
                             gx[i] += y[i] * (g[i] - dot);
                           }
                         }
                       }
                     });
}

Tensor masked_softmax(const Tensor& x, std::span<const std::uint8_t> mask) {
  require_defined(x, "masked_softmax");
  if (x.rank() < 2) throw ShapeError("masked_softmax: rank < 2");
  const std::size_t rows = x.dim(-2), cols = x.dim(-1);
  if (mask.size() != rows * cols) {
    throw ShapeError("masked_softmax: mask of " + std::to_string(mask.size()) +
                     " entries does not cover " + std::to_string(rows) + "x" +
                     std::to_string(cols));
  }
  const std::size_t planes = x.numel() / (rows * cols);
  auto m = std::make_shared<std::vector<std::uint8_t>>(mask.begin(), mask.end());
  for (std::size_t r = 0; r < rows; ++r) {
    bool any = false;
    for (std::size_t c = 0; c < cols; ++c) any = any || (*m)[r * cols + c];
    if (!any) throw ValueError("masked_softmax: row with zero valid entries");
  }
  const double* xv = x.data().data();
  std::vector<double> out(x.numel(), 0.0);
  for (std::size_t p = 0; p < planes; ++p) {
    for (std::size_t r = 0; r < rows; ++r) {
      const std::size_t base = (p * rows + r) * cols;
      const std::uint8_t* mr = m->data() + r * cols;
      double mx = -INFINITY;
      for (std::size_t c = 0; c < cols; ++c)
        if (mr[c]) mx = std::max(mx, xv[base + c]);
      double z = 0.0;
      for (std::size_t c = 0; c < cols; ++c) {
        if (!mr[c]) continue;
        double e = std::exp(xv[base + c] - mx);
        out[base + c] = e;
        z += e;
      }
      for (std::size_t c = 0; c < cols; ++c)
        if (mr[c]) out[base + c] /= z;
    }
  }
  return make_result("masked_softmax", x.shape(), std::move(out), {&x},
                     [planes, rows, cols](detail::Node& self) {
                       double* gx = grad_of(self, 0);
                       if (!gx) return;
                       const auto& y = self.data;
                       const auto& g = self.grad;
                       for (std::size_t p = 0; p < planes * rows; ++p) {
                         const std::size_t base = p * cols;
                         double dot = 0.0;
                         for (std::size_t c = 0; c < cols; ++c)
                           dot += g[base + c] * y[base + c];
                         for (std::size_t c = 0; c < cols; ++c)
                           gx[base + c] += y[base + c] * (g[base + c] - dot);
                       }
                     });
}

Tensor log_softmax(const Tensor& x, int axis) {
  require_defined(x, "log_softmax");
  const Shape& in = x.shape();
  const std::size_t ax = normalize_axis(axis, in.size(), "log_softmax");
  const std::size_t len = in[ax];
  if (len == 0) throw ShapeError("log_softmax: empty axis");
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < ax; ++i) outer *= in[i];
  for (std::size_t i = ax + 1; i < in.size(); ++i) inner *= in[i];
  const double* xv = x.data().data();
  std::vector<double> out(x.numel());
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t j = 0; j < inner; ++j) {
      const std::size_t base = o * len * inner + j;
      double mx = xv[base];
      for (std::size_t t = 1; t < len; ++t) mx = std::max(mx, xv[base + t * inner]);
      double z = 0.0;
      for (std::size_t t = 0; t < len; ++t) z += std::exp(xv[base + t * inner] - mx);
      const double lz = mx + std::log(z);
      for (std::size_t t = 0; t < len; ++t)
        out[base + t * inner] = xv[base + t * inner] - lz;
    }
  }
  return make_result("log_softmax", in, std::move(out), {&x},
                     [outer, inner, len](detail::Node& self) {
                       double* gx = grad_of(self, 0);
                       if (!gx) return;
                       const auto& y = self.data;
                       const auto& g = self.grad;
                       for (std::size_t o = 0; o < outer; ++o) {
                         for (std::size_t j = 0; j < inner; ++j) {
                           const std::size_t base = o * len * inner + j;
                           double gs = 0.0;
                           for (std::size_t t = 0; t < len; ++t)
                             gs += g[base + t * inner];
                           for (std::size_t t = 0; t < len; ++t) {
                             const std::size_t i = base + t * inner;
                             gx[i] += g[i] - std::exp(y[i]) * gs;
                           }
                         }
                       }
                     });
}

// ---------------------------------------------------------------------------
// Normalization and regularization

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                  double eps) {
  require_defined(x, "layer_norm");
  const std::size_t width = x.dim(-1);
  if (width == 0) throw ShapeError("layer_norm: empty feature axis");
  if (gain.defined() && gain.numel() != width)
    throw ShapeError("layer_norm: gain shape " + shape_str(gain.shape()) +
                     " does not match width " + std::to_string(width));
  if (bias.defined() && bias.numel() != width)
    throw ShapeError("layer_norm: bias shape " + shape_str(bias.shape()) +
                     " does not match width " + std::to_string(width));
  const std::size_t rows = x.numel() / width;
  auto xhat = std::make_shared<std::vector<double>>(x.numel());
  auto rstd = std::make_shared<std::vector<double>>(rows);
  const double* xv = x.data().data();
  std::vector<double> out(x.numel());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = xv + r * width;
    double mu = 0.0;
    for (std::size_t j = 0; j < width; ++j) mu += xr[j];
    mu /= static_cast<double>(width);
    double var = 0.0;
    for (std::size_t j = 0; j < width; ++j) var += (xr[j] - mu) * (xr[j] - mu);
    var /= static_cast<double>(width);
    const double rs = 1.0 / std::sqrt(var + eps);
    (*rstd)[r] = rs;
    for (std::size_t j = 0; j < width; ++j) {
      const double h = (xr[j] - mu) * rs;
      (*xhat)[r * width + j] = h;
      double y = h;
      if (gain.defined()) y *= gain.data()[j];
      if (bias.defined()) y += bias.data()[j];
      out[r * width + j] = y;
    }
  }
  const bool has_gain = gain.defined(), has_bias = bias.defined();
  // Undefined affine inputs are replaced by constant placeholders so parent
  // indices stay fixed.
  Tensor g = has_gain ? gain : Tensor::full({width}, 1.0);
  Tensor b = has_bias ? bias : Tensor::zeros({width});
  return make_result(
      "layer_norm", x.shape(), std::move(out), {&x, &g, &b},
      [xhat, rstd, rows, width](detail::Node& self) {
        const auto& g = self.grad;
        const auto& gain = self.parents[1]->data;
        if (double* gg = grad_of(self, 1)) {
          for (std::size_t i = 0; i < g.size(); ++i)
            gg[i % width] += g[i] * (*xhat)[i];
        }
        if (double* gb = grad_of(self, 2)) {
          for (std::size_t i = 0; i < g.size(); ++i) gb[i % width] += g[i];
        }
        double* gx = grad_of(self, 0);
        if (!gx) return;
        const double inv_w = 1.0 / static_cast<double>(width);
        for (std::size_t r = 0; r < rows; ++r) {
          double mean_dh = 0.0, mean_dh_h = 0.0;
          for (std::size_t j = 0; j < width; ++j) {
            const double dh = g[r * width + j] * gain[j];
            mean_dh += dh;
            mean_dh_h += dh * (*xhat)[r * width + j];
          }
          mean_dh *= inv_w;
          mean_dh_h *= inv_w;
          for (std::size_t j = 0; j < width; ++j) {
            const std::size_t i = r * width + j;
            const double dh = g[i] * gain[j];
            gx[i] += (*rstd)[r] * (dh - mean_dh - (*xhat)[i] * mean_dh_h);
          }
        }
      });
}

Tensor dropout(const Tensor& x, double p, bool training, Rng* rng) {
  require_defined(x, "dropout");
  if (!(p >= 0.0 && p < 1.0)) {
    throw ValueError("dropout: p=" + std::to_string(p) + " outside [0, 1)");
  }
  if (!training || p == 0.0) return x;
  if (!rng) throw ValueError("dropout: training mode requires an rng");
  const double keep_scale = 1.0 / (1.0 - p);
  auto mask = std::make_shared<std::vector<double>>(x.numel());
  for (auto& v : *mask) v = rng->uniform() >= p ? keep_scale : 0.0;
  const double* xv = x.data().data();
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] * (*mask)[i];
  return make_result("dropout", x.shape(), std::move(out), {&x},
                     [mask](detail::Node& self) {
                       double* gx = grad_of(self, 0);
                       if (!gx) return;
                       for (std::size_t i = 0; i < self.grad.size(); ++i)
                         gx[i] += self.grad[i] * (*mask)[i];
                     });
}

// ---------------------------------------------------------------------------
// Convolution (im2col + gemm)

Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias,
              std::size_t stride_h, std::size_t stride_w, std::size_t pad_h,
              std::size_t pad_w) {
  require_defined(x, "conv2d");
  require_defined(weight, "conv2d");
  if (x.rank() != 3 || weight.rank() != 4 || weight.dim(1) != x.dim(0)) {
    throw ShapeError("conv2d: input " + shape_str(x.shape()) +
                     " incompatible with weight " + shape_str(weight.shape()));
  }
  if (stride_h == 0 || stride_w == 0) throw ValueError("conv2d: zero stride");
  const std::size_t c_in = x.dim(0), h = x.dim(1), w = x.dim(2);
  const std::size_t c_out = weight.dim(0), kh = weight.dim(2), kw = weight.dim(3);
  if (h + 2 * pad_h < kh || w + 2 * pad_w < kw) {
    throw ShapeError("conv2d: input " + shape_str(x.shape()) +
                     " smaller than kernel");
  }
  if (bias.defined() && bias.numel() != c_out)
    throw ShapeError("conv2d: bias shape " + shape_str(bias.shape()));
  const std::size_t ho = (h + 2 * pad_h - kh) / stride_h + 1;
  const std::size_t wo = (w + 2 * pad_w - kw) / stride_w + 1;
  const std::size_t positions = ho * wo;
  const std::size_t patch = c_in * kh * kw;

  // cols[patch x positions]; src index -1 marks zero padding.
  auto src = std::make_shared<std::vector<std::ptrdiff_t>>(patch * positions);
  for (std::size_t c = 0; c < c_in; ++c)
    for (std::size_t i = 0; i < kh; ++i)
      for (std::size_t j = 0; j < kw; ++j) {
        const std::size_t row = (c * kh + i) * kw + j;
        for (std::size_t oy = 0; oy < ho; ++oy)
          for (std::size_t ox = 0; ox < wo; ++ox) {
            const std::ptrdiff_t y = static_cast<std::ptrdiff_t>(oy * stride_h + i) -
                                     static_cast<std::ptrdiff_t>(pad_h);
            const std::ptrdiff_t xx = static_cast<std::ptrdiff_t>(ox * stride_w + j) -
                                      static_cast<std::ptrdiff_t>(pad_w);
            std::ptrdiff_t s = -1;
            if (y >= 0 && xx >= 0 && y < static_cast<std::ptrdiff_t>(h) &&
                xx < static_cast<std::ptrdiff_t>(w))
              s = (static_cast<std::ptrdiff_t>(c) * static_cast<std::ptrdiff_t>(h) + y) *
                      static_cast<std::ptrdiff_t>(w) + xx;
            (*src)[row * positions + oy * wo + ox] = s;
          }
      }
  const double* xv = x.data().data();
  auto cols = std::make_shared<std::vector<double>>(patch * positions);
  for (std::size_t i = 0; i < cols->size(); ++i)
    (*cols)[i] = (*src)[i] >= 0 ? xv[(*src)[i]] : 0.0;

  std::vector<double> out(c_out * positions, 0.0);
  if (bias.defined()) {
    for (std::size_t o = 0; o < c_out; ++o)
      std::fill(out.begin() + o * positions, out.begin() + (o + 1) * positions,
                bias.data()[o]);
  }
  gemm_nn(weight.data().data(), cols->data(), out.data(), c_out, patch,
          positions);
  Tensor b = bias.defined() ? bias : Tensor::zeros({c_out});
  return make_result(
      "conv2d", Shape{c_out, ho, wo}, std::move(out), {&x, &weight, &b},
      [src, cols, c_out, patch, positions](detail::Node& self) {
        const double* g = self.grad.data();
        if (double* gw = grad_of(self, 1))
          gemm_nt(g, cols->data(), gw, c_out, patch, positions);
        if (double* gb = grad_of(self, 2)) {
          for (std::size_t o = 0; o < c_out; ++o) {
            double acc = 0.0;
            for (std::size_t q = 0; q < positions; ++q) acc += g[o * positions + q];
            gb[o] += acc;
          }
        }
        if (double* gx = grad_of(self, 0)) {
          std::vector<double> dcols(patch * positions, 0.0);
          gemm_tn(self.parents[1]->data.data(), g, dcols.data(), c_out, patch,
                  positions);
          for (std::size_t i = 0; i < dcols.size(); ++i)
            if ((*src)[i] >= 0) gx[(*src)[i]] += dcols[i];
        }
      });
}

}  // namespace raed
