// SPDX-License-Identifier: Apache-2.0
//
// Dense float64 tensor with tape-free reverse-mode differentiation.
//
// Every op allocates a fresh output node that keeps shared references to its
// inputs and a closure that maps the output adjoint to input adjoints. Nodes
// carry a monotonically increasing creation id; since inputs always exist
// before the op that consumes them, sorting the reachable set by descending id
// yields a valid reverse topological order for backward().

#ifndef RAED_TENSOR_HPP
#define RAED_TENSOR_HPP

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace raed {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {

struct Node {
  std::uint64_t id = 0;
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until first accumulation
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  // Reads this->grad and accumulates into parents' grads.
  std::function<void(Node&)> backward;

  void ensure_grad();
};

}  // namespace detail

class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<double> data, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  // Negative indices count from the back.
  std::size_t dim(int axis) const;
  std::size_t numel() const;

  std::span<const double> data() const;
  // Direct write access; only meaningful on leaf tensors (parameters,
  // freshly built inputs). Mutating an interior node invalidates its graph.
  std::span<double> mutable_data();
  double item() const;
  double at(std::size_t i) const { return data()[i]; }
  double at(std::size_t r, std::size_t c) const;

  bool requires_grad() const;
  bool has_grad() const;
  std::span<const double> grad() const;
  std::span<double> mutable_grad();
  void zero_grad();

  // Populates grads of every requires_grad tensor reachable from this scalar.
  // Leaf grads accumulate across calls.
  void backward() const;

  // Copy of the values with no graph history.
  Tensor detach() const;

  const std::shared_ptr<detail::Node>& node() const { return node_; }
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

 private:
  std::shared_ptr<detail::Node> node_;
};

// Gradient recording is per-thread, enabled by default.
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

// Deterministic RNG: mt19937_64 output mapped with explicit transforms so the
// streams do not depend on the standard library's distribution code.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0);
  std::uint64_t next_u64();
  double uniform();  // [0, 1)
  double uniform(double lo, double hi);
  double normal();   // standard normal, Box-Muller
  std::size_t below(std::size_t n);  // uniform integer in [0, n)
  // Independent stream keyed by (seed, a, b) via splitmix64 mixing.
  static Rng derive(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0);

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

std::uint64_t splitmix64(std::uint64_t x);

// ---------------------------------------------------------------------------
// Operations. All shapes are checked; violations throw ShapeError.

// Elementwise with numpy-style broadcasting.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double factor);
Tensor add_scalar(const Tensor& x, double value);
Tensor neg(const Tensor& x);

Tensor tanh(const Tensor& x);
Tensor relu(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor exp(const Tensor& x);
Tensor log(const Tensor& x);

// [..., m, k] x [..., k, n] -> [..., m, n], batch dims broadcast.
Tensor matmul(const Tensor& a, const Tensor& b);
// Swaps the last two axes.
Tensor transpose(const Tensor& x);
Tensor permute(const Tensor& x, const std::vector<std::size_t>& order);
Tensor reshape(const Tensor& x, Shape shape);
Tensor concat(const std::vector<Tensor>& parts, int axis);
Tensor slice(const Tensor& x, int axis, std::size_t start, std::size_t length);
// Rows of a 2-D tensor picked by index (embedding lookup, reversal).
Tensor gather_rows(const Tensor& table, std::span<const int> rows);
Tensor embedding_lookup(const Tensor& table, std::span<const int> ids);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);

// Softmax along `axis`. With a mask, disallowed entries get exactly zero
// probability; the mask covers the last two axes ([rows x cols]) and is
// shared across leading axes; only axis = -1 is supported in that case.
Tensor softmax(const Tensor& x, int axis = -1);
Tensor masked_softmax(const Tensor& x, std::span<const std::uint8_t> mask);
Tensor log_softmax(const Tensor& x, int axis = -1);

// Normalizes over the last axis; gain/bias may be undefined (no affine).
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                  double eps = 1e-5);

// Inverted dropout: survivors scaled by 1/(1-p); identity when !training.
Tensor dropout(const Tensor& x, double p, bool training, Rng* rng);

// x: [C, H, W], weight: [O, C, kh, kw], bias: [O] (may be undefined).
Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias,
              std::size_t stride_h, std::size_t stride_w, std::size_t pad_h,
              std::size_t pad_w);

}  // namespace raed

#endif  // RAED_TENSOR_HPP
