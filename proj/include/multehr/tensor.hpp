#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace multehr {

using Shape = std::vector<std::size_t>;
using Rng = std::mt19937_64;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {

struct TensorImpl;

// Receives the output value and the gradient flowing into it; accumulates
// into the grad buffers of the record's inputs.
using BackwardFn =
    std::function<void(std::span<const double> out, std::span<const double> out_grad)>;

// One primitive application on the tape. Inputs are always older than the
// output, so following `inputs` from any node yields a DAG.
struct TapeRecord {
  const char* op = "";
  std::vector<std::shared_ptr<TensorImpl>> inputs;
  BackwardFn backward;
};

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until something accumulates into it
  bool requires_grad = false;
  std::shared_ptr<TapeRecord> record;  // null for leaves
};

}  // namespace detail

/// Dense row-major float64 tensor with optional reverse-mode gradient.
///
/// Copies are shallow: two Tensor handles may refer to the same storage. Values
/// produced by primitives are never modified afterwards; only leaves (model
/// parameters) are updated in place by optimizers through `mutable_data()`.
class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<double> data, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);
  static Tensor uniform(Shape shape, double lo, double hi, Rng& rng,
                        bool requires_grad = false);
  static Tensor normal(Shape shape, double mean, double stddev, Rng& rng,
                       bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t size(std::size_t axis) const;
  std::size_t numel() const;

  std::span<const double> data() const;
  // In-place access; only valid on leaves.
  std::span<double> mutable_data();
  double item() const;
  double operator[](std::size_t flat_index) const { return data()[flat_index]; }

  bool requires_grad() const;
  Tensor& set_requires_grad(bool value);
  bool has_grad() const;
  // Zero-length span when no gradient has been accumulated yet.
  std::span<const double> grad() const;
  void zero_grad();

  bool is_leaf() const;
  const char* op_name() const;

  // New leaf holding a copy of the values, disconnected from the tape.
  Tensor detach() const;
  Tensor clone(bool requires_grad = false) const;

  const std::shared_ptr<detail::TensorImpl>& impl() const { return impl_; }

 private:
  explicit Tensor(std::shared_ptr<detail::TensorImpl> impl) : impl_(std::move(impl)) {}
  friend Tensor make_tensor(std::shared_ptr<detail::TensorImpl> impl);

  std::shared_ptr<detail::TensorImpl> impl_;
};

Tensor make_tensor(std::shared_ptr<detail::TensorImpl> impl);

bool grad_enabled();

// Disables tape recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

// ---------------------------------------------------------------------------
// Primitives. Binary elementwise ops broadcast with numpy semantics.

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double factor);
Tensor add_scalar(const Tensor& x, double value);

Tensor matmul(const Tensor& a, const Tensor& b);
// x: [n, heads*dh], w: [heads, dh, dh]; multiplies each head slice by its own block.
Tensor block_matmul(const Tensor& x, const Tensor& w);

Tensor sum(const Tensor& x);
Tensor sum(const Tensor& x, std::size_t axis);
Tensor mean(const Tensor& x);
// Population variance over all elements.
Tensor variance(const Tensor& x);

Tensor exp(const Tensor& x);
Tensor log(const Tensor& x);
Tensor sqrt(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor log_sigmoid(const Tensor& x);
Tensor tanh(const Tensor& x);
Tensor relu(const Tensor& x);
Tensor leaky_relu(const Tensor& x, double slope = 0.01);
Tensor gelu(const Tensor& x);
Tensor clamp_min(const Tensor& x, double lo);

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis);
Tensor slice(const Tensor& x, std::size_t axis, std::size_t begin, std::size_t end);
Tensor reshape(const Tensor& x, Shape shape);

// Rows are slices along axis 0.
Tensor gather_rows(const Tensor& x, std::span<const std::int32_t> index);
Tensor scatter_add_rows(const Tensor& x, std::span<const std::int32_t> index,
                        std::size_t n_rows);

// Norms over the last axis.
Tensor l2_norm(const Tensor& x);
Tensor l1_norm(const Tensor& x);

// Softmax over the last axis of x / temperature.
Tensor softmax(const Tensor& x, double temperature = 1.0);
Tensor log_softmax(const Tensor& x, double temperature = 1.0);
// x: [E, H]. Softmax of x / temperature over the rows sharing a segment id,
// independently per column.
Tensor segment_softmax(const Tensor& x, std::span<const std::int32_t> segment,
                       std::size_t n_segments, double temperature = 1.0);

// Inverted dropout; identity when !training or p == 0.
Tensor dropout(const Tensor& x, double p, Rng& rng, bool training);

// ---------------------------------------------------------------------------

// Fills grad buffers of every leaf reachable from `root` with d root / d leaf,
// accumulating into existing gradients.
void backward(const Tensor& root);

// Records reachable from `root` in an order where every record follows the
// records producing its inputs. Each record appears exactly once.
std::vector<const detail::TapeRecord*> tape_order(const Tensor& root);

// max_i |analytic_i - central_i| / (|analytic_i| + |central_i| + 1e-12)
double finite_diff_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x,
                         double eps);

}  // namespace multehr
