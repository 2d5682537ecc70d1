#include "multehr/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <numeric>
#include <sstream>
#include <unordered_set>
#include <utility>

#include "multehr/errors.hpp"

namespace multehr {

using detail::TapeRecord;
using detail::TensorImpl;
using ImplPtr = std::shared_ptr<TensorImpl>;

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ']';
  return os.str();
}

// ---------------------------------------------------------------------------
// Tensor handle

Tensor make_tensor(ImplPtr impl) { return Tensor(std::move(impl)); }

Tensor::Tensor(Shape shape, std::vector<double> data, bool requires_grad) {
  if (shape_numel(shape) != data.size()) {
    throw ShapeError("tensor: shape " + shape_str(shape) + " does not match " +
                     std::to_string(data.size()) + " values");
  }
  impl_ = std::make_shared<TensorImpl>();
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

Tensor Tensor::uniform(Shape shape, double lo, double hi, Rng& rng, bool requires_grad) {
  std::uniform_real_distribution<double> dist(lo, hi);
  std::vector<double> data(shape_numel(shape));
  for (double& v : data) v = dist(rng);
  return Tensor(std::move(shape), std::move(data), requires_grad);
}

Tensor Tensor::normal(Shape shape, double mean, double stddev, Rng& rng, bool requires_grad) {
  std::normal_distribution<double> dist(mean, stddev);
  std::vector<double> data(shape_numel(shape));
  for (double& v : data) v = dist(rng);
  return Tensor(std::move(shape), std::move(data), requires_grad);
}

namespace {
const TensorImpl& checked(const ImplPtr& impl) {
  if (!impl) throw ContractError("tensor: use of an undefined tensor");
  return *impl;
}
}  // namespace

const Shape& Tensor::shape() const { return checked(impl_).shape; }

std::size_t Tensor::size(std::size_t axis) const {
  const Shape& s = shape();
  if (axis >= s.size()) throw ShapeError("tensor: axis " + std::to_string(axis) + " out of range for " + shape_str(s));
  return s[axis];
}

std::size_t Tensor::numel() const { return checked(impl_).data.size(); }

std::span<const double> Tensor::data() const { return checked(impl_).data; }

std::span<double> Tensor::mutable_data() {
  checked(impl_);
  if (impl_->record) throw ContractError("tensor: in-place access to a non-leaf tensor");
  return impl_->data;
}

double Tensor::item() const {
  if (numel() != 1) throw ShapeError("item: tensor of shape " + shape_str(shape()) + " is not a scalar");
  return impl_->data[0];
}

bool Tensor::requires_grad() const { return checked(impl_).requires_grad; }

Tensor& Tensor::set_requires_grad(bool value) {
  checked(impl_);
  if (impl_->record && !value) throw ContractError("tensor: cannot clear requires_grad on a non-leaf");
  impl_->requires_grad = value;
  return *this;
}

bool Tensor::has_grad() const { return !checked(impl_).grad.empty(); }

std::span<const double> Tensor::grad() const { return checked(impl_).grad; }

void Tensor::zero_grad() { checked(impl_); impl_->grad.clear(); }

bool Tensor::is_leaf() const { return checked(impl_).record == nullptr; }

const char* Tensor::op_name() const { return impl_ && impl_->record ? impl_->record->op : "leaf"; }

Tensor Tensor::detach() const { return clone(false); }

Tensor Tensor::clone(bool requires_grad) const {
  const TensorImpl& t = checked(impl_);
  return Tensor(t.shape, t.data, requires_grad);
}

// ---------------------------------------------------------------------------
// Recording

namespace {

thread_local bool g_grad_enabled = true;

std::span<double> grad_buffer(TensorImpl& t) {
  if (!t.requires_grad) return {};
  if (t.grad.size() != t.data.size()) t.grad.assign(t.data.size(), 0.0);
  return t.grad;
}

[[maybe_unused]] bool all_finite(std::span<const double> v) {
  return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}

// Builds the output tensor and, when any input is tracked, its tape record.
// `make_backward` is only invoked when a record is needed.
template <class MakeBackward>
Tensor emit(const char* op, Shape shape, std::vector<double> data, std::vector<ImplPtr> inputs,
            MakeBackward&& make_backward) {
#ifndef NDEBUG
  if (!all_finite(data)) {
    bool inputs_finite = std::all_of(inputs.begin(), inputs.end(),
                                     [](const ImplPtr& p) { return all_finite(p->data); });
    if (inputs_finite) throw NumericError(std::string(op) + ": non-finite output from finite inputs");
  }
#endif
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(data);
  const bool track = g_grad_enabled && std::any_of(inputs.begin(), inputs.end(),
                                                   [](const ImplPtr& p) { return p->requires_grad; });
  if (track) {
    impl->requires_grad = true;
    auto record = std::make_shared<TapeRecord>();
    record->op = op;
    record->backward = make_backward();
    record->inputs = std::move(inputs);
    impl->record = std::move(record);
  }
  return make_tensor(std::move(impl));
}

const ImplPtr& need(const Tensor& t, const char* op) {
  if (!t.defined()) throw ContractError(std::string(op) + ": undefined input tensor");
  return t.impl();
}

std::size_t prod(const Shape& s, std::size_t begin, std::size_t end) {
  std::size_t p = 1;
  for (std::size_t i = begin; i < end; ++i) p *= s[i];
  return p;
}

// ---- broadcasting ---------------------------------------------------------

struct Broadcast {
  Shape out;
  std::vector<std::size_t> stride_a, stride_b;
};

std::vector<std::size_t> aligned_strides(const Shape& s, const Shape& out) {
  const std::size_t rank = out.size();
  std::vector<std::size_t> strides(rank, 0);
  std::size_t stride = 1;
  for (std::size_t k = 0; k < s.size(); ++k) {
    const std::size_t dim = s[s.size() - 1 - k];
    const std::size_t o = rank - 1 - k;
    strides[o] = (dim == 1 && out[o] != 1) ? 0 : stride;
    stride *= dim;
  }
  return strides;
}

Broadcast plan_broadcast(const char* op, const Shape& a, const Shape& b) {
  const std::size_t rank = std::max(a.size(), b.size());
  Shape out(rank);
  for (std::size_t k = 0; k < rank; ++k) {
    const std::size_t da = k < a.size() ? a[a.size() - 1 - k] : 1;
    const std::size_t db = k < b.size() ? b[b.size() - 1 - k] : 1;
    if (da != db && da != 1 && db != 1) {
      throw ShapeError(std::string(op) + ": cannot broadcast " + shape_str(a) + " with " + shape_str(b));
    }
    out[rank - 1 - k] = da == 1 ? db : da;
  }
  Broadcast plan{out, aligned_strides(a, out), aligned_strides(b, out)};
  return plan;
}

template <class F>
void for_each_broadcast(const Broadcast& p, F&& f) {
  const std::size_t rank = p.out.size();
  if (rank == 0) {
    f(std::size_t{0}, std::size_t{0}, std::size_t{0});
    return;
  }
  const std::size_t n = shape_numel(p.out);
  const std::size_t last = p.out[rank - 1];
  if (n == 0) return;
  const std::size_t sa = p.stride_a[rank - 1], sb = p.stride_b[rank - 1];
  std::vector<std::size_t> idx(rank, 0);
  std::size_t ia = 0, ib = 0;
  for (std::size_t o = 0; o < n; o += last) {
    for (std::size_t j = 0; j < last; ++j) f(o + j, ia + j * sa, ib + j * sb);
    for (std::size_t d = rank - 1; d-- > 0;) {
      ++idx[d];
      ia += p.stride_a[d];
      ib += p.stride_b[d];
      if (idx[d] < p.out[d]) break;
      ia -= p.stride_a[d] * p.out[d];
      ib -= p.stride_b[d] * p.out[d];
      idx[d] = 0;
    }
  }
}

enum class BinOp { Add, Sub, Mul, Div };

Tensor binary(const char* op, BinOp kind, const Tensor& a, const Tensor& b) {
  const ImplPtr& ai = need(a, op);
  const ImplPtr& bi = need(b, op);
  Broadcast plan = plan_broadcast(op, ai->shape, bi->shape);
  std::vector<double> out(shape_numel(plan.out));
  const double* pa = ai->data.data();
  const double* pb = bi->data.data();
  if (kind == BinOp::Div) {
    for_each_broadcast(plan, [&](std::size_t, std::size_t, std::size_t jb) {
      if (pb[jb] == 0.0) throw DomainError(std::string(op) + ": division by zero");
    });
  }
  for_each_broadcast(plan, [&](std::size_t o, std::size_t ja, std::size_t jb) {
    switch (kind) {
      case BinOp::Add: out[o] = pa[ja] + pb[jb]; break;
      case BinOp::Sub: out[o] = pa[ja] - pb[jb]; break;
      case BinOp::Mul: out[o] = pa[ja] * pb[jb]; break;
      case BinOp::Div: out[o] = pa[ja] / pb[jb]; break;
    }
  });
  Shape shape = plan.out;
  return emit(op, std::move(shape), std::move(out), {ai, bi}, [ai, bi, kind, plan = std::move(plan)]() {
    return [ai, bi, kind, plan](std::span<const double>, std::span<const double> g) {
      std::span<double> ga = grad_buffer(*ai);
      std::span<double> gb = grad_buffer(*bi);
      const double* pa = ai->data.data();
      const double* pb = bi->data.data();
      for_each_broadcast(plan, [&](std::size_t o, std::size_t ja, std::size_t jb) {
        switch (kind) {
          case BinOp::Add:
            if (!ga.empty()) ga[ja] += g[o];
            if (!gb.empty()) gb[jb] += g[o];
            break;
          case BinOp::Sub:
            if (!ga.empty()) ga[ja] += g[o];
            if (!gb.empty()) gb[jb] -= g[o];
            break;
          case BinOp::Mul:
            if (!ga.empty()) ga[ja] += g[o] * pb[jb];
            if (!gb.empty()) gb[jb] += g[o] * pa[ja];
            break;
          case BinOp::Div:
            if (!ga.empty()) ga[ja] += g[o] / pb[jb];
            if (!gb.empty()) gb[jb] -= g[o] * pa[ja] / (pb[jb] * pb[jb]);
            break;
        }
      });
    };
  });
}

// Elementwise op whose derivative is a function of (input, output).
template <class Fwd, class Deriv>
Tensor unary(const char* op, const Tensor& x, Fwd fwd, Deriv deriv) {
  const ImplPtr& xi = need(x, op);
  std::vector<double> out(xi->data.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(xi->data[i]);
  return emit(op, xi->shape, std::move(out), {xi}, [xi, deriv]() {
    return [xi, deriv](std::span<const double> y, std::span<const double> g) {
      std::span<double> gx = grad_buffer(*xi);
      if (gx.empty()) return;
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[i] * deriv(xi->data[i], y[i]);
    };
  });
}

double stable_sigmoid(double z) {
  if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

void check_temperature(const char* op, double temperature) {
  if (!(temperature > 0.0)) throw DomainError(std::string(op) + ": temperature must be positive");
}

}  // namespace

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

// ---------------------------------------------------------------------------
// Elementwise

Tensor add(const Tensor& a, const Tensor& b) { return binary("add", BinOp::Add, a, b); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary("sub", BinOp::Sub, a, b); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary("mul", BinOp::Mul, a, b); }
Tensor div(const Tensor& a, const Tensor& b) { return binary("div", BinOp::Div, a, b); }

Tensor scale(const Tensor& x, double factor) {
  return unary("scale", x, [factor](double v) { return v * factor; },
               [factor](double, double) { return factor; });
}

Tensor add_scalar(const Tensor& x, double value) {
  return unary("add_scalar", x, [value](double v) { return v + value; }, [](double, double) { return 1.0; });
}

Tensor exp(const Tensor& x) {
  return unary("exp", x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& x) {
  for (double v : need(x, "log")->data) {
    if (v < 0.0) throw DomainError("log: negative input " + std::to_string(v));
  }
  return unary("log", x, [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

Tensor sqrt(const Tensor& x) {
  for (double v : need(x, "sqrt")->data) {
    if (v < 0.0) throw DomainError("sqrt: negative input " + std::to_string(v));
  }
  return unary("sqrt", x, [](double v) { return std::sqrt(v); }, [](double, double y) { return 0.5 / y; });
}

Tensor sigmoid(const Tensor& x) {
  return unary("sigmoid", x, stable_sigmoid, [](double, double y) { return y * (1.0 - y); });
}

Tensor log_sigmoid(const Tensor& x) {
  return unary(
      "log_sigmoid", x,
      [](double z) { return z >= 0 ? -std::log1p(std::exp(-z)) : z - std::log1p(std::exp(z)); },
      [](double z, double) { return stable_sigmoid(-z); });
}

Tensor tanh(const Tensor& x) {
  return unary("tanh", x, [](double v) { return std::tanh(v); }, [](double, double y) { return 1.0 - y * y; });
}

Tensor relu(const Tensor& x) {
  return unary("relu", x, [](double v) { return v > 0 ? v : 0.0; },
               [](double v, double) { return v > 0 ? 1.0 : 0.0; });
}

Tensor leaky_relu(const Tensor& x, double slope) {
  return unary("leaky_relu", x, [slope](double v) { return v > 0 ? v : slope * v; },
               [slope](double v, double) { return v > 0 ? 1.0 : slope; });
}

Tensor gelu(const Tensor& x) {
  constexpr double inv_sqrt2 = 0.70710678118654752440;
  const double inv_sqrt_2pi = 0.5 * std::numbers::inv_sqrtpi * std::numbers::sqrt2;
  return unary(
      "gelu", x, [](double v) { return 0.5 * v * (1.0 + std::erf(v * inv_sqrt2)); },
      [inv_sqrt_2pi](double v, double) {
        const double cdf = 0.5 * (1.0 + std::erf(v * inv_sqrt2));
        return cdf + v * inv_sqrt_2pi * std::exp(-0.5 * v * v);
      });
}

Tensor clamp_min(const Tensor& x, double lo) {
  return unary("clamp_min", x, [lo](double v) { return v < lo ? lo : v; },
               [lo](double v, double) { return v < lo ? 0.0 : 1.0; });
}

// ---------------------------------------------------------------------------
// Linear algebra

Tensor matmul(const Tensor& a, const Tensor& b) {
  const ImplPtr& ai = need(a, "matmul");
  const ImplPtr& bi = need(b, "matmul");
  if (ai->shape.size() != 2 || bi->shape.size() != 2 || ai->shape[1] != bi->shape[0]) {
    throw ShapeError("matmul: incompatible shapes " + shape_str(ai->shape) + " and " + shape_str(bi->shape));
  }
  const std::size_t m = ai->shape[0], k = ai->shape[1], n = bi->shape[1];
  std::vector<double> out(m * n, 0.0);
  const double* A = ai->data.data();
  const double* B = bi->data.data();
  for (std::size_t i = 0; i < m; ++i) {
    double* row = out.data() + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = A[i * k + p];
      if (av == 0.0) continue;
      const double* brow = B + p * n;
      for (std::size_t j = 0; j < n; ++j) row[j] += av * brow[j];
    }
  }
  return emit("matmul", {m, n}, std::move(out), {ai, bi}, [ai, bi, m, k, n]() {
    return [ai, bi, m, k, n](std::span<const double>, std::span<const double> g) {
      const double* A = ai->data.data();
      const double* B = bi->data.data();
      std::span<double> ga = grad_buffer(*ai);
      if (!ga.empty()) {
        for (std::size_t i = 0; i < m; ++i) {
          const double* grow = g.data() + i * n;
          for (std::size_t p = 0; p < k; ++p) {
            const double* brow = B + p * n;
            double acc = 0.0;
            for (std::size_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
            ga[i * k + p] += acc;
          }
        }
      }
      std::span<double> gb = grad_buffer(*bi);
      if (!gb.empty()) {
        for (std::size_t i = 0; i < m; ++i) {
          const double* grow = g.data() + i * n;
          for (std::size_t p = 0; p < k; ++p) {
            const double av = A[i * k + p];
            if (av == 0.0) continue;
            double* gbrow = gb.data() + p * n;
            for (std::size_t j = 0; j < n; ++j) gbrow[j] += av * grow[j];
          }
        }
      }
    };
  });
}

Tensor block_matmul(const Tensor& x, const Tensor& w) {
  const ImplPtr& xi = need(x, "block_matmul");
  const ImplPtr& wi = need(w, "block_matmul");
  if (xi->shape.size() != 2 || wi->shape.size() != 3 || wi->shape[1] != wi->shape[2] ||
      xi->shape[1] != wi->shape[0] * wi->shape[1]) {
    throw ShapeError("block_matmul: incompatible shapes " + shape_str(xi->shape) + " and " + shape_str(wi->shape));
  }
  const std::size_t n = xi->shape[0], heads = wi->shape[0], dh = wi->shape[1], d = heads * dh;
  std::vector<double> out(n * d, 0.0);
  const double* X = xi->data.data();
  const double* W = wi->data.data();
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t h = 0; h < heads; ++h) {
      const double* xr = X + i * d + h * dh;
      const double* wh = W + h * dh * dh;
      double* orow = out.data() + i * d + h * dh;
      for (std::size_t p = 0; p < dh; ++p) {
        const double xv = xr[p];
        for (std::size_t j = 0; j < dh; ++j) orow[j] += xv * wh[p * dh + j];
      }
    }
  }
  return emit("block_matmul", {n, d}, std::move(out), {xi, wi}, [xi, wi, n, heads, dh, d]() {
    return [xi, wi, n, heads, dh, d](std::span<const double>, std::span<const double> g) {
      const double* X = xi->data.data();
      const double* W = wi->data.data();
      std::span<double> gx = grad_buffer(*xi);
      std::span<double> gw = grad_buffer(*wi);
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t h = 0; h < heads; ++h) {
          const double* grow = g.data() + i * d + h * dh;
          const double* wh = W + h * dh * dh;
          const double* xr = X + i * d + h * dh;
          for (std::size_t p = 0; p < dh; ++p) {
            if (!gx.empty()) {
              double acc = 0.0;
              for (std::size_t j = 0; j < dh; ++j) acc += grow[j] * wh[p * dh + j];
              gx[i * d + h * dh + p] += acc;
            }
            if (!gw.empty()) {
              double* gwrow = gw.data() + h * dh * dh + p * dh;
              for (std::size_t j = 0; j < dh; ++j) gwrow[j] += xr[p] * grow[j];
            }
          }
        }
      }
    };
  });
}

// ---------------------------------------------------------------------------
// Reductions

Tensor sum(const Tensor& x) {
  const ImplPtr& xi = need(x, "sum");
  double s = 0.0;
  for (double v : xi->data) s += v;
  return emit("sum", {}, {s}, {xi}, [xi]() {
    return [xi](std::span<const double>, std::span<const double> g) {
      std::span<double> gx = grad_buffer(*xi);
      for (double& v : gx) v += g[0];
    };
  });
}

Tensor sum(const Tensor& x, std::size_t axis) {
  const ImplPtr& xi = need(x, "sum");
  if (axis >= xi->shape.size()) throw ShapeError("sum: axis out of range for " + shape_str(xi->shape));
  const std::size_t outer = prod(xi->shape, 0, axis), len = xi->shape[axis],
                    inner = prod(xi->shape, axis + 1, xi->shape.size());
  Shape shape = xi->shape;
  shape.erase(shape.begin() + static_cast<std::ptrdiff_t>(axis));
  std::vector<double> out(outer * inner, 0.0);
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t l = 0; l < len; ++l)
      for (std::size_t i = 0; i < inner; ++i) out[o * inner + i] += xi->data[(o * len + l) * inner + i];
  return emit("sum_axis", std::move(shape), std::move(out), {xi}, [xi, outer, len, inner]() {
    return [xi, outer, len, inner](std::span<const double>, std::span<const double> g) {
      std::span<double> gx = grad_buffer(*xi);
      if (gx.empty()) return;
      for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t l = 0; l < len; ++l)
          for (std::size_t i = 0; i < inner; ++i) gx[(o * len + l) * inner + i] += g[o * inner + i];
    };
  });
}

Tensor mean(const Tensor& x) {
  const ImplPtr& xi = need(x, "mean");
  if (xi->data.empty()) throw ShapeError("mean: empty tensor");
  return scale(sum(x), 1.0 / static_cast<double>(xi->data.size()));
}

Tensor variance(const Tensor& x) {
  const ImplPtr& xi = need(x, "variance");
  const std::size_t n = xi->data.size();
  if (n == 0) throw ShapeError("variance: empty tensor");
  double mu = 0.0;
  for (double v : xi->data) mu += v;
  mu /= static_cast<double>(n);
  double var = 0.0;
  for (double v : xi->data) var += (v - mu) * (v - mu);
  var /= static_cast<double>(n);
  return emit("variance", {}, {var}, {xi}, [xi, mu, n]() {
    return [xi, mu, n](std::span<const double>, std::span<const double> g) {
      std::span<double> gx = grad_buffer(*xi);
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[0] * 2.0 * (xi->data[i] - mu) / static_cast<double>(n);
    };
  });
}

// ---------------------------------------------------------------------------
// Structural

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  std::vector<ImplPtr> ins;
  ins.reserve(parts.size());
  for (const Tensor& p : parts) ins.push_back(need(p, "concat"));
  const Shape& first = ins[0]->shape;
  if (axis >= first.size()) throw ShapeError("concat: axis out of range for " + shape_str(first));
  Shape shape = first;
  shape[axis] = 0;
  for (const ImplPtr& p : ins) {
    bool ok = p->shape.size() == first.size();
    for (std::size_t k = 0; ok && k < first.size(); ++k) ok = k == axis || p->shape[k] == first[k];
    if (!ok) throw ShapeError("concat: incompatible shapes " + shape_str(first) + " and " + shape_str(p->shape));
    shape[axis] += p->shape[axis];
  }
  const std::size_t outer = prod(first, 0, axis), inner = prod(first, axis + 1, first.size());
  const std::size_t out_row = shape[axis] * inner;
  std::vector<double> out(shape_numel(shape));
  std::vector<std::size_t> offsets;
  std::size_t offset = 0;
  for (const ImplPtr& p : ins) {
    offsets.push_back(offset);
    const std::size_t chunk = p->shape[axis] * inner;
    for (std::size_t o = 0; o < outer; ++o)
      std::copy_n(p->data.data() + o * chunk, chunk, out.data() + o * out_row + offset);
    offset += chunk;
  }
  std::vector<ImplPtr> captured = ins;
  return emit("concat", std::move(shape), std::move(out), std::move(ins),
              [captured = std::move(captured), offsets = std::move(offsets), outer, inner, out_row, axis]() {
                return [captured, offsets, outer, inner, out_row, axis](std::span<const double>,
                                                                        std::span<const double> g) {
                  for (std::size_t k = 0; k < captured.size(); ++k) {
                    std::span<double> gp = grad_buffer(*captured[k]);
                    if (gp.empty()) continue;
                    const std::size_t chunk = captured[k]->shape[axis] * inner;
                    for (std::size_t o = 0; o < outer; ++o)
                      for (std::size_t j = 0; j < chunk; ++j) gp[o * chunk + j] += g[o * out_row + offsets[k] + j];
                  }
                };
              });
}

Tensor slice(const Tensor& x, std::size_t axis, std::size_t begin, std::size_t end) {
  const ImplPtr& xi = need(x, "slice");
  if (axis >= xi->shape.size() || begin > end || end > xi->shape[axis]) {
    throw ShapeError("slice: range [" + std::to_string(begin) + ", " + std::to_string(end) + ") on axis " +
                     std::to_string(axis) + " invalid for " + shape_str(xi->shape));
  }
  const std::size_t outer = prod(xi->shape, 0, axis), inner = prod(xi->shape, axis + 1, xi->shape.size());
  const std::size_t in_row = xi->shape[axis] * inner, chunk = (end - begin) * inner, off = begin * inner;
  Shape shape = xi->shape;
  shape[axis] = end - begin;
  std::vector<double> out(outer * chunk);
  for (std::size_t o = 0; o < outer; ++o)
    std::copy_n(xi->data.data() + o * in_row + off, chunk, out.data() + o * chunk);
  return emit("slice", std::move(shape), std::move(out), {xi}, [xi, outer, in_row, chunk, off]() {
    return [xi, outer, in_row, chunk, off](std::span<const double>, std::span<const double> g) {
      std::span<double> gx = grad_buffer(*xi);
      if (gx.empty()) return;
      for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t j = 0; j < chunk; ++j) gx[o * in_row + off + j] += g[o * chunk + j];
    };
  });
}

Tensor reshape(const Tensor& x, Shape shape) {
  const ImplPtr& xi = need(x, "reshape");
  if (shape_numel(shape) != xi->data.size()) {
    throw ShapeError("reshape: cannot view " + shape_str(xi->shape) + " as " + shape_str(shape));
  }
  return emit("reshape", std::move(shape), xi->data, {xi}, [xi]() {
    return [xi](std::span<const double>, std::span<const double> g) {
      std::span<double> gx = grad_buffer(*xi);
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[i];
    };
  });
}

Tensor gather_rows(const Tensor& x, std::span<const std::int32_t> index) {
  const ImplPtr& xi = need(x, "gather_rows");
  if (xi->shape.empty()) throw ShapeError("gather_rows: scalar input");
  const std::size_t rows = xi->shape[0], width = prod(xi->shape, 1, xi->shape.size());
  Shape shape = xi->shape;
  shape[0] = index.size();
  std::vector<double> out(index.size() * width);
  for (std::size_t r = 0; r < index.size(); ++r) {
    if (index[r] < 0 || static_cast<std::size_t>(index[r]) >= rows) {
      throw ContractError("gather_rows: index " + std::to_string(index[r]) + " out of range for " +
                          shape_str(xi->shape));
    }
    std::copy_n(xi->data.data() + static_cast<std::size_t>(index[r]) * width, width, out.data() + r * width);
  }
  std::vector<std::int32_t> idx(index.begin(), index.end());
  return emit("gather_rows", std::move(shape), std::move(out), {xi}, [xi, &idx, width]() {
    return [xi, idx = std::move(idx), width](std::span<const double>, std::span<const double> g) {
      std::span<double> gx = grad_buffer(*xi);
      if (gx.empty()) return;
      for (std::size_t r = 0; r < idx.size(); ++r) {
        double* dst = gx.data() + static_cast<std::size_t>(idx[r]) * width;
        const double* src = g.data() + r * width;
        for (std::size_t j = 0; j < width; ++j) dst[j] += src[j];
      }
    };
  });
}

Tensor scatter_add_rows(const Tensor& x, std::span<const std::int32_t> index, std::size_t n_rows) {
  const ImplPtr& xi = need(x, "scatter_add_rows");
  if (xi->shape.empty() || xi->shape[0] != index.size()) {
    throw ShapeError("scatter_add_rows: " + std::to_string(index.size()) + " indices for rows of " +
                     shape_str(xi->shape));
  }
  const std::size_t width = prod(xi->shape, 1, xi->shape.size());
  Shape shape = xi->shape;
  shape[0] = n_rows;
  std::vector<double> out(n_rows * width, 0.0);
  for (std::size_t r = 0; r < index.size(); ++r) {
    if (index[r] < 0 || static_cast<std::size_t>(index[r]) >= n_rows) {
      throw ContractError("scatter_add_rows: index " + std::to_string(index[r]) + " out of range for " +
                          std::to_string(n_rows) + " rows");
    }
    double* dst = out.data() + static_cast<std::size_t>(index[r]) * width;
    const double* src = xi->data.data() + r * width;
    for (std::size_t j = 0; j < width; ++j) dst[j] += src[j];
  }
  std::vector<std::int32_t> idx(index.begin(), index.end());
  return emit("scatter_add_rows", std::move(shape), std::move(out), {xi}, [xi, &idx, width]() {
    return [xi, idx = std::move(idx), width](std::span<const double>, std::span<const double> g) {
      std::span<double> gx = grad_buffer(*xi);
      if (gx.empty()) return;
      for (std::size_t r = 0; r < idx.size(); ++r) {
        const double* src = g.data() + static_cast<std::size_t>(idx[r]) * width;
        double* dst = gx.data() + r * width;
        for (std::size_t j = 0; j < width; ++j) dst[j] += src[j];
      }
    };
  });
}

// ---------------------------------------------------------------------------
// Norms and normalizers over the last axis

namespace {

struct RowLayout {
  std::size_t rows, width;
  Shape reduced;
};

RowLayout last_axis(const char* op, const ImplPtr& xi) {
  if (xi->shape.empty()) throw ShapeError(std::string(op) + ": scalar input");
  const std::size_t width = xi->shape.back();
  Shape reduced(xi->shape.begin(), xi->shape.end() - 1);
  return {shape_numel(reduced), width, reduced};
}

}  // namespace

Tensor l2_norm(const Tensor& x) {
  const ImplPtr& xi = need(x, "l2_norm");
  RowLayout L = last_axis("l2_norm", xi);
  std::vector<double> out(L.rows);
  for (std::size_t r = 0; r < L.rows; ++r) {
    double s = 0.0;
    for (std::size_t j = 0; j < L.width; ++j) s += xi->data[r * L.width + j] * xi->data[r * L.width + j];
    out[r] = std::sqrt(s);
  }
  const std::size_t width = L.width;
  return emit("l2_norm", L.reduced, std::move(out), {xi}, [xi, width]() {
    return [xi, width](std::span<const double> y, std::span<const double> g) {
      std::span<double> gx = grad_buffer(*xi);
      if (gx.empty()) return;
      for (std::size_t r = 0; r < y.size(); ++r) {
        if (y[r] == 0.0) continue;  // subgradient 0 at the origin
        const double f = g[r] / y[r];
        for (std::size_t j = 0; j < width; ++j) gx[r * width + j] += f * xi->data[r * width + j];
      }
    };
  });
}

Tensor l1_norm(const Tensor& x) {
  const ImplPtr& xi = need(x, "l1_norm");
  RowLayout L = last_axis("l1_norm", xi);
  std::vector<double> out(L.rows, 0.0);
  for (std::size_t r = 0; r < L.rows; ++r)
    for (std::size_t j = 0; j < L.width; ++j) out[r] += std::abs(xi->data[r * L.width + j]);
  const std::size_t width = L.width;
  return emit("l1_norm", L.reduced, std::move(out), {xi}, [xi, width]() {
    return [xi, width](std::span<const double> y, std::span<const double> g) {
      std::span<double> gx = grad_buffer(*xi);
      if (gx.empty()) return;
      for (std::size_t r = 0; r < y.size(); ++r)
        for (std::size_t j = 0; j < width; ++j) {
          const double v = xi->data[r * width + j];
          gx[r * width + j] += g[r] * (v > 0 ? 1.0 : (v < 0 ? -1.0 : 0.0));
        }
    };
  });
}

Tensor softmax(const Tensor& x, double temperature) {
  check_temperature("softmax", temperature);
  const ImplPtr& xi = need(x, "softmax");
  RowLayout L = last_axis("softmax", xi);
  std::vector<double> out(xi->data.size());
  for (std::size_t r = 0; r < L.rows; ++r) {
    const double* in = xi->data.data() + r * L.width;
    double* o = out.data() + r * L.width;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < L.width; ++j) mx = std::max(mx, in[j] / temperature);
    double z = 0.0;
    for (std::size_t j = 0; j < L.width; ++j) z += (o[j] = std::exp(in[j] / temperature - mx));
    for (std::size_t j = 0; j < L.width; ++j) o[j] /= z;
  }
  const std::size_t width = L.width;
  return emit("softmax", xi->shape, std::move(out), {xi}, [xi, width, temperature]() {
    return [xi, width, temperature](std::span<const double> y, std::span<const double> g) {
      std::span<double> gx = grad_buffer(*xi);
      if (gx.empty() || width == 0) return;
      for (std::size_t r = 0; r < y.size() / width; ++r) {
        double dot = 0.0;
        for (std::size_t j = 0; j < width; ++j) dot += g[r * width + j] * y[r * width + j];
        for (std::size_t j = 0; j < width; ++j)
          gx[r * width + j] += y[r * width + j] * (g[r * width + j] - dot) / temperature;
      }
    };
  });
}

Tensor log_softmax(const Tensor& x, double temperature) {
  check_temperature("log_softmax", temperature);
  const ImplPtr& xi = need(x, "log_softmax");
  RowLayout L = last_axis("log_softmax", xi);
  std::vector<double> out(xi->data.size());
  for (std::size_t r = 0; r < L.rows; ++r) {
    const double* in = xi->data.data() + r * L.width;
    double* o = out.data() + r * L.width;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < L.width; ++j) mx = std::max(mx, in[j] / temperature);
    double z = 0.0;
    for (std::size_t j = 0; j < L.width; ++j) z += std::exp(in[j] / temperature - mx);
    const double lse = mx + std::log(z);
    for (std::size_t j = 0; j < L.width; ++j) o[j] = in[j] / temperature - lse;
  }
  const std::size_t width = L.width;
  return emit("log_softmax", xi->shape, std::move(out), {xi}, [xi, width, temperature]() {
    return [xi, width, temperature](std::span<const double> y, std::span<const double> g) {
      std::span<double> gx = grad_buffer(*xi);
      if (gx.empty() || width == 0) return;
      for (std::size_t r = 0; r < y.size() / width; ++r) {
        double gs = 0.0;
        for (std::size_t j = 0; j < width; ++j) gs += g[r * width + j];
        for (std::size_t j = 0; j < width; ++j)
          gx[r * width + j] += (g[r * width + j] - std::exp(y[r * width + j]) * gs) / temperature;
      }
    };
  });
}

Tensor segment_softmax(const Tensor& x, std::span<const std::int32_t> segment, std::size_t n_segments,
                       double temperature) {
  check_temperature("segment_softmax", temperature);
  const ImplPtr& xi = need(x, "segment_softmax");
  if (xi->shape.empty() || xi->shape.size() > 2 || xi->shape[0] != segment.size()) {
    throw ShapeError("segment_softmax: " + std::to_string(segment.size()) + " segment ids for " +
                     shape_str(xi->shape));
  }
  const std::size_t rows = xi->shape[0], cols = xi->shape.size() == 2 ? xi->shape[1] : 1;
  for (std::int32_t s : segment) {
    if (s < 0 || static_cast<std::size_t>(s) >= n_segments) throw ContractError("segment_softmax: segment id out of range");
  }
  std::vector<double> mx(n_segments * cols, -std::numeric_limits<double>::infinity());
  for (std::size_t e = 0; e < rows; ++e)
    for (std::size_t h = 0; h < cols; ++h) {
      double& m = mx[static_cast<std::size_t>(segment[e]) * cols + h];
      m = std::max(m, xi->data[e * cols + h] / temperature);
    }
  std::vector<double> out(rows * cols);
  std::vector<double> z(n_segments * cols, 0.0);
  for (std::size_t e = 0; e < rows; ++e)
    for (std::size_t h = 0; h < cols; ++h) {
      const std::size_t s = static_cast<std::size_t>(segment[e]) * cols + h;
      z[s] += (out[e * cols + h] = std::exp(xi->data[e * cols + h] / temperature - mx[s]));
    }
  for (std::size_t e = 0; e < rows; ++e)
    for (std::size_t h = 0; h < cols; ++h) out[e * cols + h] /= z[static_cast<std::size_t>(segment[e]) * cols + h];
  std::vector<std::int32_t> seg(segment.begin(), segment.end());
  return emit("segment_softmax", xi->shape, std::move(out), {xi},
              [xi, &seg, n_segments, rows, cols, temperature]() {
                return [xi, seg = std::move(seg), n_segments, rows, cols, temperature](
                           std::span<const double> y, std::span<const double> g) {
                  std::span<double> gx = grad_buffer(*xi);
                  if (gx.empty()) return;
                  std::vector<double> dot(n_segments * cols, 0.0);
                  for (std::size_t e = 0; e < rows; ++e)
                    for (std::size_t h = 0; h < cols; ++h)
                      dot[static_cast<std::size_t>(seg[e]) * cols + h] += g[e * cols + h] * y[e * cols + h];
                  for (std::size_t e = 0; e < rows; ++e)
                    for (std::size_t h = 0; h < cols; ++h) {
                      const std::size_t i = e * cols + h;
                      gx[i] += y[i] * (g[i] - dot[static_cast<std::size_t>(seg[e]) * cols + h]) / temperature;
                    }
                };
              });
}

Tensor dropout(const Tensor& x, double p, Rng& rng, bool training) {
  if (p < 0.0 || p >= 1.0) throw DomainError("dropout: rate must be in [0, 1)");
  if (!training || p == 0.0) return x;
  const ImplPtr& xi = need(x, "dropout");
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const double keep_scale = 1.0 / (1.0 - p);
  std::vector<double> mask(xi->data.size());
  std::vector<double> out(xi->data.size());
  for (std::size_t i = 0; i < mask.size(); ++i) {
    mask[i] = u(rng) < p ? 0.0 : keep_scale;
    out[i] = xi->data[i] * mask[i];
  }
  return emit("dropout", xi->shape, std::move(out), {xi}, [xi, &mask]() {
    return [xi, mask = std::move(mask)](std::span<const double>, std::span<const double> g) {
      std::span<double> gx = grad_buffer(*xi);
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[i] * mask[i];
    };
  });
}

// ---------------------------------------------------------------------------
// Reverse pass

namespace {

std::vector<TensorImpl*> topological_nodes(const ImplPtr& root) {
  std::vector<TensorImpl*> order;
  std::unordered_set<const TensorImpl*> seen;
  // (node, next input to visit)
  std::vector<std::pair<TensorImpl*, std::size_t>> stack;
  stack.emplace_back(root.get(), 0);
  seen.insert(root.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    const TapeRecord* rec = node->record.get();
    if (rec && next < rec->inputs.size()) {
      TensorImpl* child = rec->inputs[next++].get();
      if (child->record && seen.insert(child).second) stack.emplace_back(child, 0);
      continue;
    }
    order.push_back(node);
    stack.pop_back();
  }
  return order;
}

}  // namespace

std::vector<const TapeRecord*> tape_order(const Tensor& root) {
  std::vector<const TapeRecord*> records;
  if (!root.defined() || !root.impl()->record) return records;
  for (TensorImpl* node : topological_nodes(root.impl())) records.push_back(node->record.get());
  return records;
}

void backward(const Tensor& root) {
  const ImplPtr& ri = need(root, "backward");
  if (ri->data.size() != 1) throw ContractError("backward: root must be a scalar, got " + shape_str(ri->shape));
  if (!ri->requires_grad) return;
  if (!ri->record) {
    grad_buffer(*ri)[0] += 1.0;
    return;
  }
  std::vector<TensorImpl*> order = topological_nodes(ri);
  std::vector<double> seed(1, 1.0);
  ri->grad.swap(seed);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    TensorImpl* node = *it;
    if (node->grad.size() != node->data.size()) continue;  // no gradient reached this node
    node->record->backward(node->data, node->grad);
    std::vector<double>().swap(node->grad);
  }
}

double finite_diff_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, double eps) {
  Tensor leaf = x.clone(true);
  Tensor y = f(leaf);
  if (y.numel() != 1) throw ContractError("finite_diff_check: function must return a scalar");
  backward(y);
  std::vector<double> analytic(x.numel(), 0.0);
  if (leaf.grad().size() == analytic.size()) std::copy(leaf.grad().begin(), leaf.grad().end(), analytic.begin());

  NoGradGuard no_grad;
  double worst = 0.0;
  for (std::size_t i = 0; i < x.numel(); ++i) {
    Tensor plus = x.clone(), minus = x.clone();
    plus.mutable_data()[i] += eps;
    minus.mutable_data()[i] -= eps;
    const double central = (f(plus).item() - f(minus).item()) / (2.0 * eps);
    const double err = std::abs(analytic[i] - central) / (std::abs(analytic[i]) + std::abs(central) + 1e-12);
    if (std::isnan(err)) return err;
    worst = std::max(worst, err);
  }
  return worst;
}

}  // namespace multehr
