#pragma once

// Finite-difference cases for every autodiff primitive. Shared by the unit
// tests and the acceptance binary.

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "multehr/heads.hpp"
#include "multehr/tensor.hpp"
#include "multehr/transe.hpp"

namespace gradcheck {

using multehr::Rng;
using multehr::Shape;
using multehr::Tensor;

struct Case {
  std::string name;
  Shape input_shape;
  // Maps a raw draw in [-2, 2] into the primitive's smooth domain.
  std::function<double(double)> domain = [](double v) { return v; };
  // Builds the scalar function under test; `rng` supplies fixed constants.
  std::function<std::function<Tensor(const Tensor&)>(Rng& rng)> make;
};

// Nudges draws that fall within `gap` of a non-differentiable point.
inline std::function<double(double)> away_from(double kink, double gap) {
  return [kink, gap](double v) {
    if (std::abs(v - kink) < gap) return v < kink ? kink - gap : kink + gap;
    return v;
  };
}

// Weighted sum with fixed random weights so no coordinate's gradient is
// structurally zero.
inline std::function<Tensor(const Tensor&)> weighted(Rng& rng, Shape out_shape,
                                                     std::function<Tensor(const Tensor&)> op) {
  Tensor w = Tensor::uniform(out_shape, 0.5, 1.5, rng);
  return [w, op](const Tensor& x) { return multehr::sum(multehr::mul(op(x), w)); };
}

inline std::vector<Case> primitive_cases() {
  using namespace multehr;
  std::vector<Case> cases;
  const double kink_gap = 2e-3;

  auto unary = [&](std::string name, std::function<Tensor(const Tensor&)> op,
                   std::function<double(double)> domain = [](double v) { return v; }) {
    cases.push_back({name, {2, 3}, domain, [op](Rng& rng) { return weighted(rng, {2, 3}, op); }});
  };

  cases.push_back({"add (broadcast row)", {3}, {}, [](Rng& rng) {
                     Tensor c = Tensor::uniform({2, 3}, -2, 2, rng);
                     return weighted(rng, {2, 3}, [c](const Tensor& x) { return add(c, x); });
                   }});
  cases.push_back({"sub", {2, 3}, {}, [](Rng& rng) {
                     Tensor c = Tensor::uniform({2, 1}, -2, 2, rng);
                     return weighted(rng, {2, 3}, [c](const Tensor& x) { return sub(c, x); });
                   }});
  cases.push_back({"mul (self)", {2, 3}, {}, [](Rng& rng) {
                     return weighted(rng, {2, 3}, [](const Tensor& x) { return mul(x, x); });
                   }});
  cases.push_back({"div (denominator)", {2, 3}, away_from(0.0, 0.5), [](Rng& rng) {
                     Tensor c = Tensor::uniform({2, 3}, -2, 2, rng);
                     return weighted(rng, {2, 3}, [c](const Tensor& x) { return div(c, x); });
                   }});
  cases.push_back({"div (numerator)", {2, 3}, {}, [](Rng& rng) {
                     Tensor c = Tensor::uniform({3}, 0.5, 2, rng);
                     return weighted(rng, {2, 3}, [c](const Tensor& x) { return div(x, c); });
                   }});
  unary("scale", [](const Tensor& x) { return scale(x, -1.7); });
  unary("add_scalar", [](const Tensor& x) { return add_scalar(x, 0.3); });
  cases.push_back({"matmul (left)", {2, 3}, {}, [](Rng& rng) {
                     Tensor w = Tensor::uniform({3, 4}, -2, 2, rng);
                     return weighted(rng, {2, 4}, [w](const Tensor& x) { return matmul(x, w); });
                   }});
  cases.push_back({"matmul (right)", {3, 2}, {}, [](Rng& rng) {
                     Tensor a = Tensor::uniform({4, 3}, -2, 2, rng);
                     return weighted(rng, {4, 2}, [a](const Tensor& x) { return matmul(a, x); });
                   }});
  cases.push_back({"block_matmul (input)", {3, 4}, {}, [](Rng& rng) {
                     Tensor w = Tensor::uniform({2, 2, 2}, -2, 2, rng);
                     return weighted(rng, {3, 4}, [w](const Tensor& x) { return block_matmul(x, w); });
                   }});
  cases.push_back({"block_matmul (weights)", {2, 2, 2}, {}, [](Rng& rng) {
                     Tensor a = Tensor::uniform({3, 4}, -2, 2, rng);
                     return weighted(rng, {3, 4}, [a](const Tensor& w) { return block_matmul(a, w); });
                   }});
  cases.push_back({"sum", {2, 3}, {}, [](Rng&) {
                     return std::function<Tensor(const Tensor&)>([](const Tensor& x) { return sum(x); });
                   }});
  cases.push_back({"sum (axis 0)", {2, 3}, {}, [](Rng& rng) {
                     return weighted(rng, {3}, [](const Tensor& x) { return sum(x, 0); });
                   }});
  cases.push_back({"sum (axis 1)", {2, 3}, {}, [](Rng& rng) {
                     return weighted(rng, {2}, [](const Tensor& x) { return sum(x, 1); });
                   }});
  cases.push_back({"mean", {2, 3}, {}, [](Rng&) {
                     return std::function<Tensor(const Tensor&)>([](const Tensor& x) { return mean(x); });
                   }});
  cases.push_back({"variance", {2, 3}, {}, [](Rng&) {
                     return std::function<Tensor(const Tensor&)>([](const Tensor& x) { return variance(x); });
                   }});
  unary("exp", [](const Tensor& x) { return multehr::exp(x); });
  unary("log", [](const Tensor& x) { return multehr::log(x); }, [](double v) { return std::abs(v) + 0.1; });
  unary("sqrt", [](const Tensor& x) { return multehr::sqrt(x); }, [](double v) { return std::abs(v) + 0.1; });
  unary("sigmoid", [](const Tensor& x) { return sigmoid(x); });
  unary("log_sigmoid", [](const Tensor& x) { return log_sigmoid(x); });
  unary("tanh", [](const Tensor& x) { return multehr::tanh(x); });
  unary("relu", [](const Tensor& x) { return relu(x); }, away_from(0.0, kink_gap));
  unary("leaky_relu", [](const Tensor& x) { return leaky_relu(x, 0.2); }, away_from(0.0, kink_gap));
  unary("gelu", [](const Tensor& x) { return gelu(x); });
  unary("clamp_min", [](const Tensor& x) { return clamp_min(x, 0.0); }, away_from(0.0, kink_gap));
  cases.push_back({"concat (axis 1)", {2, 3}, {}, [](Rng& rng) {
                     Tensor c = Tensor::uniform({2, 2}, -2, 2, rng);
                     return weighted(rng, {2, 5}, [c](const Tensor& x) { return concat({c, x}, 1); });
                   }});
  cases.push_back({"concat (axis 0)", {2, 3}, {}, [](Rng& rng) {
                     return weighted(rng, {4, 3}, [](const Tensor& x) { return concat({x, scale(x, 2.0)}, 0); });
                   }});
  cases.push_back({"slice", {2, 3}, {}, [](Rng& rng) {
                     return weighted(rng, {2, 2}, [](const Tensor& x) { return slice(x, 1, 1, 3); });
                   }});
  cases.push_back({"reshape", {2, 3}, {}, [](Rng& rng) {
                     return weighted(rng, {3, 2}, [](const Tensor& x) { return reshape(x, {3, 2}); });
                   }});
  cases.push_back({"gather_rows", {3, 2}, {}, [](Rng& rng) {
                     static const std::vector<std::int32_t> idx{2, 0, 2, 1};
                     return weighted(rng, {4, 2}, [](const Tensor& x) { return gather_rows(x, idx); });
                   }});
  cases.push_back({"scatter_add_rows", {4, 2}, {}, [](Rng& rng) {
                     static const std::vector<std::int32_t> idx{1, 0, 1, 2};
                     return weighted(rng, {3, 2}, [](const Tensor& x) { return scatter_add_rows(x, idx, 3); });
                   }});
  cases.push_back({"l2_norm", {2, 3}, away_from(0.0, 0.1), [](Rng& rng) {
                     return weighted(rng, {2}, [](const Tensor& x) { return l2_norm(x); });
                   }});
  cases.push_back({"l1_norm", {2, 3}, away_from(0.0, kink_gap), [](Rng& rng) {
                     return weighted(rng, {2}, [](const Tensor& x) { return l1_norm(x); });
                   }});
  unary("softmax (tau=1)", [](const Tensor& x) { return softmax(x, 1.0); });
  unary("softmax (tau=0.5)", [](const Tensor& x) { return softmax(x, 0.5); });
  unary("log_softmax", [](const Tensor& x) { return log_softmax(x, 0.7); });
  cases.push_back({"segment_softmax", {5, 2}, {}, [](Rng& rng) {
                     static const std::vector<std::int32_t> seg{0, 1, 0, 2, 1};
                     return weighted(rng, {5, 2}, [](const Tensor& x) { return segment_softmax(x, seg, 3, 0.8); });
                   }});
  cases.push_back({"dropout (fixed mask)", {2, 3}, {}, [](Rng& rng) {
                     return weighted(rng, {2, 3}, [](const Tensor& x) {
                       Rng mask_rng(7);
                       return dropout(x, 0.2, mask_rng, true);
                     });
                   }});
  return cases;
}

// Finite-difference cases for the composite training losses.
inline std::vector<Case> composite_cases() {
  using namespace multehr;
  std::vector<Case> cases;
  auto scalar_fn = [](std::function<Tensor(const Tensor&)> f) { return f; };

  // negative scores against positives at 0 with margin 1: kinks at 1
  cases.push_back({"margin loss (negative scores)", {2, 3}, away_from(1.0, 2e-3), [=](Rng&) {
                     return scalar_fn([](const Tensor& neg) { return margin_loss(Tensor::zeros({2}), neg, 1.0); });
                   }});
  cases.push_back({"transe pretrain loss (relations)", {2, 4}, {}, [=](Rng& rng) {
                     TripleStore s;
                     s.type_names = {"a", "b"};
                     s.type_sizes = {3, 4};
                     s.relations = {{"ab", 0, 1}, {"ba", 1, 0}};
                     s.triples = {{0, 0, 1}, {1, 2, 0}, {0, 2, 3}};
                     TransEParams p = init_transe(s, 4, rng);
                     std::vector<Triple> neg;
                     for (const Triple& t : s.triples) {
                       for (const Triple& n : negative_sample(s, t, 2, rng)) neg.push_back(n);
                     }
                     return scalar_fn([s, p, neg](const Tensor& rel) {
                       TransEParams q = p;
                       q.relations = rel;
                       // a wide margin keeps every hinge active
                       return pretrain_loss(q, s, s.triples, neg, 10.0);
                     });
                   }});
  cases.push_back({"uniform loss", {4, 3}, {}, [=](Rng&) {
                     return scalar_fn([](const Tensor& z) {
                       Rng noise(5);
                       return uniform_loss(z, noise);
                     });
                   }});
  cases.push_back({"uniform loss (multilabel)", {3, 2}, {}, [=](Rng&) {
                     return scalar_fn([](const Tensor& z) {
                       Rng noise(6);
                       return uniform_loss_multilabel(z, noise);
                     });
                   }});
  cases.push_back({"binary cross-entropy", {3, 4}, {}, [=](Rng& rng) {
                     std::vector<double> y(12);
                     for (double& v : y) v = std::uniform_int_distribution<int>(0, 1)(rng);
                     Tensor labels({3, 4}, y);
                     return scalar_fn([labels](const Tensor& z) { return bce_loss(z, labels); });
                   }});
  cases.push_back({"cross-entropy", {4, 10}, {}, [=](Rng& rng) {
                     std::vector<std::int32_t> y(4);
                     for (auto& v : y) v = std::uniform_int_distribution<std::int32_t>(0, 9)(rng);
                     return scalar_fn([y](const Tensor& z) { return ce_loss(z, y); });
                   }});
  cases.push_back({"task loss with uniform term", {3, 2}, {}, [=](Rng& rng) {
                     Tensor trivial = Tensor::uniform({3, 2}, -2, 2, rng);
                     std::vector<std::int32_t> y{0, 1, 1};
                     return scalar_fn([trivial, y](const Tensor& z) {
                       Rng noise(8);
                       TaskTargets t;
                       t.classes = y;
                       // the same tensor feeds both branches
                       Tensor both = add(z, trivial);
                       return task_loss({TaskId::Readmission, 2, 1.5}, z, both, t, noise).total;
                     });
                   }});
  cases.push_back({"multi-task aggregate", {4}, {}, [=](Rng&) {
                     return scalar_fn([](const Tensor& l) {
                       std::vector<Tensor> parts;
                       for (std::size_t k = 0; k < 4; ++k) parts.push_back(sum(slice(l, 0, k, k + 1)));
                       return multitask_aggregate(parts, 0.7);
                     });
                   }});
  return cases;
}

struct Outcome {
  std::string name;
  double worst = 0.0;
};

// Runs each case on `draws` random inputs in [-2, 2]; reports the worst
// relative error per case.
inline std::vector<Outcome> run(const std::vector<Case>& cases, int draws, double eps, std::uint64_t seed) {
  std::vector<Outcome> out;
  for (const Case& c : cases) {
    Rng rng(seed);
    Outcome o{c.name, 0.0};
    for (int k = 0; k < draws; ++k) {
      auto f = c.make(rng);
      Tensor x = Tensor::uniform(c.input_shape, -2.0, 2.0, rng);
      if (c.domain) {
        for (double& v : x.mutable_data()) v = c.domain(v);
      }
      const double err = multehr::finite_diff_check(f, x, eps);
      if (std::isnan(err) || err > o.worst) o.worst = err;
      if (std::isnan(err)) break;
    }
    out.push_back(o);
  }
  return out;
}

}  // namespace gradcheck
