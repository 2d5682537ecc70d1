#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "multehr/tensor.hpp"

namespace multehr {

struct AdamConfig {
  double learning_rate = 5e-5;
  double weight_decay = 1e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

struct AdamState {
  AdamConfig config;
  std::vector<std::vector<double>> first_moment;
  std::vector<std::vector<double>> second_moment;
  std::uint64_t step = 0;
};

// Zero moments shaped like `params`.
AdamState make_adam_state(std::span<const Tensor> params, AdamConfig config);

// One Adam update using each parameter's accumulated gradient (absent
// gradient counts as zero). Weight decay is decoupled: p -= lr * wd * p.
void adam_step(std::span<Tensor> params, AdamState& state);

}  // namespace multehr
