#pragma once

#include <string>
#include <vector>

#include "multehr/checkpoint.hpp"
#include "multehr/tensor.hpp"

namespace multehr {

enum class Activation { Gelu, LeakyRelu };

Tensor activate(const Tensor& x, Activation act);

// Named trainable leaves. Modules keep handles to the same storage, so
// optimizer updates and checkpoint loads are visible to them.
class ParamSet {
 public:
  Tensor add(std::string name, Tensor value);

  std::vector<Tensor>& tensors() { return tensors_; }
  const std::vector<Tensor>& tensors() const { return tensors_; }
  const std::vector<std::string>& names() const { return names_; }
  std::size_t count() const;  // total scalar parameters

  void zero_grad();
  TensorMap to_map() const;
  // Copies values into the existing leaves; every name must be present with
  // the same shape (DataError otherwise). Extra entries are ignored.
  void load(const TensorMap& values);

 private:
  std::vector<std::string> names_;
  std::vector<Tensor> tensors_;
};

struct Linear {
  Tensor weight;  // [in, out]
  Tensor bias;    // [out], undefined when the layer has no bias

  Tensor operator()(const Tensor& x) const;
  Linear detached() const;
};

// Glorot-uniform weight, zero bias.
Linear make_linear(ParamSet& params, const std::string& name, std::size_t in, std::size_t out, bool bias, Rng& rng);

}  // namespace multehr
