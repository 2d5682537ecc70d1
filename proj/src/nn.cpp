#include "multehr/nn.hpp"

#include <cmath>

#include "multehr/errors.hpp"

namespace multehr {

Tensor activate(const Tensor& x, Activation act) {
  return act == Activation::Gelu ? gelu(x) : leaky_relu(x, 0.01);
}

Tensor ParamSet::add(std::string name, Tensor value) {
  for (const auto& n : names_) {
    if (n == name) throw ContractError("duplicate parameter name '" + name + "'");
  }
  value.set_requires_grad(true);
  names_.push_back(std::move(name));
  tensors_.push_back(value);
  return value;
}

std::size_t ParamSet::count() const {
  std::size_t n = 0;
  for (const auto& t : tensors_) n += t.numel();
  return n;
}

void ParamSet::zero_grad() {
  for (auto& t : tensors_) t.zero_grad();
}

TensorMap ParamSet::to_map() const {
  TensorMap out;
  for (std::size_t i = 0; i < names_.size(); ++i) out[names_[i]] = tensors_[i].detach();
  return out;
}

void ParamSet::load(const TensorMap& values) {
  for (std::size_t i = 0; i < names_.size(); ++i) {
    auto it = values.find(names_[i]);
    if (it == values.end()) throw DataError("checkpoint lacks parameter '" + names_[i] + "'");
    if (it->second.shape() != tensors_[i].shape()) {
      throw DataError("checkpoint parameter '" + names_[i] + "' has shape " + shape_str(it->second.shape()) +
                      ", model expects " + shape_str(tensors_[i].shape()));
    }
    auto dst = tensors_[i].mutable_data();
    auto src = it->second.data();
    std::copy(src.begin(), src.end(), dst.begin());
  }
}

Tensor Linear::operator()(const Tensor& x) const {
  Tensor y = matmul(x, weight);
  return bias.defined() ? add(y, bias) : y;
}

Linear Linear::detached() const {
  return {weight.detach(), bias.defined() ? bias.detach() : Tensor{}};
}

Linear make_linear(ParamSet& params, const std::string& name, std::size_t in, std::size_t out, bool bias, Rng& rng) {
  const double a = std::sqrt(6.0 / static_cast<double>(in + out));
  Linear l;
  l.weight = params.add(name + ".w", Tensor::uniform({in, out}, -a, a, rng));
  if (bias) l.bias = params.add(name + ".b", Tensor::zeros({out}));
  return l;
}

}  // namespace multehr
