#include "multehr/causal.hpp"

#include "multehr/errors.hpp"

namespace multehr {

MaskParams MaskParams::detached() const { return {hidden.detached(), output.detached()}; }

MaskParams make_mask_params(ParamSet& params, std::size_t dim, Rng& rng) {
  MaskParams p;
  p.hidden = make_linear(params, "mask.hidden", 2 * dim, dim, true, rng);
  p.output = make_linear(params, "mask.output", dim, 2, true, rng);
  auto w = p.output.weight.mutable_data();
  std::fill(w.begin(), w.end(), 0.0);
  return p;
}

DisentangleMask compute_masks(const HeteroGraph& g, const NodeFeatures& x, const MaskParams& p, double temperature) {
  DisentangleMask mask;
  for (int k = 0; k < kEdgeTypes; k += 2) {
    const EdgeList& e = g.edges[k];
    if (e.size() == 0) continue;
    const EdgeTypeInfo& info = edge_info(edge_type_at(k));
    Tensor pair = concat({gather_rows(x[static_cast<int>(info.src)], e.src), gather_rows(x[static_cast<int>(info.dst)], e.dst)}, 1);
    Tensor logits = p.output(gelu(p.hidden(pair)));
    Tensor causal = reshape(slice(softmax(logits, temperature), 1, 0, 1), {e.size()});
    Tensor trivial = add_scalar(scale(causal, -1.0), 1.0);
    mask.causal[k] = mask.causal[k + 1] = causal;
    mask.trivial[k] = mask.trivial[k + 1] = trivial;
  }
  return mask;
}

DisentangleMask constant_mask(const HeteroGraph& g, double causal) {
  DisentangleMask mask;
  for (int k = 0; k < kEdgeTypes; ++k) {
    mask.causal[k] = Tensor::full({g.edges[k].size()}, causal);
    mask.trivial[k] = Tensor::full({g.edges[k].size()}, 1.0 - causal);
  }
  return mask;
}

DualOutput dual_encode(const HeteroGraph& g, const NodeFeatures& x, const std::vector<HgtLayerParams>& layers,
                       const EncoderConfig& cfg, const DisentangleMask& mask, double temperature, Rng& rng,
                       bool training, bool stop_trivial_grad) {
  DualOutput out;
  out.causal = encode(g, x, layers, cfg, &mask.causal, temperature, rng, training);
  if (stop_trivial_grad) {
    std::vector<HgtLayerParams> frozen;
    frozen.reserve(layers.size());
    for (const auto& l : layers) frozen.push_back(l.detached());
    out.trivial = encode(g, x, frozen, cfg, &mask.trivial, temperature, rng, training);
  } else {
    out.trivial = encode(g, x, layers, cfg, &mask.trivial, temperature, rng, training);
  }
  return out;
}

namespace {

constexpr double kClamp = 1e-12;

}  // namespace

Tensor js_divergence(const Tensor& p, const Tensor& q) {
  if (p.shape() != q.shape() || p.rank() != 2) {
    throw ShapeError("js_divergence: expected matching [N, C] inputs, got " + shape_str(p.shape()) + " and " +
                     shape_str(q.shape()));
  }
  if (p.size(0) == 0) throw ContractError("js_divergence: no rows");
  Tensor m = scale(add(p, q), 0.5);
  Tensor log_m = log(clamp_min(m, kClamp));
  Tensor kl_p = sum(mul(p, sub(log(clamp_min(p, kClamp)), log_m)));
  Tensor kl_q = sum(mul(q, sub(log(clamp_min(q, kClamp)), log_m)));
  return scale(add(kl_p, kl_q), 0.5 / static_cast<double>(p.size(0)));
}

namespace {

Tensor noise_rows(std::size_t n, std::size_t c, Rng& rng, NoiseTarget target) {
  if (target == NoiseTarget::FixedUniform) return Tensor::full({n, c}, 1.0 / static_cast<double>(c));
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::vector<double> v(n * c);
  for (std::size_t i = 0; i < n; ++i) {
    double total = 0.0;
    for (std::size_t j = 0; j < c; ++j) total += v[i * c + j] = unit(rng);
    if (total == 0.0) {
      for (std::size_t j = 0; j < c; ++j) v[i * c + j] = 1.0 / static_cast<double>(c);
    } else {
      for (std::size_t j = 0; j < c; ++j) v[i * c + j] /= total;
    }
  }
  return Tensor({n, c}, std::move(v));
}

}  // namespace

Tensor uniform_loss(const Tensor& logits, Rng& rng, NoiseTarget target) {
  if (logits.rank() != 2) throw ShapeError("uniform_loss: expected [N, C] logits, got " + shape_str(logits.shape()));
  if (logits.size(0) == 0) throw ContractError("uniform_loss: empty target set");
  return js_divergence(noise_rows(logits.size(0), logits.size(1), rng, target), softmax(logits));
}

Tensor uniform_loss_multilabel(const Tensor& logits, Rng& rng, NoiseTarget target) {
  if (logits.rank() != 2) throw ShapeError("uniform_loss_multilabel: expected [N, L] logits");
  const std::size_t n = logits.numel();
  if (n == 0) throw ContractError("uniform_loss_multilabel: empty target set");
  // softmax([z, 0]) = (sigmoid(z), 1 - sigmoid(z))
  Tensor pairs = concat({reshape(logits, {n, 1}), Tensor::zeros({n, 1})}, 1);
  return uniform_loss(pairs, rng, target);
}

}  // namespace multehr
