#pragma once

#include "multehr/hgt.hpp"

namespace multehr {

// Edge score head: concat(src, dst) -> hidden -> GELU -> 2 logits. The output
// layer starts at zero so every edge begins at (0.5, 0.5).
struct MaskParams {
  Linear hidden;
  Linear output;

  MaskParams detached() const;
};

MaskParams make_mask_params(ParamSet& params, std::size_t dim, Rng& rng);

// One weight per stored edge. A forward edge and its reverse twin share a
// value, scored from the forward (src, dst) features.
struct DisentangleMask {
  EdgeWeights causal;
  EdgeWeights trivial;  // 1 - causal
};

DisentangleMask compute_masks(const HeteroGraph& g, const NodeFeatures& x, const MaskParams& p, double temperature);

// Fixed masks, for tests and the degenerate cases.
DisentangleMask constant_mask(const HeteroGraph& g, double causal);

struct DualOutput {
  EncodeOutput causal;
  EncodeOutput trivial;
};

// Two passes of the same encoder, weighted by the causal and the trivial
// mask. With `stop_trivial_grad`, the trivial pass sees detached encoder
// weights, so its loss trains only the mask head and trivial readouts.
DualOutput dual_encode(const HeteroGraph& g, const NodeFeatures& x, const std::vector<HgtLayerParams>& layers,
                       const EncoderConfig& cfg, const DisentangleMask& mask, double temperature, Rng& rng,
                       bool training, bool stop_trivial_grad);

enum class NoiseTarget { SampledUniform, FixedUniform };

// Mean over rows of JS(p_i, q_i) with natural logs; rows of p and q are
// distributions.
Tensor js_divergence(const Tensor& p, const Tensor& q);

// Mean JS between per-row noise distributions and softmax(logits). Sampled
// noise draws each entry from U(0, 1) and normalizes the row.
Tensor uniform_loss(const Tensor& logits, Rng& rng, NoiseTarget target = NoiseTarget::SampledUniform);

// Multilabel variant: each logit z becomes the 2-point distribution
// (sigmoid(z), 1 - sigmoid(z)); averaged over nodes and labels.
Tensor uniform_loss_multilabel(const Tensor& logits, Rng& rng, NoiseTarget target = NoiseTarget::SampledUniform);

}  // namespace multehr
