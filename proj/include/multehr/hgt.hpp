#pragma once

#include <array>
#include <optional>
#include <vector>

#include "multehr/hetero_graph.hpp"
#include "multehr/nn.hpp"

namespace multehr {

using NodeFeatures = std::array<Tensor, kNodeTypes>;
// Per edge type, one value per stored edge ([m]); undefined = no weighting.
using EdgeWeights = std::array<Tensor, kEdgeTypes>;

struct EncoderConfig {
  std::size_t n_layers = 2;
  std::size_t n_heads = 8;
  std::size_t dim = 128;
  Activation activation = Activation::Gelu;
  double dropout = 0.2;

  std::size_t head_dim() const { return dim / n_heads; }
  void validate() const;  // throws ConfigError
};

struct HgtEdgeParams {
  Tensor w_att;  // [heads, dh, dh]
  Tensor w_msg;  // [heads, dh, dh]
  Tensor prior;  // [1]
};

struct HgtLayerParams {
  std::array<Linear, kNodeTypes> key, query, value;
  std::array<Linear, kNodeTypes> out;  // no bias: an empty neighborhood aggregates to exactly 0
  std::array<Tensor, kNodeTypes> skip;  // [1], gate = sigmoid(skip)
  std::array<std::optional<HgtEdgeParams>, kEdgeTypes> edge;

  HgtLayerParams detached() const;
};

struct LayerOutput {
  NodeFeatures features;
  // Attention probabilities [m, heads] per edge type, before edge weights.
  std::array<Tensor, kEdgeTypes> attention;
};

// Parameters for every node type and for the given edge types, registered in
// `params` as "hgt.layer<i>.<name>".
std::vector<HgtLayerParams> make_encoder(ParamSet& params, const EncoderConfig& cfg,
                                         const std::vector<EdgeType>& edge_types, Rng& rng);

// Edge types with parameters when lab events are or are not modeled.
std::vector<EdgeType> encoder_edge_types(bool include_lab_events);

// One typed-attention layer. For a destination node, head h attends over all
// its incoming edges (any type) with logits (K_src W_att) . Q_dst * prior /
// sqrt(dh), softmax at `temperature`; messages V_src W_msg are summed with
// those probabilities (times edge weights when given), projected, dropped
// out, activated and added to the input through the sigmoid skip gate.
// Nodes without in-edges pass through unchanged.
LayerOutput hgt_layer_forward(const HeteroGraph& g, const NodeFeatures& x, const HgtLayerParams& p,
                              const EncoderConfig& cfg, const EdgeWeights* weights, double temperature, Rng& rng,
                              bool training);

struct EncodeOutput {
  NodeFeatures features;
  std::vector<std::array<Tensor, kEdgeTypes>> attention;  // per layer
};

EncodeOutput encode(const HeteroGraph& g, const NodeFeatures& x, const std::vector<HgtLayerParams>& layers,
                    const EncoderConfig& cfg, const EdgeWeights* weights, double temperature, Rng& rng,
                    bool training);

// The graph's own feature matrices.
NodeFeatures graph_features(const HeteroGraph& g);

}  // namespace multehr
