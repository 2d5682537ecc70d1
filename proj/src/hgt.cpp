#include "multehr/hgt.hpp"

#include <cmath>

#include "multehr/errors.hpp"

namespace multehr {

void EncoderConfig::validate() const {
  if (n_layers < 1) throw ConfigError("encoder: n_layers must be at least 1");
  if (n_heads < 1 || dim < 1) throw ConfigError("encoder: dim and n_heads must be positive");
  if (dim % n_heads != 0) {
    throw ConfigError("encoder: dim " + std::to_string(dim) + " is not divisible by n_heads " + std::to_string(n_heads));
  }
  if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("encoder: dropout must lie in [0, 1)");
}

HgtLayerParams HgtLayerParams::detached() const {
  HgtLayerParams out;
  for (int t = 0; t < kNodeTypes; ++t) {
    out.key[t] = key[t].detached();
    out.query[t] = query[t].detached();
    out.value[t] = value[t].detached();
    out.out[t] = this->out[t].detached();
    out.skip[t] = skip[t].detach();
  }
  for (int k = 0; k < kEdgeTypes; ++k) {
    if (edge[k]) out.edge[k] = HgtEdgeParams{edge[k]->w_att.detach(), edge[k]->w_msg.detach(), edge[k]->prior.detach()};
  }
  return out;
}

std::vector<EdgeType> encoder_edge_types(bool include_lab_events) {
  std::vector<EdgeType> out;
  for (int k = 0; k < kEdgeTypes; ++k) {
    const EdgeType e = edge_type_at(k);
    if (!include_lab_events && (e == EdgeType::VisitLabEvent || e == EdgeType::LabEventVisit)) continue;
    out.push_back(e);
  }
  return out;
}

std::vector<HgtLayerParams> make_encoder(ParamSet& params, const EncoderConfig& cfg,
                                         const std::vector<EdgeType>& edge_types, Rng& rng) {
  cfg.validate();
  const std::size_t d = cfg.dim, h = cfg.n_heads, dh = cfg.head_dim();
  const double block_bound = std::sqrt(6.0 / static_cast<double>(2 * dh));
  std::vector<HgtLayerParams> layers(cfg.n_layers);
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    const std::string prefix = "hgt.layer" + std::to_string(l) + ".";
    HgtLayerParams& p = layers[l];
    for (int t = 0; t < kNodeTypes; ++t) {
      const std::string type(node_type_name(node_type_at(t)));
      p.key[t] = make_linear(params, prefix + "key." + type, d, d, true, rng);
      p.query[t] = make_linear(params, prefix + "query." + type, d, d, true, rng);
      p.value[t] = make_linear(params, prefix + "value." + type, d, d, true, rng);
      p.out[t] = make_linear(params, prefix + "out." + type, d, d, false, rng);
      p.skip[t] = params.add(prefix + "skip." + type, Tensor::full({1}, -1.0));
    }
    for (EdgeType e : edge_types) {
      const std::string name(edge_info(e).name);
      HgtEdgeParams ep;
      ep.w_att = params.add(prefix + "att." + name, Tensor::uniform({h, dh, dh}, -block_bound, block_bound, rng));
      ep.w_msg = params.add(prefix + "msg." + name, Tensor::uniform({h, dh, dh}, -block_bound, block_bound, rng));
      ep.prior = params.add(prefix + "prior." + name, Tensor::full({1}, 1.0));
      p.edge[static_cast<int>(e)] = ep;
    }
  }
  return layers;
}

LayerOutput hgt_layer_forward(const HeteroGraph& g, const NodeFeatures& x, const HgtLayerParams& p,
                              const EncoderConfig& cfg, const EdgeWeights* weights, double temperature, Rng& rng,
                              bool training) {
  const std::size_t d = cfg.dim, heads = cfg.n_heads, dh = cfg.head_dim();
  std::array<Tensor, kNodeTypes> keys, queries, values;
  for (int t = 0; t < kNodeTypes; ++t) {
    const std::size_t n = g.node_ids[t].size();
    if (!x[t].defined() || x[t].rank() != 2 || x[t].size(0) != n || x[t].size(1) != d) {
      throw ShapeError("hgt_layer_forward: " + std::string(node_type_name(node_type_at(t))) + " features are " +
                       (x[t].defined() ? shape_str(x[t].shape()) : std::string("undefined")) + ", expected [" +
                       std::to_string(n) + ", " + std::to_string(d) + "]");
    }
  }
  for (int k = 0; k < kEdgeTypes; ++k) {
    if (g.edges[k].size() > 0 && !p.edge[k]) {
      throw ContractError("hgt_layer_forward: no parameters for edge type '" + std::string(edge_info(edge_type_at(k)).name) +
                          "'");
    }
  }
  auto project = [&](std::array<Tensor, kNodeTypes>& cache, const std::array<Linear, kNodeTypes>& lin, int t) -> const Tensor& {
    if (!cache[t].defined()) cache[t] = lin[t](x[t]);
    return cache[t];
  };

  LayerOutput out;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  for (int t = 0; t < kNodeTypes; ++t) {
    const std::size_t n_dst = g.node_ids[t].size();
    std::vector<int> incoming;
    for (int k = 0; k < kEdgeTypes; ++k) {
      if (static_cast<int>(edge_info(edge_type_at(k)).dst) == t && g.edges[k].size() > 0) incoming.push_back(k);
    }
    if (n_dst == 0 || incoming.empty()) {
      out.features[t] = x[t];
      continue;
    }
    std::vector<Tensor> logit_parts, msg_parts, weight_parts;
    std::vector<std::int32_t> segment;
    bool weighted = false;
    for (int k : incoming) {
      const EdgeList& e = g.edges[k];
      const int s = static_cast<int>(edge_info(edge_type_at(k)).src);
      const HgtEdgeParams& ep = *p.edge[k];
      const std::size_t m = e.size();
      Tensor k_att = block_matmul(gather_rows(project(keys, p.key, s), e.src), ep.w_att);
      Tensor q = gather_rows(project(queries, p.query, t), e.dst);
      Tensor logits = sum(reshape(mul(k_att, q), {m, heads, dh}), 2);
      logit_parts.push_back(scale(mul(logits, ep.prior), inv_sqrt));
      msg_parts.push_back(block_matmul(gather_rows(project(values, p.value, s), e.src), ep.w_msg));
      segment.insert(segment.end(), e.dst.begin(), e.dst.end());
      Tensor w;
      if (weights && (*weights)[k].defined()) {
        if ((*weights)[k].numel() != m) {
          throw ShapeError("hgt_layer_forward: edge weights for '" + std::string(edge_info(edge_type_at(k)).name) +
                           "' have " + std::to_string((*weights)[k].numel()) + " entries for " + std::to_string(m) +
                           " edges");
        }
        w = reshape((*weights)[k], {m, 1});
        weighted = true;
      } else {
        w = Tensor::full({m, 1}, 1.0);
      }
      weight_parts.push_back(w);
    }
    auto cat = [](const std::vector<Tensor>& parts) { return parts.size() == 1 ? parts[0] : concat(parts, 0); };
    const std::size_t total = segment.size();
    Tensor att = segment_softmax(cat(logit_parts), segment, n_dst, temperature);
    std::size_t offset = 0;
    for (std::size_t i = 0; i < incoming.size(); ++i) {
      const std::size_t m = g.edges[incoming[i]].size();
      out.attention[incoming[i]] = incoming.size() == 1 ? att : slice(att, 0, offset, offset + m);
      offset += m;
    }
    Tensor probs = weighted ? mul(att, cat(weight_parts)) : att;
    Tensor msgs = reshape(mul(reshape(cat(msg_parts), {total, heads, dh}), reshape(probs, {total, heads, 1})), {total, d});
    Tensor agg = scatter_add_rows(msgs, segment, n_dst);
    Tensor h = activate(dropout(p.out[t](agg), cfg.dropout, rng, training), cfg.activation);
    out.features[t] = add(x[t], mul(h, sigmoid(p.skip[t])));
  }
  return out;
}

EncodeOutput encode(const HeteroGraph& g, const NodeFeatures& x, const std::vector<HgtLayerParams>& layers,
                    const EncoderConfig& cfg, const EdgeWeights* weights, double temperature, Rng& rng,
                    bool training) {
  if (layers.size() != cfg.n_layers) {
    throw ContractError("encode: " + std::to_string(layers.size()) + " layers for n_layers = " +
                        std::to_string(cfg.n_layers));
  }
  EncodeOutput out;
  out.features = x;
  for (const HgtLayerParams& layer : layers) {
    LayerOutput lo = hgt_layer_forward(g, out.features, layer, cfg, weights, temperature, rng, training);
    out.features = std::move(lo.features);
    out.attention.push_back(std::move(lo.attention));
  }
  return out;
}

NodeFeatures graph_features(const HeteroGraph& g) {
  NodeFeatures f;
  for (int t = 0; t < kNodeTypes; ++t) {
    f[t] = g.features[t].defined() ? g.features[t] : Tensor::zeros({g.node_ids[t].size(), g.feature_dim});
  }
  return f;
}

}  // namespace multehr
