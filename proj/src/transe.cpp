#include "multehr/transe.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <unordered_set>

#include "multehr/errors.hpp"
#include "multehr/optim.hpp"

namespace multehr {

void TripleStore::validate() const {
  if (type_names.size() != type_sizes.size()) throw ContractError("triple store: type names and sizes differ");
  for (const auto& r : relations) {
    if (r.head_type >= type_sizes.size() || r.tail_type >= type_sizes.size()) {
      throw ContractError("triple store: relation '" + r.name + "' references an unknown type");
    }
  }
  for (std::size_t i = 0; i < triples.size(); ++i) {
    const Triple& t = triples[i];
    if (t.relation < 0 || static_cast<std::size_t>(t.relation) >= relations.size()) {
      throw ContractError("triple store: triple " + std::to_string(i) + " has unknown relation");
    }
    const Relation& r = relations[static_cast<std::size_t>(t.relation)];
    if (t.head < 0 || static_cast<std::size_t>(t.head) >= type_sizes[r.head_type] || t.tail < 0 ||
        static_cast<std::size_t>(t.tail) >= type_sizes[r.tail_type]) {
      throw ContractError("triple store: triple " + std::to_string(i) + " has an entity out of range");
    }
  }
}

TripleStore triples_from_graph(const HeteroGraph& g, const std::vector<EdgeType>& exclude) {
  TripleStore store;
  for (int t = 0; t < kNodeTypes; ++t) {
    store.type_names.emplace_back(node_type_name(node_type_at(t)));
    store.type_sizes.push_back(g.node_ids[t].size());
  }
  for (int k = 0; k < kEdgeTypes; ++k) {
    const EdgeType et = edge_type_at(k);
    const EdgeTypeInfo& info = edge_info(et);
    store.relations.push_back({std::string(info.name), static_cast<std::size_t>(info.src), static_cast<std::size_t>(info.dst)});
    if (std::find(exclude.begin(), exclude.end(), et) != exclude.end()) continue;
    const EdgeList& e = g.edges[k];
    for (std::size_t j = 0; j < e.size(); ++j) store.triples.push_back({k, e.src[j], e.dst[j]});
  }
  return store;
}

TransEParams init_transe(const TripleStore& store, std::size_t dim, Rng& rng) {
  if (dim == 0) throw ContractError("init_transe: embedding width must be positive");
  TransEParams p;
  std::size_t total = 0;
  for (std::size_t n : store.type_sizes) {
    p.type_offsets.push_back(total);
    total += n;
  }
  const double bound = 6.0 / std::sqrt(static_cast<double>(dim));
  p.entities = Tensor::uniform({total, dim}, -bound, bound, rng, true);
  p.relations = Tensor::uniform({store.relations.size(), dim}, -bound, bound, rng, true);
  normalize_entities(p);
  return p;
}

void normalize_entities(TransEParams& params) {
  auto data = params.entities.mutable_data();
  const std::size_t d = params.dim();
  for (std::size_t r = 0; r * d < data.size(); ++r) {
    double s = 0.0;
    for (std::size_t j = 0; j < d; ++j) s += data[r * d + j] * data[r * d + j];
    const double n = std::sqrt(s);
    if (n == 0.0) continue;
    for (std::size_t j = 0; j < d; ++j) data[r * d + j] /= n;
  }
}

double transe_score(std::span<const double> h, std::span<const double> r, std::span<const double> t, TransENorm norm) {
  if (h.size() != r.size() || h.size() != t.size()) {
    throw ContractError("transe_score: widths differ (" + std::to_string(h.size()) + ", " + std::to_string(r.size()) +
                        ", " + std::to_string(t.size()) + ")");
  }
  double s = 0.0;
  for (std::size_t i = 0; i < h.size(); ++i) {
    const double v = h[i] + r[i] - t[i];
    s += norm == TransENorm::L2 ? v * v : std::abs(v);
  }
  return norm == TransENorm::L2 ? std::sqrt(s) : s;
}

Tensor transe_scores(const TransEParams& params, const TripleStore& store, std::span<const Triple> batch,
                     TransENorm norm) {
  std::vector<std::int32_t> heads, rels, tails;
  heads.reserve(batch.size());
  rels.reserve(batch.size());
  tails.reserve(batch.size());
  for (const Triple& t : batch) {
    const auto& r = store.relations.at(static_cast<std::size_t>(t.relation));
    heads.push_back(params.global(r.head_type, t.head));
    rels.push_back(t.relation);
    tails.push_back(params.global(r.tail_type, t.tail));
  }
  Tensor diff = sub(add(gather_rows(params.entities, heads), gather_rows(params.relations, rels)),
                    gather_rows(params.entities, tails));
  return norm == TransENorm::L2 ? l2_norm(diff) : l1_norm(diff);
}

std::vector<Triple> negative_sample(const TripleStore& store, const Triple& positive, std::size_t k, Rng& rng) {
  if (k == 0) throw ContractError("negative_sample: k must be at least 1");
  const auto& rel = store.relations.at(static_cast<std::size_t>(positive.relation));
  const std::size_t nh = store.type_sizes[rel.head_type];
  const std::size_t nt = store.type_sizes[rel.tail_type];
  if (nh < 2 && nt < 2) {
    throw ContractError("negative_sample: relation '" + rel.name + "' has single-entity head and tail types");
  }
  std::bernoulli_distribution coin(0.5);
  std::vector<Triple> out;
  out.reserve(k);
  for (std::size_t i = 0; i < k; ++i) {
    bool corrupt_head = coin(rng);
    if (corrupt_head && nh < 2) corrupt_head = false;
    if (!corrupt_head && nt < 2) corrupt_head = true;
    Triple neg = positive;
    const std::size_t n = corrupt_head ? nh : nt;
    const std::int32_t original = corrupt_head ? positive.head : positive.tail;
    // Uniform over the other n - 1 entities: draw from n - 1 and skip the original.
    std::uniform_int_distribution<std::int32_t> pick(0, static_cast<std::int32_t>(n) - 2);
    std::int32_t c = pick(rng);
    if (c >= original) ++c;
    (corrupt_head ? neg.head : neg.tail) = c;
    out.push_back(neg);
  }
  return out;
}

Tensor margin_loss(const Tensor& positive_scores, const Tensor& negative_scores, double gamma) {
  if (!(gamma > 0.0)) throw ContractError("margin_loss: gamma must be positive");
  if (positive_scores.numel() == 0) throw ContractError("margin_loss: empty batch");
  if (positive_scores.rank() != 1 || negative_scores.rank() != 2 || negative_scores.size(0) != positive_scores.size(0)) {
    throw ShapeError("margin_loss: expected positives [B] and negatives [B, k], got " +
                     shape_str(positive_scores.shape()) + " and " + shape_str(negative_scores.shape()));
  }
  Tensor pos = reshape(positive_scores, {positive_scores.size(0), 1});
  return sum(clamp_min(add_scalar(sub(pos, negative_scores), gamma), 0.0));
}

Tensor pretrain_loss(const TransEParams& params, const TripleStore& store, std::span<const Triple> positives,
                     std::span<const Triple> negatives, double gamma, TransENorm norm) {
  if (positives.empty()) throw ContractError("pretrain_loss: empty batch");
  if (negatives.size() % positives.size() != 0 || negatives.empty()) {
    throw ContractError("pretrain_loss: " + std::to_string(negatives.size()) + " negatives for " +
                        std::to_string(positives.size()) + " positives");
  }
  const std::size_t k = negatives.size() / positives.size();
  Tensor pos = transe_scores(params, store, positives, norm);
  Tensor neg = reshape(transe_scores(params, store, negatives, norm), {positives.size(), k});
  return margin_loss(pos, neg, gamma);
}

PretrainResult pretrain_run(const TripleStore& store, std::size_t dim, const PretrainConfig& cfg, Rng& rng,
                            const std::function<void(std::size_t, const TransEParams&)>& on_epoch) {
  store.validate();
  if (cfg.batch_size == 0 || cfg.negatives == 0) throw ConfigError("pretrain: batch size and negatives must be positive");
  PretrainResult result;
  result.params = init_transe(store, dim, rng);
  TransEParams& p = result.params;
  if (store.triples.empty() || cfg.epochs == 0) return result;

  std::vector<Tensor> leaves{p.entities, p.relations};
  AdamState adam = make_adam_state(leaves, {.learning_rate = cfg.learning_rate, .weight_decay = 0.0});
  std::vector<std::size_t> order(store.triples.size());
  std::iota(order.begin(), order.end(), 0);
  std::vector<Triple> positives, negatives;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double total = 0.0;
    for (std::size_t begin = 0; begin < order.size(); begin += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), begin + cfg.batch_size);
      positives.clear();
      negatives.clear();
      for (std::size_t i = begin; i < end; ++i) {
        const Triple& t = store.triples[order[i]];
        positives.push_back(t);
        for (const Triple& n : negative_sample(store, t, cfg.negatives, rng)) negatives.push_back(n);
      }
      for (Tensor& l : leaves) l.zero_grad();
      Tensor loss = pretrain_loss(p, store, positives, negatives, cfg.margin, cfg.norm);
      total += loss.item();
      backward(loss);
      adam_step(leaves, adam);
      normalize_entities(p);
    }
    result.loss_trace.push_back(total / static_cast<double>(order.size()));
    if (on_epoch) on_epoch(epoch, p);
  }
  for (Tensor& l : leaves) l.zero_grad();
  return result;
}

double mean_filtered_rank(const TransEParams& params, const TripleStore& store, std::span<const Triple> test,
                          TransENorm norm) {
  if (test.empty()) throw ContractError("mean_filtered_rank: no test triples");
  auto key = [](std::int32_t r, std::int32_t h, std::int32_t t) {
    return (static_cast<std::uint64_t>(static_cast<std::uint32_t>(r)) << 48) ^
           (static_cast<std::uint64_t>(static_cast<std::uint32_t>(h)) << 24) ^ static_cast<std::uint32_t>(t);
  };
  std::unordered_set<std::uint64_t> known;
  for (const Triple& t : store.triples) known.insert(key(t.relation, t.head, t.tail));
  for (const Triple& t : test) known.insert(key(t.relation, t.head, t.tail));

  const std::size_t d = params.dim();
  auto row = [&](const Tensor& m, std::int32_t i) { return m.data().subspan(static_cast<std::size_t>(i) * d, d); };
  double total = 0.0;
  for (const Triple& t : test) {
    const auto& rel = store.relations.at(static_cast<std::size_t>(t.relation));
    auto h = row(params.entities, params.global(rel.head_type, t.head));
    auto r = row(params.relations, t.relation);
    const double truth = transe_score(h, r, row(params.entities, params.global(rel.tail_type, t.tail)), norm);
    std::size_t better = 0;
    for (std::int32_t c = 0; c < static_cast<std::int32_t>(store.type_sizes[rel.tail_type]); ++c) {
      if (c == t.tail || known.count(key(t.relation, t.head, c))) continue;
      if (transe_score(h, r, row(params.entities, params.global(rel.tail_type, c)), norm) < truth) ++better;
    }
    total += static_cast<double>(better + 1);
  }
  return total / static_cast<double>(test.size());
}

void write_features(HeteroGraph& g, const TransEParams& params) {
  if (params.type_offsets.size() != static_cast<std::size_t>(kNodeTypes)) {
    throw ContractError("write_features: embeddings were not built from a graph");
  }
  const std::size_t d = params.dim();
  if (d != g.feature_dim) {
    throw ShapeError("write_features: embedding width " + std::to_string(d) + " != feature width " +
                     std::to_string(g.feature_dim));
  }
  for (int t = 0; t < kNodeTypes; ++t) {
    const std::size_t n = g.node_ids[t].size();
    const std::size_t off = params.type_offsets[static_cast<std::size_t>(t)];
    auto src = params.entities.data().subspan(off * d, n * d);
    set_features(g, node_type_at(t), Tensor({n, d}, std::vector<double>(src.begin(), src.end())));
  }
}

TensorMap transe_tensors(const TransEParams& params, const TripleStore& store) {
  TensorMap out;
  const std::size_t d = params.dim();
  for (std::size_t t = 0; t < store.type_sizes.size(); ++t) {
    auto rows = params.entities.data().subspan(params.type_offsets[t] * d, store.type_sizes[t] * d);
    out["transe." + store.type_names[t]] = Tensor({store.type_sizes[t], d}, std::vector<double>(rows.begin(), rows.end()));
  }
  for (std::size_t r = 0; r < store.relations.size(); ++r) {
    auto row = params.relations.data().subspan(r * d, d);
    out["transe.rel." + store.relations[r].name] = Tensor({d}, std::vector<double>(row.begin(), row.end()));
  }
  return out;
}

}  // namespace multehr
