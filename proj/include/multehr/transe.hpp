#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "multehr/checkpoint.hpp"
#include "multehr/hetero_graph.hpp"
#include "multehr/tensor.hpp"

namespace multehr {

enum class TransENorm { L2, L1 };

// Typed knowledge graph: entities are dense per type; relation r links
// entities of head_type to entities of tail_type.
struct TripleStore {
  std::vector<std::string> type_names;
  std::vector<std::size_t> type_sizes;
  struct Relation {
    std::string name;
    std::size_t head_type = 0;
    std::size_t tail_type = 0;
  };
  std::vector<Relation> relations;

  struct Triple {
    std::int32_t relation = 0;
    std::int32_t head = 0;  // index within the head type
    std::int32_t tail = 0;
    bool operator==(const Triple&) const = default;
  };
  std::vector<Triple> triples;

  // Throws ContractError on out-of-range relations or entities.
  void validate() const;
};

using Triple = TripleStore::Triple;

// One relation per edge type (reverses included), one entity type per node
// type. Edge types listed in `exclude` contribute no triples.
TripleStore triples_from_graph(const HeteroGraph& g, const std::vector<EdgeType>& exclude = {});

// Entity rows of all types stacked in type order; relation vectors one per row.
struct TransEParams {
  Tensor entities;   // [sum(type_sizes), d]
  Tensor relations;  // [n_relations, d]
  std::vector<std::size_t> type_offsets;

  std::size_t dim() const { return entities.size(1); }
  std::int32_t global(std::size_t type, std::int32_t index) const {
    return static_cast<std::int32_t>(type_offsets[type]) + index;
  }
};

// Uniform in [-6/sqrt(d), 6/sqrt(d)], then entity rows scaled to unit L2 norm.
TransEParams init_transe(const TripleStore& store, std::size_t dim, Rng& rng);

// Rescales every entity row to unit L2 norm in place.
void normalize_entities(TransEParams& params);

// ||h + r - t|| under the chosen norm.
double transe_score(std::span<const double> h, std::span<const double> r, std::span<const double> t,
                    TransENorm norm = TransENorm::L2);

// Scores of a batch of triples, shape [B], on the tape.
Tensor transe_scores(const TransEParams& params, const TripleStore& store, std::span<const Triple> batch,
                     TransENorm norm = TransENorm::L2);

// k corruptions of `positive`: head or tail with probability 1/2, replaced by
// a uniformly drawn different entity of the same type. A side whose type has a
// single entity is never corrupted.
std::vector<Triple> negative_sample(const TripleStore& store, const Triple& positive, std::size_t k, Rng& rng);

// sum_i sum_j max(pos[i] - neg[i, j] + gamma, 0); pos: [B], neg: [B, k].
Tensor margin_loss(const Tensor& positive_scores, const Tensor& negative_scores, double gamma);

// Margin loss of a batch with its negatives (k per positive, stored row-major).
Tensor pretrain_loss(const TransEParams& params, const TripleStore& store, std::span<const Triple> positives,
                     std::span<const Triple> negatives, double gamma, TransENorm norm = TransENorm::L2);

struct PretrainConfig {
  std::size_t epochs = 100;
  std::size_t batch_size = 1024;
  std::size_t negatives = 4;
  double margin = 1.0;
  double learning_rate = 0.01;
  TransENorm norm = TransENorm::L2;
};

struct PretrainResult {
  TransEParams params;
  std::vector<double> loss_trace;  // mean per-positive loss per epoch
};

// Minibatched margin training with Adam; entity rows are renormalized after
// every step. `on_epoch` (optional) is called after each epoch.
PretrainResult pretrain_run(const TripleStore& store, std::size_t dim, const PretrainConfig& cfg, Rng& rng,
                            const std::function<void(std::size_t epoch, const TransEParams&)>& on_epoch = {});

// Mean 1-based rank of each test triple's tail among all entities of the tail
// type, skipping other tails that form known triples with the same (h, r).
double mean_filtered_rank(const TransEParams& params, const TripleStore& store, std::span<const Triple> test,
                          TransENorm norm = TransENorm::L2);

// Copies the learned entity rows into the graph's feature matrices (feature
// width must equal the embedding width).
void write_features(HeteroGraph& g, const TransEParams& params);

// "transe.<node_type>" and "transe.rel.<edge_type>" entries for a store built
// by triples_from_graph.
TensorMap transe_tensors(const TransEParams& params, const TripleStore& store);

}  // namespace multehr
