#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "multehr/ehr_data.hpp"
#include "multehr/tensor.hpp"

namespace multehr {

enum class NodeType : int { Patient, Visit, Diagnosis, Prescription, Procedure, LabEvent };
inline constexpr int kNodeTypes = 6;

// Forward types are even, each followed by its reverse.
enum class EdgeType : int {
  PatientVisit,
  VisitPatient,
  VisitDiagnosis,
  DiagnosisVisit,
  VisitPrescription,
  PrescriptionVisit,
  VisitProcedure,
  ProcedureVisit,
  VisitLabEvent,
  LabEventVisit,
};
inline constexpr int kEdgeTypes = 10;

struct EdgeTypeInfo {
  std::string_view name;
  NodeType src;
  NodeType dst;
  EdgeType reverse;
};

const EdgeTypeInfo& edge_info(EdgeType t);
std::string_view node_type_name(NodeType t);
std::optional<NodeType> parse_node_type(std::string_view name);
std::optional<EdgeType> parse_edge_type(std::string_view name);
inline bool is_forward(EdgeType t) { return static_cast<int>(t) % 2 == 0; }
inline bool is_entity(NodeType t) { return static_cast<int>(t) >= static_cast<int>(NodeType::Diagnosis); }

inline NodeType node_type_at(int i) { return static_cast<NodeType>(i); }
inline EdgeType edge_type_at(int i) { return static_cast<EdgeType>(i); }

struct EdgeList {
  std::vector<std::int32_t> src;
  std::vector<std::int32_t> dst;
  // Number of source rows collapsed into the edge. Stored, not used by the encoder.
  std::vector<std::int32_t> multiplicity;

  std::size_t size() const { return src.size(); }
};

// Nodes are dense per type; edges of a reverse type are stored in the same
// order as their forward twins, so edge k of VisitDiagnosis and edge k of
// DiagnosisVisit are the same relation.
struct HeteroGraph {
  std::array<std::vector<std::string>, kNodeTypes> node_ids;
  std::array<EdgeList, kEdgeTypes> edges;
  std::array<Tensor, kNodeTypes> features;  // [num_nodes, feature_dim]
  std::size_t feature_dim = 0;
  bool include_lab_events = false;

  std::size_t num_nodes(NodeType t) const { return node_ids[static_cast<int>(t)].size(); }
  const EdgeList& edge_list(EdgeType t) const { return edges[static_cast<int>(t)]; }
  const std::vector<std::string>& ids(NodeType t) const { return node_ids[static_cast<int>(t)]; }
  const Tensor& feature(NodeType t) const { return features[static_cast<int>(t)]; }

  // Linear lookup tables are built on demand.
  std::unordered_map<std::string, std::int32_t> index_of(NodeType t) const;

  // Throws ContractError describing the first violation found.
  void validate() const;
};

struct BuildOptions {
  bool include_lab_events = false;
  std::size_t feature_dim = 64;
};

HeteroGraph build_graph(const EhrTables& tables, const BuildOptions& options = {});

// Replaces a type's feature matrix; rows must match the node count.
void set_features(HeteroGraph& g, NodeType t, Tensor features);

// Removes both directions of the given forward edge type for every edge whose
// visit endpoint is in `visits` (indices of the graph's Visit nodes).
void drop_visit_edges(HeteroGraph& g, EdgeType forward, const std::vector<std::int32_t>& visits);

struct SubgraphSample {
  HeteroGraph graph;
  // parent_index[type][local] = node index in the parent graph.
  std::array<std::vector<std::int32_t>, kNodeTypes> parent_index;
  // Sorted parent indices of the sampled visits (all Visit nodes of `graph`).
  std::vector<std::int32_t> visits;
};

// Graph induced by the given visits, their patients and their 1-hop medical
// entities.
SubgraphSample visit_subgraph(const HeteroGraph& g, std::vector<std::int32_t> visits);

// min(n_visit, #visits) visits drawn uniformly without replacement.
SubgraphSample sample_subgraph(const HeteroGraph& g, std::size_t n_visit, Rng& rng);

// Same, restricted to a candidate pool (parent visit indices).
SubgraphSample sample_subgraph(const HeteroGraph& g, const std::vector<std::int32_t>& pool, std::size_t n_visit,
                               Rng& rng);

struct AugmentOptions {
  double edge_drop_p = 0.0;
  double node_drop_p = 0.0;
  double noise_sigma = 0.0;
};

// Drops visit-entity edges (both directions) and medical-entity nodes, then adds
// Gaussian noise to every feature. Patients, visits and patient-visit edges are
// always kept.
SubgraphSample augment(const SubgraphSample& s, const AugmentOptions& options, Rng& rng);

void export_graph(const HeteroGraph& g, const std::filesystem::path& dir);
HeteroGraph import_graph(const std::filesystem::path& dir);

}  // namespace multehr
