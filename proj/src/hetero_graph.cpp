#include "multehr/hetero_graph.hpp"

#include <algorithm>
#include <bit>
#include <fstream>
#include <map>
#include <set>

#include "json.hpp"
#include "multehr/csv.hpp"
#include "multehr/errors.hpp"

namespace multehr {

namespace {

constexpr std::array<std::string_view, kNodeTypes> kNodeNames = {"patient",      "visit",     "diagnosis",
                                                                 "prescription", "procedure", "lab_event"};

const std::array<EdgeTypeInfo, kEdgeTypes> kEdgeInfo = {{
    {"patient_visit", NodeType::Patient, NodeType::Visit, EdgeType::VisitPatient},
    {"visit_patient", NodeType::Visit, NodeType::Patient, EdgeType::PatientVisit},
    {"visit_diagnosis", NodeType::Visit, NodeType::Diagnosis, EdgeType::DiagnosisVisit},
    {"diagnosis_visit", NodeType::Diagnosis, NodeType::Visit, EdgeType::VisitDiagnosis},
    {"visit_prescription", NodeType::Visit, NodeType::Prescription, EdgeType::PrescriptionVisit},
    {"prescription_visit", NodeType::Prescription, NodeType::Visit, EdgeType::VisitPrescription},
    {"visit_procedure", NodeType::Visit, NodeType::Procedure, EdgeType::ProcedureVisit},
    {"procedure_visit", NodeType::Procedure, NodeType::Visit, EdgeType::VisitProcedure},
    {"visit_lab_event", NodeType::Visit, NodeType::LabEvent, EdgeType::LabEventVisit},
    {"lab_event_visit", NodeType::LabEvent, NodeType::Visit, EdgeType::VisitLabEvent},
}};

int ti(NodeType t) { return static_cast<int>(t); }
int ei(EdgeType t) { return static_cast<int>(t); }

// Position of the Visit endpoint in a forward edge: 1 for patient->visit, 0 otherwise.
bool visit_is_dst(EdgeType forward) { return forward == EdgeType::PatientVisit; }

// Keeps edge k of `forward` and its reverse twin iff keep[k].
void filter_pair(HeteroGraph& g, EdgeType forward, const std::vector<char>& keep) {
  for (EdgeType t : {forward, edge_info(forward).reverse}) {
    EdgeList& e = g.edges[ei(t)];
    EdgeList out;
    for (std::size_t k = 0; k < e.size(); ++k) {
      if (!keep[k]) continue;
      out.src.push_back(e.src[k]);
      out.dst.push_back(e.dst[k]);
      out.multiplicity.push_back(e.multiplicity[k]);
    }
    e = std::move(out);
  }
}

void push_pair(HeteroGraph& g, EdgeType forward, std::int32_t s, std::int32_t d, std::int32_t m) {
  EdgeList& f = g.edges[ei(forward)];
  f.src.push_back(s);
  f.dst.push_back(d);
  f.multiplicity.push_back(m);
  EdgeList& r = g.edges[ei(edge_info(forward).reverse)];
  r.src.push_back(d);
  r.dst.push_back(s);
  r.multiplicity.push_back(m);
}

Tensor take_rows(const Tensor& features, const std::vector<std::int32_t>& rows, std::size_t dim) {
  if (!features.defined()) return Tensor::zeros({rows.size(), dim});
  NoGradGuard guard;
  return gather_rows(features, rows).detach();
}

}  // namespace

const EdgeTypeInfo& edge_info(EdgeType t) { return kEdgeInfo.at(static_cast<std::size_t>(t)); }

std::string_view node_type_name(NodeType t) { return kNodeNames.at(static_cast<std::size_t>(t)); }

std::optional<NodeType> parse_node_type(std::string_view name) {
  for (int i = 0; i < kNodeTypes; ++i) {
    if (kNodeNames[static_cast<std::size_t>(i)] == name) return node_type_at(i);
  }
  return std::nullopt;
}

std::optional<EdgeType> parse_edge_type(std::string_view name) {
  for (int i = 0; i < kEdgeTypes; ++i) {
    if (kEdgeInfo[static_cast<std::size_t>(i)].name == name) return edge_type_at(i);
  }
  return std::nullopt;
}

std::unordered_map<std::string, std::int32_t> HeteroGraph::index_of(NodeType t) const {
  std::unordered_map<std::string, std::int32_t> out;
  const auto& v = ids(t);
  for (std::size_t i = 0; i < v.size(); ++i) out.emplace(v[i], static_cast<std::int32_t>(i));
  return out;
}

void HeteroGraph::validate() const {
  for (int t = 0; t < kNodeTypes; ++t) {
    const std::string name(node_type_name(node_type_at(t)));
    std::set<std::string_view> seen(node_ids[t].begin(), node_ids[t].end());
    if (seen.size() != node_ids[t].size()) throw ContractError("graph: duplicate external id among " + name + " nodes");
    const Tensor& f = features[t];
    if (f.defined() && (f.rank() != 2 || f.size(0) != node_ids[t].size() || f.size(1) != feature_dim)) {
      throw ContractError("graph: " + name + " features have shape " + shape_str(f.shape()) + ", expected [" +
                          std::to_string(node_ids[t].size()) + ", " + std::to_string(feature_dim) + "]");
    }
  }
  for (int k = 0; k < kEdgeTypes; ++k) {
    const EdgeTypeInfo& info = kEdgeInfo[static_cast<std::size_t>(k)];
    const EdgeList& e = edges[k];
    const std::string name(info.name);
    if (e.dst.size() != e.src.size() || e.multiplicity.size() != e.src.size()) {
      throw ContractError("graph: " + name + " edge arrays differ in length");
    }
    const auto ns = static_cast<std::int32_t>(num_nodes(info.src));
    const auto nd = static_cast<std::int32_t>(num_nodes(info.dst));
    std::set<std::pair<std::int32_t, std::int32_t>> pairs;
    for (std::size_t j = 0; j < e.size(); ++j) {
      if (e.src[j] < 0 || e.src[j] >= ns || e.dst[j] < 0 || e.dst[j] >= nd) {
        throw ContractError("graph: " + name + " edge " + std::to_string(j) + " (" + std::to_string(e.src[j]) + " -> " +
                            std::to_string(e.dst[j]) + ") has an endpoint out of range");
      }
      if (!pairs.emplace(e.src[j], e.dst[j]).second) {
        throw ContractError("graph: duplicate " + name + " edge (" + std::to_string(e.src[j]) + " -> " +
                            std::to_string(e.dst[j]) + ")");
      }
    }
    const EdgeList& r = edges[ei(info.reverse)];
    if (r.size() != e.size()) throw ContractError("graph: " + name + " and its reverse differ in edge count");
    for (std::size_t j = 0; j < e.size(); ++j) {
      if (r.src[j] != e.dst[j] || r.dst[j] != e.src[j]) {
        throw ContractError("graph: " + name + " edge " + std::to_string(j) + " has no aligned reverse twin");
      }
    }
  }
}

HeteroGraph build_graph(const EhrTables& tables, const BuildOptions& options) {
  if (tables.visits.empty()) throw DataError("build_graph: visit table is empty");
  HeteroGraph g;
  g.feature_dim = options.feature_dim;
  g.include_lab_events = options.include_lab_events;

  std::unordered_map<std::string, std::int32_t> patient_index, visit_index;
  for (const auto& p : tables.patients) {
    if (patient_index.emplace(p.patient_id, static_cast<std::int32_t>(patient_index.size())).second) {
      g.node_ids[ti(NodeType::Patient)].push_back(p.patient_id);
    }
  }
  std::vector<std::string> problems;
  for (std::size_t i = 0; i < tables.visits.size(); ++i) {
    const VisitRow& v = tables.visits[i];
    auto p = patient_index.find(v.patient_id);
    if (p == patient_index.end()) {
      problems.push_back("visits row " + std::to_string(i) + " ('" + v.visit_id + "'): patient '" + v.patient_id +
                         "' does not exist");
      continue;
    }
    if (!visit_index.emplace(v.visit_id, static_cast<std::int32_t>(visit_index.size())).second) {
      problems.push_back("visits row " + std::to_string(i) + ": duplicate visit_id '" + v.visit_id + "'");
      continue;
    }
    g.node_ids[ti(NodeType::Visit)].push_back(v.visit_id);
    push_pair(g, EdgeType::PatientVisit, p->second, visit_index[v.visit_id], 1);
  }

  auto add_codes = [&](const char* table, const std::vector<CodeRow>& rows, NodeType type, EdgeType forward) {
    // Entities sorted by code so dense indices do not depend on row order.
    std::map<std::string, std::int32_t> codes;
    std::map<std::pair<std::int32_t, std::string>, std::int32_t> counts;
    for (std::size_t i = 0; i < rows.size(); ++i) {
      auto v = visit_index.find(rows[i].visit_id);
      if (v == visit_index.end()) {
        if (problems.size() < 20) {
          problems.push_back(std::string(table) + " row " + std::to_string(i) + ": visit '" + rows[i].visit_id +
                             "' does not exist");
        }
        continue;
      }
      codes.emplace(rows[i].code, 0);
      ++counts[{v->second, rows[i].code}];
    }
    std::int32_t next = 0;
    for (auto& [code, idx] : codes) {
      idx = next++;
      g.node_ids[ti(type)].push_back(code);
    }
    for (const auto& [key, m] : counts) push_pair(g, forward, key.first, codes[key.second], m);
  };
  add_codes("diagnoses", tables.diagnoses, NodeType::Diagnosis, EdgeType::VisitDiagnosis);
  add_codes("prescriptions", tables.prescriptions, NodeType::Prescription, EdgeType::VisitPrescription);
  add_codes("procedures", tables.procedures, NodeType::Procedure, EdgeType::VisitProcedure);
  if (options.include_lab_events) add_codes("lab_events", tables.lab_events, NodeType::LabEvent, EdgeType::VisitLabEvent);

  if (!problems.empty()) {
    std::string msg = "build_graph: dangling references:";
    for (const auto& p : problems) msg += "\n  " + p;
    throw DataError(msg);
  }
  for (int t = 0; t < kNodeTypes; ++t) g.features[t] = Tensor::zeros({g.node_ids[t].size(), g.feature_dim});
  return g;
}

void set_features(HeteroGraph& g, NodeType t, Tensor features) {
  if (features.rank() != 2 || features.size(0) != g.num_nodes(t) || features.size(1) != g.feature_dim) {
    throw ShapeError("set_features: " + std::string(node_type_name(t)) + " expects [" +
                     std::to_string(g.num_nodes(t)) + ", " + std::to_string(g.feature_dim) + "], got " +
                     shape_str(features.shape()));
  }
  g.features[ti(t)] = std::move(features);
}

void drop_visit_edges(HeteroGraph& g, EdgeType forward, const std::vector<std::int32_t>& visits) {
  if (!is_forward(forward)) throw ContractError("drop_visit_edges: expects a forward edge type");
  std::vector<char> marked(g.num_nodes(NodeType::Visit), 0);
  for (std::int32_t v : visits) marked.at(static_cast<std::size_t>(v)) = 1;
  const EdgeList& e = g.edge_list(forward);
  std::vector<char> keep(e.size());
  for (std::size_t k = 0; k < e.size(); ++k) {
    const std::int32_t visit = visit_is_dst(forward) ? e.dst[k] : e.src[k];
    keep[k] = !marked[static_cast<std::size_t>(visit)];
  }
  filter_pair(g, forward, keep);
}

SubgraphSample visit_subgraph(const HeteroGraph& g, std::vector<std::int32_t> visits) {
  std::sort(visits.begin(), visits.end());
  visits.erase(std::unique(visits.begin(), visits.end()), visits.end());
  const auto n_visits = static_cast<std::int32_t>(g.num_nodes(NodeType::Visit));
  if (!visits.empty() && (visits.front() < 0 || visits.back() >= n_visits)) {
    throw ContractError("visit_subgraph: visit index out of range");
  }

  std::array<std::vector<std::int32_t>, kNodeTypes> local;
  for (int t = 0; t < kNodeTypes; ++t) local[t].assign(g.node_ids[t].size(), -1);
  auto& visit_local = local[ti(NodeType::Visit)];
  for (std::size_t i = 0; i < visits.size(); ++i) visit_local[static_cast<std::size_t>(visits[i])] = static_cast<std::int32_t>(i);

  // Mark the other endpoint of every forward edge touching a chosen visit.
  for (int k = 0; k < kEdgeTypes; k += 2) {
    const EdgeType forward = edge_type_at(k);
    const EdgeList& e = g.edges[k];
    const NodeType other = visit_is_dst(forward) ? edge_info(forward).src : edge_info(forward).dst;
    for (std::size_t j = 0; j < e.size(); ++j) {
      const std::int32_t v = visit_is_dst(forward) ? e.dst[j] : e.src[j];
      if (visit_local[static_cast<std::size_t>(v)] < 0) continue;
      const std::int32_t o = visit_is_dst(forward) ? e.src[j] : e.dst[j];
      local[ti(other)][static_cast<std::size_t>(o)] = 0;
    }
  }

  SubgraphSample s;
  s.visits = visits;
  s.graph.feature_dim = g.feature_dim;
  s.graph.include_lab_events = g.include_lab_events;
  for (int t = 0; t < kNodeTypes; ++t) {
    auto& parent = s.parent_index[t];
    if (node_type_at(t) == NodeType::Visit) {
      parent = visits;
    } else {
      for (std::size_t i = 0; i < local[t].size(); ++i) {
        if (local[t][i] >= 0) {
          local[t][i] = static_cast<std::int32_t>(parent.size());
          parent.push_back(static_cast<std::int32_t>(i));
        }
      }
    }
    for (std::int32_t p : parent) s.graph.node_ids[t].push_back(g.node_ids[t][static_cast<std::size_t>(p)]);
    s.graph.features[t] = take_rows(g.features[t], parent, g.feature_dim);
  }
  for (int k = 0; k < kEdgeTypes; k += 2) {
    const EdgeType forward = edge_type_at(k);
    const EdgeTypeInfo& info = edge_info(forward);
    const EdgeList& e = g.edges[k];
    for (std::size_t j = 0; j < e.size(); ++j) {
      const std::int32_t v = visit_is_dst(forward) ? e.dst[j] : e.src[j];
      if (visit_local[static_cast<std::size_t>(v)] < 0) continue;
      push_pair(s.graph, forward, local[ti(info.src)][static_cast<std::size_t>(e.src[j])],
                local[ti(info.dst)][static_cast<std::size_t>(e.dst[j])], e.multiplicity[j]);
    }
  }
  return s;
}

SubgraphSample sample_subgraph(const HeteroGraph& g, const std::vector<std::int32_t>& pool, std::size_t n_visit,
                               Rng& rng) {
  if (n_visit == 0) throw ContractError("sample_subgraph: n_visit must be at least 1");
  std::vector<std::int32_t> chosen = pool;
  const std::size_t k = std::min(n_visit, chosen.size());
  // Partial Fisher-Yates: the first k slots are a uniform k-subset.
  for (std::size_t i = 0; i < k; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, chosen.size() - 1);
    std::swap(chosen[i], chosen[pick(rng)]);
  }
  chosen.resize(k);
  return visit_subgraph(g, std::move(chosen));
}

SubgraphSample sample_subgraph(const HeteroGraph& g, std::size_t n_visit, Rng& rng) {
  std::vector<std::int32_t> all(g.num_nodes(NodeType::Visit));
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = static_cast<std::int32_t>(i);
  return sample_subgraph(g, all, n_visit, rng);
}

SubgraphSample augment(const SubgraphSample& s, const AugmentOptions& options, Rng& rng) {
  auto in_unit = [](double p) { return p >= 0.0 && p < 1.0; };
  if (!in_unit(options.edge_drop_p) || !in_unit(options.node_drop_p) || !(options.noise_sigma >= 0.0)) {
    throw ContractError("augment: probabilities must lie in [0, 1) and sigma must be >= 0");
  }
  SubgraphSample out = s;
  HeteroGraph& g = out.graph;
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  if (options.node_drop_p > 0.0) {
    for (int t = 0; t < kNodeTypes; ++t) {
      if (!is_entity(node_type_at(t))) continue;
      std::vector<std::int32_t> remap(g.node_ids[t].size(), -1), kept;
      for (std::size_t i = 0; i < remap.size(); ++i) {
        if (unit(rng) >= options.node_drop_p) {
          remap[i] = static_cast<std::int32_t>(kept.size());
          kept.push_back(static_cast<std::int32_t>(i));
        }
      }
      if (kept.size() == remap.size()) continue;
      std::vector<std::string> ids;
      std::vector<std::int32_t> parents;
      for (std::int32_t i : kept) {
        ids.push_back(g.node_ids[t][static_cast<std::size_t>(i)]);
        parents.push_back(out.parent_index[t][static_cast<std::size_t>(i)]);
      }
      g.features[t] = take_rows(g.features[t], kept, g.feature_dim);
      g.node_ids[t] = std::move(ids);
      out.parent_index[t] = std::move(parents);
      // Entities are always the dst of the forward visit->entity edge.
      for (int k = 0; k < kEdgeTypes; k += 2) {
        const EdgeType forward = edge_type_at(k);
        if (ti(edge_info(forward).dst) != t) continue;
        EdgeList& e = g.edges[k];
        std::vector<char> keep(e.size());
        for (std::size_t j = 0; j < e.size(); ++j) keep[j] = remap[static_cast<std::size_t>(e.dst[j])] >= 0;
        filter_pair(g, forward, keep);
        for (EdgeType et : {forward, edge_info(forward).reverse}) {
          EdgeList& x = g.edges[ei(et)];
          auto& ends = et == forward ? x.dst : x.src;
          for (auto& v : ends) v = remap[static_cast<std::size_t>(v)];
        }
      }
    }
  }

  if (options.edge_drop_p > 0.0) {
    for (int k = 0; k < kEdgeTypes; k += 2) {
      const EdgeType forward = edge_type_at(k);
      if (forward == EdgeType::PatientVisit) continue;
      std::vector<char> keep(g.edges[k].size());
      for (auto& flag : keep) flag = unit(rng) >= options.edge_drop_p;
      filter_pair(g, forward, keep);
    }
  }

  if (options.noise_sigma > 0.0) {
    for (int t = 0; t < kNodeTypes; ++t) {
      Tensor& f = g.features[t];
      if (!f.defined() || f.numel() == 0) continue;
      Tensor noisy = Tensor::normal(f.shape(), 0.0, options.noise_sigma, rng);
      auto data = noisy.mutable_data();
      const auto base = f.data();
      for (std::size_t i = 0; i < data.size(); ++i) data[i] += base[i];
      f = noisy;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Directory export

namespace {

static_assert(std::endian::native == std::endian::little, "feature files are written in host byte order");

void write_matrix(const std::filesystem::path& path, const Tensor& t, std::size_t cols) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw DataError("cannot write " + path.string());
  const std::uint64_t dims[2] = {t.defined() ? t.size(0) : 0, cols};
  os.write(reinterpret_cast<const char*>(dims), sizeof dims);
  if (t.defined()) {
    os.write(reinterpret_cast<const char*>(t.data().data()), static_cast<std::streamsize>(t.numel() * sizeof(double)));
  }
}

Tensor read_matrix(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("missing file " + path.string());
  std::uint64_t dims[2];
  if (!is.read(reinterpret_cast<char*>(dims), sizeof dims)) throw DataError(path.string() + ": truncated header");
  std::vector<double> data(dims[0] * dims[1]);
  if (!is.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(data.size() * sizeof(double)))) {
    throw DataError(path.string() + ": truncated payload");
  }
  return Tensor({dims[0], dims[1]}, std::move(data));
}

std::int32_t parse_index(const std::string& s, const std::filesystem::path& file, std::size_t line) {
  try {
    std::size_t used = 0;
    const long v = std::stol(s, &used);
    if (used == s.size()) return static_cast<std::int32_t>(v);
  } catch (const std::exception&) {
  }
  throw DataError(file.string() + " line " + std::to_string(line) + ": bad integer '" + s + "'");
}

}  // namespace

void export_graph(const HeteroGraph& g, const std::filesystem::path& dir) {
  g.validate();
  std::filesystem::create_directories(dir);
  nlohmann::json manifest;
  manifest["format_version"] = 1;
  manifest["feature_dim"] = g.feature_dim;
  manifest["include_lab_events"] = g.include_lab_events;
  for (int t = 0; t < kNodeTypes; ++t) {
    const std::string name(node_type_name(node_type_at(t)));
    std::ofstream os(dir / ("nodes_" + name + ".csv"), std::ios::trunc);
    os << "external_id,dense_index\n";
    for (std::size_t i = 0; i < g.node_ids[t].size(); ++i) os << csv::escape(g.node_ids[t][i]) << ',' << i << '\n';
    write_matrix(dir / ("features_" + name + ".bin"), g.features[t], g.feature_dim);
    manifest["nodes"][name] = g.node_ids[t].size();
  }
  for (int k = 0; k < kEdgeTypes; ++k) {
    const std::string name(kEdgeInfo[static_cast<std::size_t>(k)].name);
    std::ofstream os(dir / ("edges_" + name + ".csv"), std::ios::trunc);
    os << "src_index,dst_index,multiplicity\n";
    const EdgeList& e = g.edges[k];
    for (std::size_t j = 0; j < e.size(); ++j) os << e.src[j] << ',' << e.dst[j] << ',' << e.multiplicity[j] << '\n';
    manifest["edges"][name] = e.size();
  }
  std::ofstream(dir / "manifest.json", std::ios::trunc) << manifest.dump(2) << '\n';
}

HeteroGraph import_graph(const std::filesystem::path& dir) {
  std::ifstream mf(dir / "manifest.json");
  if (!mf) throw DataError("missing file " + (dir / "manifest.json").string());
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(mf);
  } catch (const nlohmann::json::exception& e) {
    throw DataError("manifest.json: " + std::string(e.what()));
  }
  HeteroGraph g;
  g.feature_dim = manifest.value("feature_dim", std::size_t{0});
  g.include_lab_events = manifest.value("include_lab_events", false);
  for (int t = 0; t < kNodeTypes; ++t) {
    const std::string name(node_type_name(node_type_at(t)));
    const auto path = dir / ("nodes_" + name + ".csv");
    csv::Table table = csv::read(path);
    auto id = table.column("external_id");
    auto idx = table.column("dense_index");
    if (!id || !idx) throw DataError(path.string() + ": missing external_id/dense_index column");
    g.node_ids[t].resize(table.rows.size());
    for (std::size_t r = 0; r < table.rows.size(); ++r) {
      const std::int32_t i = parse_index(table.rows[r][*idx], path, table.line_numbers[r]);
      if (i < 0 || static_cast<std::size_t>(i) >= table.rows.size()) {
        throw DataError(path.string() + " line " + std::to_string(table.line_numbers[r]) + ": dense_index out of range");
      }
      g.node_ids[t][static_cast<std::size_t>(i)] = table.rows[r][*id];
    }
    g.features[t] = read_matrix(dir / ("features_" + name + ".bin"));
  }
  for (int k = 0; k < kEdgeTypes; ++k) {
    const auto path = dir / ("edges_" + std::string(kEdgeInfo[static_cast<std::size_t>(k)].name) + ".csv");
    csv::Table table = csv::read(path);
    auto s = table.column("src_index");
    auto d = table.column("dst_index");
    auto m = table.column("multiplicity");
    if (!s || !d) throw DataError(path.string() + ": missing src_index/dst_index column");
    EdgeList& e = g.edges[k];
    for (std::size_t r = 0; r < table.rows.size(); ++r) {
      e.src.push_back(parse_index(table.rows[r][*s], path, table.line_numbers[r]));
      e.dst.push_back(parse_index(table.rows[r][*d], path, table.line_numbers[r]));
      e.multiplicity.push_back(m ? parse_index(table.rows[r][*m], path, table.line_numbers[r]) : 1);
    }
  }
  try {
    g.validate();
  } catch (const ContractError& e) {
    throw DataError(dir.string() + ": " + e.what());
  }
  return g;
}

}  // namespace multehr
