#include "multehr/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

#include "multehr/errors.hpp"

namespace multehr {

double anneal_temperature(std::size_t epoch, double rate, double floor, bool literal) {
  const double p = static_cast<double>(epoch);
  return std::max(floor, std::exp(literal ? rate * p : -rate * p));
}

std::vector<std::int32_t> balance_mortality(const std::vector<std::int32_t>& ids, const std::vector<int>& labels,
                                            Rng& rng, bool* single_class) {
  if (ids.size() != labels.size()) throw ShapeError("balance_mortality: ids and labels differ in length");
  std::vector<std::int32_t> pos, neg;
  for (std::size_t i = 0; i < ids.size(); ++i) (labels[i] ? pos : neg).push_back(ids[i]);
  if (single_class) *single_class = pos.empty() || neg.empty();
  if (pos.empty() || neg.empty() || pos.size() == neg.size()) return ids;
  std::vector<std::int32_t>& major = pos.size() > neg.size() ? pos : neg;
  const std::size_t keep = std::min(pos.size(), neg.size());
  // partial Fisher-Yates
  for (std::size_t i = 0; i < keep; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, major.size() - 1);
    std::swap(major[i], major[pick(rng)]);
  }
  major.resize(keep);
  std::vector<std::int32_t> out(pos);
  out.insert(out.end(), neg.begin(), neg.end());
  std::sort(out.begin(), out.end());
  return out;
}

GraphLabels align_labels(const EhrTables& tables, const TaskLabels& labels, const HeteroGraph& g) {
  const auto index = g.index_of(NodeType::Visit);
  const std::size_t n = g.num_nodes(NodeType::Visit);
  GraphLabels out;
  out.mortality.assign(n, 0);
  out.readmission.assign(n, std::nullopt);
  out.los.assign(n, std::nullopt);
  out.drugs.assign(n, {});
  out.n_drugs = labels.drug_vocabulary.size();
  std::vector<bool> seen(n, false);
  for (std::size_t r = 0; r < tables.visits.size(); ++r) {
    auto it = index.find(tables.visits[r].visit_id);
    if (it == index.end()) throw DataError("align_labels: visit '" + tables.visits[r].visit_id + "' is not in the graph");
    const auto v = static_cast<std::size_t>(it->second);
    seen[v] = true;
    out.mortality[v] = labels.mortality[r];
    out.readmission[v] = labels.readmission[r];
    out.los[v] = labels.los[r];
    out.drugs[v] = labels.drugs[r];
  }
  for (std::size_t v = 0; v < n; ++v) {
    if (!seen[v]) throw DataError("align_labels: graph visit '" + g.ids(NodeType::Visit)[v] + "' has no table row");
  }
  return out;
}

VisitSplit split_visits(const EhrTables& tables, const HeteroGraph& g, const std::vector<int>& patient_fold,
                        int test_fold) {
  if (patient_fold.size() != tables.patients.size()) throw ContractError("split_visits: one fold per patient required");
  const int folds = patient_fold.empty() ? 0 : *std::max_element(patient_fold.begin(), patient_fold.end()) + 1;
  if (folds < 2 || test_fold < 0 || test_fold >= folds) throw ConfigError("split_visits: test fold out of range");
  const int valid_fold = (test_fold + 1) % folds;
  std::unordered_map<std::string, int> fold_of;
  for (std::size_t i = 0; i < tables.patients.size(); ++i) fold_of[tables.patients[i].patient_id] = patient_fold[i];
  const auto index = g.index_of(NodeType::Visit);
  VisitSplit s;
  for (const VisitRow& v : tables.visits) {
    const int f = fold_of.at(v.patient_id);
    const std::int32_t id = index.at(v.visit_id);
    (f == test_fold ? s.test : f == valid_fold ? s.valid : s.train).push_back(id);
  }
  for (auto* part : {&s.train, &s.valid, &s.test}) std::sort(part->begin(), part->end());
  return s;
}

void TrainConfig::validate() const {
  auto bad = [](const std::string& m) { throw ConfigError("train: " + m); };
  if (max_epochs == 0) bad("max_epochs must be positive");
  if (n_visit == 0) bad("n_visit must be positive");
  if (!(adam.learning_rate > 0.0)) bad("learning_rate must be positive");
  if (!(adam.weight_decay >= 0.0)) bad("weight_decay must be >= 0");
  if (!(anneal_rate > 0.0)) bad("anneal_rate must be positive");
  if (!(temperature_floor > 0.0 && temperature_floor <= 1.0)) bad("temperature_floor must lie in (0, 1]");
  if (!(beta > 0.0)) bad("beta must be positive");
  for (double p : {augment.edge_drop_p, augment.node_drop_p}) {
    if (!(p >= 0.0 && p < 1.0)) bad("augmentation drop probabilities must lie in [0, 1)");
  }
  if (!(augment.noise_sigma >= 0.0)) bad("noise_sigma must be >= 0");
}

Model make_model(const EncoderConfig& encoder, std::vector<TaskSpec> tasks, bool causal, bool include_lab_events,
                 Rng& rng) {
  encoder.validate();
  if (tasks.empty()) throw ConfigError("model: no tasks configured");
  std::stable_sort(tasks.begin(), tasks.end(),
                   [](const TaskSpec& a, const TaskSpec& b) { return static_cast<int>(a.id) < static_cast<int>(b.id); });
  // kTaskOrder is READM, MORT, DRUG, LOS, which is also the enum order
  for (std::size_t i = 1; i < tasks.size(); ++i) {
    if (tasks[i].id == tasks[i - 1].id) throw ConfigError("model: task '" + std::string(task_name(tasks[i].id)) + "' listed twice");
  }
  Model m;
  m.encoder = encoder;
  m.tasks = tasks;
  m.causal = causal;
  m.layers = make_encoder(m.params, encoder, encoder_edge_types(include_lab_events), rng);
  if (causal) m.mask = make_mask_params(m.params, encoder.dim, rng);
  for (const TaskSpec& t : m.tasks) m.heads.push_back(make_task_head(m.params, t, encoder.dim, rng));
  return m;
}

std::size_t count_drug_leaks(const HeteroGraph& view, const std::vector<std::int32_t>& loss_visits) {
  std::vector<bool> in_loss(view.num_nodes(NodeType::Visit), false);
  for (std::int32_t v : loss_visits) in_loss[static_cast<std::size_t>(v)] = true;
  std::size_t leaks = 0;
  for (std::int32_t v : view.edge_list(EdgeType::VisitPrescription).src) leaks += in_loss[static_cast<std::size_t>(v)];
  for (std::int32_t v : view.edge_list(EdgeType::PrescriptionVisit).dst) leaks += in_loss[static_cast<std::size_t>(v)];
  return leaks;
}

namespace {

struct TaskBatch {
  std::vector<std::int32_t> rows;  // local visit indices
  TaskTargets targets;
};

// Labeled visits of one task among the sample's visits. `parent` maps local
// visit index to the parent graph.
TaskBatch task_batch(const TaskSpec& spec, const GraphLabels& labels, const std::vector<std::int32_t>& parent) {
  TaskBatch b;
  std::vector<double> multi;
  for (std::size_t local = 0; local < parent.size(); ++local) {
    const auto v = static_cast<std::size_t>(parent[local]);
    switch (spec.id) {
      case TaskId::Mortality:
        b.rows.push_back(static_cast<std::int32_t>(local));
        b.targets.classes.push_back(labels.mortality[v]);
        break;
      case TaskId::Readmission:
      case TaskId::LengthOfStay: {
        const auto& y = spec.id == TaskId::Readmission ? labels.readmission[v] : labels.los[v];
        if (!y) break;
        b.rows.push_back(static_cast<std::int32_t>(local));
        b.targets.classes.push_back(*y);
        break;
      }
      case TaskId::Drug: {
        if (labels.drugs[v].empty()) break;
        b.rows.push_back(static_cast<std::int32_t>(local));
        std::vector<double> row(spec.classes, 0.0);
        for (int d : labels.drugs[v]) row.at(static_cast<std::size_t>(d)) = 1.0;
        multi.insert(multi.end(), row.begin(), row.end());
        break;
      }
    }
  }
  if (spec.id == TaskId::Drug) b.targets.multilabel = Tensor({b.rows.size(), spec.classes}, std::move(multi));
  return b;
}

struct View {
  HeteroGraph graph;
  EncodeOutput causal;
  std::optional<EncodeOutput> trivial;
};

// The DR input view: the loss visits' prescription edges removed.
HeteroGraph drug_view(const HeteroGraph& g, const std::vector<std::int32_t>& loss_visits, bool leaky,
                      StepReport& report) {
  HeteroGraph view = g;
  if (!leaky) drop_visit_edges(view, EdgeType::VisitPrescription, loss_visits);
  const std::size_t leaks = count_drug_leaks(view, loss_visits);
  report.drug_loss_visits = loss_visits.size();
  report.drug_view_leaks = leaks;
  if (leaks > 0) {
    throw ContractError("drug view: " + std::to_string(leaks) +
                        " prescription edges touch visits whose prescriptions are prediction targets");
  }
  return view;
}

View encode_view(const Model& model, HeteroGraph graph, double tau, Rng& rng, bool training, bool dual,
                 bool stop_trivial_grad) {
  View v;
  v.graph = std::move(graph);
  const NodeFeatures x = graph_features(v.graph);
  if (!model.causal) {
    v.causal = encode(v.graph, x, model.layers, model.encoder, nullptr, tau, rng, training);
    return v;
  }
  DisentangleMask mask = compute_masks(v.graph, x, *model.mask, tau);
  if (dual) {
    DualOutput out = dual_encode(v.graph, x, model.layers, model.encoder, mask, tau, rng, training, stop_trivial_grad);
    v.causal = std::move(out.causal);
    v.trivial = std::move(out.trivial);
  } else {
    v.causal = encode(v.graph, x, model.layers, model.encoder, &mask.causal, tau, rng, training);
  }
  return v;
}

bool has_task(const Model& m, TaskId id) {
  return std::any_of(m.tasks.begin(), m.tasks.end(), [&](const TaskSpec& t) { return t.id == id; });
}

std::vector<std::int32_t> drug_loss_visits(const GraphLabels& labels, const std::vector<std::int32_t>& parent) {
  std::vector<std::int32_t> out;
  for (std::size_t local = 0; local < parent.size(); ++local) {
    if (!labels.drugs[static_cast<std::size_t>(parent[local])].empty()) out.push_back(static_cast<std::int32_t>(local));
  }
  return out;
}

void check_features(const Model& model, const HeteroGraph& g) {
  if (g.feature_dim != model.encoder.dim) {
    throw ConfigError("model: graph features have width " + std::to_string(g.feature_dim) + " but the encoder dim is " +
                      std::to_string(model.encoder.dim));
  }
}

}  // namespace

StepReport train_step(Model& model, AdamState& adam, const TrainData& data, const TrainConfig& cfg, double temperature,
                      Rng& rng) {
  check_features(model, data.graph);
  if (data.split.train.empty()) throw ContractError("train_step: empty training split");
  SubgraphSample s = sample_subgraph(data.graph, data.split.train, cfg.n_visit, rng);
  const bool augmenting = cfg.augment.edge_drop_p > 0 || cfg.augment.node_drop_p > 0 || cfg.augment.noise_sigma > 0;
  if (augmenting) s = augment(s, cfg.augment, rng);
  const std::vector<std::int32_t>& parent = s.parent_index[static_cast<int>(NodeType::Visit)];

  StepReport report;
  const bool dual = model.causal;
  std::optional<View> base, drug;
  const bool needs_base = std::any_of(model.tasks.begin(), model.tasks.end(), [](const TaskSpec& t) { return t.id != TaskId::Drug; });
  if (needs_base) base = encode_view(model, s.graph, temperature, rng, true, dual, cfg.stop_trivial_grad);
  if (has_task(model, TaskId::Drug)) {
    HeteroGraph view = drug_view(s.graph, drug_loss_visits(data.labels, parent), cfg.leaky_drug_view, report);
    drug = encode_view(model, std::move(view), temperature, rng, true, dual, cfg.stop_trivial_grad);
  }

  report.task_loss.assign(model.tasks.size(), std::nullopt);
  std::vector<Tensor> losses;
  const int visit_t = static_cast<int>(NodeType::Visit);
  for (std::size_t k = 0; k < model.tasks.size(); ++k) {
    const TaskSpec& spec = model.tasks[k];
    const TaskHead& head = model.heads[k];
    TaskBatch b = task_batch(spec, data.labels, parent);
    if (spec.id == TaskId::Mortality && cfg.downsample_mortality) {
      bool single = false;
      std::vector<int> y(b.targets.classes.begin(), b.targets.classes.end());
      std::vector<std::int32_t> kept = balance_mortality(b.rows, y, rng, &single);
      if (single && !b.rows.empty()) report.events.push_back("mort: single-class batch, not downsampled");
      if (kept.size() != b.rows.size()) {
        b.rows = kept;
        b.targets.classes.clear();
        for (std::int32_t local : kept) b.targets.classes.push_back(data.labels.mortality[static_cast<std::size_t>(parent[static_cast<std::size_t>(local)])]);
      }
    }
    if (b.rows.empty()) {
      report.events.push_back(std::string(task_name(spec.id)) + ": no labeled visits in the sample, skipped");
      continue;
    }
    const View& v = spec.id == TaskId::Drug ? *drug : *base;
    Tensor hc = gather_rows(v.causal.features[visit_t], b.rows);
    Tensor zc = head.causal(hc, model.encoder.dropout, rng, true);
    TaskLoss tl;
    if (v.trivial) {
      Tensor ht = gather_rows(v.trivial->features[visit_t], b.rows);
      Tensor zt = head.trivial(ht, model.encoder.dropout, rng, true);
      tl = task_loss(spec, zc, zt, b.targets, rng, cfg.noise);
    } else {
      tl.total = task_kind(spec.id) == TaskKind::Multilabel ? bce_loss(zc, b.targets.multilabel)
                                                            : ce_loss(zc, b.targets.classes);
    }
    report.task_loss[k] = tl.total.item();
    losses.push_back(tl.total);
  }
  report.active_tasks = losses.size();
  if (losses.empty()) {
    report.events.push_back("no task had labeled visits; step skipped");
    report.aggregate = std::numeric_limits<double>::quiet_NaN();
    return report;
  }
  Tensor total = multitask_aggregate(losses, cfg.beta, cfg.task_aggregation);
  report.aggregate = total.item();
  if (!std::isfinite(report.aggregate)) {
    std::ostringstream os;
    os.precision(17);
    os << "non-finite training loss at temperature " << temperature << "; sampled visits " << parent.size()
       << "; task losses:";
    for (std::size_t k = 0; k < model.tasks.size(); ++k) {
      os << ' ' << task_name(model.tasks[k].id) << '=';
      if (report.task_loss[k]) os << *report.task_loss[k];
      else os << "skipped";
    }
    throw NumericError(os.str());
  }
  backward(total);
  adam_step(model.params.tensors(), adam);
  model.params.zero_grad();
  return report;
}

std::vector<TaskMetrics> evaluate(const Model& model, const TrainData& data, const std::vector<std::int32_t>& visits,
                                  double temperature) {
  check_features(model, data.graph);
  NoGradGuard no_grad;
  Rng rng(0);  // unused: no dropout in eval mode
  SubgraphSample s = visit_subgraph(data.graph, visits);
  const std::vector<std::int32_t>& parent = s.parent_index[static_cast<int>(NodeType::Visit)];
  std::optional<View> base, drug;
  std::vector<TaskMetrics> out;
  const int visit_t = static_cast<int>(NodeType::Visit);
  for (std::size_t k = 0; k < model.tasks.size(); ++k) {
    const TaskSpec& spec = model.tasks[k];
    TaskBatch b = task_batch(spec, data.labels, parent);
    const View* v = nullptr;
    if (spec.id == TaskId::Drug) {
      if (!drug) {
        StepReport audit;
        drug = encode_view(model, drug_view(s.graph, drug_loss_visits(data.labels, parent), false, audit), temperature,
                           rng, false, false, true);
      }
      v = &*drug;
    } else {
      if (!base) base = encode_view(model, s.graph, temperature, rng, false, false, true);
      v = &*base;
    }
    Tensor logits = b.rows.empty() ? Tensor::zeros({0, spec.classes})
                                   : model.heads[k].causal(gather_rows(v->causal.features[visit_t], b.rows), 0.0, rng, false);
    out.push_back(evaluate_task(spec, logits, b.targets));
  }
  return out;
}

nlohmann::json EpochReport::to_json(const Model& model) const {
  nlohmann::json j;
  j["epoch"] = epoch;
  j["temperature"] = temperature;
  nlohmann::json loss = nlohmann::json::object();
  for (std::size_t k = 0; k < model.tasks.size(); ++k) {
    const std::string name(task_name(model.tasks[k].id));
    loss[name] = step.task_loss[k] ? nlohmann::json(*step.task_loss[k]) : nlohmann::json(nullptr);
  }
  j["train_loss"] = loss;
  j["aggregate"] = std::isfinite(step.aggregate) ? nlohmann::json(step.aggregate) : nlohmann::json(nullptr);
  j["events"] = step.events;
  j["valid"] = multehr::to_json(valid);
  j["valid_mean_auroc"] = std::isfinite(valid_mean_auroc) ? nlohmann::json(valid_mean_auroc) : nlohmann::json(nullptr);
  j["best"] = best;
  return j;
}

TensorMap model_checkpoint(const Model& model, double temperature) {
  TensorMap m = model.params.to_map();
  for (auto& [name, t] : m) t = t.detach();  // to_map shares storage with the live parameters
  m["meta.temperature"] = Tensor::scalar(temperature);
  return m;
}

double load_model_checkpoint(Model& model, const TensorMap& checkpoint) {
  model.params.load(checkpoint);
  auto it = checkpoint.find("meta.temperature");
  if (it == checkpoint.end()) throw DataError("checkpoint: missing meta.temperature");
  return it->second.item();
}

TrainResult train_run(Model& model, const TrainData& data, const TrainConfig& cfg,
                      const std::function<void(const EpochReport&)>& on_epoch) {
  cfg.validate();
  check_features(model, data.graph);
  if (data.split.valid.empty()) throw ContractError("train_run: empty validation split");
  Rng rng(cfg.seed);
  AdamState adam = make_adam_state(model.params.tensors(), cfg.adam);
  TrainResult result;
  result.best_valid_auroc = -std::numeric_limits<double>::infinity();
  for (std::size_t p = 0; p < cfg.max_epochs; ++p) {
    EpochReport rep;
    rep.epoch = p;
    rep.temperature = anneal_temperature(p, cfg.anneal_rate, cfg.temperature_floor, cfg.literal_anneal);
    try {
      rep.step = train_step(model, adam, data, cfg, rep.temperature, rng);
    } catch (const NumericError& e) {
      throw NumericError("epoch " + std::to_string(p) + ": " + e.what());
    }
    rep.valid = evaluate(model, data, data.split.valid, rep.temperature);
    const Metric m = mean_auroc(rep.valid);
    rep.valid_mean_auroc = m.defined() ? m.value : std::numeric_limits<double>::quiet_NaN();
    const double score = m.defined() ? m.value : -std::numeric_limits<double>::infinity();
    if (p == 0 || score > result.best_valid_auroc) {
      rep.best = true;
      result.best_epoch = p;
      result.best_valid_auroc = score;
      result.best_temperature = rep.temperature;
      result.best_checkpoint = model_checkpoint(model, rep.temperature);
    }
    if (on_epoch) on_epoch(rep);
    result.epochs.push_back(std::move(rep));
    if (p - result.best_epoch >= cfg.patience) break;
  }
  model.params.load(result.best_checkpoint);
  return result;
}

std::vector<AttendedEdge> explain_visit(const Model& model, const HeteroGraph& g, std::int32_t visit, std::size_t k,
                                        double temperature) {
  check_features(model, g);
  if (visit < 0 || static_cast<std::size_t>(visit) >= g.num_nodes(NodeType::Visit)) {
    throw ContractError("explain: visit index " + std::to_string(visit) + " out of range");
  }
  const int dv = static_cast<int>(EdgeType::DiagnosisVisit);
  const Tensor att = final_attention(model, g, temperature)[dv];
  const EdgeList& e = g.edges[dv];
  const std::size_t heads = model.encoder.n_heads;
  std::vector<AttendedEdge> out;
  for (std::size_t i = 0; i < e.size(); ++i) {
    if (e.dst[i] != visit) continue;
    double score = 0.0;
    for (std::size_t h = 0; h < heads; ++h) score += att[i * heads + h];
    out.push_back({g.ids(NodeType::Diagnosis)[static_cast<std::size_t>(e.src[i])], score});
  }
  std::stable_sort(out.begin(), out.end(), [](const AttendedEdge& a, const AttendedEdge& b) { return a.score > b.score; });
  if (out.size() > k) out.resize(k);
  return out;
}

std::array<Tensor, kEdgeTypes> final_attention(const Model& model, const HeteroGraph& g, double temperature) {
  check_features(model, g);
  NoGradGuard no_grad;
  Rng rng(0);
  return encode_view(model, g, temperature, rng, false, false, true).causal.attention.back();
}

NodeFeatures embed_nodes(const Model& model, const HeteroGraph& g, double temperature) {
  check_features(model, g);
  NoGradGuard no_grad;
  Rng rng(0);
  return encode_view(model, g, temperature, rng, false, false, true).causal.features;
}

}  // namespace multehr
