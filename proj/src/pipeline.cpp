#include "multehr/pipeline.hpp"

#include <fstream>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

#include "multehr/errors.hpp"

namespace multehr {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// Object reader that remembers which keys were consumed, so leftovers can be
// rejected as unknown.
class Obj {
 public:
  Obj(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(where() + ": expected an object");
  }

  bool has(const char* key) const { return j_.contains(key) && !j_.at(key).is_null(); }

  template <class T>
  bool get(const char* key, T& dst) {
    used_.insert(key);
    if (!has(key)) return false;
    const json& v = j_.at(key);
    const std::string at = where() + "." + key;
    if constexpr (std::is_same_v<T, bool>) {
      if (!v.is_boolean()) throw ConfigError(at + ": expected true or false");
      dst = v.get<bool>();
    } else if constexpr (std::is_integral_v<T> && std::is_unsigned_v<T>) {
      if (!v.is_number_integer() || v.get<long long>() < 0) throw ConfigError(at + ": expected a non-negative integer");
      dst = static_cast<T>(v.get<unsigned long long>());
    } else if constexpr (std::is_integral_v<T>) {
      if (!v.is_number_integer()) throw ConfigError(at + ": expected an integer");
      dst = static_cast<T>(v.get<long long>());
    } else if constexpr (std::is_floating_point_v<T>) {
      if (!v.is_number()) throw ConfigError(at + ": expected a number");
      dst = v.get<double>();
    } else if constexpr (std::is_same_v<T, std::string>) {
      if (!v.is_string()) throw ConfigError(at + ": expected a string");
      dst = v.get<std::string>();
    } else {
      static_assert(sizeof(T) == 0, "unsupported config type");
    }
    return true;
  }

  const json* sub(const char* key) {
    used_.insert(key);
    return has(key) ? &j_.at(key) : nullptr;
  }

  std::string where() const { return path_; }
  std::string where(const char* key) const { return path_ + "." + key; }

  void done() const {
    for (const auto& [key, value] : j_.items()) {
      if (!used_.count(key)) throw ConfigError(where() + ": unknown key '" + key + "'");
    }
  }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> used_;
};

SynthConfig parse_synth(const json& j, std::uint64_t default_seed, bool& seed_given) {
  Obj o(j, "data.synth");
  SynthConfig s;
  s.seed = default_seed;
  o.get("n_patients", s.n_patients);
  o.get("mean_visits", s.mean_visits);
  o.get("n_diagnosis_codes", s.n_diagnosis_codes);
  o.get("n_prescription_codes", s.n_prescription_codes);
  o.get("n_procedure_codes", s.n_procedure_codes);
  o.get("severity_dim", s.severity_dim);
  o.get("mean_diagnoses", s.mean_diagnoses);
  o.get("mean_procedures", s.mean_procedures);
  o.get("mortality_rate", s.mortality_rate);
  o.get("readmission_window_days", s.readmission_window_days);
  o.get("rho_train", s.rho_train);
  o.get("rho_test", s.rho_test);
  o.get("n_folds", s.n_folds);
  o.get("test_fold", s.test_fold);
  seed_given = o.get("seed", s.seed);
  o.done();
  validate_synth_config(s);
  return s;
}

json synth_to_json(const SynthConfig& s) {
  return {{"n_patients", s.n_patients},
          {"mean_visits", s.mean_visits},
          {"n_diagnosis_codes", s.n_diagnosis_codes},
          {"n_prescription_codes", s.n_prescription_codes},
          {"n_procedure_codes", s.n_procedure_codes},
          {"severity_dim", s.severity_dim},
          {"mean_diagnoses", s.mean_diagnoses},
          {"mean_procedures", s.mean_procedures},
          {"mortality_rate", s.mortality_rate},
          {"readmission_window_days", s.readmission_window_days},
          {"rho_train", s.rho_train},
          {"rho_test", s.rho_test},
          {"n_folds", s.n_folds},
          {"test_fold", s.test_fold},
          {"seed", s.seed}};
}

void reject_duplicates(const std::vector<TaskId>& tasks) {
  for (std::size_t i = 0; i < tasks.size(); ++i) {
    for (std::size_t j = 0; j < i; ++j) {
      if (tasks[i] == tasks[j]) throw ConfigError("tasks: '" + std::string(task_name(tasks[i])) + "' listed twice");
    }
  }
}

std::vector<TaskId> parse_tasks(const json& v) {
  if (v.is_string()) return parse_task_letters(v.get<std::string>());
  if (!v.is_array()) throw ConfigError("tasks: expected a list of task names or a letter string like \"RMDL\"");
  std::vector<TaskId> out;
  for (const json& t : v) {
    if (!t.is_string()) throw ConfigError("tasks: entries must be strings");
    auto id = parse_task(t.get<std::string>());
    if (!id) throw ConfigError("tasks: unknown task '" + t.get<std::string>() + "' (readm, mort, drug, los)");
    out.push_back(*id);
  }
  if (out.empty()) throw ConfigError("tasks: empty task list");
  reject_duplicates(out);
  return out;
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("cannot write " + path.string());
  os << text;
  if (!os) throw Error("write failed for " + path.string());
}

std::string dump(const json& j) { return j.dump(2) + "\n"; }

}  // namespace

std::vector<TaskId> parse_task_letters(const std::string& letters) {
  std::vector<TaskId> out;
  for (char ch : letters) {
    switch (ch) {
      case 'R': out.push_back(TaskId::Readmission); break;
      case 'M': out.push_back(TaskId::Mortality); break;
      case 'D': out.push_back(TaskId::Drug); break;
      case 'L': out.push_back(TaskId::LengthOfStay); break;
      default:
        throw ConfigError(std::string("tasks: unknown letter '") + ch + "' (R, M, D, L)");
    }
  }
  if (out.empty()) throw ConfigError("tasks: empty task list");
  reject_duplicates(out);
  return out;
}

int ExperimentConfig::n_folds() const {
  if (data.n_folds) return *data.n_folds;
  return data.synth ? data.synth->n_folds : 5;
}

int ExperimentConfig::test_fold() const {
  if (data.test_fold) return *data.test_fold;
  return data.synth ? data.synth->test_fold : 0;
}

std::uint64_t ExperimentConfig::split_seed() const {
  if (data.split_seed) return *data.split_seed;
  return data.synth ? data.synth->seed : seed;
}

ExperimentConfig parse_config(const json& j) {
  ExperimentConfig c;
  Obj root(j, "config");
  root.get("seed", c.seed);
  root.get("deterministic", c.deterministic);
  std::string out;
  if (root.get("out", out)) c.out = out;

  bool synth_seed_given = false;
  if (const json* d = root.sub("data")) {
    Obj o(*d, "data");
    std::string dir;
    if (o.get("csv_dir", dir)) c.data.csv_dir = dir;
    if (const json* s = o.sub("synth")) c.data.synth = parse_synth(*s, c.seed, synth_seed_given);
    o.get("readm_window_days", c.data.readm_window_days);
    o.get("include_lab_events", c.data.include_lab_events);
    int folds = 0, test = 0;
    std::uint64_t split_seed = 0;
    if (o.get("n_folds", folds)) c.data.n_folds = folds;
    if (o.get("test_fold", test)) c.data.test_fold = test;
    if (o.get("split_seed", split_seed)) c.data.split_seed = split_seed;
    o.done();
  }
  if (c.data.csv_dir && c.data.synth) throw ConfigError("data: give either csv_dir or synth, not both");
  if (!c.data.csv_dir && !c.data.synth) {
    c.data.synth = SynthConfig{};
    c.data.synth->seed = c.seed;
  }
  if (c.data.readm_window_days < 0) throw ConfigError("data.readm_window_days must be >= 0");
  if (c.n_folds() < 2) throw ConfigError("data.n_folds must be >= 2");
  if (c.test_fold() < 0 || c.test_fold() >= c.n_folds()) throw ConfigError("data.test_fold out of range");

  if (const json* p = root.sub("pretrain")) {
    Obj o(*p, "pretrain");
    o.get("enabled", c.pretrain_enabled);
    o.get("epochs", c.pretrain.epochs);
    o.get("batch_size", c.pretrain.batch_size);
    o.get("negatives", c.pretrain.negatives);
    o.get("margin", c.pretrain.margin);
    o.get("learning_rate", c.pretrain.learning_rate);
    std::string norm;
    if (o.get("norm", norm)) {
      if (norm == "l2") c.pretrain.norm = TransENorm::L2;
      else if (norm == "l1") c.pretrain.norm = TransENorm::L1;
      else throw ConfigError("pretrain.norm: expected \"l1\" or \"l2\"");
    }
    o.done();
  }
  if (c.pretrain.batch_size == 0 || c.pretrain.negatives == 0) throw ConfigError("pretrain: batch_size and negatives must be positive");
  if (!(c.pretrain.margin > 0) || !(c.pretrain.learning_rate > 0)) throw ConfigError("pretrain: margin and learning_rate must be positive");

  if (const json* e = root.sub("encoder")) {
    Obj o(*e, "encoder");
    o.get("n_layers", c.encoder.n_layers);
    o.get("n_heads", c.encoder.n_heads);
    o.get("dim", c.encoder.dim);
    o.get("dropout", c.encoder.dropout);
    std::string act;
    if (o.get("activation", act)) {
      if (act == "gelu") c.encoder.activation = Activation::Gelu;
      else if (act == "leaky_relu") c.encoder.activation = Activation::LeakyRelu;
      else throw ConfigError("encoder.activation: expected \"gelu\" or \"leaky_relu\"");
    }
    o.done();
  }
  c.encoder.validate();

  if (const json* t = root.sub("train")) {
    Obj o(*t, "train");
    TrainConfig& tc = c.train;
    std::string preset;
    if (o.get("preset", preset)) {
      if (preset == "default") tc.adam.learning_rate = 5e-5, tc.adam.weight_decay = 1e-5;
      else if (preset == "fast") tc.adam.learning_rate = 5e-3, tc.adam.weight_decay = 1e-3;
      else throw ConfigError("train.preset: expected \"default\" or \"fast\"");
    }
    o.get("learning_rate", tc.adam.learning_rate);
    o.get("weight_decay", tc.adam.weight_decay);
    o.get("max_epochs", tc.max_epochs);
    o.get("patience", tc.patience);
    o.get("n_visit", tc.n_visit);
    o.get("anneal_rate", tc.anneal_rate);
    o.get("temperature_floor", tc.temperature_floor);
    o.get("literal_anneal", tc.literal_anneal);
    o.get("beta", tc.beta);
    o.get("stop_trivial_grad", tc.stop_trivial_grad);
    o.get("downsample_mortality", tc.downsample_mortality);
    std::string noise;
    if (o.get("noise", noise)) {
      if (noise == "sampled") tc.noise = NoiseTarget::SampledUniform;
      else if (noise == "fixed") tc.noise = NoiseTarget::FixedUniform;
      else throw ConfigError("train.noise: expected \"sampled\" or \"fixed\"");
    }
    if (const json* a = o.sub("augment")) {
      Obj ao(*a, "train.augment");
      ao.get("edge_drop_p", tc.augment.edge_drop_p);
      ao.get("node_drop_p", tc.augment.node_drop_p);
      ao.get("noise_sigma", tc.augment.noise_sigma);
      ao.done();
    }
    o.done();
  }

  if (const json* t = root.sub("tasks")) c.tasks = parse_tasks(*t);
  if (const json* l = root.sub("lambda")) {
    if (l->is_number()) {
      for (TaskId id : kTaskOrder) c.lambda[id] = l->get<double>();
    } else if (l->is_object()) {
      for (const auto& [name, v] : l->items()) {
        auto id = parse_task(name);
        if (!id) throw ConfigError("lambda: unknown task '" + name + "'");
        if (!v.is_number()) throw ConfigError("lambda." + name + ": expected a number");
        c.lambda[*id] = v.get<double>();
      }
    } else {
      throw ConfigError("lambda: expected a number or an object of per-task numbers");
    }
    for (const auto& [id, v] : c.lambda) {
      if (!(v >= 0.0)) throw ConfigError("lambda." + std::string(task_name(id)) + " must be >= 0");
    }
  }
  if (const json* a = root.sub("ablation")) {
    Obj o(*a, "ablation");
    o.get("causal", c.train.causal);
    o.get("task_aggregation", c.train.task_aggregation);
    o.done();
  }
  if (const json* s = root.sub("sweep")) {
    Obj o(*s, "sweep");
    std::string param;
    if (!o.get("param", param)) throw ConfigError("sweep.param is required");
    const json* values = o.sub("values");
    if (!values || !values->is_array() || values->empty()) throw ConfigError("sweep.values: expected a non-empty list");
    o.done();
    c.sweep = *s;
    for (const json& v : *values) with_sweep_value(c, param, v);  // validates each value
  }
  root.done();
  c.train.seed = c.seed;
  c.train.validate();
  return c;
}

ExperimentConfig load_config(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot read config file " + path.string());
  json j;
  try {
    j = json::parse(is);
  } catch (const json::exception& e) {
    throw ConfigError("config " + path.string() + ": " + e.what());
  }
  return parse_config(j);
}

json config_to_json(const ExperimentConfig& c) {
  json j;
  j["seed"] = c.seed;
  j["deterministic"] = c.deterministic;
  j["out"] = c.out.string();
  json d;
  if (c.data.csv_dir) d["csv_dir"] = c.data.csv_dir->string();
  if (c.data.synth) d["synth"] = synth_to_json(*c.data.synth);
  d["readm_window_days"] = c.data.readm_window_days;
  d["include_lab_events"] = c.data.include_lab_events;
  d["n_folds"] = c.n_folds();
  d["test_fold"] = c.test_fold();
  d["split_seed"] = c.split_seed();
  j["data"] = d;
  j["pretrain"] = {{"enabled", c.pretrain_enabled},
                   {"epochs", c.pretrain.epochs},
                   {"batch_size", c.pretrain.batch_size},
                   {"negatives", c.pretrain.negatives},
                   {"margin", c.pretrain.margin},
                   {"learning_rate", c.pretrain.learning_rate},
                   {"norm", c.pretrain.norm == TransENorm::L2 ? "l2" : "l1"}};
  j["encoder"] = {{"n_layers", c.encoder.n_layers},
                  {"n_heads", c.encoder.n_heads},
                  {"dim", c.encoder.dim},
                  {"dropout", c.encoder.dropout},
                  {"activation", c.encoder.activation == Activation::Gelu ? "gelu" : "leaky_relu"}};
  const TrainConfig& t = c.train;
  j["train"] = {{"learning_rate", t.adam.learning_rate},
                {"weight_decay", t.adam.weight_decay},
                {"max_epochs", t.max_epochs},
                {"patience", t.patience},
                {"n_visit", t.n_visit},
                {"anneal_rate", t.anneal_rate},
                {"temperature_floor", t.temperature_floor},
                {"literal_anneal", t.literal_anneal},
                {"beta", t.beta},
                {"stop_trivial_grad", t.stop_trivial_grad},
                {"downsample_mortality", t.downsample_mortality},
                {"noise", t.noise == NoiseTarget::SampledUniform ? "sampled" : "fixed"},
                {"augment",
                 {{"edge_drop_p", t.augment.edge_drop_p},
                  {"node_drop_p", t.augment.node_drop_p},
                  {"noise_sigma", t.augment.noise_sigma}}}};
  json tasks = json::array();
  for (TaskId id : c.tasks) tasks.push_back(std::string(task_name(id)));
  j["tasks"] = tasks;
  json lambda = json::object();
  for (TaskId id : kTaskOrder) {
    auto it = c.lambda.find(id);
    lambda[std::string(task_name(id))] = it == c.lambda.end() ? 1.0 : it->second;
  }
  j["lambda"] = lambda;
  j["ablation"] = {{"causal", t.causal}, {"task_aggregation", t.task_aggregation}};
  if (!c.sweep.is_null()) j["sweep"] = c.sweep;
  return j;
}

ExperimentConfig with_sweep_value(const ExperimentConfig& base, const std::string& param, const json& v) {
  ExperimentConfig c = base;
  auto number = [&]() {
    if (!v.is_number()) throw ConfigError("sweep " + param + ": expected numeric values");
    return v.get<double>();
  };
  auto count = [&]() {
    if (!v.is_number_integer() || v.get<long long>() <= 0) throw ConfigError("sweep " + param + ": expected positive integers");
    return static_cast<std::size_t>(v.get<long long>());
  };
  if (param == "lambda") {
    const double l = number();
    if (l < 0) throw ConfigError("sweep lambda: values must be >= 0");
    for (TaskId id : kTaskOrder) c.lambda[id] = l;
  } else if (param == "beta") {
    c.train.beta = number();
  } else if (param == "dim") {
    c.encoder.dim = count();
  } else if (param == "n_heads") {
    c.encoder.n_heads = count();
  } else if (param == "n_layers") {
    c.encoder.n_layers = count();
  } else if (param == "n_visit") {
    c.train.n_visit = count();
  } else if (param == "ablation") {
    const std::string s = v.is_string() ? v.get<std::string>() : "";
    if (s == "both") c.train.causal = true, c.train.task_aggregation = true;
    else if (s == "causal") c.train.causal = true, c.train.task_aggregation = false;
    else if (s == "agg") c.train.causal = false, c.train.task_aggregation = true;
    else if (s == "none") c.train.causal = false, c.train.task_aggregation = false;
    else throw ConfigError("sweep ablation: values are \"both\", \"causal\", \"agg\", \"none\"");
  } else if (param == "tasks") {
    if (!v.is_string()) throw ConfigError("sweep tasks: values are letter strings like \"RMDL\"");
    c.tasks = parse_task_letters(v.get<std::string>());
  } else {
    throw ConfigError("sweep.param: unknown parameter '" + param + "'");
  }
  c.encoder.validate();
  c.train.validate();
  return c;
}

PreparedTables prepare_tables(const ExperimentConfig& c, StageTracker& st) {
  PreparedTables p;
  if (c.data.csv_dir) {
    st.stage = "ingest";
    IngestResult r = ingest_csv(*c.data.csv_dir);
    p.tables = std::move(r.tables);
    p.ingest_report = std::move(r.report);
  } else {
    st.stage = "synth";
    p.tables = synth_generate(*c.data.synth);
  }
  st.stage = "labels";
  p.labels = extract_labels(p.tables, c.data.readm_window_days);
  st.stage = "split";
  p.patient_fold = split_patients(p.tables, c.n_folds(), c.split_seed());
  return p;
}

HeteroGraph prepare_graph(const ExperimentConfig& c, const PreparedTables& t, StageTracker& st, PretrainOutput* pretrain) {
  st.stage = "build_graph";
  HeteroGraph g = build_graph(t.tables, {c.data.include_lab_events, c.encoder.dim});
  st.stage = "pretrain";
  std::vector<EdgeType> exclude;
  const bool drug = std::find(c.tasks.begin(), c.tasks.end(), TaskId::Drug) != c.tasks.end();
  if (drug) exclude = {EdgeType::VisitPrescription, EdgeType::PrescriptionVisit};
  TripleStore store = triples_from_graph(g, exclude);
  std::seed_seq seq{c.seed, std::uint64_t{0x7E}};
  Rng rng(seq);
  TransEParams params;
  std::vector<double> trace;
  if (c.pretrain_enabled) {
    PretrainResult r = pretrain_run(store, c.encoder.dim, c.pretrain, rng);
    params = std::move(r.params);
    trace = std::move(r.loss_trace);
  } else {
    params = init_transe(store, c.encoder.dim, rng);
  }
  write_features(g, params);
  if (pretrain) {
    pretrain->embeddings = transe_tensors(params, store);
    pretrain->loss_trace = std::move(trace);
  }
  return g;
}

std::vector<TaskSpec> task_specs(const ExperimentConfig& c, std::size_t n_drugs) {
  std::vector<TaskSpec> specs;
  for (TaskId id : c.tasks) {
    TaskSpec s;
    s.id = id;
    s.classes = id == TaskId::LengthOfStay ? static_cast<std::size_t>(kLosClasses) : id == TaskId::Drug ? n_drugs : 2;
    auto it = c.lambda.find(id);
    s.lambda = it == c.lambda.end() ? 1.0 : it->second;
    specs.push_back(s);
  }
  return specs;
}

TrainConfig resolved_train_config(const ExperimentConfig& c) {
  TrainConfig t = c.train;
  t.seed = c.seed;
  return t;
}

TrainData make_train_data(const ExperimentConfig& c, const PreparedTables& t, HeteroGraph g) {
  TrainData d;
  d.labels = align_labels(t.tables, t.labels, g);
  d.split = split_visits(t.tables, g, t.patient_fold, c.test_fold());
  d.graph = std::move(g);
  return d;
}

double model_from_checkpoint(const ExperimentConfig& c, const TensorMap& checkpoint, Model& out) {
  std::size_t n_drugs = 0;
  auto it = checkpoint.find("head.drug.causal.output.w");
  if (it != checkpoint.end()) n_drugs = it->second.size(1);
  const bool causal = checkpoint.count("mask.hidden.w") > 0;
  std::vector<TaskSpec> specs;
  for (const TaskSpec& s : task_specs(c, n_drugs)) {
    if (checkpoint.count("head." + std::string(task_name(s.id)) + ".causal.output.w")) specs.push_back(s);
  }
  if (specs.empty()) throw DataError("checkpoint has no heads for the configured tasks");
  Rng rng(0);
  out = make_model(c.encoder, specs, causal, c.data.include_lab_events, rng);
  return load_model_checkpoint(out, checkpoint);
}

namespace {

json ingest_json(const std::vector<FileReport>& report) {
  json j = json::array();
  for (const FileReport& r : report) {
    j.push_back({{"file", r.file},
                 {"rows_read", r.rows_read},
                 {"rows_accepted", r.rows_accepted},
                 {"rows_rejected", r.rows_rejected},
                 {"diagnostics", r.diagnostics}});
  }
  return j;
}

json graph_counts(const HeteroGraph& g) {
  json j;
  for (int t = 0; t < kNodeTypes; ++t) j["nodes"][std::string(node_type_name(node_type_at(t)))] = g.node_ids[t].size();
  for (int k = 0; k < kEdgeTypes; ++k) j["edges"][std::string(edge_info(edge_type_at(k)).name)] = g.edges[k].size();
  return j;
}

// Train on a prepared graph and write the run's artifacts into `out`.
json train_into(const ExperimentConfig& c, const PreparedTables& t, const HeteroGraph& g, const fs::path& out,
                StageTracker& st) {
  fs::create_directories(out);
  ExperimentConfig resolved = c;
  resolved.out = out;
  write_text(out / "config.json", dump(config_to_json(resolved)));
  st.stage = "train";
  TrainData data = make_train_data(c, t, g);
  std::seed_seq seq{c.seed, std::uint64_t{0x1417}};
  Rng init(seq);
  Model model = make_model(c.encoder, task_specs(c, data.labels.n_drugs), c.train.causal, c.data.include_lab_events, init);
  std::ofstream log(out / "train_log.jsonl", std::ios::binary);
  TrainResult r = train_run(model, data, resolved_train_config(c),
                            [&](const EpochReport& e) { log << e.to_json(model).dump() << '\n'; });
  log.close();
  save_checkpoint(out / "model.ckpt", r.best_checkpoint);
  st.stage = "evaluate";
  std::vector<TaskMetrics> test = evaluate(model, data, data.split.test, r.best_temperature);
  std::vector<TaskMetrics> valid = evaluate(model, data, data.split.valid, r.best_temperature);
  json m;
  m["fold"] = c.test_fold();
  m["best_epoch"] = r.best_epoch;
  m["epochs_run"] = r.epochs.size();
  m["temperature"] = r.best_temperature;
  const Metric tv = mean_auroc(test), vv = mean_auroc(valid);
  m["test_mean_auroc"] = tv.defined() ? json(tv.value) : json(nullptr);
  m["valid_mean_auroc"] = vv.defined() ? json(vv.value) : json(nullptr);
  m["test"] = to_json(test);
  m["valid"] = to_json(valid);
  m["splits"] = {{"train", data.split.train.size()}, {"valid", data.split.valid.size()}, {"test", data.split.test.size()}};
  write_text(out / "metrics.json", dump(m));
  std::string csv = metrics_csv_header() + "\n";
  for (const TaskMetrics& tm : test) csv += metrics_csv_row(c.test_fold(), tm) + "\n";
  write_text(out / "metrics.csv", csv);
  return m;
}

}  // namespace

json cmd_synth(const ExperimentConfig& c, StageTracker& st) {
  if (!c.data.synth) throw ConfigError("synth: the config names a CSV directory, not a synthetic dataset");
  st.stage = "synth";
  EhrTables t = synth_generate(*c.data.synth);
  st.stage = "write";
  write_csv(t, c.out);
  json manifest;
  manifest["seed"] = c.data.synth->seed;
  manifest["synth"] = synth_to_json(*c.data.synth);
  manifest["planted_shortcut"] = {{"code", std::string(kShortcutCode)},
                                  {"rho_train", c.data.synth->rho_train},
                                  {"rho_test", c.data.synth->rho_test},
                                  {"test_fold", c.data.synth->test_fold}};
  manifest["rows"] = {{"patients", t.patients.size()},
                      {"visits", t.visits.size()},
                      {"diagnoses", t.diagnoses.size()},
                      {"prescriptions", t.prescriptions.size()},
                      {"procedures", t.procedures.size()}};
  write_text(c.out / "manifest.json", dump(manifest));
  return manifest;
}

json cmd_build_graph(const ExperimentConfig& c, StageTracker& st) {
  PreparedTables t = prepare_tables(c, st);
  st.stage = "build_graph";
  HeteroGraph g = build_graph(t.tables, {c.data.include_lab_events, c.encoder.dim});
  st.stage = "export";
  export_graph(g, c.out / "graph");
  json j = graph_counts(g);
  j["ingest"] = ingest_json(t.ingest_report);
  write_text(c.out / "graph_summary.json", dump(j));
  return j;
}

json cmd_pretrain(const ExperimentConfig& c, StageTracker& st) {
  PreparedTables t = prepare_tables(c, st);
  PretrainOutput p;
  HeteroGraph g = prepare_graph(c, t, st, &p);
  st.stage = "export";
  export_graph(g, c.out / "graph");
  save_checkpoint(c.out / "transe.ckpt", p.embeddings);
  std::ofstream log(c.out / "pretrain_log.jsonl", std::ios::binary);
  for (std::size_t e = 0; e < p.loss_trace.size(); ++e) log << json{{"epoch", e}, {"loss", p.loss_trace[e]}}.dump() << '\n';
  json j = graph_counts(g);
  j["final_loss"] = p.loss_trace.empty() ? json(nullptr) : json(p.loss_trace.back());
  return j;
}

json cmd_train(const ExperimentConfig& c, StageTracker& st) {
  PreparedTables t = prepare_tables(c, st);
  HeteroGraph g = prepare_graph(c, t, st);
  st.stage = "export";
  export_graph(g, c.out / "graph");
  if (!t.ingest_report.empty()) write_text(c.out / "ingest_report.json", dump(ingest_json(t.ingest_report)));
  return train_into(c, t, g, c.out, st);
}

json cmd_eval(const ExperimentConfig& c, const fs::path& checkpoint, const fs::path& graph_dir, StageTracker& st) {
  PreparedTables t = prepare_tables(c, st);
  st.stage = "load";
  HeteroGraph g = import_graph(graph_dir);
  TensorMap ckpt = load_checkpoint(checkpoint);
  TrainData data = make_train_data(c, t, std::move(g));
  Model model;
  const double tau = model_from_checkpoint(c, ckpt, model);
  st.stage = "evaluate";
  json j;
  j["fold"] = c.test_fold();
  j["temperature"] = tau;
  j["test"] = to_json(evaluate(model, data, data.split.test, tau));
  j["valid"] = to_json(evaluate(model, data, data.split.valid, tau));
  write_text(c.out / "eval_metrics.json", dump(j));
  return j;
}

json cmd_cv(const ExperimentConfig& c, std::size_t workers, StageTracker& st) {
  PreparedTables t = prepare_tables(c, st);
  HeteroGraph g = prepare_graph(c, t, st);
  const int folds = c.n_folds();
  std::vector<json> results(static_cast<std::size_t>(folds));
  std::vector<std::string> errors(static_cast<std::size_t>(folds));
  std::vector<int> error_codes(static_cast<std::size_t>(folds), 0);
  std::mutex mu;
  int next = 0;
  auto worker = [&]() {
    for (;;) {
      int k;
      {
        std::lock_guard<std::mutex> lock(mu);
        if (next >= folds) return;
        k = next++;
      }
      ExperimentConfig ck = c;
      ck.data.test_fold = k;
      StageTracker fst;
      try {
        results[static_cast<std::size_t>(k)] = train_into(ck, t, g, c.out / ("fold" + std::to_string(k)), fst);
      } catch (const std::exception& e) {
        errors[static_cast<std::size_t>(k)] = "fold " + std::to_string(k) + " (" + fst.stage + "): " + e.what();
        error_codes[static_cast<std::size_t>(k)] = exit_code_for(e);
      }
    }
  };
  st.stage = "train";
  const std::size_t n = std::max<std::size_t>(1, std::min<std::size_t>(workers, static_cast<std::size_t>(folds)));
  if (n == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t i = 0; i < n; ++i) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
  }
  for (int k = 0; k < folds; ++k) {
    const std::string& e = errors[static_cast<std::size_t>(k)];
    if (e.empty()) continue;
    if (error_codes[static_cast<std::size_t>(k)] == 1) throw ConfigError(e);
    if (error_codes[static_cast<std::size_t>(k)] == 2) throw DataError(e);
    throw Error(e);
  }
  st.stage = "summarize";
  std::vector<std::vector<TaskMetrics>> per_fold;
  std::string csv = metrics_csv_header() + "\n";
  for (int k = 0; k < folds; ++k) {
    std::vector<TaskMetrics> fm;
    for (const json& tj : results[static_cast<std::size_t>(k)]["test"]) {
      TaskMetrics m;
      m.task = *parse_task(tj["task"].get<std::string>());
      m.samples = tj["samples"].get<std::size_t>();
      for (const auto& [name, v] : tj["metrics"].items()) m.metrics[name] = {v.get<double>(), ""};
      if (tj.contains("undefined")) {
        for (const auto& [name, v] : tj["undefined"].items()) m.metrics[name] = Metric::undefined(v.get<std::string>());
      }
      csv += metrics_csv_row(k, m) + "\n";
      fm.push_back(std::move(m));
    }
    per_fold.push_back(std::move(fm));
  }
  json summary;
  summary["folds"] = folds;
  summary["test"] = summarize_folds(per_fold);
  summary["per_fold"] = results;
  write_text(c.out / "summary.json", dump(summary));
  write_text(c.out / "metrics.csv", csv);
  return summary;
}

json cmd_explain(const ExperimentConfig& c, const fs::path& checkpoint, const fs::path& graph_dir,
                 const std::string& visit_id, std::size_t k, const std::optional<fs::path>& attention_out,
                 StageTracker& st) {
  st.stage = "load";
  HeteroGraph g = import_graph(graph_dir);
  TensorMap ckpt = load_checkpoint(checkpoint);
  Model model;
  const double tau = model_from_checkpoint(c, ckpt, model);
  const auto index = g.index_of(NodeType::Visit);
  auto it = index.find(visit_id);
  if (it == index.end()) throw DataError("explain: unknown visit '" + visit_id + "'");
  st.stage = "explain";
  std::vector<AttendedEdge> top = explain_visit(model, g, it->second, k, tau);
  json j;
  j["visit"] = visit_id;
  j["temperature"] = tau;
  j["edges"] = json::array();
  for (const AttendedEdge& e : top) j["edges"].push_back({{"diagnosis", e.diagnosis}, {"score", e.score}});
  if (attention_out) {
    const int dv = static_cast<int>(EdgeType::DiagnosisVisit);
    const Tensor att = final_attention(model, g, tau)[dv];
    const EdgeList& e = g.edges[dv];
    const std::size_t heads = model.encoder.n_heads;
    std::ostringstream os;
    os.precision(17);
    os << "diagnosis";
    for (std::size_t h = 0; h < heads; ++h) os << ",head" << h;
    os << '\n';
    for (std::size_t i = 0; i < e.size(); ++i) {
      if (e.dst[i] != it->second) continue;
      os << g.ids(NodeType::Diagnosis)[static_cast<std::size_t>(e.src[i])];
      for (std::size_t h = 0; h < heads; ++h) os << ',' << att[i * heads + h];
      os << '\n';
    }
    write_text(*attention_out, os.str());
  }
  return j;
}

json cmd_export_embeddings(const ExperimentConfig& c, const fs::path& checkpoint, const fs::path& graph_dir,
                           const fs::path& csv_out, StageTracker& st) {
  st.stage = "load";
  HeteroGraph g = import_graph(graph_dir);
  TensorMap ckpt = load_checkpoint(checkpoint);
  Model model;
  const double tau = model_from_checkpoint(c, ckpt, model);
  st.stage = "embed";
  NodeFeatures emb = embed_nodes(model, g, tau);
  std::ostringstream os;
  os.precision(17);
  const std::size_t d = model.encoder.dim;
  os << "node_type,node_index,external_id";
  for (std::size_t i = 0; i < d; ++i) os << ",e" << i;
  os << '\n';
  std::size_t rows = 0;
  for (int t = 0; t < kNodeTypes; ++t) {
    for (std::size_t n = 0; n < g.node_ids[t].size(); ++n) {
      os << node_type_name(node_type_at(t)) << ',' << n << ',' << g.node_ids[t][n];
      for (std::size_t i = 0; i < d; ++i) os << ',' << emb[t][n * d + i];
      os << '\n';
      ++rows;
    }
  }
  st.stage = "write";
  write_text(csv_out, os.str());
  return {{"rows", rows}, {"columns", d + 3}};
}

json cmd_sweep(const ExperimentConfig& c, StageTracker& st) {
  if (c.sweep.is_null()) throw ConfigError("sweep: the config has no sweep section");
  const std::string param = c.sweep["param"].get<std::string>();
  PreparedTables t = prepare_tables(c, st);
  // the graph depends on the encoder width and the task list, so it is rebuilt per value when those change
  const bool rebuild = param == "dim" || param == "tasks";
  std::optional<HeteroGraph> shared;
  if (!rebuild) shared = prepare_graph(c, t, st);
  json summary = json::array();
  for (const json& v : c.sweep["values"]) {
    ExperimentConfig cv = with_sweep_value(c, param, v);
    cv.sweep = nullptr;
    const std::string label = v.is_string() ? v.get<std::string>() : v.dump();
    HeteroGraph g = rebuild ? prepare_graph(cv, t, st) : *shared;
    json m = train_into(cv, t, g, c.out / "sweep" / (param + "=" + label), st);
    summary.push_back({{"param", param}, {"value", v}, {"test_mean_auroc", m["test_mean_auroc"]},
                       {"valid_mean_auroc", m["valid_mean_auroc"]}, {"test", m["test"]}});
  }
  write_text(c.out / "sweep_summary.json", dump(summary));
  return summary;
}

int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const ConfigError*>(&e)) return 1;
  if (dynamic_cast<const DataError*>(&e)) return 2;
  return 3;
}

}  // namespace multehr
