#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "multehr/trainer.hpp"
#include "multehr/transe.hpp"

namespace multehr {

struct DataConfig {
  std::optional<std::filesystem::path> csv_dir;  // exactly one of csv_dir / synth
  std::optional<SynthConfig> synth;
  int readm_window_days = 15;
  bool include_lab_events = false;
  // Unset: taken from the synthetic config when there is one, else 5 / 0 / seed.
  std::optional<int> n_folds;
  std::optional<int> test_fold;
  std::optional<std::uint64_t> split_seed;
};

struct ExperimentConfig {
  DataConfig data;
  bool pretrain_enabled = true;
  PretrainConfig pretrain;
  EncoderConfig encoder;
  TrainConfig train;
  std::vector<TaskId> tasks{TaskId::Readmission, TaskId::Mortality, TaskId::Drug, TaskId::LengthOfStay};
  std::map<TaskId, double> lambda;  // missing task -> 1
  std::uint64_t seed = 0;
  bool deterministic = false;
  std::filesystem::path out = "multehr_out";
  nlohmann::json sweep;  // {"param": name, "values": [...]} or null

  int n_folds() const;
  int test_fold() const;
  std::uint64_t split_seed() const;
};

// Schema-checked; unknown keys and wrong types throw ConfigError naming the
// key path. Defaults fill anything absent.
ExperimentConfig parse_config(const nlohmann::json& j);
ExperimentConfig load_config(const std::filesystem::path& path);
// Fully resolved config; parse_config(config_to_json(c)) reproduces c.
nlohmann::json config_to_json(const ExperimentConfig& c);

// Tracks the pipeline stage for error reports.
struct StageTracker {
  std::string stage = "config";
};

struct PreparedTables {
  EhrTables tables;
  TaskLabels labels;
  std::vector<int> patient_fold;
  std::vector<FileReport> ingest_report;  // empty for synthetic data
};

PreparedTables prepare_tables(const ExperimentConfig& c, StageTracker& st);

struct PretrainOutput {
  TensorMap embeddings;
  std::vector<double> loss_trace;
};

// build_graph at the encoder width, then TransE features (or random unit rows
// when pretraining is disabled). VisitPrescription triples are left out of
// pretraining whenever DRUG is a task.
HeteroGraph prepare_graph(const ExperimentConfig& c, const PreparedTables& t, StageTracker& st,
                          PretrainOutput* pretrain = nullptr);

TrainData make_train_data(const ExperimentConfig& c, const PreparedTables& t, HeteroGraph g);

std::vector<TaskSpec> task_specs(const ExperimentConfig& c, std::size_t n_drugs);
TrainConfig resolved_train_config(const ExperimentConfig& c);

// Model shaped by the config, with the DRUG width and the causal toggle read
// from the checkpoint's tensors, and the checkpoint loaded. Returns tau.
double model_from_checkpoint(const ExperimentConfig& c, const TensorMap& checkpoint, Model& out);

// Command bodies. Each writes under c.out and returns a JSON summary.
nlohmann::json cmd_synth(const ExperimentConfig& c, StageTracker& st);
nlohmann::json cmd_build_graph(const ExperimentConfig& c, StageTracker& st);
nlohmann::json cmd_pretrain(const ExperimentConfig& c, StageTracker& st);
// out/: config.json, train_log.jsonl, model.ckpt, metrics.json, metrics.csv, graph/
nlohmann::json cmd_train(const ExperimentConfig& c, StageTracker& st);
nlohmann::json cmd_eval(const ExperimentConfig& c, const std::filesystem::path& checkpoint,
                        const std::filesystem::path& graph_dir, StageTracker& st);
// One train run per fold in out/fold<k>/, then summary.json and metrics.csv.
nlohmann::json cmd_cv(const ExperimentConfig& c, std::size_t workers, StageTracker& st);
nlohmann::json cmd_explain(const ExperimentConfig& c, const std::filesystem::path& checkpoint,
                           const std::filesystem::path& graph_dir, const std::string& visit_id, std::size_t k,
                           const std::optional<std::filesystem::path>& attention_out, StageTracker& st);
// CSV rows: node_type,node_index,external_id,e0..e{d-1}. node_index is the
// row within the type, matching the exported graph.
nlohmann::json cmd_export_embeddings(const ExperimentConfig& c, const std::filesystem::path& checkpoint,
                                     const std::filesystem::path& graph_dir, const std::filesystem::path& csv_out,
                                     StageTracker& st);
// Sweep params: lambda, beta, dim, n_heads, n_layers, n_visit, ablation
// ("both", "causal", "agg", "none"), tasks (strings like "RMDL").
nlohmann::json cmd_sweep(const ExperimentConfig& c, StageTracker& st);

// "RMDL" style letters -> tasks; ConfigError on anything else.
std::vector<TaskId> parse_task_letters(const std::string& letters);

// Apply a sweep value to a copy of the config.
ExperimentConfig with_sweep_value(const ExperimentConfig& c, const std::string& param, const nlohmann::json& value);

// Exit code for an exception: ConfigError 1, DataError 2, anything else 3.
int exit_code_for(const std::exception& e);

}  // namespace multehr
