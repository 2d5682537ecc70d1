#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "multehr/checkpoint.hpp"
#include "multehr/ehr_data.hpp"
#include "multehr/heads.hpp"
#include "multehr/metrics.hpp"
#include "multehr/optim.hpp"

namespace multehr {

// tau = max(floor, exp(-r p)). `literal` uses exp(+r p) instead, which never
// decays; kept only for comparison runs.
double anneal_temperature(std::size_t epoch, double rate, double floor, bool literal = false);

// Majority class subsampled without replacement to the minority count. A
// batch with one class comes back unchanged and `single_class` is set.
std::vector<std::int32_t> balance_mortality(const std::vector<std::int32_t>& ids, const std::vector<int>& labels,
                                            Rng& rng, bool* single_class = nullptr);

// Task labels re-indexed by the graph's visit nodes.
struct GraphLabels {
  std::vector<int> mortality;
  std::vector<std::optional<int>> readmission;
  std::vector<std::optional<int>> los;
  std::vector<std::vector<int>> drugs;
  std::size_t n_drugs = 0;
};

GraphLabels align_labels(const EhrTables& tables, const TaskLabels& labels, const HeteroGraph& g);

// Visit indices of the graph split by patient fold: test = test_fold,
// validation = (test_fold + 1) mod folds, train = the rest.
struct VisitSplit {
  std::vector<std::int32_t> train, valid, test;
};

VisitSplit split_visits(const EhrTables& tables, const HeteroGraph& g, const std::vector<int>& patient_fold,
                        int test_fold);

struct TrainData {
  HeteroGraph graph;  // carries the pretrained input features
  GraphLabels labels;
  VisitSplit split;
};

struct TrainConfig {
  std::size_t max_epochs = 1000;
  std::size_t patience = 20;
  AdamConfig adam;  // 5e-5 / 1e-5 by default
  std::size_t n_visit = 2000;
  double anneal_rate = 0.01;
  double temperature_floor = 0.05;
  bool literal_anneal = false;
  double beta = 1.0;
  bool task_aggregation = true;  // false: beta * mean only
  bool causal = true;            // false: one plain encoder pass, no trivial branch
  bool stop_trivial_grad = true;
  NoiseTarget noise = NoiseTarget::SampledUniform;
  AugmentOptions augment;
  bool downsample_mortality = true;
  // Test hook: leaves the DR loss visits' prescription edges in the DR view so
  // the leakage guard can be shown to fire.
  bool leaky_drug_view = false;
  std::uint64_t seed = 0;

  void validate() const;  // throws ConfigError
};

struct Model {
  EncoderConfig encoder;
  std::vector<TaskSpec> tasks;  // in kTaskOrder
  bool causal = true;
  ParamSet params;
  std::vector<HgtLayerParams> layers;
  std::optional<MaskParams> mask;
  std::vector<TaskHead> heads;  // parallel to tasks
};

// Tasks are reordered to kTaskOrder. The mask head exists only when `causal`.
Model make_model(const EncoderConfig& encoder, std::vector<TaskSpec> tasks, bool causal, bool include_lab_events,
                 Rng& rng);

// VisitPrescription edges (either direction) touching the given visits.
std::size_t count_drug_leaks(const HeteroGraph& view, const std::vector<std::int32_t>& loss_visits);

struct StepReport {
  std::vector<std::optional<double>> task_loss;  // parallel to Model::tasks; nullopt = skipped
  std::vector<std::string> events;
  double aggregate = 0.0;
  std::size_t active_tasks = 0;
  // DR input view audit: loss-set size and the VisitPrescription edges left
  // on it (0 whenever the step returns).
  std::size_t drug_loss_visits = 0;
  std::size_t drug_view_leaks = 0;
};

// One optimization step on a sampled, augmented training subgraph. Throws
// NumericError with a dump of the step when the loss is not finite.
StepReport train_step(Model& model, AdamState& adam, const TrainData& data, const TrainConfig& cfg,
                      double temperature, Rng& rng);

// Causal-branch predictions for the given visits on the graph they induce,
// without dropout or augmentation.
std::vector<TaskMetrics> evaluate(const Model& model, const TrainData& data, const std::vector<std::int32_t>& visits,
                                  double temperature);

struct EpochReport {
  std::size_t epoch = 0;
  double temperature = 1.0;
  StepReport step;
  std::vector<TaskMetrics> valid;
  double valid_mean_auroc = 0.0;  // NaN when undefined
  bool best = false;

  nlohmann::json to_json(const Model& model) const;
};

struct TrainResult {
  std::vector<EpochReport> epochs;
  std::size_t best_epoch = 0;
  double best_valid_auroc = 0.0;
  double best_temperature = 1.0;
  TensorMap best_checkpoint;  // parameters plus "meta.temperature"
};

// Runs epochs until max_epochs or `patience` epochs without a better mean
// validation AUROC. The model is left holding the best parameters.
TrainResult train_run(Model& model, const TrainData& data, const TrainConfig& cfg,
                      const std::function<void(const EpochReport&)>& on_epoch = {});

TensorMap model_checkpoint(const Model& model, double temperature);
// Loads parameters; returns the stored temperature.
double load_model_checkpoint(Model& model, const TensorMap& checkpoint);

// Final-layer visit-to-diagnosis attention for one visit, summed over heads
// and ranked. Uses the causal branch on the whole graph in eval mode.
struct AttendedEdge {
  std::string diagnosis;
  double score = 0.0;
};
std::vector<AttendedEdge> explain_visit(const Model& model, const HeteroGraph& g, std::int32_t visit, std::size_t k,
                                        double temperature);

// Final-layer attention per edge type ([m, heads]), causal branch, eval mode.
std::array<Tensor, kEdgeTypes> final_attention(const Model& model, const HeteroGraph& g, double temperature);

// Final-layer embeddings of every node of `g`, causal branch, eval mode.
NodeFeatures embed_nodes(const Model& model, const HeteroGraph& g, double temperature);

}  // namespace multehr
