#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"
#include "multehr/heads.hpp"

namespace multehr {

// A metric value, or the reason it is undefined (single-class input, no
// positives). Undefined metrics are reported as absent, never as 0.
struct Metric {
  double value = 0.0;
  std::string reason;

  bool defined() const { return reason.empty(); }
  static Metric undefined(std::string why) { return {0.0, std::move(why)}; }
};

// Mann-Whitney statistic with half credit for ties, via average ranks.
Metric auroc(const std::vector<double>& scores, const std::vector<std::int32_t>& labels);

// One-vs-rest AUROC per class weighted by class support. probs is [N, C].
Metric auroc_multiclass(const Tensor& probs, const std::vector<std::int32_t>& labels);

// Non-interpolated average precision. Tied scores form one threshold.
Metric aupr(const std::vector<double>& scores, const std::vector<std::int32_t>& labels);

double accuracy(const std::vector<std::int32_t>& pred, const std::vector<std::int32_t>& truth);

// Per-class F1 (0 when precision + recall = 0) weighted by true support.
double weighted_f1(const std::vector<std::int32_t>& pred, const std::vector<std::int32_t>& truth);

// Sample-averaged |P ∩ T| / |P ∪ T|; 1 for two empty sets. Sets are sorted
// index lists.
double jaccard_multilabel(const std::vector<std::vector<std::int32_t>>& pred,
                          const std::vector<std::vector<std::int32_t>>& truth);

struct TaskMetrics {
  TaskId task = TaskId::Readmission;
  std::size_t samples = 0;
  std::map<std::string, Metric> metrics;  // "accuracy", "auroc", "aupr", "f1", "jaccard"
};

// Binary tasks report {auroc, aupr} with score z1 - z0. LOS reports
// {accuracy, auroc, f1}. DRUG reports micro-averaged {auroc, aupr} over all
// (visit, drug) pairs plus jaccard with sigmoid(z) >= 0.5 as the decision.
TaskMetrics evaluate_task(const TaskSpec& spec, const Tensor& logits, const TaskTargets& targets);

// Mean AUROC over the tasks where it is defined; nullopt-like undefined
// Metric when none is.
Metric mean_auroc(const std::vector<TaskMetrics>& tasks);

nlohmann::json to_json(const TaskMetrics& m);
nlohmann::json to_json(const std::vector<TaskMetrics>& tasks);

// fold,task,samples,accuracy,auroc,aupr,f1,jaccard; undefined cells empty.
std::string metrics_csv_header();
std::string metrics_csv_row(int fold, const TaskMetrics& m);

// Mean and sample standard deviation across folds per task and metric,
// counting only folds where the metric is defined.
nlohmann::json summarize_folds(const std::vector<std::vector<TaskMetrics>>& folds);

}  // namespace multehr
