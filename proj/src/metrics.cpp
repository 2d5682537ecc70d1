#include "multehr/metrics.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numeric>
#include <set>
#include <sstream>

#include "multehr/errors.hpp"

namespace multehr {

namespace {

void check_binary(const std::vector<double>& scores, const std::vector<std::int32_t>& labels, const char* who) {
  if (scores.size() != labels.size()) {
    throw ShapeError(std::string(who) + ": " + std::to_string(scores.size()) + " scores for " +
                     std::to_string(labels.size()) + " labels");
  }
  for (std::int32_t y : labels) {
    if (y != 0 && y != 1) throw ContractError(std::string(who) + ": label " + std::to_string(y) + " is not 0 or 1");
  }
}

// Indices sorted by descending score; stable so equal scores keep input order.
std::vector<std::size_t> by_score_desc(const std::vector<double>& scores) {
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  return order;
}

}  // namespace

Metric auroc(const std::vector<double>& scores, const std::vector<std::int32_t>& labels) {
  check_binary(scores, labels, "auroc");
  const std::size_t n = scores.size();
  std::size_t n_pos = 0;
  for (std::int32_t y : labels) n_pos += static_cast<std::size_t>(y);
  const std::size_t n_neg = n - n_pos;
  if (n_pos == 0 || n_neg == 0) return Metric::undefined("auroc: only one class present");

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  // sum of 1-based average ranks of the positives
  double rank_sum = 0.0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    std::size_t pos_in_group = 0;
    while (j < n && scores[order[j]] == scores[order[i]]) pos_in_group += static_cast<std::size_t>(labels[order[j++]]);
    rank_sum += static_cast<double>(pos_in_group) * (static_cast<double>(i + j + 1) / 2.0);
    i = j;
  }
  const double u = rank_sum - static_cast<double>(n_pos) * static_cast<double>(n_pos + 1) / 2.0;
  return {u / (static_cast<double>(n_pos) * static_cast<double>(n_neg)), ""};
}

Metric auroc_multiclass(const Tensor& probs, const std::vector<std::int32_t>& labels) {
  if (probs.rank() != 2 || probs.size(0) != labels.size()) {
    throw ShapeError("auroc_multiclass: scores " + shape_str(probs.shape()) + " for " + std::to_string(labels.size()) +
                     " labels");
  }
  const std::size_t n = labels.size(), c = probs.size(1);
  std::vector<std::size_t> support(c, 0);
  for (std::int32_t y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= c) throw ContractError("auroc_multiclass: class out of range");
    ++support[static_cast<std::size_t>(y)];
  }
  double total = 0.0;
  std::size_t weight = 0;
  std::vector<double> col(n);
  std::vector<std::int32_t> is_c(n);
  for (std::size_t k = 0; k < c; ++k) {
    if (support[k] == 0) continue;
    if (support[k] == n) return Metric::undefined("auroc: only one class present");
    for (std::size_t i = 0; i < n; ++i) {
      col[i] = probs[i * c + k];
      is_c[i] = labels[i] == static_cast<std::int32_t>(k) ? 1 : 0;
    }
    total += static_cast<double>(support[k]) * auroc(col, is_c).value;
    weight += support[k];
  }
  if (weight == 0) return Metric::undefined("auroc: no samples");
  return {total / static_cast<double>(weight), ""};
}

Metric aupr(const std::vector<double>& scores, const std::vector<std::int32_t>& labels) {
  check_binary(scores, labels, "aupr");
  std::size_t n_pos = 0;
  for (std::int32_t y : labels) n_pos += static_cast<std::size_t>(y);
  if (n_pos == 0) return Metric::undefined("aupr: no positives");
  const std::vector<std::size_t> order = by_score_desc(scores);
  const std::size_t n = order.size();
  double ap = 0.0;
  std::size_t tp = 0, prev_tp = 0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j < n && scores[order[j]] == scores[order[i]]) tp += static_cast<std::size_t>(labels[order[j++]]);
    if (tp > prev_tp) {
      ap += (static_cast<double>(tp - prev_tp) / static_cast<double>(n_pos)) *
            (static_cast<double>(tp) / static_cast<double>(j));
    }
    prev_tp = tp;
    i = j;
  }
  return {ap, ""};
}

double accuracy(const std::vector<std::int32_t>& pred, const std::vector<std::int32_t>& truth) {
  if (pred.size() != truth.size()) throw ShapeError("accuracy: length mismatch");
  if (pred.empty()) throw ContractError("accuracy: empty input");
  std::size_t hit = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) hit += pred[i] == truth[i] ? 1 : 0;
  return static_cast<double>(hit) / static_cast<double>(pred.size());
}

double weighted_f1(const std::vector<std::int32_t>& pred, const std::vector<std::int32_t>& truth) {
  if (pred.size() != truth.size()) throw ShapeError("weighted_f1: length mismatch");
  if (pred.empty()) throw ContractError("weighted_f1: empty input");
  std::map<std::int32_t, std::array<std::size_t, 3>> counts;  // tp, predicted, support
  for (std::size_t i = 0; i < pred.size(); ++i) {
    ++counts[pred[i]][1];
    ++counts[truth[i]][2];
    if (pred[i] == truth[i]) ++counts[pred[i]][0];
  }
  double f1 = 0.0;
  for (const auto& [cls, c] : counts) {
    if (c[2] == 0 || c[0] == 0) continue;  // zero weight, or P = R = 0
    const double p = static_cast<double>(c[0]) / static_cast<double>(c[1]);
    const double r = static_cast<double>(c[0]) / static_cast<double>(c[2]);
    f1 += static_cast<double>(c[2]) * 2.0 * p * r / (p + r);
  }
  return f1 / static_cast<double>(pred.size());
}

double jaccard_multilabel(const std::vector<std::vector<std::int32_t>>& pred,
                          const std::vector<std::vector<std::int32_t>>& truth) {
  if (pred.size() != truth.size()) throw ShapeError("jaccard_multilabel: length mismatch");
  if (pred.empty()) return 1.0;
  double total = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const std::set<std::int32_t> a(pred[i].begin(), pred[i].end()), b(truth[i].begin(), truth[i].end());
    if (a.empty() && b.empty()) {
      total += 1.0;
      continue;
    }
    std::size_t inter = 0;
    for (std::int32_t x : a) inter += b.count(x);
    total += static_cast<double>(inter) / static_cast<double>(a.size() + b.size() - inter);
  }
  return total / static_cast<double>(pred.size());
}

TaskMetrics evaluate_task(const TaskSpec& spec, const Tensor& logits, const TaskTargets& targets) {
  TaskMetrics out;
  out.task = spec.id;
  if (logits.rank() != 2 || logits.size(1) != spec.classes) {
    throw ShapeError("evaluate_task(" + std::string(task_name(spec.id)) + "): logits " + shape_str(logits.shape()) +
                     " for " + std::to_string(spec.classes) + " classes");
  }
  const std::size_t n = logits.size(0), c = spec.classes;
  out.samples = n;
  switch (task_kind(spec.id)) {
    case TaskKind::Binary: {
      if (targets.classes.size() != n) throw ShapeError("evaluate_task: label count mismatch");
      std::vector<double> s(n);
      for (std::size_t i = 0; i < n; ++i) s[i] = logits[i * 2 + 1] - logits[i * 2];
      out.metrics["auroc"] = auroc(s, targets.classes);
      out.metrics["aupr"] = aupr(s, targets.classes);
      break;
    }
    case TaskKind::Multiclass: {
      if (targets.classes.size() != n) throw ShapeError("evaluate_task: label count mismatch");
      if (n == 0) break;
      std::vector<std::int32_t> pred(n);
      for (std::size_t i = 0; i < n; ++i) {
        const auto row = logits.data().subspan(i * c, c);
        pred[i] = static_cast<std::int32_t>(std::max_element(row.begin(), row.end()) - row.begin());
      }
      out.metrics["accuracy"] = {accuracy(pred, targets.classes), ""};
      out.metrics["f1"] = {weighted_f1(pred, targets.classes), ""};
      out.metrics["auroc"] = auroc_multiclass(softmax(logits.detach()), targets.classes);
      break;
    }
    case TaskKind::Multilabel: {
      if (!targets.multilabel.defined() || targets.multilabel.shape() != logits.shape()) {
        throw ShapeError("evaluate_task: multilabel targets do not match logits " + shape_str(logits.shape()));
      }
      std::vector<double> s(logits.data().begin(), logits.data().end());
      std::vector<std::int32_t> y(n * c);
      std::vector<std::vector<std::int32_t>> pred(n), truth(n);
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t k = 0; k < c; ++k) {
          y[i * c + k] = targets.multilabel[i * c + k] != 0.0 ? 1 : 0;
          if (y[i * c + k]) truth[i].push_back(static_cast<std::int32_t>(k));
          if (s[i * c + k] >= 0.0) pred[i].push_back(static_cast<std::int32_t>(k));
        }
      }
      out.metrics["auroc"] = auroc(s, y);
      out.metrics["aupr"] = aupr(s, y);
      out.metrics["jaccard"] = {jaccard_multilabel(pred, truth), ""};
      break;
    }
  }
  return out;
}

Metric mean_auroc(const std::vector<TaskMetrics>& tasks) {
  double total = 0.0;
  std::size_t k = 0;
  for (const TaskMetrics& t : tasks) {
    auto it = t.metrics.find("auroc");
    if (it == t.metrics.end() || !it->second.defined()) continue;
    total += it->second.value;
    ++k;
  }
  if (k == 0) return Metric::undefined("no task has a defined auroc");
  return {total / static_cast<double>(k), ""};
}

nlohmann::json to_json(const TaskMetrics& m) {
  nlohmann::json j;
  j["task"] = std::string(task_name(m.task));
  j["samples"] = m.samples;
  for (const auto& [name, v] : m.metrics) {
    if (v.defined()) {
      j["metrics"][name] = v.value;
    } else {
      j["undefined"][name] = v.reason;
    }
  }
  if (!j.contains("metrics")) j["metrics"] = nlohmann::json::object();
  return j;
}

nlohmann::json to_json(const std::vector<TaskMetrics>& tasks) {
  nlohmann::json j = nlohmann::json::array();
  for (const TaskMetrics& t : tasks) j.push_back(to_json(t));
  return j;
}

namespace {
constexpr const char* kCsvMetrics[] = {"accuracy", "auroc", "aupr", "f1", "jaccard"};
}

std::string metrics_csv_header() { return "fold,task,samples,accuracy,auroc,aupr,f1,jaccard"; }

std::string metrics_csv_row(int fold, const TaskMetrics& m) {
  std::ostringstream os;
  os.precision(17);
  os << fold << ',' << task_name(m.task) << ',' << m.samples;
  for (const char* name : kCsvMetrics) {
    os << ',';
    auto it = m.metrics.find(name);
    if (it != m.metrics.end() && it->second.defined()) os << it->second.value;
  }
  return os.str();
}

nlohmann::json summarize_folds(const std::vector<std::vector<TaskMetrics>>& folds) {
  std::map<std::string, std::map<std::string, std::vector<double>>> values;
  for (const auto& fold : folds) {
    for (const TaskMetrics& t : fold) {
      for (const auto& [name, v] : t.metrics) {
        if (v.defined()) values[std::string(task_name(t.task))][name].push_back(v.value);
      }
    }
  }
  nlohmann::json out = nlohmann::json::object();
  for (const auto& [task, metrics] : values) {
    for (const auto& [name, xs] : metrics) {
      const double n = static_cast<double>(xs.size());
      const double mu = std::accumulate(xs.begin(), xs.end(), 0.0) / n;
      double ss = 0.0;
      for (double x : xs) ss += (x - mu) * (x - mu);
      out[task][name] = {{"mean", mu}, {"std", xs.size() > 1 ? std::sqrt(ss / (n - 1.0)) : 0.0}, {"folds", xs.size()}};
    }
  }
  return out;
}

}  // namespace multehr
