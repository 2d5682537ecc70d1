#include "multehr/heads.hpp"

#include "multehr/errors.hpp"

namespace multehr {

namespace {

constexpr std::string_view kTaskNames[] = {"readm", "mort", "drug", "los"};

}  // namespace

std::string_view task_name(TaskId id) { return kTaskNames[static_cast<int>(id)]; }

std::optional<TaskId> parse_task(std::string_view name) {
  for (int i = 0; i < 4; ++i) {
    if (kTaskNames[i] == name) return static_cast<TaskId>(i);
  }
  return std::nullopt;
}

TaskKind task_kind(TaskId id) {
  switch (id) {
    case TaskId::Drug:
      return TaskKind::Multilabel;
    case TaskId::LengthOfStay:
      return TaskKind::Multiclass;
    default:
      return TaskKind::Binary;
  }
}

Tensor Readout::operator()(const Tensor& x, double dropout_p, Rng& rng, bool training) const {
  return output(dropout(gelu(hidden(x)), dropout_p, rng, training));
}

TaskHead make_task_head(ParamSet& params, const TaskSpec& spec, std::size_t dim, Rng& rng) {
  if (spec.classes == 0) throw ConfigError("task head: zero output classes");
  if (!(spec.lambda >= 0.0)) throw ConfigError("task head: lambda must be >= 0");
  const std::string name = "head." + std::string(task_name(spec.id));
  TaskHead h;
  h.spec = spec;
  h.causal = {make_linear(params, name + ".causal.hidden", dim, dim, true, rng),
              make_linear(params, name + ".causal.output", dim, spec.classes, true, rng)};
  h.trivial = {make_linear(params, name + ".trivial.hidden", dim, dim, true, rng),
               make_linear(params, name + ".trivial.output", dim, spec.classes, true, rng)};
  return h;
}

Tensor bce_loss(const Tensor& logits, const Tensor& labels) {
  if (logits.shape() != labels.shape() || logits.rank() != 2) {
    throw ShapeError("bce_loss: logits " + shape_str(logits.shape()) + " vs labels " + shape_str(labels.shape()));
  }
  if (logits.size(0) == 0) throw ContractError("bce_loss: no nodes");
  for (double y : labels.data()) {
    if (y != 0.0 && y != 1.0) throw ContractError("bce_loss: label " + std::to_string(y) + " is not 0 or 1");
  }
  // y log s(z) + (1 - y) log s(-z)
  Tensor pos = mul(labels, log_sigmoid(logits));
  Tensor neg = mul(add_scalar(scale(labels, -1.0), 1.0), log_sigmoid(scale(logits, -1.0)));
  return scale(sum(add(pos, neg)), -1.0 / static_cast<double>(logits.numel()));
}

Tensor ce_loss(const Tensor& logits, const std::vector<std::int32_t>& labels) {
  if (logits.rank() != 2 || logits.size(0) != labels.size()) {
    throw ShapeError("ce_loss: logits " + shape_str(logits.shape()) + " for " + std::to_string(labels.size()) + " labels");
  }
  if (labels.empty()) throw ContractError("ce_loss: no nodes");
  const std::size_t n = labels.size(), c = logits.size(1);
  std::vector<std::int32_t> pick(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= c) {
      throw ContractError("ce_loss: class " + std::to_string(labels[i]) + " outside [0, " + std::to_string(c) + ")");
    }
    pick[i] = static_cast<std::int32_t>(i * c) + labels[i];
  }
  Tensor logp = reshape(log_softmax(logits), {n * c, 1});
  return scale(sum(gather_rows(logp, pick)), -1.0 / static_cast<double>(n));
}

TaskLoss task_loss(const TaskSpec& spec, const Tensor& causal_logits, const Tensor& trivial_logits,
                   const TaskTargets& targets, Rng& rng, NoiseTarget noise) {
  TaskLoss out;
  const bool multilabel = task_kind(spec.id) == TaskKind::Multilabel;
  out.classification = multilabel ? bce_loss(causal_logits, targets.multilabel) : ce_loss(causal_logits, targets.classes);
  out.total = out.classification;
  if (spec.lambda > 0.0) {
    out.uniform = multilabel ? uniform_loss_multilabel(trivial_logits, rng, noise) : uniform_loss(trivial_logits, rng, noise);
    out.total = add(out.classification, scale(out.uniform, spec.lambda));
  }
  return out;
}

Tensor multitask_aggregate(const std::vector<Tensor>& losses, double beta, bool use_variance) {
  if (losses.empty()) throw ContractError("multitask_aggregate: no task losses");
  std::vector<Tensor> parts;
  for (const Tensor& l : losses) {
    if (l.numel() != 1) throw ShapeError("multitask_aggregate: task losses must be scalars");
    parts.push_back(reshape(l, {1}));
  }
  Tensor stacked = parts.size() == 1 ? parts[0] : concat(parts, 0);
  Tensor total = scale(mean(stacked), beta);
  return use_variance ? add(variance(stacked), total) : total;
}

}  // namespace multehr
