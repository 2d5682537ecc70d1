#pragma once

#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "multehr/causal.hpp"
#include "multehr/nn.hpp"

namespace multehr {

// Fixed processing order for reproducible tapes.
enum class TaskId { Readmission, Mortality, Drug, LengthOfStay };
inline constexpr TaskId kTaskOrder[] = {TaskId::Readmission, TaskId::Mortality, TaskId::Drug, TaskId::LengthOfStay};

enum class TaskKind { Binary, Multiclass, Multilabel };

std::string_view task_name(TaskId id);  // "readm", "mort", "drug", "los"
std::optional<TaskId> parse_task(std::string_view name);
TaskKind task_kind(TaskId id);

struct TaskSpec {
  TaskId id = TaskId::Readmission;
  std::size_t classes = 2;  // logits per node: 2 for binary, 10 for LOS, vocabulary size for DRUG
  double lambda = 1.0;
};

// Two affine layers (dim -> dim -> classes) with GELU and dropout between.
struct Readout {
  Linear hidden;
  Linear output;

  Tensor operator()(const Tensor& x, double dropout_p, Rng& rng, bool training) const;
};

struct TaskHead {
  TaskSpec spec;
  Readout causal;
  Readout trivial;
};

TaskHead make_task_head(ParamSet& params, const TaskSpec& spec, std::size_t dim, Rng& rng);

// Multilabel targets [N, L] in {0, 1}; mean over all N * L entries, so the
// loss sits on the same scale as the single-label tasks in the aggregate.
Tensor bce_loss(const Tensor& logits, const Tensor& labels);

// Mean over nodes of -log softmax(z)[y].
Tensor ce_loss(const Tensor& logits, const std::vector<std::int32_t>& labels);

struct TaskTargets {
  std::vector<std::int32_t> classes;  // binary / multiclass
  Tensor multilabel;                  // [N, L] for DRUG
};

struct TaskLoss {
  Tensor classification;
  Tensor uniform;  // undefined when lambda == 0
  Tensor total;
};

// Classification loss on the causal logits plus lambda times the uniform loss
// on the trivial logits.
TaskLoss task_loss(const TaskSpec& spec, const Tensor& causal_logits, const Tensor& trivial_logits,
                   const TaskTargets& targets, Rng& rng, NoiseTarget noise = NoiseTarget::SampledUniform);

// Var(L) + beta * mean(L) with population variance. With `use_variance`
// false the variance term is dropped.
Tensor multitask_aggregate(const std::vector<Tensor>& losses, double beta, bool use_variance = true);

}  // namespace multehr
