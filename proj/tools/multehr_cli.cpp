#include <cstdlib>
#include <fstream>
#include <iostream>

#include "CLI11.hpp"
#include "multehr/errors.hpp"
#include "multehr/pipeline.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace multehr;

namespace {

struct Globals {
  std::string config;
  std::optional<std::uint64_t> seed;
  bool deterministic = false;
  std::string out;
};

struct TrainFlags {
  std::string tasks;
  bool no_causal = false;
  bool no_task_agg = false;
  std::optional<double> lambda;
  std::optional<std::size_t> max_epochs;
  std::optional<int> test_fold;
};

ExperimentConfig resolve(const Globals& g, const TrainFlags& f) {
  json j = json::object();
  if (!g.config.empty()) {
    std::ifstream is(g.config);
    if (!is) throw ConfigError("cannot read config file " + g.config);
    try {
      j = json::parse(is);
    } catch (const json::exception& e) {
      throw ConfigError("config " + g.config + ": " + e.what());
    }
  }
  // flags override file values
  if (g.seed) {
    j["seed"] = *g.seed;
    if (j.contains("data") && j["data"].contains("synth") && !j["data"]["synth"].contains("seed")) {
      j["data"]["synth"]["seed"] = *g.seed;
    }
  }
  if (g.deterministic) j["deterministic"] = true;
  if (!g.out.empty()) j["out"] = g.out;
  if (!f.tasks.empty()) j["tasks"] = f.tasks;
  if (f.no_causal) j["ablation"]["causal"] = false;
  if (f.no_task_agg) j["ablation"]["task_aggregation"] = false;
  if (f.lambda) j["lambda"] = *f.lambda;
  if (f.max_epochs) j["train"]["max_epochs"] = *f.max_epochs;
  if (f.test_fold) j["data"]["test_fold"] = *f.test_fold;
  return parse_config(j);
}

std::size_t worker_count(bool deterministic) {
  if (deterministic) return 1;
  const char* env = std::getenv("MULTEHR_THREADS");
  if (!env) return 1;
  char* end = nullptr;
  const long n = std::strtol(env, &end, 10);
  if (end == env || *end != '\0' || n < 1) throw ConfigError("MULTEHR_THREADS must be a positive integer");
  return static_cast<std::size_t>(n);
}

void write_error(const fs::path& out, const std::string& stage, const std::exception& e, int code) {
  try {
    fs::create_directories(out);
    std::ofstream os(out / "error.json");
    os << json{{"stage", stage}, {"message", e.what()}, {"exit_code", code}}.dump(2) << '\n';
  } catch (...) {
    // the original error matters more
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multi-task heterogeneous graph learning on EHR tables"};
  app.require_subcommand(1);
  Globals g;
  app.add_option("--config", g.config, "JSON experiment config")->check(CLI::ExistingFile);
  app.add_option("--seed", g.seed, "Seed for data, initialization and training");
  app.add_flag("--deterministic", g.deterministic, "Single thread, bit-reproducible outputs");
  app.add_option("--out", g.out, "Output directory");

  TrainFlags tf;
  auto add_train_flags = [&](CLI::App* sub) {
    sub->add_option("--tasks", tf.tasks, "Task letters, e.g. RMDL or R");
    sub->add_flag("--no-causal", tf.no_causal, "Disable the causal disentanglement branch");
    sub->add_flag("--no-task-agg", tf.no_task_agg, "Replace the variance aggregate by a plain mean");
    sub->add_option("--lambda", tf.lambda, "Uniform-loss weight for every task");
    sub->add_option("--max-epochs", tf.max_epochs, "Epoch cap");
    sub->add_option("--test-fold", tf.test_fold, "Held-out fold");
  };

  auto* synth = app.add_subcommand("synth", "Write a synthetic EHR dataset as CSV");
  auto* build = app.add_subcommand("build-graph", "Ingest tables and export the heterogeneous graph");
  auto* pretrain = app.add_subcommand("pretrain", "Build the graph and learn TransE input features");
  auto* train = app.add_subcommand("train", "Full pipeline: data, graph, pretraining, training, test metrics");
  add_train_flags(train);
  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint on the configured split");
  auto* cv = app.add_subcommand("cv", "Train once per fold and summarize");
  add_train_flags(cv);
  auto* explain = app.add_subcommand("explain", "Top attended diagnoses of a visit");
  auto* exporter = app.add_subcommand("export-embeddings", "Write final node embeddings as CSV");
  auto* sweep = app.add_subcommand("sweep", "Train once per value of the config's sweep section");

  std::string checkpoint, graph_dir, visit, attention_out, csv_out;
  std::size_t k = 3;
  for (auto* sub : {eval, explain, exporter}) {
    sub->add_option("--checkpoint", checkpoint, "Model checkpoint")->required();
    sub->add_option("--graph", graph_dir, "Exported graph directory")->required();
  }
  explain->add_option("--visit", visit, "Visit id")->required();
  explain->add_option("-k", k, "Number of edges");
  explain->add_option("--attention-out", attention_out, "Also write the visit's attention rows as CSV");
  exporter->add_option("--csv", csv_out, "Output CSV (default <out>/embeddings.csv)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 1;
  }

  StageTracker st;
  fs::path out = g.out.empty() ? fs::path("multehr_out") : fs::path(g.out);
  try {
    ExperimentConfig c = resolve(g, tf);
    out = c.out;
    json result;
    if (*synth) result = cmd_synth(c, st);
    else if (*build) result = cmd_build_graph(c, st);
    else if (*pretrain) result = cmd_pretrain(c, st);
    else if (*train) result = cmd_train(c, st);
    else if (*eval) result = cmd_eval(c, checkpoint, graph_dir, st);
    else if (*cv) result = cmd_cv(c, worker_count(c.deterministic), st);
    else if (*explain) {
      std::optional<fs::path> att;
      if (!attention_out.empty()) att = attention_out;
      result = cmd_explain(c, checkpoint, graph_dir, visit, k, att, st);
    } else if (*exporter) {
      result = cmd_export_embeddings(c, checkpoint, graph_dir, csv_out.empty() ? c.out / "embeddings.csv" : fs::path(csv_out), st);
    } else if (*sweep) {
      result = cmd_sweep(c, st);
    }
    std::cout << result.dump(2) << '\n';
    return 0;
  } catch (const std::exception& e) {
    const int code = exit_code_for(e);
    std::cerr << "error [" << st.stage << "]: " << e.what() << '\n';
    write_error(out, st.stage, e, code);
    return code;
  }
}
