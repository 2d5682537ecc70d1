#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include "doctest.h"
#include "multehr/errors.hpp"
#include "toy_pipeline.hpp"

using namespace multehr;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  fs::path p = fs::temp_directory_path() / ("multehr_pipeline_" + name);
  fs::remove_all(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::ostringstream os;
  os << is.rdbuf();
  return os.str();
}

std::map<std::string, std::string> tree(const fs::path& dir) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (e.is_regular_file()) out[fs::relative(e.path(), dir).string()] = slurp(e.path());
  }
  return out;
}

std::vector<std::vector<std::string>> read_csv(const fs::path& p) {
  std::vector<std::vector<std::string>> rows;
  std::istringstream is(slurp(p));
  std::string line;
  while (std::getline(is, line)) {
    std::vector<std::string> cells;
    std::stringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) cells.push_back(cell);
    rows.push_back(cells);
  }
  return rows;
}

int run_cli(const std::string& args) {
  const std::string cmd = std::string(MULTEHR_CLI) + " " + args + " > /dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

ExperimentConfig trained_config(const fs::path& out) {
  ExperimentConfig c = toy::small_config(21);
  c.out = out;
  c.deterministic = true;
  c.train.max_epochs = 3;
  return c;
}

}  // namespace

TEST_CASE("config schema") {
  CHECK_THROWS_AS(parse_config(json{{"sedd", 1}}), ConfigError);
  CHECK_THROWS_AS(parse_config(json{{"train", {{"learning_rate", "fast"}}}}), ConfigError);
  CHECK_THROWS_AS(parse_config(json{{"train", {{"augment", {{"edge_drop_p", 0.1}, {"bogus", 1}}}}}}), ConfigError);
  CHECK_THROWS_AS(parse_config(json{{"tasks", "RX"}}), ConfigError);
  CHECK_THROWS_AS(parse_config(json{{"data", {{"csv_dir", "a"}, {"synth", json::object()}}}}), ConfigError);
  try {
    parse_config(json{{"encoder", {{"dimm", 4}}}});
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("dimm") != std::string::npos);
  }

  ExperimentConfig c = parse_config(json{{"tasks", "RD"}, {"lambda", {{"readm", 0.5}}}, {"ablation", {{"causal", false}}}});
  CHECK(c.tasks.size() == 2);
  CHECK(c.lambda.at(TaskId::Readmission) == 0.5);
  CHECK_FALSE(c.train.causal);
  const json round = config_to_json(parse_config(config_to_json(c)));
  CHECK(round == config_to_json(c));
  CHECK(parse_config(json{{"train", {{"preset", "default"}}}}).train.adam.learning_rate == 5e-5);
  CHECK(parse_config(json{{"train", {{"preset", "fast"}}}}).train.adam.learning_rate == 5e-3);
}

TEST_CASE("task letters") {
  CHECK(parse_task_letters("RMDL").size() == 4);
  CHECK(parse_task_letters("L") == std::vector<TaskId>{TaskId::LengthOfStay});
  CHECK_THROWS_AS(parse_task_letters("RR"), ConfigError);
  CHECK_THROWS_AS(parse_task_letters(""), ConfigError);
}

TEST_CASE("synth writes tables and a manifest deterministically") {
  json j = {{"seed", 4}, {"data", {{"synth", {{"n_patients", 80}, {"rho_train", 0.9}, {"rho_test", 0.0}}}}}};
  ExperimentConfig c = parse_config(j);
  StageTracker st;
  c.out = scratch("synth_a");
  cmd_synth(c, st);
  std::size_t csvs = 0;
  for (const auto& e : fs::directory_iterator(c.out)) csvs += e.path().extension() == ".csv";
  CHECK(csvs == 5);
  const json manifest = json::parse(slurp(c.out / "manifest.json"));
  CHECK(manifest["planted_shortcut"]["rho_train"].get<double>() == 0.9);
  CHECK(manifest["planted_shortcut"]["rho_test"].get<double>() == 0.0);
  CHECK(manifest.contains("seed"));
  const auto first = tree(c.out);
  c.out = scratch("synth_b");
  cmd_synth(c, st);
  CHECK(tree(c.out) == first);
  fs::remove_all(scratch("synth_a"));
  fs::remove_all(c.out);
}

TEST_CASE("csv ingest matches the synthetic source") {
  ExperimentConfig c = toy::small_config(13, 60);
  c.out = scratch("csv_src");
  StageTracker st;
  cmd_synth(c, st);
  ExperimentConfig from_csv = c;
  from_csv.data.synth.reset();
  from_csv.data.csv_dir = c.out;
  from_csv.data.n_folds = c.n_folds();
  from_csv.data.split_seed = c.split_seed();
  const PreparedTables a = prepare_tables(c, st);
  const PreparedTables b = prepare_tables(from_csv, st);
  CHECK(a.tables.visits.size() == b.tables.visits.size());
  CHECK(a.labels.mortality == b.labels.mortality);
  CHECK(a.labels.drugs == b.labels.drugs);
  CHECK(a.patient_fold == b.patient_fold);
  fs::remove_all(c.out);
}

TEST_CASE("train writes artifacts and eval reproduces test metrics") {
  ExperimentConfig c = trained_config(scratch("train"));
  StageTracker st;
  const json m = cmd_train(c, st);
  for (const char* f : {"config.json", "train_log.jsonl", "model.ckpt", "metrics.json", "metrics.csv"}) {
    CHECK(fs::exists(c.out / f));
  }
  CHECK(fs::is_directory(c.out / "graph"));
  CHECK(m["epochs_run"].get<std::size_t>() == 3);
  // echoed config resolves to the same experiment
  const ExperimentConfig echoed = load_config(c.out / "config.json");
  CHECK(echoed.train.max_epochs == 3);
  CHECK(echoed.seed == c.seed);
  const auto log = read_csv(c.out / "train_log.jsonl");
  CHECK(log.size() == 3);
  const auto rows = read_csv(c.out / "metrics.csv");
  CHECK(rows.size() == 1 + c.tasks.size());

  ExperimentConfig ec = c;
  ec.out = scratch("eval");
  const json e = cmd_eval(ec, c.out / "model.ckpt", c.out / "graph", st);
  REQUIRE(e["test"].size() == m["test"].size());
  for (std::size_t k = 0; k < m["test"].size(); ++k) {
    for (const auto& [name, v] : m["test"][k]["metrics"].items()) {
      CHECK(std::abs(v.get<double>() - e["test"][k]["metrics"][name].get<double>()) <= 1e-9);
    }
  }
  fs::remove_all(ec.out);
}

TEST_CASE("explain ranks edges and agrees with the exported attention") {
  const fs::path run = scratch("train");
  if (!fs::exists(run / "model.ckpt")) {
    StageTracker st;
    cmd_train(trained_config(run), st);
  }
  ExperimentConfig c = trained_config(scratch("explain"));
  StageTracker st;
  const HeteroGraph g = import_graph(run / "graph");
  // visit with the most diagnoses
  const auto& dv = g.edge_list(EdgeType::DiagnosisVisit);
  std::vector<std::size_t> degree(g.num_nodes(NodeType::Visit), 0);
  for (std::int32_t v : dv.dst) ++degree[static_cast<std::size_t>(v)];
  const auto busiest = static_cast<std::size_t>(std::max_element(degree.begin(), degree.end()) - degree.begin());
  const std::string visit = g.ids(NodeType::Visit)[busiest];
  REQUIRE(degree[busiest] >= 3);

  const fs::path att = c.out / "attention.csv";
  const json all = cmd_explain(c, run / "model.ckpt", run / "graph", visit, 10000, att, st);
  CHECK(all["edges"].size() == degree[busiest]);
  const json top = cmd_explain(c, run / "model.ckpt", run / "graph", visit, 3, std::nullopt, st);
  REQUIRE(top["edges"].size() == 3);
  for (std::size_t i = 1; i < all["edges"].size(); ++i) {
    CHECK(all["edges"][i - 1]["score"].get<double>() >= all["edges"][i]["score"].get<double>());
  }
  for (std::size_t i = 0; i < 3; ++i) CHECK(top["edges"][i] == all["edges"][i]);

  // recompute from the exported per-head attention
  auto rows = read_csv(att);
  REQUIRE(rows.size() == degree[busiest] + 1);
  std::vector<std::pair<double, std::string>> sums;
  for (std::size_t r = 1; r < rows.size(); ++r) {
    double s = 0.0;
    for (std::size_t h = 1; h < rows[r].size(); ++h) {
      const double a = std::stod(rows[r][h]);
      CHECK(a >= 0.0);
      CHECK(a <= 1.0 + 1e-12);
      s += a;
    }
    sums.push_back({s, rows[r][0]});
  }
  std::stable_sort(sums.begin(), sums.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
  for (std::size_t i = 0; i < sums.size(); ++i) {
    CHECK(std::abs(sums[i].first - all["edges"][i]["score"].get<double>()) <= 1e-9);
  }
  CHECK_THROWS_AS(cmd_explain(c, run / "model.ckpt", run / "graph", "no-such-visit", 3, std::nullopt, st), DataError);
  fs::remove_all(c.out);
}

TEST_CASE("embedding export covers every node and is deterministic") {
  const fs::path run = scratch("train");
  if (!fs::exists(run / "model.ckpt")) {
    StageTracker st;
    cmd_train(trained_config(run), st);
  }
  ExperimentConfig c = trained_config(scratch("export"));
  StageTracker st;
  const json j = cmd_export_embeddings(c, run / "model.ckpt", run / "graph", c.out / "a.csv", st);
  cmd_export_embeddings(c, run / "model.ckpt", run / "graph", c.out / "b.csv", st);
  CHECK(slurp(c.out / "a.csv") == slurp(c.out / "b.csv"));
  const HeteroGraph g = import_graph(run / "graph");
  std::size_t nodes = 0;
  for (int t = 0; t < kNodeTypes; ++t) nodes += g.node_ids[t].size();
  const auto rows = read_csv(c.out / "a.csv");
  CHECK(rows.size() == nodes + 1);
  CHECK(j["rows"].get<std::size_t>() == nodes);
  for (const auto& r : rows) CHECK(r.size() == 3 + c.encoder.dim);
  CHECK(rows[0][0] == "node_type");
  fs::remove_all(c.out);
}

TEST_CASE("cross-validation emits one report per fold and a summary") {
  ExperimentConfig c = toy::small_config(22, 80);
  c.data.synth->n_folds = 3;
  c.train.max_epochs = 2;
  c.tasks = {TaskId::Readmission, TaskId::Mortality};
  c.out = scratch("cv");
  StageTracker st;
  const json s = cmd_cv(c, 2, st);
  CHECK(s["folds"].get<int>() == 3);
  CHECK(s["per_fold"].size() == 3);
  for (int k = 0; k < 3; ++k) CHECK(fs::exists(c.out / ("fold" + std::to_string(k)) / "metrics.json"));
  CHECK(read_csv(c.out / "metrics.csv").size() == 1 + 3 * 2);
  REQUIRE(s["test"].size() == 2);
  for (const char* task : {"readm", "mort"}) {
    REQUIRE(s["test"].contains(task));
    const json& a = s["test"][task]["auroc"];
    CHECK(a["folds"].get<int>() == 3);
    double mean = 0.0;
    for (const auto& f : s["per_fold"]) {
      for (const auto& t : f["test"]) {
        if (t["task"] == task) mean += t["metrics"]["auroc"].get<double>() / 3.0;
      }
    }
    CHECK(a["mean"].get<double>() == doctest::Approx(mean).epsilon(1e-12));
    CHECK(a["std"].get<double>() >= 0.0);
  }
  fs::remove_all(c.out);
}

TEST_CASE("sweep trains one model per value") {
  ExperimentConfig c = toy::small_config(23, 60);
  c.train.max_epochs = 1;
  c.tasks = {TaskId::Readmission};
  c.sweep = {{"param", "lambda"}, {"values", {0.0, 1.0}}};
  c.out = scratch("sweep");
  StageTracker st;
  const json s = cmd_sweep(c, st);
  CHECK(s.size() == 2);
  CHECK(fs::exists(c.out / "sweep" / "lambda=0.0" / "metrics.json"));
  CHECK(with_sweep_value(c, "ablation", "none").train.causal == false);
  CHECK_THROWS_AS(with_sweep_value(c, "gamma", 1), ConfigError);
  fs::remove_all(c.out);
}

TEST_CASE("cli exit codes and error file") {
  const fs::path dir = scratch("cli");
  fs::create_directories(dir);
  {
    std::ofstream(dir / "bad.json") << R"({"trian": {}})";
    std::ofstream(dir / "missing.json") << R"({"data": {"csv_dir": "/nonexistent/multehr"}})";
  }
  CHECK(run_cli("--config " + (dir / "bad.json").string() + " --out " + (dir / "o1").string() + " train") == 1);
  const json err = json::parse(slurp(dir / "o1" / "error.json"));
  CHECK(err["stage"] == "config");
  CHECK(err["exit_code"] == 1);
  CHECK(run_cli("--config " + (dir / "missing.json").string() + " --out " + (dir / "o2").string() + " build-graph") == 2);
  CHECK(json::parse(slurp(dir / "o2" / "error.json"))["exit_code"] == 2);
  CHECK(run_cli("train --no-such-flag") == 1);
  CHECK(run_cli("") == 1);
  CHECK(exit_code_for(NumericError("nan")) == 3);
  CHECK(exit_code_for(ContractError("x")) == 3);
  CHECK(exit_code_for(std::runtime_error("x")) == 3);
  fs::remove_all(dir);
}
