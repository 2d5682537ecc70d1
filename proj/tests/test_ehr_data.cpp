#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <unordered_map>

#include "doctest.h"
#include "multehr/csv.hpp"
#include "multehr/ehr_data.hpp"
#include "multehr/errors.hpp"

using namespace multehr;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / ("multehr_" + name)) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  void write(const std::string& file, const std::string& text) const { std::ofstream(path / file) << text; }
};

void write_fixture(const TempDir& dir) {
  dir.write("patients.csv", "patient_id,gender,birth_year\nP1,F,1950\nP2,M,\n");
  dir.write("visits.csv",
            "visit_id,patient_id,admit_time,discharge_time,died_in_hospital\n"
            "V1,P1,2100-01-01T00:00:00,2100-01-03T00:00:00,0\n"
            "V2,P1,2100-01-11T08:00:00,2100-01-21T08:00:00,1\n"
            "V3,P2,2100-03-01,2100-03-01T12:00:00,0\n");
  dir.write("diagnoses.csv", "visit_id,code\nV1,D1\nV2,D2\nV3,D1\n");
  dir.write("prescriptions.csv", "visit_id,code\nV1,R2\nV1,R1\nV1,R2\nV3,R3\n");
  dir.write("procedures.csv", "visit_id,code\nV2,X1\n");
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

double pearson(const std::vector<double>& a, const std::vector<double>& b) {
  const double n = static_cast<double>(a.size());
  double ma = 0, mb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ma += a[i];
    mb += b[i];
  }
  ma /= n;
  mb /= n;
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  return sab / std::sqrt(saa * sbb);
}

// Per-fold correlation between the shortcut indicator and READM, computed
// from the tables through the public label path.
std::map<int, double> shortcut_correlation(const EhrTables& t, const SynthConfig& cfg) {
  TaskLabels labels = extract_labels(t, cfg.readmission_window_days);
  std::vector<int> fold = split_patients(t, cfg.n_folds, cfg.seed);
  std::unordered_map<std::string, int> patient_fold;
  for (std::size_t i = 0; i < t.patients.size(); ++i) patient_fold[t.patients[i].patient_id] = fold[i];
  std::set<std::string> flagged;
  for (const auto& d : t.diagnoses) {
    if (d.code == kShortcutCode) flagged.insert(d.visit_id);
  }
  std::map<int, std::vector<double>> s, y;
  for (std::size_t i = 0; i < t.visits.size(); ++i) {
    const int f = patient_fold[t.visits[i].patient_id];
    s[f].push_back(flagged.count(t.visits[i].visit_id) ? 1.0 : 0.0);
    y[f].push_back(*labels.readmission[i]);
  }
  std::map<int, double> r;
  for (auto& [f, sv] : s) r[f] = pearson(sv, y[f]);
  return r;
}

}  // namespace

TEST_CASE("timestamps parse, format and reject invalid dates") {
  CHECK(parse_timestamp("1970-01-01") == 0);
  CHECK(parse_timestamp("1970-01-02T00:00:01") == kSecondsPerDay + 1);
  CHECK(parse_timestamp("2000-02-29 12:30") == parse_timestamp("2000-02-29T12:30:00"));
  CHECK_FALSE(parse_timestamp("2001-02-29"));
  CHECK_FALSE(parse_timestamp("2001-13-01"));
  CHECK_FALSE(parse_timestamp("2001-01-01T25:00"));
  CHECK_FALSE(parse_timestamp("yesterday"));
  for (Timestamp t : {Timestamp{0}, Timestamp{-1}, Timestamp{4102444800 + 3661}, Timestamp{-2208988800}}) {
    CHECK(parse_timestamp(format_timestamp(t)) == t);
  }
}

TEST_CASE("csv splitting handles quotes and embedded commas") {
  auto f = csv::split_line(R"(a,"b,c","d ""e""",)");
  REQUIRE(f.size() == 4);
  CHECK(f[1] == "b,c");
  CHECK(f[2] == "d \"e\"");
  CHECK(f[3].empty());
  CHECK(csv::split_line(csv::escape("x,\"y\""))[0] == "x,\"y\"");
}

TEST_CASE("well-formed fixture ingests without rejects") {
  TempDir dir("ingest_ok");
  write_fixture(dir);
  IngestResult r = ingest_csv(dir.path);
  CHECK(r.tables.patients.size() == 2);
  CHECK(r.tables.visits.size() == 3);
  CHECK(r.tables.prescriptions.size() == 4);
  for (const auto& f : r.report) CHECK(f.rows_rejected == 0);
  CHECK_FALSE(r.tables.patients[1].birth_year);
  validate_tables(r.tables);
}

TEST_CASE("visit referencing an absent patient is a fatal error naming the row") {
  TempDir dir("ingest_fk");
  write_fixture(dir);
  dir.write("visits.csv",
            "visit_id,patient_id,admit_time,discharge_time,died_in_hospital\n"
            "V1,P1,2100-01-01,2100-01-02,0\nV9,P7,2100-01-01,2100-01-02,0\n");
  dir.write("diagnoses.csv", "visit_id,code\n");
  dir.write("prescriptions.csv", "visit_id,code\n");
  dir.write("procedures.csv", "visit_id,code\n");
  try {
    ingest_csv(dir.path);
    FAIL("expected DataError");
  } catch (const DataError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("line 3") != std::string::npos);
    CHECK(msg.find("P7") != std::string::npos);
  }
}

TEST_CASE("duplicate visit_id is fatal") {
  TempDir dir("ingest_dup");
  write_fixture(dir);
  dir.write("visits.csv",
            "visit_id,patient_id,admit_time,discharge_time,died_in_hospital\n"
            "V1,P1,2100-01-01,2100-01-02,0\nV1,P2,2100-01-05,2100-01-06,0\n");
  dir.write("diagnoses.csv", "visit_id,code\n");
  dir.write("prescriptions.csv", "visit_id,code\n");
  dir.write("procedures.csv", "visit_id,code\n");
  CHECK_THROWS_WITH_AS(ingest_csv(dir.path), doctest::Contains("duplicate visit_id"), DataError);
}

TEST_CASE("missing file or column names the file") {
  TempDir dir("ingest_missing");
  write_fixture(dir);
  fs::remove(dir.path / "procedures.csv");
  CHECK_THROWS_WITH_AS(ingest_csv(dir.path), doctest::Contains("procedures.csv"), DataError);
  write_fixture(dir);
  dir.write("diagnoses.csv", "visit,code\nV1,D1\n");
  CHECK_THROWS_WITH_AS(ingest_csv(dir.path), doctest::Contains("visit_id"), DataError);
}

TEST_CASE("bad timestamps are rejected and counted along with dependent code rows") {
  TempDir dir("ingest_reject");
  write_fixture(dir);
  dir.write("visits.csv",
            "visit_id,patient_id,admit_time,discharge_time,died_in_hospital\n"
            "V1,P1,2100-01-01T00:00:00,2100-01-03T00:00:00,0\n"
            "V2,P1,not-a-date,2100-01-21T08:00:00,1\n"
            "V3,P2,2100-03-02,2100-03-01,0\n");
  IngestResult r = ingest_csv(dir.path);
  CHECK(r.tables.visits.size() == 1);
  CHECK(r.report[1].rows_rejected == 2);
  CHECK(r.report[2].rows_rejected == 2);  // D2 of V2, D1 of V3
  CHECK(r.tables.diagnoses.size() == 1);
}

TEST_CASE("LOS binning") {
  CHECK(los_class(0.5) == 0);
  CHECK(los_class(0.0) == 0);
  CHECK(los_class(1.0) == 1);
  CHECK(los_class(7.9) == 7);
  CHECK(los_class(8.0) == 8);
  CHECK(los_class(10.0) == 8);
  CHECK(los_class(14.99) == 8);
  CHECK(los_class(15.0) == 9);
  CHECK(los_class(20.0) == 9);
  CHECK_THROWS_AS(los_class(-1.0), ContractError);
}

TEST_CASE("LOS bins are exhaustive and mutually exclusive") {
  // Independent oracle: count the bins each duration falls into.
  auto in_bin = [](double d, int k) {
    if (k == 0) return d < 1.0;
    if (k <= 7) return d >= k && d < k + 1;
    if (k == 8) return d >= 8.0 && d < 15.0;
    return d >= 15.0;
  };
  for (double d = 0.0; d < 40.0; d += 0.013) {
    int hits = 0, which = -1;
    for (int k = 0; k < kLosClasses; ++k) {
      if (in_bin(d, k)) {
        ++hits;
        which = k;
      }
    }
    CHECK(hits == 1);
    CHECK(los_class(d) == which);
  }
}

TEST_CASE("labels from the fixture") {
  TempDir dir("labels");
  write_fixture(dir);
  EhrTables t = ingest_csv(dir.path).tables;
  TaskLabels l = extract_labels(t, 15);
  // V1: day 0 to day 2, next admission on day 10 -> readmitted
  CHECK(l.readmission[0] == 1);
  CHECK(l.readmission[1] == 0);
  CHECK(l.readmission[2] == 0);
  CHECK(l.mortality == std::vector<int>{0, 1, 0});
  CHECK(l.los[0] == 2);
  CHECK(l.los[1] == 8);
  CHECK(l.los[2] == 0);
  CHECK(l.drug_vocabulary == std::vector<std::string>{"R1", "R2", "R3"});
  CHECK(l.drugs[0] == std::vector<int>{0, 1});
  CHECK(l.drugs[1].empty());
  CHECK(l.drugs[2] == std::vector<int>{2});
  // a window shorter than the 8-day 8-hour gap removes the readmission
  CHECK(extract_labels(t, 7).readmission[0] == 0);
  CHECK(extract_labels(t, 9).readmission[0] == 1);
}

TEST_CASE("visits without discharge are excluded from READM and LOS with a count") {
  EhrTables t;
  t.patients = {{"P", "", std::nullopt}};
  t.visits = {{"A", "P", 0, std::nullopt, false}, {"B", "P", 5 * kSecondsPerDay, 6 * kSecondsPerDay, true}};
  TaskLabels l = extract_labels(t);
  CHECK(l.missing_discharge == 1);
  CHECK_FALSE(l.readmission[0]);
  CHECK_FALSE(l.los[0]);
  CHECK(l.readmission[1] == 0);
  CHECK(l.mortality[1] == 1);
}

TEST_CASE("patient split is balanced, deterministic and a partition") {
  std::vector<int> f = split_patients(10, 5, 42);
  std::map<int, int> sizes;
  for (int v : f) ++sizes[v];
  CHECK(sizes.size() == 5);
  for (auto& [fold, n] : sizes) CHECK(n == 2);
  CHECK(split_patients(10, 5, 42) == f);
  CHECK(split_patients(10, 5, 43) != f);
  std::vector<int> g = split_patients(103, 4, 1);
  CHECK(g.size() == 103);
  for (int v : g) CHECK((v >= 0 && v < 4));
  CHECK_THROWS_AS(split_patients(3, 5, 0), ContractError);
  CHECK_THROWS_AS(split_patients(10, 1, 0), ContractError);
}

TEST_CASE("synthetic tables are valid and byte-identical for a fixed seed") {
  SynthConfig cfg;
  cfg.n_patients = 150;
  cfg.seed = 9;
  EhrTables a = synth_generate(cfg);
  validate_tables(a);
  TempDir d1("synth_a"), d2("synth_b");
  write_csv(a, d1.path);
  write_csv(synth_generate(cfg), d2.path);
  for (const char* f : {"patients.csv", "visits.csv", "diagnoses.csv", "prescriptions.csv", "procedures.csv"}) {
    CHECK(slurp(d1.path / f) == slurp(d2.path / f));
  }
  // the written CSVs go through the ordinary ingestion path unchanged
  IngestResult back = ingest_csv(d1.path);
  CHECK(back.tables.visits.size() == a.visits.size());
  CHECK(back.tables.diagnoses.size() == a.diagnoses.size());
  for (const auto& f : back.report) CHECK(f.rows_rejected == 0);
}

TEST_CASE("100 patients with mean 2 visits yield about 200 visits") {
  SynthConfig cfg;
  cfg.n_patients = 100;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    cfg.seed = seed;
    const double n = static_cast<double>(synth_generate(cfg).visits.size());
    // Poisson(1) extra visits: sd = 10 before death truncation
    CHECK(std::abs(n - 200.0) <= 30.0);
  }
}

TEST_CASE("synthetic mortality rate tracks the configured rate") {
  for (double rate : {0.05, 0.1, 0.3}) {
    SynthConfig cfg;
    cfg.n_patients = 4000;
    cfg.mortality_rate = rate;
    cfg.seed = 4;
    EhrTables t = synth_generate(cfg);
    REQUIRE(t.visits.size() >= 5000);
    double deaths = 0;
    for (const auto& v : t.visits) deaths += v.died_in_hospital;
    INFO("rate " << rate);
    CHECK(std::abs(deaths / static_cast<double>(t.visits.size()) - rate) <= 0.02);
  }
}

TEST_CASE("shortcut is uncorrelated with READM when rho is zero") {
  SynthConfig cfg;
  cfg.seed = 17;
  EhrTables t = synth_generate(cfg);
  std::vector<double> s, y;
  TaskLabels labels = extract_labels(t);
  std::set<std::string> flagged;
  for (const auto& d : t.diagnoses) {
    if (d.code == kShortcutCode) flagged.insert(d.visit_id);
  }
  for (std::size_t i = 0; i < t.visits.size(); ++i) {
    s.push_back(flagged.count(t.visits[i].visit_id) ? 1.0 : 0.0);
    y.push_back(*labels.readmission[i]);
  }
  CHECK(std::abs(pearson(s, y)) < 0.05);

  cfg.n_patients = 10000;
  for (auto [fold, r] : shortcut_correlation(synth_generate(cfg), cfg)) {
    INFO("fold " << fold);
    CHECK(std::abs(r) < 0.05);
  }
}

TEST_CASE("planted shortcut follows rho_train in training folds and rho_test in the test fold") {
  SynthConfig cfg;
  cfg.n_patients = 5000;
  cfg.rho_train = 0.8;
  cfg.rho_test = -0.5;
  cfg.test_fold = 2;
  cfg.seed = 3;
  for (auto [fold, r] : shortcut_correlation(synth_generate(cfg), cfg)) {
    INFO("fold " << fold);
    CHECK(std::abs(r - (fold == 2 ? -0.5 : 0.8)) < 0.08);
  }
}

TEST_CASE("changing rho only changes the shortcut rows") {
  SynthConfig cfg;
  cfg.n_patients = 300;
  EhrTables a = synth_generate(cfg);
  cfg.rho_train = 0.9;
  EhrTables b = synth_generate(cfg);
  CHECK(a.visits.size() == b.visits.size());
  CHECK(a.prescriptions.size() == b.prescriptions.size());
  auto strip = [](const std::vector<CodeRow>& rows) {
    std::vector<std::string> out;
    for (const auto& r : rows) {
      if (r.code != kShortcutCode) out.push_back(r.visit_id + ":" + r.code);
    }
    return out;
  };
  CHECK(strip(a.diagnoses) == strip(b.diagnoses));
}

TEST_CASE("synthetic config validation") {
  SynthConfig cfg;
  cfg.rho_train = 1.5;
  CHECK_THROWS_AS(synth_generate(cfg), ConfigError);
  cfg = {};
  cfg.test_fold = 5;
  CHECK_THROWS_AS(synth_generate(cfg), ConfigError);
  cfg = {};
  cfg.mortality_rate = 0.0;
  CHECK_THROWS_AS(synth_generate(cfg), ConfigError);
}
