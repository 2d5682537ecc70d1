#include "multehr/ehr_data.hpp"

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <unordered_map>
#include <unordered_set>

#include "multehr/csv.hpp"
#include "multehr/errors.hpp"
#include "multehr/tensor.hpp"

namespace multehr {

// ---------------------------------------------------------------------------
// Timestamps

namespace {

// Days since 1970-01-01 for a proleptic Gregorian date.
std::int64_t days_from_civil(std::int64_t y, unsigned m, unsigned d) {
  y -= m <= 2;
  const std::int64_t era = (y >= 0 ? y : y - 399) / 400;
  const unsigned yoe = static_cast<unsigned>(y - era * 400);
  const unsigned doy = (153 * (m + (m > 2 ? -3 : 9)) + 2) / 5 + d - 1;
  const unsigned doe = yoe * 365 + yoe / 4 - yoe / 100 + doy;
  return era * 146097 + static_cast<std::int64_t>(doe) - 719468;
}

void civil_from_days(std::int64_t z, std::int64_t& y, unsigned& m, unsigned& d) {
  z += 719468;
  const std::int64_t era = (z >= 0 ? z : z - 146096) / 146097;
  const unsigned doe = static_cast<unsigned>(z - era * 146097);
  const unsigned yoe = (doe - doe / 1460 + doe / 36524 - doe / 146096) / 365;
  y = static_cast<std::int64_t>(yoe) + era * 400;
  const unsigned doy = doe - (365 * yoe + yoe / 4 - yoe / 100);
  const unsigned mp = (5 * doy + 2) / 153;
  d = doy - (153 * mp + 2) / 5 + 1;
  m = mp < 10 ? mp + 3 : mp - 9;
  y += m <= 2;
}

bool leap(std::int64_t y) { return (y % 4 == 0 && y % 100 != 0) || y % 400 == 0; }

unsigned days_in_month(std::int64_t y, unsigned m) {
  static constexpr unsigned kDays[] = {31, 28, 31, 30, 31, 30, 31, 31, 30, 31, 30, 31};
  return m == 2 && leap(y) ? 29 : kDays[m - 1];
}

template <class T>
bool parse_number(std::string_view s, T& out) {
  if (s.empty()) return false;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
  return ec == std::errc() && ptr == s.data() + s.size();
}

}  // namespace

std::optional<Timestamp> parse_timestamp(std::string_view text) {
  while (!text.empty() && text.front() == ' ') text.remove_prefix(1);
  while (!text.empty() && text.back() == ' ') text.remove_suffix(1);
  if (text.size() < 10 || text[4] != '-' || text[7] != '-') return std::nullopt;
  std::int64_t year = 0;
  unsigned month = 0, day = 0, hour = 0, minute = 0, second = 0;
  if (!parse_number(text.substr(0, 4), year) || !parse_number(text.substr(5, 2), month) ||
      !parse_number(text.substr(8, 2), day)) {
    return std::nullopt;
  }
  if (month < 1 || month > 12 || day < 1 || day > days_in_month(year, month)) return std::nullopt;
  if (text.size() > 10) {
    if ((text[10] != 'T' && text[10] != ' ') || text.size() < 16 || text[13] != ':') return std::nullopt;
    if (!parse_number(text.substr(11, 2), hour) || !parse_number(text.substr(14, 2), minute)) return std::nullopt;
    if (text.size() > 16) {
      if (text.size() != 19 || text[16] != ':' || !parse_number(text.substr(17, 2), second)) return std::nullopt;
    }
    if (hour > 23 || minute > 59 || second > 59) return std::nullopt;
  }
  return days_from_civil(year, month, day) * kSecondsPerDay + hour * 3600 + minute * 60 + second;
}

std::string format_timestamp(Timestamp t) {
  std::int64_t days = t / kSecondsPerDay;
  std::int64_t rem = t % kSecondsPerDay;
  if (rem < 0) {
    rem += kSecondsPerDay;
    --days;
  }
  std::int64_t y;
  unsigned m, d;
  civil_from_days(days, y, m, d);
  char buf[32];
  std::snprintf(buf, sizeof buf, "%04lld-%02u-%02uT%02lld:%02lld:%02lld", static_cast<long long>(y), m, d,
                static_cast<long long>(rem / 3600), static_cast<long long>(rem / 60 % 60),
                static_cast<long long>(rem % 60));
  return buf;
}

// ---------------------------------------------------------------------------
// Ingestion

namespace {


std::vector<std::size_t> require_columns(const csv::Table& t, const std::string& file,
                                         std::initializer_list<std::string_view> names) {
  std::vector<std::size_t> out;
  for (std::string_view name : names) {
    auto c = t.column(name);
    if (!c) throw DataError(file + ": missing required column '" + std::string(name) + "'");
    out.push_back(*c);
  }
  return out;
}

std::string where(const std::string& file, std::size_t line) { return file + " line " + std::to_string(line); }

FileReport report_for(std::string file) {
  FileReport r;
  r.file = std::move(file);
  return r;
}

void reject(FileReport& r, std::string message) {
  ++r.rows_rejected;
  if (r.diagnostics.size() < 50) r.diagnostics.push_back(std::move(message));
}

std::optional<bool> parse_flag(std::string_view s) {
  if (s == "1" || s == "true" || s == "True" || s == "TRUE") return true;
  if (s == "0" || s == "false" || s == "False" || s == "FALSE" || s.empty()) return false;
  return std::nullopt;
}

std::vector<CodeRow> read_codes(const std::filesystem::path& dir, const std::string& file,
                                const std::unordered_set<std::string>& visits,
                                const std::unordered_set<std::string>& rejected_visits, FileReport& r) {
  csv::Table t = csv::read(dir / file);
  auto cols = require_columns(t, file, {"visit_id", "code"});
  std::vector<CodeRow> out;
  for (std::size_t i = 0; i < t.rows.size(); ++i) {
    const auto& row = t.rows[i];
    ++r.rows_read;
    if (row.size() != t.header.size()) {
      reject(r, where(file, t.line_numbers[i]) + ": expected " + std::to_string(t.header.size()) + " fields");
      continue;
    }
    const std::string& visit = row[cols[0]];
    const std::string& code = row[cols[1]];
    if (rejected_visits.count(visit)) {
      reject(r, where(file, t.line_numbers[i]) + ": visit '" + visit + "' was rejected");
      continue;
    }
    if (!visits.count(visit)) {
      throw DataError(where(file, t.line_numbers[i]) + ": visit_id '" + visit + "' not present in visits.csv");
    }
    if (code.empty()) {
      reject(r, where(file, t.line_numbers[i]) + ": empty code");
      continue;
    }
    out.push_back({visit, code});
    ++r.rows_accepted;
  }
  return out;
}

}  // namespace

IngestResult ingest_csv(const std::filesystem::path& dir) {
  IngestResult result;
  EhrTables& tables = result.tables;

  FileReport pr = report_for("patients.csv");
  {
    csv::Table t = csv::read(dir / "patients.csv");
    auto cols = require_columns(t, pr.file, {"patient_id"});
    auto gender = t.column("gender");
    auto birth = t.column("birth_year");
    std::unordered_set<std::string> seen;
    for (std::size_t i = 0; i < t.rows.size(); ++i) {
      const auto& row = t.rows[i];
      ++pr.rows_read;
      if (row.size() != t.header.size()) {
        reject(pr, where(pr.file, t.line_numbers[i]) + ": expected " + std::to_string(t.header.size()) + " fields");
        continue;
      }
      PatientRow p{row[cols[0]], gender ? row[*gender] : std::string{}, std::nullopt};
      if (p.patient_id.empty()) {
        reject(pr, where(pr.file, t.line_numbers[i]) + ": empty patient_id");
        continue;
      }
      if (!seen.insert(p.patient_id).second) {
        throw DataError(where(pr.file, t.line_numbers[i]) + ": duplicate patient_id '" + p.patient_id + "'");
      }
      if (birth && !row[*birth].empty()) {
        int y = 0;
        if (parse_number(std::string_view(row[*birth]), y)) p.birth_year = y;
      }
      tables.patients.push_back(std::move(p));
      ++pr.rows_accepted;
    }
  }

  std::unordered_set<std::string> patient_ids;
  for (const auto& p : tables.patients) patient_ids.insert(p.patient_id);

  FileReport vr = report_for("visits.csv");
  std::unordered_set<std::string> visit_ids, rejected_visits;
  {
    csv::Table t = csv::read(dir / "visits.csv");
    auto cols = require_columns(t, vr.file,
                                {"visit_id", "patient_id", "admit_time", "discharge_time", "died_in_hospital"});
    for (std::size_t i = 0; i < t.rows.size(); ++i) {
      const auto& row = t.rows[i];
      const std::string loc = where(vr.file, t.line_numbers[i]);
      ++vr.rows_read;
      if (row.size() != t.header.size()) {
        reject(vr, loc + ": expected " + std::to_string(t.header.size()) + " fields");
        continue;
      }
      const std::string& id = row[cols[0]];
      if (id.empty()) {
        reject(vr, loc + ": empty visit_id");
        continue;
      }
      if (visit_ids.count(id) || rejected_visits.count(id)) {
        throw DataError(loc + ": duplicate visit_id '" + id + "'");
      }
      if (!patient_ids.count(row[cols[1]])) {
        throw DataError(loc + ": visit '" + id + "' references absent patient_id '" + row[cols[1]] + "'");
      }
      VisitRow v{id, row[cols[1]], 0, std::nullopt, false};
      auto admit = parse_timestamp(row[cols[2]]);
      if (!admit) {
        rejected_visits.insert(id);
        reject(vr, loc + ": unparsable admit_time '" + row[cols[2]] + "'");
        continue;
      }
      v.admit_time = *admit;
      if (!row[cols[3]].empty()) {
        auto discharge = parse_timestamp(row[cols[3]]);
        if (!discharge) {
          rejected_visits.insert(id);
          reject(vr, loc + ": unparsable discharge_time '" + row[cols[3]] + "'");
          continue;
        }
        if (*discharge < *admit) {
          rejected_visits.insert(id);
          reject(vr, loc + ": discharge_time before admit_time");
          continue;
        }
        v.discharge_time = *discharge;
      }
      auto died = parse_flag(row[cols[4]]);
      if (!died) {
        rejected_visits.insert(id);
        reject(vr, loc + ": bad died_in_hospital flag '" + row[cols[4]] + "'");
        continue;
      }
      v.died_in_hospital = *died;
      visit_ids.insert(id);
      tables.visits.push_back(std::move(v));
      ++vr.rows_accepted;
    }
  }

  FileReport dr = report_for("diagnoses.csv"), rr = report_for("prescriptions.csv"), xr = report_for("procedures.csv");
  tables.diagnoses = read_codes(dir, dr.file, visit_ids, rejected_visits, dr);
  tables.prescriptions = read_codes(dir, rr.file, visit_ids, rejected_visits, rr);
  tables.procedures = read_codes(dir, xr.file, visit_ids, rejected_visits, xr);
  result.report = {pr, vr, dr, rr, xr};
  if (std::filesystem::exists(dir / "lab_events.csv")) {
    FileReport lr = report_for("lab_events.csv");
    tables.lab_events = read_codes(dir, lr.file, visit_ids, rejected_visits, lr);
    result.report.push_back(lr);
  }
  return result;
}

void write_csv(const EhrTables& tables, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  auto open = [&](const char* name) {
    std::ofstream os(dir / name, std::ios::trunc);
    if (!os) throw DataError("cannot write " + (dir / name).string());
    return os;
  };
  {
    auto os = open("patients.csv");
    os << "patient_id,gender,birth_year\n";
    for (const auto& p : tables.patients) {
      os << csv::escape(p.patient_id) << ',' << csv::escape(p.gender) << ',';
      if (p.birth_year) os << *p.birth_year;
      os << '\n';
    }
  }
  {
    auto os = open("visits.csv");
    os << "visit_id,patient_id,admit_time,discharge_time,died_in_hospital\n";
    for (const auto& v : tables.visits) {
      os << csv::escape(v.visit_id) << ',' << csv::escape(v.patient_id) << ',' << format_timestamp(v.admit_time)
         << ',' << (v.discharge_time ? format_timestamp(*v.discharge_time) : std::string{}) << ','
         << (v.died_in_hospital ? 1 : 0) << '\n';
    }
  }
  auto codes = [&](const char* name, const std::vector<CodeRow>& rows) {
    auto os = open(name);
    os << "visit_id,code\n";
    for (const auto& r : rows) os << csv::escape(r.visit_id) << ',' << csv::escape(r.code) << '\n';
  };
  codes("diagnoses.csv", tables.diagnoses);
  codes("prescriptions.csv", tables.prescriptions);
  codes("procedures.csv", tables.procedures);
  if (!tables.lab_events.empty()) codes("lab_events.csv", tables.lab_events);
}

void validate_tables(const EhrTables& tables) {
  std::vector<std::string> problems;
  auto note = [&](std::string msg) {
    if (problems.size() < 20) problems.push_back(std::move(msg));
  };
  std::unordered_set<std::string> patients;
  for (std::size_t i = 0; i < tables.patients.size(); ++i) {
    if (!patients.insert(tables.patients[i].patient_id).second) {
      note("patients row " + std::to_string(i) + ": duplicate patient_id '" + tables.patients[i].patient_id + "'");
    }
  }
  std::unordered_set<std::string> visits;
  for (std::size_t i = 0; i < tables.visits.size(); ++i) {
    const VisitRow& v = tables.visits[i];
    if (!visits.insert(v.visit_id).second) note("visits row " + std::to_string(i) + ": duplicate visit_id '" + v.visit_id + "'");
    if (!patients.count(v.patient_id)) {
      note("visits row " + std::to_string(i) + ": visit '" + v.visit_id + "' references absent patient '" +
           v.patient_id + "'");
    }
    if (v.discharge_time && *v.discharge_time < v.admit_time) {
      note("visits row " + std::to_string(i) + ": discharge before admit");
    }
  }
  auto codes = [&](const char* table, const std::vector<CodeRow>& rows) {
    for (std::size_t i = 0; i < rows.size(); ++i) {
      if (!visits.count(rows[i].visit_id)) {
        note(std::string(table) + " row " + std::to_string(i) + ": absent visit_id '" + rows[i].visit_id + "'");
      }
    }
  };
  codes("diagnoses", tables.diagnoses);
  codes("prescriptions", tables.prescriptions);
  codes("procedures", tables.procedures);
  codes("lab_events", tables.lab_events);
  if (!problems.empty()) {
    std::string msg = "invalid EHR tables:";
    for (const auto& p : problems) msg += "\n  " + p;
    throw DataError(msg);
  }
}

// ---------------------------------------------------------------------------
// Labels and splits

int los_class(double duration_days) {
  if (!(duration_days >= 0.0)) throw ContractError("los_class: negative or NaN duration");
  const double days = std::floor(duration_days);
  if (days < 1.0) return 0;
  if (days <= 7.0) return static_cast<int>(days);
  if (days <= 14.0) return 8;
  return 9;
}

TaskLabels extract_labels(const EhrTables& tables, int readm_window_days) {
  if (readm_window_days < 0) throw ContractError("extract_labels: negative readmission window");
  const std::size_t n = tables.visits.size();
  TaskLabels labels;
  labels.mortality.resize(n);
  labels.readmission.resize(n);
  labels.los.resize(n);
  labels.drugs.resize(n);

  std::unordered_map<std::string, std::vector<std::size_t>> by_patient;
  std::unordered_map<std::string, std::size_t> visit_index;
  for (std::size_t i = 0; i < n; ++i) {
    by_patient[tables.visits[i].patient_id].push_back(i);
    visit_index.emplace(tables.visits[i].visit_id, i);
  }
  const Timestamp window = static_cast<Timestamp>(readm_window_days) * kSecondsPerDay;
  for (std::size_t i = 0; i < n; ++i) {
    const VisitRow& v = tables.visits[i];
    labels.mortality[i] = v.died_in_hospital ? 1 : 0;
    if (!v.discharge_time) {
      ++labels.missing_discharge;
      continue;
    }
    labels.los[i] = los_class(static_cast<double>(*v.discharge_time - v.admit_time) / kSecondsPerDay);
    int readm = 0;
    for (std::size_t j : by_patient[v.patient_id]) {
      const Timestamp next = tables.visits[j].admit_time;
      if (j != i && next > v.admit_time && next - *v.discharge_time <= window) {
        readm = 1;
        break;
      }
    }
    labels.readmission[i] = readm;
  }

  std::set<std::string> vocab;
  for (const auto& r : tables.prescriptions) vocab.insert(r.code);
  labels.drug_vocabulary.assign(vocab.begin(), vocab.end());
  std::unordered_map<std::string, int> drug_index;
  for (std::size_t k = 0; k < labels.drug_vocabulary.size(); ++k) drug_index[labels.drug_vocabulary[k]] = static_cast<int>(k);
  for (const auto& r : tables.prescriptions) {
    auto it = visit_index.find(r.visit_id);
    if (it == visit_index.end()) throw DataError("extract_labels: prescription for absent visit '" + r.visit_id + "'");
    labels.drugs[it->second].push_back(drug_index[r.code]);
  }
  for (auto& d : labels.drugs) {
    std::sort(d.begin(), d.end());
    d.erase(std::unique(d.begin(), d.end()), d.end());
  }
  return labels;
}

std::vector<int> split_patients(std::size_t n_patients, int folds, std::uint64_t seed) {
  if (folds < 2) throw ContractError("split_patients: need at least 2 folds");
  if (n_patients < static_cast<std::size_t>(folds)) {
    throw ContractError("split_patients: " + std::to_string(n_patients) + " patients for " + std::to_string(folds) +
                        " folds");
  }
  std::vector<std::size_t> order(n_patients);
  std::iota(order.begin(), order.end(), 0);
  Rng rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<int> fold(n_patients);
  for (std::size_t k = 0; k < n_patients; ++k) fold[order[k]] = static_cast<int>(k % static_cast<std::size_t>(folds));
  return fold;
}

std::vector<int> split_patients(const EhrTables& tables, int folds, std::uint64_t seed) {
  return split_patients(tables.patients.size(), folds, seed);
}

// ---------------------------------------------------------------------------
// Synthetic generator

void validate_synth_config(const SynthConfig& cfg) {
  auto bad = [](const std::string& m) { throw ConfigError("synth: " + m); };
  if (cfg.n_patients == 0) bad("n_patients must be positive");
  if (!(cfg.mean_visits >= 1.0)) bad("mean_visits must be >= 1");
  if (cfg.n_diagnosis_codes == 0 || cfg.n_prescription_codes == 0 || cfg.n_procedure_codes == 0) {
    bad("vocabulary sizes must be positive");
  }
  if (cfg.severity_dim == 0) bad("severity_dim must be positive");
  if (!(cfg.mean_diagnoses >= 1.0)) bad("mean_diagnoses must be >= 1");
  if (!(cfg.mean_procedures >= 0.0)) bad("mean_procedures must be >= 0");
  if (!(cfg.mortality_rate > 0.0 && cfg.mortality_rate < 1.0)) bad("mortality_rate must be in (0, 1)");
  if (cfg.readmission_window_days < 2) bad("readmission_window_days must be >= 2");
  if (std::abs(cfg.rho_train) > 1.0 || std::abs(cfg.rho_test) > 1.0) bad("rho values must be in [-1, 1]");
  if (cfg.n_folds < 2) bad("n_folds must be >= 2");
  if (cfg.test_fold < 0 || cfg.test_fold >= cfg.n_folds) bad("test_fold out of range");
  if (cfg.n_patients < static_cast<std::size_t>(cfg.n_folds)) bad("fewer patients than folds");
}

namespace {

double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

// Indices of the k largest logits after Gumbel perturbation: a draw of k
// distinct items from softmax(logits) without replacement.
std::vector<int> gumbel_top_k(const std::vector<double>& logits, std::size_t k, Rng& rng) {
  std::uniform_real_distribution<double> u(1e-12, 1.0);
  std::vector<std::pair<double, int>> keyed(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) keyed[i] = {logits[i] - std::log(-std::log(u(rng))), static_cast<int>(i)};
  k = std::min(k, keyed.size());
  std::partial_sort(keyed.begin(), keyed.begin() + static_cast<std::ptrdiff_t>(k), keyed.end(),
                    [](const auto& a, const auto& b) { return a.first > b.first; });
  std::vector<int> out;
  for (std::size_t i = 0; i < k; ++i) out.push_back(keyed[i].second);
  std::sort(out.begin(), out.end());
  return out;
}

struct CodeModel {
  std::vector<double> base;
  std::vector<double> loading;
  std::vector<std::size_t> axis;

  std::vector<double> logits(const std::vector<double>& severity) const {
    std::vector<double> out(base.size());
    for (std::size_t c = 0; c < base.size(); ++c) out[c] = base[c] + loading[c] * severity[axis[c]];
    return out;
  }
};

CodeModel make_code_model(std::size_t n, std::size_t dim, Rng& rng) {
  std::normal_distribution<double> popularity(0.0, 0.7);
  std::bernoulli_distribution sign(0.5);
  CodeModel m;
  for (std::size_t c = 0; c < n; ++c) {
    m.base.push_back(popularity(rng));
    m.loading.push_back(sign(rng) ? 1.2 : -1.2);
    m.axis.push_back(c % dim);
  }
  return m;
}

struct CandidateVisit {
  std::vector<double> severity;
  double los_days = 0;
  double mort_score = 0;
  double u_mort = 0;
  bool readmitted = false;
  double gap_days = 0;
  std::vector<int> diagnoses, prescriptions, procedures;
};

struct CandidatePatient {
  Timestamp first_admit = 0;
  std::string gender;
  int birth_year = 0;
  std::vector<CandidateVisit> visits;
};

std::string code_name(const char* prefix, std::size_t i, std::size_t width) {
  std::string digits = std::to_string(i);
  if (digits.size() < width) digits.insert(0, width - digits.size(), '0');
  return prefix + digits;
}

// Number of visits kept for each patient when death truncates the sequence.
std::size_t kept_visits(const CandidatePatient& p, double intercept, bool& died_last) {
  for (std::size_t j = 0; j < p.visits.size(); ++j) {
    if (p.visits[j].u_mort < sigmoid(intercept + p.visits[j].mort_score)) {
      died_last = true;
      return j + 1;
    }
  }
  died_last = false;
  return p.visits.size();
}

double mortality_rate_at(const std::vector<CandidatePatient>& patients, double intercept) {
  std::size_t deaths = 0, visits = 0;
  for (const auto& p : patients) {
    bool died = false;
    visits += kept_visits(p, intercept, died);
    deaths += died;
  }
  return static_cast<double>(deaths) / static_cast<double>(visits);
}

}  // namespace

EhrTables synth_generate(const SynthConfig& cfg) {
  validate_synth_config(cfg);
  std::seed_seq structure_seed{cfg.seed, std::uint64_t{0x5A17}};
  Rng rng(structure_seed);
  const std::size_t dim = cfg.severity_dim;
  const double window = cfg.readmission_window_days;

  CodeModel dx_model = make_code_model(cfg.n_diagnosis_codes, dim, rng);
  CodeModel px_model = make_code_model(cfg.n_procedure_codes, dim, rng);
  // Each diagnosis indicates two drugs.
  std::vector<std::array<int, 2>> indicated(cfg.n_diagnosis_codes);
  {
    std::uniform_int_distribution<int> drug(0, static_cast<int>(cfg.n_prescription_codes) - 1);
    for (auto& pair : indicated) {
      pair[0] = drug(rng);
      pair[1] = cfg.n_prescription_codes > 1 ? drug(rng) : pair[0];
      while (cfg.n_prescription_codes > 1 && pair[1] == pair[0]) pair[1] = drug(rng);
    }
  }

  std::normal_distribution<double> std_normal(0.0, 1.0);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::poisson_distribution<int> extra_visits(cfg.mean_visits - 1.0);
  std::poisson_distribution<int> extra_dx(cfg.mean_diagnoses - 1.0);
  std::poisson_distribution<int> n_px(std::max(cfg.mean_procedures, 1e-9));
  std::exponential_distribution<double> long_gap(1.0 / 120.0);
  const Timestamp epoch = days_from_civil(2100, 1, 1) * kSecondsPerDay;

  auto axis = [dim](std::size_t k) { return k % dim; };
  std::vector<CandidatePatient> patients(cfg.n_patients);
  for (auto& p : patients) {
    std::vector<double> severity(dim);
    for (double& s : severity) s = std_normal(rng);
    p.first_admit = epoch + static_cast<Timestamp>(unit(rng) * 3650.0 * kSecondsPerDay) / 60 * 60;
    p.gender = unit(rng) < 0.5 ? "F" : "M";
    p.birth_year = 2020 + static_cast<int>(unit(rng) * 70);
    const int n_visits = 1 + extra_visits(rng);
    for (int j = 0; j < n_visits; ++j) {
      CandidateVisit v;
      v.severity = severity;
      for (double& s : v.severity) s += 0.35 * std_normal(rng);
      const auto& s = v.severity;
      v.los_days = std::exp(std::log(3.0) + 0.45 * s[axis(0)] + 0.3 * s[axis(3)] + 0.45 * std_normal(rng));
      v.mort_score = 1.2 * s[axis(0)] + 0.6 * s[axis(1)];
      v.u_mort = unit(rng);
      v.readmitted = unit(rng) < sigmoid(-0.6 + 1.0 * s[axis(0)] + 0.6 * s[axis(2)]);
      v.gap_days = v.readmitted ? 0.5 + unit(rng) * (window - 1.0) : window + 1.0 + long_gap(rng);
      v.diagnoses = gumbel_top_k(dx_model.logits(s), static_cast<std::size_t>(1 + extra_dx(rng)), rng);
      std::set<int> drugs;
      for (int d : v.diagnoses) {
        for (int drug : indicated[static_cast<std::size_t>(d)]) {
          if (unit(rng) < 0.7) drugs.insert(drug);
        }
      }
      if (unit(rng) < 0.3) drugs.insert(static_cast<int>(unit(rng) * static_cast<double>(cfg.n_prescription_codes)));
      v.prescriptions.assign(drugs.begin(), drugs.end());
      v.procedures = gumbel_top_k(px_model.logits(s), static_cast<std::size_t>(n_px(rng)), rng);
      p.visits.push_back(std::move(v));
    }
  }

  // Intercept such that the realized in-hospital mortality rate, after
  // truncating each patient's history at death, matches the target.
  double lo = -30.0, hi = 30.0;
  for (int it = 0; it < 100; ++it) {
    const double mid = 0.5 * (lo + hi);
    (mortality_rate_at(patients, mid) < cfg.mortality_rate ? lo : hi) = mid;
  }
  const double intercept = 0.5 * (lo + hi);

  EhrTables tables;
  const std::vector<int> fold = split_patients(cfg.n_patients, cfg.n_folds, cfg.seed);
  std::vector<int> visit_fold;
  std::vector<int> visit_readm;
  const std::size_t id_width = std::to_string(cfg.n_patients).size() + 1;
  std::size_t visit_counter = 0;
  for (std::size_t i = 0; i < patients.size(); ++i) {
    const CandidatePatient& p = patients[i];
    const std::string pid = code_name("P", i, id_width);
    tables.patients.push_back({pid, p.gender, p.birth_year});
    bool died = false;
    const std::size_t kept = kept_visits(p, intercept, died);
    Timestamp admit = p.first_admit;
    for (std::size_t j = 0; j < kept; ++j) {
      const CandidateVisit& v = p.visits[j];
      const std::string vid = code_name("V", visit_counter++, id_width + 1);
      const Timestamp discharge = admit + std::max<Timestamp>(60, static_cast<Timestamp>(v.los_days * 1440.0) * 60);
      const bool last = j + 1 == kept;
      tables.visits.push_back({vid, pid, admit, discharge, last && died});
      for (int d : v.diagnoses) tables.diagnoses.push_back({vid, code_name("DX", static_cast<std::size_t>(d), 3)});
      for (int d : v.prescriptions) tables.prescriptions.push_back({vid, code_name("RX", static_cast<std::size_t>(d), 3)});
      for (int d : v.procedures) tables.procedures.push_back({vid, code_name("PX", static_cast<std::size_t>(d), 3)});
      visit_fold.push_back(fold[i]);
      visit_readm.push_back(!last && v.readmitted ? 1 : 0);
      admit = discharge + static_cast<Timestamp>(v.gap_days * 1440.0) * 60;
    }
  }

  // Shortcut diagnosis: S = Y with probability |rho| (1 - Y for negative rho),
  // otherwise an independent draw at the fold's base rate, giving corr(S, Y) = rho.
  std::vector<double> fold_rate(static_cast<std::size_t>(cfg.n_folds), 0.0);
  std::vector<double> fold_count(static_cast<std::size_t>(cfg.n_folds), 0.0);
  for (std::size_t k = 0; k < visit_fold.size(); ++k) {
    fold_rate[static_cast<std::size_t>(visit_fold[k])] += visit_readm[k];
    fold_count[static_cast<std::size_t>(visit_fold[k])] += 1.0;
  }
  for (std::size_t f = 0; f < fold_rate.size(); ++f) fold_rate[f] = fold_count[f] > 0 ? fold_rate[f] / fold_count[f] : 0.0;
  std::seed_seq shortcut_seed{cfg.seed, std::uint64_t{0x5C}};
  Rng srng(shortcut_seed);
  for (std::size_t k = 0; k < tables.visits.size(); ++k) {
    const int f = visit_fold[k];
    const double rho = f == cfg.test_fold ? cfg.rho_test : cfg.rho_train;
    const double base = fold_rate[static_cast<std::size_t>(f)];
    const double u1 = unit(srng), u2 = unit(srng);
    bool present;
    if (u1 < std::abs(rho)) {
      present = rho >= 0 ? visit_readm[k] == 1 : visit_readm[k] == 0;
    } else {
      present = u2 < (rho >= 0 ? base : 1.0 - base);
    }
    if (present) tables.diagnoses.push_back({tables.visits[k].visit_id, std::string(kShortcutCode)});
  }
  return tables;
}

}  // namespace multehr
