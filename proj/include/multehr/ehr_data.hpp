#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace multehr {

// Seconds since 1970-01-01T00:00:00 (no time zone handling).
using Timestamp = std::int64_t;
inline constexpr Timestamp kSecondsPerDay = 86400;

// Accepts "YYYY-MM-DD", "YYYY-MM-DDTHH:MM[:SS]" and the same with a space
// separator.
std::optional<Timestamp> parse_timestamp(std::string_view text);
std::string format_timestamp(Timestamp t);

struct PatientRow {
  std::string patient_id;
  std::string gender;  // may be empty
  std::optional<int> birth_year;
};

struct VisitRow {
  std::string visit_id;
  std::string patient_id;
  Timestamp admit_time = 0;
  std::optional<Timestamp> discharge_time;
  bool died_in_hospital = false;
};

struct CodeRow {
  std::string visit_id;
  std::string code;
};

struct EhrTables {
  std::vector<PatientRow> patients;
  std::vector<VisitRow> visits;
  std::vector<CodeRow> diagnoses;
  std::vector<CodeRow> prescriptions;
  std::vector<CodeRow> procedures;
  std::vector<CodeRow> lab_events;
};

struct FileReport {
  std::string file;
  std::size_t rows_read = 0;
  std::size_t rows_accepted = 0;
  std::size_t rows_rejected = 0;
  std::vector<std::string> diagnostics;
};

struct IngestResult {
  EhrTables tables;
  std::vector<FileReport> report;
};

// Reads patients.csv, visits.csv, diagnoses.csv, prescriptions.csv,
// procedures.csv and the optional lab_events.csv from `dir`.
//
// Fatal (DataError): missing file or column, duplicate primary key, a visit
// whose patient does not exist, a code row whose visit does not exist.
// Rejected and counted: rows with the wrong field count, unparsable or
// inverted timestamps, bad flags, empty codes, and code rows of rejected visits.
IngestResult ingest_csv(const std::filesystem::path& dir);

// Writes the same schemas ingest_csv reads. Lab events are written only when
// present.
void write_csv(const EhrTables& tables, const std::filesystem::path& dir);

// Checks primary-key uniqueness, foreign keys and time ordering; throws
// DataError listing offending rows.
void validate_tables(const EhrTables& tables);

inline constexpr int kLosClasses = 10;

// <1 day -> 0; whole days 1..7 -> 1..7; 8..14 days -> 8; longer -> 9.
int los_class(double duration_days);

struct TaskLabels {
  // All per-visit vectors are indexed like EhrTables::visits.
  std::vector<int> mortality;
  std::vector<std::optional<int>> readmission;
  std::vector<std::optional<int>> los;
  // Sorted indices into drug_vocabulary.
  std::vector<std::vector<int>> drugs;
  std::vector<std::string> drug_vocabulary;
  std::size_t missing_discharge = 0;
};

// READM = 1 iff the same patient has a later admission starting no more than
// `readm_window_days` after this visit's discharge. Visits without a discharge
// time get no READM/LOS label and are counted in `missing_discharge`.
TaskLabels extract_labels(const EhrTables& tables, int readm_window_days = 15);

// Fold id per patient (indexed like EhrTables::patients). Patients are
// shuffled with `seed` and dealt round-robin, so fold sizes differ by <= 1.
std::vector<int> split_patients(std::size_t n_patients, int folds, std::uint64_t seed);
std::vector<int> split_patients(const EhrTables& tables, int folds, std::uint64_t seed);

inline constexpr std::string_view kShortcutCode = "DX_SHORTCUT";

struct SynthConfig {
  std::size_t n_patients = 2000;
  double mean_visits = 2.0;  // per patient, before truncation at death
  std::size_t n_diagnosis_codes = 200;
  std::size_t n_prescription_codes = 100;
  std::size_t n_procedure_codes = 50;
  std::size_t severity_dim = 4;
  double mean_diagnoses = 8.0;
  double mean_procedures = 1.5;
  double mortality_rate = 0.1;
  int readmission_window_days = 15;
  // Phi correlation between the shortcut diagnosis and READM.
  double rho_train = 0.0;
  double rho_test = 0.0;
  int n_folds = 5;
  int test_fold = 0;
  std::uint64_t seed = 0;
};

void validate_synth_config(const SynthConfig& cfg);

// Synthetic EHR with a latent per-patient severity driving diagnoses,
// procedures, MORT, READM and LOS (shared signal across tasks), prescriptions
// drawn from diagnosis-specific drug sets (DR signal), and the shortcut
// diagnosis kShortcutCode planted with correlation rho_train to READM in the
// training folds and rho_test in `test_fold`. Folds are
// split_patients(n_patients, n_folds, seed).
EhrTables synth_generate(const SynthConfig& cfg);

}  // namespace multehr
