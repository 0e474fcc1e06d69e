#pragma once

#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "trialscope/dates.hpp"

namespace trialscope {

enum class Gender { female, male, other_unknown };
enum class Race { white, black, asian, other, unknown };
enum class Ethnicity { hispanic, non_hispanic, unknown };
enum class VitalStatus { alive, deceased, unknown };
enum class Stage { ia, ib, iia, iib, iiia, iiib, iiic, iva, ivb, unknown };
enum class LabTest { hemoglobin, lymphocytes, alt, ast, alp, bilirubin, anc, platelets, wbc };
enum class LabUnit { uln, g_per_dl, count_per_ul };
enum class ScoreType { cps, tps, other };
enum class ValueKind { percent, range, positive, negative, high, low };
enum class MedStatus { administered, ordered, discontinued, substituted, mentioned_not_administered };
enum class MedSource { structured, extracted };
enum class Route { iv, oral, subcutaneous, intramuscular, other, unknown };

const char* to_string(Gender);
const char* to_string(Race);
const char* to_string(Ethnicity);
const char* to_string(VitalStatus);
const char* to_string(Stage);
const char* to_string(LabTest);
const char* to_string(LabUnit);
const char* to_string(ScoreType);
const char* to_string(ValueKind);
const char* to_string(MedStatus);
const char* to_string(MedSource);
const char* to_string(Route);

Stage stage_from_string(std::string_view);
LabTest lab_test_from_string(std::string_view);  // throws on unknown

struct Demographics {
  Date birth_date;
  Gender gender = Gender::other_unknown;
  Race race = Race::unknown;
  Ethnicity ethnicity = Ethnicity::unknown;
  VitalStatus vital_status = VitalStatus::unknown;
  std::optional<Date> death_date;
  Date last_contact_date;
  std::optional<bool> smoking;
  std::optional<bool> cns_metastasis;
};

struct DiagnosisEvent {
  Date date;
  std::string site;
  std::string histology;
  Stage stage = Stage::unknown;
  std::vector<std::string> icd_codes;
};

struct Dosage {
  double amount = 0.0;
  std::string unit;
  bool operator==(const Dosage&) const = default;
};

struct MedicationEvent {
  std::string drug;  // normalized concept id
  Date date;
  std::optional<Dosage> dosage;
  std::optional<std::string> frequency;
  std::optional<Route> mode;
  MedStatus status = MedStatus::administered;
  MedSource source = MedSource::structured;
};

struct LabResult {
  LabTest test = LabTest::hemoglobin;
  Date date;
  double value = 0.0;
  LabUnit unit = LabUnit::g_per_dl;
  std::optional<double> reference_upper;
};

struct BiomarkerResult {
  std::string gene_or_protein;
  ScoreType score_type = ScoreType::other;
  ValueKind value_kind = ValueKind::percent;
  std::optional<double> value;                      // percent
  std::optional<std::pair<double, double>> range;   // value_kind == range
  Date date;
};

struct EcogObservation {
  Date date;
  int ecog = 0;  // 0..5
};

struct PatientRecord {
  std::string patient_id;
  Demographics demographics;
  std::vector<DiagnosisEvent> diagnoses;
  std::vector<MedicationEvent> medications;
  std::vector<LabResult> labs;
  std::vector<BiomarkerResult> biomarkers;
  std::vector<EcogObservation> ecog_observations;
  std::vector<std::string> notes_refs;
};

struct SurvivalOutcome {
  enum class Origin { death_date, last_contact, trial_censored };
  int64_t time_days = 0;
  bool event = false;
  Origin origin = Origin::last_contact;
};

// Sorts all event lists ascending by date (stable, idempotent).
void normalize_record(PatientRecord&);

// Enforces the record invariants; throws ValidationError naming the field.
void validate_record(const PatientRecord&);

// JSONL I/O. Unknown fields are ignored; a warning per unknown field is
// appended to *warnings when given. Malformed lines and duplicate ids throw
// ValidationError with the line number.
std::vector<PatientRecord> read_patients(const std::string& path,
                                         std::vector<std::string>* warnings = nullptr);
void write_patients(const std::vector<PatientRecord>& records, const std::string& path);

std::string record_to_json_line(const PatientRecord&);
PatientRecord record_from_json_line(const std::string& line,
                                    std::vector<std::string>* warnings = nullptr);

SurvivalOutcome resolve_survival(const PatientRecord&, Date therapy_start);

}  // namespace trialscope
