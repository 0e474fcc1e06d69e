#pragma once

#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "trialscope/records.hpp"

namespace trialscope {

struct NoteDocument {
  std::string patient_id;
  Date date;
  std::string note_type;
  std::string text;
};

std::vector<NoteDocument> read_notes(const std::string& path);
void write_notes(const std::vector<NoteDocument>& notes, const std::string& path);

enum class Intent { asserted, negated, hypothetical, historical };
const char* to_string(Intent);

struct Span {
  size_t begin = 0;
  size_t end = 0;  // byte offsets, half-open
};

struct ExtractionResult {
  enum class Kind { ecog, pdl1, medication };
  Kind kind = Kind::ecog;
  Intent intent = Intent::asserted;
  Span span;
  Date date;  // note date
  std::optional<int> ecog;
  std::optional<BiomarkerResult> biomarker;
  std::optional<MedicationEvent> medication;
};

struct DrugLexicon {
  // lowercase surface form -> concept id
  std::map<std::string, std::string> surface_to_concept;
  // concept id -> drug class
  std::map<std::string, std::string> concept_class;

  static DrugLexicon load(const std::string& path);
};

struct IcdFlagSets {
  std::set<std::string> smoking_codes;
  std::set<std::string> smoking_exclusions;  // explicitly smokeless forms
  std::set<std::string> cns_codes;

  static IcdFlagSets load(const std::string& path);
};

// Deterministic sentence segmentation: boundaries at '.' or '\n' followed by
// whitespace and a capital, with an abbreviation stoplist.
std::vector<Span> segment_sentences(const std::string& text);

std::vector<ExtractionResult> extract_ecog(const NoteDocument& note);
std::vector<ExtractionResult> extract_pdl1(const NoteDocument& note);
std::vector<ExtractionResult> extract_medications(const NoteDocument& note,
                                                  const DrugLexicon& lexicon);

// Promotes asserted results into the record (ecog observations, biomarkers,
// extracted medications). Non-asserted results are never promoted.
void promote_extractions(PatientRecord& record, const std::vector<ExtractionResult>& results);

struct LineOfTherapy {
  std::string patient_id;
  int lot_index = 1;
  std::set<std::string> drugs;
  Date start_date;
  std::optional<Date> end_date;
};

// Implements the five LoT rules over administered SACT medications. Meds
// dated before diagnosis are skipped (a warning per event when sink given).
std::vector<LineOfTherapy> derive_lines_of_therapy(
    const std::vector<MedicationEvent>& administered_meds, Date diagnosis_date,
    const std::vector<Date>& progression_dates,
    const std::map<std::string, std::string>& drug_classes,
    const std::string& patient_id = {}, std::vector<std::string>* warnings = nullptr);

// Converts a raw lab reading into its canonical unit (ULN tests divide by the
// reference upper bound; fluid measures convert to g/dL or count/uL).
LabResult normalize_lab(const std::string& test_name, double value, const std::string& unit,
                        std::optional<double> reference_upper, Date date = {});

std::pair<std::optional<bool>, std::optional<bool>> flag_from_icd(
    const std::vector<std::string>& icd_codes, const IcdFlagSets& sets);

}  // namespace trialscope
