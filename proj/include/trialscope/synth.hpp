#pragma once

#include <optional>
#include <string>
#include <vector>

#include "trialscope/cohort.hpp"
#include "trialscope/records.hpp"
#include "trialscope/textstruct.hpp"

namespace trialscope {

struct SynthConfig {
  int n = 2000;
  double true_log_hr = -0.35667494393873245;  // ln 0.7
  int n_continuous = 4;
  std::vector<double> binary_prevalence = {0.5, 0.35};
  double treatment_intercept = -0.70;
  std::vector<double> treatment_coef = {0.5, -0.35, 0.25, 0.0, 1.4, 0.0};
  std::vector<double> outcome_coef = {0.10, -0.06, 0.04, 0.0, 0.32, 0.08};
  double baseline_rate = 1.0 / 250.0;
  std::optional<double> weibull_shape;   // exponential baseline when absent
  std::optional<double> censoring_rate;  // independent exponential censoring
  std::optional<int> admin_censor_days = 730;
  std::vector<double> mcar_rate;  // per covariate column; empty = fully observed
  uint64_t seed = 1;

  void validate() const;
  int n_covariates() const { return n_continuous + static_cast<int>(binary_prevalence.size()); }
};

struct GroundTruth {
  double true_hr = 0.7;
  double true_log_hr = -0.35667494393873245;
  std::vector<double> treatment_coef;
  std::vector<double> outcome_coef;
  double treatment_intercept = 0.0;
  std::vector<double> true_propensity;
};

// Confounded survival cohort with known generative effect. Regenerates (up to
// 10 attempts) if a draw leaves an arm empty.
std::pair<EmulationDataset, GroundTruth> generate_cohort(const SynthConfig& cfg);

// The same cohort realized as patient records (labs/flags carry the
// covariates; the arm drug administration marks therapy start).
struct SyntheticCohort {
  std::vector<PatientRecord> patients;
  EmulationDataset direct;
  GroundTruth truth;
  std::string treatment_drug;
  std::string control_drug;
};
SyntheticCohort generate_patient_records(const SynthConfig& cfg,
                                         const std::string& treatment_drug = "pembrolizumab",
                                         const std::string& control_drug = "docetaxel");

// Templated clinical notes with exact sidecar labels for scoring the
// extractors.
struct SidecarLabel {
  std::string patient_id;
  Date date;
  std::string kind;  // ecog | pdl1 | medication
  bool promoted = false;
  std::optional<int> ecog;
  std::optional<BiomarkerResult> biomarker;
  std::optional<MedicationEvent> medication;
};

struct NoteCorpus {
  std::vector<NoteDocument> notes;
  std::vector<SidecarLabel> labels;
};

NoteCorpus generate_notes(const std::vector<PatientRecord>& patients, uint64_t seed);

void write_sidecar(const std::vector<SidecarLabel>& labels, const std::string& path);
std::vector<SidecarLabel> read_sidecar(const std::string& path);

struct ExtractionScore {
  size_t tp = 0, fp = 0, fn = 0;
  double precision() const { return tp + fp == 0 ? 1.0 : double(tp) / double(tp + fp); }
  double recall() const { return tp + fn == 0 ? 1.0 : double(tp) / double(tp + fn); }
};

// Exact-match scoring of promoted extractions against the sidecar.
ExtractionScore score_extractions(const std::vector<NoteDocument>& notes,
                                  const std::vector<SidecarLabel>& labels,
                                  const DrugLexicon& lexicon);

}  // namespace trialscope
