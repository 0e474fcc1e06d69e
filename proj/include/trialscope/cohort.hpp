#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "trialscope/records.hpp"
#include "trialscope/textstruct.hpp"
#include "trialscope/trialspec.hpp"

namespace trialscope {

enum class ExclusionReason {
  date_inconsistent,
  gap_gt_2y,
  crossover,
  duplicate,
  stage,
  lot,
  ineligible,
  no_arm_drug
};
const char* to_string(ExclusionReason);

enum class CovariateKind { continuous, binary, categorical };

struct RawValue {
  enum class State { number, category, missing };
  State state = State::missing;
  double num = 0.0;
  std::string cat;

  static RawValue missing() { return {}; }
  static RawValue number(double v) { return {State::number, v, {}}; }
  static RawValue category(std::string v) { return {State::category, 0.0, std::move(v)}; }
};

struct RawCovariate {
  std::string name;
  CovariateKind kind = CovariateKind::continuous;
};

// One encoded design-matrix column. One-hot columns share their covariate's
// name in `group` and carry the level; `maskable` columns participate in the
// missingness mask (continuous + binary flags).
struct EncodedColumn {
  std::string name;   // e.g. "age" or "gender=female"
  std::string group;  // source covariate
  std::string level;  // one-hot level ("" otherwise)
  CovariateKind kind = CovariateKind::continuous;
  bool maskable = false;
};

struct DatasetRow {
  std::string patient_id;
  int w = 0;
  Date therapy_start;
  std::optional<SurvivalOutcome> outcome;
  std::vector<RawValue> raw;       // aligned with EmulationDataset::raw_covariates
  std::vector<double> x;           // aligned with columns (after encoding)
  std::vector<uint8_t> missing;    // aligned with columns
};

struct EmulationDataset {
  std::string trial_name;
  std::vector<RawCovariate> raw_covariates;
  std::vector<EncodedColumn> columns;  // empty until encode_design_matrix
  std::vector<DatasetRow> rows;
  std::vector<std::pair<std::string, ExclusionReason>> exclusion_log;
  std::vector<std::string> warnings;
  bool encoded = false;

  double y(size_t i) const { return static_cast<double>(rows[i].outcome->time_days); }
  int d(size_t i) const { return rows[i].outcome->event ? 1 : 0; }
  size_t n_treatment() const;
  size_t n_control() const;
};

struct CohortOptions {
  bool apply_eligibility = true;
  MissingPolicy missing_policy = MissingPolicy::ignore_criterion;
  const DrugLexicon* lexicon = nullptr;  // for LoT derivation; optional
};

EmulationDataset assemble_cohort(const std::vector<PatientRecord>& patients,
                                 const TrialSpec& spec, const CohortOptions& opts);

EmulationDataset clean_cohort(EmulationDataset ds, const std::vector<PatientRecord>& patients,
                              const TrialSpec& spec);

EmulationDataset encode_design_matrix(EmulationDataset ds);

void write_cohort_csv(const EmulationDataset& ds, const std::string& path);
void write_exclusions_csv(const EmulationDataset& ds, const std::string& path);
EmulationDataset read_cohort_csv(const std::string& path);

// The canonical covariate set the paper adjusts for.
const std::vector<RawCovariate>& canonical_covariates();

}  // namespace trialscope
