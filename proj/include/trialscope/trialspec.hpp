#pragma once

#include <memory>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "trialscope/records.hpp"

namespace trialscope {

enum class Cmp { lt, le, eq, ge, gt, in_set };
const char* to_string(Cmp);

struct Atom {
  std::string attr;
  Cmp op = Cmp::eq;
  double value = 0.0;                   // numeric comparators, in canonical units
  std::vector<std::string> set_values;  // op == in_set
  std::string unit;                     // as written in the spec file
  bool strict = false;                  // missing counts as fail regardless of policy
};

struct EligibilityExpr {
  enum class Kind { atom, all, any, negation };
  Kind kind = Kind::all;
  Atom atom;
  std::vector<EligibilityExpr> children;

  static EligibilityExpr make_all(std::vector<EligibilityExpr> xs);
  static EligibilityExpr make_any(std::vector<EligibilityExpr> xs);
  static EligibilityExpr make_not(EligibilityExpr x);
  static EligibilityExpr make_atom(Atom a);
};

struct TrialSpec {
  std::string name;
  std::set<std::string> treatment_drugs;
  std::set<std::string> control_drugs;
  std::optional<int> line_of_therapy;
  int duration_days = 0;
  EligibilityExpr eligibility;  // All([]) means always eligible
  std::vector<std::string> confounders;
  std::optional<std::set<Stage>> required_stages;
  std::vector<std::string> parse_warnings;
};

// The closed attribute namespace shared by eligibility atoms and the
// canonical covariate builder.
bool is_known_attribute(const std::string& attr);
bool is_categorical_attribute(const std::string& attr);

TrialSpec parse_trial_spec(const std::string& path);
TrialSpec trial_spec_from_json_text(const std::string& text, const std::string& context);

enum class AtomOutcome { pass, fail, missing };
const char* to_string(AtomOutcome);

enum class MissingPolicy { ignore_criterion, exclude_patient };

struct TraceEntry {
  std::string attr;
  Cmp op;
  AtomOutcome outcome;
};

struct EligibilityVerdict {
  bool eligible = true;
  std::vector<TraceEntry> trace;
};

// Snapshot accessors: the most recent observation at or before as_of.
std::optional<double> resolve_numeric_attribute(const PatientRecord&, const std::string& attr,
                                                Date as_of, std::optional<int> lot);
std::optional<std::string> resolve_categorical_attribute(const PatientRecord&,
                                                         const std::string& attr, Date as_of);

EligibilityVerdict evaluate_eligibility(const EligibilityExpr&, const PatientRecord&, Date as_of,
                                        MissingPolicy policy,
                                        std::optional<int> lot = std::nullopt);

}  // namespace trialscope
