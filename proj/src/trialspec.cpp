#include "trialscope/trialspec.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include <nlohmann/json.hpp>

#include "trialscope/common.hpp"
#include "trialscope/textstruct.hpp"

namespace trialscope {

using json = nlohmann::ordered_json;

const char* to_string(Cmp v) {
  switch (v) {
    case Cmp::lt: return "<";
    case Cmp::le: return "<=";
    case Cmp::eq: return "=";
    case Cmp::ge: return ">=";
    case Cmp::gt: return ">";
    default: return "in";
  }
}

const char* to_string(AtomOutcome v) {
  switch (v) {
    case AtomOutcome::pass: return "pass";
    case AtomOutcome::fail: return "fail";
    default: return "missing";
  }
}

EligibilityExpr EligibilityExpr::make_all(std::vector<EligibilityExpr> xs) {
  EligibilityExpr e;
  e.kind = Kind::all;
  e.children = std::move(xs);
  return e;
}
EligibilityExpr EligibilityExpr::make_any(std::vector<EligibilityExpr> xs) {
  EligibilityExpr e;
  e.kind = Kind::any;
  e.children = std::move(xs);
  return e;
}
EligibilityExpr EligibilityExpr::make_not(EligibilityExpr x) {
  EligibilityExpr e;
  e.kind = Kind::negation;
  e.children.push_back(std::move(x));
  return e;
}
EligibilityExpr EligibilityExpr::make_atom(Atom a) {
  EligibilityExpr e;
  e.kind = Kind::atom;
  e.atom = std::move(a);
  return e;
}

namespace {

const std::set<std::string>& numeric_attributes() {
  static const std::set<std::string> attrs = {
      "age",        "ecog",      "line_of_therapy", "days_diagnosis_to_treatment",
      "smoking",    "cns_metastasis",
      "hemoglobin", "lymphocytes", "ALT", "AST", "ALP", "bilirubin", "ANC", "platelets", "WBC"};
  return attrs;
}

const std::set<std::string>& categorical_attributes() {
  static const std::set<std::string> attrs = {"gender", "race", "ethnicity",
                                              "histology", "site", "stage"};
  return attrs;
}

bool is_lab_attribute(const std::string& attr) {
  return attr == "hemoglobin" || attr == "lymphocytes" || attr == "ALT" || attr == "AST" ||
         attr == "ALP" || attr == "bilirubin" || attr == "ANC" || attr == "platelets" ||
         attr == "WBC";
}

Cmp cmp_from_string(const std::string& s, const std::string& where) {
  if (s == "<") return Cmp::lt;
  if (s == "<=") return Cmp::le;
  if (s == "=" || s == "==") return Cmp::eq;
  if (s == ">=") return Cmp::ge;
  if (s == ">") return Cmp::gt;
  if (s == "in" || s == "in-set") return Cmp::in_set;
  throw ConfigError(where + ": unknown comparator '" + s + "'");
}

Atom atom_from_json(const json& j, const std::string& where) {
  Atom a;
  a.attr = j.at("attr").get<std::string>();
  if (!is_known_attribute(a.attr))
    throw ConfigError(where + ": unknown attribute '" + a.attr + "'");
  a.op = cmp_from_string(j.at("op").get<std::string>(), where);
  a.strict = j.value("strict", false);
  a.unit = j.value("unit", "");

  if (a.op == Cmp::in_set) {
    if (!is_categorical_attribute(a.attr))
      throw ConfigError(where + ": attribute '" + a.attr + "' does not support 'in'");
    for (const auto& v : j.at("values")) a.set_values.push_back(v.get<std::string>());
    if (a.attr == "stage")
      for (const auto& v : a.set_values)
        if (stage_from_string(v) == Stage::unknown && v != "unknown")
          throw ConfigError(where + ": unknown stage '" + v + "'");
    return a;
  }

  if (is_categorical_attribute(a.attr))
    throw ConfigError(where + ": categorical attribute '" + a.attr + "' requires op 'in'");

  const auto& val = j.at("value");
  if (val.is_boolean())
    a.value = val.get<bool>() ? 1.0 : 0.0;
  else
    a.value = val.get<double>();

  // lab atoms are converted to the test's canonical unit at parse time
  if (is_lab_attribute(a.attr)) {
    if (a.unit.empty())
      throw ConfigError(where + ": lab atom '" + a.attr + "' requires a unit");
    try {
      LabResult norm = normalize_lab(a.attr, a.value, a.unit,
                                     a.unit == "ULN" ? std::nullopt : std::optional<double>(1.0));
      // a non-ULN unit against a ULN-canonical test means the spec author gave
      // the threshold as a multiple of the reference bound, so reference=1
      a.value = norm.value;
    } catch (const ValidationError& e) {
      throw ConfigError(where + ": " + e.what());
    }
  } else if (!a.unit.empty() && a.unit != "years" && a.unit != "days" && a.unit != "bool" &&
             a.unit != "count") {
    throw ConfigError(where + ": attribute '" + a.attr + "' does not accept unit '" + a.unit +
                      "'");
  }
  return a;
}

EligibilityExpr expr_from_json(const json& j, const std::string& where) {
  if (j.is_object() && j.contains("all")) {
    std::vector<EligibilityExpr> xs;
    size_t i = 0;
    for (const auto& c : j["all"]) xs.push_back(expr_from_json(c, where + ".all[" + std::to_string(i++) + "]"));
    return EligibilityExpr::make_all(std::move(xs));
  }
  if (j.is_object() && j.contains("any")) {
    std::vector<EligibilityExpr> xs;
    size_t i = 0;
    for (const auto& c : j["any"]) xs.push_back(expr_from_json(c, where + ".any[" + std::to_string(i++) + "]"));
    return EligibilityExpr::make_any(std::move(xs));
  }
  if (j.is_object() && j.contains("not"))
    return EligibilityExpr::make_not(expr_from_json(j["not"], where + ".not"));
  if (j.is_object() && j.contains("attr"))
    return EligibilityExpr::make_atom(atom_from_json(j, where));
  if (j.is_object() && j.empty()) return EligibilityExpr::make_all({});
  throw ConfigError(where + ": expected an atom or all/any/not combinator");
}

void collect_atom_attrs(const EligibilityExpr& e, std::set<std::string>& out) {
  if (e.kind == EligibilityExpr::Kind::atom) {
    out.insert(e.atom.attr);
    return;
  }
  for (const auto& c : e.children) collect_atom_attrs(c, out);
}

}  // namespace

bool is_known_attribute(const std::string& attr) {
  return numeric_attributes().count(attr) || categorical_attributes().count(attr);
}

bool is_categorical_attribute(const std::string& attr) {
  return categorical_attributes().count(attr) > 0;
}

TrialSpec trial_spec_from_json_text(const std::string& text, const std::string& context) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(context + ": malformed JSON: " + e.what());
  }
  TrialSpec spec;
  try {
    spec.name = j.at("name").get<std::string>();
    const auto& arms = j.at("arms");
    for (const auto& d : arms.at("treatment")) spec.treatment_drugs.insert(d.get<std::string>());
    for (const auto& d : arms.at("control")) spec.control_drugs.insert(d.get<std::string>());
    if (j.contains("line_of_therapy") && !j["line_of_therapy"].is_null()) {
      spec.line_of_therapy = j["line_of_therapy"].get<int>();
      if (*spec.line_of_therapy < 1)
        throw ConfigError(context + ".line_of_therapy: must be a positive integer");
    }
    spec.duration_days = j.at("duration_days").get<int>();
    if (j.contains("eligibility"))
      spec.eligibility = expr_from_json(j["eligibility"], context + ".eligibility");
    else
      spec.eligibility = EligibilityExpr::make_all({});
    if (j.contains("confounders"))
      spec.confounders = j["confounders"].get<std::vector<std::string>>();
    if (j.contains("required_stages") && !j["required_stages"].is_null()) {
      std::set<Stage> stages;
      for (const auto& s : j["required_stages"]) {
        Stage st = stage_from_string(s.get<std::string>());
        if (st == Stage::unknown)
          throw ConfigError(context + ".required_stages: unknown stage '" +
                            s.get<std::string>() + "'");
        stages.insert(st);
      }
      if (stages.empty()) throw ConfigError(context + ".required_stages: must be nonempty");
      spec.required_stages = std::move(stages);
    }
  } catch (const json::exception& e) {
    throw ConfigError(context + ": " + e.what());
  }

  if (spec.treatment_drugs.empty() || spec.control_drugs.empty())
    throw ConfigError(context + ".arms: both arms need at least one drug");
  for (const auto& d : spec.treatment_drugs)
    if (spec.control_drugs.count(d))
      throw ConfigError(context + ".arms: drug '" + d + "' appears in both arms");
  if (spec.duration_days <= 0)
    throw ConfigError(context + ".duration_days: must be positive");

  for (const auto& c : spec.confounders)
    if (!is_known_attribute(c))
      throw ConfigError(context + ".confounders: unknown attribute '" + c + "'");

  // covariates referenced by the eligibility criteria are dropped from the
  // adjustment set
  std::set<std::string> elig_attrs;
  collect_atom_attrs(spec.eligibility, elig_attrs);
  std::vector<std::string> kept;
  for (const auto& c : spec.confounders) {
    if (elig_attrs.count(c)) {
      spec.parse_warnings.push_back("confounder '" + c +
                                    "' appears in the eligibility criteria; excluded from the "
                                    "adjustment set");
    } else {
      kept.push_back(c);
    }
  }
  spec.confounders = std::move(kept);
  return spec;
}

TrialSpec parse_trial_spec(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open trial spec: " + path);
  std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return trial_spec_from_json_text(text, path);
}

namespace {

std::optional<const LabResult*> latest_lab(const PatientRecord& p, LabTest t, Date as_of) {
  const LabResult* best = nullptr;
  for (const auto& lab : p.labs) {
    if (lab.test != t || lab.date > as_of) continue;
    if (!best || lab.date >= best->date) best = &lab;
  }
  if (!best) return std::nullopt;
  return best;
}

const DiagnosisEvent* snapshot_diagnosis(const PatientRecord& p, Date as_of) {
  const DiagnosisEvent* best = nullptr;
  for (const auto& d : p.diagnoses) {
    if (d.date > as_of) continue;
    if (!best || d.date >= best->date) best = &d;
  }
  return best;
}

}  // namespace

std::optional<double> resolve_numeric_attribute(const PatientRecord& p, const std::string& attr,
                                                Date as_of, std::optional<int> lot) {
  if (attr == "age") return (as_of - p.demographics.birth_date) / 365.25;
  if (attr == "ecog") {
    const EcogObservation* best = nullptr;
    for (const auto& o : p.ecog_observations) {
      if (o.date > as_of) continue;
      if (!best || o.date >= best->date) best = &o;
    }
    if (!best) return std::nullopt;
    return static_cast<double>(best->ecog);
  }
  if (attr == "line_of_therapy") {
    if (!lot) return std::nullopt;
    return static_cast<double>(*lot);
  }
  if (attr == "days_diagnosis_to_treatment") {
    const DiagnosisEvent* first = nullptr;
    for (const auto& d : p.diagnoses)
      if (d.date <= as_of && (!first || d.date < first->date)) first = &d;
    if (!first) return std::nullopt;
    return static_cast<double>(as_of - first->date);
  }
  if (attr == "smoking") {
    if (!p.demographics.smoking) return std::nullopt;
    return *p.demographics.smoking ? 1.0 : 0.0;
  }
  if (attr == "cns_metastasis") {
    if (!p.demographics.cns_metastasis) return std::nullopt;
    return *p.demographics.cns_metastasis ? 1.0 : 0.0;
  }
  // labs
  try {
    LabTest t = lab_test_from_string(attr);
    auto lab = latest_lab(p, t, as_of);
    if (!lab) return std::nullopt;
    return (*lab)->value;
  } catch (const ValidationError&) {
    return std::nullopt;
  }
}

std::optional<std::string> resolve_categorical_attribute(const PatientRecord& p,
                                                         const std::string& attr, Date as_of) {
  if (attr == "gender") {
    if (p.demographics.gender == Gender::other_unknown) return std::nullopt;
    return std::string(to_string(p.demographics.gender));
  }
  if (attr == "race") {
    if (p.demographics.race == Race::unknown) return std::nullopt;
    return std::string(to_string(p.demographics.race));
  }
  if (attr == "ethnicity") {
    if (p.demographics.ethnicity == Ethnicity::unknown) return std::nullopt;
    return std::string(to_string(p.demographics.ethnicity));
  }
  const DiagnosisEvent* d = snapshot_diagnosis(p, as_of);
  if (attr == "stage") {
    if (!d || d->stage == Stage::unknown) return std::nullopt;
    return std::string(to_string(d->stage));
  }
  if (attr == "histology") {
    if (!d || d->histology.empty()) return std::nullopt;
    return d->histology;
  }
  if (attr == "site") {
    if (!d || d->site.empty()) return std::nullopt;
    return d->site;
  }
  return std::nullopt;
}

namespace {

AtomOutcome evaluate_atom(const Atom& a, const PatientRecord& p, Date as_of,
                          std::optional<int> lot) {
  if (a.op == Cmp::in_set) {
    auto v = resolve_categorical_attribute(p, a.attr, as_of);
    if (!v) return AtomOutcome::missing;
    for (const auto& s : a.set_values)
      if (*v == s) return AtomOutcome::pass;
    return AtomOutcome::fail;
  }
  auto v = resolve_numeric_attribute(p, a.attr, as_of, lot);
  if (!v) return AtomOutcome::missing;
  bool ok = false;
  switch (a.op) {
    case Cmp::lt: ok = *v < a.value; break;
    case Cmp::le: ok = *v <= a.value; break;
    case Cmp::eq: ok = *v == a.value; break;
    case Cmp::ge: ok = *v >= a.value; break;
    case Cmp::gt: ok = *v > a.value; break;
    default: ok = false;
  }
  return ok ? AtomOutcome::pass : AtomOutcome::fail;
}

// Missing data resolves at the atom (strict atoms fail, otherwise the policy
// decides); the combinators are then plain boolean, which keeps De Morgan
// identities exact under both policies.
bool evaluate_expr(const EligibilityExpr& e, const PatientRecord& p, Date as_of,
                   MissingPolicy policy, std::optional<int> lot,
                   std::vector<TraceEntry>& trace) {
  switch (e.kind) {
    case EligibilityExpr::Kind::atom: {
      AtomOutcome o = evaluate_atom(e.atom, p, as_of, lot);
      trace.push_back({e.atom.attr, e.atom.op, o});
      if (o == AtomOutcome::missing)
        return e.atom.strict ? false : policy == MissingPolicy::ignore_criterion;
      return o == AtomOutcome::pass;
    }
    case EligibilityExpr::Kind::all: {
      bool ok = true;
      for (const auto& c : e.children) ok = evaluate_expr(c, p, as_of, policy, lot, trace) && ok;
      return ok;
    }
    case EligibilityExpr::Kind::any: {
      bool ok = false;  // Any([]) is false, the De Morgan dual of All([])
      for (const auto& c : e.children) ok = evaluate_expr(c, p, as_of, policy, lot, trace) || ok;
      return ok;
    }
    default:
      return !evaluate_expr(e.children.at(0), p, as_of, policy, lot, trace);
  }
}

}  // namespace

EligibilityVerdict evaluate_eligibility(const EligibilityExpr& expr, const PatientRecord& p,
                                        Date as_of, MissingPolicy policy,
                                        std::optional<int> lot) {
  EligibilityVerdict v;
  v.eligible = evaluate_expr(expr, p, as_of, policy, lot, v.trace);
  return v;
}

}  // namespace trialscope
