#include "trialscope/cohort.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "trialscope/common.hpp"

namespace trialscope {

const char* to_string(ExclusionReason v) {
  switch (v) {
    case ExclusionReason::date_inconsistent: return "date_inconsistent";
    case ExclusionReason::gap_gt_2y: return "gap_gt_2y";
    case ExclusionReason::crossover: return "crossover";
    case ExclusionReason::duplicate: return "duplicate";
    case ExclusionReason::stage: return "stage";
    case ExclusionReason::lot: return "lot";
    case ExclusionReason::ineligible: return "ineligible";
    default: return "no_arm_drug";
  }
}

size_t EmulationDataset::n_treatment() const {
  size_t n = 0;
  for (const auto& r : rows) n += r.w == 1;
  return n;
}
size_t EmulationDataset::n_control() const {
  size_t n = 0;
  for (const auto& r : rows) n += r.w == 0;
  return n;
}

const std::vector<RawCovariate>& canonical_covariates() {
  static const std::vector<RawCovariate> cov = {
      {"age", CovariateKind::continuous},
      {"gender", CovariateKind::categorical},
      {"smoking", CovariateKind::binary},
      {"histology", CovariateKind::categorical},
      {"cns_metastasis", CovariateKind::binary},
      {"ecog", CovariateKind::continuous},
      {"race", CovariateKind::categorical},
      {"hemoglobin", CovariateKind::continuous},
      {"lymphocytes", CovariateKind::continuous},
      {"ALT", CovariateKind::continuous},
      {"AST", CovariateKind::continuous},
      {"ALP", CovariateKind::continuous},
      {"days_diagnosis_to_treatment", CovariateKind::continuous},
  };
  return cov;
}

namespace {

std::optional<Date> first_administration(const PatientRecord& p,
                                         const std::set<std::string>& drugs) {
  std::optional<Date> best;
  for (const auto& m : p.medications) {
    if (m.status != MedStatus::administered || !drugs.count(m.drug)) continue;
    if (!best || m.date < *best) best = m.date;
  }
  return best;
}

std::optional<Date> first_diagnosis(const PatientRecord& p) {
  std::optional<Date> best;
  for (const auto& d : p.diagnoses)
    if (!best || d.date < *best) best = d.date;
  return best;
}

const std::set<Stage>& default_stage_set() {
  static const std::set<Stage> stages = {Stage::iiia, Stage::iiib, Stage::iiic, Stage::iva,
                                         Stage::ivb};
  return stages;
}

std::optional<int> lot_at_start(const PatientRecord& p, Date therapy_start,
                                const std::set<std::string>& arm_drugs,
                                const DrugLexicon& lexicon) {
  auto diag = first_diagnosis(p);
  if (!diag) return std::nullopt;
  std::vector<MedicationEvent> administered;
  for (const auto& m : p.medications)
    if (m.status == MedStatus::administered) administered.push_back(m);
  auto lines = derive_lines_of_therapy(administered, *diag, {}, lexicon.concept_class,
                                       p.patient_id, nullptr);
  for (const auto& line : lines) {
    bool holds_arm_drug = false;
    for (const auto& d : line.drugs)
      if (arm_drugs.count(d)) holds_arm_drug = true;
    if (holds_arm_drug && line.start_date <= therapy_start &&
        (!line.end_date || *line.end_date >= therapy_start))
      return line.lot_index;
  }
  return std::nullopt;
}

RawValue covariate_value(const PatientRecord& p, const RawCovariate& cov, Date as_of) {
  if (cov.kind == CovariateKind::categorical) {
    auto v = resolve_categorical_attribute(p, cov.name, as_of);
    if (!v) return RawValue::missing();
    return RawValue::category(*v);
  }
  auto v = resolve_numeric_attribute(p, cov.name, as_of, std::nullopt);
  if (!v) return RawValue::missing();
  return RawValue::number(*v);
}

}  // namespace

EmulationDataset assemble_cohort(const std::vector<PatientRecord>& patients,
                                 const TrialSpec& spec, const CohortOptions& opts) {
  EmulationDataset ds;
  ds.trial_name = spec.name;
  for (const auto& name : spec.confounders) {
    bool known = false;
    for (const auto& c : canonical_covariates())
      if (c.name == name) {
        ds.raw_covariates.push_back(c);
        known = true;
        break;
      }
    if (!known) throw ConfigError("unknown confounder '" + name + "'");
  }

  const std::set<Stage>& stages =
      spec.required_stages ? *spec.required_stages : default_stage_set();

  for (const auto& p : patients) {
    auto t_treat = first_administration(p, spec.treatment_drugs);
    auto t_ctrl = first_administration(p, spec.control_drugs);
    if (!t_treat && !t_ctrl) {
      ds.exclusion_log.push_back({p.patient_id, ExclusionReason::no_arm_drug});
      continue;
    }
    // the earlier first administration defines the arm; ties go to treatment
    int w;
    Date start;
    if (t_treat && (!t_ctrl || *t_treat <= *t_ctrl)) {
      w = 1;
      start = *t_treat;
    } else {
      w = 0;
      start = *t_ctrl;
    }

    // line-of-therapy filter, ignored when the line cannot be determined
    if (spec.line_of_therapy && opts.lexicon) {
      const auto& arm = w == 1 ? spec.treatment_drugs : spec.control_drugs;
      auto lot = lot_at_start(p, start, arm, *opts.lexicon);
      if (lot && *lot != *spec.line_of_therapy) {
        ds.exclusion_log.push_back({p.patient_id, ExclusionReason::lot});
        continue;
      }
    }

    // stage inclusion (snapshot diagnosis at therapy start)
    auto stage_str = resolve_categorical_attribute(p, "stage", start);
    Stage st = stage_str ? stage_from_string(*stage_str) : Stage::unknown;
    if (!stages.count(st)) {
      ds.exclusion_log.push_back({p.patient_id, ExclusionReason::stage});
      continue;
    }

    if (opts.apply_eligibility) {
      std::optional<int> lot;
      if (opts.lexicon) {
        const auto& arm = w == 1 ? spec.treatment_drugs : spec.control_drugs;
        lot = lot_at_start(p, start, arm, *opts.lexicon);
      }
      auto verdict = evaluate_eligibility(spec.eligibility, p, start, opts.missing_policy, lot);
      if (!verdict.eligible) {
        ds.exclusion_log.push_back({p.patient_id, ExclusionReason::ineligible});
        continue;
      }
    }

    DatasetRow row;
    row.patient_id = p.patient_id;
    row.w = w;
    row.therapy_start = start;
    try {
      row.outcome = resolve_survival(p, start);
    } catch (const ValidationError&) {
      row.outcome = std::nullopt;  // removed by clean_cohort as date_inconsistent
    }
    for (const auto& cov : ds.raw_covariates) row.raw.push_back(covariate_value(p, cov, start));
    ds.rows.push_back(std::move(row));
  }

  size_t n_t = ds.n_treatment(), n_c = ds.n_control();
  if (n_t == 0)
    throw ValidationError("trial '" + spec.name + "': treatment arm empty after filtering");
  if (n_c == 0)
    throw ValidationError("trial '" + spec.name + "': control arm empty after filtering");
  return ds;
}

EmulationDataset clean_cohort(EmulationDataset ds, const std::vector<PatientRecord>& patients,
                              const TrialSpec& spec) {
  std::map<std::string, const PatientRecord*> by_id;
  for (const auto& p : patients) by_id[p.patient_id] = &p;

  std::vector<DatasetRow> kept;
  std::set<std::string> seen;
  for (auto& row : ds.rows) {
    auto it = by_id.find(row.patient_id);
    const PatientRecord* p = it == by_id.end() ? nullptr : it->second;

    if (!row.outcome) {
      ds.exclusion_log.push_back({row.patient_id, ExclusionReason::date_inconsistent});
      continue;
    }
    if (p) {
      auto diag = first_diagnosis(*p);
      if (diag && *diag > row.therapy_start) {
        ds.exclusion_log.push_back({row.patient_id, ExclusionReason::date_inconsistent});
        continue;
      }
      if (diag && row.therapy_start - *diag > 730) {
        ds.exclusion_log.push_back({row.patient_id, ExclusionReason::gap_gt_2y});
        continue;
      }
      // crossover: the other arm's drug administered within the trial window
      const auto& other = row.w == 1 ? spec.control_drugs : spec.treatment_drugs;
      bool crossed = false;
      for (const auto& m : p->medications) {
        if (m.status != MedStatus::administered || !other.count(m.drug)) continue;
        if (m.date >= row.therapy_start &&
            m.date - row.therapy_start <= spec.duration_days) {
          crossed = true;
          break;
        }
      }
      if (crossed) {
        ds.exclusion_log.push_back({row.patient_id, ExclusionReason::crossover});
        continue;
      }
    }
    if (!seen.insert(row.patient_id).second) {
      ds.exclusion_log.push_back({row.patient_id, ExclusionReason::duplicate});
      continue;
    }
    // censor at trial duration
    if (row.outcome->time_days > spec.duration_days) {
      row.outcome->time_days = spec.duration_days;
      row.outcome->event = false;
      row.outcome->origin = SurvivalOutcome::Origin::trial_censored;
    }
    kept.push_back(std::move(row));
  }
  ds.rows = std::move(kept);

  std::sort(ds.exclusion_log.begin(), ds.exclusion_log.end(),
            [](const auto& a, const auto& b) {
              if (a.first != b.first) return a.first < b.first;
              return static_cast<int>(a.second) < static_cast<int>(b.second);
            });
  return ds;
}

EmulationDataset encode_design_matrix(EmulationDataset ds) {
  const size_t n = ds.rows.size();
  ds.columns.clear();
  for (auto& row : ds.rows) {
    row.x.clear();
    row.missing.clear();
  }

  for (size_t c = 0; c < ds.raw_covariates.size(); ++c) {
    const auto& cov = ds.raw_covariates[c];
    if (cov.kind == CovariateKind::categorical) {
      std::set<std::string> levels;
      bool any_missing = false;
      for (const auto& row : ds.rows) {
        const auto& v = row.raw[c];
        if (v.state == RawValue::State::category)
          levels.insert(v.cat);
        else
          any_missing = true;
      }
      std::vector<std::string> ordered(levels.begin(), levels.end());
      if (any_missing) ordered.push_back("missing");
      for (const auto& level : ordered) {
        EncodedColumn col;
        col.name = cov.name + "=" + level;
        col.group = cov.name;
        col.level = level;
        col.kind = CovariateKind::categorical;
        ds.columns.push_back(col);
        for (auto& row : ds.rows) {
          const auto& v = row.raw[c];
          const bool hit = (v.state == RawValue::State::category && v.cat == level) ||
                           (v.state == RawValue::State::missing && level == "missing");
          row.x.push_back(hit ? 1.0 : 0.0);
          row.missing.push_back(0);
        }
      }
      continue;
    }

    if (cov.kind == CovariateKind::binary) {
      EncodedColumn col;
      col.name = cov.name;
      col.group = cov.name;
      col.kind = CovariateKind::binary;
      col.maskable = true;
      ds.columns.push_back(col);
      for (auto& row : ds.rows) {
        const auto& v = row.raw[c];
        if (v.state == RawValue::State::number) {
          row.x.push_back(v.num != 0.0 ? 1.0 : 0.0);
          row.missing.push_back(0);
        } else {
          row.x.push_back(0.0);  // placeholder, masked
          row.missing.push_back(1);
        }
      }
      continue;
    }

    // continuous: standardize over observed entries (population sd)
    double sum = 0.0;
    size_t m = 0;
    for (const auto& row : ds.rows)
      if (row.raw[c].state == RawValue::State::number) {
        sum += row.raw[c].num;
        ++m;
      }
    if (m == 0) {
      ds.warnings.push_back("covariate '" + cov.name + "' has no observed values; dropped");
      continue;
    }
    const double mean = sum / static_cast<double>(m);
    double ss = 0.0;
    for (const auto& row : ds.rows)
      if (row.raw[c].state == RawValue::State::number) {
        const double d = row.raw[c].num - mean;
        ss += d * d;
      }
    const double sd = std::sqrt(ss / static_cast<double>(m));
    if (sd == 0.0) {
      ds.warnings.push_back("covariate '" + cov.name + "' has zero variance; dropped");
      continue;
    }

    EncodedColumn col;
    col.name = cov.name;
    col.group = cov.name;
    col.kind = CovariateKind::continuous;
    col.maskable = true;
    ds.columns.push_back(col);
    for (auto& row : ds.rows) {
      const auto& v = row.raw[c];
      if (v.state == RawValue::State::number) {
        row.x.push_back((v.num - mean) / sd);
        row.missing.push_back(0);
      } else {
        row.x.push_back(0.0);  // zero placeholder = standardized mean
        row.missing.push_back(1);
      }
    }
  }
  (void)n;
  ds.encoded = true;
  return ds;
}

namespace {

std::string format_double(double v) {
  std::ostringstream ss;
  ss.precision(17);
  ss << v;
  return ss.str();
}

}  // namespace

void write_cohort_csv(const EmulationDataset& ds, const std::string& path) {
  if (!ds.encoded) throw ValidationError("cohort must be encoded before writing");
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot open for writing: " + path);
  out << "patient_id,W,Y,D";
  for (const auto& c : ds.columns) out << ',' << c.name;
  for (const auto& c : ds.columns)
    if (c.maskable) out << ",miss:" << c.name;
  out << '\n';
  for (size_t i = 0; i < ds.rows.size(); ++i) {
    const auto& r = ds.rows[i];
    if (!r.outcome) throw ValidationError("row " + r.patient_id + " has unresolved outcome");
    out << r.patient_id << ',' << r.w << ',' << r.outcome->time_days << ','
        << (r.outcome->event ? 1 : 0);
    for (double v : r.x) out << ',' << format_double(v);
    for (size_t c = 0; c < ds.columns.size(); ++c)
      if (ds.columns[c].maskable) out << ',' << static_cast<int>(r.missing[c]);
    out << '\n';
  }
}

void write_exclusions_csv(const EmulationDataset& ds, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot open for writing: " + path);
  out << "patient_id,reason\n";
  for (const auto& [id, reason] : ds.exclusion_log) out << id << ',' << to_string(reason) << '\n';
}

EmulationDataset read_cohort_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open cohort csv: " + path);
  std::string header;
  if (!std::getline(in, header)) throw ValidationError("empty cohort csv: " + path);

  std::vector<std::string> fields;
  {
    std::stringstream ss(header);
    std::string f;
    while (std::getline(ss, f, ',')) fields.push_back(f);
  }
  if (fields.size() < 4 || fields[0] != "patient_id" || fields[1] != "W" || fields[2] != "Y" ||
      fields[3] != "D")
    throw ValidationError("cohort csv header must start with patient_id,W,Y,D");

  EmulationDataset ds;
  ds.encoded = true;
  std::vector<size_t> mask_for_col;  // column index -> mask field index (or SIZE_MAX)
  size_t first_mask = fields.size();
  for (size_t i = 4; i < fields.size(); ++i)
    if (fields[i].rfind("miss:", 0) == 0) {
      first_mask = i;
      break;
    }
  for (size_t i = 4; i < first_mask; ++i) {
    EncodedColumn col;
    col.name = fields[i];
    const auto eq = fields[i].find('=');
    if (eq != std::string::npos) {
      col.group = fields[i].substr(0, eq);
      col.level = fields[i].substr(eq + 1);
      col.kind = CovariateKind::categorical;
    } else {
      col.group = fields[i];
      col.kind = CovariateKind::continuous;
    }
    ds.columns.push_back(col);
    mask_for_col.push_back(SIZE_MAX);
  }
  for (size_t i = first_mask; i < fields.size(); ++i) {
    const std::string name = fields[i].substr(5);
    bool found = false;
    for (size_t c = 0; c < ds.columns.size(); ++c)
      if (ds.columns[c].name == name) {
        ds.columns[c].maskable = true;
        mask_for_col[c] = i;
        found = true;
        break;
      }
    if (!found) throw ValidationError("mask column '" + fields[i] + "' has no value column");
  }
  // binary kind back-inference: maskable non-categorical columns whose values
  // are all 0/1 behave identically either way; keep continuous.

  std::string line;
  size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string f;
    std::vector<std::string> vals;
    while (std::getline(ss, f, ',')) vals.push_back(f);
    if (vals.size() != fields.size())
      throw ValidationError(path + ":" + std::to_string(lineno) + ": wrong field count");
    DatasetRow row;
    row.patient_id = vals[0];
    row.w = std::stoi(vals[1]);
    SurvivalOutcome o;
    o.time_days = std::stoll(vals[2]);
    o.event = vals[3] == "1";
    o.origin = o.event ? SurvivalOutcome::Origin::death_date
                       : SurvivalOutcome::Origin::last_contact;
    row.outcome = o;
    for (size_t c = 0; c < ds.columns.size(); ++c) row.x.push_back(std::stod(vals[4 + c]));
    row.missing.assign(ds.columns.size(), 0);
    for (size_t c = 0; c < ds.columns.size(); ++c)
      if (mask_for_col[c] != SIZE_MAX && vals[mask_for_col[c]] == "1") row.missing[c] = 1;
    ds.rows.push_back(std::move(row));
  }
  return ds;
}

}  // namespace trialscope
