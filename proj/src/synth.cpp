#include "trialscope/synth.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "trialscope/common.hpp"
#include "trialscope/rng.hpp"

namespace trialscope {

using json = nlohmann::ordered_json;

void SynthConfig::validate() const {
  if (n < 4) throw ConfigError("synth: n must be >= 4");
  if (baseline_rate <= 0) throw ConfigError("synth: baseline_rate must be positive");
  if (weibull_shape && *weibull_shape <= 0)
    throw ConfigError("synth: weibull shape must be positive");
  if (censoring_rate && *censoring_rate <= 0)
    throw ConfigError("synth: censoring_rate must be positive");
  if (!censoring_rate && !admin_censor_days)
    throw ConfigError("synth: need a censoring mechanism (rate or administrative days)");
  const size_t k = static_cast<size_t>(n_covariates());
  if (treatment_coef.size() != k || outcome_coef.size() != k)
    throw ConfigError("synth: coefficient vectors must have n_continuous + n_binary entries");
  for (double p : binary_prevalence)
    if (p <= 0 || p >= 1) throw ConfigError("synth: binary prevalence must be in (0,1)");
  for (double r : mcar_rate)
    if (r < 0 || r >= 1) throw ConfigError("synth: MCAR rate must be in [0,1)");
  if (!mcar_rate.empty() && mcar_rate.size() != k)
    throw ConfigError("synth: MCAR rates must match the covariate count");
}

namespace {

double sigmoid(double x) { return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x)); }

struct DrawResult {
  std::vector<std::vector<double>> x;
  std::vector<int> w;
  std::vector<double> y;
  std::vector<int> d;
  std::vector<double> propensity;
};

DrawResult draw_cohort(const SynthConfig& cfg, uint64_t attempt) {
  const size_t n = static_cast<size_t>(cfg.n);
  const size_t k = static_cast<size_t>(cfg.n_covariates());
  DrawResult out;
  out.x.assign(n, std::vector<double>(k));
  out.w.resize(n);
  out.y.resize(n);
  out.d.resize(n);
  out.propensity.resize(n);

  for (size_t i = 0; i < n; ++i) {
    auto rs = RngStream::derive(cfg.seed, "synth_row", attempt * 1000003ull + i);
    double logit = cfg.treatment_intercept;
    double hazard_shift = 0.0;
    for (size_t j = 0; j < k; ++j) {
      double v;
      if (j < static_cast<size_t>(cfg.n_continuous))
        v = rs.normal();
      else
        v = rs.bernoulli(cfg.binary_prevalence[j - static_cast<size_t>(cfg.n_continuous)]) ? 1.0
                                                                                           : 0.0;
      out.x[i][j] = v;
      logit += cfg.treatment_coef[j] * v;
      hazard_shift += cfg.outcome_coef[j] * v;
    }
    out.propensity[i] = sigmoid(logit);
    out.w[i] = rs.bernoulli(out.propensity[i]) ? 1 : 0;

    const double rate =
        cfg.baseline_rate * std::exp(cfg.true_log_hr * out.w[i] + hazard_shift);
    double t;
    if (cfg.weibull_shape) {
      // rate acts as the scale's reciprocal; inverse-CDF draw
      t = std::pow(-std::log(rs.uniform01_open_low()), 1.0 / *cfg.weibull_shape) / rate;
    } else {
      t = rs.exponential(rate);
    }
    t = std::max(1.0, std::ceil(t));

    double c = std::numeric_limits<double>::infinity();
    if (cfg.censoring_rate) c = std::max(1.0, std::ceil(rs.exponential(*cfg.censoring_rate)));
    if (cfg.admin_censor_days) c = std::min(c, static_cast<double>(*cfg.admin_censor_days));

    out.y[i] = std::min(t, c);
    out.d[i] = t <= c ? 1 : 0;
  }
  return out;
}

}  // namespace

std::pair<EmulationDataset, GroundTruth> generate_cohort(const SynthConfig& cfg) {
  cfg.validate();
  const size_t k = static_cast<size_t>(cfg.n_covariates());

  DrawResult draw;
  bool ok = false;
  for (uint64_t attempt = 0; attempt < 10; ++attempt) {
    draw = draw_cohort(cfg, attempt);
    const int nt = std::accumulate(draw.w.begin(), draw.w.end(), 0);
    if (nt > 0 && nt < cfg.n) {
      ok = true;
      break;
    }
  }
  if (!ok) throw NumericError("synth: an arm stayed empty over 10 draws");

  EmulationDataset ds;
  ds.trial_name = "synthetic";
  ds.encoded = true;
  for (size_t j = 0; j < k; ++j) {
    const bool binary = j >= static_cast<size_t>(cfg.n_continuous);
    const std::string name =
        binary ? "b" + std::to_string(j - static_cast<size_t>(cfg.n_continuous) + 1)
               : "x" + std::to_string(j + 1);
    ds.raw_covariates.push_back(
        {name, binary ? CovariateKind::binary : CovariateKind::continuous});
    EncodedColumn col;
    col.name = name;
    col.group = name;
    col.kind = binary ? CovariateKind::binary : CovariateKind::continuous;
    col.maskable = true;
    ds.columns.push_back(col);
  }

  const Date start = parse_date("2019-01-01");
  for (size_t i = 0; i < static_cast<size_t>(cfg.n); ++i) {
    DatasetRow row;
    {
      std::ostringstream id;
      id << 's' << std::setw(5) << std::setfill('0') << i + 1;
      row.patient_id = id.str();
    }
    row.w = draw.w[i];
    row.therapy_start = start;
    SurvivalOutcome o;
    o.time_days = static_cast<int64_t>(draw.y[i]);
    o.event = draw.d[i] == 1;
    o.origin = o.event ? SurvivalOutcome::Origin::death_date
                       : SurvivalOutcome::Origin::trial_censored;
    row.outcome = o;
    row.x = draw.x[i];
    row.missing.assign(k, 0);
    for (auto v : row.x)
      row.raw.push_back(RawValue::number(v));
    ds.rows.push_back(std::move(row));
  }

  // MCAR masks go on after outcome generation
  if (!cfg.mcar_rate.empty()) {
    for (size_t i = 0; i < ds.rows.size(); ++i) {
      auto rs = RngStream::derive(cfg.seed, "synth_mcar", i);
      for (size_t j = 0; j < k; ++j) {
        if (cfg.mcar_rate[j] > 0 && rs.bernoulli(cfg.mcar_rate[j])) {
          ds.rows[i].missing[j] = 1;
          ds.rows[i].x[j] = 0.0;
          ds.rows[i].raw[j] = RawValue::missing();
        }
      }
    }
  }

  GroundTruth truth;
  truth.true_log_hr = cfg.true_log_hr;
  truth.true_hr = std::exp(cfg.true_log_hr);
  truth.treatment_coef = cfg.treatment_coef;
  truth.outcome_coef = cfg.outcome_coef;
  truth.treatment_intercept = cfg.treatment_intercept;
  truth.true_propensity = draw.propensity;
  return {std::move(ds), std::move(truth)};
}

SyntheticCohort generate_patient_records(const SynthConfig& cfg,
                                         const std::string& treatment_drug,
                                         const std::string& control_drug) {
  if (cfg.n_continuous != 4 || cfg.binary_prevalence.size() != 2)
    throw ConfigError(
        "generate_patient_records maps exactly 4 continuous + 2 binary covariates onto the "
        "patient schema");
  auto [ds, truth] = generate_cohort(cfg);
  SyntheticCohort out;
  out.truth = truth;
  out.treatment_drug = treatment_drug;
  out.control_drug = control_drug;

  const Date start = parse_date("2019-01-01");
  for (const auto& row : ds.rows) {
    PatientRecord p;
    p.patient_id = row.patient_id;
    p.demographics.birth_date = start - 65 * 365;
    p.demographics.gender = Gender::female;
    p.demographics.last_contact_date = start + static_cast<int32_t>(row.outcome->time_days);
    if (row.outcome->event) {
      p.demographics.vital_status = VitalStatus::deceased;
      p.demographics.death_date = p.demographics.last_contact_date;
    } else {
      p.demographics.vital_status = VitalStatus::alive;
    }

    DiagnosisEvent diag;
    diag.date = start - 60;
    diag.site = "lung";
    diag.histology = "adenocarcinoma";
    diag.stage = Stage::iva;
    p.diagnoses.push_back(diag);

    MedicationEvent med;
    med.drug = row.w == 1 ? treatment_drug : control_drug;
    med.date = start;
    med.status = MedStatus::administered;
    med.source = MedSource::structured;
    p.medications.push_back(med);

    // covariates realized as labs/flags; affine maps keep the design matrix
    // equivalent after re-standardization
    const Date lab_date = start - 7;
    auto add_lab = [&](LabTest t, double v, LabUnit u) {
      LabResult lab;
      lab.test = t;
      lab.date = lab_date;
      lab.value = v;
      lab.unit = u;
      p.labs.push_back(lab);
    };
    if (!row.missing[0])
      add_lab(LabTest::hemoglobin, 12.0 + 1.5 * row.x[0], LabUnit::g_per_dl);
    if (!row.missing[1])
      add_lab(LabTest::lymphocytes, std::max(10.0, 1800.0 + 400.0 * row.x[1]),
              LabUnit::count_per_ul);
    if (!row.missing[2])
      add_lab(LabTest::alt, std::max(0.01, 0.9 + 0.25 * row.x[2]), LabUnit::uln);
    if (!row.missing[3])
      add_lab(LabTest::ast, std::max(0.01, 0.9 + 0.25 * row.x[3]), LabUnit::uln);
    if (!row.missing[4]) p.demographics.smoking = row.x[4] != 0.0;
    if (!row.missing[5]) p.demographics.cns_metastasis = row.x[5] != 0.0;

    normalize_record(p);
    validate_record(p);
    out.patients.push_back(std::move(p));
  }
  out.direct = std::move(ds);
  return out;
}

namespace {

struct NoteTemplate {
  const char* sentence;
  const char* kind;   // ecog | pdl1 | medication | none
  bool promoted;
  int ecog = -1;
  ScoreType score_type = ScoreType::other;
  ValueKind value_kind = ValueKind::percent;
  double value = 0.0;
  const char* drug = nullptr;  // placeholder {drug} target
  MedStatus status = MedStatus::administered;
};

}  // namespace

NoteCorpus generate_notes(const std::vector<PatientRecord>& patients, uint64_t seed) {
  NoteCorpus corpus;

  for (size_t i = 0; i < patients.size(); ++i) {
    const auto& p = patients[i];
    auto rs = RngStream::derive(seed, "notes", i);
    const Date note_date =
        p.medications.empty() ? p.demographics.last_contact_date : p.medications.front().date;

    std::string text;
    auto add_label = [&](SidecarLabel l) {
      l.patient_id = p.patient_id;
      l.date = note_date;
      corpus.labels.push_back(std::move(l));
    };

    // asserted ECOG sentence
    const int ecog_val = static_cast<int>(rs.uniform_int(3));
    {
      std::ostringstream s;
      switch (rs.uniform_int(3)) {
        case 0: s << "ECOG performance status: " << ecog_val << ". "; break;
        case 1: s << "ECOG " << ecog_val << " today. "; break;
        default: {
          const int kps = 90 - 20 * ecog_val;  // decile map inverse
          s << "KPS " << kps << "%. ";
          break;
        }
      }
      text += s.str();
      SidecarLabel l;
      l.kind = "ecog";
      l.promoted = true;
      l.ecog = ecog_val;
      add_label(std::move(l));
    }

    // PD-L1 sentence for about half the corpus
    if (rs.bernoulli(0.5)) {
      std::ostringstream s;
      SidecarLabel l;
      l.kind = "pdl1";
      l.promoted = true;
      BiomarkerResult b;
      b.gene_or_protein = "PD-L1";
      b.date = note_date;
      switch (rs.uniform_int(3)) {
        case 0: {
          const double v = static_cast<double>(5 + 5 * rs.uniform_int(19));
          s << "PD-L1 TPS " << v << "%. ";
          b.score_type = ScoreType::tps;
          b.value_kind = ValueKind::percent;
          b.value = v;
          break;
        }
        case 1:
          s << "PD-L1 CPS <1, negative. ";
          b.score_type = ScoreType::cps;
          b.value_kind = ValueKind::negative;
          break;
        default:
          s << "PD-L1 TPS >50%. ";
          b.score_type = ScoreType::tps;
          b.value_kind = ValueKind::range;
          b.range = std::make_pair(50.0, 100.0);
          break;
      }
      text += s.str();
      l.biomarker = std::move(b);
      add_label(std::move(l));
    }

    // medication sentence mirroring the structured administration
    if (!p.medications.empty()) {
      const auto& med = p.medications.front();
      std::ostringstream s;
      s << "Cycle 1 " << med.drug << " 200 mg IV administered. ";
      text += s.str();
      SidecarLabel l;
      l.kind = "medication";
      l.promoted = true;
      MedicationEvent ev;
      ev.drug = med.drug;
      ev.date = note_date;
      ev.dosage = Dosage{200.0, "mg"};
      ev.mode = Route::iv;
      ev.status = MedStatus::administered;
      ev.source = MedSource::extracted;
      l.medication = std::move(ev);
      add_label(std::move(l));
    }

    // distractors: extraction-shaped but never promoted
    if (rs.bernoulli(0.5)) {
      text += "Consider nivolumab at progression. ";
      SidecarLabel l;
      l.kind = "medication";
      l.promoted = false;
      add_label(std::move(l));
    }
    if (rs.bernoulli(0.3)) {
      text += "If ECOG worsens to 3, hold therapy. ";
      SidecarLabel l;
      l.kind = "ecog";
      l.promoted = false;
      add_label(std::move(l));
    }
    if (rs.bernoulli(0.3)) text += "Will order PD-L1 testing. ";

    NoteDocument note;
    note.patient_id = p.patient_id;
    note.date = note_date;
    note.note_type = "progress";
    note.text = text;
    corpus.notes.push_back(std::move(note));
  }
  return corpus;
}

void write_sidecar(const std::vector<SidecarLabel>& labels, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot open for writing: " + path);
  for (const auto& l : labels) {
    json j;
    j["patient_id"] = l.patient_id;
    j["date"] = format_date(l.date);
    j["kind"] = l.kind;
    j["promoted"] = l.promoted;
    if (l.ecog) j["ecog"] = *l.ecog;
    if (l.biomarker) {
      json b;
      b["score_type"] = to_string(l.biomarker->score_type);
      b["value_kind"] = to_string(l.biomarker->value_kind);
      if (l.biomarker->value) b["value"] = *l.biomarker->value;
      if (l.biomarker->range) b["range"] = {l.biomarker->range->first, l.biomarker->range->second};
      j["biomarker"] = std::move(b);
    }
    if (l.medication) {
      json m;
      m["drug"] = l.medication->drug;
      m["status"] = to_string(l.medication->status);
      if (l.medication->dosage)
        m["dosage"] = {{"amount", l.medication->dosage->amount},
                       {"unit", l.medication->dosage->unit}};
      if (l.medication->mode) m["mode"] = to_string(*l.medication->mode);
      j["medication"] = std::move(m);
    }
    out << j.dump() << '\n';
  }
}

std::vector<SidecarLabel> read_sidecar(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open sidecar: " + path);
  std::vector<SidecarLabel> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    json j = json::parse(line);
    SidecarLabel l;
    l.patient_id = j.at("patient_id").get<std::string>();
    l.date = parse_date(j.at("date").get<std::string>());
    l.kind = j.at("kind").get<std::string>();
    l.promoted = j.at("promoted").get<bool>();
    if (j.contains("ecog")) l.ecog = j["ecog"].get<int>();
    if (j.contains("biomarker")) {
      const auto& b = j["biomarker"];
      BiomarkerResult bio;
      bio.gene_or_protein = "PD-L1";
      bio.date = l.date;
      const std::string st = b.at("score_type").get<std::string>();
      bio.score_type = st == "CPS" ? ScoreType::cps : st == "TPS" ? ScoreType::tps : ScoreType::other;
      const std::string vk = b.at("value_kind").get<std::string>();
      bio.value_kind = vk == "percent"  ? ValueKind::percent
                       : vk == "range"  ? ValueKind::range
                       : vk == "positive" ? ValueKind::positive
                       : vk == "negative" ? ValueKind::negative
                       : vk == "high"   ? ValueKind::high
                                        : ValueKind::low;
      if (b.contains("value")) bio.value = b["value"].get<double>();
      if (b.contains("range"))
        bio.range = std::make_pair(b["range"][0].get<double>(), b["range"][1].get<double>());
      l.biomarker = std::move(bio);
    }
    if (j.contains("medication")) {
      const auto& m = j["medication"];
      MedicationEvent ev;
      ev.drug = m.at("drug").get<std::string>();
      ev.date = l.date;
      ev.source = MedSource::extracted;
      const std::string st = m.at("status").get<std::string>();
      ev.status = st == "administered"   ? MedStatus::administered
                  : st == "ordered"      ? MedStatus::ordered
                  : st == "discontinued" ? MedStatus::discontinued
                  : st == "substituted"  ? MedStatus::substituted
                                         : MedStatus::mentioned_not_administered;
      if (m.contains("dosage"))
        ev.dosage = Dosage{m["dosage"].at("amount").get<double>(), m["dosage"].value("unit", "")};
      if (m.contains("mode")) {
        const std::string mode = m["mode"].get<std::string>();
        ev.mode = mode == "IV"             ? Route::iv
                  : mode == "oral"         ? Route::oral
                  : mode == "subcutaneous" ? Route::subcutaneous
                                           : Route::other;
      }
      l.medication = std::move(ev);
    }
    out.push_back(std::move(l));
  }
  return out;
}

namespace {

std::string fact_key_ecog(const std::string& pid, Date date, int v) {
  return "ecog|" + pid + "|" + format_date(date) + "|" + std::to_string(v);
}

std::string fact_key_pdl1(const std::string& pid, const BiomarkerResult& b) {
  std::ostringstream s;
  s << "pdl1|" << pid << "|" << format_date(b.date) << "|" << to_string(b.score_type) << "|"
    << to_string(b.value_kind) << "|";
  if (b.value) s << *b.value;
  s << "|";
  if (b.range) s << b.range->first << ".." << b.range->second;
  return s.str();
}

std::string fact_key_med(const std::string& pid, const MedicationEvent& m) {
  std::ostringstream s;
  s << "med|" << pid << "|" << format_date(m.date) << "|" << m.drug << "|"
    << to_string(m.status);
  return s.str();
}

}  // namespace

ExtractionScore score_extractions(const std::vector<NoteDocument>& notes,
                                  const std::vector<SidecarLabel>& labels,
                                  const DrugLexicon& lexicon) {
  std::multiset<std::string> expected;
  for (const auto& l : labels) {
    if (!l.promoted) continue;
    if (l.kind == "ecog" && l.ecog)
      expected.insert(fact_key_ecog(l.patient_id, l.date, *l.ecog));
    else if (l.kind == "pdl1" && l.biomarker)
      expected.insert(fact_key_pdl1(l.patient_id, *l.biomarker));
    else if (l.kind == "medication" && l.medication)
      expected.insert(fact_key_med(l.patient_id, *l.medication));
  }

  std::multiset<std::string> got;
  for (const auto& note : notes) {
    for (const auto& r : extract_ecog(note))
      if (r.intent == Intent::asserted && r.ecog)
        got.insert(fact_key_ecog(note.patient_id, r.date, *r.ecog));
    for (const auto& r : extract_pdl1(note))
      if (r.intent == Intent::asserted && r.biomarker)
        got.insert(fact_key_pdl1(note.patient_id, *r.biomarker));
    for (const auto& r : extract_medications(note, lexicon))
      if (r.intent == Intent::asserted && r.medication)
        got.insert(fact_key_med(note.patient_id, *r.medication));
  }

  ExtractionScore score;
  std::multiset<std::string> remaining = expected;
  for (const auto& k : got) {
    auto it = remaining.find(k);
    if (it != remaining.end())
      remaining.erase(it);
    else
      ++score.fp;
  }
  score.tp = expected.size() - remaining.size();
  score.fn = remaining.size();
  return score;
}

}  // namespace trialscope
