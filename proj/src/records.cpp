#include "trialscope/records.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "trialscope/common.hpp"

namespace trialscope {

using json = nlohmann::ordered_json;

const char* to_string(Gender v) {
  switch (v) {
    case Gender::female: return "female";
    case Gender::male: return "male";
    default: return "unknown";
  }
}
const char* to_string(Race v) {
  switch (v) {
    case Race::white: return "white";
    case Race::black: return "black";
    case Race::asian: return "asian";
    case Race::other: return "other";
    default: return "unknown";
  }
}
const char* to_string(Ethnicity v) {
  switch (v) {
    case Ethnicity::hispanic: return "hispanic";
    case Ethnicity::non_hispanic: return "non_hispanic";
    default: return "unknown";
  }
}
const char* to_string(VitalStatus v) {
  switch (v) {
    case VitalStatus::alive: return "alive";
    case VitalStatus::deceased: return "deceased";
    default: return "unknown";
  }
}
const char* to_string(Stage v) {
  switch (v) {
    case Stage::ia: return "IA";
    case Stage::ib: return "IB";
    case Stage::iia: return "IIA";
    case Stage::iib: return "IIB";
    case Stage::iiia: return "IIIA";
    case Stage::iiib: return "IIIB";
    case Stage::iiic: return "IIIC";
    case Stage::iva: return "IVA";
    case Stage::ivb: return "IVB";
    default: return "unknown";
  }
}
const char* to_string(LabTest v) {
  switch (v) {
    case LabTest::hemoglobin: return "hemoglobin";
    case LabTest::lymphocytes: return "lymphocytes";
    case LabTest::alt: return "ALT";
    case LabTest::ast: return "AST";
    case LabTest::alp: return "ALP";
    case LabTest::bilirubin: return "bilirubin";
    case LabTest::anc: return "ANC";
    case LabTest::platelets: return "platelets";
    default: return "WBC";
  }
}
const char* to_string(LabUnit v) {
  switch (v) {
    case LabUnit::uln: return "ULN";
    case LabUnit::g_per_dl: return "g_per_dL";
    default: return "count_per_uL";
  }
}
const char* to_string(ScoreType v) {
  switch (v) {
    case ScoreType::cps: return "CPS";
    case ScoreType::tps: return "TPS";
    default: return "other";
  }
}
const char* to_string(ValueKind v) {
  switch (v) {
    case ValueKind::percent: return "percent";
    case ValueKind::range: return "range";
    case ValueKind::positive: return "positive";
    case ValueKind::negative: return "negative";
    case ValueKind::high: return "high";
    default: return "low";
  }
}
const char* to_string(MedStatus v) {
  switch (v) {
    case MedStatus::administered: return "administered";
    case MedStatus::ordered: return "ordered";
    case MedStatus::discontinued: return "discontinued";
    case MedStatus::substituted: return "substituted";
    default: return "mentioned-not-administered";
  }
}
const char* to_string(MedSource v) {
  return v == MedSource::structured ? "structured" : "extracted";
}
const char* to_string(Route v) {
  switch (v) {
    case Route::iv: return "IV";
    case Route::oral: return "oral";
    case Route::subcutaneous: return "subcutaneous";
    case Route::intramuscular: return "intramuscular";
    case Route::other: return "other";
    default: return "unknown";
  }
}

namespace {

template <typename E>
E enum_from(std::string_view s, std::initializer_list<std::pair<std::string_view, E>> table,
            E fallback) {
  for (const auto& [name, val] : table)
    if (s == name) return val;
  return fallback;
}

Gender gender_from(std::string_view s) {
  return enum_from<Gender>(s,
                           {{"female", Gender::female},
                            {"male", Gender::male},
                            {"other", Gender::other_unknown},
                            {"other/unknown", Gender::other_unknown}},
                           Gender::other_unknown);
}
Race race_from(std::string_view s) {
  return enum_from<Race>(s,
                         {{"white", Race::white},
                          {"black", Race::black},
                          {"asian", Race::asian},
                          {"other", Race::other}},
                         Race::unknown);
}
Ethnicity ethnicity_from(std::string_view s) {
  return enum_from<Ethnicity>(
      s, {{"hispanic", Ethnicity::hispanic}, {"non_hispanic", Ethnicity::non_hispanic}},
      Ethnicity::unknown);
}
VitalStatus vital_from(std::string_view s) {
  return enum_from<VitalStatus>(
      s, {{"alive", VitalStatus::alive}, {"deceased", VitalStatus::deceased}},
      VitalStatus::unknown);
}
LabUnit lab_unit_from(std::string_view s) {
  if (s == "ULN") return LabUnit::uln;
  if (s == "g_per_dL") return LabUnit::g_per_dl;
  if (s == "count_per_uL") return LabUnit::count_per_ul;
  throw ValidationError("unknown lab unit '" + std::string(s) +
                        "' (expected ULN, g_per_dL or count_per_uL)");
}
ScoreType score_type_from(std::string_view s) {
  return enum_from<ScoreType>(s, {{"CPS", ScoreType::cps}, {"TPS", ScoreType::tps}},
                              ScoreType::other);
}
ValueKind value_kind_from(std::string_view s) {
  return enum_from<ValueKind>(s,
                              {{"percent", ValueKind::percent},
                               {"range", ValueKind::range},
                               {"positive", ValueKind::positive},
                               {"negative", ValueKind::negative},
                               {"high", ValueKind::high},
                               {"low", ValueKind::low}},
                              ValueKind::percent);
}
MedStatus med_status_from(std::string_view s) {
  return enum_from<MedStatus>(s,
                              {{"administered", MedStatus::administered},
                               {"ordered", MedStatus::ordered},
                               {"discontinued", MedStatus::discontinued},
                               {"substituted", MedStatus::substituted},
                               {"mentioned-not-administered", MedStatus::mentioned_not_administered},
                               {"mentioned_not_administered", MedStatus::mentioned_not_administered}},
                              MedStatus::mentioned_not_administered);
}
MedSource med_source_from(std::string_view s) {
  return s == "extracted" ? MedSource::extracted : MedSource::structured;
}
Route route_from(std::string_view s) {
  return enum_from<Route>(s,
                          {{"IV", Route::iv},
                           {"oral", Route::oral},
                           {"subcutaneous", Route::subcutaneous},
                           {"intramuscular", Route::intramuscular},
                           {"other", Route::other}},
                          Route::unknown);
}

void warn_unknown_fields(const json& obj, std::initializer_list<std::string_view> known,
                         const std::string& where, std::vector<std::string>* warnings) {
  if (!warnings) return;
  for (auto it = obj.begin(); it != obj.end(); ++it) {
    bool found = false;
    for (auto k : known)
      if (it.key() == k) { found = true; break; }
    if (!found) warnings->push_back("ignoring unknown field '" + it.key() + "' in " + where);
  }
}

}  // namespace

Stage stage_from_string(std::string_view s) {
  return enum_from<Stage>(s,
                          {{"IA", Stage::ia},
                           {"IB", Stage::ib},
                           {"IIA", Stage::iia},
                           {"IIB", Stage::iib},
                           {"IIIA", Stage::iiia},
                           {"IIIB", Stage::iiib},
                           {"IIIC", Stage::iiic},
                           {"IVA", Stage::iva},
                           {"IVB", Stage::ivb}},
                          Stage::unknown);
}

LabTest lab_test_from_string(std::string_view s) {
  if (s == "hemoglobin") return LabTest::hemoglobin;
  if (s == "lymphocytes") return LabTest::lymphocytes;
  if (s == "ALT") return LabTest::alt;
  if (s == "AST") return LabTest::ast;
  if (s == "ALP") return LabTest::alp;
  if (s == "bilirubin") return LabTest::bilirubin;
  if (s == "ANC") return LabTest::anc;
  if (s == "platelets") return LabTest::platelets;
  if (s == "WBC") return LabTest::wbc;
  throw ValidationError("unknown lab test '" + std::string(s) + "'");
}

void normalize_record(PatientRecord& r) {
  auto by_date = [](const auto& a, const auto& b) { return a.date < b.date; };
  std::stable_sort(r.diagnoses.begin(), r.diagnoses.end(), by_date);
  std::stable_sort(r.medications.begin(), r.medications.end(), by_date);
  std::stable_sort(r.labs.begin(), r.labs.end(), by_date);
  std::stable_sort(r.biomarkers.begin(), r.biomarkers.end(), by_date);
  std::stable_sort(r.ecog_observations.begin(), r.ecog_observations.end(), by_date);
}

void validate_record(const PatientRecord& r) {
  auto fail = [&](const std::string& field, const std::string& why) {
    throw ValidationError("patient '" + r.patient_id + "': field '" + field + "' " + why);
  };
  if (r.patient_id.empty()) throw ValidationError("patient_id must be nonempty");
  const auto& d = r.demographics;
  if (d.last_contact_date < d.birth_date) fail("last_contact_date", "before birth_date");
  if (d.death_date) {
    if (*d.death_date < d.birth_date) fail("death_date", "before birth_date");
    if (d.vital_status != VitalStatus::deceased)
      fail("vital_status", "must be 'deceased' when death_date is present");
  }
  for (const auto& ev : r.diagnoses) {
    if (ev.date < d.birth_date) fail("diagnoses.date", "before birth_date");
    if (ev.date > d.last_contact_date) fail("diagnoses.date", "after last_contact_date");
  }
  for (const auto& ev : r.medications) {
    if (ev.date < d.birth_date) fail("medications.date", "before birth_date");
    if (ev.drug.empty()) fail("medications.drug", "must be nonempty");
  }
  for (const auto& ev : r.labs) {
    if (ev.date < d.birth_date) fail("labs.date", "before birth_date");
    if (!std::isfinite(ev.value) || ev.value < 0) fail("labs.value", "must be finite and >= 0");
  }
  for (const auto& ev : r.biomarkers) {
    if (ev.date < d.birth_date) fail("biomarkers.date", "before birth_date");
    if (ev.value_kind == ValueKind::percent) {
      if (!ev.value || *ev.value < 0 || *ev.value > 100)
        fail("biomarkers.value", "percent must be in [0,100]");
    }
    if (ev.value_kind == ValueKind::range) {
      if (!ev.range || ev.range->first >= ev.range->second)
        fail("biomarkers.range", "requires lo < hi");
    }
  }
  for (const auto& ev : r.ecog_observations) {
    if (ev.date < d.birth_date) fail("ecog_observations.date", "before birth_date");
    if (ev.ecog < 0 || ev.ecog > 5) fail("ecog_observations.ecog", "must be in 0..5");
  }
}

namespace {

json demographics_to_json(const Demographics& d) {
  json j;
  j["birth_date"] = format_date(d.birth_date);
  j["gender"] = to_string(d.gender);
  j["race"] = to_string(d.race);
  j["ethnicity"] = to_string(d.ethnicity);
  j["vital_status"] = to_string(d.vital_status);
  if (d.death_date) j["death_date"] = format_date(*d.death_date);
  j["last_contact_date"] = format_date(d.last_contact_date);
  if (d.smoking) j["smoking"] = *d.smoking;
  if (d.cns_metastasis) j["cns_metastasis"] = *d.cns_metastasis;
  return j;
}

Demographics demographics_from_json(const json& j, std::vector<std::string>* warnings) {
  warn_unknown_fields(j,
                      {"birth_date", "gender", "race", "ethnicity", "vital_status", "death_date",
                       "last_contact_date", "smoking", "cns_metastasis"},
                      "demographics", warnings);
  Demographics d;
  d.birth_date = parse_date(j.at("birth_date").get<std::string>());
  if (j.contains("gender")) d.gender = gender_from(j["gender"].get<std::string>());
  if (j.contains("race")) d.race = race_from(j["race"].get<std::string>());
  if (j.contains("ethnicity")) d.ethnicity = ethnicity_from(j["ethnicity"].get<std::string>());
  if (j.contains("vital_status")) d.vital_status = vital_from(j["vital_status"].get<std::string>());
  if (j.contains("death_date") && !j["death_date"].is_null())
    d.death_date = parse_date(j["death_date"].get<std::string>());
  d.last_contact_date = parse_date(j.at("last_contact_date").get<std::string>());
  if (j.contains("smoking") && !j["smoking"].is_null()) d.smoking = j["smoking"].get<bool>();
  if (j.contains("cns_metastasis") && !j["cns_metastasis"].is_null())
    d.cns_metastasis = j["cns_metastasis"].get<bool>();
  return d;
}

}  // namespace

std::string record_to_json_line(const PatientRecord& r) {
  json j;
  j["patient_id"] = r.patient_id;
  j["demographics"] = demographics_to_json(r.demographics);
  j["diagnoses"] = json::array();
  for (const auto& e : r.diagnoses) {
    json o;
    o["date"] = format_date(e.date);
    o["site"] = e.site;
    o["histology"] = e.histology;
    o["stage"] = to_string(e.stage);
    o["icd_codes"] = e.icd_codes;
    j["diagnoses"].push_back(std::move(o));
  }
  j["medications"] = json::array();
  for (const auto& e : r.medications) {
    json o;
    o["drug"] = e.drug;
    o["date"] = format_date(e.date);
    if (e.dosage) o["dosage"] = {{"amount", e.dosage->amount}, {"unit", e.dosage->unit}};
    if (e.frequency) o["frequency"] = *e.frequency;
    if (e.mode) o["mode"] = to_string(*e.mode);
    o["status"] = to_string(e.status);
    o["source"] = to_string(e.source);
    j["medications"].push_back(std::move(o));
  }
  j["labs"] = json::array();
  for (const auto& e : r.labs) {
    json o;
    o["test"] = to_string(e.test);
    o["date"] = format_date(e.date);
    o["value"] = e.value;
    o["unit"] = to_string(e.unit);
    if (e.reference_upper) o["reference_upper"] = *e.reference_upper;
    j["labs"].push_back(std::move(o));
  }
  j["biomarkers"] = json::array();
  for (const auto& e : r.biomarkers) {
    json o;
    o["gene_or_protein"] = e.gene_or_protein;
    o["score_type"] = to_string(e.score_type);
    o["value_kind"] = to_string(e.value_kind);
    if (e.value) o["value"] = *e.value;
    if (e.range) o["range"] = {e.range->first, e.range->second};
    o["date"] = format_date(e.date);
    j["biomarkers"].push_back(std::move(o));
  }
  j["ecog_observations"] = json::array();
  for (const auto& e : r.ecog_observations)
    j["ecog_observations"].push_back({{"date", format_date(e.date)}, {"ecog", e.ecog}});
  j["notes_refs"] = r.notes_refs;
  return j.dump();
}

PatientRecord record_from_json_line(const std::string& line, std::vector<std::string>* warnings) {
  json j = json::parse(line);
  warn_unknown_fields(j,
                      {"patient_id", "demographics", "diagnoses", "medications", "labs",
                       "biomarkers", "ecog_observations", "notes_refs"},
                      "patient record", warnings);
  PatientRecord r;
  r.patient_id = j.at("patient_id").get<std::string>();
  r.demographics = demographics_from_json(j.at("demographics"), warnings);
  for (const auto& o : j.value("diagnoses", json::array())) {
    DiagnosisEvent e;
    e.date = parse_date(o.at("date").get<std::string>());
    e.site = o.value("site", "");
    e.histology = o.value("histology", "");
    e.stage = stage_from_string(o.value("stage", "unknown"));
    if (o.contains("icd_codes")) e.icd_codes = o["icd_codes"].get<std::vector<std::string>>();
    r.diagnoses.push_back(std::move(e));
  }
  for (const auto& o : j.value("medications", json::array())) {
    MedicationEvent e;
    e.drug = o.at("drug").get<std::string>();
    e.date = parse_date(o.at("date").get<std::string>());
    if (o.contains("dosage") && !o["dosage"].is_null())
      e.dosage = Dosage{o["dosage"].at("amount").get<double>(), o["dosage"].value("unit", "")};
    if (o.contains("frequency") && !o["frequency"].is_null())
      e.frequency = o["frequency"].get<std::string>();
    if (o.contains("mode") && !o["mode"].is_null())
      e.mode = route_from(o["mode"].get<std::string>());
    e.status = med_status_from(o.value("status", "administered"));
    e.source = med_source_from(o.value("source", "structured"));
    r.medications.push_back(std::move(e));
  }
  for (const auto& o : j.value("labs", json::array())) {
    LabResult e;
    e.test = lab_test_from_string(o.at("test").get<std::string>());
    e.date = parse_date(o.at("date").get<std::string>());
    e.value = o.at("value").get<double>();
    e.unit = lab_unit_from(o.at("unit").get<std::string>());
    if (o.contains("reference_upper") && !o["reference_upper"].is_null())
      e.reference_upper = o["reference_upper"].get<double>();
    r.labs.push_back(std::move(e));
  }
  for (const auto& o : j.value("biomarkers", json::array())) {
    BiomarkerResult e;
    e.gene_or_protein = o.at("gene_or_protein").get<std::string>();
    e.score_type = score_type_from(o.value("score_type", "other"));
    e.value_kind = value_kind_from(o.at("value_kind").get<std::string>());
    if (o.contains("value") && !o["value"].is_null()) e.value = o["value"].get<double>();
    if (o.contains("range") && !o["range"].is_null())
      e.range = std::make_pair(o["range"][0].get<double>(), o["range"][1].get<double>());
    e.date = parse_date(o.at("date").get<std::string>());
    r.biomarkers.push_back(std::move(e));
  }
  for (const auto& o : j.value("ecog_observations", json::array())) {
    EcogObservation e;
    e.date = parse_date(o.at("date").get<std::string>());
    e.ecog = o.at("ecog").get<int>();
    r.ecog_observations.push_back(e);
  }
  if (j.contains("notes_refs")) r.notes_refs = j["notes_refs"].get<std::vector<std::string>>();
  normalize_record(r);
  validate_record(r);
  return r;
}

std::vector<PatientRecord> read_patients(const std::string& path,
                                         std::vector<std::string>* warnings) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open patients file: " + path);
  std::vector<PatientRecord> out;
  std::set<std::string> seen;
  std::string line;
  size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      PatientRecord r = record_from_json_line(line, warnings);
      if (!seen.insert(r.patient_id).second)
        throw ValidationError("duplicate patient_id '" + r.patient_id + "'");
      out.push_back(std::move(r));
    } catch (const ValidationError& e) {
      throw ValidationError(path + ":" + std::to_string(lineno) + ": " + e.what());
    } catch (const json::exception& e) {
      throw ValidationError(path + ":" + std::to_string(lineno) + ": malformed record: " +
                            e.what());
    }
  }
  return out;
}

void write_patients(const std::vector<PatientRecord>& records, const std::string& path) {
  for (const auto& r : records) validate_record(r);
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot open for writing: " + path);
  for (const auto& r : records) out << record_to_json_line(r) << '\n';
  if (!out) throw ConfigError("write failed: " + path);
}

SurvivalOutcome resolve_survival(const PatientRecord& r, Date therapy_start) {
  const auto& d = r.demographics;
  if (therapy_start < d.birth_date)
    throw ValidationError("patient '" + r.patient_id + "': therapy start before birth date");
  SurvivalOutcome out;
  if (d.death_date) {
    if (*d.death_date < therapy_start)
      throw ValidationError("patient '" + r.patient_id + "': death_date before therapy start");
    out.time_days = *d.death_date - therapy_start;
    out.event = true;
    out.origin = SurvivalOutcome::Origin::death_date;
  } else {
    if (d.last_contact_date < therapy_start)
      throw ValidationError("patient '" + r.patient_id +
                            "': last_contact_date before therapy start");
    out.time_days = d.last_contact_date - therapy_start;
    out.event = false;
    out.origin = SurvivalOutcome::Origin::last_contact;
  }
  return out;
}

}  // namespace trialscope
