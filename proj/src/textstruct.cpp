#include "trialscope/textstruct.hpp"

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "trialscope/common.hpp"

namespace trialscope {

using json = nlohmann::ordered_json;

const char* to_string(Intent v) {
  switch (v) {
    case Intent::asserted: return "asserted";
    case Intent::negated: return "negated";
    case Intent::hypothetical: return "hypothetical";
    default: return "historical";
  }
}

std::vector<NoteDocument> read_notes(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open notes file: " + path);
  std::vector<NoteDocument> out;
  std::string line;
  size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      json j = json::parse(line);
      NoteDocument n;
      n.patient_id = j.at("patient_id").get<std::string>();
      n.date = parse_date(j.at("date").get<std::string>());
      n.note_type = j.value("note_type", "progress");
      n.text = j.at("text").get<std::string>();
      out.push_back(std::move(n));
    } catch (const json::exception& e) {
      throw ValidationError(path + ":" + std::to_string(lineno) + ": malformed note: " + e.what());
    }
  }
  return out;
}

void write_notes(const std::vector<NoteDocument>& notes, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot open for writing: " + path);
  for (const auto& n : notes) {
    json j;
    j["patient_id"] = n.patient_id;
    j["date"] = format_date(n.date);
    j["note_type"] = n.note_type;
    j["text"] = n.text;
    out << j.dump() << '\n';
  }
}

namespace {

std::string ascii_lower(std::string_view s) {
  std::string out(s);
  for (char& c : out)
    if (c >= 'A' && c <= 'Z') c = static_cast<char>(c - 'A' + 'a');
  return out;
}

bool is_token_char(unsigned char c) {
  return std::isalnum(c) || c == '-' || c == '.' || c == '/' || c == '%' || c == '<' ||
         c == '>' || c >= 0x80;
}

struct Token {
  std::string lower;
  size_t begin = 0;
  size_t end = 0;
  size_t sentence = 0;
};

std::vector<Token> tokenize(const std::string& text, const std::vector<Span>& sentences) {
  std::vector<Token> out;
  size_t i = 0;
  const size_t n = text.size();
  while (i < n) {
    if (!is_token_char(static_cast<unsigned char>(text[i]))) {
      ++i;
      continue;
    }
    size_t j = i;
    while (j < n && is_token_char(static_cast<unsigned char>(text[j]))) ++j;
    size_t b = i, e = j;
    // trailing sentence punctuation is not part of the token
    while (e > b && (text[e - 1] == '.' || text[e - 1] == '-' || text[e - 1] == '/')) {
      // keep a dot that is part of an abbreviation-like internal pattern only when
      // followed by more token chars, which it is not here
      if (text[e - 1] == '.' && e - b >= 3 && text[e - 3] == '.') break;  // "e.g."
      --e;
    }
    while (b < e && (text[b] == '-' || text[b] == '/' || text[b] == '.')) ++b;
    if (b < e) {
      Token t;
      t.lower = ascii_lower(std::string_view(text).substr(b, e - b));
      t.begin = b;
      t.end = e;
      out.push_back(std::move(t));
    }
    i = j;
  }
  // assign sentence ids
  size_t s = 0;
  for (auto& t : out) {
    while (s + 1 < sentences.size() && t.begin >= sentences[s].end) ++s;
    t.sentence = s;
  }
  return out;
}

const std::array<std::string_view, 12> kAbbrevStoplist = {
    "dr", "mr", "mrs", "ms", "st", "mg", "mcg", "e.g", "i.e", "vs", "etc", "fig"};

bool is_abbreviation_before(const std::string& text, size_t dot) {
  size_t b = dot;
  while (b > 0 && (std::isalnum(static_cast<unsigned char>(text[b - 1])) || text[b - 1] == '.'))
    --b;
  if (b == dot) return false;
  std::string word = ascii_lower(std::string_view(text).substr(b, dot - b));
  for (auto a : kAbbrevStoplist)
    if (word == a) return true;
  return false;
}

}  // namespace

std::vector<Span> segment_sentences(const std::string& text) {
  std::vector<size_t> bounds{0};
  const size_t n = text.size();
  for (size_t i = 0; i < n; ++i) {
    const char c = text[i];
    if (c != '.' && c != '\n') continue;
    if (c == '.' && is_abbreviation_before(text, i)) continue;
    size_t j = i + 1;
    // a period needs at least one whitespace; the newline is its own whitespace
    if (c == '.' && (j >= n || !std::isspace(static_cast<unsigned char>(text[j])))) continue;
    while (j < n && std::isspace(static_cast<unsigned char>(text[j]))) ++j;
    if (j < n && std::isupper(static_cast<unsigned char>(text[j]))) bounds.push_back(j);
  }
  bounds.push_back(n);
  std::vector<Span> out;
  for (size_t k = 0; k + 1 < bounds.size(); ++k)
    if (bounds[k + 1] > bounds[k]) out.push_back({bounds[k], bounds[k + 1]});
  if (out.empty()) out.push_back({0, n});
  return out;
}

namespace {

// Closed intent cue lists; scope is the same sentence, cue strictly before the entity.
struct CueMatch {
  size_t token_index;
  size_t len;
  Intent intent;
};

const std::vector<std::pair<std::vector<std::string_view>, Intent>>& intent_cues() {
  static const std::vector<std::pair<std::vector<std::string_view>, Intent>> cues = {
      {{"no"}, Intent::negated},
      {{"denies"}, Intent::negated},
      {{"without"}, Intent::negated},
      {{"if"}, Intent::hypothetical},
      {{"consider"}, Intent::hypothetical},
      {{"plan", "to"}, Intent::hypothetical},
      {{"will", "order"}, Intent::hypothetical},
      {{"discussed"}, Intent::hypothetical},
      {{"history", "of"}, Intent::historical},
      {{"previously"}, Intent::historical},
  };
  return cues;
}

std::vector<CueMatch> find_cues(const std::vector<Token>& toks) {
  std::vector<CueMatch> out;
  for (size_t i = 0; i < toks.size(); ++i) {
    for (const auto& [seq, intent] : intent_cues()) {
      if (i + seq.size() > toks.size()) continue;
      bool match = true;
      for (size_t k = 0; k < seq.size(); ++k) {
        if (toks[i + k].lower != seq[k] || toks[i + k].sentence != toks[i].sentence) {
          match = false;
          break;
        }
      }
      if (match) out.push_back({i, seq.size(), intent});
    }
  }
  return out;
}

// The nearest cue fully preceding the entity in the same sentence wins.
Intent intent_at(const std::vector<CueMatch>& cues, const std::vector<Token>& toks,
                 size_t entity_index) {
  Intent best = Intent::asserted;
  size_t best_pos = 0;
  bool found = false;
  for (const auto& c : cues) {
    if (toks[c.token_index].sentence != toks[entity_index].sentence) continue;
    if (c.token_index + c.len > entity_index) continue;
    if (!found || c.token_index >= best_pos) {
      best = c.intent;
      best_pos = c.token_index;
      found = true;
    }
  }
  return best;
}

bool parse_int_token(const std::string& s, int& out) {
  if (s.empty() || s.size() > 4) return false;
  int v = 0;
  for (char c : s) {
    if (c < '0' || c > '9') return false;
    v = v * 10 + (c - '0');
  }
  out = v;
  return true;
}

// percent-scale token: "90" or "90%"
bool parse_percent_token(const std::string& s, int& out) {
  std::string t = s;
  if (!t.empty() && t.back() == '%') t.pop_back();
  return parse_int_token(t, out) && out >= 0 && out <= 100;
}

int percent_scale_to_ecog(int v) {
  if (v >= 90) return 0;
  if (v >= 70) return 1;
  if (v >= 50) return 2;
  if (v >= 30) return 3;
  if (v >= 10) return 4;
  return 5;
}

const std::array<std::string_view, 16> kEcogSkipWords = {
    "performance", "status", "score",  "scale", "of", "is",      "was",    "currently",
    "now",         "ps",     "worsens", "worsened", "to", "at", "remains", "stable"};

bool ecog_skip_word(const std::string& s) {
  for (auto w : kEcogSkipWords)
    if (s == w) return true;
  return false;
}

}  // namespace

std::vector<ExtractionResult> extract_ecog(const NoteDocument& note) {
  std::vector<ExtractionResult> out;
  const auto sentences = segment_sentences(note.text);
  const auto toks = tokenize(note.text, sentences);
  const auto cues = find_cues(toks);

  for (size_t i = 0; i < toks.size(); ++i) {
    const std::string& w = toks[i].lower;
    const bool ecog_trigger = w == "ecog";
    const bool kps_trigger = w == "kps" || w == "karnofsky";
    const bool lansky_trigger = w == "lansky";
    const bool pps_trigger = w == "pps" || w == "palliative";
    if (!ecog_trigger && !kps_trigger && !lansky_trigger && !pps_trigger) continue;

    std::optional<int> value;
    size_t value_tok = i;
    for (size_t j = i + 1; j < std::min(toks.size(), i + 7); ++j) {
      if (toks[j].sentence != toks[i].sentence) break;
      int v = 0;
      if (ecog_trigger && toks[j].lower.size() == 1 && parse_int_token(toks[j].lower, v) &&
          v <= 5) {
        value = v;
        value_tok = j;
        break;
      }
      if (!ecog_trigger && parse_percent_token(toks[j].lower, v)) {
        value = percent_scale_to_ecog(v);
        value_tok = j;
        break;
      }
      if (!ecog_skip_word(toks[j].lower)) break;
    }
    if (!value) continue;

    ExtractionResult r;
    r.kind = ExtractionResult::Kind::ecog;
    r.date = note.date;
    r.ecog = *value;
    r.span = {toks[i].begin, toks[value_tok].end};
    r.intent = intent_at(cues, toks, i);
    out.push_back(std::move(r));
  }
  return out;
}

namespace {

struct Pdl1Value {
  ValueKind kind;
  std::optional<double> value;
  std::optional<std::pair<double, double>> range;
};

bool parse_number(const std::string& s, double& out) {
  if (s.empty()) return false;
  char* end = nullptr;
  out = std::strtod(s.c_str(), &end);
  return end == s.c_str() + s.size() && std::isfinite(out);
}

std::optional<Pdl1Value> parse_pdl1_value_token(const std::string& tok, bool adjacent) {
  if (tok == "negative") return Pdl1Value{ValueKind::negative, {}, {}};
  if (tok == "positive") return Pdl1Value{ValueKind::positive, {}, {}};
  if (tok == "high") return Pdl1Value{ValueKind::high, {}, {}};
  if (tok == "low") return Pdl1Value{ValueKind::low, {}, {}};

  std::string t = tok;
  const bool has_percent = !t.empty() && t.back() == '%';
  if (has_percent) t.pop_back();
  if (t.empty()) return std::nullopt;

  if (t[0] == '<' || t[0] == '>') {
    const char op = t[0];
    double v;
    if (!parse_number(t.substr(1), v) || v < 0 || v > 100) return std::nullopt;
    if (op == '<') {
      // sub-threshold expression: "<1%" is the clinical negative
      if (v <= 1.0) return Pdl1Value{ValueKind::negative, {}, {}};
      return Pdl1Value{ValueKind::range, {}, std::make_pair(0.0, v)};
    }
    return Pdl1Value{ValueKind::range, {}, std::make_pair(v, 100.0)};
  }

  const auto dash = t.find('-');
  if (dash != std::string::npos && dash > 0 && t.find('-', dash + 1) == std::string::npos) {
    double lo, hi;
    if (parse_number(t.substr(0, dash), lo) && parse_number(t.substr(dash + 1), hi) && lo < hi &&
        hi <= 100 && lo >= 0)
      return Pdl1Value{ValueKind::range, {}, std::make_pair(lo, hi)};
    return std::nullopt;
  }

  double v;
  if (!parse_number(t, v) || v < 0 || v > 100) return std::nullopt;
  if (!has_percent && !adjacent) return std::nullopt;  // bare numbers only right after the score
  return Pdl1Value{ValueKind::percent, v, {}};
}

bool is_pdl1_token(const std::string& s) { return s == "pd-l1" || s == "pdl1" || s == "pd-l-1"; }

}  // namespace

std::vector<ExtractionResult> extract_pdl1(const NoteDocument& note) {
  std::vector<ExtractionResult> out;
  const auto sentences = segment_sentences(note.text);
  const auto toks = tokenize(note.text, sentences);
  const auto cues = find_cues(toks);

  for (size_t s = 0; s < sentences.size(); ++s) {
    std::vector<size_t> score_toks, context_toks;
    for (size_t i = 0; i < toks.size(); ++i) {
      if (toks[i].sentence != s) continue;
      if (toks[i].lower == "cps" || toks[i].lower == "tps") score_toks.push_back(i);
      if (is_pdl1_token(toks[i].lower) || toks[i].lower == "cps" || toks[i].lower == "tps")
        context_toks.push_back(i);
    }
    if (context_toks.empty()) continue;

    std::vector<ExtractionResult> found;
    for (size_t i = 0; i < toks.size(); ++i) {
      if (toks[i].sentence != s) continue;
      const bool adjacent =
          i > 0 && toks[i - 1].sentence == s &&
          (toks[i - 1].lower == "cps" || toks[i - 1].lower == "tps" ||
           is_pdl1_token(toks[i - 1].lower));
      auto v = parse_pdl1_value_token(toks[i].lower, adjacent);
      if (!v) continue;

      // link to the nearest score-type mention; ties resolve leftward
      size_t anchor = SIZE_MAX;
      size_t best_dist = SIZE_MAX;
      for (size_t sc : score_toks) {
        const size_t dist = sc < i ? i - sc : sc - i;
        if (dist < best_dist) {
          best_dist = dist;
          anchor = sc;
        }
      }
      ScoreType st = ScoreType::other;
      if (anchor != SIZE_MAX)
        st = toks[anchor].lower == "cps" ? ScoreType::cps : ScoreType::tps;
      else
        anchor = context_toks.front();

      ExtractionResult r;
      r.kind = ExtractionResult::Kind::pdl1;
      r.date = note.date;
      BiomarkerResult b;
      b.gene_or_protein = "PD-L1";
      b.score_type = st;
      b.value_kind = v->kind;
      b.value = v->value;
      b.range = v->range;
      b.date = note.date;
      r.biomarker = std::move(b);
      r.span = {std::min(toks[anchor].begin, toks[i].begin),
                std::max(toks[anchor].end, toks[i].end)};
      r.intent = intent_at(cues, toks, std::min(anchor, i));
      found.push_back(std::move(r));
    }

    // dedupe identical (score_type, kind, value) facts within the sentence
    for (auto& r : found) {
      bool dup = false;
      for (const auto& prev : out) {
        if (prev.kind != ExtractionResult::Kind::pdl1) continue;
        const auto& a = *prev.biomarker;
        const auto& b = *r.biomarker;
        if (a.score_type == b.score_type && a.value_kind == b.value_kind && a.value == b.value &&
            a.range == b.range && prev.intent == r.intent) {
          dup = true;
          break;
        }
      }
      if (!dup) out.push_back(std::move(r));
    }
  }
  return out;
}

namespace {

enum class MedCue { admin, ordered, discontinued, substituted, suggestion };

std::optional<MedCue> med_cue(const std::string& s) {
  static const std::map<std::string_view, MedCue> table = {
      {"administered", MedCue::admin},   {"received", MedCue::admin},
      {"given", MedCue::admin},          {"infused", MedCue::admin},
      {"initiated", MedCue::admin},      {"cycle", MedCue::admin},
      {"continues", MedCue::admin},      {"continue", MedCue::admin},
      {"ordered", MedCue::ordered},      {"prescribed", MedCue::ordered},
      {"discontinued", MedCue::discontinued}, {"stopped", MedCue::discontinued},
      {"held", MedCue::discontinued},    {"discontinue", MedCue::discontinued},
      {"hold", MedCue::discontinued},
      {"substituted", MedCue::substituted}, {"switched", MedCue::substituted},
      {"transitioned", MedCue::substituted},
      {"discussed", MedCue::suggestion}, {"consider", MedCue::suggestion},
      {"considering", MedCue::suggestion}, {"recommend", MedCue::suggestion},
      {"recommended", MedCue::suggestion}, {"suggested", MedCue::suggestion},
      {"planned", MedCue::suggestion},   {"plan", MedCue::suggestion},
  };
  auto it = table.find(s);
  if (it == table.end()) return std::nullopt;
  return it->second;
}

std::optional<Route> route_token(const std::string& s) {
  static const std::map<std::string_view, Route> table = {
      {"iv", Route::iv},           {"intravenous", Route::iv},
      {"intravenously", Route::iv}, {"po", Route::oral},
      {"oral", Route::oral},       {"orally", Route::oral},
      {"subcutaneous", Route::subcutaneous}, {"subq", Route::subcutaneous},
      {"sc", Route::subcutaneous}, {"im", Route::intramuscular}};
  auto it = table.find(s);
  if (it == table.end()) return std::nullopt;
  return it->second;
}

bool frequency_token(const std::string& s) {
  static const std::array<std::string_view, 10> freq = {
      "daily", "weekly", "monthly", "bid", "tid", "qd", "qod", "q2w", "q3w", "q4w"};
  for (auto f : freq)
    if (s == f) return true;
  return false;
}

bool dose_unit_token(const std::string& s) {
  static const std::array<std::string_view, 7> units = {"mg",    "mcg",   "g",
                                                        "ml",    "mg/m2", "mg/kg",
                                                        "units"};
  for (auto u : units)
    if (s == u) return true;
  return false;
}

bool iso_date_token(const std::string& s, Date& out) {
  if (s.size() != 10 || s[4] != '-' || s[7] != '-') return false;
  try {
    out = parse_date(s);
    return true;
  } catch (const ValidationError&) {
    return false;
  }
}

struct MedMention {
  size_t tok_begin;  // first token index
  size_t tok_len;
  std::string concept_id;
};

}  // namespace

DrugLexicon DrugLexicon::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open drug lexicon: " + path);
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw ConfigError("malformed drug lexicon " + path + ": " + e.what());
  }
  DrugLexicon lex;
  for (const auto& d : j.at("drugs")) {
    const std::string concept = d.at("concept").get<std::string>();
    lex.concept_class[concept] = d.at("class").get<std::string>();
    lex.surface_to_concept[ascii_lower(concept)] = concept;
    for (const auto& s : d.value("surfaces", json::array()))
      lex.surface_to_concept[ascii_lower(s.get<std::string>())] = concept;
  }
  return lex;
}

std::vector<ExtractionResult> extract_medications(const NoteDocument& note,
                                                  const DrugLexicon& lexicon) {
  std::vector<ExtractionResult> out;
  const auto sentences = segment_sentences(note.text);
  const auto toks = tokenize(note.text, sentences);
  const auto cues = find_cues(toks);

  // pass 1: mentions, longest n-gram first (up to 3 tokens)
  std::vector<MedMention> mentions;
  for (size_t i = 0; i < toks.size(); ++i) {
    for (size_t len = 3; len >= 1; --len) {
      if (i + len > toks.size()) continue;
      if (toks[i + len - 1].sentence != toks[i].sentence) continue;
      std::string key = toks[i].lower;
      for (size_t k = 1; k < len; ++k) key += " " + toks[i + k].lower;
      auto it = lexicon.surface_to_concept.find(key);
      if (it != lexicon.surface_to_concept.end()) {
        mentions.push_back({i, len, it->second});
        i += len - 1;
        break;
      }
    }
  }

  // pass 2/3: attributes and cues, each linked to the nearest mention in the
  // same sentence (ties resolve to the leftward mention)
  struct Linked {
    std::optional<Dosage> dosage;
    std::optional<std::string> frequency;
    std::optional<Route> mode;
    std::optional<Date> date;
    std::vector<std::pair<MedCue, size_t>> cues;  // cue + token index
  };
  std::vector<Linked> linked(mentions.size());

  auto nearest_mention = [&](size_t tok_index) -> std::optional<size_t> {
    std::optional<size_t> best;
    size_t best_dist = SIZE_MAX;
    for (size_t m = 0; m < mentions.size(); ++m) {
      const auto& men = mentions[m];
      if (toks[men.tok_begin].sentence != toks[tok_index].sentence) continue;
      size_t dist;
      if (tok_index < men.tok_begin)
        dist = men.tok_begin - tok_index;
      else if (tok_index >= men.tok_begin + men.tok_len)
        dist = tok_index - (men.tok_begin + men.tok_len - 1);
      else
        dist = 0;
      if (dist < best_dist) {  // strict < keeps the leftward mention on ties
        best_dist = dist;
        best = m;
      }
    }
    return best;
  };

  std::vector<bool> is_mention_tok(toks.size(), false);
  for (const auto& m : mentions)
    for (size_t k = 0; k < m.tok_len; ++k) is_mention_tok[m.tok_begin + k] = true;

  for (size_t i = 0; i < toks.size(); ++i) {
    if (is_mention_tok[i]) continue;
    const std::string& w = toks[i].lower;
    auto target = nearest_mention(i);
    if (!target) continue;
    Linked& L = linked[*target];

    double amount;
    if (i + 1 < toks.size() && toks[i + 1].sentence == toks[i].sentence &&
        parse_number(w, amount) && dose_unit_token(toks[i + 1].lower)) {
      if (!L.dosage) L.dosage = Dosage{amount, toks[i + 1].lower};
      continue;
    }
    if (frequency_token(w)) {
      if (!L.frequency) L.frequency = w;
      continue;
    }
    if (auto r = route_token(w)) {
      if (!L.mode) L.mode = *r;
      continue;
    }
    Date d;
    if (iso_date_token(w, d)) {
      if (!L.date) L.date = d;
      continue;
    }
    if (auto c = med_cue(w)) L.cues.push_back({*c, i});
  }

  // pass 4: administration status
  for (size_t m = 0; m < mentions.size(); ++m) {
    const auto& men = mentions[m];
    const Linked& L = linked[m];

    MedStatus status;
    bool has_discontinued = false, has_substituted_before = false, has_substituted_after = false;
    bool has_suggestion = false, has_ordered = false, has_admin = false;
    for (const auto& [cue, idx] : L.cues) {
      switch (cue) {
        case MedCue::discontinued: has_discontinued = true; break;
        case MedCue::substituted:
          (idx < men.tok_begin ? has_substituted_before : has_substituted_after) = true;
          break;
        case MedCue::suggestion: has_suggestion = true; break;
        case MedCue::ordered: has_ordered = true; break;
        case MedCue::admin: has_admin = true; break;
      }
    }
    if (has_discontinued)
      status = MedStatus::discontinued;
    else if (has_substituted_after)
      status = MedStatus::substituted;  // "X substituted/switched ..." retires X
    else if (has_substituted_before)
      status = MedStatus::administered;  // "... switched to X" introduces X
    else if (has_suggestion)
      status = MedStatus::mentioned_not_administered;
    else if (has_ordered)
      status = MedStatus::ordered;
    else if (has_admin)
      status = MedStatus::administered;
    else if (L.dosage || L.mode || L.frequency)
      status = MedStatus::administered;
    else
      status = MedStatus::mentioned_not_administered;

    ExtractionResult r;
    r.kind = ExtractionResult::Kind::medication;
    r.date = note.date;
    MedicationEvent ev;
    ev.drug = men.concept_id;
    ev.date = L.date.value_or(note.date);
    ev.dosage = L.dosage;
    ev.frequency = L.frequency;
    ev.mode = L.mode;
    ev.status = status;
    ev.source = MedSource::extracted;
    r.medication = std::move(ev);
    r.span = {toks[men.tok_begin].begin, toks[men.tok_begin + men.tok_len - 1].end};
    r.intent = intent_at(cues, toks, men.tok_begin);
    out.push_back(std::move(r));
  }
  return out;
}

void promote_extractions(PatientRecord& record, const std::vector<ExtractionResult>& results) {
  for (const auto& r : results) {
    if (r.intent != Intent::asserted) continue;
    switch (r.kind) {
      case ExtractionResult::Kind::ecog:
        if (r.ecog) record.ecog_observations.push_back({r.date, *r.ecog});
        break;
      case ExtractionResult::Kind::pdl1:
        if (r.biomarker) record.biomarkers.push_back(*r.biomarker);
        break;
      case ExtractionResult::Kind::medication:
        if (r.medication) record.medications.push_back(*r.medication);
        break;
    }
  }
  normalize_record(record);
}

std::vector<LineOfTherapy> derive_lines_of_therapy(
    const std::vector<MedicationEvent>& administered_meds, Date diagnosis_date,
    const std::vector<Date>& progression_dates,
    const std::map<std::string, std::string>& drug_classes, const std::string& patient_id,
    std::vector<std::string>* warnings) {
  std::vector<MedicationEvent> meds;
  for (const auto& m : administered_meds) {
    if (m.status != MedStatus::administered) continue;
    if (drug_classes.find(m.drug) == drug_classes.end()) continue;  // non-SACT
    if (m.date < diagnosis_date) {
      if (warnings)
        warnings->push_back("patient '" + patient_id + "': medication '" + m.drug + "' on " +
                            format_date(m.date) + " precedes diagnosis; excluded from LoT");
      continue;
    }
    meds.push_back(m);
  }
  std::stable_sort(meds.begin(), meds.end(),
                   [](const auto& a, const auto& b) { return a.date < b.date; });

  std::vector<Date> progressions = progression_dates;
  std::sort(progressions.begin(), progressions.end());

  // last administration per drug, for rule-4 carryover
  std::map<std::string, Date> last_admin;
  for (const auto& m : meds) {
    auto [it, inserted] = last_admin.try_emplace(m.drug, m.date);
    if (!inserted && it->second < m.date) it->second = m.date;
  }

  std::vector<LineOfTherapy> lines;
  size_t prog_next = 0;
  Date last_event_date{};

  auto consume_progressions_before = [&](Date t) {
    bool any = false;
    while (prog_next < progressions.size() && progressions[prog_next] < t) {
      if (!lines.empty() && progressions[prog_next] >= lines.back().start_date) any = true;
      ++prog_next;
    }
    return any;
  };

  auto start_line = [&](Date t, const std::set<std::string>& drugs) {
    if (!lines.empty()) lines.back().end_date = last_event_date;
    LineOfTherapy lot;
    lot.patient_id = patient_id;
    lot.lot_index = static_cast<int>(lines.size()) + 1;
    lot.drugs = drugs;
    lot.start_date = t;
    lines.push_back(std::move(lot));
  };

  for (const auto& m : meds) {
    if (lines.empty()) {
      // rule 1: first SACT after diagnosis opens LoT 1
      consume_progressions_before(m.date);
      start_line(m.date, {m.drug});
      last_event_date = m.date;
      continue;
    }
    LineOfTherapy& cur = lines.back();
    if (consume_progressions_before(m.date)) {
      // rule 2: documented progression; the next SACT starts a new line
      start_line(m.date, {m.drug});
      last_event_date = m.date;
      continue;
    }
    if (cur.drugs.count(m.drug)) {
      last_event_date = m.date;  // continuation (rule 5 is the no-op case)
      continue;
    }
    if (m.date == cur.start_date) {
      cur.drugs.insert(m.drug);  // combination initiated on the same day
      last_event_date = m.date;
      continue;
    }
    const std::string& cls = drug_classes.at(m.drug);
    bool same_class = false;
    for (const auto& d : cur.drugs)
      if (drug_classes.at(d) == cls) {
        same_class = true;
        break;
      }
    if (same_class) {
      // rule 3: same-class substitution retains the line
      cur.drugs.insert(m.drug);
      last_event_date = m.date;
      continue;
    }
    // rule 4: a new agent joins ongoing therapy -> new line; drugs still being
    // administered at or after this date carry over
    std::set<std::string> next = {m.drug};
    for (const auto& d : cur.drugs)
      if (last_admin.at(d) >= m.date) next.insert(d);
    start_line(m.date, next);
    last_event_date = m.date;
  }
  if (!lines.empty() && !lines.back().end_date) lines.back().end_date = last_event_date;
  return lines;
}

namespace {

std::string normalize_unit(const std::string& raw) {
  std::string s;
  for (size_t i = 0; i < raw.size();) {
    unsigned char c = static_cast<unsigned char>(raw[i]);
    if (c < 0x80) {
      if (!std::isspace(c)) s += static_cast<char>(std::tolower(c));
      ++i;
      continue;
    }
    // common unicode in lab units
    static const std::vector<std::pair<std::string_view, std::string_view>> repl = {
        {"µ", "u"},   // micro sign
        {"μ", "u"},   // greek mu
        {"³", "^3"},  // superscript 3
        {"⁹", "^9"},  // superscript 9
        {"×", "x"},   // multiplication sign
    };
    bool done = false;
    for (const auto& [from, to] : repl) {
      if (raw.compare(i, from.size(), from) == 0) {
        s += to;
        i += from.size();
        done = true;
        break;
      }
    }
    if (!done) {
      s += static_cast<char>(c);
      ++i;
    }
  }
  return s;
}

std::optional<LabTest> lab_test_lookup(const std::string& name) {
  const std::string n = ascii_lower(name);
  static const std::map<std::string_view, LabTest> table = {
      {"hemoglobin", LabTest::hemoglobin}, {"hgb", LabTest::hemoglobin}, {"hb", LabTest::hemoglobin},
      {"lymphocytes", LabTest::lymphocytes}, {"lymphs", LabTest::lymphocytes},
      {"alc", LabTest::lymphocytes}, {"absolute lymphocyte count", LabTest::lymphocytes},
      {"alt", LabTest::alt}, {"sgpt", LabTest::alt}, {"alanine aminotransferase", LabTest::alt},
      {"ast", LabTest::ast}, {"sgot", LabTest::ast}, {"aspartate aminotransferase", LabTest::ast},
      {"alp", LabTest::alp}, {"alkaline phosphatase", LabTest::alp},
      {"bilirubin", LabTest::bilirubin}, {"total bilirubin", LabTest::bilirubin},
      {"tbili", LabTest::bilirubin},
      {"anc", LabTest::anc}, {"absolute neutrophil count", LabTest::anc},
      {"platelets", LabTest::platelets}, {"platelet count", LabTest::platelets},
      {"plt", LabTest::platelets},
      {"wbc", LabTest::wbc}, {"white blood cells", LabTest::wbc},
      {"white blood cell count", LabTest::wbc}, {"leukocytes", LabTest::wbc}};
  auto it = table.find(n);
  if (it == table.end()) return std::nullopt;
  return it->second;
}

LabUnit canonical_unit(LabTest t) {
  switch (t) {
    case LabTest::hemoglobin: return LabUnit::g_per_dl;
    case LabTest::lymphocytes:
    case LabTest::anc:
    case LabTest::platelets:
    case LabTest::wbc: return LabUnit::count_per_ul;
    default: return LabUnit::uln;  // liver panel
  }
}

std::optional<double> g_per_dl_factor(const std::string& u) {
  static const std::map<std::string_view, double> table = {
      {"g/dl", 1.0}, {"g/l", 0.1}, {"mg/dl", 0.001}, {"g_per_dl", 1.0}};
  auto it = table.find(u);
  if (it == table.end()) return std::nullopt;
  return it->second;
}

std::optional<double> count_per_ul_factor(const std::string& u) {
  static const std::map<std::string_view, double> table = {
      {"/ul", 1.0},        {"perul", 1.0},     {"/mm3", 1.0},      {"cells/ul", 1.0},
      {"count_per_ul", 1.0},
      {"10^3/ul", 1000.0}, {"x10^3/ul", 1000.0}, {"k/ul", 1000.0}, {"10*3/ul", 1000.0},
      {"10^9/l", 1000.0},  {"x10^9/l", 1000.0},  {"10e9/l", 1000.0}};
  auto it = table.find(u);
  if (it == table.end()) return std::nullopt;
  return it->second;
}

bool known_assay_unit(const std::string& u) {
  static const std::array<std::string_view, 8> units = {"uln",  "u/l",    "iu/l", "mg/dl",
                                                        "g/dl", "umol/l", "ukat/l", "ng/ml"};
  for (auto k : units)
    if (u == k) return true;
  return false;
}

}  // namespace

LabResult normalize_lab(const std::string& test_name, double value, const std::string& unit,
                        std::optional<double> reference_upper, Date date) {
  auto test = lab_test_lookup(test_name);
  if (!test) throw ValidationError("unknown lab test '" + test_name + "'");
  if (!std::isfinite(value) || value < 0)
    throw ValidationError("lab value must be finite and >= 0");

  const std::string u = normalize_unit(unit);
  LabResult out;
  out.test = *test;
  out.date = date;
  out.unit = canonical_unit(*test);

  switch (out.unit) {
    case LabUnit::g_per_dl: {
      auto f = g_per_dl_factor(u);
      if (!f) throw ValidationError("unknown unit '" + unit + "' for " + to_string(*test));
      out.value = value * *f;
      break;
    }
    case LabUnit::count_per_ul: {
      auto f = count_per_ul_factor(u);
      if (!f) throw ValidationError("unknown unit '" + unit + "' for " + to_string(*test));
      out.value = value * *f;
      break;
    }
    case LabUnit::uln: {
      if (u == "uln") {
        out.value = value;  // already a ratio
        break;
      }
      if (!known_assay_unit(u) && !g_per_dl_factor(u))
        throw ValidationError("unknown unit '" + unit + "' for " + to_string(*test));
      if (!reference_upper || *reference_upper <= 0)
        throw ValidationError(std::string("ULN normalization for ") + to_string(*test) +
                              " requires reference_upper");
      out.value = value / *reference_upper;
      out.reference_upper = reference_upper;
      break;
    }
  }
  return out;
}

IcdFlagSets IcdFlagSets::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open ICD flag sets: " + path);
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw ConfigError("malformed ICD flag file " + path + ": " + e.what());
  }
  IcdFlagSets sets;
  for (const auto& c : j.at("smoking")) sets.smoking_codes.insert(c.get<std::string>());
  for (const auto& c : j.value("smoking_exclusions", json::array()))
    sets.smoking_exclusions.insert(c.get<std::string>());
  for (const auto& c : j.at("cns_metastasis")) sets.cns_codes.insert(c.get<std::string>());
  return sets;
}

namespace {

bool code_in_set(const std::string& code, const std::set<std::string>& set) {
  if (set.count(code)) return true;
  for (const auto& entry : set) {
    if (!entry.empty() && entry.back() == '*' &&
        code.compare(0, entry.size() - 1, entry, 0, entry.size() - 1) == 0)
      return true;
  }
  return false;
}

}  // namespace

std::pair<std::optional<bool>, std::optional<bool>> flag_from_icd(
    const std::vector<std::string>& icd_codes, const IcdFlagSets& sets) {
  std::optional<bool> smoking, cns;
  for (const auto& raw : icd_codes) {
    std::string code;
    for (char c : raw)
      if (!std::isspace(static_cast<unsigned char>(c)))
        code += static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
    if (code_in_set(code, sets.cns_codes)) cns = true;
    if (code_in_set(code, sets.smoking_codes) && !code_in_set(code, sets.smoking_exclusions))
      smoking = true;
  }
  return {smoking, cns};
}

}  // namespace trialscope
