#include "mnmt/toy_corpus.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include "mnmt/error.hpp"
#include "mnmt/rng.hpp"
#include "mnmt/tokenizer.hpp"

namespace mnmt {

std::string_view to_string(Gender g) noexcept {
  switch (g) {
    case Gender::Male: return "male";
    case Gender::Female: return "female";
    case Gender::Neutral: return "neutral";
  }
  return "?";
}

std::string_view to_string(Stereotype s) noexcept {
  switch (s) {
    case Stereotype::Pro: return "pro";
    case Stereotype::Anti: return "anti";
    case Stereotype::Neutral: return "neutral";
  }
  return "?";
}

Gender parse_gender(std::string_view s) {
  if (s == "male") return Gender::Male;
  if (s == "female") return Gender::Female;
  if (s == "neutral") return Gender::Neutral;
  fail(ErrorKind::Parse, "unknown gender '" + std::string(s) + "'");
}

Stereotype parse_stereotype(std::string_view s) {
  if (s == "pro") return Stereotype::Pro;
  if (s == "anti") return Stereotype::Anti;
  if (s == "neutral") return Stereotype::Neutral;
  fail(ErrorKind::Parse, "unknown stereotype '" + std::string(s) + "'");
}

const std::string& Paradigm::form(Gender g) const {
  switch (g) {
    case Gender::Male: return masc;
    case Gender::Female: return fem;
    default: return neutral;
  }
}

const std::string& NounEntry::form(Gender g) const {
  if (ungendered) return neutral;
  return g == Gender::Female ? fem : masc;
}

namespace {

Paradigm read_paradigm(const nlohmann::json& j) {
  return {j.value("masc", ""), j.value("fem", ""), j.value("neutral", "")};
}

std::size_t count_slot(const std::string& text, std::string_view slot) {
  std::size_t n = 0;
  for (const auto& w : split_words(text))
    if (w == slot) ++n;
  return n;
}

Gender stereotype_gender(const NounEntry& n) { return n.stereotype == Gender::Female ? Gender::Female : Gender::Male; }

}  // namespace

ToyGrammar ToyGrammar::from_json(const nlohmann::json& j) {
  ToyGrammar g;
  try {
    g.language_ = j.at("language").get<std::string>();
    g.script_ = j.value("script", "latin");
    g.determiners_ = read_paradigm(j.at("determiners"));
    g.pronouns_ = read_paradigm(j.at("pronouns"));
    for (const auto& n : j.at("nouns")) {
      NounEntry e;
      e.lemma = n.at("lemma").get<std::string>();
      e.stereotype = parse_gender(n.value("stereotype", "neutral"));
      e.ungendered = n.value("ungendered", false);
      if (e.ungendered) {
        e.neutral = n.at("neutral").get<std::string>();
        e.masc = n.value("masc", "");
        e.fem = n.value("fem", "");
      } else {
        e.masc = n.at("masc").get<std::string>();
        e.masculine_only = n.value("masculine_only", false);
        e.fem = n.contains("fem") ? n.at("fem").get<std::string>() : e.masc;
        if (!e.masculine_only && e.fem == e.masc && g.language_ != "en") {
          fail(ErrorKind::Parse, g.language_ + ": lemma '" + e.lemma + "' has one form but is not flagged masculine-only");
        }
      }
      g.nouns_.push_back(std::move(e));
    }
    for (const auto& t : j.at("templates")) {
      Template tp{t.at("id").get<std::string>(), t.at("coref").get<int>(), t.at("text").get<std::string>()};
      if (tp.coref != 1 && tp.coref != 2) fail(ErrorKind::Parse, "template '" + tp.id + "' coref must be 1 or 2");
      for (std::string_view slot : {"{E1}", "{E2}", "{PRON}"}) {
        if (count_slot(tp.text, slot) != 1) {
          fail(ErrorKind::Parse, "template '" + tp.id + "' must contain exactly one " + std::string(slot));
        }
      }
      g.templates_.push_back(std::move(tp));
    }
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::Parse, std::string("grammar JSON: ") + e.what());
  }
  std::set<std::string> lemmas;
  for (const auto& n : g.nouns_) {
    if (!lemmas.insert(n.lemma).second) fail(ErrorKind::Parse, "duplicate lemma '" + n.lemma + "'");
  }
  return g;
}

ToyGrammar ToyGrammar::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::MissingInput, "cannot open grammar " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::Parse, path.string() + ": " + e.what());
  }
  return from_json(j);
}

const NounEntry& ToyGrammar::noun(std::string_view lemma) const {
  for (const auto& n : nouns_)
    if (n.lemma == lemma) return n;
  fail(ErrorKind::Vocab, language_ + ": unknown lemma '" + std::string(lemma) + "'");
}

const Template& ToyGrammar::find_template(std::string_view id) const {
  for (const auto& t : templates_)
    if (t.id == id) return t;
  fail(ErrorKind::Vocab, language_ + ": unknown template '" + std::string(id) + "'");
}

std::vector<std::string> ToyGrammar::occupations() const {
  std::vector<std::string> out;
  for (const auto& n : nouns_)
    if (!n.ungendered) out.push_back(n.lemma);
  return out;
}

std::vector<std::string> ToyGrammar::occupations(Gender stereotype) const {
  std::vector<std::string> out;
  for (const auto& n : nouns_)
    if (!n.ungendered && n.stereotype == stereotype) out.push_back(n.lemma);
  return out;
}

const NounEntry& ToyGrammar::ungendered() const {
  for (const auto& n : nouns_)
    if (n.ungendered) return n;
  fail(ErrorKind::Vocab, language_ + ": grammar has no ungendered entity");
}

RenderedSentence render(const ToyGrammar& g, const SentenceSpec& spec) {
  const auto& tp = g.find_template(spec.template_id);
  const auto& n1 = g.noun(spec.e1);
  const auto& n2 = g.noun(spec.e2);
  const bool first_is_coref = tp.coref == 1;
  const auto& coref = first_is_coref ? n1 : n2;
  const auto& other = first_is_coref ? n2 : n1;
  if (other.ungendered) fail(ErrorKind::Contract, "the ungendered entity can only be the coreferent");
  if (coref.ungendered != (spec.gender == Gender::Neutral)) {
    fail(ErrorKind::Contract, "neutral gender requires the ungendered entity and vice versa");
  }
  const Gender other_gender = stereotype_gender(other);

  RenderedSentence out;
  auto noun_phrase = [&](const NounEntry& n, Gender gender, bool is_coref) {
    const auto& det = g.determiners().form(gender);
    if (!det.empty()) {
      if (is_coref) out.determiner_index = out.words.size();
      out.words.push_back(det);
    }
    (is_coref ? out.entity_index : out.other_index) = out.words.size();
    out.words.push_back(n.form(gender));
  };
  for (const auto& w : split_words(tp.text)) {
    if (w == "{E1}") {
      noun_phrase(n1, first_is_coref ? spec.gender : other_gender, first_is_coref);
    } else if (w == "{E2}") {
      noun_phrase(n2, first_is_coref ? other_gender : spec.gender, !first_is_coref);
    } else if (w == "{PRON}") {
      out.pronoun_index = out.words.size();
      out.words.push_back(g.pronouns().form(spec.gender));
    } else {
      out.words.push_back(w);
    }
  }
  out.text = join_words(out.words);
  return out;
}

void ParallelCorpus::save(const std::filesystem::path& src_path, const std::filesystem::path& tgt_path) const {
  auto write = [](const std::filesystem::path& p, const std::vector<std::string>& lines) {
    if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
    std::ofstream out(p, std::ios::binary);
    if (!out) fail(ErrorKind::Io, "cannot write " + p.string());
    for (const auto& l : lines) out << l << '\n';
  };
  write(src_path, source);
  write(tgt_path, target);
}

ParallelCorpus load_parallel(const std::filesystem::path& src_path, const std::filesystem::path& tgt_path, std::string src_lang,
                             std::string tgt_lang) {
  auto read = [](const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    if (!in) fail(ErrorKind::MissingInput, "cannot open " + p.string());
    std::vector<std::string> lines;
    for (std::string line; std::getline(in, line);) lines.push_back(line);
    return lines;
  };
  ParallelCorpus c;
  c.src_lang = std::move(src_lang);
  c.tgt_lang = std::move(tgt_lang);
  c.source = read(src_path);
  c.target = read(tgt_path);
  if (c.source.size() != c.target.size()) {
    fail(ErrorKind::Parse, "parallel files differ in length: " + src_path.string() + " vs " + tgt_path.string());
  }
  return c;
}

namespace {

// Exactly round(share * n) true values in a shuffled order.
std::vector<bool> quota(std::size_t n, double share, Rng& rng) {
  const auto k = static_cast<std::size_t>(std::llround(share * static_cast<double>(n)));
  std::vector<bool> v(n, false);
  std::fill(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(std::min(k, n)), true);
  stable_shuffle(v.begin(), v.end(), rng);
  return v;
}

template <typename T>
const T& pick(const std::vector<T>& v, Rng& rng) {
  return v[uniform_index(rng, v.size())];
}

std::string pick_other(const std::vector<std::string>& occupations, const std::string& avoid, Rng& rng) {
  for (;;) {
    const auto& o = pick(occupations, rng);
    if (o != avoid) return o;
  }
}

SentenceSpec place(const Template& tp, const std::string& coref, const std::string& other, Gender gender) {
  SentenceSpec s;
  s.template_id = tp.id;
  s.e1 = tp.coref == 1 ? coref : other;
  s.e2 = tp.coref == 1 ? other : coref;
  s.gender = gender;
  return s;
}

}  // namespace

ParallelCorpus gen_parallel(const ToyGrammar& src, const ToyGrammar& tgt, std::size_t n, std::uint64_t seed,
                            const ParallelOptions& options) {
  require(n >= 1, ErrorKind::Domain, "corpus size must be >= 1");
  require(options.skew >= 0.0 && options.skew <= 1.0, ErrorKind::Config, "skew must be in [0,1]");
  require(!src.templates().empty(), ErrorKind::Capacity, src.language() + " grammar has no templates");
  auto rng = make_rng(seed, hash_combine(fnv1a(src.language()), fnv1a(tgt.language())));
  const auto occupations = src.occupations();
  require(occupations.size() >= 2, ErrorKind::Capacity, "need at least two occupations");
  const auto& someone = src.ungendered().lemma;

  struct Draft {
    const Template* tp;
    std::string coref, other;
  };
  std::vector<Draft> drafts;
  std::map<Gender, std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < n; ++i) {
    Draft d{&pick(src.templates(), rng), "", ""};
    const bool neutral = uniform_real(rng) < options.neutral_fraction;
    d.coref = neutral ? someone : pick(occupations, rng);
    d.other = pick_other(occupations, d.coref, rng);
    if (!neutral) by_class[src.noun(d.coref).stereotype].push_back(i);
    drafts.push_back(std::move(d));
  }
  std::vector<Gender> gender(n, Gender::Neutral);
  for (const auto& [cls, idx] : by_class) {
    const double share = cls == Gender::Neutral ? 0.5 : options.skew;
    const auto pro = quota(idx.size(), share, rng);
    for (std::size_t k = 0; k < idx.size(); ++k) {
      const Gender stereo = cls == Gender::Female ? Gender::Female : Gender::Male;
      const Gender flipped = stereo == Gender::Male ? Gender::Female : Gender::Male;
      gender[idx[k]] = pro[k] ? stereo : flipped;
    }
  }

  ParallelCorpus c;
  c.src_lang = src.language();
  c.tgt_lang = tgt.language();
  for (std::size_t i = 0; i < n; ++i) {
    auto spec = place(*drafts[i].tp, drafts[i].coref, drafts[i].other, gender[i]);
    c.source.push_back(render(src, spec).text);
    c.target.push_back(render(tgt, spec).text);
    c.specs.push_back(std::move(spec));
  }
  return c;
}

Composition Composition::paper_replica() { return {1826, 1822, 240, 1584, 1584, 720}; }

Composition ChallengeSet::composition() const {
  Composition c;
  for (const auto& s : sentences) {
    (s.gold == Gender::Male ? c.male : s.gold == Gender::Female ? c.female : c.neutral)++;
    (s.stereotype == Stereotype::Pro ? c.pro : s.stereotype == Stereotype::Anti ? c.anti : c.neutral_stereotype)++;
  }
  return c;
}

std::string ChallengeSet::serialize() const {
  std::ostringstream os;
  for (const auto& s : sentences) {
    os << to_string(s.gold) << '\t' << s.entity_index << '\t' << s.text << '\t' << s.lemma << '\t' << to_string(s.stereotype)
       << '\n';
  }
  return os.str();
}

ChallengeSet ChallengeSet::parse(std::string_view text) {
  ChallengeSet set;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos < text.size()) {
    auto end = text.find('\n', pos);
    if (end == std::string_view::npos) end = text.size();
    auto line = text.substr(pos, end - pos);
    pos = end + 1;
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    if (line.empty()) continue;
    std::vector<std::string_view> cols;
    std::size_t c = 0;
    for (;;) {
      const auto tab = line.find('\t', c);
      cols.push_back(line.substr(c, tab == std::string_view::npos ? std::string_view::npos : tab - c));
      if (tab == std::string_view::npos) break;
      c = tab + 1;
    }
    const auto where = "challenge line " + std::to_string(line_no) + ": ";
    if (cols.size() != 5) fail(ErrorKind::Parse, where + "expected 5 tab-separated columns, got " + std::to_string(cols.size()));
    ChallengeSentence s;
    try {
      s.gold = parse_gender(cols[0]);
      s.stereotype = parse_stereotype(cols[4]);
    } catch (const Error& e) {
      fail(ErrorKind::Parse, where + e.what());
    }
    const std::string idx(cols[1]);
    if (idx.empty() || !std::all_of(idx.begin(), idx.end(), [](char ch) { return ch >= '0' && ch <= '9'; })) {
      fail(ErrorKind::Parse, where + "entity index '" + idx + "' is not a non-negative integer");
    }
    s.entity_index = std::stoul(idx);
    s.text = std::string(cols[2]);
    s.lemma = std::string(cols[3]);
    if (s.entity_index >= split_words(s.text).size()) fail(ErrorKind::Parse, where + "entity index outside the sentence");
    set.sentences.push_back(std::move(s));
  }
  return set;
}

void ChallengeSet::save(const std::filesystem::path& path) const {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorKind::Io, "cannot write " + path.string());
  out << serialize();
}

ChallengeSet ChallengeSet::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::MissingInput, "cannot open challenge set " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse(ss.str());
}

ChallengeSet gen_challenge(const ToyGrammar& grammar, const Composition& comp, std::uint64_t seed) {
  if (comp.total() != comp.pro + comp.anti + comp.neutral_stereotype) {
    fail(ErrorKind::Capacity, "gender and stereotype counts disagree on the total");
  }
  const auto pairs = std::min(comp.pro, comp.anti);
  const auto extra = std::max(comp.pro, comp.anti) - pairs;
  const bool extra_pro = comp.pro > comp.anti;
  if (comp.male < pairs || comp.female < pairs) fail(ErrorKind::Capacity, "too few gendered sentences for the pro/anti pairs");
  // Unpaired stereotyped sentences are split across genders to fit the totals.
  const auto extra_male = std::min(extra, comp.male - pairs);
  const auto extra_female = extra - extra_male;
  if (comp.female - pairs < extra_female) fail(ErrorKind::Capacity, "stereotyped counts exceed the gendered counts");
  const auto male_neu = comp.male - pairs - extra_male;
  const auto female_neu = comp.female - pairs - extra_female;
  if (male_neu + female_neu + comp.neutral != comp.neutral_stereotype) {
    fail(ErrorKind::Capacity, "composition cannot be realized: neutral-stereotype count must equal the leftover gendered plus neutral sentences");
  }

  require(!grammar.templates().empty(), ErrorKind::Capacity, "no templates");
  const auto male_occ = grammar.occupations(Gender::Male);
  const auto female_occ = grammar.occupations(Gender::Female);
  const auto neutral_occ = grammar.occupations(Gender::Neutral);
  const auto all_occ = grammar.occupations();
  if (pairs + extra > 0) require(!male_occ.empty() && !female_occ.empty(), ErrorKind::Capacity, "no stereotyped occupations");
  if (male_neu + female_neu > 0) require(!neutral_occ.empty(), ErrorKind::Capacity, "no neutral-stereotype occupations");
  if (comp.neutral > 0) grammar.ungendered();
  require(all_occ.size() >= 2, ErrorKind::Capacity, "need at least two occupations");

  auto rng = make_rng(seed, 0xc4a1);
  ChallengeSet set;
  auto emit = [&](const std::string& lemma, Gender gender, Stereotype st, const Template& tp, const std::string& other) {
    const auto r = render(grammar, place(tp, lemma, other, gender));
    set.sentences.push_back({r.text, r.entity_index, lemma, gender, st});
  };
  auto fresh = [&](const std::vector<std::string>& pool) {
    const auto& lemma = pick(pool, rng);
    return std::make_tuple(lemma, &pick(grammar.templates(), rng), pick_other(all_occ, lemma, rng));
  };
  for (std::size_t i = 0; i < pairs; ++i) {
    const bool male_lemma = i % 2 == 0;
    auto [lemma, tp, other] = fresh(male_lemma ? male_occ : female_occ);
    const Gender stereo = male_lemma ? Gender::Male : Gender::Female;
    const Gender flipped = male_lemma ? Gender::Female : Gender::Male;
    emit(lemma, stereo, Stereotype::Pro, *tp, other);
    emit(lemma, flipped, Stereotype::Anti, *tp, other);
  }
  const auto extra_label = extra_pro ? Stereotype::Pro : Stereotype::Anti;
  for (std::size_t i = 0; i < extra; ++i) {
    const Gender gender = i < extra_male ? Gender::Male : Gender::Female;
    // A pro sentence with a masculine referent needs a male-stereotype lemma.
    const bool male_lemma = (gender == Gender::Male) == extra_pro;
    auto [lemma, tp, other] = fresh(male_lemma ? male_occ : female_occ);
    emit(lemma, gender, extra_label, *tp, other);
  }
  for (std::size_t i = 0; i < male_neu + female_neu; ++i) {
    auto [lemma, tp, other] = fresh(neutral_occ);
    emit(lemma, i < male_neu ? Gender::Male : Gender::Female, Stereotype::Neutral, *tp, other);
  }
  const auto& someone = comp.neutral > 0 ? grammar.ungendered().lemma : std::string();
  for (std::size_t i = 0; i < comp.neutral; ++i) {
    const auto& tp = pick(grammar.templates(), rng);
    emit(someone, Gender::Neutral, Stereotype::Neutral, tp, pick(all_occ, rng));
  }
  stable_shuffle(set.sentences.begin(), set.sentences.end(), rng);
  return set;
}

bool pronoun_adjacent(const ToyGrammar& g, const ChallengeSentence& s) {
  const auto words = split_words(s.text);
  const auto& pron = g.pronouns().form(s.gold);
  for (std::size_t k = 1; k <= 2; ++k) {
    const auto j = s.entity_index + k;
    if (j < words.size() && words[j] == pron) return true;
  }
  return false;
}

std::map<std::string, ToyGrammar> load_grammars(const std::filesystem::path& dir, const std::vector<std::string>& languages) {
  std::map<std::string, ToyGrammar> out;
  for (const auto& l : languages) out.emplace(l, ToyGrammar::load(dir / (l + ".json")));
  return out;
}

}  // namespace mnmt
