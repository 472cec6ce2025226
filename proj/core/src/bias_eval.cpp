#include "mnmt/bias_eval.hpp"

#include <algorithm>
#include <cmath>

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include "mnmt/attention_analysis.hpp"
#include "mnmt/error.hpp"
#include "mnmt/tokenizer.hpp"

namespace mnmt {

GenderDetector::GenderDetector(const ToyGrammar& target) : language_(target.language()), determiners_(target.determiners()) {
  auto add = [&](const std::string& form, const std::string& lemma, std::optional<Gender> g) {
    const auto [it, fresh] = forms_.emplace(form, Entry{lemma, g});
    if (!fresh && it->second.lemma != lemma) {
      fail(ErrorKind::Config, language_ + " lexicon maps '" + form + "' to both " + it->second.lemma + " and " + lemma);
    }
    if (!fresh && it->second.gender != g) it->second.gender.reset();
  };
  for (const auto& n : target.nouns()) {
    if (n.ungendered) {
      add(n.neutral, n.lemma, Gender::Neutral);
      if (!n.masc.empty()) add(n.masc, n.lemma, Gender::Male);
      if (!n.fem.empty()) add(n.fem, n.lemma, Gender::Female);
    } else if (n.masc == n.fem) {
      add(n.masc, n.lemma, std::nullopt);
    } else {
      add(n.masc, n.lemma, Gender::Male);
      add(n.fem, n.lemma, Gender::Female);
    }
  }
}

bool GenderDetector::is_determiner(const std::string& word) const {
  return !word.empty() && (word == determiners_.masc || word == determiners_.fem || word == determiners_.neutral);
}

std::optional<std::string> GenderDetector::lemma_of(const std::string& word) const {
  const auto it = forms_.find(word);
  if (it == forms_.end()) return std::nullopt;
  return it->second.lemma;
}

std::optional<GenderReading> GenderDetector::read(std::span<const std::string> words, std::size_t index) const {
  if (index >= words.size()) return std::nullopt;
  const auto it = forms_.find(words[index]);
  if (it == forms_.end()) return std::nullopt;
  GenderReading r{it->second.lemma, Gender::Male};
  if (it->second.gender) {
    r.gender = *it->second.gender;
    return r;
  }
  if (determiners_.masc != determiners_.fem) {
    for (std::size_t back = 1; back <= 2 && back <= index; ++back) {
      const auto& w = words[index - back];
      if (w == determiners_.fem) {
        r.gender = Gender::Female;
        break;
      }
      if (w == determiners_.masc) break;
    }
  }
  return r;
}

std::optional<std::size_t> GenderDetector::find(std::span<const std::string> words, const std::string& lemma) const {
  for (std::size_t i = 0; i < words.size(); ++i) {
    const auto it = forms_.find(words[i]);
    if (it != forms_.end() && it->second.lemma == lemma) return i;
  }
  return std::nullopt;
}

Aligner lexicon_aligner(const ChallengeSet& set, const GenderDetector& detector) {
  return [set = &set, detector = &detector](std::size_t k, std::span<const std::string> words) {
    return detector->find(words, set->sentences.at(k).lemma);
  };
}

namespace {

std::size_t argmax_step(const AttentionTrace& trace, std::size_t source_index, std::size_t layer, std::size_t steps) {
  if (steps == 0) fail(ErrorKind::Alignment, "cannot align an empty translation");
  if (layer == 0 || layer > trace.layers) fail(ErrorKind::Bounds, "decoder layer " + std::to_string(layer) + " out of range");
  if (source_index >= trace.src_len) {
    fail(ErrorKind::Bounds, "source index " + std::to_string(source_index) + " beyond length " + std::to_string(trace.src_len));
  }
  std::vector<std::vector<double>> f;  // f_h(values_e) per head
  for (std::size_t h = 0; h < trace.heads; ++h) {
    const auto ft = head_transform(trace, layer - 1, h);
    const auto row = ft.data().subspan(source_index * trace.model_dim, trace.model_dim);
    f.emplace_back(row.begin(), row.end());
  }
  std::size_t best = 0;
  double best_norm = -1.0;
  for (std::size_t t = 0; t < steps; ++t) {
    std::vector<double> v(trace.model_dim, 0.0);
    for (std::size_t h = 0; h < trace.heads; ++h) {
      const double a = trace.alpha(layer - 1, h, t, source_index);
      for (std::size_t j = 0; j < v.size(); ++j) v[j] += a * f[h][j];
    }
    double sq = 0.0;
    for (double x : v) sq += x * x;
    const double norm = std::sqrt(sq);
    if (norm > best_norm) {
      best_norm = norm;
      best = t;
    }
  }
  return best;
}

}  // namespace

std::size_t align_entity(const AttentionTrace& trace, std::size_t source_index, std::size_t layer) {
  auto steps = trace.num_steps();
  if (steps && trace.steps.back().token == Vocabulary::kEos) --steps;
  return argmax_step(trace, source_index, layer, steps);
}

Aligner attention_aligner(std::vector<AttentionAlignment> alignments, const GenderDetector& detector, std::size_t layer) {
  return [alignments = std::move(alignments), detector = &detector, layer](std::size_t k,
                                                                            std::span<const std::string> words) -> std::optional<std::size_t> {
    const auto& a = alignments.at(k);
    const auto steps = std::min(a.target_pieces.size(), a.trace->num_steps());
    const auto t = argmax_step(*a.trace, a.source_index, layer, steps);
    auto w = subword_word_index(a.target_pieces).at(t);
    if (w >= words.size()) return std::nullopt;
    if (detector->is_determiner(words[w]) && w + 1 < words.size() && detector->lemma_of(words[w + 1])) ++w;
    return w;
  };
}

void BiasReport::finalize() {
  accuracy = overall.percent();
  delta_g = by_gender[Gender::Male].percent() - by_gender[Gender::Female].percent();
  delta_s = by_stereotype[Stereotype::Pro].percent() - by_stereotype[Stereotype::Anti].percent();
}

std::size_t BiasReport::mispredicted(const std::string& lemma) const {
  const auto it = by_entity.find(lemma);
  return it == by_entity.end() ? 0 : it->second.total - it->second.correct;
}

BiasReport score_bias(std::span<const std::string> translations, const ChallengeSet& set, const GenderDetector& detector,
                      const Aligner& aligner) {
  require(translations.size() == set.size(), ErrorKind::Contract,
          fmt::format("{} translations for {} challenge sentences", translations.size(), set.size()));
  BiasReport r;
  for (auto g : {Gender::Male, Gender::Female, Gender::Neutral}) r.by_gender[g];
  for (auto s : {Stereotype::Pro, Stereotype::Anti, Stereotype::Neutral}) r.by_stereotype[s];
  for (std::size_t k = 0; k < set.size(); ++k) {
    const auto& s = set.sentences[k];
    const auto words = split_words(translations[k]);
    std::optional<GenderReading> reading;
    try {
      if (const auto idx = aligner(k, words)) reading = detector.read(words, *idx);
    } catch (const Error& e) {
      if (e.kind() != ErrorKind::Alignment) throw;
    }
    bool correct = false;
    if (!reading) {
      ++r.lookup_failures;
      spdlog::debug("sentence {}: no '{}' entity found in \"{}\"", k, s.lemma, translations[k]);
    } else {
      correct = reading->gender == s.gold;
    }
    for (auto* t : {&r.overall, &r.by_gender[s.gold], &r.by_stereotype[s.stereotype], &r.by_entity[s.lemma]}) {
      t->correct += correct;
      ++t->total;
    }
  }
  if (r.lookup_failures) spdlog::info("{} of {} entities not found in the translations (scored incorrect)", r.lookup_failures, set.size());
  r.finalize();
  return r;
}

std::vector<ErrorEntry> top_errors(const BiasReport& report, std::size_t k) {
  std::vector<ErrorEntry> all;
  for (const auto& [lemma, t] : report.by_entity)
    if (t.correct < t.total) all.push_back({lemma, t.total - t.correct, t.total});
  std::stable_sort(all.begin(), all.end(), [](const ErrorEntry& a, const ErrorEntry& b) {
    return a.count != b.count ? a.count > b.count : a.lemma < b.lemma;
  });
  if (all.size() > k) all.resize(k);
  return all;
}

std::vector<ErrorEntry> error_subset(const BiasReport& report, double threshold) {
  std::vector<ErrorEntry> out;
  for (const auto& [lemma, t] : report.by_entity) {
    const auto wrong = t.total - t.correct;
    if (t.total && static_cast<double>(wrong) >= threshold * static_cast<double>(t.total)) out.push_back({lemma, wrong, t.total});
  }
  return out;
}

namespace {

nlohmann::json tally_json(const Tally& t) { return {{"correct", t.correct}, {"total", t.total}, {"accuracy", t.percent()}}; }

}  // namespace

void to_json(nlohmann::json& j, const BiasReport& r) {
  j = nlohmann::json::object();
  j["accuracy"] = r.accuracy;
  j["delta_g"] = r.delta_g;
  j["delta_s"] = r.delta_s;
  j["correct"] = r.overall.correct;
  j["total"] = r.overall.total;
  j["lookup_failures"] = r.lookup_failures;
  for (const auto& [g, t] : r.by_gender) j["by_gender"][std::string(to_string(g))] = tally_json(t);
  for (const auto& [s, t] : r.by_stereotype) j["by_stereotype"][std::string(to_string(s))] = tally_json(t);
  for (const auto& [l, t] : r.by_entity) j["by_entity"][l] = tally_json(t);
  auto& errs = j["mispredicted"] = nlohmann::json::array();
  for (const auto& e : top_errors(r, r.by_entity.size())) errs.push_back({{"lemma", e.lemma}, {"count", e.count}, {"total", e.total}});
  auto& subset = j["error_subset_35"] = nlohmann::json::array();
  for (const auto& e : error_subset(r)) subset.push_back(e.lemma);
}

void from_json(const nlohmann::json& j, BiasReport& r) {
  auto tally = [](const nlohmann::json& t) { return Tally{t.at("correct").get<std::size_t>(), t.at("total").get<std::size_t>()}; };
  r = BiasReport{};
  r.overall = {j.at("correct").get<std::size_t>(), j.at("total").get<std::size_t>()};
  r.lookup_failures = j.value("lookup_failures", std::size_t{0});
  if (j.contains("by_gender"))
    for (const auto& [k, v] : j["by_gender"].items()) r.by_gender[parse_gender(k)] = tally(v);
  if (j.contains("by_stereotype"))
    for (const auto& [k, v] : j["by_stereotype"].items()) r.by_stereotype[parse_stereotype(k)] = tally(v);
  if (j.contains("by_entity"))
    for (const auto& [k, v] : j["by_entity"].items()) r.by_entity[k] = tally(v);
  r.finalize();
}

void BiasReport::merge(const BiasReport& other) {
  auto add = [](Tally& a, const Tally& b) {
    a.correct += b.correct;
    a.total += b.total;
  };
  add(overall, other.overall);
  for (const auto& [k, t] : other.by_gender) add(by_gender[k], t);
  for (const auto& [k, t] : other.by_stereotype) add(by_stereotype[k], t);
  for (const auto& [k, t] : other.by_entity) add(by_entity[k], t);
  lookup_failures += other.lookup_failures;
  finalize();
}

EvalScore bleu(std::span<const std::string> hypotheses, std::span<const std::string> references) {
  require(!hypotheses.empty(), ErrorKind::Domain, "BLEU of an empty corpus");
  require(hypotheses.size() == references.size(), ErrorKind::Contract,
          fmt::format("{} hypotheses against {} references", hypotheses.size(), references.size()));
  std::array<std::size_t, 4> matched{}, total{};
  EvalScore s;
  for (std::size_t k = 0; k < hypotheses.size(); ++k) {
    const auto hyp = split_words(hypotheses[k]);
    const auto ref = split_words(references[k]);
    s.hyp_len += hyp.size();
    s.ref_len += ref.size();
    for (std::size_t n = 1; n <= 4; ++n) {
      auto grams = [n](const std::vector<std::string>& w) {
        std::map<std::vector<std::string>, std::size_t> c;
        for (std::size_t i = 0; i + n <= w.size(); ++i) ++c[std::vector<std::string>(w.begin() + i, w.begin() + i + n)];
        return c;
      };
      const auto hc = grams(hyp), rc = grams(ref);
      for (const auto& [g, c] : hc) {
        const auto it = rc.find(g);
        matched[n - 1] += std::min(c, it == rc.end() ? 0 : it->second);
        total[n - 1] += c;
      }
    }
  }
  double log_sum = 0.0;
  bool zero = false;
  for (std::size_t n = 0; n < 4; ++n) {
    s.precisions[n] = total[n] ? 100.0 * static_cast<double>(matched[n]) / static_cast<double>(total[n]) : 0.0;
    if (matched[n] == 0) {
      zero = true;
    } else {
      log_sum += std::log(static_cast<double>(matched[n]) / static_cast<double>(total[n]));
    }
  }
  if (s.hyp_len == 0) return s;
  s.brevity_penalty =
      s.hyp_len > s.ref_len ? 1.0 : std::exp(1.0 - static_cast<double>(s.ref_len) / static_cast<double>(s.hyp_len));
  s.bleu = zero ? 0.0 : 100.0 * s.brevity_penalty * std::exp(log_sum / 4.0);
  return s;
}

void to_json(nlohmann::json& j, const EvalScore& s) {
  j = {{"bleu", s.bleu},
       {"precisions", s.precisions},
       {"brevity_penalty", s.brevity_penalty},
       {"hyp_len", s.hyp_len},
       {"ref_len", s.ref_len}};
}

namespace {

// Rounds first so that tiny negatives print as 0.0 rather than -0.0.
std::string fixed(double x, int decimals) {
  const double scale = std::pow(10.0, decimals);
  double r = std::round(x * scale) / scale;
  if (r == 0.0) r = 0.0;
  return fmt::format("{:.{}f}", r, decimals);
}

}  // namespace

std::string report_csv(std::span<const ReportRow> rows) {
  std::string out = "system,pair,BLEU,Acc,dG,dS\n";
  for (const auto& r : rows) {
    out += fmt::format("{},{},{},{},{},{}\n", r.system, r.pair, fixed(r.bleu, 2), fixed(r.bias.accuracy, 2), fixed(r.bias.delta_g, 1),
                       fixed(r.bias.delta_s, 1));
  }
  return out;
}

}  // namespace mnmt
