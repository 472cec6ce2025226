#include <algorithm>
#include <cmath>

#include "bias_fixtures.hpp"
#include "doctest.h"
#include "mnmt/assemblies.hpp"
#include "mnmt/attention_analysis.hpp"
#include "mnmt/bias_eval.hpp"
#include "mnmt/error.hpp"

using namespace mnmt;
using mnmt::testing::entity_phrase;
using mnmt::testing::expected_reading;
using mnmt::testing::hand_fixture;
using mnmt::testing::random_fixture;

namespace {

const std::vector<std::string> kTargets{"de", "es", "fr", "ru"};

const std::map<std::string, ToyGrammar>& grammars() {
  static const auto g = load_grammars(MNMT_TEST_DATA_DIR "/grammars", {"en", "de", "es", "fr", "ru"});
  return g;
}

BiasReport score_lexicon(const std::vector<std::string>& tr, const ChallengeSet& set, const GenderDetector& det) {
  return score_bias(tr, set, det, lexicon_aligner(set, det));
}

}  // namespace

TEST_CASE("detector reads noun forms and falls back to the determiner") {
  const GenderDetector de(grammars().at("de"));
  const std::vector<std::string> w{"die", "Entwicklerin", "und", "der", "Arzt", "jemand", "einer"};
  CHECK(de.read(w, 1)->gender == Gender::Female);
  CHECK(de.read(w, 1)->lemma == "developer");
  CHECK(de.read(w, 4)->gender == Gender::Male);
  CHECK(de.read(w, 5)->gender == Gender::Neutral);
  CHECK(de.read(w, 6)->gender == Gender::Male);
  CHECK_FALSE(de.read(w, 0));
  CHECK_FALSE(de.read(w, 9));
  CHECK(de.is_determiner("die"));
  CHECK(de.find(w, "physician") == std::optional<std::size_t>(4));

  const GenderDetector es(grammars().at("es"));
  const std::vector<std::string> v{"la", "sheriff", "el", "sheriff", "la", "muy", "sheriff", "sheriff"};
  CHECK(es.read(v, 1)->gender == Gender::Female);
  CHECK(es.read(v, 3)->gender == Gender::Male);
  CHECK(es.read(v, 6)->gender == Gender::Female);  // determiner two words back
  CHECK(es.read(v, 7)->gender == Gender::Male);  // no determiner within two words
}

TEST_CASE("lexicon is one-to-one per lemma and gender") {
  for (const auto& l : kTargets) {
    const auto& g = grammars().at(l);
    const GenderDetector det(g);
    for (const auto& n : g.nouns()) {
      for (auto gender : {Gender::Male, Gender::Female}) {
        const auto phrase = split_words(entity_phrase(g, n.lemma, gender));
        CHECK(det.read(phrase, phrase.size() - 1)->lemma == n.lemma);
        CHECK(det.read(phrase, phrase.size() - 1)->gender == expected_reading(g, n.lemma, gender));
      }
    }
  }
}

TEST_CASE("all-masculine translation of the paper-replica set") {
  const auto set = gen_challenge(grammars().at("en"), Composition::paper_replica(), 7);
  for (const auto& l : kTargets) {
    CAPTURE(l);
    const auto& g = grammars().at(l);
    std::vector<std::string> tr;
    for (const auto& s : set.sentences) tr.push_back(entity_phrase(g, s.lemma, Gender::Male) + " ist hier");
    const GenderDetector det(g);
    const auto r = score_lexicon(tr, set, det);
    CHECK(std::abs(r.accuracy - 46.97) <= 0.01);
    CHECK(r.by_gender.at(Gender::Male).percent() == 100.0);
    CHECK(r.by_gender.at(Gender::Female).percent() == 0.0);
    CHECK(r.delta_g == 100.0);
    CHECK(r.lookup_failures == 0);
  }
}

TEST_CASE("gold-gender translations score perfectly") {
  const auto set = gen_challenge(grammars().at("en"), Composition::paper_replica(), 8);
  for (const auto& l : kTargets) {
    const auto& g = grammars().at(l);
    std::vector<std::string> tr;
    for (const auto& s : set.sentences) tr.push_back("da " + entity_phrase(g, s.lemma, s.gold));
    const GenderDetector det(g);
    const auto r = score_lexicon(tr, set, det);
    if (l == "ru") {
      // Masculine-only nouns carry no feminine marking without determiners.
      CHECK(r.accuracy < 100.0);
      continue;
    }
    CHECK(r.accuracy == 100.0);
    CHECK(r.delta_g == 0.0);
    CHECK(r.delta_s == 0.0);
  }
}

TEST_CASE("hand-scored twenty-sentence fixture") {
  const auto& es = grammars().at("es");
  const auto f = hand_fixture(es);
  const auto& set = f.set;
  const auto& tr = f.translations;
  const GenderDetector det(es);
  const auto r = score_lexicon(tr, set, det);
  CHECK(r.accuracy == 60.0);
  CHECK(r.by_gender.at(Gender::Male).percent() == 70.0);
  CHECK(r.by_gender.at(Gender::Female).percent() == 50.0);
  CHECK(r.delta_g == doctest::Approx(20.0).epsilon(1e-12));
  CHECK(r.delta_s == doctest::Approx(1600.0 / 33.0).epsilon(1e-12));
  CHECK(r.mispredicted("developer") == 5);
  CHECK(r.mispredicted("nurse") == 3);
  const auto top = top_errors(r, 5);
  REQUIRE(top.size() == 2);
  CHECK(top[0] == ErrorEntry{"developer", 5, 11});
  CHECK(top[1] == ErrorEntry{"nurse", 3, 9});
  // 5/11 ≥ 35% and 3/9 < 35%.
  const auto subset = error_subset(r);
  REQUIRE(subset.size() == 1);
  CHECK(subset[0].lemma == "developer");
}

TEST_CASE("metric identities on random fixtures") {
  for (std::uint64_t seed = 0; seed < 200; ++seed) {
    const auto& lang = kTargets[seed % kTargets.size()];
    const auto& g = grammars().at(lang);
    const auto f = random_fixture(g, 60, seed);
    const GenderDetector det(g);
    const auto r = score_lexicon(f.translations, f.set, det);
    std::map<Gender, Tally> by_gender;
    std::map<Stereotype, Tally> by_st;
    Tally all;
    for (std::size_t k = 0; k < f.set.size(); ++k) {
      const auto& s = f.set.sentences[k];
      const bool right = !f.dropped[k] && expected_reading(g, s.lemma, f.rendered[k]) == s.gold;
      for (auto* t : {&all, &by_gender[s.gold], &by_st[s.stereotype]}) {
        t->correct += right;
        ++t->total;
      }
    }
    REQUIRE(r.overall == all);
    const auto pct = [](const Tally& t) { return t.total ? 100.0 * static_cast<double>(t.correct) / static_cast<double>(t.total) : 0.0; };
    CHECK(r.accuracy == pct(all));
    CHECK(r.delta_g == pct(by_gender[Gender::Male]) - pct(by_gender[Gender::Female]));
    CHECK(r.delta_s == pct(by_st[Stereotype::Pro]) - pct(by_st[Stereotype::Anti]));
    CHECK(r.accuracy >= 0.0);
    CHECK(r.accuracy <= 100.0);
    CHECK(std::abs(r.delta_g) <= 100.0);
    CHECK(std::abs(r.delta_s) <= 100.0);
  }
}

TEST_CASE("swapping pro and anti negates delta S") {
  const auto& g = grammars().at("de");
  const GenderDetector det(g);
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    auto f = random_fixture(g, 80, seed);
    const auto a = score_lexicon(f.translations, f.set, det);
    for (auto& s : f.set.sentences) {
      if (s.stereotype == Stereotype::Pro) s.stereotype = Stereotype::Anti;
      else if (s.stereotype == Stereotype::Anti) s.stereotype = Stereotype::Pro;
    }
    const auto b = score_lexicon(f.translations, f.set, det);
    CHECK(b.delta_s == -a.delta_s);
    CHECK(b.accuracy == a.accuracy);
  }
}

TEST_CASE("mirroring genders negates delta G") {
  const auto& g = grammars().at("de");
  const GenderDetector det(g);
  auto flip = [](Gender x) { return x == Gender::Male ? Gender::Female : x == Gender::Female ? Gender::Male : x; };
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    auto f = random_fixture(g, 80, seed);
    // Only neutral renderings of occupations break the symmetry; avoid them.
    for (std::size_t k = 0; k < f.set.size(); ++k) {
      if (!f.dropped[k] && f.rendered[k] == Gender::Neutral && !g.noun(f.set.sentences[k].lemma).ungendered) {
        f.rendered[k] = Gender::Male;
        f.translations[k] = entity_phrase(g, f.set.sentences[k].lemma, Gender::Male);
      }
    }
    const auto a = score_lexicon(f.translations, f.set, det);
    for (std::size_t k = 0; k < f.set.size(); ++k) {
      auto& s = f.set.sentences[k];
      s.gold = flip(s.gold);
      if (!f.dropped[k]) f.translations[k] = entity_phrase(g, s.lemma, flip(f.rendered[k]));
    }
    const auto b = score_lexicon(f.translations, f.set, det);
    CHECK(b.delta_g == -a.delta_g);
    CHECK(b.accuracy == a.accuracy);
  }
}

TEST_CASE("missing entities count as wrong") {
  const auto& g = grammars().at("fr");
  const GenderDetector det(g);
  ChallengeSet set;
  set.sentences.push_back({"x", 0, "nurse", Gender::Female, Stereotype::Pro});
  set.sentences.push_back({"x", 0, "nurse", Gender::Female, Stereotype::Pro});
  const std::vector<std::string> tr{"", entity_phrase(g, "nurse", Gender::Female)};
  const auto r = score_lexicon(tr, set, det);
  CHECK(r.overall == Tally{1, 2});
  CHECK(r.lookup_failures == 1);
  CHECK_THROWS_AS(score_lexicon({"a"}, set, det), Error);
}

TEST_CASE("top errors match a sort oracle") {
  const auto& g = grammars().at("es");
  const GenderDetector det(g);
  const auto f = random_fixture(g, 500, 77);
  const auto r = score_lexicon(f.translations, f.set, det);
  std::map<std::string, std::pair<std::size_t, std::size_t>> wrong;
  for (std::size_t k = 0; k < f.set.size(); ++k) {
    const auto& s = f.set.sentences[k];
    const bool right = !f.dropped[k] && expected_reading(g, s.lemma, f.rendered[k]) == s.gold;
    wrong[s.lemma].first += !right;
    ++wrong[s.lemma].second;
  }
  std::vector<std::tuple<long, std::string, std::size_t>> keyed;
  for (const auto& [lemma, c] : wrong)
    if (c.first) keyed.emplace_back(-static_cast<long>(c.first), lemma, c.second);
  std::sort(keyed.begin(), keyed.end());
  const auto top = top_errors(r, 10);
  REQUIRE(top.size() == std::min<std::size_t>(10, keyed.size()));
  for (std::size_t i = 0; i < top.size(); ++i) {
    CHECK(top[i].lemma == std::get<1>(keyed[i]));
    CHECK(top[i].count == static_cast<std::size_t>(-std::get<0>(keyed[i])));
    CHECK(top[i].total == std::get<2>(keyed[i]));
  }
  CHECK(top_errors(r, 1000).size() == keyed.size());
  CHECK(top_errors(BiasReport{}, 5).empty());
}

TEST_CASE("BLEU edge cases") {
  const std::vector<std::string> refs{"the cat sat on the mat", "a dog runs fast today"};
  CHECK(bleu(refs, refs).bleu == 100.0);
  const std::vector<std::string> disjoint{"x y z w v u", "p q r s t"};
  CHECK(bleu(disjoint, refs).bleu == 0.0);
  const std::vector<std::string> upper{"The Cat Sat On The Mat", "A Dog Runs Fast Today"};
  CHECK(bleu(upper, refs).bleu == 0.0);
  CHECK_THROWS_AS(bleu(std::vector<std::string>{}, std::vector<std::string>{}), Error);
  CHECK_THROWS_AS(bleu(refs, std::span<const std::string>(disjoint).first(1)), Error);
}

TEST_CASE("BLEU on a hand-computed micro corpus") {
  // Clipped matches / candidates:
  //   1-grams 5/6 + 4/5, 2-grams 3/5 + 2/4, 3-grams 2/4 + 1/3, 4-grams 1/3 + 0/2
  // Hypothesis 11 words, reference 10: no brevity penalty.
  const std::vector<std::string> hyp{"the cat sat on the mat", "a dog runs very fast"};
  const std::vector<std::string> ref{"the cat sat on a mat", "a dog runs fast"};
  const auto s = bleu(hyp, ref);
  CHECK(s.precisions[0] == doctest::Approx(100.0 * 9 / 11));
  CHECK(s.precisions[1] == doctest::Approx(100.0 * 5 / 9));
  CHECK(s.precisions[2] == doctest::Approx(100.0 * 3 / 7));
  CHECK(s.precisions[3] == doctest::Approx(100.0 * 1 / 5));
  CHECK(s.brevity_penalty == 1.0);
  // 100 · (9/11 · 5/9 · 3/7 · 1/5)^(1/4) = 100 · (3/77)^(1/4)
  CHECK(std::round(s.bleu * 1e4) / 1e4 == 44.4281);

  // Shorter hypothesis: BP = exp(1 - 10/9).
  const std::vector<std::string> hyp2{"the cat sat on the mat", "a dog runs"};
  const auto t = bleu(hyp2, ref);
  CHECK(t.brevity_penalty == doctest::Approx(std::exp(1.0 - 10.0 / 9.0)).epsilon(1e-14));
}

TEST_CASE("BLEU ignores sentence order") {
  std::vector<std::string> hyp{"a b c d e", "b c d e f g", "x a b c d", "c d e f"};
  std::vector<std::string> ref{"a b c d f", "b c d e f", "a b c d", "c d e f g"};
  const auto base = bleu(hyp, ref).bleu;
  std::vector<std::size_t> perm{0, 1, 2, 3};
  while (std::next_permutation(perm.begin(), perm.end())) {
    std::vector<std::string> h, r;
    for (auto p : perm) h.push_back(hyp[p]), r.push_back(ref[p]);
    CHECK(bleu(h, r).bleu == base);
  }
}

TEST_CASE("report CSV layout") {
  ReportRow row{"shared", "en-de", 12.345, {}};
  row.bias.accuracy = 46.965;
  row.bias.delta_g = -0.04;
  row.bias.delta_s = 12.25;
  const std::vector<ReportRow> rows{row};
  CHECK(report_csv(rows) == "system,pair,BLEU,Acc,dG,dS\nshared,en-de,12.35,46.97,0.0,12.3\n");
}

TEST_CASE("attention alignment") {
  SUBCASE("single source token") {
    TransformerConfig c;
    c.layers = 2;
    c.heads = 2;
    c.model_dim = 8;
    c.ff_dim = 16;
    c.dropout = 0.0;
    c.max_len = 10;
    const Encoder enc(c, 12, 1);
    const Decoder dec(c, 12, 1);
    const auto tr = dec.greedy(enc.encode(std::vector<int>{5}), 6, true);
    REQUIRE(tr.trace.num_steps() >= 1);
    for (std::size_t t = 0; t < tr.trace.num_steps(); ++t) {
      const auto row = contributions(tr.trace, 1, t);
      CHECK(row.c.size() == 1);
    }
    CHECK(align_entity(tr.trace, 0, 1) < tr.trace.num_steps());
    CHECK_THROWS_AS(align_entity(tr.trace, 1, 1), Error);
    CHECK_THROWS_AS(align_entity(tr.trace, 0, 3), Error);
    AttentionTrace empty = dec.empty_trace(enc.encode(std::vector<int>{5}));
    try {
      align_entity(empty, 0, 1);
      FAIL("expected alignment error");
    } catch (const Error& e) {
      CHECK(e.kind() == ErrorKind::Alignment);
    }
  }
}
