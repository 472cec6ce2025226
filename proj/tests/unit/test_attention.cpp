#include <cmath>
#include <cstdio>
#include <regex>

#include "doctest.h"
#include "gradcheck.hpp"
#include "mnmt/assemblies.hpp"
#include "mnmt/attention_analysis.hpp"
#include "mnmt/bias_eval.hpp"
#include "mnmt/error.hpp"
#include "mnmt/rng.hpp"

using namespace mnmt;
using mnmt::testing::random_tensor;

namespace {

// One-layer trace with hand-set values and α rows.
AttentionTrace synthetic_trace(std::size_t src_len, std::size_t heads, std::size_t d,
                               const std::vector<std::vector<double>>& alpha_rows, bool identical_values, std::uint64_t seed = 1) {
  AttentionTrace tr;
  tr.layers = 1;
  tr.heads = heads;
  tr.model_dim = d;
  tr.src_len = src_len;
  auto v = random_tensor({identical_values ? 1 : src_len, d}, seed);
  if (identical_values) {
    std::vector<double> rep;
    for (std::size_t i = 0; i < src_len; ++i) rep.insert(rep.end(), v.data().begin(), v.data().end());
    v = Tensor({src_len, d}, rep);
  }
  tr.values = v;
  tr.projections.push_back({random_tensor({d, d}, seed + 1), random_tensor({d}, seed + 2), random_tensor({d, d}, seed + 3)});
  for (const auto& row : alpha_rows) {
    TraceStep s;
    s.alpha = {std::vector<std::vector<double>>(heads, row)};
    s.output = {std::vector<double>(d, 0.0)};
    tr.steps.push_back(s);
  }
  return tr;
}

TransformerConfig small_config() {
  TransformerConfig c;
  c.layers = 2;
  c.heads = 2;
  c.model_dim = 16;
  c.ff_dim = 32;
  c.dropout = 0.0;
  c.max_len = 16;
  return c;
}

}  // namespace

TEST_CASE("coefficient of variation examples") {
  const std::vector<double> uniform{1, 1, 1, 1};
  CHECK(coefficient_of_variation(uniform) == 0.0);
  const std::vector<double> two{2, 0};
  CHECK(coefficient_of_variation(two) == doctest::Approx(1.0).epsilon(1e-15));
  const std::vector<double> hot{1, 0, 0, 0};
  CHECK(std::abs(coefficient_of_variation(hot) - std::sqrt(3.0)) <= 1e-12);
  const std::vector<double> zeros{0, 0, 0};
  try {
    coefficient_of_variation(zeros);
    FAIL("expected degenerate row");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::Degenerate);
  }
  CHECK_THROWS_AS(coefficient_of_variation(std::vector<double>{}), Error);
}

TEST_CASE("one-hot rows have c_v = sqrt(L-1)") {
  for (std::size_t L = 1; L <= 128; ++L) {
    for (std::size_t hot : {std::size_t{0}, L / 2, L - 1}) {
      std::vector<double> row(L, 0.0);
      row[hot] = 0.37;
      CHECK(std::abs(coefficient_of_variation(row) - std::sqrt(static_cast<double>(L - 1))) <= 1e-12);
    }
  }
}

TEST_CASE("c_v is scale invariant") {
  auto rng = make_rng(3);
  for (int trial = 0; trial < 500; ++trial) {
    std::vector<double> row(1 + uniform_index(rng, 40));
    for (auto& x : row) x = uniform_real(rng) * 5.0;
    const double base = coefficient_of_variation(row);
    // Powers of two scale without rounding, so equality is exact.
    for (double k : {0.25, 2.0, 1024.0}) {
      auto scaled = row;
      for (auto& x : scaled) x *= k;
      CHECK(coefficient_of_variation(scaled) == base);
    }
    const double k = 0.1 + 10.0 * uniform_real(rng);
    auto scaled = row;
    for (auto& x : scaled) x *= k;
    CHECK(coefficient_of_variation(scaled) == doctest::Approx(base).epsilon(1e-12));
  }
}

TEST_CASE("contribution rows on synthetic traces") {
  SUBCASE("uniform attention over identical values") {
    const auto tr = synthetic_trace(5, 2, 8, {std::vector<double>(5, 0.2)}, true);
    const auto row = contributions(tr, 1, 0);
    REQUIRE(row.c.size() == 5);
    for (double c : row.c) CHECK(c == row.c[0]);
    CHECK(row.c[0] > 0.0);
    CHECK(coefficient_of_variation(row.c) == 0.0);
  }
  SUBCASE("one-hot attention") {
    const auto tr = synthetic_trace(4, 2, 8, {{0, 0, 1, 0}}, false);
    const auto row = contributions(tr, 1, 0);
    for (std::size_t i = 0; i < 4; ++i) CHECK((i == 2 ? row.c[i] > 0.0 : row.c[i] == 0.0));
    CHECK(std::abs(coefficient_of_variation(row.c) - std::sqrt(3.0)) <= 1e-12);
  }
  SUBCASE("bounds") {
    const auto tr = synthetic_trace(3, 1, 4, {{1, 0, 0}}, false);
    CHECK_THROWS_AS(contributions(tr, 0, 0), Error);
    CHECK_THROWS_AS(contributions(tr, 2, 0), Error);
    CHECK_THROWS_AS(contributions(tr, 1, 1), Error);
  }
}

TEST_CASE("contribution vectors reconstruct the attention output") {
  const auto c = small_config();
  const Encoder enc(c, 30, 4);
  const Decoder dec(c, 30, 4);
  auto rng = make_rng(9);
  for (int trial = 0; trial < 10; ++trial) {
    std::vector<int> src;
    for (std::size_t i = 0, n = 2 + uniform_index(rng, 8); i < n; ++i) src.push_back(static_cast<int>(4 + uniform_index(rng, 26)));
    const auto tr = dec.greedy(enc.encode(src), 10, true).trace;
    for (std::size_t layer = 1; layer <= c.layers; ++layer) {
      for (std::size_t t = 0; t < tr.num_steps(); ++t) {
        const auto vecs = contribution_vectors(tr, layer, t);
        const auto& out = tr.steps[t].output[layer - 1];
        for (std::size_t j = 0; j < c.model_dim; ++j) {
          double s = 0.0;
          for (const auto& v : vecs) s += v[j];
          CHECK(std::abs(s - out[j]) <= 1e-8);
        }
        for (double x : contributions(tr, layer, t).c) CHECK(x >= 0.0);
      }
    }
  }
}

TEST_CASE("heatmap SVG") {
  SUBCASE("a 1x1 trace renders one cell") {
    const auto tr = synthetic_trace(1, 1, 4, {{1.0}}, false);
    const auto svg = heatmap_svg(tr, 1, {}, {});
    const std::regex cell("<rect x=[^>]*><title>");
    CHECK(std::distance(std::sregex_iterator(svg.begin(), svg.end(), cell), std::sregex_iterator()) == 1);
    CHECK(svg.find("fill=\"#000000\"><title>t=0 i=0") != std::string::npos);
  }
  SUBCASE("3x4 cells sit at their trace coordinates") {
    const auto tr = synthetic_trace(4, 2, 8, {{0.1, 0.2, 0.3, 0.4}, {0.7, 0.1, 0.1, 0.1}, {0.25, 0.25, 0.25, 0.25}}, false);
    const std::vector<std::string> src{"a", "b", "c", "<d>"};
    const auto svg = heatmap_svg(tr, 1, src, std::vector<std::string>{"x", "y", "z"});
    for (std::size_t t = 0; t < 3; ++t) {
      const auto row = contributions(tr, 1, t);
      for (std::size_t i = 0; i < 4; ++i) {
        char expect[96], title[96];
        std::snprintf(expect, sizeof expect, "<rect x=\"%.2f\" y=\"%.2f\" width=\"24.00\" height=\"24.00\"", 90.0 + 24.0 * i, 90.0 + 24.0 * t);
        std::snprintf(title, sizeof title, "<title>t=%zu i=%zu c=%.6f</title>", t, i, row.c[i]);
        const auto pos = svg.find(expect);
        REQUIRE(pos != std::string::npos);
        CHECK(svg.find(title, pos) == svg.find("<title>", pos));
      }
    }
    CHECK(svg.find("&lt;d&gt;") != std::string::npos);
    CHECK(svg == heatmap_svg(tr, 1, src, std::vector<std::string>{"x", "y", "z"}));
  }
}

TEST_CASE("c_v bars and CSV are deterministic") {
  std::vector<CvRecord> recs{{0, 1, "shared", 3, 1.5, false}, {1, 1, "shared", std::nullopt, std::nullopt, false},
                             {0, 1, "lang-spec", 2, 0.75, true}};
  CHECK(cv_csv(recs) ==
        "sentence_id,layer,model,step,cv,note\n0,1,shared,3,1.500000,\n1,1,shared,,,missing\n0,1,lang-spec,2,0.750000,noun-step\n");
  const auto a = cv_bars_svg(recs);
  CHECK(a == cv_bars_svg(recs));
  CHECK(a.find("shared sentence 0 cv=1.500000") != std::string::npos);
  CHECK(a.find("lang-spec sentence 0 cv=0.750000") != std::string::npos);
  CHECK(cv_bars_svg(std::vector<CvRecord>{}).find("<svg") == 0);
}

namespace {

std::vector<std::string> copy_sentences(std::size_t n, std::uint64_t seed) {
  auto rng = make_rng(seed);
  std::vector<std::string> out;
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<std::string> w;
    for (std::size_t k = 0, len = 3 + uniform_index(rng, 4); k < len; ++k) w.push_back(std::string(1, static_cast<char>('a' + uniform_index(rng, 12))));
    out.push_back(join_words(w));
  }
  return out;
}

}  // namespace

TEST_CASE("copy-task model aligns every source token to its own output position") {
  const LanguageSet langs{{"xa", "xb"}, {{"xa", "xb"}}};
  const auto train_text = copy_sentences(1500, 1);
  const auto codecs = learn_codecs(VocabRegime::PerLanguage, langs.languages, {{"xa", train_text}, {"xb", train_text}}, 0);
  auto c = small_config();
  c.model_dim = 32;
  c.ff_dim = 64;
  auto a = ModelAssembly::build(SystemKind::Bilingual, langs, c, codecs, 2);
  TrainSchedule s;
  s.lr = 0.01;
  s.warmup = 60;
  s.batch_tokens = 150;
  s.max_updates = 500;
  s.eval_every = 500;
  const std::vector<ParallelText> data{{{"xa", "xb"}, train_text, train_text}};
  train(a, s, data, {});

  const auto test = copy_sentences(50, 99);
  const auto outs = translate_corpus(a, {"xa", "xb"}, test, true);
  std::size_t exact = 0, aligned = 0, tokens = 0;
  std::vector<std::size_t> per_layer(c.layers + 1, 0);
  for (std::size_t k = 0; k < test.size(); ++k) {
    if (outs[k].text != test[k]) continue;
    ++exact;
    for (std::size_t i = 0; i < outs[k].source_ids.size(); ++i, ++tokens)
      for (std::size_t layer = 1; layer <= c.layers; ++layer) per_layer[layer] += align_entity(outs[k].trace, i, layer) == i;
  }
  REQUIRE(exact >= 45);
  aligned = *std::max_element(per_layer.begin(), per_layer.end());
  MESSAGE("copy alignment by layer: " << per_layer[1] << " / " << per_layer[2] << " of " << tokens);
  CHECK(aligned == tokens);
}

TEST_CASE("cv_series on an empty request") {
  const LanguageSet langs{{"xa", "xb"}, {{"xa", "xb"}}};
  const auto text = copy_sentences(20, 1);
  const auto codecs = learn_codecs(VocabRegime::PerLanguage, langs.languages, {{"xa", text}, {"xb", text}}, 0);
  const auto a = ModelAssembly::build(SystemKind::Bilingual, langs, small_config(), codecs, 2);
  const auto grammar = ToyGrammar::from_json(nlohmann::json::parse(R"({"language":"xb","determiners":{"masc":"a","fem":"b"},
    "pronouns":{"masc":"c","fem":"d"},"nouns":[{"lemma":"e","masc":"e","fem":"f","stereotype":"male"},
    {"lemma":"s","neutral":"s","ungendered":true}],"templates":[{"id":"t","coref":1,"text":"{E1} {E2} {PRON}"}]})"));
  const GenderDetector det(grammar);
  ChallengeSet set;
  set.sentences.push_back({"a e", 1, "e", Gender::Male, Stereotype::Pro});
  CHECK(cv_series(a, {"xa", "xb"}, set, det, 1, 0, "m").empty());
  CHECK_THROWS_AS(cv_series(a, {"xa", "xb"}, set, det, 1, 2, "m"), Error);
  const auto one = cv_series(a, {"xa", "xb"}, set, det, 1, 1, "m");
  REQUIRE(one.size() == 1);
  CHECK(one[0].model == "m");
}
