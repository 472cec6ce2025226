#include <cmath>

#include "doctest.h"
#include "gradcheck.hpp"
#include "mnmt/error.hpp"
#include "mnmt/tokenizer.hpp"
#include "mnmt/transformer.hpp"

using namespace mnmt;
using mnmt::testing::gradcheck;

namespace {

TransformerConfig micro(std::size_t layers = 1, std::size_t heads = 2, std::size_t dim = 8) {
  TransformerConfig c;
  c.layers = layers;
  c.heads = heads;
  c.model_dim = dim;
  c.ff_dim = 2 * dim;
  c.dropout = 0.0;
  c.max_len = 16;
  return c;
}

// Random values everywhere, including biases and layer-norm parameters, so
// no gradient path is trivially zero.
void scramble(ParamStore& ps, std::uint64_t seed) {
  auto rng = make_rng(seed);
  for (auto& [name, t] : ps)
    for (auto& v : t.mutable_data()) v = (name.find("gain") != std::string::npos ? 1.0 : 0.0) + 0.5 * (2 * uniform_real(rng) - 1);
}

std::vector<int> random_ids(Rng& rng, std::size_t len, std::size_t vocab) {
  std::vector<int> ids;
  for (std::size_t i = 0; i < len; ++i) ids.push_back(static_cast<int>(4 + uniform_index(rng, vocab - 4)));
  return ids;
}

double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace

TEST_CASE("config validation") {
  auto c = micro();
  c.model_dim = 7;
  CHECK_THROWS_AS(c.validate(), Error);
  c = micro();
  c.dropout = 1.0;
  CHECK_THROWS_AS(c.validate(), Error);
  CHECK(TransformerConfig::preset("paper").layers == 6);
  CHECK(TransformerConfig::preset("paper").heads == 8);
  CHECK(TransformerConfig::preset("paper").model_dim == 512);
  CHECK(TransformerConfig::preset("desk") == TransformerConfig::desk());
  CHECK_THROWS_AS(TransformerConfig::preset("huge"), Error);
  nlohmann::json j = TransformerConfig::desk();
  CHECK(j.get<TransformerConfig>() == TransformerConfig::desk());
}

TEST_CASE("encoder shapes and errors") {
  Encoder enc(micro(), 10, 1);
  const std::vector<int> one{5};
  auto s = enc.encode(one);
  CHECK(s.states.shape() == Shape{1, 8});
  const std::vector<int> bad{12};
  CHECK_THROWS_AS(enc.encode(bad), Error);
  const std::vector<int> too_long(17, 5);
  CHECK_THROWS_AS(enc.encode(too_long), Error);
  CHECK(enc.params().count() == Encoder::param_count(micro(), 10));
  Decoder dec(micro(), 11, 1);
  CHECK(dec.params().count() == Decoder::param_count(micro(), 11));
}

TEST_CASE("zeroed sublayers leave normalized embeddings plus positions") {
  auto c = micro(1, 2, 4);
  Encoder enc(c, 6, 3);
  for (auto& [name, t] : enc.params())
    if (name != "embed" && name.find("gain") == std::string::npos)
      for (auto& v : t.mutable_data()) v = 0.0;
  const std::vector<int> ids{4, 5, 4};
  auto out = enc.encode(ids);
  const auto table = enc.params().get("embed").data();
  for (std::size_t p = 0; p < ids.size(); ++p) {
    double x[4];
    for (std::size_t j = 0; j < 4; ++j) {
      const double freq = std::pow(10000.0, -static_cast<double>(j - j % 2) / 4.0);
      const double pe = j % 2 == 0 ? std::sin(p * freq) : std::cos(p * freq);
      x[j] = table[ids[p] * 4 + j] * 2.0 + pe;
    }
    const double mu = (x[0] + x[1] + x[2] + x[3]) / 4;
    double var = 0;
    for (double v : x) var += (v - mu) * (v - mu);
    var /= 4;
    for (std::size_t j = 0; j < 4; ++j) CHECK(out.states.at(p, j) == doctest::Approx((x[j] - mu) / std::sqrt(var + 1e-5)).epsilon(1e-12));
  }
}

TEST_CASE("position sensitivity") {
  Encoder enc(micro(), 10, 4);
  const std::vector<int> a{4, 5, 6}, b{5, 4, 6};
  auto sa = enc.encode(a), sb = enc.encode(b);
  CHECK(max_abs_diff(sa.states.data(), sb.states.data()) > 1e-6);
}

TEST_CASE("reconstruction identity on captured traces") {
  auto c = micro(2, 2, 16);
  Encoder enc(c, 20, 5);
  Decoder dec(c, 20, 6);
  scramble(enc.params(), 1);
  scramble(dec.params(), 2);
  auto rng = make_rng(9);
  for (int n = 0; n < 20; ++n) {
    auto tr = greedy_translate(enc, dec, random_ids(rng, 1 + uniform_index(rng, 8), 20), 10);
    tr.trace.validate(1e-9);
    REQUIRE(tr.trace.num_steps() >= 1);
    for (std::size_t t = 0; t < tr.trace.num_steps(); ++t)
      for (std::size_t l = 0; l < 2; ++l) {
        const auto rec = reconstruct_attention(tr.trace, l, t);
        REQUIRE(max_abs_diff(rec, tr.trace.steps[t].output[l]) <= 1e-8);
      }
  }
}

TEST_CASE("literal reading of the value map differs from the affine one") {
  auto c = micro(1, 2, 8);
  Encoder enc(c, 12, 1);
  Decoder dec(c, 12, 2);
  scramble(enc.params(), 3);
  scramble(dec.params(), 4);
  const std::vector<int> src{4, 7, 9, 5};
  auto tr = greedy_translate(enc, dec, src, 4).trace;
  const auto& p = tr.projections[0];
  const std::size_t d = 8, dh = 4;
  // values_i (W^V + b^V) W^O: the bias is added to every row of W^V.
  std::vector<double> literal(d, 0.0);
  for (std::size_t h = 0; h < 2; ++h)
    for (std::size_t i = 0; i < src.size(); ++i) {
      std::vector<double> vh(dh, 0.0);
      for (std::size_t c2 = 0; c2 < dh; ++c2)
        for (std::size_t r = 0; r < d; ++r) vh[c2] += tr.values.at(i, r) * (p.wv.at(r, h * dh + c2) + p.bv.at(h * dh + c2));
      for (std::size_t j = 0; j < d; ++j)
        for (std::size_t c2 = 0; c2 < dh; ++c2) literal[j] += tr.alpha(0, h, 0, i) * vh[c2] * p.wo.at(h * dh + c2, j);
    }
  const auto affine = reconstruct_attention(tr, 0, 0);
  CHECK(max_abs_diff(affine, tr.steps[0].output[0]) <= 1e-8);
  CHECK(max_abs_diff(literal, tr.steps[0].output[0]) > 1e-3);
}

TEST_CASE("decoder causality") {
  auto c = micro(2, 2, 8);
  Encoder enc(c, 12, 1);
  Decoder dec(c, 12, 2);
  scramble(dec.params(), 5);
  const std::vector<std::vector<int>> src{{4, 5, 6}};
  std::vector<Segment> segs;
  NoGradGuard guard;
  auto memory = enc.forward(src, segs, {});
  const std::vector<std::vector<int>> y1{{1, 4, 5, 6, 7}}, y2{{1, 4, 9, 10, 11}};
  auto l1 = dec.forward(memory, segs, y1, {});
  auto l2 = dec.forward(memory, segs, y2, {});
  for (std::size_t j = 0; j < 12 * 2; ++j) CHECK(l1.at(j) == l2.at(j));
  CHECK(max_abs_diff(l1.data().subspan(24), l2.data().subspan(24)) > 1e-6);
}

TEST_CASE("incremental decoding matches full recomputation bit for bit") {
  auto c = micro(2, 2, 16);
  Encoder enc(c, 20, 7);
  Decoder dec(c, 20, 8);
  scramble(enc.params(), 6);
  scramble(dec.params(), 7);
  auto rng = make_rng(2);
  for (int n = 0; n < 10; ++n) {
    auto src = enc.encode(random_ids(rng, 5, 20));
    auto g = dec.greedy(src, 8);
    std::vector<int> prefix{Vocabulary::kBos};
    for (std::size_t t = 0; t < g.trace.num_steps(); ++t) {
      auto step = dec.decode_step(src, prefix, true);
      const auto& full = step.trace->steps[0];
      CHECK(full.token == g.trace.steps[t].token);
      for (std::size_t l = 0; l < 2; ++l) {
        CHECK(full.output[l] == g.trace.steps[t].output[l]);
        CHECK(full.alpha[l] == g.trace.steps[t].alpha[l]);
      }
      if (t < g.ids.size()) prefix.push_back(g.ids[t]);
    }
    auto again = dec.greedy(src, 8);
    CHECK(again.ids == g.ids);
  }
}

TEST_CASE("decode_step contracts") {
  auto c = micro();
  Encoder enc(c, 10, 1);
  Decoder dec(c, 10, 1);
  auto src = enc.encode(std::vector<int>{4, 5});
  CHECK_THROWS_AS(dec.decode_step(src, std::vector<int>{}, false), Error);
  CHECK_THROWS_AS(dec.decode_step(src, std::vector<int>(17, 1), false), Error);
  auto out = dec.decode_step(src, std::vector<int>{1}, true);
  CHECK(out.logits.size() == 10);
  out.trace->validate(1e-9);
  CHECK(dec.greedy(src, 3).ids.size() <= 3);
}

TEST_CASE("gradient check on a one-layer two-head model") {
  auto c = micro(1, 2, 8);
  Encoder enc(c, 7, 1);
  Decoder dec(c, 7, 2);
  scramble(enc.params(), 8);
  scramble(dec.params(), 9);
  const std::vector<std::vector<int>> src{{4, 5, 6}, {6, 4}};
  const std::vector<std::vector<int>> in{{1, 4, 6}, {1, 5}};
  const std::vector<int> targets{4, 6, 2, 5, 2};
  auto loss = [&] {
    std::vector<Segment> segs;
    auto memory = enc.forward(src, segs, {});
    return ops::cross_entropy_with_logits(dec.forward(memory, segs, in, {}), targets);
  };
  std::vector<std::pair<std::string, Tensor>> params;
  for (auto& [n, t] : enc.params()) params.push_back({"enc." + n, t});
  for (auto& [n, t] : dec.params()) params.push_back({"dec." + n, t});
  const auto bad = gradcheck(loss, params);
  for (const auto& b : bad) INFO(b.name << "[" << b.index << "] " << b.analytic << " vs " << b.numeric);
  CHECK(bad.empty());
}

TEST_CASE("beam width one equals greedy") {
  auto c = micro(2, 2, 16);
  Encoder enc(c, 24, 3);
  Decoder dec(c, 24, 4);
  scramble(enc.params(), 10);
  scramble(dec.params(), 11);
  auto rng = make_rng(5);
  for (int n = 0; n < 100; ++n) {
    auto src = enc.encode(random_ids(rng, 1 + uniform_index(rng, 6), 24));
    const auto len = 1 + uniform_index(rng, 8);
    REQUIRE(dec.beam_search(src, len, 1) == dec.greedy(src, len, false).ids);
  }
}
