#include <cmath>
#include <limits>
#include <numeric>

#include "doctest.h"
#include "gradcheck.hpp"
#include "mnmt/error.hpp"
#include "mnmt/tensor.hpp"

using namespace mnmt;
using mnmt::testing::gradcheck;
using mnmt::testing::random_tensor;

namespace {

std::vector<double> naive_matmul(const Tensor& a, const Tensor& b) {
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  std::vector<double> out(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double acc = 0.0;
      for (std::size_t p = 0; p < k; ++p) acc += a.at(i, p) * b.at(p, j);
      out[i * n + j] = acc;
    }
  return out;
}

void check_grads(const std::function<Tensor()>& loss, std::vector<std::pair<std::string, Tensor>> params) {
  const auto bad = gradcheck(loss, std::move(params));
  for (const auto& b : bad) INFO(b.name << "[" << b.index << "] analytic " << b.analytic << " numeric " << b.numeric);
  CHECK(bad.empty());
}

// Weighted sum keeps gradients of every output element distinct.
Tensor weighted_sum(const Tensor& x, std::uint64_t seed) {
  return ops::sum(ops::mul(x, random_tensor(x.shape(), seed, -1, 1, false)));
}

}  // namespace

TEST_CASE("matmul identity and examples") {
  auto i2 = Tensor::identity(2);
  auto r = ops::matmul(i2, i2);
  CHECK(std::vector<double>(r.data().begin(), r.data().end()) == std::vector<double>{1, 0, 0, 1});
  auto a = Tensor::matrix(2, 2, {1, 2, 3, 4});
  auto r2 = ops::matmul(a, i2);
  CHECK(std::vector<double>(r2.data().begin(), r2.data().end()) == std::vector<double>{1, 2, 3, 4});
}

TEST_CASE("matmul matches a triple-loop oracle exactly") {
  for (std::size_t m = 1; m <= 8; ++m)
    for (std::size_t k = 1; k <= 8; k += 3)
      for (std::size_t n = 1; n <= 8; n += 2) {
        auto a = random_tensor({m, k}, 11 * m + k, -1, 1, false);
        auto b = random_tensor({k, n}, 13 * n + k, -1, 1, false);
        auto c = ops::matmul(a, b);
        const auto expect = naive_matmul(a, b);
        for (std::size_t i = 0; i < expect.size(); ++i) REQUIRE(c.data()[i] == expect[i]);
        auto ct = ops::matmul_nt(a, ops::transpose(b));
        for (std::size_t i = 0; i < expect.size(); ++i) REQUIRE(ct.data()[i] == expect[i]);
      }
  auto a = random_tensor({3, 4}, 1, -1, 1, false);
  auto b = random_tensor({4, 2}, 2, -1, 1, false);
  auto c = ops::matmul(a, b);
  CHECK(std::vector<double>(c.data().begin(), c.data().end()) == naive_matmul(a, b));
}

TEST_CASE("matmul shape mismatch names both shapes") {
  auto a = Tensor::zeros({2, 3});
  auto b = Tensor::zeros({2, 3});
  try {
    ops::matmul(a, b);
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::Dimension);
    CHECK(std::string(e.what()).find("[2x3] x [2x3]") != std::string::npos);
  }
}

TEST_CASE("softmax examples") {
  auto s = ops::softmax(Tensor({2}, {0, 0}), 0);
  CHECK(s.at(0) == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(s.at(1) == doctest::Approx(0.5).epsilon(1e-15));
  auto big = ops::softmax(Tensor({2}, {1000, 1000}), 0);
  CHECK(big.at(0) == 0.5);
  CHECK(big.at(1) == 0.5);
  auto r = ops::softmax(Tensor({2}, {std::log(1.0), std::log(3.0)}), 0);
  CHECK(std::abs(r.at(0) - 0.25) < 1e-15);
  CHECK(std::abs(r.at(1) - 0.75) < 1e-15);
  const double inf = std::numeric_limits<double>::infinity();
  CHECK_THROWS_AS(ops::softmax(Tensor({2}, {-inf, -inf}), 0), Error);
}

TEST_CASE("softmax rows sum to one along either axis") {
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    auto x = random_tensor({5, 7}, seed, -30, 30, false);
    for (std::size_t axis : {0u, 1u}) {
      auto s = ops::softmax(x, axis);
      const std::size_t outer = axis == 1 ? 5 : 7, inner = axis == 1 ? 7 : 5;
      for (std::size_t o = 0; o < outer; ++o) {
        double total = 0;
        for (std::size_t i = 0; i < inner; ++i) total += axis == 1 ? s.at(o, i) : s.at(i, o);
        REQUIRE(std::abs(total - 1.0) <= 1e-12);
      }
    }
  }
}

TEST_CASE("backward examples") {
  auto x = random_tensor({3, 2}, 5);
  ops::sum(x).backward();
  for (double g : x.grad()) CHECK(g == 1.0);

  auto s = Tensor::scalar(3.0, true);
  ops::mul(s, s).backward();
  CHECK(s.grad()[0] == 6.0);

  CHECK_THROWS_AS(x.backward(), Error);
}

TEST_CASE("backward visits shared subgraphs once") {
  auto x = Tensor::scalar(2.0, true);
  auto y = ops::mul(x, x);            // 4
  auto z = ops::add(y, y);            // 2x^2
  ops::mul(z, z).backward();          // 4x^4 -> 16x^3 = 128
  CHECK(x.grad()[0] == doctest::Approx(128.0));
}

TEST_CASE("gradient checks for every op") {
  auto a = random_tensor({3, 4}, 1);
  auto b = random_tensor({4, 5}, 2);
  auto c = random_tensor({3, 4}, 3);
  auto row = random_tensor({4}, 4);

  SUBCASE("matmul") { check_grads([&] { return weighted_sum(ops::matmul(a, b), 9); }, {{"a", a}, {"b", b}}); }
  SUBCASE("matmul_nt") {
    auto bt = random_tensor({5, 4}, 21);
    check_grads([&] { return weighted_sum(ops::matmul_nt(a, bt), 9); }, {{"a", a}, {"bt", bt}});
  }
  SUBCASE("add sub mul") {
    check_grads([&] { return weighted_sum(ops::mul(ops::add(a, c), ops::sub(a, c)), 9); }, {{"a", a}, {"c", c}});
  }
  SUBCASE("row broadcast") {
    check_grads([&] { return weighted_sum(ops::mul(ops::add(a, row), ops::sub(c, row)), 9); },
                {{"a", a}, {"c", c}, {"row", row}});
  }
  SUBCASE("scale relu mean") {
    check_grads([&] { return ops::mean(ops::relu(ops::scale(ops::mul(a, c), 3.0))); }, {{"a", a}, {"c", c}});
  }
  SUBCASE("softmax") {
    check_grads([&] { return weighted_sum(ops::softmax(a, 1), 7); }, {{"a", a}});
    check_grads([&] { return weighted_sum(ops::softmax(a, 0), 7); }, {{"a", a}});
  }
  SUBCASE("layer_norm") {
    auto gain = random_tensor({4}, 5, 0.5, 1.5);
    check_grads([&] { return weighted_sum(ops::layer_norm(a, gain, row), 8); }, {{"a", a}, {"gain", gain}, {"bias", row}});
  }
  SUBCASE("embedding") {
    auto table = random_tensor({6, 3}, 6);
    const std::vector<int> ids{2, 0, 2, 5};
    check_grads([&] { return weighted_sum(ops::embedding(table, ids), 8); }, {{"table", table}});
  }
  SUBCASE("reshape transpose concat slices") {
    check_grads(
        [&] {
          auto t = ops::transpose(ops::reshape(a, {4, 3}));
          std::vector<Tensor> parts{t, ops::slice_rows(c, 1, 3)};
          auto cat = ops::concat(parts, 0);
          std::vector<Tensor> cols{ops::slice_cols(cat, 0, 2), ops::slice_cols(cat, 3, 4)};
          return weighted_sum(ops::concat(cols, 1), 10);
        },
        {{"a", a}, {"c", c}});
  }
  SUBCASE("dropout") {
    const DropoutKey key{7, 3, 11};
    check_grads([&] { return weighted_sum(ops::dropout(a, 0.4, true, key), 3); }, {{"a", a}});
  }
  SUBCASE("cross entropy") {
    const std::vector<int> targets{1, -1, 3};
    check_grads([&] { return ops::cross_entropy_with_logits(a, targets, -1); }, {{"a", a}});
  }
  SUBCASE("attention") {
    auto q = random_tensor({5, 4}, 31);
    auto k = random_tensor({6, 4}, 32);
    auto v = random_tensor({6, 4}, 33);
    const std::vector<Segment> qs{{0, 2}, {2, 5}};
    const std::vector<Segment> ks{{0, 4}, {4, 6}};
    check_grads([&] { return weighted_sum(ops::attention(q, k, v, 2, qs, ks, false), 12); }, {{"q", q}, {"k", k}, {"v", v}});
    auto sq = random_tensor({4, 4}, 34);
    const std::vector<Segment> ss{{0, 4}};
    check_grads([&] { return weighted_sum(ops::attention(sq, sq, sq, 2, ss, ss, true), 13); }, {{"sq", sq}});
  }
}

TEST_CASE("cross entropy value") {
  auto logits = Tensor::matrix(2, 2, {0, 0, std::log(3.0), 0});
  const std::vector<int> t{0, 0};
  const double expect = (std::log(2.0) + -std::log(0.75)) / 2;
  CHECK(ops::cross_entropy_with_logits(logits, t).item() == doctest::Approx(expect).epsilon(1e-14));
}

TEST_CASE("dropout determinism") {
  auto x = random_tensor({8, 8}, 2, -1, 1, false);
  auto same = ops::dropout(x, 0.0, true, {1, 2, 3});
  CHECK(same.same_storage(x));
  CHECK(ops::dropout(x, 0.5, false, {1, 2, 3}).same_storage(x));
  auto d1 = ops::dropout(x, 0.5, true, {1, 2, 3});
  auto d2 = ops::dropout(x, 0.5, true, {1, 2, 3});
  auto d3 = ops::dropout(x, 0.5, true, {1, 2, 4});
  CHECK(std::equal(d1.data().begin(), d1.data().end(), d2.data().begin()));
  CHECK_FALSE(std::equal(d1.data().begin(), d1.data().end(), d3.data().begin()));
  std::size_t zeros = 0;
  for (std::size_t i = 0; i < 64; ++i) {
    if (d1.at(i) == 0.0)
      ++zeros;
    else
      CHECK(d1.at(i) == x.at(i) * 2.0);
  }
  CHECK(zeros > 16);
  CHECK(zeros < 48);
}

TEST_CASE("causal attention hides later keys") {
  auto q = random_tensor({4, 4}, 1, -1, 1, false);
  auto k = random_tensor({4, 4}, 2, -1, 1, false);
  auto v = random_tensor({4, 4}, 3, -1, 1, false);
  const std::vector<Segment> seg{{0, 4}};
  ops::AttentionWeights w;
  auto out = ops::attention(q, k, v, 2, seg, seg, true, &w);
  REQUIRE(w.per_segment.size() == 1);
  const auto& a = w.per_segment[0];
  for (std::size_t h = 0; h < 2; ++h)
    for (std::size_t r = 0; r < 4; ++r)
      for (std::size_t c = r + 1; c < 4; ++c) CHECK(a[(h * 4 + r) * 4 + c] == 0.0);
  auto v2 = v.clone();
  v2.mutable_data()[3 * 4 + 1] += 5.0;
  auto out2 = ops::attention(q, k, v2, 2, seg, seg, true);
  for (std::size_t i = 0; i < 12; ++i) CHECK(out.at(i) == out2.at(i));
}

TEST_CASE("finite checks name the op") {
  set_finite_checks(true);
  auto x = Tensor({1}, {1e300});
  try {
    ops::mul(x, x);
    FAIL("expected a numeric error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::Numeric);
    CHECK(std::string(e.what()).find("mul") != std::string::npos);
  }
  set_finite_checks(false);
}

TEST_CASE("no-grad mode records nothing") {
  auto a = random_tensor({2, 2}, 1);
  NoGradGuard guard;
  auto y = ops::matmul(a, a);
  CHECK_FALSE(y.requires_grad());
}
