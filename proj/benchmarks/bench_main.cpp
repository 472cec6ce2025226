#include <string>
#include <vector>

#include <benchmark/benchmark.h>

#include "mnmt/bias_eval.hpp"
#include "mnmt/probing.hpp"
#include "mnmt/rng.hpp"
#include "mnmt/tensor.hpp"
#include "mnmt/transformer.hpp"

using namespace mnmt;

namespace {

Tensor random_tensor(Shape shape, std::uint64_t seed) {
  std::vector<double> v(shape_numel(shape));
  auto rng = make_rng(seed);
  for (auto& x : v) x = 2 * uniform_real(rng) - 1;
  return Tensor(std::move(shape), std::move(v));
}

void BM_Matmul(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const auto a = random_tensor({n, 64}, 1), b = random_tensor({64, n}, 2);
  for (auto _ : state) benchmark::DoNotOptimize(ops::matmul(a, b));
  state.counters["flops"] = benchmark::Counter(2.0 * n * 64 * n, benchmark::Counter::kIsIterationInvariantRate);
}
BENCHMARK(BM_Matmul)->Arg(64)->Arg(256)->Arg(512);

// Forward and backward of the desk-sized model on a 400-token batch.
void BM_TrainStep(benchmark::State& state) {
  TransformerConfig c;
  c.layers = 2;
  c.heads = 2;
  c.model_dim = 64;
  c.ff_dim = 256;
  c.dropout = 0.1;
  const std::size_t vocab = 1000;
  Encoder enc(c, vocab, 1);
  Decoder dec(c, vocab, 2);
  auto rng = make_rng(3);
  std::vector<std::vector<int>> src(40), in(40);
  std::vector<int> targets;
  for (std::size_t s = 0; s < src.size(); ++s) {
    for (int k = 0; k < 10; ++k) src[s].push_back(static_cast<int>(8 + uniform_index(rng, vocab - 8)));
    in[s].push_back(1);
    for (int k = 0; k < 9; ++k) in[s].push_back(static_cast<int>(8 + uniform_index(rng, vocab - 8)));
    for (std::size_t k = 1; k < in[s].size(); ++k) targets.push_back(in[s][k]);
    targets.push_back(2);
  }
  std::uint64_t step = 0;
  for (auto _ : state) {
    const RunContext ctx{true, 4, ++step};
    std::vector<Segment> segs;
    auto memory = enc.forward(src, segs, ctx);
    auto loss = ops::cross_entropy_with_logits(dec.forward(memory, segs, in, ctx), targets);
    loss.backward();
    benchmark::DoNotOptimize(loss.item());
    for (auto& [n, t] : enc.params()) t.zero_grad();
    for (auto& [n, t] : dec.params()) t.zero_grad();
  }
}
BENCHMARK(BM_TrainStep)->Unit(benchmark::kMillisecond);

void BM_SvmTrain(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  auto rng = make_rng(5);
  Matrix x(n, std::vector<double>(64));
  std::vector<int> y(n);
  for (std::size_t i = 0; i < n; ++i) {
    y[i] = i % 2 ? 1 : -1;
    for (auto& v : x[i]) v = uniform_real(rng) - 0.5;
    x[i][0] += 0.3 * y[i];
  }
  for (auto _ : state) benchmark::DoNotOptimize(svm_train(x, y));
}
BENCHMARK(BM_SvmTrain)->Arg(250)->Arg(1000)->Unit(benchmark::kMillisecond);

void BM_Bleu(benchmark::State& state) {
  auto rng = make_rng(6);
  std::vector<std::string> hyp, ref;
  auto sentence = [&] {
    std::string s;
    for (int k = 0; k < 12; ++k) s += (k ? " w" : "w") + std::to_string(uniform_index(rng, 200));
    return s;
  };
  for (int i = 0; i < 3000; ++i) hyp.push_back(sentence()), ref.push_back(sentence());
  for (auto _ : state) benchmark::DoNotOptimize(bleu(hyp, ref));
}
BENCHMARK(BM_Bleu)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
