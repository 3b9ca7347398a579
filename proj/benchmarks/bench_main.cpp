#include <benchmark/benchmark.h>

#include <vector>

#include "relprobe/fixture.hpp"
#include "relprobe/patching.hpp"
#include "relprobe/random.hpp"
#include "relprobe/retrieval.hpp"
#include "relprobe/tensor.hpp"

using namespace relprobe;

namespace {

const Triplet kTriplet{"q1", "apple river", "the apple and the river near some maple",
                       "the copper with some tiger of the harbor", "d1", "d2"};

void BM_Dot(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  Rng rng(1);
  std::vector<float> a(n), b(n);
  for (std::size_t i = 0; i < n; ++i) {
    a[i] = static_cast<float>(normal(rng));
    b[i] = static_cast<float>(normal(rng));
  }
  for (auto _ : state) benchmark::DoNotOptimize(dot(a.data(), b.data(), n));
  state.SetBytesProcessed(static_cast<std::int64_t>(state.iterations() * n * 2 * sizeof(float)));
}
BENCHMARK(BM_Dot)->Arg(64)->Arg(256)->Arg(4096);

void BM_Forward(benchmark::State& state) {
  RandomModelSpec spec;
  spec.d_model = static_cast<int>(state.range(0));
  spec.d_ff = 2 * spec.d_model;
  const Model model = random_model(spec);
  std::vector<TokenId> tokens(static_cast<std::size_t>(state.range(1)));
  Rng rng(2);
  for (auto& t : tokens) t = static_cast<TokenId>(uniform_index(rng, spec.vocab));
  for (auto _ : state) benchmark::DoNotOptimize(model.forward(tokens));
}
BENCHMARK(BM_Forward)->Args({64, 32})->Args({256, 32})->Args({256, 128})->Unit(benchmark::kMillisecond);

void BM_PlantedForwardCaptureAll(benchmark::State& state) {
  const PlantedCircuit pc = planted_circuit();
  const PromptRenderer r(pc.tokenizer, pc.prompt_template);
  const PromptPair pair = r.render_pointwise(kTriplet);
  for (auto _ : state) benchmark::DoNotOptimize(pc.model.forward(pair.clean, {CaptureSet::all()}));
}
BENCHMARK(BM_PlantedForwardCaptureAll)->Unit(benchmark::kMillisecond);

void BM_TraceHeadsLast(benchmark::State& state) {
  const PlantedCircuit pc = planted_circuit();
  const PromptRenderer r(pc.tokenizer, pc.prompt_template);
  const std::vector<PromptPair> pairs = {r.render_pointwise(kTriplet)};
  for (auto _ : state) benchmark::DoNotOptimize(trace_heads(pc.model, pairs, PositionGroup::last));
}
BENCHMARK(BM_TraceHeadsLast)->Unit(benchmark::kMillisecond);

void BM_Bm25Search(benchmark::State& state) {
  const KeywordTask task = make_keyword_task({});
  const Bm25Index index(task.corpus);
  for (auto _ : state) benchmark::DoNotOptimize(index.search("apple river", 100));
}
BENCHMARK(BM_Bm25Search);

}  // namespace

BENCHMARK_MAIN();
