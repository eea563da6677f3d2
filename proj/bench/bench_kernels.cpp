// Serial reference vs OpenMP kernels on the desk-scale synthetic log.

#include <benchmark/benchmark.h>

#include <omp.h>

#include "diffdyg/diagnostics.hpp"
#include "diffdyg/trainer.hpp"

using namespace diffdyg;

namespace {

struct Fixture {
  events::EventLog log;
  events::SplitSpec split;
  events::NeighborIndex index;
  model::Model model;
  std::vector<train::LabeledQuery> labeled;
  std::vector<features::QueryPair> queries;

  static Fixture& get() {
    static Fixture f = [] {
      events::SynthOptions so;
      so.num_nodes = 100;
      so.num_events = 1500;
      so.shift = 1.0;
      auto log = events::synth_generate(so);
      auto split = events::chronological_split(log);
      events::NeighborIndex index(log);
      model::ModelConfig cfg;
      cfg.channels.d = 8;
      cfg.channels.d_T = 16;
      cfg.channels.d_C = 8;
      cfg.channels.K = 10;
      cfg.d_attn = 10;
      cfg.dropout = 0.0;
      auto m = model::init_model(cfg, 0);
      const train::Evaluator ev(log, split);
      auto queries = ev.positives(events::Phase::kTest, train::EvalMode::kTransductive);
      auto labeled = ev.labeled_queries(queries, events::NegativeProtocol::kRandom, 0);
      return Fixture{std::move(log), split, std::move(index), std::move(m), std::move(labeled), std::move(queries)};
    }();
    return f;
  }
};

void set_threads(const benchmark::State& state) { omp_set_num_threads(static_cast<int>(state.range(0))); }

void BM_ScoreQueriesSerial(benchmark::State& state) {
  auto& f = Fixture::get();
  for (auto _ : state) benchmark::DoNotOptimize(train::score_queries_serial(f.model, f.log, f.index, f.labeled));
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(f.labeled.size()));
}

void BM_ScoreQueriesParallel(benchmark::State& state) {
  auto& f = Fixture::get();
  set_threads(state);
  for (auto _ : state) benchmark::DoNotOptimize(train::score_queries(f.model, f.log, f.index, f.labeled));
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(f.labeled.size()));
}

void BM_BatchGradientsSerial(benchmark::State& state) {
  auto& f = Fixture::get();
  const std::span<const train::LabeledQuery> batch(f.labeled.data(), 100);
  for (auto _ : state) benchmark::DoNotOptimize(train::batch_gradients_serial(f.model, f.log, f.index, batch, 1, 8));
}

void BM_BatchGradientsParallel(benchmark::State& state) {
  auto& f = Fixture::get();
  set_threads(state);
  const std::span<const train::LabeledQuery> batch(f.labeled.data(), 100);
  for (auto _ : state) benchmark::DoNotOptimize(train::batch_gradients(f.model, f.log, f.index, batch, 1, 8));
}

tensor::Matrix gaussian(std::uint64_t seed, int rows, double shift) {
  Rng rng(seed);
  tensor::Matrix m(rows, 16);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.normal() + shift;
  return m;
}

void BM_MmdSerial(benchmark::State& state) {
  const auto x = gaussian(1, 500, 0.0), y = gaussian(2, 500, 0.5);
  for (auto _ : state) benchmark::DoNotOptimize(diag::mmd_serial(x, y));
}

void BM_MmdParallel(benchmark::State& state) {
  set_threads(state);
  const auto x = gaussian(1, 500, 0.0), y = gaussian(2, 500, 0.5);
  for (auto _ : state) benchmark::DoNotOptimize(diag::mmd(x, y));
}

void BM_CriticalSerial(benchmark::State& state) {
  auto& f = Fixture::get();
  for (auto _ : state) benchmark::DoNotOptimize(diag::find_critical_batch_serial(f.index, f.queries));
}

void BM_CriticalParallel(benchmark::State& state) {
  auto& f = Fixture::get();
  set_threads(state);
  for (auto _ : state) benchmark::DoNotOptimize(diag::find_critical_batch(f.index, f.queries));
}

void BM_AttentionStatsSerial(benchmark::State& state) {
  auto& f = Fixture::get();
  for (auto _ : state) {
    benchmark::DoNotOptimize(diag::attention_statistics_serial(f.model, f.log, f.index, f.queries));
  }
}

void BM_AttentionStatsParallel(benchmark::State& state) {
  auto& f = Fixture::get();
  set_threads(state);
  for (auto _ : state) benchmark::DoNotOptimize(diag::attention_statistics(f.model, f.log, f.index, f.queries));
}

}  // namespace

BENCHMARK(BM_ScoreQueriesSerial)->Unit(benchmark::kMillisecond)->UseRealTime();
BENCHMARK(BM_ScoreQueriesParallel)->Arg(1)->Arg(2)->Arg(4)->Unit(benchmark::kMillisecond)->UseRealTime();
BENCHMARK(BM_BatchGradientsSerial)->Unit(benchmark::kMillisecond)->UseRealTime();
BENCHMARK(BM_BatchGradientsParallel)->Arg(1)->Arg(2)->Arg(4)->Unit(benchmark::kMillisecond)->UseRealTime();
BENCHMARK(BM_MmdSerial)->Unit(benchmark::kMillisecond)->UseRealTime();
BENCHMARK(BM_MmdParallel)->Arg(1)->Arg(2)->Arg(4)->Unit(benchmark::kMillisecond)->UseRealTime();
BENCHMARK(BM_CriticalSerial)->Unit(benchmark::kMicrosecond)->UseRealTime();
BENCHMARK(BM_CriticalParallel)->Arg(1)->Arg(2)->Arg(4)->Unit(benchmark::kMicrosecond)->UseRealTime();
BENCHMARK(BM_AttentionStatsSerial)->Unit(benchmark::kMillisecond)->UseRealTime();
BENCHMARK(BM_AttentionStatsParallel)->Arg(1)->Arg(2)->Arg(4)->Unit(benchmark::kMillisecond)->UseRealTime();

BENCHMARK_MAIN();
