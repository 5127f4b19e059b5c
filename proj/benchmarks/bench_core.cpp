#include <benchmark/benchmark.h>

#include "wotlab/attacks.hpp"
#include "wotlab/models.hpp"
#include "wotlab/rng.hpp"
#include "wotlab/tensor.hpp"
#include "wotlab/trajectory.hpp"

using namespace wotlab;

namespace {

Tensor random_tensor(Shape shape, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  CounterRng rng(seed);
  Tensor t(std::move(shape));
  for (auto& v : t.data()) v = static_cast<float>(rng.uniform(lo, hi));
  return t;
}

ModelSpec cnn(std::size_t c1, std::size_t c2) {
  ModelSpec s;
  s.kind = ModelKind::Cnn;
  s.channels = {c1, c2};
  s.input_shape = {1, 28, 28};
  s.classes = 10;
  return s;
}

void BM_MatmulForwardBackward(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const Tensor a = random_tensor({n, n}, 1), b = random_tensor({n, n}, 2);
  for (auto _ : state) {
    Tape tape;
    Var va = tape.parameter(a), vb = tape.parameter(b);
    Var y = ops::sum(ops::matmul(va, vb));
    tape.backward(y);
    benchmark::DoNotOptimize(tape.gradient(va));
  }
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(6 * n * n * n));
}
BENCHMARK(BM_MatmulForwardBackward)->Arg(64)->Arg(128)->Arg(256);

void BM_Conv2dForwardBackward(benchmark::State& state) {
  const auto batch = static_cast<std::size_t>(state.range(0));
  const Tensor x = random_tensor({batch, 16, 14, 14}, 3), k = random_tensor({32, 16, 4, 4}, 4);
  for (auto _ : state) {
    Tape tape;
    Var vx = tape.parameter(x), vk = tape.parameter(k);
    Var y = ops::sum(ops::conv2d(vx, vk, 2, 1));
    tape.backward(y);
    benchmark::DoNotOptimize(tape.gradient(vk));
  }
}
BENCHMARK(BM_Conv2dForwardBackward)->Arg(32)->Arg(128);

void BM_Pgd10(benchmark::State& state) {
  const Model model = build_model(cnn(16, 32), 5);
  const Tensor x = random_tensor({static_cast<std::size_t>(state.range(0)), 1, 28, 28}, 6, 0.0, 1.0);
  std::vector<int> y(x.dim(0));
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = static_cast<int>(i % 10);
  const AttackConfig cfg = pgd_config(8.0f / 255.0f, 10);
  for (auto _ : state) benchmark::DoNotOptimize(pgd(model, x, y, cfg, 7));
}
BENCHMARK(BM_Pgd10)->Arg(32)->Arg(128)->Unit(benchmark::kMillisecond);

void BM_ComposeDelta(benchmark::State& state) {
  const Model model = build_model(cnn(16, 32), 8);
  const auto k = static_cast<std::size_t>(state.range(0));
  TrajectoryBuffer buffer(k, 1);
  ParamVector w = model.params();
  buffer.clear(w);
  CounterRng rng(9);
  for (std::size_t i = 0; i < k; ++i) {
    for (std::size_t q = 0; q < w.size(); ++q) w[q] += static_cast<float>(rng.uniform(-0.01, 0.01));
    buffer.record(w);
  }
  const BlockPartition partition = block_partition(model, WotMode::Blockwise);
  const AlphaMatrix alpha(k, partition.block_count(), 0.5);
  for (auto _ : state) benchmark::DoNotOptimize(compose_delta(buffer, alpha, partition));
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(k * w.size()));
}
BENCHMARK(BM_ComposeDelta)->Arg(4)->Arg(16);

}  // namespace

BENCHMARK_MAIN();
