#include <benchmark/benchmark.h>

#include <vector>

#include "gbnlab/attacks.hpp"
#include "gbnlab/model.hpp"
#include "gbnlab/ops.hpp"
#include "gbnlab/rng.hpp"

namespace {

using namespace gbnlab;

Tensor random_tensor(Shape shape, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  Rng rng(seed);
  for (double& v : t.mutable_data()) v = uniform(rng, lo, hi);
  return t;
}

void BM_Conv2dForward(benchmark::State& state) {
  const auto batch = static_cast<std::size_t>(state.range(0));
  const Tensor x = random_tensor({batch, 6, 12, 12}, 1);
  const Tensor k = random_tensor({16, 6, 5, 5}, 2);
  for (auto _ : state) benchmark::DoNotOptimize(ops::conv2d(x, k, 1, 0));
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(batch));
}
BENCHMARK(BM_Conv2dForward)->Arg(1)->Arg(64);

void BM_Conv2dBackward(benchmark::State& state) {
  Tensor x = random_tensor({64, 6, 12, 12}, 1);
  Tensor k = random_tensor({16, 6, 5, 5}, 2);
  x.set_requires_grad(true);
  k.set_requires_grad(true);
  for (auto _ : state) {
    Tape tape;
    TapeScope scope(tape);
    const Tensor loss = ops::sum(ops::conv2d(x, k, 1, 0));
    tape.backward(loss);
    benchmark::DoNotOptimize(k.grad().data());
  }
}
BENCHMARK(BM_Conv2dBackward);

void BM_Projection(benchmark::State& state) {
  const auto norm = static_cast<Norm>(state.range(0));
  const Tensor delta = random_tensor({784}, 3, -0.5, 0.5);
  const double eps = norm == Norm::L1 ? 10.0 : norm == Norm::L2 ? 2.0 : 0.3;
  for (auto _ : state) {
    std::vector<double> v(delta.data().begin(), delta.data().end());
    project_in_place(v, norm, eps);
    benchmark::DoNotOptimize(v.data());
  }
}
BENCHMARK(BM_Projection)
    ->Arg(static_cast<int>(Norm::L1))
    ->Arg(static_cast<int>(Norm::L2))
    ->Arg(static_cast<int>(Norm::Linf));

void BM_PgdStep(benchmark::State& state) {
  ModelConfig cfg;
  cfg.norm = state.range(0) != 0 ? NormKind::Gated : NormKind::Batch;
  cfg.num_branches = cfg.norm == NormKind::Gated ? 4 : 1;
  LeNet model(cfg);
  const Tensor x = random_tensor({64, 1, 28, 28}, 4, 0.0, 1.0);
  std::vector<int> y(64);
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = static_cast<int>(i % 10);
  AttackSpec spec = default_pgd_spec(Norm::Linf);
  spec.iterations = 1;
  for (auto _ : state) benchmark::DoNotOptimize(pgd(model, x, y, spec, GatingMode::soft()));
}
BENCHMARK(BM_PgdStep)->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond);

}  // namespace
BENCHMARK_MAIN();
