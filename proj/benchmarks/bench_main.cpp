#include <benchmark/benchmark.h>

#include "sit/mesh.hpp"
#include "sit/model.hpp"
#include "sit/patching.hpp"
#include "sit/profiles.hpp"
#include "sit/resample.hpp"
#include "sit/synthetic.hpp"

using namespace sit;

static void BM_Icosphere(benchmark::State& state) {
  const int order = static_cast<int>(state.range(0));
  for (auto _ : state) {
    auto ico = build_icosphere(order);
    benchmark::DoNotOptimize(ico.mesh.vertices.data());
  }
  state.counters["vertices"] = static_cast<double>(icosphere_vertex_count(order));
}
BENCHMARK(BM_Icosphere)->DenseRange(3, 6)->Unit(benchmark::kMillisecond);

static void BM_PatchTable(benchmark::State& state) {
  const auto fine = build_icosphere(6), coarse = build_icosphere(2);
  for (auto _ : state) {
    auto t = build_ico_patch_table(fine, coarse);
    benchmark::DoNotOptimize(t.indices.data());
  }
}
BENCHMARK(BM_PatchTable)->Unit(benchmark::kMillisecond);

static void BM_ResampleTable(benchmark::State& state) {
  const auto src = build_icosphere(static_cast<int>(state.range(0)));
  const auto dst = build_icosphere(6);
  for (auto _ : state) {
    auto t = build_resample_table(src.mesh, dst.mesh);
    benchmark::DoNotOptimize(t.rows.data());
  }
}
BENCHMARK(BM_ResampleTable)->Arg(4)->Arg(6)->Unit(benchmark::kMillisecond);

static void BM_Rotate(benchmark::State& state) {
  const auto ico = build_icosphere(6);
  Rng rng(1);
  const auto data = gen_synthetic(ico, 1, rng);
  const auto table = rotation_table(ico, Axis::y, 10.0);
  for (auto _ : state) {
    auto f = apply_resample(data.examples[0].field, table);
    benchmark::DoNotOptimize(f.values.data());
  }
}
BENCHMARK(BM_Rotate)->Unit(benchmark::kMillisecond);

// Forward pass of a full profile on one random sequence.
static void BM_Forward(benchmark::State& state, const char* name, bool training) {
  const SiTConfig c = profile(name);
  Rng rng(2);
  const auto model = init_model<float>(c, rng);
  Matrix<float> x(c.patches, c.patch_dim());
  for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = static_cast<float>(rng.normal());
  ForwardOptions o;
  o.training = training;
  for (auto _ : state) {
    auto r = forward(model, x, o, rng);
    benchmark::DoNotOptimize(r.prediction.data());
  }
}
BENCHMARK_CAPTURE(BM_Forward, narrow_eval, "sit-narrow-ico", false)->Unit(benchmark::kMillisecond);
BENCHMARK_CAPTURE(BM_Forward, tiny_eval, "sit-tiny-ico", false)->Unit(benchmark::kMillisecond);

static void BM_ForwardBackward(benchmark::State& state) {
  const SiTConfig c = profile("sit-narrow-ico");
  Rng rng(3);
  const auto model = init_model<float>(c, rng);
  Matrix<float> x(c.patches, c.patch_dim());
  for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = static_cast<float>(rng.normal());
  ForwardOptions o;
  o.training = true;
  auto grads = zero_params<float>(c);
  for (auto _ : state) {
    auto r = forward(model, x, o, rng);
    const auto loss = mse_loss(r.prediction, 0.5f);
    backward(model, r.cache, loss.grad, static_cast<const Matrix<float>*>(nullptr), grads);
    benchmark::DoNotOptimize(grads.embed.weight.data());
  }
}
BENCHMARK(BM_ForwardBackward)->Unit(benchmark::kMillisecond);

BENCHMARK_MAIN();
