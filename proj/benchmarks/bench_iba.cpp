// Microbenchmarks for the attention forwards, the leave-one-out batch mean,
// the full segmentation model, and one optimizer step with backward pass.
// Shapes mirror the defaults: a 64x64 input gives 256 stage-1 tokens.

#include <benchmark/benchmark.h>

#include <cstddef>
#include <vector>

#include "iba/attention.hpp"
#include "iba/encoder.hpp"
#include "iba/ops.hpp"
#include "iba/rng.hpp"
#include "iba/tape.hpp"
#include "iba/tensor.hpp"
#include "iba/train.hpp"

namespace {

using namespace iba;

void bench_attention(benchmark::State& state, AttentionKind kind) {
  const std::size_t b = 4;
  const auto n = static_cast<std::size_t>(state.range(0));
  const auto d = static_cast<std::size_t>(state.range(1));
  const auto heads = static_cast<std::size_t>(state.range(2));
  Rng rng(7);
  const AttentionParams p = AttentionParams::init(d, heads, kind, rng);
  const BatchFeatures f(randn({b, n, d}, rng));
  for (auto _ : state) {
    const AttentionOutput out = attention_forward(f, p, true);
    benchmark::DoNotOptimize(out.features.tensor.values().data());
  }
  state.SetItemsProcessed(static_cast<std::int64_t>(state.iterations()) *
                          static_cast<std::int64_t>(b * n * d));
}

void BM_SelfAttention(benchmark::State& state) { bench_attention(state, AttentionKind::kSelf); }
void BM_Miba(benchmark::State& state) { bench_attention(state, AttentionKind::kMiba); }
void BM_Eiba(benchmark::State& state) { bench_attention(state, AttentionKind::kEiba); }

void BM_ReferenceBatch(benchmark::State& state) {
  Rng rng(11);
  const Tensor f = randn({8, 256, 64}, rng);
  for (auto _ : state) {
    const Tensor r = reference_batch(f);
    benchmark::DoNotOptimize(r.values().data());
  }
}

Tensor random_images(std::size_t b, std::size_t hw, Rng& rng) {
  std::vector<double> v(b * 3 * hw * hw);
  for (double& x : v) x = rng.uniform();
  return Tensor({b, 3, hw, hw}, std::move(v));
}

void BM_ModelForward(benchmark::State& state) {
  ModelConfig cfg;
  Rng rng(3);
  Model model = Model::build(cfg, rng);
  model.set_inference_mode(state.range(0) != 0);
  const Tensor images = random_images(4, 64, rng);
  for (auto _ : state) {
    const Tensor logits = model.forward(images);
    benchmark::DoNotOptimize(logits.values().data());
  }
}

void BM_TrainStep(benchmark::State& state) {
  ModelConfig cfg;
  Rng rng(5);
  Model model = Model::build(cfg, rng);
  OptState opt = OptState::init(model);
  OptimConfig ocfg;
  const Tensor images = random_images(4, 64, rng);
  std::vector<int> labels(4 * 64 * 64);
  for (int& l : labels) l = static_cast<int>(rng.uniform_int(0, 4));

  for (auto _ : state) {
    Tape tape;
    std::vector<Tensor> traced;
    traced.reserve(model.num_params());
    for (std::size_t i = 0; i < model.num_params(); ++i)
      traced.push_back(tape.watch(model.param(i)));
    const Tensor logits = model.forward(images, traced);
    const Tensor loss = cross_entropy_loss(upsample_bilinear(logits, 4), labels);
    const Gradients grads = tape.backward(loss);
    std::vector<Tensor> g;
    g.reserve(traced.size());
    for (const Tensor& p : traced) g.push_back(grads.grad(p));
    adamw_step(model, g, opt, ocfg);
    benchmark::DoNotOptimize(loss.value());
  }
}

}  // namespace

// Stage-1 shape at a 64x64 input (256 tokens, 16 channels) and a wider
// mid-network shape.
BENCHMARK(BM_SelfAttention)->Args({256, 16, 1})->Args({256, 64, 2})->Unit(benchmark::kMillisecond);
BENCHMARK(BM_Miba)->Args({256, 16, 1})->Args({256, 64, 2})->Unit(benchmark::kMillisecond);
BENCHMARK(BM_Eiba)->Args({256, 16, 1})->Args({256, 64, 2})->Unit(benchmark::kMillisecond);
BENCHMARK(BM_ReferenceBatch)->Unit(benchmark::kMicrosecond);
BENCHMARK(BM_ModelForward)->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_TrainStep)->Unit(benchmark::kMillisecond);

BENCHMARK_MAIN();
