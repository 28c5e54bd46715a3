#include <benchmark/benchmark.h>

#include "fssam/lora.hpp"
#include "fssam/model.hpp"
#include "fssam/ops.hpp"
#include "fssam/rng.hpp"
#include "fssam/train.hpp"

using namespace fssam;

namespace {

Tensor random_tensor(Rng& rng, Shape shape, double lo = -1.0, double hi = 1.0) {
    std::vector<double> v(shape_numel(shape));
    for (auto& x : v) x = rng.uniform(lo, hi);
    return Tensor(std::move(shape), std::move(v));
}

ModelConfig desk_config() { return ModelConfig{32, 4, 32, 2, 4, 2, 16}; }

Episode episode_for(const ModelConfig& m, std::size_t k, std::uint64_t seed) {
    SyntheticConfig s;
    s.image_size = m.image_size;
    Rng rng(seed);
    return generate_synthetic_episode(s, 5, k, Similarity::independent, rng);
}

void BM_Matmul(benchmark::State& state) {
    const auto n = static_cast<std::size_t>(state.range(0));
    Rng rng(1);
    const Tensor a = random_tensor(rng, {n, n}), b = random_tensor(rng, {n, n});
    for (auto _ : state) benchmark::DoNotOptimize(ops::matmul(a, b));
    state.SetItemsProcessed(static_cast<std::int64_t>(state.iterations() * n * n * n));
}
BENCHMARK(BM_Matmul)->Arg(32)->Arg(64)->Arg(128);

void BM_MatmulBackward(benchmark::State& state) {
    const auto n = static_cast<std::size_t>(state.range(0));
    Rng rng(2);
    const Tensor a = random_tensor(rng, {n, n}).with_requires_grad(true);
    const Tensor b = random_tensor(rng, {n, n}).with_requires_grad(true);
    for (auto _ : state) {
        Tape tape;
        tape.backward(ops::sum(ops::matmul(a, b)));
        benchmark::DoNotOptimize(tape.grad(a));
    }
}
BENCHMARK(BM_MatmulBackward)->Arg(64);

void BM_Segment(benchmark::State& state) {
    const auto k = static_cast<std::size_t>(state.range(0));
    const Model model(desk_config(), 3);
    const Episode ep = episode_for(model.config(), k, 4);
    for (auto _ : state) benchmark::DoNotOptimize(segment(model, ep.query_image, ep.support));
}
BENCHMARK(BM_Segment)->Arg(1)->Arg(5)->Unit(benchmark::kMillisecond);

void BM_SegmentMerged(benchmark::State& state) {
    Model model(desk_config(), 3);
    lora::select_trainable(model, lora::Strategy::lora_enc_mem, 5);
    if (state.range(0)) model.merge_adapters();
    model.freeze_all();
    const Episode ep = episode_for(model.config(), 1, 4);
    for (auto _ : state) benchmark::DoNotOptimize(segment(model, ep.query_image, ep.support));
    state.SetLabel(state.range(0) ? "merged" : "factored");
}
BENCHMARK(BM_SegmentMerged)->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond);

void BM_TrainStep(benchmark::State& state) {
    Model model(desk_config(), 3);
    const auto names = lora::select_trainable(model, lora::Strategy::lora_enc_mem, 5);
    for (const auto& n : names) model.set_tensor(n, model.tensor(n).with_requires_grad(true));
    const Episode ep = episode_for(model.config(), 1, 4);
    OptimizerState opt;
    AdamWParams h;
    for (auto _ : state) {
        Tape tape;
        const Tensor loss = combined_loss(segment(model, ep.query_image, ep.support).logits, ep.query_mask, 1, 1);
        tape.backward(loss);
        std::vector<Tensor> params, grads;
        for (const auto& n : names) {
            params.push_back(model.tensor(n));
            grads.push_back(tape.grad(params.back()).value_or(Tensor::zeros(params.back().shape())));
        }
        const auto updated = adamw_step(params, grads, opt, h);
        for (std::size_t i = 0; i < names.size(); ++i) model.set_tensor(names[i], updated[i].with_requires_grad(true));
    }
}
BENCHMARK(BM_TrainStep)->Unit(benchmark::kMillisecond);

void BM_SyntheticEpisode(benchmark::State& state) {
    SyntheticConfig s;
    s.image_size = 32;
    std::uint64_t i = 0;
    for (auto _ : state) {
        Rng rng(i++);
        benchmark::DoNotOptimize(generate_synthetic_episode(s, 3, 1, Similarity::video_like, rng));
    }
}
BENCHMARK(BM_SyntheticEpisode)->Unit(benchmark::kMicrosecond);

}  // namespace

BENCHMARK_MAIN();
