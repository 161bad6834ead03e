#include <benchmark/benchmark.h>

#include "gbaf/training.hpp"

using namespace gbaf;

namespace {

void BM_MatmulLinear(benchmark::State& state) {
    RandomStream rng(1);
    const std::size_t rows = static_cast<std::size_t>(state.range(0));
    Tensor x = Tensor::uniform({rows, 32}, -1, 1, rng);
    Tensor w = Tensor::uniform({32, 128}, -1, 1, rng);
    Tensor b = Tensor::uniform({128}, -1, 1, rng);
    Tape tape;
    tape.set_recording(false);
    for (auto _ : state) {
        Tensor y = linear(tape, x, w, b);
        benchmark::DoNotOptimize(y.data().data());
    }
    state.SetItemsProcessed(state.iterations() * rows * 32 * 128 * 2);
}
BENCHMARK(BM_MatmulLinear)->Arg(512)->Arg(8704);

void BM_EncoderLayerForward(benchmark::State& state) {
    RandomStream rng(2);
    const std::size_t batch = static_cast<std::size_t>(state.range(0));
    EncoderLayer layer = EncoderLayer::init(32, 1, 4, Activation::relu, rng);
    Tensor x = Tensor::uniform({batch, 17, 32}, -1, 1, rng);
    Tape tape;
    tape.set_recording(false);
    for (auto _ : state) {
        Tensor y = layer.forward(tape, x);
        benchmark::DoNotOptimize(y.data().data());
    }
}
BENCHMARK(BM_EncoderLayerForward)->Arg(32)->Arg(512);

void BM_EpisodeForward(benchmark::State& state) {
    GbafConfig cfg; // K=51, m=3, T=9
    GbafModel model = GbafModel::init(cfg, 3);
    ChannelSpec ch;
    ch.snr_ff_db = 0.0;
    ch.seed = 4;
    ChannelContext ctx(ch, cfg.l());
    const std::size_t batch = static_cast<std::size_t>(state.range(0));
    RandomStream rng(5);
    Tensor bits = Tensor::uninit({batch, cfg.K});
    for (double& b : bits.data()) b = rng.uniform_below(2) ? 1.0 : 0.0;
    EpisodeRunOptions opts;
    for (auto _ : state) {
        Tape tape;
        tape.set_recording(false);
        EpisodeBatchResult res = run_episode_batch(tape, model, ctx, bits, opts);
        benchmark::DoNotOptimize(res.logits.data().data());
    }
    state.SetItemsProcessed(state.iterations() * batch);
}
BENCHMARK(BM_EpisodeForward)->Arg(64)->Arg(512)->Unit(benchmark::kMillisecond);

void BM_TrainBatch(benchmark::State& state) {
    GbafConfig cfg;
    GbafModel model = GbafModel::init(cfg, 6);
    ChannelSpec ch;
    ch.snr_ff_db = 0.0;
    ch.seed = 7;
    ChannelContext ctx(ch, cfg.l());
    const std::size_t batch = static_cast<std::size_t>(state.range(0));
    RandomStream rng(8);
    Tensor bits = Tensor::uninit({batch, cfg.K});
    for (double& b : bits.data()) b = rng.uniform_below(2) ? 1.0 : 0.0;
    const auto labels = labels_from_bits(bits, cfg.m);
    std::vector<Tensor> params = model.parameters();
    AdamW opt(params, 0.9, 0.999, 1e-8, 0.01);
    EpisodeRunOptions opts;
    opts.training_norm = true;
    for (auto _ : state) {
        Tape tape;
        EpisodeBatchResult res = run_episode_batch(tape, model, ctx, bits, opts);
        Tensor loss = cross_entropy_loss(tape, res.logits, labels);
        model.zero_grads();
        tape.backward(loss);
        clip_gradients(params, 0.5);
        opt.step(1e-4);
        benchmark::DoNotOptimize(loss.item());
    }
    state.SetItemsProcessed(state.iterations() * batch);
}
BENCHMARK(BM_TrainBatch)->Arg(128)->Arg(512)->Unit(benchmark::kMillisecond);

void BM_EvaluateBler(benchmark::State& state) {
    GbafConfig cfg;
    cfg.K = 12;
    cfg.m = 3;
    cfg.T = 5;
    cfg.d_model = 8;
    cfg.n_parity = 1;
    cfg.n_decoder = 1;
    GbafModel model = GbafModel::init(cfg, 9);
    ChannelSpec ch;
    ch.snr_ff_db = 0.0;
    ch.seed = 10;
    EvalConfig ec;
    ec.max_episodes = static_cast<std::size_t>(state.range(0));
    ec.seed = 11;
    for (auto _ : state) {
        BlerResult res = evaluate_bler(model, ec, ch);
        benchmark::DoNotOptimize(res.bler);
    }
    state.SetItemsProcessed(state.iterations() * ec.max_episodes);
}
BENCHMARK(BM_EvaluateBler)->Arg(1000)->Unit(benchmark::kMillisecond);

} // namespace

BENCHMARK_MAIN();
