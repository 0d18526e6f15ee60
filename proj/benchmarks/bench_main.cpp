// SPDX-License-Identifier: Apache-2.0

#include <benchmark/benchmark.h>

#include "dyntok/decoders.hpp"
#include "dyntok/fsq.hpp"
#include "dyntok/harness.hpp"
#include "dyntok/merge.hpp"

using namespace dyntok;

namespace {

Tensor random_tensor(int r, int c, Rng& rng) {
    Tensor t(r, c);
    for (auto& x : t.v) x = rng.normal();
    return t;
}

void BM_IntegrateAndFire(benchmark::State& state) {
    const int t = static_cast<int>(state.range(0));
    const int n = target_length(t, 8.0);
    Rng rng(1);
    std::vector<double> alpha(t);
    for (auto& a : alpha) a = rng.uniform(0.01, 1.0);
    const auto hat = scale_weights(alpha, n);
    const Tensor h = random_tensor(t, 64, rng);
    for (auto _ : state) {
        auto m = integrate_and_fire(h, hat, n);
        benchmark::DoNotOptimize(m.tokens.v.data());
    }
    state.SetItemsProcessed(state.iterations() * t);
}

void BM_FsqQuantize(benchmark::State& state) {
    const int n = static_cast<int>(state.range(0));
    FsqConfig cfg;
    Fsq fsq(cfg, 64);
    ParamStore ps;
    Rng rng(2);
    fsq.init(ps, rng);
    const Tensor c = random_tensor(n, 64, rng);
    for (auto _ : state) {
        Graph g;
        Binder P(g, ps, false);
        auto r = fsq.forward(P, g.constant(c));
        benchmark::DoNotOptimize(r.ids.data());
    }
    state.SetItemsProcessed(state.iterations() * n);
}

void BM_CtcLoss(benchmark::State& state) {
    const int l = static_cast<int>(state.range(0));
    Rng rng(3);
    Graph warm;
    const Tensor logits = random_tensor(l, 9, rng);
    std::vector<int> target;
    for (int i = 0; i < l / 8 + 1; ++i) target.push_back(static_cast<int>(rng.uniform_int(0, 7)));
    for (auto _ : state) {
        Graph g;
        Value lp = g.row_log_softmax(g.input(logits, true));
        Value loss = g.ctc_loss(lp, target, 8);
        g.backward(loss);
        benchmark::DoNotOptimize(loss->val.item());
    }
    state.SetItemsProcessed(state.iterations() * l);
}

void BM_TrainStep(benchmark::State& state) {
    RunConfig cfg;
    cfg.corpus.n_symbols = 8;
    cfg.corpus.n_mels = 32;
    cfg.merge.ratio = 8.0;
    cfg.optim.max_frames_per_batch = 2000;
    cfg.optim.steps = 1;
    const auto vocab = make_default_vocab(8, 32, 4);
    const auto corpus = generate_corpus(vocab, 16, 4, 9, 4);
    for (auto _ : state) {
        TrainResult r = train(cfg, corpus);
        benchmark::DoNotOptimize(r.log.data());
    }
}

}  // namespace

BENCHMARK(BM_IntegrateAndFire)->Arg(128)->Arg(1024);
BENCHMARK(BM_FsqQuantize)->Arg(16)->Arg(256);
BENCHMARK(BM_CtcLoss)->Arg(32)->Arg(128);
BENCHMARK(BM_TrainStep)->Unit(benchmark::kMillisecond);

BENCHMARK_MAIN();
