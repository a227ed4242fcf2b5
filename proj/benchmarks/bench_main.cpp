#include <benchmark/benchmark.h>

#include <random>

#include "rsed/anchors.hpp"
#include "rsed/events.hpp"
#include "rsed/features.hpp"
#include "rsed/graphify.hpp"
#include "rsed/model.hpp"

using namespace rsed;

namespace {

AudioClip bench_clip(double duration) {
    AudioClip c;
    c.sample_rate = 8000;
    c.duration_s = duration;
    const std::size_t n = static_cast<std::size_t>(duration * 8000);
    c.samples.resize(n);
    std::mt19937_64 rng(7);
    std::normal_distribution<double> dist(0.0, 0.05);
    for (double& s : c.samples) s = dist(rng);
    return c;
}

BatchGraph bench_graph(int n_nodes, std::mt19937_64& rng) {
    ClipGraph g;
    g.n_nodes = n_nodes;
    g.channels = 3;
    g.n_bands = 84;
    g.group_frames = 5;
    g.chunk_inputs.resize(static_cast<std::size_t>(n_nodes) * 3 * 84 * 5);
    std::normal_distribution<double> dist(0.0, 1.0);
    for (auto& v : g.chunk_inputs) v = dist(rng);
    g.node_conf.assign(static_cast<std::size_t>(n_nodes), 0.0);
    g.node_class.assign(static_cast<std::size_t>(n_nodes), -1);
    for (int j = 0; j < n_nodes; ++j)
        g.node_time.push_back((j + 0.5) / static_cast<double>(n_nodes));
    for (int j = 0; j + 1 < n_nodes; ++j) g.edge_index.emplace_back(j, j + 1);
    g.edge_label = edge_labels(g.node_class);
    g.duration_s = n_nodes * 0.08;
    return collate({g});
}

void BM_SpectrogramStack(benchmark::State& state) {
    const AudioClip clip = bench_clip(static_cast<double>(state.range(0)));
    const FeatureConfig cfg;
    for (auto _ : state) {
        SpectrogramStack s = compute_stack(clip, cfg);
        benchmark::DoNotOptimize(s.values.data());
    }
    state.SetLabel(std::to_string(state.range(0)) + "s clip");
}
BENCHMARK(BM_SpectrogramStack)->Arg(2)->Arg(10)->Unit(benchmark::kMillisecond);

void BM_RowNormalize(benchmark::State& state) {
    const AudioClip clip = bench_clip(10.0);
    const SpectrogramStack s = compute_stack(clip, FeatureConfig{});
    for (auto _ : state) {
        SpectrogramStack n = row_normalize(s);
        benchmark::DoNotOptimize(n.values.data());
    }
}
BENCHMARK(BM_RowNormalize)->Unit(benchmark::kMillisecond);

void BM_NodeGeneratorForward(benchmark::State& state) {
    ModelConfig cfg;
    cfg.n_basis = 2;
    cfg.conv_channels = {8, 16, 32};
    cfg.d_node = 32;
    std::mt19937_64 rng(3);
    Model model(cfg, rng);
    std::mt19937_64 drng(4);
    const BatchGraph g = bench_graph(static_cast<int>(state.range(0)), drng);
    const ad::Tensor chunks = chunk_input_tensor(g);
    for (auto _ : state) {
        ad::Tensor e = model.generate_embeddings(chunks, false);
        benchmark::DoNotOptimize(e.data().data());
    }
    state.SetLabel(std::to_string(state.range(0)) + " nodes");
}
BENCHMARK(BM_NodeGeneratorForward)->Arg(32)->Arg(126)->Unit(benchmark::kMillisecond);

void BM_ModelForward(benchmark::State& state) {
    ModelConfig cfg;
    cfg.n_basis = 2;
    cfg.conv_channels = {8, 16, 32};
    cfg.d_node = 32;
    std::mt19937_64 rng(5);
    Model model(cfg, rng);
    std::mt19937_64 drng(6);
    const BatchGraph g = bench_graph(static_cast<int>(state.range(0)), drng);
    for (auto _ : state) {
        NodeOutputs out = model.forward(g, false);
        benchmark::DoNotOptimize(out.node_logits.data().data());
    }
    state.SetLabel(std::to_string(state.range(0)) + " nodes");
}
BENCHMARK(BM_ModelForward)->Arg(32)->Arg(126)->Unit(benchmark::kMillisecond);

void BM_AnchorAssign(benchmark::State& state) {
    const AnchorConfig cfg;
    const AnchorSet set = generate_anchors(12.0, cfg);
    std::vector<TruthInterval> truth;
    std::mt19937_64 rng(8);
    std::uniform_real_distribution<double> on(0.0, 10.0);
    for (int i = 0; i < 5; ++i) {
        const double o = on(rng);
        truth.push_back({o, o + 1.0, i % 4});
    }
    for (auto _ : state) {
        auto labels = assign_anchor_labels(set, truth, cfg);
        benchmark::DoNotOptimize(labels.data());
    }
}
BENCHMARK(BM_AnchorAssign);

void BM_EventMatching(benchmark::State& state) {
    std::mt19937_64 rng(9);
    std::uniform_real_distribution<double> on(0.0, 14.0);
    std::vector<EventRecord> refs, syss;
    for (int i = 0; i < 12; ++i) {
        const double o = on(rng);
        refs.push_back({o, o + 0.8, "x", -1.0});
        syss.push_back({o + 0.05, o + 0.82, "x", 0.9});
    }
    const CollarConfig collar;
    for (auto _ : state) {
        MatchCounts c = match_events(refs, syss, collar);
        benchmark::DoNotOptimize(&c);
    }
}
BENCHMARK(BM_EventMatching);

} // namespace

BENCHMARK_MAIN();
