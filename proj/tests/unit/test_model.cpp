#include "doctest.h"

#include <cmath>
#include <random>

#include "../support/gradcheck.hpp"
#include "../support/synthetic.hpp"
#include "rsed/model.hpp"
#include "rsed/trainer.hpp"

using namespace rsed;
using ad::Tensor;
using testing::random_vector;

namespace {

ModelConfig tiny_config() {
    ModelConfig cfg;
    cfg.n_bands = 84;
    cfg.n_basis = 2;
    cfg.conv_channels = {4, 6, 8};
    cfg.d_node = 16;
    return cfg;
}

PipelineConfig tiny_pipeline() {
    PipelineConfig cfg;
    cfg.model = tiny_config();
    cfg.refiner.mlp_hidden = 16;
    return cfg;
}

BatchGraph random_batch(const std::vector<int>& nodes_per_clip, std::mt19937_64& rng,
                        int channels = 3, int bands = 84, int w = 5) {
    std::vector<ClipGraph> graphs;
    std::normal_distribution<double> dist(0.0, 1.0);
    int id = 0;
    for (int n : nodes_per_clip) {
        ClipGraph g;
        g.n_nodes = n;
        g.channels = channels;
        g.n_bands = bands;
        g.group_frames = w;
        g.chunk_inputs.resize(static_cast<std::size_t>(n) * channels * bands * w);
        for (auto& v : g.chunk_inputs) v = dist(rng);
        g.node_conf.assign(static_cast<std::size_t>(n), 0.0);
        g.node_class.assign(static_cast<std::size_t>(n), -1);
        for (int j = 0; j < n; ++j)
            g.node_time.push_back((j + 0.5) / static_cast<double>(n));
        for (int j = 0; j + 1 < n; ++j) g.edge_index.emplace_back(j, j + 1);
        g.edge_label = edge_labels(g.node_class);
        g.duration_s = n * 0.08;
        g.clip_id = "clip" + std::to_string(id++);
        graphs.push_back(std::move(g));
    }
    return collate(graphs);
}

} // namespace

TEST_SUITE("model") {

TEST_CASE("dynamic conv with one basis kernel is a plain convolution") {
    std::mt19937_64 rng(31);
    DynamicConv2d dc(3, 4, 3, 1, rng);
    Tensor x = Tensor::constant({2, 3, 5, 12}, random_vector(2 * 3 * 5 * 12, rng));
    Tensor expect = ad::conv2d_same(x, dc.w_basis, dc.bias);
    Tensor got = dc.forward(x);
    REQUIRE(got.shape() == expect.shape());
    for (std::size_t i = 0; i < got.numel(); ++i)
        CHECK(got.data()[i] == doctest::Approx(expect.data()[i]).epsilon(1e-12));
}

TEST_CASE("forced one-hot attention selects a single basis kernel") {
    std::mt19937_64 rng(32);
    DynamicConv2d dc(2, 3, 3, 4, rng);
    // drive the softmax to kernel 2 with a large bias margin
    std::fill(dc.att_w.data().begin(), dc.att_w.data().end(), 0.0);
    std::fill(dc.att_b.data().begin(), dc.att_b.data().end(), 0.0);
    dc.att_b.data()[2] = 60.0;

    Tensor x = Tensor::constant({3, 2, 5, 10}, random_vector(3 * 2 * 5 * 10, rng));
    // direct convolution with kernel block 2
    const int co = 3, ci = 2, k = 3;
    std::vector<double> w2(static_cast<std::size_t>(co) * ci * k * k);
    for (std::size_t i = 0; i < w2.size(); ++i)
        w2[i] = dc.w_basis.data()[static_cast<std::size_t>(2) * co * ci * k * k + i];
    Tensor expect = ad::conv2d_same(x, Tensor::constant({co, ci, k, k}, w2), dc.bias);
    Tensor got = dc.forward(x);
    double worst = 0.0;
    for (std::size_t i = 0; i < got.numel(); ++i)
        worst = std::max(worst, std::abs(got.data()[i] - expect.data()[i]));
    CHECK(worst < 1e-5);
}

TEST_CASE("equal basis kernels make the output attention-independent") {
    std::mt19937_64 rng(33);
    DynamicConv2d dc(2, 3, 3, 3, rng);
    // copy kernel block 0 into the others
    const std::size_t block = static_cast<std::size_t>(3) * 2 * 3 * 3;
    for (int j = 1; j < 3; ++j)
        for (std::size_t i = 0; i < block; ++i)
            dc.w_basis.data()[static_cast<std::size_t>(j) * block + i] = dc.w_basis.data()[i];

    Tensor x = Tensor::constant({2, 2, 5, 8}, random_vector(2 * 2 * 5 * 8, rng));
    Tensor a = dc.forward(x);
    for (double& v : dc.att_w.data()) v = std::normal_distribution<double>(0.0, 2.0)(rng);
    Tensor b = dc.forward(x);
    for (std::size_t i = 0; i < a.numel(); ++i)
        CHECK(a.data()[i] == doctest::Approx(b.data()[i]).epsilon(1e-10));
}

TEST_CASE("node generator output geometry") {
    std::mt19937_64 rng(34);
    ModelConfig cfg = tiny_config();
    Model model(cfg, rng);

    std::mt19937_64 drng(35);
    BatchGraph g = random_batch({7}, drng);
    Tensor chunks = chunk_input_tensor(g);
    REQUIRE(chunks.shape() == std::vector<int>{7, 3, 5, 84});
    Tensor emb = model.generate_embeddings(chunks, false);
    CHECK(emb.shape() == std::vector<int>{7, cfg.d_node});
    for (double v : emb.data()) CHECK(std::isfinite(v));

    SUBCASE("zero input stays finite") {
        Tensor zeros = Tensor::constant({2, 3, 5, 84}, 0.0);
        Tensor e = model.generate_embeddings(zeros, false);
        for (double v : e.data()) CHECK(std::isfinite(v));
    }
    SUBCASE("duplicated rows embed identically in eval mode") {
        std::vector<double> twice = chunks.data();
        twice.insert(twice.end(), chunks.data().begin(),
                     chunks.data().begin() + 3 * 5 * 84);
        Tensor dup = Tensor::constant({8, 3, 5, 84}, twice);
        Tensor e = model.generate_embeddings(dup, false);
        for (int c = 0; c < cfg.d_node; ++c)
            CHECK(e.data()[static_cast<std::size_t>(7) * cfg.d_node + c] ==
                  doctest::Approx(e.data()[c]).epsilon(1e-12));
    }
    SUBCASE("narrow band count is rejected at build time") {
        ModelConfig bad = cfg;
        bad.n_bands = 48; // 48 -> 12 -> 3 -> 0 after three 4x pools
        std::mt19937_64 r2(1);
        CHECK_THROWS(Model(bad, r2));
    }
}

TEST_CASE("edge features") {
    std::mt19937_64 rng(36);
    ModelConfig cfg = tiny_config();
    Model model(cfg, rng);
    const std::vector<int> src{0, 1, 2};
    const std::vector<int> dst{1, 2, 3};

    SUBCASE("zero embeddings give a constant relu(bias) row") {
        Tensor zero = Tensor::constant({4, cfg.d_node}, 0.0);
        Tensor e = model.edge_features(zero, src, dst);
        REQUIRE(e.shape() == std::vector<int>{3, 12});
        for (int j = 0; j < 12; ++j) {
            const double expect = std::max(0.0, model.edge_proj.b.data()[j]);
            for (int r = 0; r < 3; ++r)
                CHECK(e.data()[static_cast<std::size_t>(r) * 12 + j] ==
                      doctest::Approx(expect));
        }
    }
    SUBCASE("dimension is 12 regardless of node width") {
        std::mt19937_64 r2(37);
        ModelConfig wide = cfg;
        wide.d_node = 24;
        Model m2(wide, r2);
        Tensor h = Tensor::constant({4, 24}, random_vector(96, rng));
        CHECK(m2.edge_features(h, src, dst).dim(1) == 12);
    }
    SUBCASE("ordered concatenation is direction-sensitive") {
        Tensor h = Tensor::constant({4, cfg.d_node},
                                    random_vector(4 * static_cast<std::size_t>(cfg.d_node), rng));
        Tensor fwd = model.edge_features(h, {0}, {1});
        Tensor rev = model.edge_features(h, {1}, {0});
        double diff = 0.0;
        for (std::size_t i = 0; i < fwd.numel(); ++i)
            diff += std::abs(fwd.data()[i] - rev.data()[i]);
        CHECK(diff > 1e-6);
    }
    SUBCASE("sequential mode matches the same interface") {
        std::mt19937_64 r3(38);
        ModelConfig seq = cfg;
        seq.edge_mode = ModelConfig::EdgeMode::Sequential;
        Model m3(seq, r3);
        Tensor h = Tensor::constant({4, cfg.d_node},
                                    random_vector(4 * static_cast<std::size_t>(cfg.d_node), rng));
        Tensor e = m3.edge_features(h, src, dst);
        CHECK(e.shape() == std::vector<int>{3, 12});
        for (double v : e.data()) CHECK(std::isfinite(v));
    }
}

TEST_CASE("attention weights normalize per node") {
    std::mt19937_64 rng(39);
    ModelConfig cfg = tiny_config();
    Model model(cfg, rng);

    std::mt19937_64 drng(40);
    for (int it = 0; it < 20; ++it) {
        std::uniform_int_distribution<int> len(1, 9);
        BatchGraph g = random_batch({len(drng), len(drng)}, drng);
        Tensor emb = model.generate_embeddings(chunk_input_tensor(g), false);
        const MessageEdges edges = build_message_edges(g);
        Tensor eattr = model.edge_features(emb, edges.src, edges.dst);
        Tensor alpha;
        model.gat1.forward(emb, eattr, edges.src, edges.dst, edges.seg_offsets, false, &alpha);
        for (int n = 0; n < g.n_nodes; ++n) {
            double sum = 0.0;
            for (int e = edges.seg_offsets[static_cast<std::size_t>(n)];
                 e < edges.seg_offsets[static_cast<std::size_t>(n) + 1]; ++e)
                sum += alpha.data()[static_cast<std::size_t>(e)];
            CHECK(std::abs(sum - 1.0) < 1e-6);
        }
    }
}

TEST_CASE("single in-neighbor attention is exactly one") {
    std::mt19937_64 rng(41);
    Model model(tiny_config(), rng);
    std::mt19937_64 drng(42);
    BatchGraph g = random_batch({1}, drng); // single node: self-loop only
    Tensor emb = model.generate_embeddings(chunk_input_tensor(g), false);
    const MessageEdges edges = build_message_edges(g);
    Tensor eattr = model.edge_features(emb, edges.src, edges.dst);
    Tensor alpha;
    model.gat1.forward(emb, eattr, edges.src, edges.dst, edges.seg_offsets, false, &alpha);
    REQUIRE(alpha.numel() == 1);
    CHECK(alpha.data()[0] == doctest::Approx(1.0));
}

TEST_CASE("temporal encoding") {
    SUBCASE("zero time adds nothing") {
        const auto enc = temporal_encoding({0.0}, 8, 0.05);
        for (double v : enc) CHECK(v == 0.0);
    }
    SUBCASE("first channel has zero frequency") {
        const auto enc = temporal_encoding({0.3, 0.9}, 8, 0.05);
        CHECK(enc[0] == 0.0);
        CHECK(enc[8] == 0.0);
    }
    SUBCASE("last channel at t=1 is gamma*sin(10)") {
        const auto enc = temporal_encoding({1.0}, 8, 0.05);
        CHECK(enc[7] == doctest::Approx(0.05 * std::sin(10.0)).epsilon(1e-12));
        CHECK(enc[7] == doctest::Approx(-0.0272).epsilon(1e-2));
    }
    SUBCASE("additive term is bounded by gamma") {
        std::mt19937_64 rng(43);
        Model model(tiny_config(), rng);
        std::mt19937_64 drng(44);
        BatchGraph g = random_batch({6}, drng);
        const NodeOutputs out = model.forward(g, false);
        double worst = 0.0;
        for (std::size_t i = 0; i < out.embeddings.numel(); ++i)
            worst = std::max(worst,
                             std::abs(out.time_encoded.data()[i] - out.embeddings.data()[i]));
        CHECK(worst <= 0.05 + 1e-12);
    }
    SUBCASE("one channel is a config error") {
        ModelConfig bad = tiny_config();
        bad.d_node = 1;
        std::mt19937_64 rng(45);
        CHECK_THROWS(Model(bad, rng));
    }
}

TEST_CASE("node head emits confidence plus class logits") {
    std::mt19937_64 rng(46);
    Model model(tiny_config(), rng);
    std::mt19937_64 drng(47);
    BatchGraph g = random_batch({4}, drng);
    const NodeOutputs out = model.forward(g, false);
    CHECK(out.node_logits.shape() == std::vector<int>{4, 5});
    const NodeOutputs again = model.forward(g, false);
    CHECK(out.node_logits.data() == again.node_logits.data());
}

TEST_CASE("batch isolation in eval mode") {
    std::mt19937_64 rng(48);
    Model model(tiny_config(), rng);
    std::mt19937_64 drng(49);

    for (int it = 0; it < 5; ++it) {
        std::uniform_int_distribution<int> len(2, 8);
        const int n1 = len(drng), n2 = len(drng);
        BatchGraph pair = random_batch({n1, n2}, drng);

        // rebuild each clip alone from the batch slices
        const auto slice_clip = [&](int begin, int count, int clip_idx) {
            ClipGraph g;
            g.n_nodes = count;
            g.channels = pair.channels;
            g.n_bands = pair.n_bands;
            g.group_frames = pair.group_frames;
            const std::size_t stride =
                static_cast<std::size_t>(pair.channels) * pair.n_bands * pair.group_frames;
            g.chunk_inputs.assign(
                pair.chunk_inputs.begin() + static_cast<std::ptrdiff_t>(begin * stride),
                pair.chunk_inputs.begin() + static_cast<std::ptrdiff_t>((begin + count) * stride));
            g.node_conf.assign(static_cast<std::size_t>(count), 0.0);
            g.node_class.assign(static_cast<std::size_t>(count), -1);
            g.node_time.assign(pair.node_time.begin() + begin,
                               pair.node_time.begin() + begin + count);
            for (int j = 0; j + 1 < count; ++j) g.edge_index.emplace_back(j, j + 1);
            g.edge_label = edge_labels(g.node_class);
            g.duration_s = pair.durations[static_cast<std::size_t>(clip_idx)];
            return g;
        };
        const BatchGraph solo1 = collate({slice_clip(0, n1, 0)});
        const BatchGraph solo2 = collate({slice_clip(n1, n2, 1)});

        const NodeOutputs batched = model.forward(pair, false);
        const NodeOutputs alone1 = model.forward(solo1, false);
        const NodeOutputs alone2 = model.forward(solo2, false);

        double worst = 0.0;
        for (std::size_t i = 0; i < alone1.node_logits.numel(); ++i)
            worst = std::max(worst, std::abs(alone1.node_logits.data()[i] -
                                             batched.node_logits.data()[i]));
        const std::size_t off = static_cast<std::size_t>(n1) * 5;
        for (std::size_t i = 0; i < alone2.node_logits.numel(); ++i)
            worst = std::max(worst, std::abs(alone2.node_logits.data()[i] -
                                             batched.node_logits.data()[off + i]));
        CHECK(worst < 1e-5);
    }
}

TEST_CASE("meta one-hot concatenation changes widths consistently") {
    std::mt19937_64 rng(50);
    ModelConfig cfg = tiny_config();
    cfg.meta_dim = 6;
    Model model(cfg, rng);
    std::mt19937_64 drng(51);
    BatchGraph g = random_batch({3}, drng);
    g.meta_dim = 6;
    g.meta_onehot.assign(static_cast<std::size_t>(3) * 6, 0.0);
    for (int n = 0; n < 3; ++n) g.meta_onehot[static_cast<std::size_t>(n) * 6 + 1] = 1.0;
    const NodeOutputs out = model.forward(g, false);
    CHECK(out.embeddings.shape() == std::vector<int>{3, cfg.d_node});
    CHECK(out.node_logits.shape() == std::vector<int>{3, 5});
}

TEST_CASE("trunk parameters receive gradient through the node head") {
    std::mt19937_64 rng(52);
    Model model(tiny_config(), rng);
    std::mt19937_64 drng(53);
    BatchGraph g = random_batch({3}, drng);
    Tensor mix = Tensor::constant({3, 5}, random_vector(15, drng));

    Tensor w = model.conv1.w_basis;
    const double rel = testing::gradcheck(
        w,
        [&] {
            const NodeOutputs out = model.forward(g, true);
            return ad::sum_all(ad::mul(out.node_logits, mix));
        },
        1e-5, 10, 99);
    CHECK(rel < 1e-4);
}

} // TEST_SUITE
