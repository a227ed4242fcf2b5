#include "doctest.h"

#include <algorithm>
#include <random>

#include "../support/synthetic.hpp"
#include "rsed/graphify.hpp"

using namespace rsed;

namespace {

const ClassVocabulary kVocab = ClassVocabulary::default_respiratory();

SpectrogramStack tiny_stack(int frames, int bands = 4, int channels = 2) {
    SpectrogramStack s;
    s.channels = channels;
    s.n_bands = bands;
    s.frames = frames;
    s.values.resize(static_cast<std::size_t>(channels) * bands * frames);
    for (std::size_t i = 0; i < s.values.size(); ++i)
        s.values[i] = static_cast<double>(i % 17) * 0.25;
    s.frame_times.resize(static_cast<std::size_t>(frames));
    for (int f = 0; f < frames; ++f) s.frame_times[f] = f * 0.016;
    s.source_duration_s = frames * 0.016;
    return s;
}

} // namespace

TEST_SUITE("graphify") {

TEST_CASE("frame labels from events") {
    std::vector<double> times;
    for (int i = 0; i < 30; ++i) times.push_back(i * 0.1); // 0 .. 2.9

    SUBCASE("no events gives all zeros") {
        const FrameLabels l = frame_labels_from_events({}, times, kVocab);
        CHECK(std::count(l.begin(), l.end(), 0) == 30);
    }
    SUBCASE("one event marks covered frame centers") {
        std::vector<EventRecord> evs{{1.0, 2.0, "wheeze", -1.0}};
        const FrameLabels l = frame_labels_from_events(evs, times, kVocab);
        for (int i = 0; i < 30; ++i) {
            const double t = times[static_cast<std::size_t>(i)];
            if (t >= 1.0 && t <= 2.0)
                CHECK(l[static_cast<std::size_t>(i)] == 1); // wheeze id 0 -> label 1
            else
                CHECK(l[static_cast<std::size_t>(i)] == 0);
        }
    }
    SUBCASE("abutting events: boundary frame goes to the later event") {
        std::vector<EventRecord> evs{{0.5, 1.0, "wheeze", -1.0}, {1.0, 1.5, "crackle", -1.0}};
        const FrameLabels l = frame_labels_from_events(evs, times, kVocab);
        CHECK(l[10] == 4); // t=1.0: crackle id 3 -> label 4
        CHECK(l[9] == 1);
        CHECK(l[11] == 4);
        int assigned = 0;
        for (int v : l)
            if (v != 0) ++assigned;
        CHECK(assigned == 11); // 0.5..1.5 inclusive at 0.1 spacing
    }
    SUBCASE("unknown label throws with the label name") {
        std::vector<EventRecord> evs{{0.1, 0.4, "sneeze", -1.0}};
        CHECK_THROWS_WITH_AS(frame_labels_from_events(evs, times, kVocab),
                             doctest::Contains("sneeze"), std::runtime_error);
    }
}

TEST_CASE("node labels: confidence fraction and majority class") {
    std::vector<double> conf;
    std::vector<int> cls;

    SUBCASE("all normal") {
        node_labels({0, 0, 0, 0, 0}, 5, &conf, &cls);
        CHECK(conf == std::vector<double>{0.0});
        CHECK(cls == std::vector<int>{-1});
    }
    SUBCASE("two of five abnormal") {
        node_labels({1, 1, 0, 0, 0}, 5, &conf, &cls);
        CHECK(conf[0] == doctest::Approx(0.4));
        CHECK(cls[0] == 0);
    }
    SUBCASE("tie broken by first appearance") {
        node_labels({1, 1, 2, 2, 0}, 5, &conf, &cls);
        CHECK(conf[0] == doctest::Approx(0.8));
        CHECK(cls[0] == 0);
        node_labels({2, 2, 1, 1, 0}, 5, &conf, &cls);
        CHECK(cls[0] == 1);
    }
    SUBCASE("padding inherits the final frame label") {
        node_labels({0, 0, 0, 0, 0, 0, 2}, 5, &conf, &cls);
        REQUIRE(conf.size() == 2);
        // chunk 2 covers frames {5,6,pad,pad,pad} -> 4 abnormal of 5
        CHECK(conf[1] == doctest::Approx(0.8));
        CHECK(cls[1] == 1);
    }
    SUBCASE("exact rational confidence over random labelings") {
        std::mt19937_64 rng(5);
        std::uniform_int_distribution<int> lab(0, 4);
        for (int it = 0; it < 30; ++it) {
            FrameLabels frames(35);
            for (auto& f : frames) f = lab(rng);
            node_labels(frames, 5, &conf, &cls);
            for (std::size_t g = 0; g < conf.size(); ++g) {
                int abnormal = 0;
                for (int j = 0; j < 5; ++j)
                    if (frames[std::min<std::size_t>(g * 5 + j, frames.size() - 1)] != 0)
                        ++abnormal;
                CHECK(conf[g] == abnormal / 5.0);
                CHECK((conf[g] == 0.0) == (cls[g] == -1));
            }
        }
    }
}

TEST_CASE("chunking geometry and node times") {
    SUBCASE("576 frames make 116 chunks") {
        const SpectrogramStack s = tiny_stack(576);
        std::vector<double> inputs, times;
        int n = 0;
        chunk(s, 5, 73600, 128, &inputs, &times, &n);
        CHECK(n == 116);
        CHECK(inputs.size() == static_cast<std::size_t>(116) * 2 * 4 * 5);
        // last chunk pads with the final frame
        const auto at = [&](int g, int c, int b, int j) {
            return inputs[((static_cast<std::size_t>(g) * 2 + c) * 4 + b) * 5 + j];
        };
        CHECK(at(115, 1, 2, 3) == s.at(1, 2, 575));
        CHECK(at(115, 1, 2, 4) == s.at(1, 2, 575));
    }
    SUBCASE("five frames give one centered chunk") {
        const SpectrogramStack s = tiny_stack(5);
        std::vector<double> inputs, times;
        int n = 0;
        chunk(s, 5, 640, 128, &inputs, &times, &n);
        CHECK(n == 1);
        CHECK(times[0] == doctest::Approx(0.5));
    }
    SUBCASE("node times strictly increase") {
        const SpectrogramStack s = tiny_stack(10);
        std::vector<double> inputs, times;
        int n = 0;
        chunk(s, 5, 1280, 128, &inputs, &times, &n);
        CHECK(n == 2);
        CHECK(times[0] == doctest::Approx(0.25));
        CHECK(times[1] == doctest::Approx(0.75));
        for (std::size_t i = 1; i < times.size(); ++i) CHECK(times[i] > times[i - 1]);
    }
}

TEST_CASE("edge labels from node classes") {
    CHECK(edge_labels({-1, -1}) == std::vector<int>{0});
    CHECK(edge_labels({-1, 2}) == std::vector<int>{1});
    CHECK(edge_labels({3, 1}) == std::vector<int>{1});
    CHECK(edge_labels({-1, 0, -1}) == std::vector<int>{1, 1});
    CHECK(edge_labels({5}).empty());
}

TEST_CASE("collate applies index offsets and batch ids") {
    const SpectrogramStack s3 = tiny_stack(15); // 3 nodes at w=5
    const SpectrogramStack s2 = tiny_stack(10); // 2 nodes
    ClipGraph g3 = build_clip_graph(s3, {}, kVocab, 5, 128, 15 * 128, "a");
    ClipGraph g2 = build_clip_graph(s2, {}, kVocab, 5, 128, 10 * 128, "b");
    const BatchGraph b = collate({g3, g2});

    CHECK(b.n_nodes == 5);
    REQUIRE(b.edge_index.size() == 3);
    CHECK(b.edge_index[0] == std::make_pair(0, 1));
    CHECK(b.edge_index[1] == std::make_pair(1, 2));
    CHECK(b.edge_index[2] == std::make_pair(3, 4));
    CHECK(b.batch == std::vector<int>{0, 0, 0, 1, 1});
    CHECK(b.node_offsets == std::vector<int>{0, 3, 5});
    CHECK(b.clip_ids == std::vector<std::string>{"a", "b"});

    SUBCASE("single clip collation is the identity on edges") {
        const BatchGraph one = collate({g3});
        CHECK(one.edge_index == g3.edge_index);
        CHECK(one.batch == std::vector<int>{0, 0, 0});
    }
    SUBCASE("single-node clips produce no edges") {
        const SpectrogramStack s1 = tiny_stack(5);
        ClipGraph g1 = build_clip_graph(s1, {}, kVocab, 5, 128, 640, "x");
        const BatchGraph many = collate({g1, g1, g1});
        CHECK(many.edge_index.empty());
        CHECK(many.batch == std::vector<int>{0, 1, 2});
    }
    SUBCASE("edges never cross clips") {
        for (const auto& e : b.edge_index) CHECK(b.batch[e.first] == b.batch[e.second]);
    }
}

TEST_CASE("collate permutation equivariance") {
    std::mt19937_64 rng(9);
    std::vector<ClipGraph> graphs;
    for (int i = 0; i < 4; ++i) {
        const SpectrogramStack s = tiny_stack(5 * (i + 2));
        graphs.push_back(build_clip_graph(s, {}, kVocab, 5, 128,
                                          static_cast<std::size_t>(5 * (i + 2)) * 128,
                                          "clip" + std::to_string(i)));
    }
    const BatchGraph base = collate(graphs);

    std::vector<std::size_t> perm{2, 0, 3, 1};
    std::vector<ClipGraph> shuffled;
    for (std::size_t p : perm) shuffled.push_back(graphs[p]);
    const BatchGraph permuted = collate(shuffled);

    CHECK(permuted.n_nodes == base.n_nodes);
    CHECK(permuted.edge_index.size() == base.edge_index.size());
    // per-clip edge counts survive the permutation
    for (std::size_t i = 0; i < perm.size(); ++i) {
        const int orig = graphs[perm[i]].n_nodes;
        CHECK(permuted.node_offsets[i + 1] - permuted.node_offsets[i] == orig);
        int edges_in_clip = 0;
        for (const auto& e : permuted.edge_index)
            if (permuted.batch[e.first] == static_cast<int>(i)) ++edges_in_clip;
        CHECK(edges_in_clip == orig - 1);
    }
}

TEST_CASE("graph cache round trip") {
    const SpectrogramStack s = tiny_stack(15);
    std::vector<EventRecord> evs{{0.02, 0.12, "stridor", -1.0}};
    ClipGraph g = build_clip_graph(s, evs, kVocab, 5, 128, 15 * 128, "cached");
    const auto path = std::filesystem::temp_directory_path() / "rsed_graph_test.bin";
    save_graph_cache(path, g, 99);

    const auto loaded = load_graph_cache(path, 99);
    REQUIRE(loaded.has_value());
    CHECK(loaded->n_nodes == g.n_nodes);
    CHECK(loaded->chunk_inputs == g.chunk_inputs);
    CHECK(loaded->node_class == g.node_class);
    CHECK(loaded->edge_label == g.edge_label);
    CHECK(loaded->node_time == g.node_time);
    CHECK(loaded->clip_id == "cached");
    CHECK(loaded->edge_index == g.edge_index);

    CHECK_FALSE(load_graph_cache(path, 100).has_value());
    std::filesystem::remove(path);
}

} // TEST_SUITE
