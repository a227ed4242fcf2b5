#include "doctest.h"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numbers>
#include <set>

#include "../support/synthetic.hpp"
#include "rsed/trainer.hpp"

using namespace rsed;

namespace {

PipelineConfig small_pipeline() {
    PipelineConfig cfg;
    cfg.model.n_basis = 2;
    cfg.model.conv_channels = {4, 6, 8};
    cfg.model.d_node = 16;
    cfg.refiner.gru_hidden = 8;
    cfg.refiner.mlp_hidden = 12;
    cfg.train.batch_size = 2;
    cfg.train.epochs = 1;
    return cfg;
}

std::vector<ClipSource> tiny_dataset(int n_clips, double duration = 2.0) {
    std::vector<ClipSource> out;
    const auto names = ClassVocabulary::default_respiratory().names();
    for (int i = 0; i < n_clips; ++i) {
        std::vector<testing::SyntheticEventSpec> evs;
        evs.push_back({0.4 + 0.1 * i, 1.0 + 0.1 * i, i % 2});
        ClipSource src;
        src.audio = testing::make_burst_clip(duration, 8000, evs, names,
                                             1000 + static_cast<std::uint64_t>(i));
        src.clip_id = "clip" + std::to_string(i);
        out.push_back(std::move(src));
    }
    return out;
}

} // namespace

TEST_SUITE("trainer") {

TEST_CASE("scheduler closed forms") {
    CHECK(node_lr_schedule(0) == doctest::Approx(1e-3).epsilon(1e-12));
    CHECK(node_lr_schedule(126) == doctest::Approx(9.9e-4).epsilon(1e-12));
    CHECK(node_lr_schedule(252) == doctest::Approx(1e-3 * 0.99 * 0.99).epsilon(1e-12));

    const long t_max = 1000;
    CHECK(interval_lr_schedule(0, t_max) == doctest::Approx(1e-3).epsilon(1e-12));
    CHECK(interval_lr_schedule(t_max, t_max) == doctest::Approx(2e-4).epsilon(1e-12));
    CHECK(interval_lr_schedule(t_max / 2, t_max) == doctest::Approx(6e-4).epsilon(1e-12));
}

TEST_CASE("parameter partition is exact and exhaustive") {
    Trainer trainer(small_pipeline(), 7);
    const auto node = trainer.node_group();
    const auto interval = trainer.interval_group();
    CHECK(!node.empty());
    CHECK(!interval.empty());

    std::set<std::string> names;
    std::set<const void*> ptrs;
    for (const auto& p : node) {
        CHECK(names.insert(p.name).second);
        CHECK(ptrs.insert(p.tensor.node().get()).second);
    }
    for (const auto& p : interval) {
        CHECK(names.insert(p.name).second);   // disjoint names
        CHECK(ptrs.insert(p.tensor.node().get()).second); // disjoint tensors
    }

    // exhaustive: model params all live in the node group, refiner in interval
    CHECK(node.size() == trainer.model().parameters().size());
    CHECK(interval.size() == trainer.refiner().parameters().size());
    for (const auto& p : node) CHECK(p.name.rfind("refiner", 0) != 0);
    for (const auto& p : interval) CHECK(p.name.rfind("refiner", 0) == 0);
}

TEST_CASE("zero-weight losses leave parameters unchanged") {
    PipelineConfig cfg = small_pipeline();
    cfg.objective.weights = {0.0, 0.0, 0.0, 0.0, 0.0};
    Trainer trainer(cfg, 11);
    trainer.resolve_t_max(10, 1);

    const auto data = tiny_dataset(2);
    std::vector<PreparedClip> prepared;
    for (const auto& c : data) prepared.push_back(prepare_clip(c.audio, cfg, c.clip_id));

    std::vector<std::vector<double>> before;
    for (const auto& p : trainer.node_group()) before.push_back(p.tensor.data());
    for (const auto& p : trainer.interval_group()) before.push_back(p.tensor.data());

    const LossReport rep = trainer.train_step({&prepared[0], &prepared[1]});
    CHECK(rep.total == 0.0);

    std::size_t k = 0;
    double worst = 0.0;
    for (const auto& p : trainer.node_group()) {
        for (std::size_t i = 0; i < p.tensor.numel(); ++i)
            worst = std::max(worst, std::abs(p.tensor.data()[i] - before[k][i]));
        ++k;
    }
    for (const auto& p : trainer.interval_group()) {
        for (std::size_t i = 0; i < p.tensor.numel(); ++i)
            worst = std::max(worst, std::abs(p.tensor.data()[i] - before[k][i]));
        ++k;
    }
    CHECK(worst == 0.0); // zero gradients: Adam update is exactly zero
}

TEST_CASE("equal seeds give bitwise-identical loss curves") {
    const auto run = [&](std::uint64_t seed) {
        PipelineConfig cfg = small_pipeline();
        Trainer trainer(cfg, seed);
        trainer.resolve_t_max(10, 1);
        const auto data = tiny_dataset(2);
        std::vector<PreparedClip> prepared;
        for (const auto& c : data) prepared.push_back(prepare_clip(c.audio, cfg, c.clip_id));
        std::vector<double> losses;
        for (int s = 0; s < 4; ++s)
            losses.push_back(trainer.train_step({&prepared[0], &prepared[1]}).total);
        return losses;
    };
    const auto a = run(123);
    const auto b = run(123);
    const auto c = run(321);
    CHECK(a == b); // bitwise identical
    CHECK(a != c);
}

TEST_CASE("training reduces the loss over step windows") {
    PipelineConfig cfg = small_pipeline();
    Trainer trainer(cfg, 5);
    trainer.resolve_t_max(200, 1);
    const auto data = tiny_dataset(2);
    std::vector<PreparedClip> prepared;
    for (const auto& c : data) prepared.push_back(prepare_clip(c.audio, cfg, c.clip_id));

    double head = 0.0, tail = 0.0;
    const int steps = 40, window = 10;
    for (int s = 0; s < steps; ++s) {
        const LossReport rep = trainer.train_step({&prepared[0], &prepared[1]});
        if (s < window) head += rep.total;
        if (s >= steps - window) tail += rep.total;
    }
    CHECK(tail / window < head / window);
}

TEST_CASE("sequential edges and separate heads train end to end") {
    PipelineConfig cfg = small_pipeline();
    cfg.model.edge_mode = ModelConfig::EdgeMode::Sequential;
    cfg.refiner.head_mode = RefinerConfig::HeadMode::Separate;
    Trainer trainer(cfg, 21);
    trainer.resolve_t_max(10, 1);
    const auto data = tiny_dataset(2);
    std::vector<PreparedClip> prepared;
    for (const auto& c : data) prepared.push_back(prepare_clip(c.audio, cfg, c.clip_id));

    double first = 0.0, last = 0.0;
    for (int s = 0; s < 6; ++s) {
        const LossReport rep = trainer.train_step({&prepared[0], &prepared[1]});
        if (s == 0) first = rep.total;
        last = rep.total;
        CHECK(std::isfinite(rep.total));
    }
    CHECK(last < first);

    // the mode-specific parameters exist and moved
    bool saw_edge_gru = false, saw_cls_head = false;
    for (const auto& p : trainer.node_group())
        if (p.name == "edge.gru.w_ih") saw_edge_gru = true;
    for (const auto& p : trainer.interval_group())
        if (p.name == "refiner.scale0.cls2.w") saw_cls_head = true;
    CHECK(saw_edge_gru);
    CHECK(saw_cls_head);
}

TEST_CASE("non-finite loss aborts with the offending clip ids") {
    PipelineConfig cfg = small_pipeline();
    Trainer trainer(cfg, 6);
    trainer.resolve_t_max(10, 1);
    const auto data = tiny_dataset(1);
    std::vector<PreparedClip> prepared{prepare_clip(data[0].audio, cfg, "poisoned")};

    // poison the head bias so the loss goes non-finite (earlier layers are
    // shielded by relu flushing NaN to zero)
    trainer.model().node_head.b.data()[0] = std::numeric_limits<double>::quiet_NaN();
    try {
        trainer.train_step({&prepared[0]});
        FAIL("expected TrainAbort");
    } catch (const TrainAbort& abort) {
        REQUIRE(abort.batch_clip_ids.size() == 1);
        CHECK(abort.batch_clip_ids[0] == "poisoned");
    }
}

TEST_CASE("checkpoint round trip restores eval outputs bit-exactly") {
    PipelineConfig cfg = small_pipeline();
    const auto data = tiny_dataset(2);

    Trainer a(cfg, 42);
    a.resolve_t_max(10, 1);
    std::vector<PreparedClip> prepared;
    for (const auto& c : data) prepared.push_back(prepare_clip(c.audio, cfg, c.clip_id));
    for (int s = 0; s < 3; ++s) a.train_step({&prepared[0], &prepared[1]});

    const auto path = std::filesystem::temp_directory_path() / "rsed_ckpt_test.bin";
    a.save_checkpoint(path);

    const auto before = a.predict(prepared[0]);

    Trainer b(cfg, 777); // different init; load overwrites everything
    b.load_checkpoint(path);
    CHECK(b.step() == a.step());
    const auto after = b.predict(prepared[0]);

    REQUIRE(before.size() == after.size());
    REQUIRE(before[0].size() == after[0].size());
    for (std::size_t i = 0; i < before[0].size(); ++i) {
        CHECK(before[0][i].start == after[0][i].start);
        CHECK(before[0][i].end == after[0][i].end);
        CHECK(before[0][i].conf_logit == after[0][i].conf_logit);
        CHECK(before[0][i].cls_logits == after[0][i].cls_logits);
    }
    std::filesystem::remove(path);
}

TEST_CASE("checkpoint rejects architecture mismatches") {
    PipelineConfig cfg = small_pipeline();
    Trainer a(cfg, 2);
    const auto path = std::filesystem::temp_directory_path() / "rsed_ckpt_mismatch.bin";
    a.save_checkpoint(path);

    PipelineConfig other = cfg;
    other.model.d_node = 24;
    Trainer b(other, 2);
    CHECK_THROWS(b.load_checkpoint(path));
    std::filesystem::remove(path);
}

TEST_CASE("fit writes the run directory layout") {
    PipelineConfig cfg = small_pipeline();
    cfg.train.epochs = 1;
    cfg.train.batch_size = 2;
    Trainer trainer(cfg, 3);

    const auto run_dir = std::filesystem::temp_directory_path() / "rsed_run_test";
    std::filesystem::remove_all(run_dir);
    auto data = tiny_dataset(2);
    const FitResult res = trainer.fit(data, data, run_dir, "train.seed = 3\n");
    CHECK(res.steps == 1);
    CHECK(std::filesystem::exists(run_dir / "config.cfg"));
    CHECK(std::filesystem::exists(run_dir / "loss_log.csv"));
    CHECK(std::filesystem::exists(run_dir / "last.ckpt"));
    CHECK(std::filesystem::exists(run_dir / "best.ckpt"));
    CHECK(std::filesystem::exists(run_dir / "eval_epoch1.json"));

    std::ifstream csv(run_dir / "loss_log.csv");
    std::string header;
    std::getline(csv, header);
    CHECK(header ==
          "step,node_conf,node_cls,interval_conf,interval_cls,interval_loc,total,n_fg,m_fg");
    std::string row;
    CHECK(std::getline(csv, row).good());
    std::filesystem::remove_all(run_dir);
}

TEST_CASE("prepared clips carry consistent labels") {
    PipelineConfig cfg = small_pipeline();
    const auto data = tiny_dataset(1, 3.0);
    const PreparedClip p = prepare_clip(data[0].audio, cfg, data[0].clip_id);
    CHECK(p.anchors.anchors.size() == 70);
    CHECK(p.anchor_labels.size() == 70);
    CHECK(p.graph.n_nodes > 0);
    int fg = 0;
    for (const auto& l : p.anchor_labels)
        if (l.foreground()) ++fg;
    CHECK(fg > 0); // the injected burst is long enough to pass the IoU gate
    for (const auto& l : p.anchor_labels)
        if (l.foreground()) {
            CHECK(l.conf >= cfg.anchors.iou_threshold);
            CHECK(l.cls >= 0);
        }
}

TEST_CASE("augmented preparation stays valid and seeded") {
    PipelineConfig cfg = small_pipeline();
    cfg.train.augment = true;
    cfg.train.augment_prob = 1.0;
    const auto data = tiny_dataset(1, 3.0);

    std::mt19937_64 rng1(9), rng2(9), rng3(10);
    const PreparedClip a = prepare_clip_augmented(data[0].audio, cfg, "x", {}, rng1);
    const PreparedClip b = prepare_clip_augmented(data[0].audio, cfg, "x", {}, rng2);
    const PreparedClip c = prepare_clip_augmented(data[0].audio, cfg, "x", {}, rng3);
    CHECK(a.graph.chunk_inputs == b.graph.chunk_inputs); // same stream, same result
    CHECK(a.graph.n_nodes > 0);
    (void)c;
}

} // TEST_SUITE
