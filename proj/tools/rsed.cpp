// Command line front end: prepare / train / evaluate / predict / inspect.

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "rsed/config.hpp"
#include "rsed/events.hpp"
#include "rsed/manifest.hpp"
#include "rsed/plot.hpp"
#include "rsed/trainer.hpp"

namespace fs = std::filesystem;
using namespace rsed;

namespace {

struct CommonOpts {
    std::string config_file;
    std::string preset_file;
    std::vector<std::string> sets; // key=value overrides
    int seed = -1;
    bool use_meta = false;
};

void add_common(CLI::App* cmd, CommonOpts* opts) {
    cmd->add_option("--config", opts->config_file, "layered config file (key = value lines)");
    cmd->add_option("--preset", opts->preset_file, "preset file applied before --config");
    cmd->add_option("--set", opts->sets, "extra key=value overrides (repeatable)");
    cmd->add_option("--seed", opts->seed, "training/init seed (overrides train.seed)");
    cmd->add_flag("--use-meta", opts->use_meta,
                  "attach recording position/gender one-hot to node features");
}

KvConfig resolve_kv(const CommonOpts& opts) {
    KvConfig kv;
    if (!opts.preset_file.empty()) kv.load_file(opts.preset_file);
    if (!opts.config_file.empty()) kv.load_file(opts.config_file);
    kv.apply_environment("RSED_");
    for (const auto& s : opts.sets) {
        const auto eq = s.find('=');
        if (eq == std::string::npos)
            throw std::runtime_error("--set expects key=value, got '" + s + "'");
        kv.set(s.substr(0, eq), s.substr(eq + 1));
    }
    if (opts.seed >= 0) kv.set("train.seed", std::to_string(opts.seed));
    if (opts.use_meta) kv.set("use_meta", "true");
    return kv;
}

std::vector<double> meta_onehot_for(const ManifestRecord& rec,
                                    const std::vector<std::string>& pos_vocab,
                                    const std::vector<std::string>& gender_vocab) {
    std::vector<double> v(pos_vocab.size() + gender_vocab.size(), 0.0);
    for (std::size_t i = 0; i < pos_vocab.size(); ++i)
        if (rec.position == pos_vocab[i]) v[i] = 1.0;
    for (std::size_t i = 0; i < gender_vocab.size(); ++i)
        if (rec.gender == gender_vocab[i]) v[pos_vocab.size() + i] = 1.0;
    return v;
}

ClipSource load_source(const ManifestRecord& rec, const PipelineConfig& cfg,
                       const std::vector<std::string>& pos_vocab,
                       const std::vector<std::string>& gender_vocab) {
    ClipSource src;
    src.audio = read_wav(rec.audio, cfg.features.sample_rate);
    src.audio.events = rec.events;
    src.audio.meta.position = rec.position;
    src.audio.meta.gender = rec.gender;
    src.clip_id = rec.clip_id;
    if (cfg.use_meta) src.meta_onehot = meta_onehot_for(rec, pos_vocab, gender_vocab);
    return src;
}

PipelineConfig config_with_meta(const KvConfig& kv, const Manifest& manifest) {
    PipelineConfig cfg = PipelineConfig::from_kv(kv);
    if (cfg.use_meta) {
        cfg.model.meta_dim = static_cast<int>(manifest.position_vocab().size() +
                                              manifest.gender_vocab().size());
        if (cfg.model.meta_dim == 0)
            throw std::runtime_error(
                "use_meta requested but the manifest carries no position/gender tokens");
    }
    return cfg;
}

PreparedClip prepare_with_cache(const ClipSource& src, const PipelineConfig& cfg,
                                const fs::path& cache_dir) {
    if (cache_dir.empty()) return prepare_clip(src.audio, cfg, src.clip_id, src.meta_onehot);

    fs::create_directories(cache_dir / "features");
    const fs::path fpath = cache_dir / "features" / (src.clip_id + ".feat");
    const std::uint64_t fhash = cfg.features.hash();
    SpectrogramStack normed;
    if (auto cached = load_feature_cache(fpath, fhash)) {
        normed = std::move(*cached);
    } else {
        normed = row_normalize(compute_stack(src.audio, cfg.features), cfg.features.norm_eps);
        save_feature_cache(fpath, normed, fhash);
    }

    PreparedClip out;
    out.clip_id = src.clip_id;
    out.events = src.audio.events;
    out.graph = build_clip_graph(normed, src.audio.events, cfg.vocab, cfg.model.group_frames,
                                 cfg.features.hop_len, src.audio.samples.size(), src.clip_id,
                                 src.meta_onehot);
    out.anchors = generate_anchors(src.audio.duration_s, cfg.anchors);
    std::vector<TruthInterval> truth;
    for (const auto& ev : src.audio.events)
        truth.push_back({ev.onset_s, ev.offset_s, cfg.vocab.id_of(ev.label)});
    out.anchor_labels = assign_anchor_labels(out.anchors, truth, cfg.anchors);
    return out;
}

// ---------------------------------------------------------------------------

int cmd_prepare(const CommonOpts& common, const std::string& data_dir,
                const std::string& adapter, const std::string& label_map_file,
                const std::string& out_dir, bool build_caches, bool dump_anchors) {
    const KvConfig kv = resolve_kv(common);
    const LabelMap label_map = label_map_file.empty() ? LabelMap::default_respiratory()
                                                      : LabelMap::from_file(label_map_file);

    IngestStats stats;
    PipelineConfig probe = PipelineConfig::from_kv(kv);
    Manifest manifest = ingest(data_dir, adapter, label_map, probe.vocab, &stats);
    fs::create_directories(out_dir);
    write_manifest(fs::path(out_dir) / "manifest.jsonl", manifest);
    {
        EventMap refs;
        for (const auto& rec : manifest.records) refs[rec.clip_id] = rec.events;
        write_event_jsonl(fs::path(out_dir) / "refs.jsonl", refs);
    }
    std::cout << "ingested " << stats.clips << " clips, " << stats.events << " events ("
              << stats.dropped_labels << " dropped by label map, " << stats.clipped_events
              << " clipped, " << stats.zero_length_dropped << " zero-length)\n";

    const PipelineConfig cfg = config_with_meta(kv, manifest);
    const auto pos_vocab = manifest.position_vocab();
    const auto gender_vocab = manifest.gender_vocab();

    if (build_caches || dump_anchors) {
        const fs::path cache_dir = fs::path(out_dir) / "cache";
        fs::create_directories(cache_dir / "graphs");
        const std::uint64_t ghash = cfg.features.hash() ^ cfg.anchors.hash();
        for (const auto& rec : manifest.records) {
            const ClipSource src = load_source(rec, cfg, pos_vocab, gender_vocab);
            const PreparedClip p =
                prepare_with_cache(src, cfg, build_caches ? cache_dir : fs::path());
            if (build_caches)
                save_graph_cache(cache_dir / "graphs" / (rec.clip_id + ".graph"), p.graph,
                                 ghash);
            if (dump_anchors) {
                fs::create_directories(fs::path(out_dir) / "anchors");
                dump_anchor_assignment(
                    fs::path(out_dir) / "anchors" / (rec.clip_id + ".txt"), p.anchors,
                    p.anchor_labels);
            }
        }
        std::cout << "caches written under " << (fs::path(out_dir) / "cache").string() << "\n";
    }
    std::cout << "manifest: " << (fs::path(out_dir) / "manifest.jsonl").string() << "\n";
    return 0;
}

int cmd_train(const CommonOpts& common, const std::string& manifest_file,
              const std::string& out_dir) {
    const KvConfig kv = resolve_kv(common);
    const Manifest manifest = read_manifest(manifest_file);
    const PipelineConfig cfg = config_with_meta(kv, manifest);
    const auto pos_vocab = manifest.position_vocab();
    const auto gender_vocab = manifest.gender_vocab();

    std::vector<ClipSource> train_clips, val_clips;
    for (const auto& rec : manifest.records) {
        if (rec.split == "train")
            train_clips.push_back(load_source(rec, cfg, pos_vocab, gender_vocab));
        else if (rec.split == "val")
            val_clips.push_back(load_source(rec, cfg, pos_vocab, gender_vocab));
    }
    if (train_clips.empty()) {
        std::cerr << "error: manifest has no clips tagged split=train\n";
        return 1;
    }
    std::cout << "training on " << train_clips.size() << " clips, validating on "
              << val_clips.size() << "\n";

    Trainer trainer(cfg, cfg.train.seed);
    const FitResult res = trainer.fit(train_clips, val_clips, out_dir, kv.serialize());
    std::cout << "done: " << res.steps << " steps";
    if (res.best_epoch > 0)
        std::cout << ", best overall F1 " << res.best_f1 << " at epoch " << res.best_epoch;
    std::cout << "\nrun directory: " << out_dir << "\n";
    return 0;
}

int cmd_evaluate(const std::string& ref_file, const std::string& sys_file,
                 const std::string& out_file, const std::string& classes) {
    ClassVocabulary vocab = ClassVocabulary::default_respiratory();
    if (!classes.empty()) {
        std::vector<std::string> names;
        std::stringstream ss(classes);
        std::string tok;
        while (std::getline(ss, tok, ',')) names.push_back(tok);
        vocab = ClassVocabulary(names);
    }
    const EventMap refs = read_event_jsonl(ref_file);
    const EventMap syss = read_event_jsonl(sys_file);
    const EvalReport report = evaluate_events(refs, syss, vocab);
    std::cout << format_report(report);
    std::cout << "overall F1 = " << report.overall.f1 << ", ER = " << report.overall.er
              << "\n";
    if (!out_file.empty()) {
        std::ofstream out(out_file);
        out << report_to_json(report) << "\n";
        std::cout << "report json: " << out_file << "\n";
    }
    return 0;
}

int cmd_predict(const CommonOpts& common, const std::string& manifest_file,
                const std::string& checkpoint, const std::string& out_dir,
                const std::string& split, const std::string& cache_dir, bool dump_preds) {
    const KvConfig kv = resolve_kv(common);
    const Manifest manifest = read_manifest(manifest_file);
    const PipelineConfig cfg = config_with_meta(kv, manifest);
    const auto pos_vocab = manifest.position_vocab();
    const auto gender_vocab = manifest.gender_vocab();

    Trainer trainer(cfg, cfg.train.seed);
    trainer.load_checkpoint(checkpoint);

    fs::create_directories(out_dir);
    const fs::path dump_path = fs::path(out_dir) / "predictions_dump.txt";
    if (dump_preds) std::ofstream(dump_path).close(); // truncate

    EventMap events;
    EventMap refs;
    int n_clips = 0;
    for (const auto& rec : manifest.records) {
        if (split != "all" && rec.split != split) continue;
        const ClipSource src = load_source(rec, cfg, pos_vocab, gender_vocab);
        const PreparedClip clip = prepare_with_cache(src, cfg, cache_dir);
        const auto preds = trainer.predict(clip);
        events[rec.clip_id] = decode(preds[0], cfg.vocab, cfg.decode);
        refs[rec.clip_id] = rec.events;
        if (dump_preds) dump_predictions(dump_path, rec.clip_id, preds[0]);
        ++n_clips;
    }
    if (n_clips == 0) {
        std::cerr << "error: no clips matched split '" << split << "'\n";
        return 1;
    }
    const fs::path events_path = fs::path(out_dir) / "events.jsonl";
    write_event_jsonl(events_path, events);
    std::cout << "predicted " << n_clips << " clips -> " << events_path.string() << "\n";

    const bool have_refs = std::any_of(refs.begin(), refs.end(),
                                       [](const auto& kv2) { return !kv2.second.empty(); });
    if (have_refs) {
        const EvalReport report = evaluate_events(refs, events, cfg.vocab);
        std::cout << format_report(report);
        std::ofstream rj(fs::path(out_dir) / "eval_report.json");
        rj << report_to_json(report) << "\n";
    }
    return 0;
}

int cmd_inspect(const std::string& manifest_file, const std::string& loss_log,
                const std::string& out_dir, const std::string& classes) {
    fs::create_directories(out_dir);
    ClassVocabulary vocab = ClassVocabulary::default_respiratory();
    if (!classes.empty()) {
        std::vector<std::string> names;
        std::stringstream ss(classes);
        std::string tok;
        while (std::getline(ss, tok, ',')) names.push_back(tok);
        vocab = ClassVocabulary(names);
    }

    if (!manifest_file.empty()) {
        const Manifest manifest = read_manifest(manifest_file, false);
        // duration buckets matching the anchor design review
        const std::vector<double> edges{0.5, 0.75, 1.0, 1.25};
        const std::vector<std::string> labels{"<0.5s", "0.5-0.75s", "0.75-1.0s", "1.0-1.25s",
                                              ">1.25s"};
        for (const auto& cls : vocab.names()) {
            std::vector<double> counts(edges.size() + 1, 0.0);
            for (const auto& rec : manifest.records)
                for (const auto& ev : rec.events) {
                    if (ev.label != cls) continue;
                    const double len = ev.length();
                    std::size_t bucket = edges.size();
                    for (std::size_t b = 0; b < edges.size(); ++b)
                        if (len < edges[b]) {
                            bucket = b;
                            break;
                        }
                    counts[bucket] += 1.0;
                }
            const fs::path p = fs::path(out_dir) / ("durations_" + cls + ".svg");
            plot::write_bar_chart(p, "event durations: " + cls, labels, counts);
            std::cout << "wrote " << p.string() << "\n";
        }
    }

    if (!loss_log.empty()) {
        std::ifstream in(loss_log);
        if (!in) {
            std::cerr << "error: cannot open loss log " << loss_log << "\n";
            return 1;
        }
        std::string header;
        std::getline(in, header);
        std::vector<std::string> cols;
        {
            std::stringstream ss(header);
            std::string tok;
            while (std::getline(ss, tok, ',')) cols.push_back(tok);
        }
        std::vector<plot::Series> series(cols.size() > 1 ? cols.size() - 1 : 0);
        for (std::size_t c = 1; c < cols.size(); ++c) series[c - 1].name = cols[c];
        std::string line;
        while (std::getline(in, line)) {
            std::stringstream ss(line);
            std::string tok;
            std::getline(ss, tok, ',');
            const double step = std::stod(tok);
            for (std::size_t c = 1; c < cols.size() && std::getline(ss, tok, ','); ++c) {
                series[c - 1].x.push_back(step);
                series[c - 1].y.push_back(std::stod(tok));
            }
        }
        // loss components only; the foreground counters get their own axis scale
        std::vector<plot::Series> losses;
        for (const auto& s : series)
            if (s.name != "n_fg" && s.name != "m_fg") losses.push_back(s);
        const fs::path p = fs::path(out_dir) / "loss_curves.svg";
        plot::write_line_chart(p, "training losses", losses, "step", "loss");
        std::cout << "wrote " << p.string() << "\n";
    }
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"respiratory sound event detection toolkit"};
    app.require_subcommand(1);

    // prepare
    CommonOpts prep_common;
    std::string data_dir, adapter = "sprsound", label_map_file, prep_out = "prepared";
    bool build_caches = false, dump_anchors = false;
    CLI::App* prep = app.add_subcommand("prepare", "ingest a dataset into a manifest");
    prep->add_option("--data", data_dir, "dataset directory")->required();
    prep->add_option("--adapter", adapter, "annotation layout: sprsound|hflung|manifest");
    prep->add_option("--label-map", label_map_file, "label map file (source = target|drop)");
    prep->add_option("--out-dir", prep_out, "output directory");
    prep->add_flag("--cache", build_caches, "precompute feature/graph caches");
    prep->add_flag("--dump-anchors", dump_anchors, "write per-clip anchor assignment dumps");
    add_common(prep, &prep_common);

    // train
    CommonOpts train_common;
    std::string train_manifest, train_out = "run";
    CLI::App* train = app.add_subcommand("train", "train a detector from a manifest");
    train->add_option("--manifest", train_manifest, "manifest.jsonl")->required();
    train->add_option("--out-dir", train_out, "run directory");
    add_common(train, &train_common);

    // evaluate
    std::string ref_file, sys_file, eval_out, eval_classes;
    CLI::App* eval = app.add_subcommand("evaluate", "score prediction events against references");
    eval->add_option("--ref", ref_file, "reference events jsonl")->required();
    eval->add_option("--sys", sys_file, "system events jsonl")->required();
    eval->add_option("--out", eval_out, "write the machine-readable report here");
    eval->add_option("--classes", eval_classes, "comma-separated class names");

    // predict
    CommonOpts pred_common;
    std::string pred_manifest, pred_ckpt, pred_out = "predictions", pred_split = "all",
                pred_cache;
    bool pred_dump = false;
    CLI::App* pred = app.add_subcommand("predict", "emit events from a checkpoint");
    pred->add_option("--manifest", pred_manifest, "manifest.jsonl")->required();
    pred->add_option("--checkpoint", pred_ckpt, "model checkpoint")->required();
    pred->add_option("--out-dir", pred_out, "output directory");
    pred->add_option("--split", pred_split, "clip split to score: all|train|val|test");
    pred->add_option("--cache-dir", pred_cache, "reuse feature caches from prepare");
    pred->add_flag("--dump-predictions", pred_dump, "write raw per-anchor prediction rows");
    add_common(pred, &pred_common);

    // inspect
    std::string ins_manifest, ins_loss, ins_out = "inspect", ins_classes;
    CLI::App* ins = app.add_subcommand("inspect", "emit duration histograms and loss plots");
    ins->add_option("--manifest", ins_manifest, "manifest.jsonl for duration histograms");
    ins->add_option("--loss-log", ins_loss, "loss_log.csv from a training run");
    ins->add_option("--out-dir", ins_out, "output directory");
    ins->add_option("--classes", ins_classes, "comma-separated class names");

    CLI11_PARSE(app, argc, argv);

    try {
        if (prep->parsed())
            return cmd_prepare(prep_common, data_dir, adapter, label_map_file, prep_out,
                               build_caches, dump_anchors);
        if (train->parsed()) return cmd_train(train_common, train_manifest, train_out);
        if (eval->parsed()) return cmd_evaluate(ref_file, sys_file, eval_out, eval_classes);
        if (pred->parsed())
            return cmd_predict(pred_common, pred_manifest, pred_ckpt, pred_out, pred_split,
                               pred_cache, pred_dump);
        if (ins->parsed()) return cmd_inspect(ins_manifest, ins_loss, ins_out, ins_classes);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
