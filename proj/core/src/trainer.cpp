#include "rsed/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>
#include <sstream>
#include <stdexcept>

namespace rsed {

PreparedClip prepare_clip(const AudioClip& clip, const PipelineConfig& cfg,
                          const std::string& clip_id, const std::vector<double>& meta_onehot) {
    clip.validate();
    const SpectrogramStack stack = compute_stack(clip, cfg.features);
    const SpectrogramStack normed = row_normalize(stack, cfg.features.norm_eps);

    PreparedClip out;
    out.clip_id = clip_id;
    out.events = clip.events;
    out.graph = build_clip_graph(normed, clip.events, cfg.vocab, cfg.model.group_frames,
                                 cfg.features.hop_len, clip.samples.size(), clip_id, meta_onehot);
    out.anchors = generate_anchors(clip.duration_s, cfg.anchors);
    std::vector<TruthInterval> truth;
    for (const auto& ev : clip.events) {
        const int cls = cfg.vocab.id_of(ev.label);
        if (cls < 0) throw std::runtime_error("prepare_clip: unknown label " + ev.label);
        truth.push_back({ev.onset_s, ev.offset_s, cls});
    }
    out.anchor_labels = assign_anchor_labels(out.anchors, truth, cfg.anchors);
    return out;
}

PreparedClip prepare_clip_augmented(const AudioClip& clip, const PipelineConfig& cfg,
                                    const std::string& clip_id,
                                    const std::vector<double>& meta_onehot,
                                    std::mt19937_64& rng) {
    AudioClip work = clip;
    std::uniform_real_distribution<double> coin(0.0, 1.0);
    if (coin(rng) < cfg.train.augment_prob) {
        std::uniform_int_distribution<int> pick(0, 3);
        switch (pick(rng)) {
        case 0: {
            std::uniform_real_distribution<double> snr(15.0, 35.0);
            work = augment_noise(work, snr(rng), rng);
            break;
        }
        case 1: {
            std::uniform_real_distribution<double> f(0.9, 1.1);
            work = augment_time_stretch(work, f(rng));
            break;
        }
        case 2: {
            std::uniform_real_distribution<double> w(0.9, 1.1);
            work = augment_vtlp(work, w(rng));
            break;
        }
        default: {
            std::uniform_real_distribution<double> sh(-work.duration_s / 2.0,
                                                      work.duration_s / 2.0);
            work = augment_time_shift(work, sh(rng));
            break;
        }
        }
    }

    work.validate();
    const SpectrogramStack stack = compute_stack(work, cfg.features);
    SpectrogramStack normed = row_normalize(stack, cfg.features.norm_eps);
    if (coin(rng) < cfg.train.augment_prob) {
        std::uniform_int_distribution<int> widths(2, 12);
        normed = mask_spectrogram(normed, MaskAxis::Time, widths(rng), 1, rng);
        normed = mask_spectrogram(normed, MaskAxis::Frequency,
                                  std::min(widths(rng), normed.n_bands - 1), 1, rng);
    }

    PreparedClip out;
    out.clip_id = clip_id;
    out.events = work.events;
    out.graph = build_clip_graph(normed, work.events, cfg.vocab, cfg.model.group_frames,
                                 cfg.features.hop_len, work.samples.size(), clip_id, meta_onehot);
    out.anchors = generate_anchors(work.duration_s, cfg.anchors);
    std::vector<TruthInterval> truth;
    for (const auto& ev : work.events)
        truth.push_back({ev.onset_s, ev.offset_s, cfg.vocab.id_of(ev.label)});
    out.anchor_labels = assign_anchor_labels(out.anchors, truth, cfg.anchors);
    return out;
}

double node_lr_schedule(long step, double lr0, double decay, double period) {
    return lr0 * std::pow(decay, static_cast<double>(step) / period);
}

double interval_lr_schedule(long step, long t_max, double lr0, double lr_min) {
    const double phase = std::numbers::pi * static_cast<double>(step) /
                         static_cast<double>(std::max<long>(1, t_max));
    return lr_min + 0.5 * (lr0 - lr_min) * (1.0 + std::cos(phase));
}

AdamOptimizer::AdamOptimizer(std::vector<ParamEntry> params, double beta1, double beta2,
                             double eps)
    : params_(std::move(params)), beta1_(beta1), beta2_(beta2), eps_(eps) {
    for (const auto& p : params_) {
        m_.emplace_back(p.tensor.numel(), 0.0);
        v_.emplace_back(p.tensor.numel(), 0.0);
    }
}

void AdamOptimizer::step(double lr) {
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
        auto& data = params_[i].tensor.data();
        auto& grad = params_[i].tensor.grad();
        auto& m = m_[i];
        auto& v = v_[i];
        for (std::size_t j = 0; j < data.size(); ++j) {
            m[j] = beta1_ * m[j] + (1.0 - beta1_) * grad[j];
            v[j] = beta2_ * v[j] + (1.0 - beta2_) * grad[j] * grad[j];
            const double mhat = m[j] / bc1;
            const double vhat = v[j] / bc2;
            data[j] -= lr * mhat / (std::sqrt(vhat) + eps_);
        }
    }
}

void AdamOptimizer::serialize(std::ostream& out) const {
    const std::int64_t t = t_;
    out.write(reinterpret_cast<const char*>(&t), 8);
    const std::int64_t n = static_cast<std::int64_t>(params_.size());
    out.write(reinterpret_cast<const char*>(&n), 8);
    for (std::size_t i = 0; i < params_.size(); ++i) {
        const std::int64_t len = static_cast<std::int64_t>(m_[i].size());
        out.write(reinterpret_cast<const char*>(&len), 8);
        out.write(reinterpret_cast<const char*>(m_[i].data()),
                  static_cast<std::streamsize>(m_[i].size() * 8));
        out.write(reinterpret_cast<const char*>(v_[i].data()),
                  static_cast<std::streamsize>(v_[i].size() * 8));
    }
}

void AdamOptimizer::deserialize(std::istream& in) {
    std::int64_t t = 0, n = 0;
    in.read(reinterpret_cast<char*>(&t), 8);
    in.read(reinterpret_cast<char*>(&n), 8);
    if (n != static_cast<std::int64_t>(params_.size()))
        throw std::runtime_error("optimizer state: parameter count mismatch");
    t_ = t;
    for (std::size_t i = 0; i < params_.size(); ++i) {
        std::int64_t len = 0;
        in.read(reinterpret_cast<char*>(&len), 8);
        if (len != static_cast<std::int64_t>(m_[i].size()))
            throw std::runtime_error("optimizer state: moment size mismatch for " +
                                     params_[i].name);
        in.read(reinterpret_cast<char*>(m_[i].data()),
                static_cast<std::streamsize>(m_[i].size() * 8));
        in.read(reinterpret_cast<char*>(v_[i].data()),
                static_cast<std::streamsize>(v_[i].size() * 8));
    }
}

Trainer::Trainer(const PipelineConfig& cfg, std::uint64_t seed) : cfg_(cfg), rng_(seed) {
    ModelConfig mc = cfg_.model;
    if (cfg_.use_meta && mc.meta_dim == 0)
        throw std::invalid_argument("trainer: use_meta requires model.meta_dim > 0");
    model_ = Model(mc, rng_);
    refiner_ = Refiner(cfg_.refiner, mc.d_node, mc.num_classes, rng_);
    node_opt_ = AdamOptimizer(node_group());
    interval_opt_ = AdamOptimizer(interval_group());
    t_max_ = cfg_.train.t_max;
}

std::vector<ParamEntry> Trainer::node_group() { return model_.parameters(); }

std::vector<ParamEntry> Trainer::interval_group() { return refiner_.parameters(); }

void Trainer::resolve_t_max(int steps_per_epoch, int epochs) {
    if (cfg_.train.t_max > 0)
        t_max_ = cfg_.train.t_max;
    else
        t_max_ = static_cast<long>(steps_per_epoch) * epochs;
    if (t_max_ < 1) t_max_ = 1;
}

double Trainer::current_node_lr() const {
    return node_lr_schedule(step_, cfg_.train.lr_node, cfg_.train.node_decay,
                            cfg_.train.node_decay_steps);
}

double Trainer::current_interval_lr() const {
    return interval_lr_schedule(step_, t_max_ > 0 ? t_max_ : 1, cfg_.train.lr_interval,
                                cfg_.train.interval_lr_min);
}

LossResult Trainer::forward_losses(const std::vector<const PreparedClip*>& batch,
                                   bool training) {
    std::vector<ClipGraph> graphs;
    std::vector<AnchorSet> anchors;
    std::vector<std::vector<AnchorLabel>> labels;
    graphs.reserve(batch.size());
    for (const PreparedClip* c : batch) {
        graphs.push_back(c->graph);
        anchors.push_back(c->anchors);
        labels.push_back(c->anchor_labels);
    }
    const BatchGraph bg = collate(graphs);
    const NodeOutputs nodes = model_.forward(bg, training);
    const RefinerOutputs refined = refiner_.forward(nodes, bg, anchors);
    return compute_losses(nodes, bg, refined, labels, cfg_.objective);
}

LossReport Trainer::train_step(const std::vector<const PreparedClip*>& batch) {
    if (batch.empty()) throw std::invalid_argument("train_step: empty batch");
    for (auto& p : node_opt_.params()) const_cast<ad::Tensor&>(p.tensor).zero_grad();
    for (auto& p : interval_opt_.params()) const_cast<ad::Tensor&>(p.tensor).zero_grad();

    LossResult res = forward_losses(batch, true);
    if (!std::isfinite(res.report.total)) {
        std::vector<std::string> ids;
        for (const PreparedClip* c : batch) ids.push_back(c->clip_id);
        throw TrainAbort("non-finite training loss", ids);
    }
    res.total.backward();

    // global-norm clip across both parameter groups
    if (cfg_.train.grad_clip > 0.0) {
        double sq = 0.0;
        const auto accny = [&](const std::vector<ParamEntry>& ps) {
            for (const auto& p : ps)
                for (double g : p.tensor.grad()) sq += g * g;
        };
        accny(node_opt_.params());
        accny(interval_opt_.params());
        const double norm = std::sqrt(sq);
        if (norm > cfg_.train.grad_clip) {
            const double scale = cfg_.train.grad_clip / norm;
            const auto rescale = [&](const std::vector<ParamEntry>& ps) {
                for (const auto& p : ps)
                    for (double& g : const_cast<ad::Tensor&>(p.tensor).grad()) g *= scale;
            };
            rescale(node_opt_.params());
            rescale(interval_opt_.params());
        }
    }

    node_opt_.step(current_node_lr());
    interval_opt_.step(current_interval_lr());
    ++step_;
    return res.report;
}

std::vector<std::vector<IntervalPrediction>> Trainer::predict(const PreparedClip& clip) {
    const BatchGraph bg = collate({clip.graph});
    const NodeOutputs nodes = model_.forward(bg, false);
    const RefinerOutputs refined = refiner_.forward(nodes, bg, {clip.anchors});
    return refined.per_clip(1, cfg_.model.num_classes);
}

EventMap Trainer::predict_events(const std::vector<PreparedClip>& clips) {
    EventMap out;
    for (const auto& clip : clips) {
        const auto preds = predict(clip);
        out[clip.clip_id] = decode(preds[0], cfg_.vocab, cfg_.decode);
    }
    return out;
}

EvalReport Trainer::validate(const std::vector<PreparedClip>& clips) {
    EventMap refs, syss;
    for (const auto& clip : clips) refs[clip.clip_id] = clip.events;
    syss = predict_events(clips);
    return evaluate_events(refs, syss, cfg_.vocab);
}

FitResult Trainer::fit(const std::vector<ClipSource>& train_clips,
                       const std::vector<ClipSource>& val_clips,
                       const std::filesystem::path& run_dir,
                       const std::string& config_snapshot) {
    namespace fs = std::filesystem;
    fs::create_directories(run_dir);
    if (!config_snapshot.empty()) {
        std::ofstream cf(run_dir / "config.cfg");
        cf << config_snapshot;
    }
    std::ofstream csv(run_dir / "loss_log.csv");
    csv << "step,node_conf,node_cls,interval_conf,interval_cls,interval_loc,total,n_fg,m_fg\n";

    const int bs = std::max(1, cfg_.train.batch_size);
    const int steps_per_epoch =
        static_cast<int>((train_clips.size() + bs - 1) / static_cast<std::size_t>(bs));
    resolve_t_max(steps_per_epoch, cfg_.train.epochs);

    // deterministic per-epoch preparation; recomputed when augmenting
    std::vector<PreparedClip> base;
    if (!cfg_.train.augment)
        for (const auto& c : train_clips)
            base.push_back(prepare_clip(c.audio, cfg_, c.clip_id, c.meta_onehot));
    std::vector<PreparedClip> val_prepared;
    for (const auto& c : val_clips)
        val_prepared.push_back(prepare_clip(c.audio, cfg_, c.clip_id, c.meta_onehot));

    FitResult result;
    std::vector<std::size_t> order(train_clips.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

    for (int epoch = 0; epoch < cfg_.train.epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), rng_);
        std::vector<PreparedClip> epoch_clips;
        if (cfg_.train.augment) {
            for (const auto& c : train_clips)
                epoch_clips.push_back(
                    prepare_clip_augmented(c.audio, cfg_, c.clip_id, c.meta_onehot, rng_));
        }
        const std::vector<PreparedClip>& pool = cfg_.train.augment ? epoch_clips : base;

        for (std::size_t b = 0; b < order.size(); b += static_cast<std::size_t>(bs)) {
            std::vector<const PreparedClip*> batch;
            for (std::size_t i = b; i < std::min(order.size(), b + static_cast<std::size_t>(bs));
                 ++i)
                batch.push_back(&pool[order[i]]);
            LossReport rep;
            try {
                rep = train_step(batch);
            } catch (const TrainAbort& abort) {
                std::ofstream dump(run_dir / "nan_dump.txt");
                dump << "non-finite loss at step " << step_ << "\nbatch clips:\n";
                for (const auto& id : abort.batch_clip_ids) dump << "  " << id << "\n";
                throw;
            }
            csv << step_ << "," << rep.node_conf << "," << rep.node_cls << ","
                << rep.interval_conf << "," << rep.interval_cls << "," << rep.interval_loc << ","
                << rep.total << "," << rep.n_fg << "," << rep.m_fg << "\n";
            ++result.steps;
        }
        csv.flush();

        save_checkpoint(run_dir / "last.ckpt");
        if (!val_prepared.empty() && cfg_.train.validate_every > 0 &&
            (epoch + 1) % cfg_.train.validate_every == 0) {
            const EvalReport report = validate(val_prepared);
            std::ofstream ej(run_dir / ("eval_epoch" + std::to_string(epoch + 1) + ".json"));
            ej << report_to_json(report) << "\n";
            if (report.overall.f1 >= best_f1_) {
                best_f1_ = report.overall.f1;
                result.best_f1 = best_f1_;
                result.best_epoch = epoch + 1;
                save_checkpoint(run_dir / "best.ckpt");
            }
        }
    }
    if (val_prepared.empty()) save_checkpoint(run_dir / "best.ckpt");
    return result;
}

namespace {

void write_string(std::ostream& out, const std::string& s) {
    const std::int32_t len = static_cast<std::int32_t>(s.size());
    out.write(reinterpret_cast<const char*>(&len), 4);
    out.write(s.data(), len);
}

std::string read_string(std::istream& in) {
    std::int32_t len = 0;
    in.read(reinterpret_cast<char*>(&len), 4);
    std::string s(static_cast<std::size_t>(len), '\0');
    in.read(s.data(), len);
    return s;
}

} // namespace

void Trainer::save_checkpoint(const std::filesystem::path& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write checkpoint: " + path.string());
    out.write("RSEDCK01", 8);
    const std::uint64_t hash = cfg_.architecture_hash();
    out.write(reinterpret_cast<const char*>(&hash), 8);
    const std::int64_t step = step_;
    out.write(reinterpret_cast<const char*>(&step), 8);
    out.write(reinterpret_cast<const char*>(&best_f1_), 8);
    const std::int64_t tmax = t_max_;
    out.write(reinterpret_cast<const char*>(&tmax), 8);

    auto& self = const_cast<Trainer&>(*this);
    const auto params_groups = {self.node_group(), self.interval_group()};
    std::int64_t total = 0;
    for (const auto& g : params_groups) total += static_cast<std::int64_t>(g.size());
    out.write(reinterpret_cast<const char*>(&total), 8);
    for (const auto& g : params_groups)
        for (const auto& p : g) {
            write_string(out, p.name);
            const auto& shape = p.tensor.shape();
            const std::int32_t nd = static_cast<std::int32_t>(shape.size());
            out.write(reinterpret_cast<const char*>(&nd), 4);
            for (int d : shape) {
                const std::int32_t dd = d;
                out.write(reinterpret_cast<const char*>(&dd), 4);
            }
            out.write(reinterpret_cast<const char*>(p.tensor.data().data()),
                      static_cast<std::streamsize>(p.tensor.numel() * 8));
        }

    const auto buffers = self.model_.buffers();
    const std::int64_t nbuf = static_cast<std::int64_t>(buffers.size());
    out.write(reinterpret_cast<const char*>(&nbuf), 8);
    for (const auto& b : buffers) {
        write_string(out, b.name);
        const std::int64_t len = static_cast<std::int64_t>(b.data->size());
        out.write(reinterpret_cast<const char*>(&len), 8);
        out.write(reinterpret_cast<const char*>(b.data->data()),
                  static_cast<std::streamsize>(b.data->size() * 8));
    }

    node_opt_.serialize(out);
    interval_opt_.serialize(out);
}

void Trainer::load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open checkpoint: " + path.string());
    char magic[8];
    in.read(magic, 8);
    if (std::memcmp(magic, "RSEDCK01", 8) != 0)
        throw std::runtime_error("bad checkpoint magic: " + path.string());
    std::uint64_t hash = 0;
    in.read(reinterpret_cast<char*>(&hash), 8);
    if (hash != cfg_.architecture_hash())
        throw std::runtime_error("checkpoint was produced under a different architecture");
    std::int64_t step = 0;
    in.read(reinterpret_cast<char*>(&step), 8);
    in.read(reinterpret_cast<char*>(&best_f1_), 8);
    std::int64_t tmax = 0;
    in.read(reinterpret_cast<char*>(&tmax), 8);
    step_ = step;
    t_max_ = tmax;

    std::vector<ParamEntry> all = node_group();
    {
        const auto ig = interval_group();
        all.insert(all.end(), ig.begin(), ig.end());
    }
    std::int64_t total = 0;
    in.read(reinterpret_cast<char*>(&total), 8);
    if (total != static_cast<std::int64_t>(all.size()))
        throw std::runtime_error("checkpoint: parameter count mismatch");
    for (auto& p : all) {
        const std::string name = read_string(in);
        if (name != p.name)
            throw std::runtime_error("checkpoint: parameter order mismatch at " + name +
                                     " (expected " + p.name + ")");
        std::int32_t nd = 0;
        in.read(reinterpret_cast<char*>(&nd), 4);
        std::vector<int> shape(static_cast<std::size_t>(nd));
        for (auto& d : shape) {
            std::int32_t dd = 0;
            in.read(reinterpret_cast<char*>(&dd), 4);
            d = dd;
        }
        if (shape != p.tensor.shape())
            throw std::runtime_error("checkpoint: shape mismatch for " + name);
        in.read(reinterpret_cast<char*>(p.tensor.data().data()),
                static_cast<std::streamsize>(p.tensor.numel() * 8));
    }

    const auto buffers = model_.buffers();
    std::int64_t nbuf = 0;
    in.read(reinterpret_cast<char*>(&nbuf), 8);
    if (nbuf != static_cast<std::int64_t>(buffers.size()))
        throw std::runtime_error("checkpoint: buffer count mismatch");
    for (const auto& b : buffers) {
        const std::string name = read_string(in);
        if (name != b.name) throw std::runtime_error("checkpoint: buffer order mismatch");
        std::int64_t len = 0;
        in.read(reinterpret_cast<char*>(&len), 8);
        if (len != static_cast<std::int64_t>(b.data->size()))
            throw std::runtime_error("checkpoint: buffer size mismatch for " + name);
        in.read(reinterpret_cast<char*>(b.data->data()),
                static_cast<std::streamsize>(b.data->size() * 8));
    }

    node_opt_.deserialize(in);
    interval_opt_.deserialize(in);
    if (!in) throw std::runtime_error("checkpoint: truncated file");
}

} // namespace rsed
