#pragma once

#include <filesystem>
#include <iosfwd>
#include <random>
#include <string>
#include <vector>

#include "rsed/config.hpp"
#include "rsed/events.hpp"
#include "rsed/graphify.hpp"
#include "rsed/manifest.hpp"
#include "rsed/model.hpp"
#include "rsed/objective.hpp"
#include "rsed/refiner.hpp"

namespace rsed {

/// Raw material for one training clip.
struct ClipSource {
    AudioClip audio;
    std::string clip_id;
    std::vector<double> meta_onehot;
};

/// Fully preprocessed clip: graph, anchors, assigned labels, reference events.
struct PreparedClip {
    ClipGraph graph;
    AnchorSet anchors;
    std::vector<AnchorLabel> anchor_labels;
    std::vector<EventRecord> events;
    std::string clip_id;
};

PreparedClip prepare_clip(const AudioClip& clip, const PipelineConfig& cfg,
                          const std::string& clip_id,
                          const std::vector<double>& meta_onehot = {});

/// Random waveform + spectrogram augmentation ahead of graph construction.
PreparedClip prepare_clip_augmented(const AudioClip& clip, const PipelineConfig& cfg,
                                    const std::string& clip_id,
                                    const std::vector<double>& meta_onehot,
                                    std::mt19937_64& rng);

// ---- learning-rate schedules (closed forms) ----
double node_lr_schedule(long step, double lr0 = 1e-3, double decay = 0.99,
                        double period = 126.0);
double interval_lr_schedule(long step, long t_max, double lr0 = 1e-3, double lr_min = 2e-4);

/// Adam over a fixed list of named parameters.
class AdamOptimizer {
public:
    AdamOptimizer() = default;
    explicit AdamOptimizer(std::vector<ParamEntry> params, double beta1 = 0.9,
                           double beta2 = 0.999, double eps = 1e-8);
    void step(double lr);
    long step_count() const { return t_; }
    const std::vector<ParamEntry>& params() const { return params_; }

    // checkpoint plumbing
    void serialize(std::ostream& out) const;
    void deserialize(std::istream& in);

private:
    std::vector<ParamEntry> params_;
    std::vector<std::vector<double>> m_, v_;
    double beta1_ = 0.9, beta2_ = 0.999, eps_ = 1e-8;
    long t_ = 0;
};

/// Raised when a training step produces a non-finite loss; carries the batch
/// clip ids for the diagnostic dump.
struct TrainAbort : std::runtime_error {
    explicit TrainAbort(const std::string& what, std::vector<std::string> ids)
        : std::runtime_error(what), batch_clip_ids(std::move(ids)) {}
    std::vector<std::string> batch_clip_ids;
};

struct FitResult {
    double best_f1 = 0.0;
    int best_epoch = -1;
    long steps = 0;
};

/// Dual-optimizer training harness: node group (trunk + node head) under
/// exponential decay, interval group (refiner heads) under cosine annealing.
class Trainer {
public:
    Trainer(const PipelineConfig& cfg, std::uint64_t seed);

    Model& model() { return model_; }
    Refiner& refiner() { return refiner_; }
    const PipelineConfig& config() const { return cfg_; }

    std::vector<ParamEntry> node_group();
    std::vector<ParamEntry> interval_group();

    /// Resolves the cosine period when the config leaves it at 0.
    void resolve_t_max(int steps_per_epoch, int epochs);
    long t_max() const { return t_max_; }
    long step() const { return step_; }

    double current_node_lr() const;
    double current_interval_lr() const;

    /// One optimization step over a batch; throws TrainAbort on non-finite loss.
    LossReport train_step(const std::vector<const PreparedClip*>& batch);

    /// Forward in eval mode; outputs per clip in anchor order.
    std::vector<std::vector<IntervalPrediction>> predict(const PreparedClip& clip);
    EventMap predict_events(const std::vector<PreparedClip>& clips);
    EvalReport validate(const std::vector<PreparedClip>& clips);

    /// Full run: epoch loop, CSV loss log, last/best checkpoints, eval JSON
    /// per validation pass under run_dir.
    FitResult fit(const std::vector<ClipSource>& train_clips,
                  const std::vector<ClipSource>& val_clips,
                  const std::filesystem::path& run_dir,
                  const std::string& config_snapshot = {});

    void save_checkpoint(const std::filesystem::path& path) const;
    void load_checkpoint(const std::filesystem::path& path);
    double best_f1() const { return best_f1_; }

private:
    LossResult forward_losses(const std::vector<const PreparedClip*>& batch, bool training);

    PipelineConfig cfg_;
    std::mt19937_64 rng_;
    Model model_;
    Refiner refiner_;
    AdamOptimizer node_opt_;
    AdamOptimizer interval_opt_;
    long step_ = 0;
    long t_max_ = 0;
    double best_f1_ = 0.0;
};

} // namespace rsed
