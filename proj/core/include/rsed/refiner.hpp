#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "rsed/anchors.hpp"
#include "rsed/model.hpp"

namespace rsed {

struct RefinerConfig {
    enum class HeadMode { Integrated, Separate };
    HeadMode head_mode = HeadMode::Integrated;
    int bins = 10;              // offset bins per scale
    double offset_range = 1.0;  // bin centers initialized linearly on [-r, r] seconds
    int smooth_kernel = 5;
    double smooth_sigma = 1.0;
    int gru_hidden = 0;         // 0 -> d_node
    int mlp_hidden = 64;

    void validate() const;
    std::uint64_t hash() const;
};

/// Final per-anchor prediction in plain values (post graph evaluation).
struct IntervalPrediction {
    int scale = 0;
    int index = 0;
    double start = 0.0;
    double end = 0.0;
    double conf_logit = 0.0;
    std::vector<double> cls_logits;

    int arg_class() const {
        int best = 0;
        for (std::size_t c = 1; c < cls_logits.size(); ++c)
            if (cls_logits[c] > cls_logits[best]) best = static_cast<int>(c);
        return best;
    }
};

/// Differentiable per-scale outputs plus the (clip, anchor) row bookkeeping.
struct RefinerOutputs {
    struct AnchorRef {
        int clip = 0;  // clip index within the batch
        int flat = 0;  // position within the clip's AnchorSet
        int local = 0; // anchor index within its scale
    };
    struct PerScale {
        ad::Tensor conf_logits; // (M_k, 1)
        ad::Tensor cls_logits;  // (M_k, C)
        ad::Tensor intervals;   // (M_k, 2) refined seconds, clamped
        std::vector<AnchorRef> rows;
    };
    std::array<PerScale, 3> scales;
    ad::Tensor smoothed_scores; // s_n, (N,1)

    /// Per-clip predictions in anchor (scale, index) order.
    std::vector<std::vector<IntervalPrediction>> per_clip(int n_clips, int num_classes) const;
};

class Refiner {
public:
    Refiner() = default;
    Refiner(const RefinerConfig& cfg, int d_node, int num_classes, std::mt19937_64& rng);

    RefinerOutputs forward(const NodeOutputs& nodes, const BatchGraph& graph,
                           const std::vector<AnchorSet>& anchors) const;

    /// Smoothed anomaly scores alone (exposed for locality tests).
    ad::Tensor smooth_scores(const ad::Tensor& node_logits,
                             const std::vector<int>& seg_offsets) const;

    std::vector<ParamEntry> parameters();
    const RefinerConfig& config() const { return cfg_; }

    ad::Tensor smooth_kernel_weights; // (1+C, K)
    struct ScaleHead {
        GruCell feat_gru;
        GruCell anom_gru;
        LinearLayer mlp1, mlp2;       // integrated path (or offset head in separate mode)
        LinearLayer cls1, cls2;       // separate mode conf/cls head
        ad::Tensor bin_centers;       // (B)
    };
    std::array<ScaleHead, 3> heads;

private:
    RefinerConfig cfg_;
    int d_node_ = 0;
    int num_classes_ = 0;
};

/// Indices of nodes whose timestamp falls inside [a_norm, b_norm] within the
/// clip's node range; falls back to the single nearest node when empty.
std::vector<int> select_anchor_nodes(const std::vector<double>& node_time, int node_begin,
                                     int node_end, double a_norm, double b_norm);

/// Text dump of raw predictions, one row per anchor.
void dump_predictions(const std::filesystem::path& path, const std::string& clip_id,
                      const std::vector<IntervalPrediction>& preds);

} // namespace rsed
