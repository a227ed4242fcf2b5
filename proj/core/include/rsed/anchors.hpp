#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace rsed {

struct AnchorConfig {
    std::array<double, 3> durations{0.5, 0.8, 1.5}; // seconds per scale
    std::array<double, 3> weights{0.75, 2.0, 0.75}; // density per scale
    int base_count = 20;
    double iou_threshold = 0.3;

    void validate() const;
    std::uint64_t hash() const;
    int count_at(int scale) const {
        return static_cast<int>(base_count * weights[static_cast<std::size_t>(scale)]);
    }
    int total_count() const { return count_at(0) + count_at(1) + count_at(2); }
};

struct Anchor {
    int scale = 0;       // 0-based scale index
    int index = 0;       // position within the scale
    double a_norm = 0.0; // normalized start, [0,1]
    double b_norm = 0.0; // normalized end, [0,1]
    double t_start = 0.0; // seconds
    double t_end = 0.0;   // seconds
};

struct AnchorSet {
    double clip_len = 0.0;
    std::vector<Anchor> anchors; // ordered by (scale, index)
    std::array<int, 3> per_scale{0, 0, 0};
};

/// Per-anchor supervision: soft IoU confidence, abnormal class, matched interval.
struct AnchorLabel {
    double conf = 0.0;      // 0 for background, otherwise the best IoU (>= threshold)
    int cls = -1;           // -1 background, else 0..C-1
    double target_s = 0.0;
    double target_e = 0.0;

    bool foreground() const { return conf > 0.0; }
};

/// A ground-truth interval with its class id for assignment.
struct TruthInterval {
    double start = 0.0;
    double end = 0.0;
    int cls = 0;
};

/// Generates the fixed three-scale anchor grid for a clip of length L seconds.
AnchorSet generate_anchors(double clip_len, const AnchorConfig& cfg);

/// Interval IoU with a small epsilon in the denominator.
double interval_iou(double a_start, double a_end, double b_start, double b_end,
                    double eps = 1e-6);

/// Assigns (conf, cls, target) labels per anchor by best IoU against truth.
/// Argmax ties break to the lowest truth index.
std::vector<AnchorLabel> assign_anchor_labels(const AnchorSet& anchors,
                                              const std::vector<TruthInterval>& truth,
                                              const AnchorConfig& cfg);

/// Debug dump: one text row per anchor (k, i, t_s, t_e, conf, cls, tau_s, tau_e).
void dump_anchor_assignment(const std::filesystem::path& path, const AnchorSet& anchors,
                            const std::vector<AnchorLabel>& labels);

} // namespace rsed
