#include "rsed/anchors.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <stdexcept>

namespace rsed {

void AnchorConfig::validate() const {
    for (double d : durations)
        if (d <= 0.0) throw std::invalid_argument("anchor config: durations must be positive");
    for (double w : weights)
        if (w <= 0.0) throw std::invalid_argument("anchor config: weights must be positive");
    if (base_count < 1) throw std::invalid_argument("anchor config: base count must be >= 1");
    if (!(iou_threshold > 0.0 && iou_threshold < 1.0))
        throw std::invalid_argument("anchor config: iou threshold must be in (0,1)");
}

std::uint64_t AnchorConfig::hash() const {
    std::string s;
    for (double d : durations) s += std::to_string(d) + "|";
    for (double w : weights) s += std::to_string(w) + "|";
    s += std::to_string(base_count) + "|" + std::to_string(iou_threshold);
    std::uint64_t h = 1469598103934665603ull;
    for (unsigned char ch : s) {
        h ^= ch;
        h *= 1099511628211ull;
    }
    return h;
}

AnchorSet generate_anchors(double clip_len, const AnchorConfig& cfg) {
    cfg.validate();
    if (clip_len <= 0.0) throw std::invalid_argument("generate_anchors: clip length must be > 0");
    AnchorSet set;
    set.clip_len = clip_len;
    for (int k = 0; k < 3; ++k) {
        const double sk = cfg.durations[static_cast<std::size_t>(k)] / clip_len;
        const int nk = cfg.count_at(k);
        set.per_scale[static_cast<std::size_t>(k)] = nk;
        for (int i = 0; i < nk; ++i) {
            Anchor a;
            a.scale = k;
            a.index = i;
            const double center = (i + 0.5) / nk;
            a.a_norm = std::max(center - 0.5 * sk, 0.0);
            a.b_norm = std::min(center + 0.5 * sk, 1.0);
            a.t_start = a.a_norm * clip_len;
            a.t_end = a.b_norm * clip_len;
            set.anchors.push_back(a);
        }
    }
    return set;
}

double interval_iou(double a_start, double a_end, double b_start, double b_end, double eps) {
    const double inter = std::max(0.0, std::min(a_end, b_end) - std::max(a_start, b_start));
    const double uni = (a_end - a_start) + (b_end - b_start) - inter;
    return inter / (uni + eps);
}

std::vector<AnchorLabel> assign_anchor_labels(const AnchorSet& anchors,
                                              const std::vector<TruthInterval>& truth,
                                              const AnchorConfig& cfg) {
    std::vector<AnchorLabel> labels(anchors.anchors.size());
    for (std::size_t i = 0; i < anchors.anchors.size(); ++i) {
        const Anchor& a = anchors.anchors[i];
        double best_iou = 0.0;
        int best_j = -1;
        for (std::size_t j = 0; j < truth.size(); ++j) {
            const double iou = interval_iou(a.t_start, a.t_end, truth[j].start, truth[j].end);
            if (iou > best_iou) {
                best_iou = iou;
                best_j = static_cast<int>(j);
            }
        }
        if (best_j >= 0 && best_iou >= cfg.iou_threshold) {
            labels[i].conf = best_iou;
            labels[i].cls = truth[static_cast<std::size_t>(best_j)].cls;
            labels[i].target_s = truth[static_cast<std::size_t>(best_j)].start;
            labels[i].target_e = truth[static_cast<std::size_t>(best_j)].end;
        }
    }
    return labels;
}

void dump_anchor_assignment(const std::filesystem::path& path, const AnchorSet& anchors,
                            const std::vector<AnchorLabel>& labels) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write anchor dump: " + path.string());
    out << "# k i t_s t_e conf cls tau_s tau_e\n";
    for (std::size_t i = 0; i < anchors.anchors.size(); ++i) {
        const Anchor& a = anchors.anchors[i];
        const AnchorLabel& l = labels[i];
        out << a.scale << " " << a.index << " " << a.t_start << " " << a.t_end << " " << l.conf
            << " " << l.cls << " " << l.target_s << " " << l.target_e << "\n";
    }
}

} // namespace rsed
