#include "oracles.hpp"

#include <algorithm>

namespace rsed::testing {

std::vector<AnchorLabel> brute_force_assign(const AnchorSet& anchors,
                                            const std::vector<TruthInterval>& truth,
                                            double iou_threshold) {
    std::vector<AnchorLabel> labels(anchors.anchors.size());
    for (std::size_t i = 0; i < anchors.anchors.size(); ++i) {
        const Anchor& a = anchors.anchors[i];
        double best = 0.0;
        int best_j = -1;
        for (std::size_t j = 0; j < truth.size(); ++j) {
            const double lo = std::max(a.t_start, truth[j].start);
            const double hi = std::min(a.t_end, truth[j].end);
            const double inter = hi > lo ? hi - lo : 0.0;
            const double uni =
                (a.t_end - a.t_start) + (truth[j].end - truth[j].start) - inter;
            const double iou = inter / (uni + 1e-6);
            if (iou > best) {
                best = iou;
                best_j = static_cast<int>(j);
            }
        }
        if (best_j >= 0 && best >= iou_threshold) {
            labels[i].conf = best;
            labels[i].cls = truth[static_cast<std::size_t>(best_j)].cls;
            labels[i].target_s = truth[static_cast<std::size_t>(best_j)].start;
            labels[i].target_e = truth[static_cast<std::size_t>(best_j)].end;
        }
    }
    return labels;
}

namespace {

bool augmenting_path(const std::vector<std::vector<bool>>& adj, int r,
                     std::vector<int>& match_sys, std::vector<bool>& visited) {
    for (std::size_t s = 0; s < adj[static_cast<std::size_t>(r)].size(); ++s) {
        if (!adj[static_cast<std::size_t>(r)][s] || visited[s]) continue;
        visited[s] = true;
        if (match_sys[s] < 0 || augmenting_path(adj, match_sys[s], match_sys, visited)) {
            match_sys[s] = r;
            return true;
        }
    }
    return false;
}

} // namespace

int max_bipartite_tp(const std::vector<EventRecord>& refs,
                     const std::vector<EventRecord>& syss, const CollarConfig& collar) {
    std::vector<std::vector<bool>> adj(refs.size(), std::vector<bool>(syss.size(), false));
    for (std::size_t r = 0; r < refs.size(); ++r)
        for (std::size_t s = 0; s < syss.size(); ++s)
            adj[r][s] = collar_match(refs[r], syss[s], collar);
    std::vector<int> match_sys(syss.size(), -1);
    int matched = 0;
    for (std::size_t r = 0; r < refs.size(); ++r) {
        std::vector<bool> visited(syss.size(), false);
        if (augmenting_path(adj, static_cast<int>(r), match_sys, visited)) ++matched;
    }
    return matched;
}

} // namespace rsed::testing
