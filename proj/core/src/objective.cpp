#include "rsed/objective.hpp"

#include <stdexcept>

namespace rsed {

using ad::Tensor;

Tensor node_conf_loss(const Tensor& node_logits, const std::vector<double>& targets) {
    Tensor conf = ad::slice_cols(node_logits, 0, 1);
    return ad::bce_with_logits_mean(conf, targets);
}

Tensor node_cls_loss(const Tensor& node_logits, const std::vector<int>& node_class,
                     int num_classes) {
    Tensor cls = ad::slice_cols(node_logits, 1, num_classes);
    return ad::cross_entropy_masked_mean(cls, node_class, -1);
}

Tensor interval_conf_loss(const Tensor& conf_logits, const std::vector<double>& targets) {
    return ad::bce_with_logits_mean(conf_logits, targets);
}

Tensor interval_cls_loss(const Tensor& cls_logits, const std::vector<int>& labels) {
    return ad::cross_entropy_masked_mean(cls_logits, labels, -1);
}

Tensor interval_loc_loss(const Tensor& intervals, const std::vector<double>& targets,
                         const std::vector<int>& fg_rows, const ObjectiveConfig& cfg) {
    if (fg_rows.empty()) return Tensor::scalar(0.0);
    Tensor fg = ad::index_rows(intervals, fg_rows);
    return ad::neg_log_iou_mean(fg, targets, cfg.loc_iou_mode, cfg.iou_floor);
}

LossResult compute_losses(const NodeOutputs& nodes, const BatchGraph& graph,
                          const RefinerOutputs& refined,
                          const std::vector<std::vector<AnchorLabel>>& anchor_labels,
                          const ObjectiveConfig& cfg) {
    if (static_cast<int>(anchor_labels.size()) != graph.n_clips())
        throw std::invalid_argument("compute_losses: anchor labels do not match batch clips");
    const int num_classes = nodes.node_logits.dim(1) - 1;

    Tensor l_nconf = node_conf_loss(nodes.node_logits, graph.node_conf);
    Tensor l_ncls = node_cls_loss(nodes.node_logits, graph.node_class, num_classes);

    // Stack per-scale predictions; labels follow the same row order via the
    // flat anchor index stored with each row.
    std::vector<Tensor> conf_parts, cls_parts, interval_parts;
    std::vector<double> conf_targets;
    std::vector<int> cls_labels;
    std::vector<int> fg_rows;
    std::vector<double> loc_targets;
    int global_row = 0, m_fg = 0;
    for (int k = 0; k < 3; ++k) {
        const auto& ps = refined.scales[static_cast<std::size_t>(k)];
        if (ps.rows.empty()) continue;
        conf_parts.push_back(ps.conf_logits);
        cls_parts.push_back(ps.cls_logits);
        interval_parts.push_back(ps.intervals);
        for (const auto& row : ps.rows) {
            const AnchorLabel& lbl =
                anchor_labels[static_cast<std::size_t>(row.clip)][static_cast<std::size_t>(
                    row.flat)];
            conf_targets.push_back(lbl.conf);
            cls_labels.push_back(lbl.cls);
            if (lbl.foreground()) {
                fg_rows.push_back(global_row);
                loc_targets.push_back(lbl.target_s);
                loc_targets.push_back(lbl.target_e);
                ++m_fg;
            }
            ++global_row;
        }
    }
    if (conf_parts.empty())
        throw std::invalid_argument("compute_losses: no anchor predictions in batch");

    Tensor conf_all = ad::concat_rows(conf_parts);
    Tensor cls_all = ad::concat_rows(cls_parts);
    Tensor intervals_all = ad::concat_rows(interval_parts);

    Tensor l_iconf = interval_conf_loss(conf_all, conf_targets);
    Tensor l_icls = interval_cls_loss(cls_all, cls_labels);
    Tensor l_iloc = interval_loc_loss(intervals_all, loc_targets, fg_rows, cfg);

    Tensor total = ad::scale_add(l_nconf, cfg.weights.node_conf, 0.0);
    total = ad::add(total, ad::scale_add(l_ncls, cfg.weights.node_cls, 0.0));
    total = ad::add(total, ad::scale_add(l_iconf, cfg.weights.interval_conf, 0.0));
    total = ad::add(total, ad::scale_add(l_icls, cfg.weights.interval_cls, 0.0));
    total = ad::add(total, ad::scale_add(l_iloc, cfg.weights.interval_loc, 0.0));

    LossResult res;
    res.total = total;
    res.report.node_conf = l_nconf.item();
    res.report.node_cls = l_ncls.item();
    res.report.interval_conf = l_iconf.item();
    res.report.interval_cls = l_icls.item();
    res.report.interval_loc = l_iloc.item();
    res.report.total = total.item();
    int n_fg = 0;
    for (int c : graph.node_class)
        if (c != -1) ++n_fg;
    res.report.n_fg = n_fg;
    res.report.m_fg = m_fg;
    return res;
}

} // namespace rsed
