#pragma once

#include <vector>

#include "rsed/anchors.hpp"
#include "rsed/autodiff.hpp"
#include "rsed/refiner.hpp"

namespace rsed {

struct LossWeights {
    double node_conf = 1.0;
    double node_cls = 1.0;
    double interval_conf = 1.0;
    double interval_cls = 1.0;
    double interval_loc = 1.0;
};

struct ObjectiveConfig {
    LossWeights weights;
    ad::IouMode loc_iou_mode = ad::IouMode::Union;
    double iou_floor = 1e-6;
};

struct LossReport {
    double node_conf = 0.0;
    double node_cls = 0.0;
    double interval_conf = 0.0;
    double interval_cls = 0.0;
    double interval_loc = 0.0;
    double total = 0.0;
    int n_fg = 0; // foreground nodes
    int m_fg = 0; // foreground anchors
};

struct LossResult {
    ad::Tensor total;
    LossReport report;
};

// ---- individual losses (batched tensors in, scalar tensor out) ----
ad::Tensor node_conf_loss(const ad::Tensor& node_logits, const std::vector<double>& targets);
ad::Tensor node_cls_loss(const ad::Tensor& node_logits, const std::vector<int>& node_class,
                         int num_classes);
ad::Tensor interval_conf_loss(const ad::Tensor& conf_logits, const std::vector<double>& targets);
ad::Tensor interval_cls_loss(const ad::Tensor& cls_logits, const std::vector<int>& labels);
ad::Tensor interval_loc_loss(const ad::Tensor& intervals, const std::vector<double>& targets,
                             const std::vector<int>& fg_rows, const ObjectiveConfig& cfg);

/// Assembles the five supervised losses over a forward pass and returns the
/// weighted total with a per-component report.
LossResult compute_losses(const NodeOutputs& nodes, const BatchGraph& graph,
                          const RefinerOutputs& refined,
                          const std::vector<std::vector<AnchorLabel>>& anchor_labels,
                          const ObjectiveConfig& cfg);

} // namespace rsed
