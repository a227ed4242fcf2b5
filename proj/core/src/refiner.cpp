#include "rsed/refiner.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <stdexcept>

namespace rsed {

using ad::Tensor;

void RefinerConfig::validate() const {
    if (bins < 2) throw std::invalid_argument("refiner config: need >= 2 offset bins");
    if (offset_range <= 0.0)
        throw std::invalid_argument("refiner config: offset range must be positive");
    if (smooth_kernel % 2 == 0 || smooth_kernel < 1)
        throw std::invalid_argument("refiner config: smoothing kernel must be odd");
    if (mlp_hidden < 1) throw std::invalid_argument("refiner config: bad mlp width");
}

std::uint64_t RefinerConfig::hash() const {
    std::string s = std::to_string(static_cast<int>(head_mode)) + "|" + std::to_string(bins) +
                    "|" + std::to_string(offset_range) + "|" + std::to_string(smooth_kernel) +
                    "|" + std::to_string(smooth_sigma) + "|" + std::to_string(gru_hidden) + "|" +
                    std::to_string(mlp_hidden);
    std::uint64_t h = 1469598103934665603ull;
    for (unsigned char ch : s) {
        h ^= ch;
        h *= 1099511628211ull;
    }
    return h;
}

Refiner::Refiner(const RefinerConfig& cfg, int d_node, int num_classes, std::mt19937_64& rng)
    : cfg_(cfg), d_node_(d_node), num_classes_(num_classes) {
    cfg.validate();
    const int channels = 1 + num_classes;
    const int k = cfg.smooth_kernel;

    // Gaussian-initialized, per-channel learnable smoothing kernel.
    std::vector<double> kern(static_cast<std::size_t>(channels) * k);
    double norm = 0.0;
    std::vector<double> g(static_cast<std::size_t>(k));
    for (int i = 0; i < k; ++i) {
        const double x = i - k / 2;
        g[static_cast<std::size_t>(i)] = std::exp(-0.5 * x * x / (cfg.smooth_sigma * cfg.smooth_sigma));
        norm += g[static_cast<std::size_t>(i)];
    }
    for (int c = 0; c < channels; ++c)
        for (int i = 0; i < k; ++i)
            kern[static_cast<std::size_t>(c) * k + i] = g[static_cast<std::size_t>(i)] / norm;
    smooth_kernel_weights = Tensor::param({channels, k}, std::move(kern));

    const int hidden = cfg.gru_hidden > 0 ? cfg.gru_hidden : d_node;
    const int z_width = hidden + 3;
    for (int s = 0; s < 3; ++s) {
        ScaleHead& h = heads[static_cast<std::size_t>(s)];
        h.feat_gru = GruCell(d_node, hidden, rng);
        h.anom_gru = GruCell(1, 1, rng);
        if (cfg.head_mode == RefinerConfig::HeadMode::Integrated) {
            h.mlp1 = LinearLayer(z_width, cfg.mlp_hidden, rng);
            h.mlp2 = LinearLayer(cfg.mlp_hidden, 2 * cfg.bins + 1 + num_classes, rng);
        } else {
            h.mlp1 = LinearLayer(z_width, cfg.mlp_hidden, rng);
            h.mlp2 = LinearLayer(cfg.mlp_hidden, 2 * cfg.bins, rng);
            h.cls1 = LinearLayer(z_width, cfg.mlp_hidden, rng);
            h.cls2 = LinearLayer(cfg.mlp_hidden, 1 + num_classes, rng);
        }
        std::vector<double> centers(static_cast<std::size_t>(cfg.bins));
        for (int b = 0; b < cfg.bins; ++b)
            centers[static_cast<std::size_t>(b)] =
                -cfg.offset_range + 2.0 * cfg.offset_range * b / (cfg.bins - 1);
        h.bin_centers = Tensor::param({cfg.bins}, std::move(centers));
    }
}

Tensor Refiner::smooth_scores(const Tensor& node_logits,
                              const std::vector<int>& seg_offsets) const {
    return ad::conv1d_segments_replicate(node_logits, smooth_kernel_weights, seg_offsets);
}

std::vector<int> select_anchor_nodes(const std::vector<double>& node_time, int node_begin,
                                     int node_end, double a_norm, double b_norm) {
    std::vector<int> idx;
    for (int n = node_begin; n < node_end; ++n) {
        const double t = node_time[static_cast<std::size_t>(n)];
        if (t >= a_norm && t <= b_norm) idx.push_back(n);
    }
    if (idx.empty()) {
        // nearest node to the anchor center; ties go to the earlier node
        const double center = 0.5 * (a_norm + b_norm);
        int best = node_begin;
        double best_d = std::abs(node_time[static_cast<std::size_t>(node_begin)] - center);
        for (int n = node_begin + 1; n < node_end; ++n) {
            const double d = std::abs(node_time[static_cast<std::size_t>(n)] - center);
            if (d < best_d) {
                best = n;
                best_d = d;
            }
        }
        idx.push_back(best);
    }
    return idx;
}

RefinerOutputs Refiner::forward(const NodeOutputs& nodes, const BatchGraph& graph,
                                const std::vector<AnchorSet>& anchors) const {
    if (static_cast<int>(anchors.size()) != graph.n_clips())
        throw std::invalid_argument("refiner forward: anchor sets do not match batch clips");

    RefinerOutputs out;
    Tensor smoothed = smooth_scores(nodes.node_logits, graph.node_offsets);
    out.smoothed_scores = ad::sigmoid(ad::slice_cols(smoothed, 0, 1));

    struct Pending {
        std::vector<Tensor> z_rows;
        std::vector<double> a_start, a_end, clip_len;
        std::vector<RefinerOutputs::AnchorRef> rows;
    };
    std::array<Pending, 3> pending;

    for (int c = 0; c < graph.n_clips(); ++c) {
        const int lo = graph.node_offsets[static_cast<std::size_t>(c)];
        const int hi = graph.node_offsets[static_cast<std::size_t>(c) + 1];
        int flat = 0;
        for (const Anchor& a : anchors[static_cast<std::size_t>(c)].anchors) {
            const std::vector<int> sel =
                select_anchor_nodes(graph.node_time, lo, hi, a.a_norm, a.b_norm);
            const ScaleHead& head = heads[static_cast<std::size_t>(a.scale)];

            std::vector<Tensor> feat_seq, anom_seq;
            feat_seq.reserve(sel.size());
            anom_seq.reserve(sel.size());
            for (int n : sel) {
                feat_seq.push_back(ad::index_rows(nodes.time_encoded, {n}));
                anom_seq.push_back(ad::index_rows(out.smoothed_scores, {n}));
            }
            Tensor h = head.feat_gru.run(feat_seq); // (1, H)
            Tensor s = head.anom_gru.run(anom_seq); // (1, 1)
            const double center = 0.5 * (a.a_norm + a.b_norm);
            const double width = a.b_norm - a.a_norm;
            Tensor geom = Tensor::constant({1, 2}, {center, width});
            Pending& p = pending[static_cast<std::size_t>(a.scale)];
            p.z_rows.push_back(ad::concat_cols({h, s, geom}));
            p.a_start.push_back(a.t_start);
            p.a_end.push_back(a.t_end);
            p.clip_len.push_back(anchors[static_cast<std::size_t>(c)].clip_len);
            p.rows.push_back({c, flat, a.index});
            ++flat;
        }
    }

    const int bins = cfg_.bins;
    for (int k = 0; k < 3; ++k) {
        Pending& p = pending[static_cast<std::size_t>(k)];
        RefinerOutputs::PerScale& ps = out.scales[static_cast<std::size_t>(k)];
        ps.rows = p.rows;
        if (p.z_rows.empty()) continue;
        const ScaleHead& head = heads[static_cast<std::size_t>(k)];
        Tensor z = ad::concat_rows(p.z_rows); // (M_k, H+3)

        Tensor off_logits, conf_cls;
        if (cfg_.head_mode == RefinerConfig::HeadMode::Integrated) {
            Tensor all = head.mlp2.forward(ad::relu(head.mlp1.forward(z)));
            off_logits = ad::slice_cols(all, 0, 2 * bins);
            conf_cls = ad::slice_cols(all, 2 * bins, 1 + num_classes_);
        } else {
            off_logits = head.mlp2.forward(ad::relu(head.mlp1.forward(z)));
            conf_cls = head.cls2.forward(ad::relu(head.cls1.forward(z)));
        }
        ps.conf_logits = ad::slice_cols(conf_cls, 0, 1);
        ps.cls_logits = ad::slice_cols(conf_cls, 1, num_classes_);

        Tensor centers = ad::reshape(head.bin_centers, {bins, 1});
        Tensor ds = ad::matmul(ad::softmax_rows(ad::slice_cols(off_logits, 0, bins)), centers);
        Tensor de = ad::matmul(ad::softmax_rows(ad::slice_cols(off_logits, bins, bins)), centers);
        ps.intervals = ad::refine_intervals(ds, de, p.a_start, p.a_end, p.clip_len);
    }
    return out;
}

std::vector<std::vector<IntervalPrediction>> RefinerOutputs::per_clip(int n_clips,
                                                                      int num_classes) const {
    std::vector<std::vector<IntervalPrediction>> result(static_cast<std::size_t>(n_clips));
    for (int k = 0; k < 3; ++k) {
        const PerScale& ps = scales[static_cast<std::size_t>(k)];
        for (std::size_t r = 0; r < ps.rows.size(); ++r) {
            IntervalPrediction p;
            p.scale = k;
            p.index = ps.rows[r].local;
            p.start = ps.intervals.data()[r * 2];
            p.end = ps.intervals.data()[r * 2 + 1];
            p.conf_logit = ps.conf_logits.data()[r];
            p.cls_logits.resize(static_cast<std::size_t>(num_classes));
            for (int c = 0; c < num_classes; ++c)
                p.cls_logits[static_cast<std::size_t>(c)] =
                    ps.cls_logits.data()[r * static_cast<std::size_t>(num_classes) + c];
            result[static_cast<std::size_t>(ps.rows[r].clip)].push_back(p);
        }
    }
    // canonical (scale, index) order per clip
    for (auto& preds : result)
        std::stable_sort(preds.begin(), preds.end(),
                         [](const IntervalPrediction& a, const IntervalPrediction& b) {
                             return a.scale != b.scale ? a.scale < b.scale : a.index < b.index;
                         });
    return result;
}

std::vector<ParamEntry> Refiner::parameters() {
    std::vector<ParamEntry> p;
    p.push_back({"refiner.smooth_kernel", smooth_kernel_weights});
    for (int k = 0; k < 3; ++k) {
        ScaleHead& h = heads[static_cast<std::size_t>(k)];
        const std::string pre = "refiner.scale" + std::to_string(k);
        h.feat_gru.collect(p, pre + ".feat_gru");
        h.anom_gru.collect(p, pre + ".anom_gru");
        h.mlp1.collect(p, pre + ".mlp1");
        h.mlp2.collect(p, pre + ".mlp2");
        if (cfg_.head_mode == RefinerConfig::HeadMode::Separate) {
            h.cls1.collect(p, pre + ".cls1");
            h.cls2.collect(p, pre + ".cls2");
        }
        p.push_back({pre + ".bin_centers", h.bin_centers});
    }
    return p;
}

void dump_predictions(const std::filesystem::path& path, const std::string& clip_id,
                      const std::vector<IntervalPrediction>& preds) {
    std::ofstream out(path, std::ios::app);
    if (!out) throw std::runtime_error("cannot write prediction dump: " + path.string());
    for (const auto& p : preds) {
        out << clip_id << " " << p.scale << " " << p.index << " " << p.start << " " << p.end
            << " " << p.conf_logit << " " << p.arg_class();
        for (double v : p.cls_logits) out << " " << v;
        out << "\n";
    }
}

} // namespace rsed
