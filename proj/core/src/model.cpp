#include "rsed/model.hpp"

#include <cmath>
#include <stdexcept>

namespace rsed {

using ad::Tensor;

namespace {

std::vector<double> uniform_init(std::size_t n, double bound, std::mt19937_64& rng) {
    std::uniform_real_distribution<double> dist(-bound, bound);
    std::vector<double> v(n);
    for (double& x : v) x = dist(rng);
    return v;
}

} // namespace

void ModelConfig::validate() const {
    if (in_channels <= 0 || group_frames <= 0 || n_bands <= 0)
        throw std::invalid_argument("model config: bad input geometry");
    if (n_basis < 1) throw std::invalid_argument("model config: n_basis must be >= 1");
    if (kernel % 2 == 0) throw std::invalid_argument("model config: kernel must be odd");
    if (d_node < 2)
        throw std::invalid_argument("model config: d_node must be >= 2 for temporal encoding");
    int f = n_bands;
    for (int i = 0; i < 3; ++i) f /= pool_w;
    if (f < 1)
        throw std::invalid_argument(
            "model config: n_bands too small for three pooling stages");
    if (num_classes < 1) throw std::invalid_argument("model config: need >= 1 class");
}

std::uint64_t ModelConfig::hash() const {
    std::string s = std::to_string(in_channels) + "|" + std::to_string(group_frames) + "|" +
                    std::to_string(n_bands) + "|" + std::to_string(n_basis) + "|";
    for (int c : conv_channels) s += std::to_string(c) + ",";
    s += "|" + std::to_string(kernel) + "|" + std::to_string(pool_w) + "|" +
         std::to_string(d_node) + "|" + std::to_string(edge_dim) + "|" +
         std::to_string(static_cast<int>(edge_mode)) + "|" + std::to_string(leaky_slope) +
         "|" + std::to_string(num_classes) + "|" + std::to_string(time_gamma) + "|" +
         std::to_string(meta_dim);
    std::uint64_t h = 1469598103934665603ull;
    for (unsigned char ch : s) {
        h ^= ch;
        h *= 1099511628211ull;
    }
    return h;
}

// ---------------------------------------------------------------------------
// layers
// ---------------------------------------------------------------------------

LinearLayer::LinearLayer(int in, int out, std::mt19937_64& rng, bool with_bias) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    w = Tensor::param({out, in}, uniform_init(static_cast<std::size_t>(out) * in, bound, rng));
    if (with_bias) b = Tensor::param({out}, uniform_init(static_cast<std::size_t>(out), bound, rng));
}

Tensor LinearLayer::forward(const Tensor& x) const { return ad::linear(x, w, b); }

void LinearLayer::collect(std::vector<ParamEntry>& out, const std::string& prefix) {
    out.push_back({prefix + ".w", w});
    if (b.defined()) out.push_back({prefix + ".b", b});
}

BatchNorm2d::BatchNorm2d(int channels, double eps_, double momentum_)
    : eps(eps_), momentum(momentum_) {
    gamma = Tensor::param({channels}, std::vector<double>(static_cast<std::size_t>(channels), 1.0));
    beta = Tensor::param({channels}, std::vector<double>(static_cast<std::size_t>(channels), 0.0));
    running_mean.assign(static_cast<std::size_t>(channels), 0.0);
    running_var.assign(static_cast<std::size_t>(channels), 1.0);
}

Tensor BatchNorm2d::forward(const Tensor& x, bool training) {
    if (!training) return ad::batch_norm_eval(x, gamma, beta, running_mean, running_var, eps);
    std::vector<double> mu, var;
    Tensor y = ad::batch_norm_train(x, gamma, beta, eps, &mu, &var);
    for (std::size_t c = 0; c < running_mean.size(); ++c) {
        running_mean[c] = (1.0 - momentum) * running_mean[c] + momentum * mu[c];
        running_var[c] = (1.0 - momentum) * running_var[c] + momentum * var[c];
    }
    return y;
}

void BatchNorm2d::collect(std::vector<ParamEntry>& out, const std::string& prefix) {
    out.push_back({prefix + ".gamma", gamma});
    out.push_back({prefix + ".beta", beta});
}

void BatchNorm2d::collect_buffers(std::vector<BufferEntry>& out, const std::string& prefix) {
    out.push_back({prefix + ".running_mean", &running_mean});
    out.push_back({prefix + ".running_var", &running_var});
}

DynamicConv2d::DynamicConv2d(int c_in, int c_out_, int kernel, int n_basis_,
                             std::mt19937_64& rng)
    : n_basis(n_basis_), c_out(c_out_) {
    const double bound = std::sqrt(6.0 / (static_cast<double>(c_in) * kernel * kernel));
    w_basis = Tensor::param(
        {n_basis * c_out, c_in, kernel, kernel},
        uniform_init(static_cast<std::size_t>(n_basis) * c_out * c_in * kernel * kernel, bound,
                     rng));
    bias = Tensor::param({c_out}, std::vector<double>(static_cast<std::size_t>(c_out), 0.0));
    const double abound = 1.0 / std::sqrt(static_cast<double>(c_in));
    att_w = Tensor::param({n_basis, c_in},
                          uniform_init(static_cast<std::size_t>(n_basis) * c_in, abound, rng));
    att_b = Tensor::param({n_basis}, std::vector<double>(static_cast<std::size_t>(n_basis), 0.0));
}

Tensor DynamicConv2d::forward(const Tensor& x) const {
    Tensor pooled = ad::mean_over_w(x);                       // (B,Cin,T)
    Tensor logits = ad::attention_logits(pooled, att_w, att_b); // (B,nb,T)
    Tensor alpha = ad::softmax_channels(logits);
    Tensor y = ad::conv2d_same(x, w_basis, Tensor());          // (B,nb*Co,T,F)
    return ad::dynamic_combine(y, alpha, bias, n_basis, c_out);
}

void DynamicConv2d::collect(std::vector<ParamEntry>& out, const std::string& prefix) {
    out.push_back({prefix + ".w_basis", w_basis});
    out.push_back({prefix + ".bias", bias});
    out.push_back({prefix + ".att_w", att_w});
    out.push_back({prefix + ".att_b", att_b});
}

GruCell::GruCell(int input, int hidden_, std::mt19937_64& rng) : hidden(hidden_) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(hidden_));
    w_ih = Tensor::param({3 * hidden_, input},
                         uniform_init(static_cast<std::size_t>(3) * hidden_ * input, bound, rng));
    w_hh = Tensor::param({3 * hidden_, hidden_},
                         uniform_init(static_cast<std::size_t>(3) * hidden_ * hidden_, bound, rng));
    b_ih = Tensor::param({3 * hidden_},
                         uniform_init(static_cast<std::size_t>(3) * hidden_, bound, rng));
    b_hh = Tensor::param({3 * hidden_},
                         uniform_init(static_cast<std::size_t>(3) * hidden_, bound, rng));
}

Tensor GruCell::step(const Tensor& x, const Tensor& h) const {
    Tensor gi = ad::linear(x, w_ih, b_ih);
    Tensor gh = ad::linear(h, w_hh, b_hh);
    Tensor r = ad::sigmoid(ad::add(ad::slice_cols(gi, 0, hidden), ad::slice_cols(gh, 0, hidden)));
    Tensor z = ad::sigmoid(
        ad::add(ad::slice_cols(gi, hidden, hidden), ad::slice_cols(gh, hidden, hidden)));
    Tensor n = ad::tanh_op(ad::add(ad::slice_cols(gi, 2 * hidden, hidden),
                                   ad::mul(r, ad::slice_cols(gh, 2 * hidden, hidden))));
    return ad::add(ad::mul(ad::scale_add(z, -1.0, 1.0), n), ad::mul(z, h));
}

Tensor GruCell::run(const std::vector<Tensor>& inputs) const {
    Tensor h = Tensor::constant({1, hidden}, 0.0);
    for (const Tensor& x : inputs) h = step(x, h);
    return h;
}

void GruCell::collect(std::vector<ParamEntry>& out, const std::string& prefix) {
    out.push_back({prefix + ".w_ih", w_ih});
    out.push_back({prefix + ".w_hh", w_hh});
    out.push_back({prefix + ".b_ih", b_ih});
    out.push_back({prefix + ".b_hh", b_hh});
}

GatLayer::GatLayer(int f_in, int f_out, int edge_dim, double slope_, std::mt19937_64& rng)
    : slope(slope_) {
    const double wb = std::sqrt(6.0 / static_cast<double>(f_in + f_out));
    w = Tensor::param({f_out, f_in}, uniform_init(static_cast<std::size_t>(f_out) * f_in, wb, rng));
    const int alen = 2 * f_out + edge_dim;
    const double ab = std::sqrt(6.0 / static_cast<double>(alen + 1));
    a_vec = Tensor::param({alen, 1}, uniform_init(static_cast<std::size_t>(alen), ab, rng));
}

Tensor GatLayer::forward(const Tensor& h_in, const Tensor& edge_attr,
                         const std::vector<int>& src, const std::vector<int>& dst,
                         const std::vector<int>& seg_offsets, bool relu_out,
                         Tensor* out_alpha) const {
    Tensor h = ad::linear(h_in, w, Tensor()); // (N, f_out)
    Tensor h_dst = ad::index_rows(h, dst);
    Tensor h_src = ad::index_rows(h, src);
    Tensor feat = ad::concat_cols({h_dst, h_src, edge_attr});
    Tensor scores = ad::leaky_relu(ad::matmul(feat, a_vec), slope); // (E,1)
    Tensor flat = ad::reshape(scores, {static_cast<int>(src.size())});
    Tensor alpha = ad::segment_softmax(flat, seg_offsets);
    if (out_alpha) *out_alpha = alpha;
    Tensor agg = ad::scatter_weighted_rows(alpha, h, src, dst, h_in.dim(0));
    return relu_out ? ad::relu(agg) : ad::elu(agg);
}

void GatLayer::collect(std::vector<ParamEntry>& out, const std::string& prefix) {
    out.push_back({prefix + ".w", w});
    out.push_back({prefix + ".a", a_vec});
}

MessageEdges build_message_edges(const BatchGraph& graph) {
    MessageEdges e;
    e.seg_offsets.push_back(0);
    for (int i = 0; i < graph.n_nodes; ++i) {
        // self loop first, then the incoming chain edge when inside a clip
        e.src.push_back(i);
        e.dst.push_back(i);
        const int clip = graph.batch[static_cast<std::size_t>(i)];
        if (i > graph.node_offsets[static_cast<std::size_t>(clip)]) {
            e.src.push_back(i - 1);
            e.dst.push_back(i);
        }
        e.seg_offsets.push_back(static_cast<int>(e.src.size()));
    }
    return e;
}

// ---------------------------------------------------------------------------
// model
// ---------------------------------------------------------------------------

Model::Model(const ModelConfig& cfg, std::mt19937_64& rng) : cfg_(cfg) {
    cfg.validate();
    conv1 = DynamicConv2d(cfg.in_channels, cfg.conv_channels[0], cfg.kernel, cfg.n_basis, rng);
    conv2 = DynamicConv2d(cfg.conv_channels[0], cfg.conv_channels[1], cfg.kernel, cfg.n_basis, rng);
    conv3 = DynamicConv2d(cfg.conv_channels[1], cfg.conv_channels[2], cfg.kernel, cfg.n_basis, rng);
    bn1 = BatchNorm2d(cfg.conv_channels[0], cfg.bn_eps, cfg.bn_momentum);
    bn2 = BatchNorm2d(cfg.conv_channels[1], cfg.bn_eps, cfg.bn_momentum);
    bn3 = BatchNorm2d(cfg.conv_channels[2], cfg.bn_eps, cfg.bn_momentum);

    int f = cfg.n_bands;
    for (int i = 0; i < 3; ++i) f /= cfg.pool_w;
    const int flat = cfg.conv_channels[2] * cfg.group_frames * f;
    proj = LinearLayer(flat, cfg.d_node, rng);
    ln_gamma = Tensor::param({cfg.d_node},
                             std::vector<double>(static_cast<std::size_t>(cfg.d_node), 1.0));
    ln_beta = Tensor::param({cfg.d_node},
                            std::vector<double>(static_cast<std::size_t>(cfg.d_node), 0.0));

    const int feat_in = cfg.d_node + cfg.meta_dim;
    if (cfg.edge_mode == ModelConfig::EdgeMode::Compressed)
        edge_proj = LinearLayer(2 * feat_in, cfg.edge_dim, rng);
    else
        edge_gru = GruCell(feat_in, cfg.edge_dim, rng);

    gat1 = GatLayer(feat_in, cfg.d_node, cfg.edge_dim, cfg.leaky_slope, rng);
    gat2 = GatLayer(cfg.d_node, cfg.d_node, cfg.edge_dim, cfg.leaky_slope, rng);
    node_head = LinearLayer(cfg.d_node, 1 + cfg.num_classes, rng);
}

Tensor chunk_input_tensor(const BatchGraph& graph) {
    const int n = graph.n_nodes, c = graph.channels, m = graph.n_bands, w = graph.group_frames;
    std::vector<double> v(static_cast<std::size_t>(n) * c * w * m);
    for (int i = 0; i < n; ++i)
        for (int cc = 0; cc < c; ++cc)
            for (int b = 0; b < m; ++b)
                for (int j = 0; j < w; ++j)
                    v[((static_cast<std::size_t>(i) * c + cc) * w + j) * m + b] =
                        graph.chunk_inputs[((static_cast<std::size_t>(i) * c + cc) * m + b) * w +
                                           j];
    return Tensor::constant({n, c, w, m}, std::move(v));
}

Tensor Model::generate_embeddings(const Tensor& chunks, bool training) {
    Tensor x = chunks;
    x = ad::avg_pool_w(ad::relu(bn1.forward(conv1.forward(x), training)), cfg_.pool_w);
    x = ad::avg_pool_w(ad::relu(bn2.forward(conv2.forward(x), training)), cfg_.pool_w);
    x = ad::avg_pool_w(ad::relu(bn3.forward(conv3.forward(x), training)), cfg_.pool_w);
    const int n = x.dim(0);
    const int flat = x.dim(1) * x.dim(2) * x.dim(3);
    Tensor f = ad::reshape(x, {n, flat});
    Tensor e = proj.forward(f);
    return ad::relu(ad::layer_norm_rows(e, ln_gamma, ln_beta, cfg_.ln_eps));
}

Tensor Model::edge_features(const Tensor& emb, const std::vector<int>& src,
                            const std::vector<int>& dst) const {
    if (cfg_.edge_mode == ModelConfig::EdgeMode::Compressed) {
        Tensor h_src = ad::index_rows(emb, src);
        Tensor h_dst = ad::index_rows(emb, dst);
        return ad::relu(edge_proj.forward(ad::concat_cols({h_src, h_dst})));
    }
    // sequential mode: order-preserving recurrent encoding of the pair
    std::vector<Tensor> rows;
    rows.reserve(src.size());
    for (std::size_t e = 0; e < src.size(); ++e) {
        Tensor a = ad::index_rows(emb, {src[e]});
        Tensor b = ad::index_rows(emb, {dst[e]});
        rows.push_back(edge_gru.run({a, b}));
    }
    return ad::concat_rows(rows);
}

NodeOutputs Model::forward(const BatchGraph& graph, bool training) {
    if (graph.channels != cfg_.in_channels || graph.n_bands != cfg_.n_bands ||
        graph.group_frames != cfg_.group_frames)
        throw std::invalid_argument("model forward: chunk geometry does not match config");
    if (graph.meta_dim != cfg_.meta_dim)
        throw std::invalid_argument("model forward: meta dimension does not match config");

    Tensor emb = generate_embeddings(chunk_input_tensor(graph), training);
    if (cfg_.meta_dim > 0) {
        Tensor meta = Tensor::constant({graph.n_nodes, cfg_.meta_dim}, graph.meta_onehot);
        emb = ad::concat_cols({emb, meta});
    }

    const MessageEdges edges = build_message_edges(graph);
    Tensor eattr = edge_features(emb, edges.src, edges.dst);
    Tensor h1 = gat1.forward(emb, eattr, edges.src, edges.dst, edges.seg_offsets, false);
    Tensor h2 = gat2.forward(h1, eattr, edges.src, edges.dst, edges.seg_offsets, true);

    NodeOutputs out;
    out.embeddings = h2;
    out.node_logits = node_head.forward(h2);
    Tensor enc = Tensor::constant({graph.n_nodes, cfg_.d_node},
                                  temporal_encoding(graph.node_time, cfg_.d_node,
                                                    cfg_.time_gamma));
    out.time_encoded = ad::add(h2, enc);
    return out;
}

std::vector<ParamEntry> Model::parameters() {
    std::vector<ParamEntry> p;
    conv1.collect(p, "generator.conv1");
    bn1.collect(p, "generator.bn1");
    conv2.collect(p, "generator.conv2");
    bn2.collect(p, "generator.bn2");
    conv3.collect(p, "generator.conv3");
    bn3.collect(p, "generator.bn3");
    proj.collect(p, "generator.proj");
    p.push_back({"generator.ln.gamma", ln_gamma});
    p.push_back({"generator.ln.beta", ln_beta});
    if (cfg_.edge_mode == ModelConfig::EdgeMode::Compressed)
        edge_proj.collect(p, "edge.proj");
    else
        edge_gru.collect(p, "edge.gru");
    gat1.collect(p, "gat1");
    gat2.collect(p, "gat2");
    node_head.collect(p, "node_head");
    return p;
}

std::vector<BufferEntry> Model::buffers() {
    std::vector<BufferEntry> b;
    bn1.collect_buffers(b, "generator.bn1");
    bn2.collect_buffers(b, "generator.bn2");
    bn3.collect_buffers(b, "generator.bn3");
    return b;
}

std::vector<double> temporal_encoding(const std::vector<double>& node_time, int d_node,
                                      double gamma) {
    if (d_node < 2) throw std::invalid_argument("temporal_encoding: need d_node >= 2");
    std::vector<double> enc(node_time.size() * static_cast<std::size_t>(d_node));
    for (std::size_t n = 0; n < node_time.size(); ++n)
        for (int d = 0; d < d_node; ++d) {
            const double omega = 10.0 * d / (d_node - 1);
            enc[n * static_cast<std::size_t>(d_node) + d] =
                gamma * std::sin(node_time[n] * omega);
        }
    return enc;
}

} // namespace rsed
