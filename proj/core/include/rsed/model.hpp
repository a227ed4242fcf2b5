#pragma once

#include <array>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "rsed/autodiff.hpp"
#include "rsed/graphify.hpp"

namespace rsed {

struct ModelConfig {
    int in_channels = 3;
    int group_frames = 5;
    int n_bands = 84;
    int n_basis = 4;
    std::array<int, 3> conv_channels{16, 32, 64};
    int kernel = 3;
    int pool_w = 4;
    int d_node = 64;
    int edge_dim = 12;
    enum class EdgeMode { Compressed, Sequential };
    EdgeMode edge_mode = EdgeMode::Compressed;
    double leaky_slope = 0.2;
    int num_classes = 4;
    double time_gamma = 0.05;
    int meta_dim = 0;
    double bn_eps = 1e-5;
    double bn_momentum = 0.1;
    double ln_eps = 1e-5;

    void validate() const;
    std::uint64_t hash() const;
};

/// Named learnable tensor. The name keys checkpoints and optimizer state.
struct ParamEntry {
    std::string name;
    ad::Tensor tensor;
};

/// Named persistent non-learnable state (batch-norm running statistics).
struct BufferEntry {
    std::string name;
    std::vector<double>* data;
};

class LinearLayer {
public:
    LinearLayer() = default;
    LinearLayer(int in, int out, std::mt19937_64& rng, bool with_bias = true);
    ad::Tensor forward(const ad::Tensor& x) const;
    void collect(std::vector<ParamEntry>& out, const std::string& prefix);

    ad::Tensor w, b;
};

class BatchNorm2d {
public:
    BatchNorm2d() = default;
    explicit BatchNorm2d(int channels, double eps = 1e-5, double momentum = 0.1);
    ad::Tensor forward(const ad::Tensor& x, bool training);
    void collect(std::vector<ParamEntry>& out, const std::string& prefix);
    void collect_buffers(std::vector<BufferEntry>& out, const std::string& prefix);

    ad::Tensor gamma, beta;
    std::vector<double> running_mean, running_var;
    double eps = 1e-5;
    double momentum = 0.1;
};

/// Conv2d whose effective kernel is an attention-weighted mix of basis kernels;
/// mixing weights depend on (sample, time).
class DynamicConv2d {
public:
    DynamicConv2d() = default;
    DynamicConv2d(int c_in, int c_out, int kernel, int n_basis, std::mt19937_64& rng);
    ad::Tensor forward(const ad::Tensor& x) const;
    void collect(std::vector<ParamEntry>& out, const std::string& prefix);

    ad::Tensor w_basis; // (n_basis*c_out, c_in, k, k)
    ad::Tensor bias;    // (c_out)
    ad::Tensor att_w;   // (n_basis, c_in)
    ad::Tensor att_b;   // (n_basis)
    int n_basis = 1;
    int c_out = 0;
};

class GruCell {
public:
    GruCell() = default;
    GruCell(int input, int hidden, std::mt19937_64& rng);
    ad::Tensor step(const ad::Tensor& x, const ad::Tensor& h) const; // (1,in),(1,H)->(1,H)
    ad::Tensor run(const std::vector<ad::Tensor>& inputs) const;     // final hidden state
    void collect(std::vector<ParamEntry>& out, const std::string& prefix);

    ad::Tensor w_ih, w_hh, b_ih, b_hh;
    int hidden = 0;
};

/// Edge-aware attention layer over a directed graph with fixed edge attributes.
class GatLayer {
public:
    GatLayer() = default;
    GatLayer(int f_in, int f_out, int edge_dim, double slope, std::mt19937_64& rng);
    // edges are given as parallel src/dst arrays sorted by dst; seg_offsets
    // bound the contiguous runs of equal destination.
    ad::Tensor forward(const ad::Tensor& h_in, const ad::Tensor& edge_attr,
                       const std::vector<int>& src, const std::vector<int>& dst,
                       const std::vector<int>& seg_offsets, bool relu_out,
                       ad::Tensor* out_alpha = nullptr) const;
    void collect(std::vector<ParamEntry>& out, const std::string& prefix);

    ad::Tensor w;     // (f_out, f_in)
    ad::Tensor a_vec; // (2*f_out + edge_dim, 1)
    double slope = 0.2;
};

/// Message-passing structure derived from a batch graph: chain edges plus one
/// self-loop per node, sorted by destination.
struct MessageEdges {
    std::vector<int> src, dst;
    std::vector<int> seg_offsets; // size n_nodes+1
};
MessageEdges build_message_edges(const BatchGraph& graph);

struct NodeOutputs {
    ad::Tensor embeddings;  // (N, d_node) post attention layers
    ad::Tensor node_logits; // (N, 1+C): col 0 confidence, cols 1..C class logits
    ad::Tensor time_encoded; // (N, d_node)
};

/// The learnable trunk: node generator, edge features, two attention layers,
/// node head, temporal encoding.
class Model {
public:
    Model() = default;
    Model(const ModelConfig& cfg, std::mt19937_64& rng);

    NodeOutputs forward(const BatchGraph& graph, bool training);

    std::vector<ParamEntry> parameters();       // all named parameters
    std::vector<BufferEntry> buffers();         // batch-norm running stats
    const ModelConfig& config() const { return cfg_; }

    // generator pieces exposed for targeted tests
    ad::Tensor generate_embeddings(const ad::Tensor& chunks, bool training);
    ad::Tensor edge_features(const ad::Tensor& emb, const std::vector<int>& src,
                             const std::vector<int>& dst) const;

    DynamicConv2d conv1, conv2, conv3;
    BatchNorm2d bn1, bn2, bn3;
    LinearLayer proj;
    ad::Tensor ln_gamma, ln_beta;
    LinearLayer edge_proj;      // compressed mode
    GruCell edge_gru;           // sequential mode
    GatLayer gat1, gat2;
    LinearLayer node_head;

private:
    ModelConfig cfg_;
};

/// Sinusoidal additive term gamma*sin(t*omega_d) with omega_d = 10(d-1)/(D-1).
std::vector<double> temporal_encoding(const std::vector<double>& node_time, int d_node,
                                      double gamma);

/// Builds the (N, c, w, m) model input tensor from (N, c, m, w) chunk storage.
ad::Tensor chunk_input_tensor(const BatchGraph& graph);

} // namespace rsed
