#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

// Minimal reverse-mode automatic differentiation over dense double tensors.
// Every op records a backward closure; Tensor::backward() replays the tape in
// reverse creation order. Single-threaded and deterministic by construction.

namespace rsed::ad {

struct TensorNode {
    std::vector<double> val;
    std::vector<double> grad;       // lazily allocated on first accumulation
    std::vector<int> shape;
    std::vector<std::shared_ptr<TensorNode>> parents;
    std::function<void()> backprop; // empty for leaves/constants
    std::uint64_t id = 0;
    bool needs_grad = false;

    std::size_t numel() const { return val.size(); }
    void ensure_grad() {
        if (grad.size() != val.size()) grad.assign(val.size(), 0.0);
    }
};

class Tensor {
public:
    Tensor() = default;

    static Tensor constant(std::vector<int> shape, double fill = 0.0);
    static Tensor constant(std::vector<int> shape, std::vector<double> data);
    static Tensor param(std::vector<int> shape, std::vector<double> data);
    static Tensor scalar(double v);

    bool defined() const { return node_ != nullptr; }
    const std::vector<int>& shape() const { return node_->shape; }
    int dim(int i) const { return node_->shape[static_cast<std::size_t>(i)]; }
    std::size_t numel() const { return node_->numel(); }
    bool requires_grad() const { return node_ && node_->needs_grad; }

    std::vector<double>& data() { return node_->val; }
    const std::vector<double>& data() const { return node_->val; }
    std::vector<double>& grad();
    const std::vector<double>& grad() const;

    double item() const;
    void zero_grad();

    // Runs reverse accumulation from this scalar tensor.
    void backward();

    std::shared_ptr<TensorNode> node() const { return node_; }

    friend Tensor make_op(std::vector<int> shape, std::vector<double> val,
                          std::vector<Tensor> parents, std::function<void()> fn,
                          TensorNode** out_node);

private:
    explicit Tensor(std::shared_ptr<TensorNode> n) : node_(std::move(n)) {}
    std::shared_ptr<TensorNode> node_;
};

// ---- elementwise ----
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale_add(const Tensor& x, double a, double b); // a*x + b
Tensor relu(const Tensor& x);
Tensor leaky_relu(const Tensor& x, double slope);
Tensor elu(const Tensor& x, double alpha = 1.0);
Tensor sigmoid(const Tensor& x);
Tensor tanh_op(const Tensor& x);

// ---- shape / gather ----
Tensor reshape(const Tensor& x, std::vector<int> shape);
Tensor concat_cols(const std::vector<Tensor>& parts);   // (N,Ci) -> (N,sum Ci)
Tensor concat_rows(const std::vector<Tensor>& parts);   // (Ni,C) -> (sum Ni,C)
Tensor stack_rows(const std::vector<Tensor>& rows);     // k tensors (C) or (1,C) -> (k,C)
Tensor slice_cols(const Tensor& x, int c0, int len);    // (N,C) -> (N,len)
Tensor index_rows(const Tensor& x, const std::vector<int>& idx); // gather rows

// ---- linear algebra ----
Tensor matmul(const Tensor& a, const Tensor& b);        // (m,k)x(k,n)
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b); // x:(N,in) w:(out,in) b:(out) or undefined
Tensor softmax_rows(const Tensor& x);                   // (N,C) softmax over C
Tensor sum_all(const Tensor& x);
Tensor mean_all(const Tensor& x);

// ---- convolution / pooling (NCHW) ----
Tensor conv2d_same(const Tensor& x, const Tensor& w, const Tensor& bias); // odd kernels
Tensor avg_pool_w(const Tensor& x, int pw);             // pool width axis, floor
Tensor mean_over_w(const Tensor& x);                    // (B,C,T,F) -> (B,C,T)
Tensor attention_logits(const Tensor& xm, const Tensor& w, const Tensor& b); // (B,C,T),(nb,C),(nb)->(B,nb,T)
Tensor softmax_channels(const Tensor& x);               // (B,nb,T) softmax over nb
Tensor dynamic_combine(const Tensor& y, const Tensor& alpha, const Tensor& bias,
                       int n_basis, int c_out);         // (B,nb*Co,T,F),(B,nb,T),(Co)->(B,Co,T,F)

// ---- normalization ----
Tensor batch_norm_train(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                        double eps, std::vector<double>* batch_mean,
                        std::vector<double>* batch_var); // (B,C,T,F)
Tensor batch_norm_eval(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                       const std::vector<double>& mean, const std::vector<double>& var,
                       double eps);
Tensor layer_norm_rows(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps);

// ---- graph message passing ----
// Scores per edge, segments = contiguous runs of equal destination node.
Tensor segment_softmax(const Tensor& scores, const std::vector<int>& seg_offsets);
Tensor scatter_weighted_rows(const Tensor& alpha, const Tensor& h,
                             const std::vector<int>& src, const std::vector<int>& dst,
                             int n_out);

// ---- sequence smoothing ----
// x:(N,C) node rows grouped into contiguous segments (clips); kernel:(C,K) odd K.
// 1-D convolution over the node axis per channel, replicate padding inside each segment.
Tensor conv1d_segments_replicate(const Tensor& x, const Tensor& kernel,
                                 const std::vector<int>& seg_offsets);

// ---- losses / interval math ----
Tensor bce_with_logits_mean(const Tensor& logits, const std::vector<double>& targets);
Tensor cross_entropy_masked_mean(const Tensor& logits, const std::vector<int>& labels,
                                 int ignore_label = -1);
enum class IouMode { Union, EnclosingSpan };
Tensor neg_log_iou_mean(const Tensor& pred, const std::vector<double>& target,
                        IouMode mode, double floor);    // pred (M,2), target flat 2M
// Apply per-anchor deltas to anchor endpoints, clamp to [0,L]; a crossed interval
// collapses to its midpoint (zero width).
Tensor refine_intervals(const Tensor& delta_s, const Tensor& delta_e,
                        const std::vector<double>& anchor_start,
                        const std::vector<double>& anchor_end,
                        const std::vector<double>& clip_len); // (M,1),(M,1)->(M,2)

} // namespace rsed::ad
