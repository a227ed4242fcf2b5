#include "rsed/autodiff.hpp"

#include <algorithm>
#include <atomic>
#include <cassert>
#include <cmath>
#include <stdexcept>
#include <unordered_set>

namespace rsed::ad {

namespace {

std::atomic<std::uint64_t> g_next_id{1};

std::size_t shape_numel(const std::vector<int>& shape) {
    std::size_t n = 1;
    for (int d : shape) {
        if (d < 0) throw std::invalid_argument("negative tensor dimension");
        n *= static_cast<std::size_t>(d);
    }
    return n;
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape())
        throw std::invalid_argument(std::string(op) + ": shape mismatch");
}

} // namespace

Tensor make_op(std::vector<int> shape, std::vector<double> val,
               std::vector<Tensor> parents, std::function<void()> fn,
               TensorNode** out_node) {
    auto n = std::make_shared<TensorNode>();
    n->shape = std::move(shape);
    n->val = std::move(val);
    if (n->val.size() != shape_numel(n->shape))
        throw std::invalid_argument("tensor value size does not match shape");
    n->id = g_next_id.fetch_add(1, std::memory_order_relaxed);
    bool needs = false;
    for (const auto& p : parents)
        if (p.defined() && p.requires_grad()) needs = true;
    if (needs) {
        n->needs_grad = true;
        for (auto& p : parents)
            if (p.defined()) n->parents.push_back(p.node());
        n->backprop = std::move(fn);
    }
    if (out_node) *out_node = n.get();
    return Tensor(std::move(n));
}

Tensor Tensor::constant(std::vector<int> shape, double fill) {
    std::vector<double> v(shape_numel(shape), fill);
    return make_op(std::move(shape), std::move(v), {}, nullptr, nullptr);
}

Tensor Tensor::constant(std::vector<int> shape, std::vector<double> data) {
    return make_op(std::move(shape), std::move(data), {}, nullptr, nullptr);
}

Tensor Tensor::param(std::vector<int> shape, std::vector<double> data) {
    Tensor t = make_op(std::move(shape), std::move(data), {}, nullptr, nullptr);
    t.node_->needs_grad = true;
    t.node_->ensure_grad();
    return t;
}

Tensor Tensor::scalar(double v) { return constant({1}, std::vector<double>{v}); }

std::vector<double>& Tensor::grad() {
    node_->ensure_grad();
    return node_->grad;
}

const std::vector<double>& Tensor::grad() const {
    node_->ensure_grad();
    return node_->grad;
}

double Tensor::item() const {
    if (numel() != 1) throw std::logic_error("item() on non-scalar tensor");
    return node_->val[0];
}

void Tensor::zero_grad() {
    node_->ensure_grad();
    std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
}

void Tensor::backward() {
    if (!defined()) throw std::logic_error("backward() on undefined tensor");
    if (numel() != 1) throw std::logic_error("backward() requires a scalar");
    if (!node_->needs_grad) return;

    // Collect reachable grad-requiring nodes, then run in reverse creation order.
    std::vector<TensorNode*> order;
    std::unordered_set<TensorNode*> seen;
    std::vector<TensorNode*> stack{node_.get()};
    seen.insert(node_.get());
    while (!stack.empty()) {
        TensorNode* n = stack.back();
        stack.pop_back();
        order.push_back(n);
        for (auto& p : n->parents) {
            if (p->needs_grad && seen.insert(p.get()).second) stack.push_back(p.get());
        }
    }
    std::sort(order.begin(), order.end(),
              [](const TensorNode* a, const TensorNode* b) { return a->id > b->id; });

    node_->ensure_grad();
    node_->grad[0] += 1.0;
    for (TensorNode* n : order)
        if (n->backprop) n->backprop();
}

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "add");
    std::vector<double> v(a.numel());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.data()[i] + b.data()[i];
    TensorNode* out = nullptr;
    auto pa = a.node(), pb = b.node();
    Tensor t = make_op(a.shape(), std::move(v), {a, b}, nullptr, &out);
    if (t.requires_grad()) {
        out->backprop = [out, pa, pb]() {
            if (pa->needs_grad) {
                pa->ensure_grad();
                for (std::size_t i = 0; i < out->grad.size(); ++i) pa->grad[i] += out->grad[i];
            }
            if (pb->needs_grad) {
                pb->ensure_grad();
                for (std::size_t i = 0; i < out->grad.size(); ++i) pb->grad[i] += out->grad[i];
            }
        };
    }
    return t;
}

Tensor sub(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "sub");
    std::vector<double> v(a.numel());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.data()[i] - b.data()[i];
    TensorNode* out = nullptr;
    auto pa = a.node(), pb = b.node();
    Tensor t = make_op(a.shape(), std::move(v), {a, b}, nullptr, &out);
    if (t.requires_grad()) {
        out->backprop = [out, pa, pb]() {
            if (pa->needs_grad) {
                pa->ensure_grad();
                for (std::size_t i = 0; i < out->grad.size(); ++i) pa->grad[i] += out->grad[i];
            }
            if (pb->needs_grad) {
                pb->ensure_grad();
                for (std::size_t i = 0; i < out->grad.size(); ++i) pb->grad[i] -= out->grad[i];
            }
        };
    }
    return t;
}

Tensor mul(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "mul");
    std::vector<double> v(a.numel());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.data()[i] * b.data()[i];
    TensorNode* out = nullptr;
    auto pa = a.node(), pb = b.node();
    Tensor t = make_op(a.shape(), std::move(v), {a, b}, nullptr, &out);
    if (t.requires_grad()) {
        out->backprop = [out, pa, pb]() {
            if (pa->needs_grad) {
                pa->ensure_grad();
                for (std::size_t i = 0; i < out->grad.size(); ++i)
                    pa->grad[i] += out->grad[i] * pb->val[i];
            }
            if (pb->needs_grad) {
                pb->ensure_grad();
                for (std::size_t i = 0; i < out->grad.size(); ++i)
                    pb->grad[i] += out->grad[i] * pa->val[i];
            }
        };
    }
    return t;
}

Tensor scale_add(const Tensor& x, double a, double b) {
    std::vector<double> v(x.numel());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = a * x.data()[i] + b;
    TensorNode* out = nullptr;
    auto px = x.node();
    Tensor t = make_op(x.shape(), std::move(v), {x}, nullptr, &out);
    if (t.requires_grad()) {
        out->backprop = [out, px, a]() {
            px->ensure_grad();
            for (std::size_t i = 0; i < out->grad.size(); ++i) px->grad[i] += a * out->grad[i];
        };
    }
    return t;
}

namespace {

template <typename Fwd, typename Dfn>
Tensor unary_op(const Tensor& x, Fwd fwd, Dfn dfn) {
    std::vector<double> v(x.numel());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = fwd(x.data()[i]);
    TensorNode* out = nullptr;
    auto px = x.node();
    Tensor t = make_op(x.shape(), std::move(v), {x}, nullptr, &out);
    if (t.requires_grad()) {
        out->backprop = [out, px, dfn]() {
            px->ensure_grad();
            for (std::size_t i = 0; i < out->grad.size(); ++i)
                px->grad[i] += out->grad[i] * dfn(px->val[i], out->val[i]);
        };
    }
    return t;
}

} // namespace

Tensor relu(const Tensor& x) {
    return unary_op(
        x, [](double v) { return v > 0.0 ? v : 0.0; },
        [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

Tensor leaky_relu(const Tensor& x, double slope) {
    return unary_op(
        x, [slope](double v) { return v > 0.0 ? v : slope * v; },
        [slope](double v, double) { return v > 0.0 ? 1.0 : slope; });
}

Tensor elu(const Tensor& x, double alpha) {
    return unary_op(
        x, [alpha](double v) { return v > 0.0 ? v : alpha * std::expm1(v); },
        [alpha](double v, double y) { return v > 0.0 ? 1.0 : y + alpha; });
}

Tensor sigmoid(const Tensor& x) {
    return unary_op(
        x,
        [](double v) { return v >= 0.0 ? 1.0 / (1.0 + std::exp(-v))
                                       : std::exp(v) / (1.0 + std::exp(v)); },
        [](double, double y) { return y * (1.0 - y); });
}

Tensor tanh_op(const Tensor& x) {
    return unary_op(
        x, [](double v) { return std::tanh(v); },
        [](double, double y) { return 1.0 - y * y; });
}

// ---------------------------------------------------------------------------
// shape / gather
// ---------------------------------------------------------------------------

Tensor reshape(const Tensor& x, std::vector<int> shape) {
    if (shape_numel(shape) != x.numel())
        throw std::invalid_argument("reshape: element count mismatch");
    TensorNode* out = nullptr;
    auto px = x.node();
    Tensor t = make_op(std::move(shape), x.data(), {x}, nullptr, &out);
    if (t.requires_grad()) {
        out->backprop = [out, px]() {
            px->ensure_grad();
            for (std::size_t i = 0; i < out->grad.size(); ++i) px->grad[i] += out->grad[i];
        };
    }
    return t;
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat_cols: no inputs");
    const int n = parts[0].dim(0);
    int total = 0;
    std::vector<int> widths;
    for (const auto& p : parts) {
        if (p.shape().size() != 2 || p.dim(0) != n)
            throw std::invalid_argument("concat_cols: inputs must be (N,Ci) with equal N");
        widths.push_back(p.dim(1));
        total += p.dim(1);
    }
    std::vector<double> v(static_cast<std::size_t>(n) * total);
    int col = 0;
    for (std::size_t k = 0; k < parts.size(); ++k) {
        const auto& src = parts[k].data();
        const int w = widths[k];
        for (int r = 0; r < n; ++r)
            std::copy(src.begin() + static_cast<std::ptrdiff_t>(r) * w,
                      src.begin() + static_cast<std::ptrdiff_t>(r + 1) * w,
                      v.begin() + static_cast<std::ptrdiff_t>(r) * total + col);
        col += w;
    }
    TensorNode* out = nullptr;
    std::vector<std::shared_ptr<TensorNode>> pnodes;
    for (const auto& p : parts) pnodes.push_back(p.node());
    Tensor t = make_op({n, total}, std::move(v), parts, nullptr, &out);
    if (t.requires_grad()) {
        out->backprop = [out, pnodes, widths, n, total]() {
            int col = 0;
            for (std::size_t k = 0; k < pnodes.size(); ++k) {
                const int w = widths[k];
                if (pnodes[k]->needs_grad) {
                    pnodes[k]->ensure_grad();
                    for (int r = 0; r < n; ++r)
                        for (int c = 0; c < w; ++c)
                            pnodes[k]->grad[static_cast<std::size_t>(r) * w + c] +=
                                out->grad[static_cast<std::size_t>(r) * total + col + c];
                }
                col += w;
            }
        };
    }
    return t;
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat_rows: no inputs");
    const int c = parts[0].dim(1);
    int total = 0;
    std::vector<int> heights;
    for (const auto& p : parts) {
        if (p.shape().size() != 2 || p.dim(1) != c)
            throw std::invalid_argument("concat_rows: inputs must be (Ni,C) with equal C");
        heights.push_back(p.dim(0));
        total += p.dim(0);
    }
    std::vector<double> v(static_cast<std::size_t>(total) * c);
    std::size_t pos = 0;
    for (const auto& p : parts) {
        std::copy(p.data().begin(), p.data().end(), v.begin() + static_cast<std::ptrdiff_t>(pos));
        pos += p.numel();
    }
    TensorNode* out = nullptr;
    std::vector<std::shared_ptr<TensorNode>> pnodes;
    for (const auto& p : parts) pnodes.push_back(p.node());
    Tensor t = make_op({total, c}, std::move(v), parts, nullptr, &out);
    if (t.requires_grad()) {
        out->backprop = [out, pnodes]() {
            std::size_t pos = 0;
            for (const auto& p : pnodes) {
                if (p->needs_grad) {
                    p->ensure_grad();
                    for (std::size_t i = 0; i < p->val.size(); ++i)
                        p->grad[i] += out->grad[pos + i];
                }
                pos += p->val.size();
            }
        };
    }
    return t;
}

Tensor stack_rows(const std::vector<Tensor>& rows) {
    if (rows.empty()) throw std::invalid_argument("stack_rows: no inputs");
    const std::size_t c = rows[0].numel();
    for (const auto& r : rows)
        if (r.numel() != c) throw std::invalid_argument("stack_rows: width mismatch");
    std::vector<double> v(rows.size() * c);
    for (std::size_t k = 0; k < rows.size(); ++k)
        std::copy(rows[k].data().begin(), rows[k].data().end(), v.begin() + k * c);
    TensorNode* out = nullptr;
    std::vector<std::shared_ptr<TensorNode>> pnodes;
    for (const auto& r : rows) pnodes.push_back(r.node());
    Tensor t = make_op({static_cast<int>(rows.size()), static_cast<int>(c)}, std::move(v),
                       rows, nullptr, &out);
    if (t.requires_grad()) {
        out->backprop = [out, pnodes, c]() {
            for (std::size_t k = 0; k < pnodes.size(); ++k) {
                if (!pnodes[k]->needs_grad) continue;
                pnodes[k]->ensure_grad();
                for (std::size_t i = 0; i < c; ++i)
                    pnodes[k]->grad[i] += out->grad[k * c + i];
            }
        };
    }
    return t;
}

Tensor slice_cols(const Tensor& x, int c0, int len) {
    if (x.shape().size() != 2) throw std::invalid_argument("slice_cols: need (N,C)");
    const int n = x.dim(0), c = x.dim(1);
    if (c0 < 0 || len <= 0 || c0 + len > c) throw std::invalid_argument("slice_cols: range");
    std::vector<double> v(static_cast<std::size_t>(n) * len);
    for (int r = 0; r < n; ++r)
        for (int j = 0; j < len; ++j)
            v[static_cast<std::size_t>(r) * len + j] =
                x.data()[static_cast<std::size_t>(r) * c + c0 + j];
    TensorNode* out = nullptr;
    auto px = x.node();
    Tensor t = make_op({n, len}, std::move(v), {x}, nullptr, &out);
    if (t.requires_grad()) {
        out->backprop = [out, px, n, c, c0, len]() {
            px->ensure_grad();
            for (int r = 0; r < n; ++r)
                for (int j = 0; j < len; ++j)
                    px->grad[static_cast<std::size_t>(r) * c + c0 + j] +=
                        out->grad[static_cast<std::size_t>(r) * len + j];
        };
    }
    return t;
}

Tensor index_rows(const Tensor& x, const std::vector<int>& idx) {
    if (x.shape().size() != 2) throw std::invalid_argument("index_rows: need (N,C)");
    const int n = x.dim(0), c = x.dim(1);
    std::vector<double> v(idx.size() * static_cast<std::size_t>(c));
    for (std::size_t k = 0; k < idx.size(); ++k) {
        if (idx[k] < 0 || idx[k] >= n) throw std::out_of_range("index_rows: bad index");
        std::copy(x.data().begin() + static_cast<std::ptrdiff_t>(idx[k]) * c,
                  x.data().begin() + static_cast<std::ptrdiff_t>(idx[k] + 1) * c,
                  v.begin() + static_cast<std::ptrdiff_t>(k) * c);
    }
    TensorNode* out = nullptr;
    auto px = x.node();
    Tensor t = make_op({static_cast<int>(idx.size()), c}, std::move(v), {x}, nullptr, &out);
    if (t.requires_grad()) {
        out->backprop = [out, px, idx, c]() {
            px->ensure_grad();
            for (std::size_t k = 0; k < idx.size(); ++k)
                for (int j = 0; j < c; ++j)
                    px->grad[static_cast<std::size_t>(idx[k]) * c + j] +=
                        out->grad[k * static_cast<std::size_t>(c) + j];
        };
    }
    return t;
}

// ---------------------------------------------------------------------------
// linear algebra
// ---------------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.shape().size() != 2 || b.shape().size() != 2 || a.dim(1) != b.dim(0))
        throw std::invalid_argument("matmul: incompatible shapes");
    const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
    std::vector<double> v(static_cast<std::size_t>(m) * n, 0.0);
    for (int i = 0; i < m; ++i) {
        for (int p = 0; p < k; ++p) {
            const double av = a.data()[static_cast<std::size_t>(i) * k + p];
            if (av == 0.0) continue;
            const double* brow = b.data().data() + static_cast<std::size_t>(p) * n;
            double* vrow = v.data() + static_cast<std::size_t>(i) * n;
            for (int j = 0; j < n; ++j) vrow[j] += av * brow[j];
        }
    }
    TensorNode* out = nullptr;
    auto pa = a.node(), pb = b.node();
    Tensor t = make_op({m, n}, std::move(v), {a, b}, nullptr, &out);
    if (t.requires_grad()) {
        out->backprop = [out, pa, pb, m, k, n]() {
            if (pa->needs_grad) {
                pa->ensure_grad();
                for (int i = 0; i < m; ++i)
                    for (int p = 0; p < k; ++p) {
                        double s = 0.0;
                        const double* grow = out->grad.data() + static_cast<std::size_t>(i) * n;
                        const double* brow = pb->val.data() + static_cast<std::size_t>(p) * n;
                        for (int j = 0; j < n; ++j) s += grow[j] * brow[j];
                        pa->grad[static_cast<std::size_t>(i) * k + p] += s;
                    }
            }
            if (pb->needs_grad) {
                pb->ensure_grad();
                for (int i = 0; i < m; ++i)
                    for (int p = 0; p < k; ++p) {
                        const double av = pa->val[static_cast<std::size_t>(i) * k + p];
                        if (av == 0.0) continue;
                        const double* grow = out->grad.data() + static_cast<std::size_t>(i) * n;
                        double* brow = pb->grad.data() + static_cast<std::size_t>(p) * n;
                        for (int j = 0; j < n; ++j) brow[j] += av * grow[j];
                    }
            }
        };
    }
    return t;
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
    if (x.shape().size() != 2 || w.shape().size() != 2 || x.dim(1) != w.dim(1))
        throw std::invalid_argument("linear: incompatible shapes");
    const int n = x.dim(0), in = x.dim(1), outw = w.dim(0);
    const bool has_bias = b.defined();
    if (has_bias && (b.shape().size() != 1 || b.dim(0) != outw))
        throw std::invalid_argument("linear: bad bias shape");
    std::vector<double> v(static_cast<std::size_t>(n) * outw);
    for (int r = 0; r < n; ++r) {
        const double* xr = x.data().data() + static_cast<std::size_t>(r) * in;
        double* vr = v.data() + static_cast<std::size_t>(r) * outw;
        for (int o = 0; o < outw; ++o) {
            const double* wr = w.data().data() + static_cast<std::size_t>(o) * in;
            double s = has_bias ? b.data()[o] : 0.0;
            for (int i = 0; i < in; ++i) s += xr[i] * wr[i];
            vr[o] = s;
        }
    }
    TensorNode* out = nullptr;
    auto px = x.node(), pw = w.node();
    auto pbn = has_bias ? b.node() : nullptr;
    std::vector<Tensor> parents{x, w};
    if (has_bias) parents.push_back(b);
    Tensor t = make_op({n, outw}, std::move(v), parents, nullptr, &out);
    if (t.requires_grad()) {
        out->backprop = [out, px, pw, pbn, n, in, outw]() {
            if (px->needs_grad) px->ensure_grad();
            if (pw->needs_grad) pw->ensure_grad();
            if (pbn && pbn->needs_grad) pbn->ensure_grad();
            for (int r = 0; r < n; ++r) {
                const double* gr = out->grad.data() + static_cast<std::size_t>(r) * outw;
                const double* xr = px->val.data() + static_cast<std::size_t>(r) * in;
                for (int o = 0; o < outw; ++o) {
                    const double g = gr[o];
                    if (g == 0.0) continue;
                    const double* wr = pw->val.data() + static_cast<std::size_t>(o) * in;
                    if (px->needs_grad) {
                        double* xg = px->grad.data() + static_cast<std::size_t>(r) * in;
                        for (int i = 0; i < in; ++i) xg[i] += g * wr[i];
                    }
                    if (pw->needs_grad) {
                        double* wg = pw->grad.data() + static_cast<std::size_t>(o) * in;
                        for (int i = 0; i < in; ++i) wg[i] += g * xr[i];
                    }
                    if (pbn && pbn->needs_grad) pbn->grad[o] += g;
                }
            }
        };
    }
    return t;
}

Tensor softmax_rows(const Tensor& x) {
    if (x.shape().size() != 2) throw std::invalid_argument("softmax_rows: need (N,C)");
    const int n = x.dim(0), c = x.dim(1);
    std::vector<double> v(x.numel());
    for (int r = 0; r < n; ++r) {
        const double* xr = x.data().data() + static_cast<std::size_t>(r) * c;
        double* vr = v.data() + static_cast<std::size_t>(r) * c;
        double mx = xr[0];
        for (int j = 1; j < c; ++j) mx = std::max(mx, xr[j]);
        double sum = 0.0;
        for (int j = 0; j < c; ++j) {
            vr[j] = std::exp(xr[j] - mx);
            sum += vr[j];
        }
        for (int j = 0; j < c; ++j) vr[j] /= sum;
    }
    TensorNode* out = nullptr;
    auto px = x.node();
    Tensor t = make_op(x.shape(), std::move(v), {x}, nullptr, &out);
    if (t.requires_grad()) {
        out->backprop = [out, px, n, c]() {
            px->ensure_grad();
            for (int r = 0; r < n; ++r) {
                const double* y = out->val.data() + static_cast<std::size_t>(r) * c;
                const double* g = out->grad.data() + static_cast<std::size_t>(r) * c;
                double dot = 0.0;
                for (int j = 0; j < c; ++j) dot += y[j] * g[j];
                double* xg = px->grad.data() + static_cast<std::size_t>(r) * c;
                for (int j = 0; j < c; ++j) xg[j] += y[j] * (g[j] - dot);
            }
        };
    }
    return t;
}

Tensor sum_all(const Tensor& x) {
    double s = 0.0;
    for (double v : x.data()) s += v;
    TensorNode* out = nullptr;
    auto px = x.node();
    Tensor t = make_op({1}, {s}, {x}, nullptr, &out);
    if (t.requires_grad()) {
        out->backprop = [out, px]() {
            px->ensure_grad();
            for (std::size_t i = 0; i < px->grad.size(); ++i) px->grad[i] += out->grad[0];
        };
    }
    return t;
}

Tensor mean_all(const Tensor& x) {
    return scale_add(sum_all(x), 1.0 / static_cast<double>(x.numel()), 0.0);
}

// ---------------------------------------------------------------------------
// convolution / pooling
// ---------------------------------------------------------------------------

Tensor conv2d_same(const Tensor& x, const Tensor& w, const Tensor& bias) {
    if (x.shape().size() != 4 || w.shape().size() != 4)
        throw std::invalid_argument("conv2d: need x(B,Ci,H,W) and w(Co,Ci,kh,kw)");
    const int b = x.dim(0), ci = x.dim(1), h = x.dim(2), wd = x.dim(3);
    const int co = w.dim(0), kh = w.dim(2), kw = w.dim(3);
    if (w.dim(1) != ci) throw std::invalid_argument("conv2d: channel mismatch");
    if (kh % 2 == 0 || kw % 2 == 0) throw std::invalid_argument("conv2d: kernels must be odd");
    const bool has_bias = bias.defined();
    if (has_bias && (bias.shape().size() != 1 || bias.dim(0) != co))
        throw std::invalid_argument("conv2d: bad bias shape");
    const int ph = kh / 2, pw = kw / 2;

    std::vector<double> v(static_cast<std::size_t>(b) * co * h * wd, 0.0);
    const auto xi = [=](int bb, int cc, int yy, int xx) {
        return ((static_cast<std::size_t>(bb) * ci + cc) * h + yy) * wd + xx;
    };
    const auto oi = [=](int bb, int cc, int yy, int xx) {
        return ((static_cast<std::size_t>(bb) * co + cc) * h + yy) * wd + xx;
    };
    const auto wi = [=](int o, int i, int dy, int dx) {
        return ((static_cast<std::size_t>(o) * ci + i) * kh + dy) * kw + dx;
    };

    for (int bb = 0; bb < b; ++bb)
        for (int o = 0; o < co; ++o) {
            for (int i = 0; i < ci; ++i)
                for (int dy = 0; dy < kh; ++dy)
                    for (int dx = 0; dx < kw; ++dx) {
                        const double wv = w.data()[wi(o, i, dy, dx)];
                        if (wv == 0.0) continue;
                        for (int y = 0; y < h; ++y) {
                            const int sy = y + dy - ph;
                            if (sy < 0 || sy >= h) continue;
                            const int x0 = std::max(0, pw - dx);
                            const int x1 = std::min(wd, wd + pw - dx);
                            const double* src = x.data().data() + xi(bb, i, sy, x0 + dx - pw);
                            double* dst = v.data() + oi(bb, o, y, x0);
                            for (int xx = 0; xx < x1 - x0; ++xx) dst[xx] += wv * src[xx];
                        }
                    }
            if (has_bias) {
                const double bv = bias.data()[o];
                double* dst = v.data() + oi(bb, o, 0, 0);
                for (int i = 0; i < h * wd; ++i) dst[i] += bv;
            }
        }

    TensorNode* out = nullptr;
    auto px = x.node(), pkw = w.node();
    auto pbias = has_bias ? bias.node() : nullptr;
    std::vector<Tensor> parents{x, w};
    if (has_bias) parents.push_back(bias);
    Tensor t = make_op({b, co, h, wd}, std::move(v), parents, nullptr, &out);
    if (t.requires_grad()) {
        out->backprop = [out, px, pkw, pbias, b, ci, co, h, wd, kh, kw, ph, pw, xi, oi, wi]() {
            if (px->needs_grad) px->ensure_grad();
            if (pkw->needs_grad) pkw->ensure_grad();
            if (pbias && pbias->needs_grad) pbias->ensure_grad();
            for (int bb = 0; bb < b; ++bb)
                for (int o = 0; o < co; ++o) {
                    for (int i = 0; i < ci; ++i)
                        for (int dy = 0; dy < kh; ++dy)
                            for (int dx = 0; dx < kw; ++dx) {
                                const double wv = pkw->val[wi(o, i, dy, dx)];
                                double wg = 0.0;
                                for (int y = 0; y < h; ++y) {
                                    const int sy = y + dy - ph;
                                    if (sy < 0 || sy >= h) continue;
                                    const int x0 = std::max(0, pw - dx);
                                    const int x1 = std::min(wd, wd + pw - dx);
                                    const double* g = out->grad.data() + oi(bb, o, y, x0);
                                    const std::size_t sbase = xi(bb, i, sy, x0 + dx - pw);
                                    if (px->needs_grad) {
                                        double* xg = px->grad.data() + sbase;
                                        for (int xx = 0; xx < x1 - x0; ++xx) xg[xx] += wv * g[xx];
                                    }
                                    if (pkw->needs_grad) {
                                        const double* xs = px->val.data() + sbase;
                                        for (int xx = 0; xx < x1 - x0; ++xx) wg += xs[xx] * g[xx];
                                    }
                                }
                                if (pkw->needs_grad) pkw->grad[wi(o, i, dy, dx)] += wg;
                            }
                    if (pbias && pbias->needs_grad) {
                        const double* g = out->grad.data() + oi(bb, o, 0, 0);
                        double s = 0.0;
                        for (int i = 0; i < h * wd; ++i) s += g[i];
                        pbias->grad[o] += s;
                    }
                }
        };
    }
    return t;
}

Tensor avg_pool_w(const Tensor& x, int pw) {
    if (x.shape().size() != 4) throw std::invalid_argument("avg_pool_w: need (B,C,H,W)");
    if (pw <= 0) throw std::invalid_argument("avg_pool_w: bad pool width");
    const int b = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    const int wo = w / pw;
    if (wo < 1) throw std::invalid_argument("avg_pool_w: width too small for pooling");
    std::vector<double> v(static_cast<std::size_t>(b) * c * h * wo);
    const double inv = 1.0 / pw;
    std::size_t idx = 0;
    for (int bb = 0; bb < b; ++bb)
        for (int cc = 0; cc < c; ++cc)
            for (int y = 0; y < h; ++y) {
                const double* row =
                    x.data().data() + ((static_cast<std::size_t>(bb) * c + cc) * h + y) * w;
                for (int xo = 0; xo < wo; ++xo) {
                    double s = 0.0;
                    for (int k = 0; k < pw; ++k) s += row[xo * pw + k];
                    v[idx++] = s * inv;
                }
            }
    TensorNode* out = nullptr;
    auto px = x.node();
    Tensor t = make_op({b, c, h, wo}, std::move(v), {x}, nullptr, &out);
    if (t.requires_grad()) {
        out->backprop = [out, px, b, c, h, w, wo, pw, inv]() {
            px->ensure_grad();
            std::size_t idx = 0;
            for (int bb = 0; bb < b; ++bb)
                for (int cc = 0; cc < c; ++cc)
                    for (int y = 0; y < h; ++y) {
                        double* row = px->grad.data() +
                                      ((static_cast<std::size_t>(bb) * c + cc) * h + y) * w;
                        for (int xo = 0; xo < wo; ++xo) {
                            const double g = out->grad[idx++] * inv;
                            for (int k = 0; k < pw; ++k) row[xo * pw + k] += g;
                        }
                    }
        };
    }
    return t;
}

Tensor mean_over_w(const Tensor& x) {
    if (x.shape().size() != 4) throw std::invalid_argument("mean_over_w: need (B,C,T,F)");
    const int b = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    std::vector<double> v(static_cast<std::size_t>(b) * c * h);
    const double inv = 1.0 / w;
    for (std::size_t i = 0; i < v.size(); ++i) {
        const double* row = x.data().data() + i * w;
        double s = 0.0;
        for (int k = 0; k < w; ++k) s += row[k];
        v[i] = s * inv;
    }
    TensorNode* out = nullptr;
    auto px = x.node();
    Tensor t = make_op({b, c, h}, std::move(v), {x}, nullptr, &out);
    if (t.requires_grad()) {
        out->backprop = [out, px, w, inv]() {
            px->ensure_grad();
            for (std::size_t i = 0; i < out->grad.size(); ++i) {
                const double g = out->grad[i] * inv;
                double* row = px->grad.data() + i * w;
                for (int k = 0; k < w; ++k) row[k] += g;
            }
        };
    }
    return t;
}

Tensor attention_logits(const Tensor& xm, const Tensor& w, const Tensor& b) {
    if (xm.shape().size() != 3 || w.shape().size() != 2)
        throw std::invalid_argument("attention_logits: need (B,C,T) and (nb,C)");
    const int bb = xm.dim(0), c = xm.dim(1), t = xm.dim(2), nb = w.dim(0);
    if (w.dim(1) != c || b.shape().size() != 1 || b.dim(0) != nb)
        throw std::invalid_argument("attention_logits: shape mismatch");
    std::vector<double> v(static_cast<std::size_t>(bb) * nb * t);
    for (int i = 0; i < bb; ++i)
        for (int j = 0; j < nb; ++j)
            for (int k = 0; k < t; ++k) {
                double s = b.data()[j];
                for (int cc = 0; cc < c; ++cc)
                    s += w.data()[static_cast<std::size_t>(j) * c + cc] *
                         xm.data()[(static_cast<std::size_t>(i) * c + cc) * t + k];
                v[(static_cast<std::size_t>(i) * nb + j) * t + k] = s;
            }
    TensorNode* out = nullptr;
    auto pxm = xm.node(), pw = w.node(), pb = b.node();
    Tensor tt = make_op({bb, nb, t}, std::move(v), {xm, w, b}, nullptr, &out);
    if (tt.requires_grad()) {
        out->backprop = [out, pxm, pw, pb, bb, c, t, nb]() {
            if (pxm->needs_grad) pxm->ensure_grad();
            if (pw->needs_grad) pw->ensure_grad();
            if (pb->needs_grad) pb->ensure_grad();
            for (int i = 0; i < bb; ++i)
                for (int j = 0; j < nb; ++j)
                    for (int k = 0; k < t; ++k) {
                        const double g = out->grad[(static_cast<std::size_t>(i) * nb + j) * t + k];
                        if (g == 0.0) continue;
                        if (pb->needs_grad) pb->grad[j] += g;
                        for (int cc = 0; cc < c; ++cc) {
                            const std::size_t xid = (static_cast<std::size_t>(i) * c + cc) * t + k;
                            const std::size_t wid = static_cast<std::size_t>(j) * c + cc;
                            if (pxm->needs_grad) pxm->grad[xid] += g * pw->val[wid];
                            if (pw->needs_grad) pw->grad[wid] += g * pxm->val[xid];
                        }
                    }
        };
    }
    return tt;
}

Tensor softmax_channels(const Tensor& x) {
    if (x.shape().size() != 3) throw std::invalid_argument("softmax_channels: need (B,nb,T)");
    const int b = x.dim(0), nb = x.dim(1), t = x.dim(2);
    std::vector<double> v(x.numel());
    for (int i = 0; i < b; ++i)
        for (int k = 0; k < t; ++k) {
            double mx = -1e300;
            for (int j = 0; j < nb; ++j)
                mx = std::max(mx, x.data()[(static_cast<std::size_t>(i) * nb + j) * t + k]);
            double sum = 0.0;
            for (int j = 0; j < nb; ++j) {
                const std::size_t id = (static_cast<std::size_t>(i) * nb + j) * t + k;
                v[id] = std::exp(x.data()[id] - mx);
                sum += v[id];
            }
            for (int j = 0; j < nb; ++j) v[(static_cast<std::size_t>(i) * nb + j) * t + k] /= sum;
        }
    TensorNode* out = nullptr;
    auto px = x.node();
    Tensor tt = make_op(x.shape(), std::move(v), {x}, nullptr, &out);
    if (tt.requires_grad()) {
        out->backprop = [out, px, b, nb, t]() {
            px->ensure_grad();
            for (int i = 0; i < b; ++i)
                for (int k = 0; k < t; ++k) {
                    double dot = 0.0;
                    for (int j = 0; j < nb; ++j) {
                        const std::size_t id = (static_cast<std::size_t>(i) * nb + j) * t + k;
                        dot += out->val[id] * out->grad[id];
                    }
                    for (int j = 0; j < nb; ++j) {
                        const std::size_t id = (static_cast<std::size_t>(i) * nb + j) * t + k;
                        px->grad[id] += out->val[id] * (out->grad[id] - dot);
                    }
                }
        };
    }
    return tt;
}

Tensor dynamic_combine(const Tensor& y, const Tensor& alpha, const Tensor& bias,
                       int n_basis, int c_out) {
    if (y.shape().size() != 4 || alpha.shape().size() != 3)
        throw std::invalid_argument("dynamic_combine: need y(B,nb*Co,T,F), alpha(B,nb,T)");
    const int b = y.dim(0), t = y.dim(2), f = y.dim(3);
    if (y.dim(1) != n_basis * c_out || alpha.dim(0) != b || alpha.dim(1) != n_basis ||
        alpha.dim(2) != t)
        throw std::invalid_argument("dynamic_combine: shape mismatch");
    const bool has_bias = bias.defined();
    std::vector<double> v(static_cast<std::size_t>(b) * c_out * t * f, 0.0);
    const auto yi = [=](int bb, int j, int o, int tt, int ff) {
        return (((static_cast<std::size_t>(bb) * n_basis + j) * c_out + o) * t + tt) * f + ff;
    };
    const auto oi = [=](int bb, int o, int tt, int ff) {
        return ((static_cast<std::size_t>(bb) * c_out + o) * t + tt) * f + ff;
    };
    for (int bb = 0; bb < b; ++bb)
        for (int j = 0; j < n_basis; ++j)
            for (int o = 0; o < c_out; ++o)
                for (int tt = 0; tt < t; ++tt) {
                    const double a =
                        alpha.data()[(static_cast<std::size_t>(bb) * n_basis + j) * t + tt];
                    const double* src = y.data().data() + yi(bb, j, o, tt, 0);
                    double* dst = v.data() + oi(bb, o, tt, 0);
                    for (int ff = 0; ff < f; ++ff) dst[ff] += a * src[ff];
                }
    if (has_bias)
        for (int bb = 0; bb < b; ++bb)
            for (int o = 0; o < c_out; ++o) {
                const double bv = bias.data()[o];
                double* dst = v.data() + oi(bb, o, 0, 0);
                for (int i = 0; i < t * f; ++i) dst[i] += bv;
            }
    TensorNode* out = nullptr;
    auto py = y.node(), pa = alpha.node();
    auto pb = has_bias ? bias.node() : nullptr;
    std::vector<Tensor> parents{y, alpha};
    if (has_bias) parents.push_back(bias);
    Tensor tt2 = make_op({b, c_out, t, f}, std::move(v), parents, nullptr, &out);
    if (tt2.requires_grad()) {
        out->backprop = [out, py, pa, pb, b, t, f, n_basis, c_out, yi, oi]() {
            if (py->needs_grad) py->ensure_grad();
            if (pa->needs_grad) pa->ensure_grad();
            if (pb && pb->needs_grad) pb->ensure_grad();
            for (int bb = 0; bb < b; ++bb)
                for (int j = 0; j < n_basis; ++j)
                    for (int o = 0; o < c_out; ++o)
                        for (int tt = 0; tt < t; ++tt) {
                            const std::size_t aid =
                                (static_cast<std::size_t>(bb) * n_basis + j) * t + tt;
                            const double a = pa->val[aid];
                            const double* g = out->grad.data() + oi(bb, o, tt, 0);
                            if (py->needs_grad) {
                                double* yg = py->grad.data() + yi(bb, j, o, tt, 0);
                                for (int ff = 0; ff < f; ++ff) yg[ff] += a * g[ff];
                            }
                            if (pa->needs_grad) {
                                const double* yv = py->val.data() + yi(bb, j, o, tt, 0);
                                double s = 0.0;
                                for (int ff = 0; ff < f; ++ff) s += yv[ff] * g[ff];
                                pa->grad[aid] += s;
                            }
                        }
            if (pb && pb->needs_grad)
                for (int bb = 0; bb < b; ++bb)
                    for (int o = 0; o < c_out; ++o) {
                        const double* g = out->grad.data() + oi(bb, o, 0, 0);
                        double s = 0.0;
                        for (int i = 0; i < t * f; ++i) s += g[i];
                        pb->grad[o] += s;
                    }
        };
    }
    return tt2;
}

// ---------------------------------------------------------------------------
// normalization
// ---------------------------------------------------------------------------

Tensor batch_norm_train(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                        double eps, std::vector<double>* batch_mean,
                        std::vector<double>* batch_var) {
    if (x.shape().size() != 4) throw std::invalid_argument("batch_norm: need (B,C,T,F)");
    const int b = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    const std::size_t m = static_cast<std::size_t>(b) * h * w;
    std::vector<double> mu(c, 0.0), var(c, 0.0);
    for (int cc = 0; cc < c; ++cc) {
        double s = 0.0;
        for (int bb = 0; bb < b; ++bb) {
            const double* p =
                x.data().data() + (static_cast<std::size_t>(bb) * c + cc) * h * w;
            for (std::size_t i = 0; i < static_cast<std::size_t>(h) * w; ++i) s += p[i];
        }
        mu[cc] = s / static_cast<double>(m);
        double s2 = 0.0;
        for (int bb = 0; bb < b; ++bb) {
            const double* p =
                x.data().data() + (static_cast<std::size_t>(bb) * c + cc) * h * w;
            for (std::size_t i = 0; i < static_cast<std::size_t>(h) * w; ++i) {
                const double d = p[i] - mu[cc];
                s2 += d * d;
            }
        }
        var[cc] = s2 / static_cast<double>(m);
    }
    if (batch_mean) *batch_mean = mu;
    if (batch_var) *batch_var = var;

    std::vector<double> v(x.numel());
    std::vector<double> inv_std(c);
    for (int cc = 0; cc < c; ++cc) inv_std[cc] = 1.0 / std::sqrt(var[cc] + eps);
    for (int bb = 0; bb < b; ++bb)
        for (int cc = 0; cc < c; ++cc) {
            const std::size_t base = (static_cast<std::size_t>(bb) * c + cc) * h * w;
            const double g = gamma.data()[cc], bt = beta.data()[cc];
            for (std::size_t i = 0; i < static_cast<std::size_t>(h) * w; ++i)
                v[base + i] = g * (x.data()[base + i] - mu[cc]) * inv_std[cc] + bt;
        }
    TensorNode* out = nullptr;
    auto px = x.node(), pg = gamma.node(), pbt = beta.node();
    Tensor t = make_op(x.shape(), std::move(v), {x, gamma, beta}, nullptr, &out);
    if (t.requires_grad()) {
        out->backprop = [out, px, pg, pbt, b, c, h, w, m, mu, inv_std]() {
            if (px->needs_grad) px->ensure_grad();
            if (pg->needs_grad) pg->ensure_grad();
            if (pbt->needs_grad) pbt->ensure_grad();
            const std::size_t hw = static_cast<std::size_t>(h) * w;
            for (int cc = 0; cc < c; ++cc) {
                double sum_g = 0.0, sum_gx = 0.0;
                for (int bb = 0; bb < b; ++bb) {
                    const std::size_t base = (static_cast<std::size_t>(bb) * c + cc) * hw;
                    for (std::size_t i = 0; i < hw; ++i) {
                        const double xh = (px->val[base + i] - mu[cc]) * inv_std[cc];
                        sum_g += out->grad[base + i];
                        sum_gx += out->grad[base + i] * xh;
                    }
                }
                if (pg->needs_grad) pg->grad[cc] += sum_gx;
                if (pbt->needs_grad) pbt->grad[cc] += sum_g;
                if (px->needs_grad) {
                    const double gval = pg->val[cc];
                    const double inv_m = 1.0 / static_cast<double>(m);
                    for (int bb = 0; bb < b; ++bb) {
                        const std::size_t base = (static_cast<std::size_t>(bb) * c + cc) * hw;
                        for (std::size_t i = 0; i < hw; ++i) {
                            const double xh = (px->val[base + i] - mu[cc]) * inv_std[cc];
                            const double dxh = out->grad[base + i] * gval;
                            px->grad[base + i] +=
                                inv_std[cc] *
                                (dxh - gval * inv_m * (sum_g + xh * sum_gx));
                        }
                    }
                }
            }
        };
    }
    return t;
}

Tensor batch_norm_eval(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                       const std::vector<double>& mean, const std::vector<double>& var,
                       double eps) {
    if (x.shape().size() != 4) throw std::invalid_argument("batch_norm: need (B,C,T,F)");
    const int b = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    std::vector<double> inv_std(c);
    for (int cc = 0; cc < c; ++cc) inv_std[cc] = 1.0 / std::sqrt(var[cc] + eps);
    std::vector<double> v(x.numel());
    const std::size_t hw = static_cast<std::size_t>(h) * w;
    for (int bb = 0; bb < b; ++bb)
        for (int cc = 0; cc < c; ++cc) {
            const std::size_t base = (static_cast<std::size_t>(bb) * c + cc) * hw;
            const double g = gamma.data()[cc], bt = beta.data()[cc];
            for (std::size_t i = 0; i < hw; ++i)
                v[base + i] = g * (x.data()[base + i] - mean[cc]) * inv_std[cc] + bt;
        }
    TensorNode* out = nullptr;
    auto px = x.node(), pg = gamma.node(), pbt = beta.node();
    Tensor t = make_op(x.shape(), std::move(v), {x, gamma, beta}, nullptr, &out);
    if (t.requires_grad()) {
        out->backprop = [out, px, pg, pbt, b, c, hw, mean, inv_std]() {
            if (px->needs_grad) px->ensure_grad();
            if (pg->needs_grad) pg->ensure_grad();
            if (pbt->needs_grad) pbt->ensure_grad();
            for (int bb = 0; bb < b; ++bb)
                for (int cc = 0; cc < c; ++cc) {
                    const std::size_t base = (static_cast<std::size_t>(bb) * c + cc) * hw;
                    for (std::size_t i = 0; i < hw; ++i) {
                        const double g = out->grad[base + i];
                        if (g == 0.0) continue;
                        const double xh = (px->val[base + i] - mean[cc]) * inv_std[cc];
                        if (px->needs_grad) px->grad[base + i] += g * pg->val[cc] * inv_std[cc];
                        if (pg->needs_grad) pg->grad[cc] += g * xh;
                        if (pbt->needs_grad) pbt->grad[cc] += g;
                    }
                }
        };
    }
    return t;
}

Tensor layer_norm_rows(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
    if (x.shape().size() != 2) throw std::invalid_argument("layer_norm_rows: need (N,F)");
    const int n = x.dim(0), f = x.dim(1);
    if (gamma.dim(0) != f || beta.dim(0) != f)
        throw std::invalid_argument("layer_norm_rows: affine shape mismatch");
    std::vector<double> v(x.numel()), mu(n), inv_std(n);
    for (int r = 0; r < n; ++r) {
        const double* xr = x.data().data() + static_cast<std::size_t>(r) * f;
        double s = 0.0;
        for (int j = 0; j < f; ++j) s += xr[j];
        mu[r] = s / f;
        double s2 = 0.0;
        for (int j = 0; j < f; ++j) {
            const double d = xr[j] - mu[r];
            s2 += d * d;
        }
        inv_std[r] = 1.0 / std::sqrt(s2 / f + eps);
        double* vr = v.data() + static_cast<std::size_t>(r) * f;
        for (int j = 0; j < f; ++j)
            vr[j] = gamma.data()[j] * (xr[j] - mu[r]) * inv_std[r] + beta.data()[j];
    }
    TensorNode* out = nullptr;
    auto px = x.node(), pg = gamma.node(), pb = beta.node();
    Tensor t = make_op(x.shape(), std::move(v), {x, gamma, beta}, nullptr, &out);
    if (t.requires_grad()) {
        out->backprop = [out, px, pg, pb, n, f, mu, inv_std]() {
            if (px->needs_grad) px->ensure_grad();
            if (pg->needs_grad) pg->ensure_grad();
            if (pb->needs_grad) pb->ensure_grad();
            for (int r = 0; r < n; ++r) {
                const std::size_t base = static_cast<std::size_t>(r) * f;
                double sum_dxh = 0.0, sum_dxh_xh = 0.0;
                for (int j = 0; j < f; ++j) {
                    const double xh = (px->val[base + j] - mu[r]) * inv_std[r];
                    const double g = out->grad[base + j];
                    if (pg->needs_grad) pg->grad[j] += g * xh;
                    if (pb->needs_grad) pb->grad[j] += g;
                    const double dxh = g * pg->val[j];
                    sum_dxh += dxh;
                    sum_dxh_xh += dxh * xh;
                }
                if (px->needs_grad) {
                    for (int j = 0; j < f; ++j) {
                        const double xh = (px->val[base + j] - mu[r]) * inv_std[r];
                        const double dxh = out->grad[base + j] * pg->val[j];
                        px->grad[base + j] +=
                            inv_std[r] * (dxh - (sum_dxh + xh * sum_dxh_xh) / f);
                    }
                }
            }
        };
    }
    return t;
}

// ---------------------------------------------------------------------------
// graph message passing
// ---------------------------------------------------------------------------

Tensor segment_softmax(const Tensor& scores, const std::vector<int>& seg_offsets) {
    const int e = static_cast<int>(scores.numel());
    if (seg_offsets.empty() || seg_offsets.front() != 0 || seg_offsets.back() != e)
        throw std::invalid_argument("segment_softmax: bad segment offsets");
    std::vector<double> v(scores.numel());
    for (std::size_t s = 0; s + 1 < seg_offsets.size(); ++s) {
        const int lo = seg_offsets[s], hi = seg_offsets[s + 1];
        if (hi <= lo) continue;
        double mx = scores.data()[lo];
        for (int i = lo + 1; i < hi; ++i) mx = std::max(mx, scores.data()[i]);
        double sum = 0.0;
        for (int i = lo; i < hi; ++i) {
            v[i] = std::exp(scores.data()[i] - mx);
            sum += v[i];
        }
        for (int i = lo; i < hi; ++i) v[i] /= sum;
    }
    TensorNode* out = nullptr;
    auto ps = scores.node();
    Tensor t = make_op(scores.shape(), std::move(v), {scores}, nullptr, &out);
    if (t.requires_grad()) {
        out->backprop = [out, ps, seg_offsets]() {
            ps->ensure_grad();
            for (std::size_t s = 0; s + 1 < seg_offsets.size(); ++s) {
                const int lo = seg_offsets[s], hi = seg_offsets[s + 1];
                double dot = 0.0;
                for (int i = lo; i < hi; ++i) dot += out->val[i] * out->grad[i];
                for (int i = lo; i < hi; ++i)
                    ps->grad[i] += out->val[i] * (out->grad[i] - dot);
            }
        };
    }
    return t;
}

Tensor scatter_weighted_rows(const Tensor& alpha, const Tensor& h,
                             const std::vector<int>& src, const std::vector<int>& dst,
                             int n_out) {
    if (h.shape().size() != 2) throw std::invalid_argument("scatter_weighted_rows: need (N,F)");
    const int f = h.dim(1);
    const std::size_t e = src.size();
    if (alpha.numel() != e || dst.size() != e)
        throw std::invalid_argument("scatter_weighted_rows: edge count mismatch");
    std::vector<double> v(static_cast<std::size_t>(n_out) * f, 0.0);
    for (std::size_t k = 0; k < e; ++k) {
        const double a = alpha.data()[k];
        const double* hr = h.data().data() + static_cast<std::size_t>(src[k]) * f;
        double* vr = v.data() + static_cast<std::size_t>(dst[k]) * f;
        for (int j = 0; j < f; ++j) vr[j] += a * hr[j];
    }
    TensorNode* out = nullptr;
    auto pa = alpha.node(), ph = h.node();
    Tensor t = make_op({n_out, f}, std::move(v), {alpha, h}, nullptr, &out);
    if (t.requires_grad()) {
        out->backprop = [out, pa, ph, src, dst, f]() {
            if (pa->needs_grad) pa->ensure_grad();
            if (ph->needs_grad) ph->ensure_grad();
            for (std::size_t k = 0; k < src.size(); ++k) {
                const double* g = out->grad.data() + static_cast<std::size_t>(dst[k]) * f;
                const double* hr = ph->val.data() + static_cast<std::size_t>(src[k]) * f;
                if (pa->needs_grad) {
                    double s = 0.0;
                    for (int j = 0; j < f; ++j) s += g[j] * hr[j];
                    pa->grad[k] += s;
                }
                if (ph->needs_grad) {
                    const double a = pa->val[k];
                    double* hg = ph->grad.data() + static_cast<std::size_t>(src[k]) * f;
                    for (int j = 0; j < f; ++j) hg[j] += a * g[j];
                }
            }
        };
    }
    return t;
}

// ---------------------------------------------------------------------------
// sequence smoothing
// ---------------------------------------------------------------------------

Tensor conv1d_segments_replicate(const Tensor& x, const Tensor& kernel,
                                 const std::vector<int>& seg_offsets) {
    if (x.shape().size() != 2 || kernel.shape().size() != 2)
        throw std::invalid_argument("conv1d_segments: need x(N,C), kernel(C,K)");
    const int n = x.dim(0), c = x.dim(1), k = kernel.dim(1);
    if (kernel.dim(0) != c) throw std::invalid_argument("conv1d_segments: channel mismatch");
    if (k % 2 == 0) throw std::invalid_argument("conv1d_segments: kernel must be odd");
    if (seg_offsets.empty() || seg_offsets.front() != 0 || seg_offsets.back() != n)
        throw std::invalid_argument("conv1d_segments: bad segment offsets");
    const int r = k / 2;
    std::vector<double> v(x.numel(), 0.0);
    for (std::size_t s = 0; s + 1 < seg_offsets.size(); ++s) {
        const int lo = seg_offsets[s], hi = seg_offsets[s + 1];
        for (int t = lo; t < hi; ++t)
            for (int cc = 0; cc < c; ++cc) {
                double acc = 0.0;
                for (int j = 0; j < k; ++j) {
                    int src = std::clamp(t + j - r, lo, hi - 1);
                    acc += kernel.data()[static_cast<std::size_t>(cc) * k + j] *
                           x.data()[static_cast<std::size_t>(src) * c + cc];
                }
                v[static_cast<std::size_t>(t) * c + cc] = acc;
            }
    }
    TensorNode* out = nullptr;
    auto px = x.node(), pk = kernel.node();
    Tensor t = make_op(x.shape(), std::move(v), {x, kernel}, nullptr, &out);
    if (t.requires_grad()) {
        out->backprop = [out, px, pk, seg_offsets, c, k, r]() {
            if (px->needs_grad) px->ensure_grad();
            if (pk->needs_grad) pk->ensure_grad();
            for (std::size_t s = 0; s + 1 < seg_offsets.size(); ++s) {
                const int lo = seg_offsets[s], hi = seg_offsets[s + 1];
                for (int t = lo; t < hi; ++t)
                    for (int cc = 0; cc < c; ++cc) {
                        const double g = out->grad[static_cast<std::size_t>(t) * c + cc];
                        if (g == 0.0) continue;
                        for (int j = 0; j < k; ++j) {
                            int src = std::clamp(t + j - r, lo, hi - 1);
                            if (px->needs_grad)
                                px->grad[static_cast<std::size_t>(src) * c + cc] +=
                                    g * pk->val[static_cast<std::size_t>(cc) * k + j];
                            if (pk->needs_grad)
                                pk->grad[static_cast<std::size_t>(cc) * k + j] +=
                                    g * px->val[static_cast<std::size_t>(src) * c + cc];
                        }
                    }
            }
        };
    }
    return t;
}

// ---------------------------------------------------------------------------
// losses / interval math
// ---------------------------------------------------------------------------

Tensor bce_with_logits_mean(const Tensor& logits, const std::vector<double>& targets) {
    const std::size_t n = logits.numel();
    if (targets.size() != n) throw std::invalid_argument("bce: target size mismatch");
    if (n == 0) return Tensor::scalar(0.0);
    double loss = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double p = logits.data()[i], t = targets[i];
        loss += std::max(p, 0.0) - p * t + std::log1p(std::exp(-std::abs(p)));
    }
    loss /= static_cast<double>(n);
    TensorNode* out = nullptr;
    auto pl = logits.node();
    Tensor t = make_op({1}, {loss}, {logits}, nullptr, &out);
    if (t.requires_grad()) {
        out->backprop = [out, pl, targets, n]() {
            pl->ensure_grad();
            const double g = out->grad[0] / static_cast<double>(n);
            for (std::size_t i = 0; i < n; ++i) {
                const double p = pl->val[i];
                const double s = p >= 0.0 ? 1.0 / (1.0 + std::exp(-p))
                                          : std::exp(p) / (1.0 + std::exp(p));
                pl->grad[i] += g * (s - targets[i]);
            }
        };
    }
    return t;
}

Tensor cross_entropy_masked_mean(const Tensor& logits, const std::vector<int>& labels,
                                 int ignore_label) {
    if (logits.shape().size() != 2) throw std::invalid_argument("ce: need (N,C)");
    const int n = logits.dim(0), c = logits.dim(1);
    if (static_cast<int>(labels.size()) != n)
        throw std::invalid_argument("ce: label count mismatch");
    std::vector<int> fg;
    for (int i = 0; i < n; ++i)
        if (labels[i] != ignore_label) {
            if (labels[i] < 0 || labels[i] >= c) throw std::out_of_range("ce: bad label");
            fg.push_back(i);
        }
    if (fg.empty()) return Tensor::scalar(0.0);
    double loss = 0.0;
    for (int i : fg) {
        const double* row = logits.data().data() + static_cast<std::size_t>(i) * c;
        double mx = row[0];
        for (int j = 1; j < c; ++j) mx = std::max(mx, row[j]);
        double sum = 0.0;
        for (int j = 0; j < c; ++j) sum += std::exp(row[j] - mx);
        loss += -(row[labels[i]] - mx - std::log(sum));
    }
    loss /= static_cast<double>(fg.size());
    TensorNode* out = nullptr;
    auto pl = logits.node();
    Tensor t = make_op({1}, {loss}, {logits}, nullptr, &out);
    if (t.requires_grad()) {
        out->backprop = [out, pl, labels, fg, c]() {
            pl->ensure_grad();
            const double g = out->grad[0] / static_cast<double>(fg.size());
            for (int i : fg) {
                const double* row = pl->val.data() + static_cast<std::size_t>(i) * c;
                double mx = row[0];
                for (int j = 1; j < c; ++j) mx = std::max(mx, row[j]);
                double sum = 0.0;
                for (int j = 0; j < c; ++j) sum += std::exp(row[j] - mx);
                double* gr = pl->grad.data() + static_cast<std::size_t>(i) * c;
                for (int j = 0; j < c; ++j) {
                    const double soft = std::exp(row[j] - mx) / sum;
                    gr[j] += g * (soft - (j == labels[i] ? 1.0 : 0.0));
                }
            }
        };
    }
    return t;
}

Tensor neg_log_iou_mean(const Tensor& pred, const std::vector<double>& target,
                        IouMode mode, double floor) {
    if (pred.shape().size() != 2 || pred.dim(1) != 2)
        throw std::invalid_argument("neg_log_iou: pred must be (M,2)");
    const int m = pred.dim(0);
    if (target.size() != static_cast<std::size_t>(m) * 2)
        throw std::invalid_argument("neg_log_iou: target size mismatch");
    if (m == 0) return Tensor::scalar(0.0);

    // Forward values plus per-row d(iou)/d(ps), d(iou)/d(pe) for the backward pass.
    std::vector<double> dps(m, 0.0), dpe(m, 0.0), ious(m, 0.0);
    double loss = 0.0;
    for (int i = 0; i < m; ++i) {
        const double ps = pred.data()[static_cast<std::size_t>(i) * 2];
        const double pe = pred.data()[static_cast<std::size_t>(i) * 2 + 1];
        const double ts = target[static_cast<std::size_t>(i) * 2];
        const double te = target[static_cast<std::size_t>(i) * 2 + 1];
        double iou = 0.0, dio_ps = 0.0, dio_pe = 0.0;
        const double inter = std::min(pe, te) - std::max(ps, ts);
        if (mode == IouMode::Union) {
            if (inter > 0.0) {
                const double uni = (pe - ps) + (te - ts) - inter;
                iou = inter / uni;
                const double di_ps = (ps > ts) ? -1.0 : 0.0;
                const double di_pe = (pe < te) ? 1.0 : 0.0;
                const double du_ps = -1.0 - di_ps;
                const double du_pe = 1.0 - di_pe;
                dio_ps = (di_ps * uni - inter * du_ps) / (uni * uni);
                dio_pe = (di_pe * uni - inter * du_pe) / (uni * uni);
            }
        } else {
            const double span = std::max(pe, te) - std::min(ps, ts);
            if (inter > 0.0 && span > 0.0) {
                iou = inter / span;
                const double di_ps = (ps > ts) ? -1.0 : 0.0;
                const double di_pe = (pe < te) ? 1.0 : 0.0;
                const double dsp_ps = (ps < ts) ? -1.0 : 0.0;
                const double dsp_pe = (pe > te) ? 1.0 : 0.0;
                dio_ps = (di_ps * span - inter * dsp_ps) / (span * span);
                dio_pe = (di_pe * span - inter * dsp_pe) / (span * span);
                if (iou > 1.0) { iou = 1.0; dio_ps = dio_pe = 0.0; }
            }
        }
        if (iou < floor) {
            iou = floor;
            dio_ps = dio_pe = 0.0;
        }
        ious[i] = iou;
        dps[i] = dio_ps;
        dpe[i] = dio_pe;
        loss += -std::log(iou);
    }
    loss /= static_cast<double>(m);
    TensorNode* out = nullptr;
    auto pp = pred.node();
    Tensor t = make_op({1}, {loss}, {pred}, nullptr, &out);
    if (t.requires_grad()) {
        out->backprop = [out, pp, dps, dpe, ious, m]() {
            pp->ensure_grad();
            const double g = out->grad[0] / static_cast<double>(m);
            for (int i = 0; i < m; ++i) {
                const double scale = -g / ious[i];
                pp->grad[static_cast<std::size_t>(i) * 2] += scale * dps[i];
                pp->grad[static_cast<std::size_t>(i) * 2 + 1] += scale * dpe[i];
            }
        };
    }
    return t;
}

Tensor refine_intervals(const Tensor& delta_s, const Tensor& delta_e,
                        const std::vector<double>& anchor_start,
                        const std::vector<double>& anchor_end,
                        const std::vector<double>& clip_len) {
    const int m = static_cast<int>(anchor_start.size());
    if (static_cast<int>(delta_s.numel()) != m || static_cast<int>(delta_e.numel()) != m ||
        static_cast<int>(anchor_end.size()) != m || static_cast<int>(clip_len.size()) != m)
        throw std::invalid_argument("refine_intervals: size mismatch");
    std::vector<double> v(static_cast<std::size_t>(m) * 2);
    // Jacobian entries of (start,end) w.r.t. (ds,de): [dsd_s, dsd_e; ded_s, ded_e]
    std::vector<double> j_ss(m), j_se(m), j_es(m), j_ee(m);
    for (int i = 0; i < m; ++i) {
        const double l = clip_len[i];
        const double s0 = anchor_start[i] + delta_s.data()[i];
        const double e0 = anchor_end[i] + delta_e.data()[i];
        const double s1 = std::clamp(s0, 0.0, l);
        const double e1 = std::clamp(e0, 0.0, l);
        const double gs = (s0 > 0.0 && s0 < l) ? 1.0 : 0.0;
        const double ge = (e0 > 0.0 && e0 < l) ? 1.0 : 0.0;
        if (e1 < s1) {
            const double mid = 0.5 * (s1 + e1);
            v[static_cast<std::size_t>(i) * 2] = mid;
            v[static_cast<std::size_t>(i) * 2 + 1] = mid;
            j_ss[i] = 0.5 * gs;
            j_se[i] = 0.5 * ge;
            j_es[i] = 0.5 * gs;
            j_ee[i] = 0.5 * ge;
        } else {
            v[static_cast<std::size_t>(i) * 2] = s1;
            v[static_cast<std::size_t>(i) * 2 + 1] = e1;
            j_ss[i] = gs;
            j_se[i] = 0.0;
            j_es[i] = 0.0;
            j_ee[i] = ge;
        }
    }
    TensorNode* out = nullptr;
    auto pds = delta_s.node(), pde = delta_e.node();
    Tensor t = make_op({m, 2}, std::move(v), {delta_s, delta_e}, nullptr, &out);
    if (t.requires_grad()) {
        out->backprop = [out, pds, pde, j_ss, j_se, j_es, j_ee, m]() {
            if (pds->needs_grad) pds->ensure_grad();
            if (pde->needs_grad) pde->ensure_grad();
            for (int i = 0; i < m; ++i) {
                const double gs = out->grad[static_cast<std::size_t>(i) * 2];
                const double ge = out->grad[static_cast<std::size_t>(i) * 2 + 1];
                if (pds->needs_grad) pds->grad[i] += gs * j_ss[i] + ge * j_es[i];
                if (pde->needs_grad) pde->grad[i] += gs * j_se[i] + ge * j_ee[i];
            }
        };
    }
    return t;
}

} // namespace rsed::ad
