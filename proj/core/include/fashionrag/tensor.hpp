#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

namespace fashionrag {

using Shape = std::vector<int>;

int64_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

struct TensorNode {
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad;  // empty until first accumulation
    bool requires_grad = false;  // true if this node is (or depends on) a trainable leaf
    std::vector<std::shared_ptr<TensorNode>> parents;
    std::function<void(TensorNode&)> backward_fn;

    void ensure_grad() {
        if (grad.empty()) grad.assign(value.size(), 0.0);
    }
};

// Value-semantic handle over a graph node. Ops build a reverse-mode tape;
// nodes that do not depend on a trainable leaf are constants and carry no
// tape entry, so frozen submodels never receive or hold gradients.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::shared_ptr<TensorNode> n) : node_(std::move(n)) {}

    static Tensor zeros(const Shape& shape, bool requires_grad = false);
    static Tensor full(const Shape& shape, double v);
    static Tensor from_vector(const Shape& shape, std::vector<double> data, bool requires_grad = false);

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    int64_t numel() const { return static_cast<int64_t>(node_->value.size()); }
    int dim(int i) const { return node_->shape[static_cast<size_t>(i)]; }
    int ndim() const { return static_cast<int>(node_->shape.size()); }

    double* data() { return node_->value.data(); }
    const double* data() const { return node_->value.data(); }
    std::vector<double>& values() { return node_->value; }
    const std::vector<double>& values() const { return node_->value; }

    double item() const;

    bool requires_grad() const { return node_->requires_grad; }
    // Gradient of a leaf after backward(); zeros if nothing was accumulated.
    std::vector<double> grad_or_zeros() const;
    const std::vector<double>& raw_grad() const { return node_->grad; }
    void zero_grad() { node_->grad.clear(); }

    // Reverse-mode sweep from a scalar node.
    void backward();

    std::shared_ptr<TensorNode>& node() { return node_; }
    const std::shared_ptr<TensorNode>& node() const { return node_; }

private:
    std::shared_ptr<TensorNode> node_;
};

// Disables tape construction in scope (inference / data preparation).
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool prev_;
};

bool grad_enabled();

// ---- elementwise ----
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double c);
Tensor add_scalar(const Tensor& a, double c);
Tensor silu(const Tensor& x);
Tensor gelu(const Tensor& x);

// ---- shape ----
Tensor reshape(const Tensor& x, const Shape& shape);
Tensor transpose2(const Tensor& x);                       // [M,N] -> [N,M]
Tensor slice_rows(const Tensor& x, int start, int len);   // first dim of [T,D]
Tensor concat_rows(const std::vector<Tensor>& parts);     // along first dim of [Ti,D]
Tensor concat_channels(const std::vector<Tensor>& parts); // along C of [Ci,H,W]
Tensor slice_channels(const Tensor& x, int start, int len);
Tensor split_heads(const Tensor& x, int heads);           // [T,H*Dh] -> [H,T,Dh]
Tensor merge_heads(const Tensor& x);                      // [H,T,Dh] -> [T,H*Dh]

// ---- matmul ----
Tensor matmul(const Tensor& a, const Tensor& b);          // [M,K]x[K,N]
Tensor bmm(const Tensor& a, const Tensor& b);             // [B,M,K]x[B,K,N]
Tensor bmm_nt(const Tensor& a, const Tensor& b);          // [B,M,K]x[B,N,K] -> [B,M,N]
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);  // x[T,in], w[out,in], b[out] -> [T,out]
Tensor linear_nobias(const Tensor& x, const Tensor& w);

// ---- broadcasting adds ----
Tensor add_bias(const Tensor& x, const Tensor& b);          // x rows [..,D] + b[D]
Tensor add_channel_bias(const Tensor& x, const Tensor& b);  // x[C,H,W] + b[C]

// ---- normalization / attention ----
Tensor layernorm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);
Tensor groupnorm(const Tensor& x, int groups, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);
// Softmax over the last dim. keep[k]==0 forces probability exactly 0.
// causal applies within the trailing [Tq,K] block (row q attends to k<=q).
Tensor softmax_lastdim(const Tensor& x, const std::vector<uint8_t>* keep = nullptr, bool causal = false);

// ---- spatial ----
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride = 1, int pad = 0);
Tensor upsample_nearest2(const Tensor& x);

// ---- reductions ----
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
Tensor mse_loss(const Tensor& pred, const Tensor& target);

}  // namespace fashionrag
