#pragma once

#include "fashionrag/rng.hpp"
#include "fashionrag/tensor.hpp"

#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace fashionrag {

uint64_t fnv1a_bytes(const void* data, size_t n, uint64_t h = 1469598103934665603ULL);

// Named parameter registry. Hierarchical dot-separated names; a parameter's
// trainability is its node's requires_grad flag, so freezing a prefix is
// enough to keep gradients out of that submodel entirely.
class ParamStore {
public:
    // Creates if absent (Gaussian init), returns the shared handle otherwise.
    Tensor gaussian(const std::string& name, const Shape& shape, Rng& rng, double stddev);
    Tensor zeros(const std::string& name, const Shape& shape);
    Tensor constant(const std::string& name, const Shape& shape, double v);

    bool has(const std::string& name) const { return params_.count(name) != 0; }
    Tensor get(const std::string& name) const;
    std::vector<std::string> names() const;                    // sorted
    std::vector<std::string> names_with_prefix(const std::string& prefix) const;

    void set_trainable(const std::string& prefix, bool trainable);
    bool trainable(const std::string& name) const { return get(name).requires_grad(); }
    void zero_grads();

    size_t count() const { return params_.size(); }
    int64_t total_numel() const;
    int64_t trainable_numel() const;

    // Content hash over (sorted name, raw f64 bytes); prefix "" covers everything.
    uint64_t content_hash(const std::string& prefix = "") const;

    // Overwrites values in place so existing module handles observe the load.
    void set_values(const std::string& name, const std::vector<double>& values);

    // In-place shape + value replacement (input-projection widening). The
    // node is mutated so live module handles see the new weight.
    void reshape_param(const std::string& name, const Shape& shape, std::vector<double> values);

    const std::map<std::string, Tensor>& entries() const { return params_; }

private:
    std::map<std::string, Tensor> params_;
    Tensor insert(const std::string& name, Tensor t);
};

struct LinearLayer {
    Tensor w;  // [out, in]
    Tensor b;  // [out]
    static LinearLayer create(ParamStore& ps, const std::string& name, int in, int out, Rng& rng);
    static LinearLayer create_zero(ParamStore& ps, const std::string& name, int in, int out);
    Tensor forward(const Tensor& x) const { return linear(x, w, b); }
};

struct LayerNormLayer {
    Tensor gamma, beta;
    static LayerNormLayer create(ParamStore& ps, const std::string& name, int dim);
    Tensor forward(const Tensor& x) const { return layernorm(x, gamma, beta); }
};

struct GroupNormLayer {
    int groups = 1;
    Tensor gamma, beta;
    static GroupNormLayer create(ParamStore& ps, const std::string& name, int channels, int groups);
    Tensor forward(const Tensor& x) const { return groupnorm(x, groups, gamma, beta); }
};

struct Conv2dLayer {
    int stride = 1, pad = 0;
    Tensor w;  // [Cout, Cin, kh, kw]
    Tensor b;  // [Cout]
    static Conv2dLayer create(ParamStore& ps, const std::string& name, int cin, int cout,
                              int k, int stride, int pad, Rng& rng);
    static Conv2dLayer create_zero(ParamStore& ps, const std::string& name, int cin, int cout,
                                   int k, int stride, int pad);
    Tensor forward(const Tensor& x) const { return conv2d(x, w, b, stride, pad); }
};

// Filled by attention layers when a probe is attached: one entry per
// (head, query) row holding the softmax row sum. Lets tests confirm the
// probability rows are normalized at every layer.
struct AttnProbe {
    std::vector<double> row_sums;
};

struct MultiheadAttention {
    int heads = 1;
    LinearLayer q, k, v, out;
    AttnProbe* probe = nullptr;

    // kv_dim: width of the key/value source sequence (equals dim for self-attention).
    static MultiheadAttention create(ParamStore& ps, const std::string& name, int dim, int heads,
                                     int kv_dim, Rng& rng);
    // x: [Tq, dim], kv: [Tkv, kv_dim]; keep masks key positions (0 = dropped).
    Tensor forward(const Tensor& x, const Tensor& kv, const std::vector<uint8_t>* keep = nullptr,
                   bool causal = false) const;
};

// Pre-norm self-attention + MLP block (GELU).
struct TransformerBlock {
    LayerNormLayer ln1, ln2;
    MultiheadAttention attn;
    LinearLayer fc1, fc2;
    static TransformerBlock create(ParamStore& ps, const std::string& name, int dim, int heads,
                                   int mlp_hidden, Rng& rng);
    Tensor forward(const Tensor& x, const std::vector<uint8_t>* keep = nullptr, bool causal = false) const;
};

// AdamW over the trainable entries of a ParamStore. Parameters whose grad
// buffer was never touched in the step are skipped (matches the convention
// that untouched parameters do not decay either).
struct AdamW {
    double lr = 1e-5;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.01;
    int64_t step_count = 0;
    std::map<std::string, std::vector<double>> m, v;

    void step(ParamStore& ps);
    void reset() { step_count = 0; m.clear(); v.clear(); }
};

// Standard sinusoidal embedding of a scalar step index; dim must be even.
std::vector<double> sinusoidal_time_embedding(double t, int dim);

}  // namespace fashionrag
