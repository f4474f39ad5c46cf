#include "fashionrag/nn.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <stdexcept>

namespace fashionrag {

uint64_t fnv1a_bytes(const void* data, size_t n, uint64_t h) {
    const auto* p = static_cast<const uint8_t*>(data);
    for (size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 1099511628211ULL;
    }
    return h;
}

Tensor ParamStore::insert(const std::string& name, Tensor t) {
    auto it = params_.find(name);
    if (it != params_.end()) return it->second;
    params_.emplace(name, t);
    return t;
}

Tensor ParamStore::gaussian(const std::string& name, const Shape& shape, Rng& rng, double stddev) {
    auto it = params_.find(name);
    if (it != params_.end()) return it->second;
    Tensor t = Tensor::zeros(shape, true);
    for (auto& x : t.values()) x = rng.normal(0.0, stddev);
    return insert(name, t);
}

Tensor ParamStore::zeros(const std::string& name, const Shape& shape) {
    auto it = params_.find(name);
    if (it != params_.end()) return it->second;
    return insert(name, Tensor::zeros(shape, true));
}

Tensor ParamStore::constant(const std::string& name, const Shape& shape, double v) {
    auto it = params_.find(name);
    if (it != params_.end()) return it->second;
    Tensor t = Tensor::zeros(shape, true);
    for (auto& x : t.values()) x = v;
    return insert(name, t);
}

Tensor ParamStore::get(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) throw std::runtime_error("ParamStore: unknown parameter " + name);
    return it->second;
}

std::vector<std::string> ParamStore::names() const {
    std::vector<std::string> out;
    out.reserve(params_.size());
    for (const auto& [k, v] : params_) out.push_back(k);
    return out;
}

std::vector<std::string> ParamStore::names_with_prefix(const std::string& prefix) const {
    std::vector<std::string> out;
    for (const auto& [k, v] : params_)
        if (k.rfind(prefix, 0) == 0) out.push_back(k);
    return out;
}

void ParamStore::set_trainable(const std::string& prefix, bool trainable) {
    for (auto& [k, v] : params_)
        if (k.rfind(prefix, 0) == 0) v.node()->requires_grad = trainable;
}

void ParamStore::zero_grads() {
    for (auto& [k, v] : params_) v.zero_grad();
}

int64_t ParamStore::total_numel() const {
    int64_t n = 0;
    for (const auto& [k, v] : params_) n += v.numel();
    return n;
}

int64_t ParamStore::trainable_numel() const {
    int64_t n = 0;
    for (const auto& [k, v] : params_)
        if (v.requires_grad()) n += v.numel();
    return n;
}

uint64_t ParamStore::content_hash(const std::string& prefix) const {
    uint64_t h = 1469598103934665603ULL;
    for (const auto& [k, v] : params_) {
        if (!prefix.empty() && k.rfind(prefix, 0) != 0) continue;
        h = fnv1a_bytes(k.data(), k.size(), h);
        h = fnv1a_bytes(v.values().data(), v.values().size() * sizeof(double), h);
    }
    return h;
}

void ParamStore::set_values(const std::string& name, const std::vector<double>& values) {
    auto it = params_.find(name);
    if (it == params_.end()) throw std::runtime_error("ParamStore: unknown parameter " + name);
    if (it->second.values().size() != values.size())
        throw std::runtime_error("ParamStore: size mismatch loading " + name);
    it->second.values() = values;
}

void ParamStore::reshape_param(const std::string& name, const Shape& shape,
                               std::vector<double> values) {
    auto it = params_.find(name);
    if (it == params_.end()) throw std::runtime_error("ParamStore: unknown parameter " + name);
    if (shape_numel(shape) != static_cast<int64_t>(values.size()))
        throw std::runtime_error("ParamStore: shape/value mismatch reshaping " + name);
    auto& node = it->second.node();
    node->shape = shape;
    node->value = std::move(values);
    node->grad.clear();
}

LinearLayer LinearLayer::create(ParamStore& ps, const std::string& name, int in, int out, Rng& rng) {
    LinearLayer l;
    l.w = ps.gaussian(name + ".w", {out, in}, rng, 1.0 / std::sqrt(static_cast<double>(in)));
    l.b = ps.zeros(name + ".b", {out});
    return l;
}

LinearLayer LinearLayer::create_zero(ParamStore& ps, const std::string& name, int in, int out) {
    LinearLayer l;
    l.w = ps.zeros(name + ".w", {out, in});
    l.b = ps.zeros(name + ".b", {out});
    return l;
}

LayerNormLayer LayerNormLayer::create(ParamStore& ps, const std::string& name, int dim) {
    LayerNormLayer l;
    l.gamma = ps.constant(name + ".g", {dim}, 1.0);
    l.beta = ps.zeros(name + ".b", {dim});
    return l;
}

GroupNormLayer GroupNormLayer::create(ParamStore& ps, const std::string& name, int channels, int groups) {
    GroupNormLayer l;
    l.groups = groups;
    l.gamma = ps.constant(name + ".g", {channels}, 1.0);
    l.beta = ps.zeros(name + ".b", {channels});
    return l;
}

Conv2dLayer Conv2dLayer::create(ParamStore& ps, const std::string& name, int cin, int cout,
                                int k, int stride, int pad, Rng& rng) {
    Conv2dLayer l;
    l.stride = stride;
    l.pad = pad;
    l.w = ps.gaussian(name + ".w", {cout, cin, k, k}, rng,
                      1.0 / std::sqrt(static_cast<double>(cin) * k * k));
    l.b = ps.zeros(name + ".b", {cout});
    return l;
}

Conv2dLayer Conv2dLayer::create_zero(ParamStore& ps, const std::string& name, int cin, int cout,
                                     int k, int stride, int pad) {
    Conv2dLayer l;
    l.stride = stride;
    l.pad = pad;
    l.w = ps.zeros(name + ".w", {cout, cin, k, k});
    l.b = ps.zeros(name + ".b", {cout});
    return l;
}

MultiheadAttention MultiheadAttention::create(ParamStore& ps, const std::string& name, int dim,
                                              int heads, int kv_dim, Rng& rng) {
    if (dim % heads != 0) throw std::runtime_error("attention: dim not divisible by heads");
    MultiheadAttention a;
    a.heads = heads;
    a.q = LinearLayer::create(ps, name + ".q", dim, dim, rng);
    a.k = LinearLayer::create(ps, name + ".k", kv_dim, dim, rng);
    a.v = LinearLayer::create(ps, name + ".v", kv_dim, dim, rng);
    a.out = LinearLayer::create(ps, name + ".o", dim, dim, rng);
    return a;
}

Tensor MultiheadAttention::forward(const Tensor& x, const Tensor& kv,
                                   const std::vector<uint8_t>* keep, bool causal) const {
    const int dim = q.w.dim(0);
    const int dh = dim / heads;
    Tensor qh = split_heads(q.forward(x), heads);    // [H, Tq, dh]
    Tensor kh = split_heads(k.forward(kv), heads);   // [H, Tkv, dh]
    Tensor vh = split_heads(v.forward(kv), heads);
    Tensor scores = scale(bmm_nt(qh, kh), 1.0 / std::sqrt(static_cast<double>(dh)));
    Tensor probs = softmax_lastdim(scores, keep, causal);
    if (probe) {
        const int tkv = probs.dim(2);
        const size_t rows = static_cast<size_t>(probs.numel() / tkv);
        for (size_t r = 0; r < rows; ++r) {
            double s = 0.0;
            for (int j = 0; j < tkv; ++j) s += probs.data()[r * tkv + j];
            probe->row_sums.push_back(s);
        }
    }
    Tensor ctx = merge_heads(bmm(probs, vh));        // [Tq, dim]
    return out.forward(ctx);
}

TransformerBlock TransformerBlock::create(ParamStore& ps, const std::string& name, int dim,
                                          int heads, int mlp_hidden, Rng& rng) {
    TransformerBlock b;
    b.ln1 = LayerNormLayer::create(ps, name + ".ln1", dim);
    b.ln2 = LayerNormLayer::create(ps, name + ".ln2", dim);
    b.attn = MultiheadAttention::create(ps, name + ".attn", dim, heads, dim, rng);
    b.fc1 = LinearLayer::create(ps, name + ".fc1", dim, mlp_hidden, rng);
    b.fc2 = LinearLayer::create(ps, name + ".fc2", mlp_hidden, dim, rng);
    return b;
}

Tensor TransformerBlock::forward(const Tensor& x, const std::vector<uint8_t>* keep, bool causal) const {
    Tensor n1 = ln1.forward(x);
    Tensor h = add(x, attn.forward(n1, n1, keep, causal));
    Tensor m = fc2.forward(gelu(fc1.forward(ln2.forward(h))));
    return add(h, m);
}

void AdamW::step(ParamStore& ps) {
    ++step_count;
    const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(step_count));
    const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(step_count));
    for (const auto& [name, t] : ps.entries()) {
        if (!t.requires_grad()) continue;
        const auto& g = t.raw_grad();
        if (g.empty()) continue;  // untouched this step
        auto& mv = m[name];
        auto& vv = v[name];
        Tensor handle = t;  // shared node, safe to mutate through a copy
        auto& p = handle.values();
        if (mv.size() != p.size()) mv.assign(p.size(), 0.0);
        if (vv.size() != p.size()) vv.assign(p.size(), 0.0);
        for (size_t i = 0; i < p.size(); ++i) {
            mv[i] = beta1 * mv[i] + (1.0 - beta1) * g[i];
            vv[i] = beta2 * vv[i] + (1.0 - beta2) * g[i] * g[i];
            const double mhat = mv[i] / bc1;
            const double vhat = vv[i] / bc2;
            p[i] -= lr * (mhat / (std::sqrt(vhat) + eps) + weight_decay * p[i]);
        }
    }
}

std::vector<double> sinusoidal_time_embedding(double t, int dim) {
    if (dim % 2 != 0) throw std::runtime_error("time embedding: dim must be even");
    const int half = dim / 2;
    std::vector<double> out(static_cast<size_t>(dim));
    for (int i = 0; i < half; ++i) {
        const double f = std::exp(-std::log(10000.0) * static_cast<double>(i) / half);
        out[static_cast<size_t>(i)] = std::sin(t * f);
        out[static_cast<size_t>(half + i)] = std::cos(t * f);
    }
    return out;
}

}  // namespace fashionrag
