#include "fashionrag/tensor.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <cstring>
#include <sstream>
#include <stdexcept>
#include <unordered_set>

namespace fashionrag {

using MatRM = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapM = Eigen::Map<MatRM>;
using CMapM = Eigen::Map<const MatRM>;

int64_t shape_numel(const Shape& s) {
    int64_t n = 1;
    for (int d : s) n *= d;
    return n;
}

std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << "]";
    return os.str();
}

namespace {

thread_local bool g_grad_enabled = true;

[[noreturn]] void fail(const std::string& msg) { throw std::runtime_error("tensor: " + msg); }

void check(bool cond, const std::string& msg) {
    if (!cond) fail(msg);
}

std::shared_ptr<TensorNode> make_result(Shape shape, std::initializer_list<const Tensor*> parents) {
    auto node = std::make_shared<TensorNode>();
    node->value.resize(static_cast<size_t>(shape_numel(shape)));
    node->shape = std::move(shape);
    if (g_grad_enabled) {
        bool rg = false;
        for (const Tensor* p : parents) rg = rg || p->node()->requires_grad;
        node->requires_grad = rg;
        if (rg) {
            node->parents.reserve(parents.size());
            for (const Tensor* p : parents) node->parents.push_back(p->node());
        }
    }
    return node;
}

}  // namespace

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }

Tensor Tensor::zeros(const Shape& shape, bool requires_grad) {
    auto node = std::make_shared<TensorNode>();
    node->shape = shape;
    node->value.assign(static_cast<size_t>(shape_numel(shape)), 0.0);
    node->requires_grad = requires_grad;
    return Tensor(node);
}

Tensor Tensor::full(const Shape& shape, double v) {
    Tensor t = zeros(shape);
    for (auto& x : t.values()) x = v;
    return t;
}

Tensor Tensor::from_vector(const Shape& shape, std::vector<double> data, bool requires_grad) {
    check(static_cast<int64_t>(data.size()) == shape_numel(shape),
          "from_vector: data size does not match shape " + shape_str(shape));
    auto node = std::make_shared<TensorNode>();
    node->shape = shape;
    node->value = std::move(data);
    node->requires_grad = requires_grad;
    return Tensor(node);
}

double Tensor::item() const {
    check(node_ && node_->value.size() == 1, "item: tensor is not scalar");
    return node_->value[0];
}

std::vector<double> Tensor::grad_or_zeros() const {
    if (node_->grad.empty()) return std::vector<double>(node_->value.size(), 0.0);
    return node_->grad;
}

void Tensor::backward() {
    check(node_ && node_->value.size() == 1, "backward: root must be scalar");
    check(node_->requires_grad, "backward: root does not depend on any trainable leaf");

    // Topological order, inputs first (iterative postorder DFS over the tape).
    std::vector<TensorNode*> order;
    std::unordered_set<TensorNode*> seen;
    std::vector<std::pair<TensorNode*, size_t>> stack;
    stack.emplace_back(node_.get(), 0);
    seen.insert(node_.get());
    while (!stack.empty()) {
        auto& [n, idx] = stack.back();
        if (idx < n->parents.size()) {
            TensorNode* p = n->parents[idx].get();
            ++idx;
            if (p->requires_grad && !seen.count(p)) {
                seen.insert(p);
                stack.emplace_back(p, 0);
            }
        } else {
            order.push_back(n);
            stack.pop_back();
        }
    }

    node_->ensure_grad();
    node_->grad[0] = 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        TensorNode* n = *it;
        if (n->backward_fn && !n->grad.empty()) n->backward_fn(*n);
    }
}

// ---------------------------------------------------------------- elementwise

Tensor add(const Tensor& a, const Tensor& b) {
    check(a.shape() == b.shape(), "add: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    auto node = make_result(a.shape(), {&a, &b});
    const size_t n = node->value.size();
    const double* pa = a.data();
    const double* pb = b.data();
    for (size_t i = 0; i < n; ++i) node->value[i] = pa[i] + pb[i];
    if (node->requires_grad) {
        node->backward_fn = [](TensorNode& self) {
            for (int k = 0; k < 2; ++k) {
                TensorNode* p = self.parents[static_cast<size_t>(k)].get();
                if (!p->requires_grad) continue;
                p->ensure_grad();
                for (size_t i = 0; i < self.grad.size(); ++i) p->grad[i] += self.grad[i];
            }
        };
    }
    return Tensor(node);
}

Tensor sub(const Tensor& a, const Tensor& b) {
    check(a.shape() == b.shape(), "sub: shape mismatch");
    auto node = make_result(a.shape(), {&a, &b});
    const size_t n = node->value.size();
    for (size_t i = 0; i < n; ++i) node->value[i] = a.data()[i] - b.data()[i];
    if (node->requires_grad) {
        node->backward_fn = [](TensorNode& self) {
            TensorNode* pa = self.parents[0].get();
            TensorNode* pb = self.parents[1].get();
            if (pa->requires_grad) {
                pa->ensure_grad();
                for (size_t i = 0; i < self.grad.size(); ++i) pa->grad[i] += self.grad[i];
            }
            if (pb->requires_grad) {
                pb->ensure_grad();
                for (size_t i = 0; i < self.grad.size(); ++i) pb->grad[i] -= self.grad[i];
            }
        };
    }
    return Tensor(node);
}

Tensor mul(const Tensor& a, const Tensor& b) {
    check(a.shape() == b.shape(), "mul: shape mismatch");
    auto node = make_result(a.shape(), {&a, &b});
    const size_t n = node->value.size();
    for (size_t i = 0; i < n; ++i) node->value[i] = a.data()[i] * b.data()[i];
    if (node->requires_grad) {
        node->backward_fn = [](TensorNode& self) {
            TensorNode* pa = self.parents[0].get();
            TensorNode* pb = self.parents[1].get();
            if (pa->requires_grad) {
                pa->ensure_grad();
                for (size_t i = 0; i < self.grad.size(); ++i) pa->grad[i] += self.grad[i] * pb->value[i];
            }
            if (pb->requires_grad) {
                pb->ensure_grad();
                for (size_t i = 0; i < self.grad.size(); ++i) pb->grad[i] += self.grad[i] * pa->value[i];
            }
        };
    }
    return Tensor(node);
}

Tensor scale(const Tensor& a, double c) {
    auto node = make_result(a.shape(), {&a});
    const size_t n = node->value.size();
    for (size_t i = 0; i < n; ++i) node->value[i] = a.data()[i] * c;
    if (node->requires_grad) {
        node->backward_fn = [c](TensorNode& self) {
            TensorNode* p = self.parents[0].get();
            if (!p->requires_grad) return;
            p->ensure_grad();
            for (size_t i = 0; i < self.grad.size(); ++i) p->grad[i] += self.grad[i] * c;
        };
    }
    return Tensor(node);
}

Tensor add_scalar(const Tensor& a, double c) {
    auto node = make_result(a.shape(), {&a});
    const size_t n = node->value.size();
    for (size_t i = 0; i < n; ++i) node->value[i] = a.data()[i] + c;
    if (node->requires_grad) {
        node->backward_fn = [](TensorNode& self) {
            TensorNode* p = self.parents[0].get();
            if (!p->requires_grad) return;
            p->ensure_grad();
            for (size_t i = 0; i < self.grad.size(); ++i) p->grad[i] += self.grad[i];
        };
    }
    return Tensor(node);
}

Tensor silu(const Tensor& x) {
    auto node = make_result(x.shape(), {&x});
    const size_t n = node->value.size();
    for (size_t i = 0; i < n; ++i) {
        const double v = x.data()[i];
        node->value[i] = v / (1.0 + std::exp(-v));
    }
    if (node->requires_grad) {
        node->backward_fn = [](TensorNode& self) {
            TensorNode* p = self.parents[0].get();
            if (!p->requires_grad) return;
            p->ensure_grad();
            for (size_t i = 0; i < self.grad.size(); ++i) {
                const double v = p->value[i];
                const double s = 1.0 / (1.0 + std::exp(-v));
                p->grad[i] += self.grad[i] * s * (1.0 + v * (1.0 - s));
            }
        };
    }
    return Tensor(node);
}

Tensor gelu(const Tensor& x) {
    constexpr double c0 = 0.79788456080286535588;  // sqrt(2/pi)
    constexpr double c1 = 0.044715;
    auto node = make_result(x.shape(), {&x});
    const size_t n = node->value.size();
    for (size_t i = 0; i < n; ++i) {
        const double v = x.data()[i];
        const double t = std::tanh(c0 * (v + c1 * v * v * v));
        node->value[i] = 0.5 * v * (1.0 + t);
    }
    if (node->requires_grad) {
        node->backward_fn = [](TensorNode& self) {
            TensorNode* p = self.parents[0].get();
            if (!p->requires_grad) return;
            p->ensure_grad();
            for (size_t i = 0; i < self.grad.size(); ++i) {
                const double v = p->value[i];
                const double u = c0 * (v + c1 * v * v * v);
                const double t = std::tanh(u);
                const double du = c0 * (1.0 + 3.0 * c1 * v * v);
                p->grad[i] += self.grad[i] * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du);
            }
        };
    }
    return Tensor(node);
}

// --------------------------------------------------------------------- shape

Tensor reshape(const Tensor& x, const Shape& shape) {
    check(shape_numel(shape) == x.numel(),
          "reshape: numel mismatch " + shape_str(x.shape()) + " -> " + shape_str(shape));
    auto node = make_result(shape, {&x});
    node->value = x.values();
    if (node->requires_grad) {
        node->backward_fn = [](TensorNode& self) {
            TensorNode* p = self.parents[0].get();
            if (!p->requires_grad) return;
            p->ensure_grad();
            for (size_t i = 0; i < self.grad.size(); ++i) p->grad[i] += self.grad[i];
        };
    }
    return Tensor(node);
}

Tensor transpose2(const Tensor& x) {
    check(x.ndim() == 2, "transpose2: expected 2D");
    const int m = x.dim(0), n = x.dim(1);
    auto node = make_result({n, m}, {&x});
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) node->value[static_cast<size_t>(j) * m + i] = x.data()[static_cast<size_t>(i) * n + j];
    if (node->requires_grad) {
        node->backward_fn = [m, n](TensorNode& self) {
            TensorNode* p = self.parents[0].get();
            if (!p->requires_grad) return;
            p->ensure_grad();
            for (int j = 0; j < n; ++j)
                for (int i = 0; i < m; ++i)
                    p->grad[static_cast<size_t>(i) * n + j] += self.grad[static_cast<size_t>(j) * m + i];
        };
    }
    return Tensor(node);
}

Tensor slice_rows(const Tensor& x, int start, int len) {
    check(x.ndim() == 2, "slice_rows: expected 2D");
    const int t = x.dim(0), d = x.dim(1);
    check(start >= 0 && len >= 0 && start + len <= t, "slice_rows: range out of bounds");
    auto node = make_result({len, d}, {&x});
    std::memcpy(node->value.data(), x.data() + static_cast<size_t>(start) * d, sizeof(double) * static_cast<size_t>(len) * d);
    if (node->requires_grad) {
        node->backward_fn = [start, d](TensorNode& self) {
            TensorNode* p = self.parents[0].get();
            if (!p->requires_grad) return;
            p->ensure_grad();
            for (size_t i = 0; i < self.grad.size(); ++i)
                p->grad[static_cast<size_t>(start) * d + i] += self.grad[i];
        };
    }
    return Tensor(node);
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
    check(!parts.empty(), "concat_rows: no parts");
    const int d = parts[0].dim(1);
    int total = 0;
    for (const auto& p : parts) {
        check(p.ndim() == 2 && p.dim(1) == d, "concat_rows: width mismatch");
        total += p.dim(0);
    }
    std::vector<const Tensor*> ptrs;
    auto node = std::make_shared<TensorNode>();
    node->shape = {total, d};
    node->value.resize(static_cast<size_t>(total) * d);
    size_t off = 0;
    bool rg = false;
    for (const auto& p : parts) {
        std::memcpy(node->value.data() + off, p.data(), sizeof(double) * p.numel());
        off += static_cast<size_t>(p.numel());
        rg = rg || p.node()->requires_grad;
    }
    if (g_grad_enabled && rg) {
        node->requires_grad = true;
        for (const auto& p : parts) node->parents.push_back(p.node());
        node->backward_fn = [](TensorNode& self) {
            size_t off2 = 0;
            for (auto& pn : self.parents) {
                const size_t n = pn->value.size();
                if (pn->requires_grad) {
                    pn->ensure_grad();
                    for (size_t i = 0; i < n; ++i) pn->grad[i] += self.grad[off2 + i];
                }
                off2 += n;
            }
        };
    }
    return Tensor(node);
}

Tensor concat_channels(const std::vector<Tensor>& parts) {
    check(!parts.empty(), "concat_channels: no parts");
    const int h = parts[0].dim(1), w = parts[0].dim(2);
    int total = 0;
    for (const auto& p : parts) {
        check(p.ndim() == 3 && p.dim(1) == h && p.dim(2) == w, "concat_channels: spatial mismatch");
        total += p.dim(0);
    }
    auto node = std::make_shared<TensorNode>();
    node->shape = {total, h, w};
    node->value.resize(static_cast<size_t>(total) * h * w);
    size_t off = 0;
    bool rg = false;
    for (const auto& p : parts) {
        std::memcpy(node->value.data() + off, p.data(), sizeof(double) * p.numel());
        off += static_cast<size_t>(p.numel());
        rg = rg || p.node()->requires_grad;
    }
    if (g_grad_enabled && rg) {
        node->requires_grad = true;
        for (const auto& p : parts) node->parents.push_back(p.node());
        node->backward_fn = [](TensorNode& self) {
            size_t off2 = 0;
            for (auto& pn : self.parents) {
                const size_t n = pn->value.size();
                if (pn->requires_grad) {
                    pn->ensure_grad();
                    for (size_t i = 0; i < n; ++i) pn->grad[i] += self.grad[off2 + i];
                }
                off2 += n;
            }
        };
    }
    return Tensor(node);
}

Tensor slice_channels(const Tensor& x, int start, int len) {
    check(x.ndim() == 3, "slice_channels: expected [C,H,W]");
    const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
    check(start >= 0 && len >= 0 && start + len <= c, "slice_channels: range out of bounds");
    const size_t plane = static_cast<size_t>(h) * w;
    auto node = make_result({len, h, w}, {&x});
    std::memcpy(node->value.data(), x.data() + static_cast<size_t>(start) * plane,
                sizeof(double) * static_cast<size_t>(len) * plane);
    if (node->requires_grad) {
        node->backward_fn = [start, plane](TensorNode& self) {
            TensorNode* p = self.parents[0].get();
            if (!p->requires_grad) return;
            p->ensure_grad();
            for (size_t i = 0; i < self.grad.size(); ++i)
                p->grad[static_cast<size_t>(start) * plane + i] += self.grad[i];
        };
    }
    return Tensor(node);
}

Tensor split_heads(const Tensor& x, int heads) {
    check(x.ndim() == 2, "split_heads: expected [T,H*Dh]");
    const int t = x.dim(0), d = x.dim(1);
    check(d % heads == 0, "split_heads: width not divisible by head count");
    const int dh = d / heads;
    auto node = make_result({heads, t, dh}, {&x});
    for (int hh = 0; hh < heads; ++hh)
        for (int i = 0; i < t; ++i)
            for (int k = 0; k < dh; ++k)
                node->value[(static_cast<size_t>(hh) * t + i) * dh + k] =
                    x.data()[static_cast<size_t>(i) * d + hh * dh + k];
    if (node->requires_grad) {
        node->backward_fn = [heads, t, d, dh](TensorNode& self) {
            TensorNode* p = self.parents[0].get();
            if (!p->requires_grad) return;
            p->ensure_grad();
            for (int hh = 0; hh < heads; ++hh)
                for (int i = 0; i < t; ++i)
                    for (int k = 0; k < dh; ++k)
                        p->grad[static_cast<size_t>(i) * d + hh * dh + k] +=
                            self.grad[(static_cast<size_t>(hh) * t + i) * dh + k];
        };
    }
    return Tensor(node);
}

Tensor merge_heads(const Tensor& x) {
    check(x.ndim() == 3, "merge_heads: expected [H,T,Dh]");
    const int heads = x.dim(0), t = x.dim(1), dh = x.dim(2);
    const int d = heads * dh;
    auto node = make_result({t, d}, {&x});
    for (int hh = 0; hh < heads; ++hh)
        for (int i = 0; i < t; ++i)
            for (int k = 0; k < dh; ++k)
                node->value[static_cast<size_t>(i) * d + hh * dh + k] =
                    x.data()[(static_cast<size_t>(hh) * t + i) * dh + k];
    if (node->requires_grad) {
        node->backward_fn = [heads, t, d, dh](TensorNode& self) {
            TensorNode* p = self.parents[0].get();
            if (!p->requires_grad) return;
            p->ensure_grad();
            for (int hh = 0; hh < heads; ++hh)
                for (int i = 0; i < t; ++i)
                    for (int k = 0; k < dh; ++k)
                        p->grad[(static_cast<size_t>(hh) * t + i) * dh + k] +=
                            self.grad[static_cast<size_t>(i) * d + hh * dh + k];
        };
    }
    return Tensor(node);
}

// -------------------------------------------------------------------- matmul

Tensor matmul(const Tensor& a, const Tensor& b) {
    check(a.ndim() == 2 && b.ndim() == 2 && a.dim(1) == b.dim(0),
          "matmul: bad shapes " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
    auto node = make_result({m, n}, {&a, &b});
    MapM out(node->value.data(), m, n);
    out.noalias() = CMapM(a.data(), m, k) * CMapM(b.data(), k, n);
    if (node->requires_grad) {
        node->backward_fn = [m, k, n](TensorNode& self) {
            TensorNode* pa = self.parents[0].get();
            TensorNode* pb = self.parents[1].get();
            CMapM g(self.grad.data(), m, n);
            if (pa->requires_grad) {
                pa->ensure_grad();
                MapM ga(pa->grad.data(), m, k);
                ga.noalias() += g * CMapM(pb->value.data(), k, n).transpose();
            }
            if (pb->requires_grad) {
                pb->ensure_grad();
                MapM gb(pb->grad.data(), k, n);
                gb.noalias() += CMapM(pa->value.data(), m, k).transpose() * g;
            }
        };
    }
    return Tensor(node);
}

Tensor bmm(const Tensor& a, const Tensor& b) {
    check(a.ndim() == 3 && b.ndim() == 3 && a.dim(0) == b.dim(0) && a.dim(2) == b.dim(1),
          "bmm: bad shapes " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    const int bs = a.dim(0), m = a.dim(1), k = a.dim(2), n = b.dim(2);
    auto node = make_result({bs, m, n}, {&a, &b});
    for (int i = 0; i < bs; ++i) {
        MapM out(node->value.data() + static_cast<size_t>(i) * m * n, m, n);
        out.noalias() = CMapM(a.data() + static_cast<size_t>(i) * m * k, m, k) *
                        CMapM(b.data() + static_cast<size_t>(i) * k * n, k, n);
    }
    if (node->requires_grad) {
        node->backward_fn = [bs, m, k, n](TensorNode& self) {
            TensorNode* pa = self.parents[0].get();
            TensorNode* pb = self.parents[1].get();
            for (int i = 0; i < bs; ++i) {
                CMapM g(self.grad.data() + static_cast<size_t>(i) * m * n, m, n);
                if (pa->requires_grad) {
                    pa->ensure_grad();
                    MapM ga(pa->grad.data() + static_cast<size_t>(i) * m * k, m, k);
                    ga.noalias() += g * CMapM(pb->value.data() + static_cast<size_t>(i) * k * n, k, n).transpose();
                }
                if (pb->requires_grad) {
                    pb->ensure_grad();
                    MapM gb(pb->grad.data() + static_cast<size_t>(i) * k * n, k, n);
                    gb.noalias() += CMapM(pa->value.data() + static_cast<size_t>(i) * m * k, m, k).transpose() * g;
                }
            }
        };
    }
    return Tensor(node);
}

Tensor bmm_nt(const Tensor& a, const Tensor& b) {
    check(a.ndim() == 3 && b.ndim() == 3 && a.dim(0) == b.dim(0) && a.dim(2) == b.dim(2),
          "bmm_nt: bad shapes " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    const int bs = a.dim(0), m = a.dim(1), k = a.dim(2), n = b.dim(1);
    auto node = make_result({bs, m, n}, {&a, &b});
    for (int i = 0; i < bs; ++i) {
        MapM out(node->value.data() + static_cast<size_t>(i) * m * n, m, n);
        out.noalias() = CMapM(a.data() + static_cast<size_t>(i) * m * k, m, k) *
                        CMapM(b.data() + static_cast<size_t>(i) * n * k, n, k).transpose();
    }
    if (node->requires_grad) {
        node->backward_fn = [bs, m, k, n](TensorNode& self) {
            TensorNode* pa = self.parents[0].get();
            TensorNode* pb = self.parents[1].get();
            for (int i = 0; i < bs; ++i) {
                CMapM g(self.grad.data() + static_cast<size_t>(i) * m * n, m, n);
                if (pa->requires_grad) {
                    pa->ensure_grad();
                    MapM ga(pa->grad.data() + static_cast<size_t>(i) * m * k, m, k);
                    ga.noalias() += g * CMapM(pb->value.data() + static_cast<size_t>(i) * n * k, n, k);
                }
                if (pb->requires_grad) {
                    pb->ensure_grad();
                    MapM gb(pb->grad.data() + static_cast<size_t>(i) * n * k, n, k);
                    gb.noalias() += g.transpose() * CMapM(pa->value.data() + static_cast<size_t>(i) * m * k, m, k);
                }
            }
        };
    }
    return Tensor(node);
}

static Tensor linear_impl(const Tensor& x, const Tensor& w, const Tensor* bias) {
    check(x.ndim() == 2 && w.ndim() == 2 && x.dim(1) == w.dim(1),
          "linear: bad shapes x" + shape_str(x.shape()) + " w" + shape_str(w.shape()));
    const int t = x.dim(0), in = x.dim(1), out = w.dim(0);
    auto node = bias ? make_result({t, out}, {&x, &w, bias}) : make_result({t, out}, {&x, &w});
    MapM y(node->value.data(), t, out);
    y.noalias() = CMapM(x.data(), t, in) * CMapM(w.data(), out, in).transpose();
    if (bias) {
        check(bias->numel() == out, "linear: bias size mismatch");
        const double* bp = bias->data();
        for (int i = 0; i < t; ++i)
            for (int j = 0; j < out; ++j) node->value[static_cast<size_t>(i) * out + j] += bp[j];
    }
    if (node->requires_grad) {
        const bool has_bias = bias != nullptr;
        node->backward_fn = [t, in, out, has_bias](TensorNode& self) {
            TensorNode* px = self.parents[0].get();
            TensorNode* pw = self.parents[1].get();
            CMapM g(self.grad.data(), t, out);
            if (px->requires_grad) {
                px->ensure_grad();
                MapM gx(px->grad.data(), t, in);
                gx.noalias() += g * CMapM(pw->value.data(), out, in);
            }
            if (pw->requires_grad) {
                pw->ensure_grad();
                MapM gw(pw->grad.data(), out, in);
                gw.noalias() += g.transpose() * CMapM(px->value.data(), t, in);
            }
            if (has_bias) {
                TensorNode* pb = self.parents[2].get();
                if (pb->requires_grad) {
                    pb->ensure_grad();
                    for (int i = 0; i < t; ++i)
                        for (int j = 0; j < out; ++j) pb->grad[static_cast<size_t>(j)] += g(i, j);
                }
            }
        };
    }
    return Tensor(node);
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) { return linear_impl(x, w, &b); }
Tensor linear_nobias(const Tensor& x, const Tensor& w) { return linear_impl(x, w, nullptr); }

// ---------------------------------------------------------- broadcasting adds

Tensor add_bias(const Tensor& x, const Tensor& b) {
    const int d = x.dim(x.ndim() - 1);
    check(b.numel() == d, "add_bias: width mismatch");
    auto node = make_result(x.shape(), {&x, &b});
    const size_t rows = static_cast<size_t>(x.numel() / d);
    for (size_t r = 0; r < rows; ++r)
        for (int j = 0; j < d; ++j)
            node->value[r * d + j] = x.data()[r * d + j] + b.data()[j];
    if (node->requires_grad) {
        node->backward_fn = [rows, d](TensorNode& self) {
            TensorNode* px = self.parents[0].get();
            TensorNode* pb = self.parents[1].get();
            if (px->requires_grad) {
                px->ensure_grad();
                for (size_t i = 0; i < self.grad.size(); ++i) px->grad[i] += self.grad[i];
            }
            if (pb->requires_grad) {
                pb->ensure_grad();
                for (size_t r = 0; r < rows; ++r)
                    for (int j = 0; j < d; ++j) pb->grad[static_cast<size_t>(j)] += self.grad[r * d + j];
            }
        };
    }
    return Tensor(node);
}

Tensor add_channel_bias(const Tensor& x, const Tensor& b) {
    check(x.ndim() == 3, "add_channel_bias: expected [C,H,W]");
    const int c = x.dim(0);
    const size_t plane = static_cast<size_t>(x.dim(1)) * x.dim(2);
    check(b.numel() == c, "add_channel_bias: channel mismatch");
    auto node = make_result(x.shape(), {&x, &b});
    for (int ch = 0; ch < c; ++ch)
        for (size_t i = 0; i < plane; ++i)
            node->value[ch * plane + i] = x.data()[ch * plane + i] + b.data()[ch];
    if (node->requires_grad) {
        node->backward_fn = [c, plane](TensorNode& self) {
            TensorNode* px = self.parents[0].get();
            TensorNode* pb = self.parents[1].get();
            if (px->requires_grad) {
                px->ensure_grad();
                for (size_t i = 0; i < self.grad.size(); ++i) px->grad[i] += self.grad[i];
            }
            if (pb->requires_grad) {
                pb->ensure_grad();
                for (int ch = 0; ch < c; ++ch) {
                    double s = 0.0;
                    for (size_t i = 0; i < plane; ++i) s += self.grad[ch * plane + i];
                    pb->grad[static_cast<size_t>(ch)] += s;
                }
            }
        };
    }
    return Tensor(node);
}

// ---------------------------------------------------- normalization/attention

Tensor layernorm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
    const int d = x.dim(x.ndim() - 1);
    check(gamma.numel() == d && beta.numel() == d, "layernorm: affine size mismatch");
    const size_t rows = static_cast<size_t>(x.numel() / d);
    auto node = make_result(x.shape(), {&x, &gamma, &beta});
    std::vector<double> mu(rows), inv(rows);
    for (size_t r = 0; r < rows; ++r) {
        const double* px = x.data() + r * d;
        double m = 0.0;
        for (int j = 0; j < d; ++j) m += px[j];
        m /= d;
        double v = 0.0;
        for (int j = 0; j < d; ++j) v += (px[j] - m) * (px[j] - m);
        v /= d;
        const double is = 1.0 / std::sqrt(v + eps);
        mu[r] = m;
        inv[r] = is;
        for (int j = 0; j < d; ++j)
            node->value[r * d + j] = (px[j] - m) * is * gamma.data()[j] + beta.data()[j];
    }
    if (node->requires_grad) {
        node->backward_fn = [rows, d, mu = std::move(mu), inv = std::move(inv)](TensorNode& self) {
            TensorNode* px = self.parents[0].get();
            TensorNode* pg = self.parents[1].get();
            TensorNode* pb = self.parents[2].get();
            if (px->requires_grad) px->ensure_grad();
            if (pg->requires_grad) pg->ensure_grad();
            if (pb->requires_grad) pb->ensure_grad();
            std::vector<double> xhat(static_cast<size_t>(d));
            for (size_t r = 0; r < rows; ++r) {
                const double* xv = px->value.data() + r * d;
                const double* g = self.grad.data() + r * d;
                for (int j = 0; j < d; ++j) xhat[static_cast<size_t>(j)] = (xv[j] - mu[r]) * inv[r];
                if (pg->requires_grad)
                    for (int j = 0; j < d; ++j) pg->grad[static_cast<size_t>(j)] += g[j] * xhat[static_cast<size_t>(j)];
                if (pb->requires_grad)
                    for (int j = 0; j < d; ++j) pb->grad[static_cast<size_t>(j)] += g[j];
                if (px->requires_grad) {
                    double m1 = 0.0, m2 = 0.0;
                    for (int j = 0; j < d; ++j) {
                        const double dxh = g[j] * pg->value[static_cast<size_t>(j)];
                        m1 += dxh;
                        m2 += dxh * xhat[static_cast<size_t>(j)];
                    }
                    m1 /= d;
                    m2 /= d;
                    for (int j = 0; j < d; ++j) {
                        const double dxh = g[j] * pg->value[static_cast<size_t>(j)];
                        px->grad[r * d + j] += inv[r] * (dxh - m1 - xhat[static_cast<size_t>(j)] * m2);
                    }
                }
            }
        };
    }
    return Tensor(node);
}

Tensor groupnorm(const Tensor& x, int groups, const Tensor& gamma, const Tensor& beta, double eps) {
    check(x.ndim() == 3, "groupnorm: expected [C,H,W]");
    const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
    check(c % groups == 0, "groupnorm: channels not divisible by groups");
    check(gamma.numel() == c && beta.numel() == c, "groupnorm: affine size mismatch");
    const int cpg = c / groups;
    const size_t plane = static_cast<size_t>(h) * w;
    const size_t gsize = static_cast<size_t>(cpg) * plane;
    auto node = make_result(x.shape(), {&x, &gamma, &beta});
    std::vector<double> mu(static_cast<size_t>(groups)), inv(static_cast<size_t>(groups));
    for (int g = 0; g < groups; ++g) {
        const double* px = x.data() + static_cast<size_t>(g) * gsize;
        double m = 0.0;
        for (size_t i = 0; i < gsize; ++i) m += px[i];
        m /= static_cast<double>(gsize);
        double v = 0.0;
        for (size_t i = 0; i < gsize; ++i) v += (px[i] - m) * (px[i] - m);
        v /= static_cast<double>(gsize);
        const double is = 1.0 / std::sqrt(v + eps);
        mu[static_cast<size_t>(g)] = m;
        inv[static_cast<size_t>(g)] = is;
        for (int cc = 0; cc < cpg; ++cc) {
            const int ch = g * cpg + cc;
            const double ga = gamma.data()[ch], be = beta.data()[ch];
            for (size_t i = 0; i < plane; ++i) {
                const size_t idx = static_cast<size_t>(ch) * plane + i;
                node->value[idx] = (x.data()[idx] - m) * is * ga + be;
            }
        }
    }
    if (node->requires_grad) {
        node->backward_fn = [groups, cpg, plane, gsize, mu = std::move(mu), inv = std::move(inv)](TensorNode& self) {
            TensorNode* px = self.parents[0].get();
            TensorNode* pg = self.parents[1].get();
            TensorNode* pb = self.parents[2].get();
            if (px->requires_grad) px->ensure_grad();
            if (pg->requires_grad) pg->ensure_grad();
            if (pb->requires_grad) pb->ensure_grad();
            for (int g = 0; g < groups; ++g) {
                const double m = mu[static_cast<size_t>(g)];
                const double is = inv[static_cast<size_t>(g)];
                double m1 = 0.0, m2 = 0.0;
                for (int cc = 0; cc < cpg; ++cc) {
                    const int ch = g * cpg + cc;
                    const double ga = pg->value[static_cast<size_t>(ch)];
                    for (size_t i = 0; i < plane; ++i) {
                        const size_t idx = static_cast<size_t>(ch) * plane + i;
                        const double xhat = (px->value[idx] - m) * is;
                        const double gr = self.grad[idx];
                        if (pg->requires_grad) pg->grad[static_cast<size_t>(ch)] += gr * xhat;
                        if (pb->requires_grad) pb->grad[static_cast<size_t>(ch)] += gr;
                        const double dxh = gr * ga;
                        m1 += dxh;
                        m2 += dxh * xhat;
                    }
                }
                if (!px->requires_grad) continue;
                m1 /= static_cast<double>(gsize);
                m2 /= static_cast<double>(gsize);
                for (int cc = 0; cc < cpg; ++cc) {
                    const int ch = g * cpg + cc;
                    const double ga = pg->value[static_cast<size_t>(ch)];
                    for (size_t i = 0; i < plane; ++i) {
                        const size_t idx = static_cast<size_t>(ch) * plane + i;
                        const double xhat = (px->value[idx] - m) * is;
                        const double dxh = self.grad[idx] * ga;
                        px->grad[idx] += is * (dxh - m1 - xhat * m2);
                    }
                }
            }
        };
    }
    return Tensor(node);
}

Tensor softmax_lastdim(const Tensor& x, const std::vector<uint8_t>* keep, bool causal) {
    const int k = x.dim(x.ndim() - 1);
    check(!keep || static_cast<int>(keep->size()) == k, "softmax: mask length mismatch");
    const int tq = x.ndim() >= 2 ? x.dim(x.ndim() - 2) : 1;
    const size_t rows = static_cast<size_t>(x.numel() / k);
    auto node = make_result(x.shape(), {&x});
    for (size_t r = 0; r < rows; ++r) {
        const int q = static_cast<int>(r % static_cast<size_t>(tq));
        const double* px = x.data() + r * k;
        double* py = node->value.data() + r * k;
        double mx = -1e300;
        bool any = false;
        for (int j = 0; j < k; ++j) {
            const bool ok = (!keep || (*keep)[static_cast<size_t>(j)]) && (!causal || j <= q);
            if (ok) {
                any = true;
                mx = std::max(mx, px[j]);
            }
        }
        check(any, "softmax: all positions masked in a row");
        double s = 0.0;
        for (int j = 0; j < k; ++j) {
            const bool ok = (!keep || (*keep)[static_cast<size_t>(j)]) && (!causal || j <= q);
            py[j] = ok ? std::exp(px[j] - mx) : 0.0;
            s += py[j];
        }
        const double invs = 1.0 / s;
        for (int j = 0; j < k; ++j) py[j] *= invs;
    }
    if (node->requires_grad) {
        node->backward_fn = [rows, k](TensorNode& self) {
            TensorNode* p = self.parents[0].get();
            if (!p->requires_grad) return;
            p->ensure_grad();
            for (size_t r = 0; r < rows; ++r) {
                const double* pv = self.value.data() + r * k;
                const double* g = self.grad.data() + r * k;
                double dot = 0.0;
                for (int j = 0; j < k; ++j) dot += g[j] * pv[j];
                for (int j = 0; j < k; ++j) p->grad[r * k + j] += pv[j] * (g[j] - dot);
            }
        };
    }
    return Tensor(node);
}

// ------------------------------------------------------------------- spatial

namespace {

void im2col(const double* x, int cin, int h, int w, int kh, int kw, int stride, int pad,
            int ho, int wo, double* cols) {
    // cols is [cin*kh*kw, ho*wo] row-major
    const int n = ho * wo;
    for (int c = 0; c < cin; ++c) {
        for (int ky = 0; ky < kh; ++ky) {
            for (int kx = 0; kx < kw; ++kx) {
                double* row = cols + (static_cast<size_t>(c) * kh * kw + ky * kw + kx) * n;
                for (int oy = 0; oy < ho; ++oy) {
                    const int iy = oy * stride + ky - pad;
                    for (int ox = 0; ox < wo; ++ox) {
                        const int ix = ox * stride + kx - pad;
                        row[oy * wo + ox] = (iy >= 0 && iy < h && ix >= 0 && ix < w)
                                                ? x[(static_cast<size_t>(c) * h + iy) * w + ix]
                                                : 0.0;
                    }
                }
            }
        }
    }
}

void col2im_accum(const double* cols, int cin, int h, int w, int kh, int kw, int stride, int pad,
                  int ho, int wo, double* gx) {
    const int n = ho * wo;
    for (int c = 0; c < cin; ++c) {
        for (int ky = 0; ky < kh; ++ky) {
            for (int kx = 0; kx < kw; ++kx) {
                const double* row = cols + (static_cast<size_t>(c) * kh * kw + ky * kw + kx) * n;
                for (int oy = 0; oy < ho; ++oy) {
                    const int iy = oy * stride + ky - pad;
                    if (iy < 0 || iy >= h) continue;
                    for (int ox = 0; ox < wo; ++ox) {
                        const int ix = ox * stride + kx - pad;
                        if (ix < 0 || ix >= w) continue;
                        gx[(static_cast<size_t>(c) * h + iy) * w + ix] += row[oy * wo + ox];
                    }
                }
            }
        }
    }
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride, int pad) {
    check(x.ndim() == 3 && w.ndim() == 4, "conv2d: expected x[C,H,W], w[Cout,Cin,kh,kw]");
    const int cin = x.dim(0), h = x.dim(1), ww = x.dim(2);
    const int cout = w.dim(0), kh = w.dim(2), kw = w.dim(3);
    check(w.dim(1) == cin, "conv2d: input channel mismatch, x has " + std::to_string(cin) +
                               ", kernel expects " + std::to_string(w.dim(1)));
    check(b.numel() == cout, "conv2d: bias size mismatch");
    const int ho = (h + 2 * pad - kh) / stride + 1;
    const int wo = (ww + 2 * pad - kw) / stride + 1;
    check(ho > 0 && wo > 0, "conv2d: empty output");
    const int kdim = cin * kh * kw;
    const int n = ho * wo;

    auto node = make_result({cout, ho, wo}, {&x, &w, &b});
    std::vector<double> cols(static_cast<size_t>(kdim) * n);
    im2col(x.data(), cin, h, ww, kh, kw, stride, pad, ho, wo, cols.data());
    MapM out(node->value.data(), cout, n);
    out.noalias() = CMapM(w.data(), cout, kdim) * CMapM(cols.data(), kdim, n);
    for (int c = 0; c < cout; ++c) {
        const double bv = b.data()[c];
        for (int i = 0; i < n; ++i) node->value[static_cast<size_t>(c) * n + i] += bv;
    }
    if (node->requires_grad) {
        node->backward_fn = [cin, h, ww, cout, kh, kw, stride, pad, ho, wo, kdim, n](TensorNode& self) {
            TensorNode* px = self.parents[0].get();
            TensorNode* pw = self.parents[1].get();
            TensorNode* pb = self.parents[2].get();
            CMapM g(self.grad.data(), cout, n);
            if (pw->requires_grad) {
                pw->ensure_grad();
                std::vector<double> cols2(static_cast<size_t>(kdim) * n);
                im2col(px->value.data(), cin, h, ww, kh, kw, stride, pad, ho, wo, cols2.data());
                MapM gw(pw->grad.data(), cout, kdim);
                gw.noalias() += g * CMapM(cols2.data(), kdim, n).transpose();
            }
            if (pb->requires_grad) {
                pb->ensure_grad();
                for (int c = 0; c < cout; ++c) {
                    double s = 0.0;
                    for (int i = 0; i < n; ++i) s += g(c, i);
                    pb->grad[static_cast<size_t>(c)] += s;
                }
            }
            if (px->requires_grad) {
                px->ensure_grad();
                std::vector<double> gcols(static_cast<size_t>(kdim) * n);
                MapM gc(gcols.data(), kdim, n);
                gc.noalias() = CMapM(pw->value.data(), cout, kdim).transpose() * g;
                col2im_accum(gcols.data(), cin, h, ww, kh, kw, stride, pad, ho, wo, px->grad.data());
            }
        };
    }
    return Tensor(node);
}

Tensor upsample_nearest2(const Tensor& x) {
    check(x.ndim() == 3, "upsample_nearest2: expected [C,H,W]");
    const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
    auto node = make_result({c, 2 * h, 2 * w}, {&x});
    for (int ch = 0; ch < c; ++ch)
        for (int y = 0; y < 2 * h; ++y)
            for (int xx = 0; xx < 2 * w; ++xx)
                node->value[(static_cast<size_t>(ch) * 2 * h + y) * 2 * w + xx] =
                    x.data()[(static_cast<size_t>(ch) * h + y / 2) * w + xx / 2];
    if (node->requires_grad) {
        node->backward_fn = [c, h, w](TensorNode& self) {
            TensorNode* p = self.parents[0].get();
            if (!p->requires_grad) return;
            p->ensure_grad();
            for (int ch = 0; ch < c; ++ch)
                for (int y = 0; y < 2 * h; ++y)
                    for (int xx = 0; xx < 2 * w; ++xx)
                        p->grad[(static_cast<size_t>(ch) * h + y / 2) * w + xx / 2] +=
                            self.grad[(static_cast<size_t>(ch) * 2 * h + y) * 2 * w + xx];
        };
    }
    return Tensor(node);
}

// ---------------------------------------------------------------- reductions

Tensor sum(const Tensor& x) {
    auto node = make_result({1}, {&x});
    double s = 0.0;
    for (size_t i = 0; i < x.values().size(); ++i) s += x.data()[i];
    node->value[0] = s;
    if (node->requires_grad) {
        node->backward_fn = [](TensorNode& self) {
            TensorNode* p = self.parents[0].get();
            if (!p->requires_grad) return;
            p->ensure_grad();
            for (auto& g : p->grad) g += self.grad[0];
        };
    }
    return Tensor(node);
}

Tensor mean(const Tensor& x) {
    const double n = static_cast<double>(x.numel());
    return scale(sum(x), 1.0 / n);
}

Tensor mse_loss(const Tensor& pred, const Tensor& target) {
    check(pred.shape() == target.shape(), "mse_loss: shape mismatch");
    auto node = make_result({1}, {&pred, &target});
    const size_t n = pred.values().size();
    double s = 0.0;
    for (size_t i = 0; i < n; ++i) {
        const double d = pred.data()[i] - target.data()[i];
        s += d * d;
    }
    node->value[0] = s / static_cast<double>(n);
    if (node->requires_grad) {
        node->backward_fn = [n](TensorNode& self) {
            TensorNode* pa = self.parents[0].get();
            TensorNode* pb = self.parents[1].get();
            const double c = 2.0 / static_cast<double>(n) * self.grad[0];
            if (pa->requires_grad) {
                pa->ensure_grad();
                for (size_t i = 0; i < n; ++i) pa->grad[i] += c * (pa->value[i] - pb->value[i]);
            }
            if (pb->requires_grad) {
                pb->ensure_grad();
                for (size_t i = 0; i < n; ++i) pb->grad[i] -= c * (pa->value[i] - pb->value[i]);
            }
        };
    }
    return Tensor(node);
}

}  // namespace fashionrag
