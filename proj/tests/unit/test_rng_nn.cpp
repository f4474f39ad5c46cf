#include <doctest.h>

#include "fashionrag/nn.hpp"
#include "fashionrag/rng.hpp"
#include "fashionrag/tensor.hpp"

#include <cmath>
#include <set>

using namespace fashionrag;

TEST_CASE("rng: fixed seed reproduces the stream exactly") {
    Rng a(42), b(42);
    for (int i = 0; i < 1000; ++i) CHECK(a.next_u64() == b.next_u64());
    Rng c(42), d(42);
    for (int i = 0; i < 1000; ++i) CHECK(c.normal() == d.normal());
}

TEST_CASE("rng: state save/restore resumes the identical stream") {
    Rng a(7);
    for (int i = 0; i < 17; ++i) a.normal();
    const auto st = a.save_state();
    std::vector<double> expect;
    for (int i = 0; i < 50; ++i) expect.push_back(a.normal());
    Rng b(0);
    b.restore_state(st);
    for (int i = 0; i < 50; ++i) CHECK(b.normal() == expect[static_cast<size_t>(i)]);
}

TEST_CASE("rng: normal moments") {
    Rng r(3);
    const int n = 200000;
    double s = 0.0, s2 = 0.0;
    for (int i = 0; i < n; ++i) {
        const double x = r.normal();
        s += x;
        s2 += x * x;
    }
    const double mean = s / n;
    const double var = s2 / n - mean * mean;
    CHECK(std::abs(mean) < 0.01);
    CHECK(std::abs(var - 1.0) < 0.02);
}

TEST_CASE("rng: uniform_index stays in range and covers all values") {
    Rng r(5);
    std::set<uint64_t> seen;
    for (int i = 0; i < 1000; ++i) {
        const uint64_t v = r.uniform_index(7);
        CHECK(v < 7);
        seen.insert(v);
    }
    CHECK(seen.size() == 7);
}

TEST_CASE("param store: creation, lookup, census") {
    Rng rng(1);
    ParamStore ps;
    Tensor w = ps.gaussian("block.w", {4, 3}, rng, 0.1);
    Tensor b = ps.zeros("block.b", {4});
    CHECK(ps.count() == 2);
    CHECK(ps.total_numel() == 16);
    CHECK(ps.trainable_numel() == 16);
    // re-creation returns the same node
    Tensor w2 = ps.gaussian("block.w", {4, 3}, rng, 0.1);
    CHECK(w2.node().get() == w.node().get());
    CHECK_THROWS(ps.get("missing"));
}

TEST_CASE("param store: content hash tracks values and prefix filters") {
    Rng rng(1);
    ParamStore ps;
    ps.gaussian("a.w", {2, 2}, rng, 0.1);
    ps.gaussian("b.w", {2, 2}, rng, 0.1);
    const uint64_t h0 = ps.content_hash();
    const uint64_t ha = ps.content_hash("a.");
    ps.get("b.w").values()[0] += 1.0;
    CHECK(ps.content_hash() != h0);
    CHECK(ps.content_hash("a.") == ha);  // untouched prefix unchanged
}

TEST_CASE("param store: freezing a prefix blocks gradient flow") {
    Rng rng(2);
    ParamStore ps;
    LinearLayer frozen = LinearLayer::create(ps, "enc.fc", 3, 3, rng);
    LinearLayer open = LinearLayer::create(ps, "adapter.fc", 3, 3, rng);
    ps.set_trainable("enc.", false);

    Tensor x = Tensor::from_vector({2, 3}, {1, 2, 3, 4, 5, 6});
    Tensor y = open.forward(frozen.forward(x));
    Tensor l = mean(mul(y, y));
    l.backward();
    CHECK(frozen.w.raw_grad().empty());
    CHECK(frozen.b.raw_grad().empty());
    CHECK_FALSE(open.w.raw_grad().empty());
}

TEST_CASE("adamw: converges on a quadratic and skips untouched params") {
    ParamStore ps;
    Tensor w = ps.constant("w", {1}, 5.0);
    Tensor unused = ps.constant("u", {1}, 3.0);
    AdamW opt;
    opt.lr = 0.1;
    opt.weight_decay = 0.0;
    for (int i = 0; i < 400; ++i) {
        ps.zero_grads();
        Tensor l = mul(w, w);
        sum(l).backward();
        opt.step(ps);
    }
    CHECK(std::abs(w.values()[0]) < 1e-2);
    CHECK(unused.values()[0] == 3.0);
}

TEST_CASE("adamw: weight decay is decoupled from the gradient path") {
    // With zero gradient contribution the decay term alone shrinks the weight:
    // p <- p - lr*wd*p each step (loss independent of p would leave grad empty,
    // so probe with a loss of zero coefficient times p plus a driven term).
    ParamStore ps;
    Tensor w = ps.constant("w", {1}, 2.0);
    AdamW opt;
    opt.lr = 0.01;
    opt.weight_decay = 0.5;
    ps.zero_grads();
    Tensor l = sum(scale(w, 0.0));
    l.backward();  // grad exists and equals 0
    opt.step(ps);
    CHECK(w.values()[0] == doctest::Approx(2.0 * (1.0 - 0.01 * 0.5)));
}

TEST_CASE("attention: probe rows sum to one and masked keys are dropped") {
    Rng rng(4);
    ParamStore ps;
    MultiheadAttention attn = MultiheadAttention::create(ps, "attn", 8, 2, 6, rng);
    AttnProbe probe;
    attn.probe = &probe;

    std::vector<double> xv(5 * 8), kvv(7 * 6);
    for (auto& v : xv) v = rng.normal();
    for (auto& v : kvv) v = rng.normal();
    Tensor x = Tensor::from_vector({5, 8}, xv);
    Tensor kv = Tensor::from_vector({7, 6}, kvv);
    std::vector<uint8_t> keep = {1, 1, 1, 0, 1, 0, 1};
    Tensor y = attn.forward(x, kv, &keep);
    CHECK(y.shape() == Shape{5, 8});
    CHECK(probe.row_sums.size() == 2 * 5);
    for (double s : probe.row_sums) CHECK(std::abs(s - 1.0) < 1e-5);

    // Masked key positions must not influence the output.
    kvv[3 * 6 + 2] += 50.0;
    kvv[5 * 6 + 0] -= 50.0;
    attn.probe = nullptr;
    Tensor kv2 = Tensor::from_vector({7, 6}, kvv);
    Tensor y2 = attn.forward(x, kv2, &keep);
    for (int i = 0; i < y.numel(); ++i) CHECK(y.data()[i] == y2.data()[i]);
}

TEST_CASE("transformer block: gradient matches finite differences") {
    Rng rng(11);
    ParamStore ps;
    TransformerBlock blk = TransformerBlock::create(ps, "blk", 6, 2, 12, rng);

    std::vector<double> xv(4 * 6);
    for (auto& v : xv) v = rng.normal();
    std::vector<double> probe(4 * 6);
    for (auto& v : probe) v = rng.normal();

    auto loss_val = [&]() {
        NoGradGuard ng;
        Tensor x = Tensor::from_vector({4, 6}, xv);
        Tensor y = blk.forward(x);
        double s = 0.0;
        for (size_t i = 0; i < probe.size(); ++i) s += y.data()[i] * probe[i];
        return s;
    };

    ps.zero_grads();
    Tensor x = Tensor::from_vector({4, 6}, xv);
    Tensor y = blk.forward(x);
    Tensor l = sum(mul(y, Tensor::from_vector({4, 6}, probe)));
    l.backward();

    // probe a handful of weights spread over the block
    const char* names[] = {"blk.attn.q.w", "blk.fc1.w", "blk.fc2.b", "blk.ln1.g", "blk.ln2.b"};
    for (const char* nm : names) {
        Tensor p = ps.get(nm);
        const auto g = p.grad_or_zeros();
        const size_t idx = p.values().size() / 2;
        const double keep = p.values()[idx];
        const double h = 1e-5;
        p.values()[idx] = keep + h;
        const double lp = loss_val();
        p.values()[idx] = keep - h;
        const double lm = loss_val();
        p.values()[idx] = keep;
        const double fd = (lp - lm) / (2 * h);
        INFO(nm, ": analytic ", g[idx], " fd ", fd);
        CHECK(std::abs(g[idx] - fd) <= 1e-6 * std::max({1.0, std::abs(fd), std::abs(g[idx])}));
    }
}

TEST_CASE("time embedding: range, determinism, distinctness") {
    auto e1 = sinusoidal_time_embedding(17.0, 32);
    auto e2 = sinusoidal_time_embedding(17.0, 32);
    auto e3 = sinusoidal_time_embedding(18.0, 32);
    CHECK(e1 == e2);
    CHECK(e1 != e3);
    for (double v : e1) CHECK(std::abs(v) <= 1.0);
    CHECK_THROWS(sinusoidal_time_embedding(1.0, 7));
}
