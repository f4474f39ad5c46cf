#include <doctest.h>

#include "fashionrag/adapter.hpp"
#include "fashionrag/config.hpp"
#include "fashionrag/nn.hpp"
#include "fashionrag/rng.hpp"

#include <cmath>
#include <string>
#include <vector>

using namespace fashionrag;

namespace {

Config desk_cfg() { return Config::profile_defaults("desk"); }

Image random_garment(uint64_t seed, int size = 64) {
    Rng rng(seed);
    Image img(size, size, 3);
    for (auto& v : img.data) v = rng.uniform();
    return img;
}

struct AdapterRig {
    Config cfg = desk_cfg();
    ParamStore ps;
    VisionEncoder vision;
    TextEmbedding embed;
    TextEncoderModel text;
    InversionAdapter adapter;
    AdapterConfig acfg;

    explicit AdapterRig(uint64_t seed = 42, bool identity_text = false) {
        acfg = AdapterConfig::from_config(cfg);
        vision = VisionEncoder::create(ps, cfg);
        embed = TextEmbedding::create(ps, cfg);
        text = identity_text ? TextEncoderModel::create_identity() : TextEncoderModel::create(ps, cfg);
        Rng rng(seed);
        adapter = InversionAdapter::create(ps, acfg, vision.width, rng);
    }

    std::vector<Tensor> blocks_for(const std::vector<uint64_t>& seeds) {
        std::vector<Tensor> out;
        for (uint64_t s : seeds) out.push_back(adapter.project(vision.extract(random_garment(s))));
        return out;
    }
};

bool same_values(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) return false;
    for (int64_t i = 0; i < a.numel(); ++i)
        if (a.data()[i] != b.data()[i]) return false;
    return true;
}

}  // namespace

TEST_CASE("adapter config reads the adapter.* keys") {
    const Config cfg = desk_cfg();
    const AdapterConfig a = AdapterConfig::from_config(cfg);
    CHECK(a.n_v == 4);
    CHECK(a.h_e == 64);
    CHECK(a.vit_depth == 2);
    CHECK(a.vit_heads == 2);
    CHECK(a.mlp_hidden == 128);
}

TEST_CASE("vision encoder is deterministic, frozen, and shape-stable") {
    AdapterRig r1(1), r2(2);  // different adapter seeds; frozen stacks must still agree
    CHECK(r1.ps.content_hash("vision_encoder.") == r2.ps.content_hash("vision_encoder."));
    CHECK(r1.ps.content_hash("text_embed.") == r2.ps.content_hash("text_embed."));
    CHECK(r1.ps.content_hash("text_encoder.") == r2.ps.content_hash("text_encoder."));
    CHECK_FALSE(r1.ps.trainable("vision_encoder.patch_proj"));
    CHECK_FALSE(r1.ps.trainable("text_embed.table"));

    const Image g = random_garment(7);
    const Tensor f1 = r1.vision.extract(g);
    const Tensor f2 = r2.vision.extract(g);
    CHECK(f1.shape() == Shape{16, 32});
    CHECK(same_values(f1, f2));
    CHECK_FALSE(f1.requires_grad());
}

TEST_CASE("adapter output block has shape [n_v, h_e] and depends on the garment") {
    AdapterRig r;
    const Tensor b1 = r.adapter.project(r.vision.extract(random_garment(10)));
    const Tensor b2 = r.adapter.project(r.vision.extract(random_garment(11)));
    CHECK(b1.shape() == Shape{4, 64});
    CHECK(b1.requires_grad());
    CHECK_FALSE(same_values(b1, b2));
}

TEST_CASE("zero final head emits an exactly zero pseudo block") {
    AdapterRig r;
    const Tensor w = r.ps.get("adapter.mlp_out.w");
    const Tensor b = r.ps.get("adapter.mlp_out.b");
    r.ps.set_values("adapter.mlp_out.w", std::vector<double>(static_cast<size_t>(w.numel()), 0.0));
    r.ps.set_values("adapter.mlp_out.b", std::vector<double>(static_cast<size_t>(b.numel()), 0.0));
    const Tensor block = r.adapter.project(r.vision.extract(random_garment(3)));
    for (int64_t i = 0; i < block.numel(); ++i) CHECK(block.data()[i] == 0.0);
}

TEST_CASE("sequence layout holds for every retrieval and caption count") {
    AdapterRig r;
    const int n_l = r.embed.n_l;
    const int n_v = r.acfg.n_v;
    const int prompt_len = static_cast<int>(DeskTokenizer::tokenize(kFixedPrompt).size());
    const std::vector<std::string> phrases = {"red top", "banded pattern", "classic style"};

    for (int n_r = 0; n_r <= 3; ++n_r) {
        std::vector<uint64_t> seeds;
        for (int i = 0; i < n_r; ++i) seeds.push_back(100 + static_cast<uint64_t>(i));
        const std::vector<Tensor> blocks = r.blocks_for(seeds);
        for (int n_c = 1; n_c <= 3; ++n_c) {
            std::string caption;
            for (int i = 0; i < n_c; ++i) {
                if (i) caption += ", ";
                caption += phrases[static_cast<size_t>(i)];
            }
            const auto seq = assemble_conditioning_sequence(caption, blocks, r.embed, n_v);
            CAPTURE(n_r);
            CAPTURE(n_c);
            CHECK(static_cast<int>(seq.roles.size()) == n_l);
            CHECK(seq.x_c.shape() == Shape{n_l, 64});
            const int caption_tokens = 2 * n_c;  // every toy phrase is two words
            CHECK(seq.n_q == caption_tokens);
            CHECK(seq.n_r_used == n_r);
            CHECK(seq.count(TokenRole::prompt) == 1 + prompt_len);
            CHECK(seq.count(TokenRole::caption) == caption_tokens + 1);
            CHECK(seq.count(TokenRole::pseudo) == n_r * n_v);
            const int used = 1 + prompt_len + caption_tokens + 1 + n_r * n_v;
            CHECK(seq.count(TokenRole::pad) == n_l - used);
            CHECK(seq.count(TokenRole::prompt) + seq.count(TokenRole::caption) +
                      seq.count(TokenRole::pseudo) + seq.count(TokenRole::pad) ==
                  n_l);

            // Segment order: prompt rows, caption rows, pseudo rows, pads.
            int pos = 0;
            for (int i = 0; i < 1 + prompt_len; ++i) CHECK(seq.roles[static_cast<size_t>(pos++)] == TokenRole::prompt);
            for (int i = 0; i < caption_tokens + 1; ++i) CHECK(seq.roles[static_cast<size_t>(pos++)] == TokenRole::caption);
            for (int i = 0; i < n_r * n_v; ++i) CHECK(seq.roles[static_cast<size_t>(pos++)] == TokenRole::pseudo);
            for (; pos < n_l; ++pos) CHECK(seq.roles[static_cast<size_t>(pos)] == TokenRole::pad);

            // Begin marker sits at row 0; pads are exactly zero.
            const double* row0 = seq.x_c.data();
            for (int j = 0; j < 64; ++j)
                CHECK(row0[j] == r.embed.table.data()[j] + r.embed.pos.data()[j]);
            for (int p = used; p < n_l; ++p)
                for (int j = 0; j < 64; ++j)
                    CHECK(seq.x_c.data()[static_cast<size_t>(p) * 64 + j] == 0.0);

            // Pseudo rows are the raw block values, rank order preserved.
            for (int b = 0; b < n_r; ++b)
                for (int v = 0; v < n_v; ++v)
                    for (int j = 0; j < 64; ++j) {
                        const int row = 1 + prompt_len + caption_tokens + 1 + b * n_v + v;
                        CHECK(seq.x_c.data()[static_cast<size_t>(row) * 64 + j] ==
                              blocks[static_cast<size_t>(b)].data()[static_cast<size_t>(v) * 64 + j]);
                    }
        }
    }
}

TEST_CASE("no-retrieval path is bit-identical to the text-only prefix") {
    AdapterRig r;
    const std::string caption = "blue dress, checkered pattern";
    const auto with = assemble_conditioning_sequence(caption, r.blocks_for({21, 22}), r.embed, r.acfg.n_v);
    const auto without = assemble_conditioning_sequence(caption, {}, r.embed, r.acfg.n_v);
    const int text_rows = 1 + static_cast<int>(DeskTokenizer::tokenize(kFixedPrompt).size()) + with.n_q + 1;
    for (int i = 0; i < text_rows * 64; ++i) CHECK(with.x_c.data()[i] == without.x_c.data()[i]);
    CHECK(without.count(TokenRole::pseudo) == 0);
    // And everything after the text rows in the no-retrieval sequence is pad.
    for (size_t i = static_cast<size_t>(text_rows); i < without.roles.size(); ++i)
        CHECK(without.roles[i] == TokenRole::pad);
}

TEST_CASE("permuting retrieved blocks permutes exactly the pseudo spans") {
    AdapterRig r;
    const auto blocks = r.blocks_for({31, 32, 33});
    const std::string caption = "green skirt";
    const auto ab = assemble_conditioning_sequence(caption, {blocks[0], blocks[1], blocks[2]}, r.embed, r.acfg.n_v);
    const auto ba = assemble_conditioning_sequence(caption, {blocks[2], blocks[0], blocks[1]}, r.embed, r.acfg.n_v);
    const int n_v = r.acfg.n_v;
    const int base = 1 + static_cast<int>(DeskTokenizer::tokenize(kFixedPrompt).size()) + ab.n_q + 1;
    auto span = [&](const ConditioningSequence& s, int slot, int row, int col) {
        return s.x_c.data()[static_cast<size_t>(base + slot * n_v + row) * 64 + col];
    };
    for (int v = 0; v < n_v; ++v)
        for (int j = 0; j < 64; ++j) {
            CHECK(span(ab, 0, v, j) == span(ba, 1, v, j));
            CHECK(span(ab, 1, v, j) == span(ba, 2, v, j));
            CHECK(span(ab, 2, v, j) == span(ba, 0, v, j));
        }
    // Text rows are untouched.
    for (int i = 0; i < base * 64; ++i) CHECK(ab.x_c.data()[i] == ba.x_c.data()[i]);
}

TEST_CASE("over-long captions are truncated from the tail, never the pseudo rows") {
    AdapterRig r;
    std::string caption;
    for (int i = 0; i < 40; ++i) caption += "word" + std::to_string(i) + " ";
    const auto blocks = r.blocks_for({41, 42, 43});
    const auto seq = assemble_conditioning_sequence(caption, blocks, r.embed, r.acfg.n_v);
    const int prompt_len = static_cast<int>(DeskTokenizer::tokenize(kFixedPrompt).size());
    const int budget = r.embed.n_l - (1 + prompt_len + 1 + 3 * r.acfg.n_v);
    CHECK(seq.n_q == budget);
    CHECK(seq.count(TokenRole::pseudo) == 3 * r.acfg.n_v);
    CHECK(seq.count(TokenRole::pad) == 0);

    // The kept caption rows embed the first `budget` words.
    const auto ids = DeskTokenizer::tokenize(caption);
    for (int i = 0; i < budget; ++i) {
        const int row = 1 + prompt_len + i;
        const double* want = r.embed.table.data() + static_cast<size_t>(ids[static_cast<size_t>(i)]) * 64;
        const double* ppos = r.embed.pos.data() + static_cast<size_t>(row) * 64;
        for (int j = 0; j < 64; ++j)
            CHECK(seq.x_c.data()[static_cast<size_t>(row) * 64 + j] == want[j] + ppos[j]);
    }
}

TEST_CASE("sequence assembly is fatal when prompt plus pseudo rows cannot fit") {
    Config cfg = desk_cfg();
    cfg.set("text.n_l", "16");  // 1 + 6 + 1 + 3*4 = 20 > 16
    ParamStore ps;
    TextEmbedding embed = TextEmbedding::create(ps, cfg);
    AdapterRig r;  // supplies blocks of the right shape
    const auto blocks = r.blocks_for({51, 52, 53});
    CHECK_THROWS_WITH_AS(assemble_conditioning_sequence("red top", blocks, embed, 4),
                         doctest::Contains("sequence length is 16"), std::runtime_error);
    // One block fits (1 + 6 + 1 + 4 = 12 <= 16).
    CHECK_NOTHROW(assemble_conditioning_sequence("red top", {blocks[0]}, embed, 4));
}

TEST_CASE("empty conditioning sequence is begin marker, end marker, pads") {
    AdapterRig r;
    const auto seq = empty_conditioning_sequence(r.embed, r.acfg.n_v);
    CHECK(seq.count(TokenRole::prompt) == 1);
    CHECK(seq.count(TokenRole::caption) == 1);
    CHECK(seq.count(TokenRole::pseudo) == 0);
    CHECK(seq.count(TokenRole::pad) == r.embed.n_l - 2);
    CHECK(seq.n_q == 0);
}

TEST_CASE("identity text encoder returns x_c unchanged") {
    AdapterRig r(42, /*identity_text=*/true);
    const auto seq = assemble_conditioning_sequence("red top", r.blocks_for({61}), r.embed, r.acfg.n_v);
    const Tensor psi = r.text.encode(seq);
    CHECK(same_values(psi, seq.x_c));
}

TEST_CASE("attention keep mask marks exactly the non-pad rows") {
    AdapterRig r;
    const auto seq = assemble_conditioning_sequence("red top", r.blocks_for({62}), r.embed, r.acfg.n_v);
    const auto keep = seq.attention_keep();
    REQUIRE(static_cast<int>(keep.size()) == r.embed.n_l);
    for (size_t i = 0; i < keep.size(); ++i)
        CHECK(keep[i] == (seq.roles[i] != TokenRole::pad ? 1 : 0));
}

TEST_CASE("causal text encoder output on real rows ignores tail garbage") {
    AdapterRig r;
    const auto seq = assemble_conditioning_sequence("red top", r.blocks_for({63}), r.embed, r.acfg.n_v);
    const Tensor psi = r.text.encode(seq);

    // Same sequence with pad rows overwritten by noise: prefix rows of psi
    // must not move, because the encoder is causal and pads sit at the tail.
    ConditioningSequence dirty = seq;
    std::vector<double> vals = seq.x_c.values();
    Rng noise(99);
    const int used = r.embed.n_l - seq.count(TokenRole::pad);
    for (size_t i = static_cast<size_t>(used) * 64; i < vals.size(); ++i) vals[i] = noise.normal();
    dirty.x_c = Tensor::from_vector(seq.x_c.shape(), std::move(vals));
    const Tensor psi_dirty = r.text.encode(dirty);
    for (int i = 0; i < used * 64; ++i) CHECK(psi.data()[i] == psi_dirty.data()[i]);
}

TEST_CASE("gradients reach the adapter but never the frozen stacks") {
    AdapterRig r;
    const auto blocks = r.blocks_for({71, 72});
    const auto seq = assemble_conditioning_sequence("red top, banded pattern", blocks, r.embed, r.acfg.n_v);
    Tensor psi = r.text.encode(seq);

    Rng prng(5);
    std::vector<double> pv(static_cast<size_t>(psi.numel()));
    for (auto& v : pv) v = prng.normal();
    const Tensor probe = Tensor::from_vector(psi.shape(), std::move(pv));
    Tensor loss = sum(mul(psi, probe));
    loss.backward();

    bool adapter_has_grad = false;
    for (const auto& name : r.ps.names_with_prefix("adapter.")) {
        if (!r.ps.get(name).raw_grad().empty()) adapter_has_grad = true;
    }
    CHECK(adapter_has_grad);
    for (const auto& prefix : {"vision_encoder.", "text_encoder.", "text_embed."})
        for (const auto& name : r.ps.names_with_prefix(prefix))
            CHECK(r.ps.get(name).raw_grad().empty());
}

TEST_CASE("adapter gradient matches central differences through the full chain") {
    AdapterRig r;
    const Image g1 = random_garment(81), g2 = random_garment(82);

    auto forward_loss = [&]() {
        std::vector<Tensor> blocks;
        blocks.push_back(r.adapter.project(r.vision.extract(g1)));
        blocks.push_back(r.adapter.project(r.vision.extract(g2)));
        const auto seq = assemble_conditioning_sequence("red top, classic style", blocks, r.embed, r.acfg.n_v);
        Tensor psi = r.text.encode(seq);
        Rng prng(6);
        std::vector<double> pv(static_cast<size_t>(psi.numel()));
        for (auto& v : pv) v = prng.normal();
        return sum(mul(psi, Tensor::from_vector(psi.shape(), std::move(pv))));
    };

    Tensor loss = forward_loss();
    loss.backward();

    struct Pick { const char* name; size_t idx; };
    const Pick picks[] = {
        {"adapter.input_proj.w", 17},
        {"adapter.query_tokens", 5},
        {"adapter.block0.attn.q.w", 33},
        {"adapter.block1.fc1.b", 2},
        {"adapter.mlp_mid.w", 101},
        {"adapter.mlp_out.w", 7},
        {"adapter.mlp_out.b", 0},
    };
    const double h = 1e-5;
    for (const auto& p : picks) {
        CAPTURE(p.name);
        Tensor param = r.ps.get(p.name);
        REQUIRE(p.idx < static_cast<size_t>(param.numel()));
        const double analytic = param.grad_or_zeros()[p.idx];
        const double saved = param.data()[p.idx];
        {
            NoGradGuard ng;
            param.data()[p.idx] = saved + h;
            const double up = forward_loss().item();
            param.data()[p.idx] = saved - h;
            const double down = forward_loss().item();
            param.data()[p.idx] = saved;
            const double fd = (up - down) / (2 * h);
            CHECK(std::abs(analytic - fd) <= 1e-4 * std::max({1.0, std::abs(analytic), std::abs(fd)}));
        }
    }
}

TEST_CASE("tokenizer is deterministic, case-folding, and punctuation-splitting") {
    const auto a = DeskTokenizer::tokenize("Red Top, banded PATTERN");
    const auto b = DeskTokenizer::tokenize("red top banded pattern");
    CHECK(a == b);
    CHECK(a.size() == 4);
    for (int id : a) {
        CHECK(id >= 2);
        CHECK(id < 2 + DeskTokenizer::kVocabWords);
    }
    CHECK(DeskTokenizer::tokenize("").empty());
    CHECK(DeskTokenizer::tokenize(kFixedPrompt).size() == 6);
}
