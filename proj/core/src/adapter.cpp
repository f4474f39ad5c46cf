#include "fashionrag/adapter.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <sstream>
#include <stdexcept>

namespace fashionrag {

namespace {

// Frozen stacks stand in for pretrained weights, so their init must not
// depend on the run seed.
constexpr uint64_t kVisionSeed = 0x76697331u;
constexpr uint64_t kTextEmbedSeed = 0x74786d62u;
constexpr uint64_t kTextEncSeed = 0x74656e63u;

}  // namespace

AdapterConfig AdapterConfig::from_config(const Config& cfg) {
    AdapterConfig a;
    a.n_v = static_cast<int>(cfg.integer("adapter.n_v"));
    a.h_e = static_cast<int>(cfg.integer("adapter.h_e"));
    a.vit_depth = static_cast<int>(cfg.integer("adapter.depth"));
    a.vit_heads = static_cast<int>(cfg.integer("adapter.heads"));
    a.mlp_hidden = static_cast<int>(cfg.integer("adapter.mlp_hidden"));
    if (a.n_v < 1 || a.h_e < 1) throw std::runtime_error("adapter: n_v and h_e must be positive");
    return a;
}

VisionEncoder VisionEncoder::create(ParamStore& ps, const Config& cfg) {
    VisionEncoder e;
    e.input_size = static_cast<int>(cfg.integer("vision.input"));
    e.patch = static_cast<int>(cfg.integer("vision.patch"));
    e.width = static_cast<int>(cfg.integer("vision.width"));
    if (e.input_size % e.patch != 0)
        throw std::runtime_error("vision encoder: input size not divisible by patch size");
    const int patch_dim = e.patch * e.patch * 3;
    Rng rng(kVisionSeed);
    e.patch_proj = ps.gaussian("vision_encoder.patch_proj", {e.width, patch_dim}, rng,
                               1.0 / std::sqrt(static_cast<double>(patch_dim)));
    e.proj_bias = ps.zeros("vision_encoder.proj_bias", {e.width});
    e.pos_emb = ps.gaussian("vision_encoder.pos_emb", {e.token_count(), e.width}, rng, 0.02);
    ps.set_trainable("vision_encoder.", false);
    return e;
}

Tensor VisionEncoder::extract(const Image& garment) const {
    NoGradGuard ng;
    Image rgb = to_rgb(garment);
    if (rgb.width != input_size || rgb.height != input_size)
        rgb = resize_bilinear(rgb, input_size, input_size);
    const int grid = input_size / patch;
    const int tokens = grid * grid;
    const int patch_dim = patch * patch * 3;
    std::vector<double> rows(static_cast<size_t>(tokens) * patch_dim);
    for (int ty = 0; ty < grid; ++ty) {
        for (int tx = 0; tx < grid; ++tx) {
            double* row = rows.data() + static_cast<size_t>(ty * grid + tx) * patch_dim;
            size_t k = 0;
            for (int c = 0; c < 3; ++c)
                for (int y = 0; y < patch; ++y)
                    for (int x = 0; x < patch; ++x)
                        row[k++] = rgb.at(c, ty * patch + y, tx * patch + x);
        }
    }
    Tensor x = Tensor::from_vector({tokens, patch_dim}, std::move(rows));
    return add(linear(x, patch_proj, proj_bias), pos_emb);
}

InversionAdapter InversionAdapter::create(ParamStore& ps, const AdapterConfig& cfg,
                                          int vision_width, Rng& rng) {
    InversionAdapter a;
    a.cfg = cfg;
    a.input_proj = LinearLayer::create(ps, "adapter.input_proj", vision_width, cfg.h_e, rng);
    a.query_tokens = ps.gaussian("adapter.query_tokens", {cfg.n_v, cfg.h_e}, rng, 0.02);
    for (int d = 0; d < cfg.vit_depth; ++d) {
        std::ostringstream name;
        name << "adapter.block" << d;
        a.blocks.push_back(TransformerBlock::create(ps, name.str(), cfg.h_e, cfg.vit_heads,
                                                    cfg.mlp_hidden, rng));
    }
    a.mlp_mid = LinearLayer::create(ps, "adapter.mlp_mid", cfg.h_e, cfg.mlp_hidden, rng);
    a.mlp_out.w = ps.gaussian("adapter.mlp_out.w", {cfg.h_e, cfg.mlp_hidden}, rng, 0.01);
    a.mlp_out.b = ps.zeros("adapter.mlp_out.b", {cfg.h_e});
    return a;
}

Tensor InversionAdapter::project(const Tensor& features) const {
    if (features.ndim() != 2 || features.dim(1) != input_proj.w.dim(1)) {
        throw std::runtime_error("adapter: feature width " + shape_str(features.shape()) +
                                 " does not match input projection");
    }
    Tensor x = concat_rows({query_tokens, input_proj.forward(features)});
    for (const auto& blk : blocks) x = blk.forward(x);
    Tensor q = slice_rows(x, 0, cfg.n_v);
    Tensor out = mlp_out.forward(gelu(mlp_mid.forward(q)));
    // Pseudo tokens stand in for word embeddings, so each row is pinned to
    // the embedding-table scale (std 0.02). Without the pin the row norm is
    // a free direction: the downstream encoder starts with a LayerNorm, the
    // loss never constrains the magnitude, and a drifting adapter can bury
    // the garment-specific signal under a huge common mode.
    const int h_e = cfg.h_e;
    std::vector<double> g(static_cast<size_t>(h_e), kPseudoRowStd);
    const Tensor gain = Tensor::from_vector({h_e}, std::move(g));
    return layernorm(out, gain, Tensor::zeros({h_e}));
}

std::vector<int> DeskTokenizer::tokenize(const std::string& text) {
    std::vector<int> ids;
    std::string word;
    auto flush = [&]() {
        if (word.empty()) return;
        const uint64_t h = fnv1a_bytes(word.data(), word.size());
        ids.push_back(2 + static_cast<int>(h % kVocabWords));
        word.clear();
    };
    for (char ch : text) {
        const unsigned char u = static_cast<unsigned char>(ch);
        if (std::isalnum(u))
            word.push_back(static_cast<char>(std::tolower(u)));
        else
            flush();
    }
    flush();
    return ids;
}

TextEmbedding TextEmbedding::create(ParamStore& ps, const Config& cfg) {
    TextEmbedding t;
    t.n_l = static_cast<int>(cfg.integer("text.n_l"));
    t.h_e = static_cast<int>(cfg.integer("adapter.h_e"));
    Rng rng(kTextEmbedSeed);
    t.table = ps.gaussian("text_embed.table", {2 + DeskTokenizer::kVocabWords, t.h_e}, rng, 0.02);
    t.pos = ps.gaussian("text_embed.pos", {t.n_l, t.h_e}, rng, 0.01);
    ps.set_trainable("text_embed.", false);
    return t;
}

std::vector<uint8_t> ConditioningSequence::attention_keep() const {
    std::vector<uint8_t> keep(roles.size());
    for (size_t i = 0; i < roles.size(); ++i) keep[i] = roles[i] != TokenRole::pad ? 1 : 0;
    return keep;
}

int ConditioningSequence::count(TokenRole r) const {
    return static_cast<int>(std::count(roles.begin(), roles.end(), r));
}

ConditioningSequence assemble_conditioning_sequence(const std::string& caption,
                                                    const std::vector<Tensor>& blocks,
                                                    const TextEmbedding& embedding,
                                                    int n_v,
                                                    const std::string& prompt) {
    const int n_l = embedding.n_l;
    const int h_e = embedding.h_e;
    const int n_r = static_cast<int>(blocks.size());
    for (const Tensor& b : blocks) {
        if (b.ndim() != 2 || b.dim(0) != n_v || b.dim(1) != h_e)
            throw std::runtime_error("conditioning: pseudo block shape " + shape_str(b.shape()) +
                                     " does not match [n_v, h_e]");
    }

    const std::vector<int> prompt_ids = DeskTokenizer::tokenize(prompt);
    const int fixed = 1 + static_cast<int>(prompt_ids.size()) + 1 + n_r * n_v;
    if (fixed > n_l) {
        std::ostringstream msg;
        msg << "conditioning: prompt (" << prompt_ids.size() << " tokens), markers and " << n_r
            << "x" << n_v << " pseudo rows need " << fixed << " positions but the sequence length is "
            << n_l;
        throw std::runtime_error(msg.str());
    }

    std::vector<int> caption_ids = DeskTokenizer::tokenize(caption);
    const int budget = n_l - fixed;
    const int n_q = std::min<int>(static_cast<int>(caption_ids.size()), budget);
    caption_ids.resize(static_cast<size_t>(n_q));  // over-long captions lose the tail

    ConditioningSequence seq;
    seq.n_q = n_q;
    seq.n_r_used = n_r;
    seq.roles.reserve(static_cast<size_t>(n_l));

    // Embedded text rows (begin marker, prompt, caption, end marker) are a
    // single constant tensor: the tables are frozen, so no tape is needed.
    const int n_text = 1 + static_cast<int>(prompt_ids.size()) + n_q + 1;
    std::vector<double> text_rows(static_cast<size_t>(n_text) * h_e);
    std::vector<int> token_ids;
    token_ids.push_back(DeskTokenizer::kBos);
    token_ids.insert(token_ids.end(), prompt_ids.begin(), prompt_ids.end());
    token_ids.insert(token_ids.end(), caption_ids.begin(), caption_ids.end());
    token_ids.push_back(DeskTokenizer::kEos);
    const double* table = embedding.table.data();
    const double* pos = embedding.pos.data();
    for (int i = 0; i < n_text; ++i) {
        const double* trow = table + static_cast<size_t>(token_ids[static_cast<size_t>(i)]) * h_e;
        const double* prow = pos + static_cast<size_t>(i) * h_e;
        double* out = text_rows.data() + static_cast<size_t>(i) * h_e;
        for (int j = 0; j < h_e; ++j) out[j] = trow[j] + prow[j];
    }

    for (size_t i = 0; i < 1 + prompt_ids.size(); ++i) seq.roles.push_back(TokenRole::prompt);
    for (int i = 0; i < n_q + 1; ++i) seq.roles.push_back(TokenRole::caption);
    for (int i = 0; i < n_r * n_v; ++i) seq.roles.push_back(TokenRole::pseudo);
    while (static_cast<int>(seq.roles.size()) < n_l) seq.roles.push_back(TokenRole::pad);

    std::vector<Tensor> parts;
    parts.push_back(Tensor::from_vector({n_text, h_e}, std::move(text_rows)));
    for (const Tensor& b : blocks) parts.push_back(b);
    const int n_pad = n_l - fixed - n_q;
    if (n_pad > 0) parts.push_back(Tensor::zeros({n_pad, h_e}));
    seq.x_c = concat_rows(parts);
    return seq;
}

ConditioningSequence empty_conditioning_sequence(const TextEmbedding& embedding, int n_v) {
    return assemble_conditioning_sequence("", {}, embedding, n_v, "");
}

TextEncoderModel TextEncoderModel::create(ParamStore& ps, const Config& cfg) {
    TextEncoderModel m;
    const int h_e = static_cast<int>(cfg.integer("adapter.h_e"));
    Rng rng(kTextEncSeed);
    for (int d = 0; d < m.depth; ++d) {
        std::ostringstream name;
        name << "text_encoder.block" << d;
        m.blocks.push_back(TransformerBlock::create(ps, name.str(), h_e, 2, 2 * h_e, rng));
    }
    m.final_ln = LayerNormLayer::create(ps, "text_encoder.final_ln", h_e);
    ps.set_trainable("text_encoder.", false);
    return m;
}

TextEncoderModel TextEncoderModel::create_identity() {
    TextEncoderModel m;
    m.identity = true;
    return m;
}

Tensor TextEncoderModel::encode(const ConditioningSequence& seq) const {
    if (identity) return seq.x_c;
    // Causal attention: every prefix row is independent of the zero padding
    // behind it, and caption rows never see the pseudo rows appended later.
    Tensor x = seq.x_c;
    for (const auto& blk : blocks) x = blk.forward(x, nullptr, /*causal=*/true);
    return final_ln.forward(x);
}

}  // namespace fashionrag
