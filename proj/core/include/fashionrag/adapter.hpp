#pragma once

#include "fashionrag/config.hpp"
#include "fashionrag/image.hpp"
#include "fashionrag/nn.hpp"

#include <string>
#include <vector>

namespace fashionrag {

struct AdapterConfig {
    int n_v = 16;       // pseudo-tokens per garment
    int h_e = 1024;     // text embedding width
    int vit_depth = 2;
    int vit_heads = 2;
    int mlp_hidden = 128;

    static AdapterConfig from_config(const Config& cfg);
};

// Frozen garment-image featurizer: fixed-resolution patch projection with
// positional rows. Parameters are generated from a constant seed (a stand-in
// for pretrained weights) and registered non-trainable, so no gradient can
// ever reach them.
struct VisionEncoder {
    int input_size = 64;
    int patch = 16;
    int width = 32;
    Tensor patch_proj;  // [width, patch*patch*3]
    Tensor proj_bias;   // [width]
    Tensor pos_emb;     // [tokens, width]

    static VisionEncoder create(ParamStore& ps, const Config& cfg);
    int token_count() const { return (input_size / patch) * (input_size / patch); }
    // [tokens, width]; constant w.r.t. the tape (all inputs frozen).
    Tensor extract(const Image& garment) const;
};

// Trainable mapping from vision features to pseudo-token rows living in the
// text embedding space: learned query rows attend over projected features
// through a small transformer, then a two-layer MLP emits the block.
// Pseudo-token rows are layer-normalized to this per-component scale, the
// same scale the word-embedding table is drawn with.
inline constexpr double kPseudoRowStd = 0.02;

struct InversionAdapter {
    AdapterConfig cfg;
    LinearLayer input_proj;  // vision width -> h_e
    Tensor query_tokens;     // [n_v, h_e]
    std::vector<TransformerBlock> blocks;
    LinearLayer mlp_mid, mlp_out;

    static InversionAdapter create(ParamStore& ps, const AdapterConfig& cfg, int vision_width,
                                   Rng& rng);
    Tensor project(const Tensor& features) const;  // [n_v, h_e], rows at kPseudoRowStd
};

// Lowercase word tokenizer with a hashed vocabulary. Ids 0 and 1 are the
// begin/end markers; word ids start at 2.
struct DeskTokenizer {
    static constexpr int kVocabWords = 256;
    static constexpr int kBos = 0;
    static constexpr int kEos = 1;
    static std::vector<int> tokenize(const std::string& text);  // word ids only
};

// Frozen token-embedding and position tables of the text stack.
struct TextEmbedding {
    int n_l = 77;
    int h_e = 1024;
    Tensor table;  // [2 + vocab, h_e]
    Tensor pos;    // [n_l, h_e]
    static TextEmbedding create(ParamStore& ps, const Config& cfg);
};

enum class TokenRole : uint8_t { prompt, caption, pseudo, pad };

// Fixed-length conditioning sequence x_c. Layout: begin marker and the fixed
// prompt (role prompt), caption tokens and the end marker (role caption),
// pseudo blocks in retrieval-rank order, then zero padding. Pseudo rows are
// inserted raw, bypassing the embedding lookup, and carry the adapter's
// gradient; pad rows are exactly zero.
struct ConditioningSequence {
    Tensor x_c;                    // [n_l, h_e]
    std::vector<TokenRole> roles;  // size n_l
    int n_q = 0;                   // caption tokens kept (after truncation)
    int n_r_used = 0;

    std::vector<uint8_t> attention_keep() const;  // 1 where role != pad
    int count(TokenRole r) const;
};

inline constexpr const char* kFixedPrompt = "a photo of a model wearing";

// blocks: one [n_v, h_e] pseudo block per retrieved garment, rank order.
// Over-long captions are truncated from the tail; pseudo rows are never
// dropped. If the prompt and pseudo rows alone cannot fit, that is a fatal
// configuration error.
ConditioningSequence assemble_conditioning_sequence(const std::string& caption,
                                                    const std::vector<Tensor>& blocks,
                                                    const TextEmbedding& embedding,
                                                    int n_v,
                                                    const std::string& prompt = kFixedPrompt);

// Unconditional sequence used when the text/retrieval condition is dropped:
// begin marker, end marker, zero padding.
ConditioningSequence empty_conditioning_sequence(const TextEmbedding& embedding, int n_v);

// Frozen sequence encoder producing psi. Causal self-attention keeps every
// prefix position independent of the zero padding at the tail. The identity
// variant passes x_c through untouched (unit-test hook).
struct TextEncoderModel {
    bool identity = false;
    int depth = 2;
    std::vector<TransformerBlock> blocks;
    LayerNormLayer final_ln;

    static TextEncoderModel create(ParamStore& ps, const Config& cfg);
    static TextEncoderModel create_identity();
    Tensor encode(const ConditioningSequence& seq) const;  // [n_l, h_e]
};

}  // namespace fashionrag
