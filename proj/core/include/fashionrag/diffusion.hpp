#pragma once

#include "fashionrag/adapter.hpp"
#include "fashionrag/conditioning.hpp"
#include "fashionrag/config.hpp"
#include "fashionrag/dataset.hpp"
#include "fashionrag/nn.hpp"
#include "fashionrag/retrieval.hpp"

#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace fashionrag {

// Scaled-linear beta schedule: linear in sqrt(beta) between the endpoints.
struct NoiseSchedule {
    int t_train = 1000;
    std::vector<double> betas;
    std::vector<double> alphas_cumprod;

    static NoiseSchedule from_config(const Config& cfg);
    static NoiseSchedule make(int t_train, double beta_start, double beta_end);
    double abar(int t) const { return alphas_cumprod[static_cast<size_t>(t)]; }
};

// z_t = sqrt(abar_t) z0 + sqrt(1 - abar_t) eps, elementwise on the latent.
Tensor forward_noising(const NoiseSchedule& sched, const Tensor& z0, const Tensor& eps, int t);

struct ResBlock {
    GroupNormLayer gn1, gn2;
    Conv2dLayer conv1, conv2;
    Conv2dLayer skip;  // 1x1, only when cin != cout
    bool has_skip = false;
    LinearLayer time_proj;
    static ResBlock create(ParamStore& ps, const std::string& name, int cin, int cout,
                           int groups, int time_dim, Rng& rng);
    Tensor forward(const Tensor& x, const Tensor& temb) const;
};

// Spatial cross-attention against the text sequence psi; one per resolution.
struct CrossBlock {
    LayerNormLayer ln;
    MultiheadAttention attn;
    static CrossBlock create(ParamStore& ps, const std::string& name, int channels, int heads,
                             int context_dim, Rng& rng);
    Tensor forward(const Tensor& x, const Tensor& psi, const std::vector<uint8_t>* keep) const;
};

// Two-down / two-up latent U-Net. Channel plan comes from unet.channels,
// cross-attention keys/values are the encoded conditioning sequence.
struct UNetModel {
    std::vector<int> channels;  // per resolution, lowest first
    int groups = 8;
    int time_dim = 64;
    int in_channels = 9;
    int attn_heads = 4;

    Conv2dLayer conv_in;
    LinearLayer time_fc1, time_fc2;
    ResBlock down_rb0, down_rb1;
    CrossBlock down_x0, down_x1;
    Conv2dLayer down0, down1;  // stride-2
    ResBlock mid_rb1, mid_rb2;
    CrossBlock mid_x;
    Conv2dLayer up_conv0, up_conv1;  // channel reducers after nearest upsample
    ResBlock up_rb0, up_rb1;
    GroupNormLayer gn_out;
    Conv2dLayer conv_out;  // zero-init: the fresh model predicts zero noise

    static UNetModel create(ParamStore& ps, const Config& cfg, int in_channels, Rng& rng);
    // gamma: [in_channels, h, w]; psi: [n_l, h_e]; keep masks pad rows.
    Tensor forward(const Tensor& gamma, double t, const Tensor& psi,
                   const std::vector<uint8_t>* keep) const;
};

// Everything one run needs, sharing a single ParamStore.
struct PipelineModel {
    Config cfg;
    int stage = 1;  // 1: 9-channel input, adapter training; 2: 27-channel input
    ParamStore ps;
    VisionEncoder vision;
    TextEmbedding embed;
    TextEncoderModel text;
    InversionAdapter adapter;
    UNetModel unet;
    PatchColorVae vae;
    NoiseSchedule sched;

    int spatial_channels() const { return stage == 1 ? 9 : kSpatialChannels; }
    // Pseudo-token blocks for garment images, rank order preserved.
    std::vector<Tensor> pseudo_blocks(const std::vector<Image>& garments) const;
    // psi plus the pad mask for a caption and retrieved garments.
    std::pair<Tensor, std::vector<uint8_t>> encode_condition(const std::string& caption,
                                                             const std::vector<Image>& garments) const;
};

// stage 1 freezes everything but the adapter; stage 2 also trains the U-Net.
// The input projection of a stage-2 model is the widened 27-channel one.
PipelineModel build_pipeline(const Config& cfg, int stage, uint64_t seed);

// Promotes a trained stage-1 model in place: widens the input projection
// (pose slices start at zero) and unfreezes the U-Net.
void promote_to_stage2(PipelineModel& model);

// Versioned binary checkpoint holding stage, config echo, every parameter,
// and optionally optimizer moments and the data-order RNG state.
void save_checkpoint(const std::string& path, const PipelineModel& model,
                     const AdamW* opt = nullptr, const Rng* rng = nullptr);
struct CheckpointInfo {
    int stage = 0;
    Config config;
    bool has_optimizer = false;
    bool has_rng = false;
};
CheckpointInfo peek_checkpoint(const std::string& path);
// Rebuilds the pipeline from the stored config/stage, then loads values.
PipelineModel load_pipeline(const std::string& path, AdamW* opt = nullptr, Rng* rng = nullptr);

// Per-batch retrieval count: uniform over {0,1,2,3}.
int sample_retrieval_count(Rng& rng);

// One deterministic training example, fully materialized so a loss can be
// re-evaluated for finite differences.
struct TrainExample {
    Tensor z0;            // scaled latent of the person image
    Tensor eps;           // target noise, same shape
    int t = 0;
    Tensor mask_latent;   // [1,h,w]
    Tensor masked_latent; // [4,h,w]
    Tensor pose_latent;   // [18,h,w], ignored in stage 1
    bool drop_pose = false;
    // Caption and garments drop independently: examples where the pseudo
    // tokens are the only appearance source are what teach the model to
    // read them. Both dropped together is the unconditional branch.
    bool drop_text = false;
    std::string caption;
    std::vector<Image> garments;  // leave empty to drop the garment condition
};

Tensor example_training_loss(const PipelineModel& model, const TrainExample& ex);

struct TrainOptions {
    std::string dataset_root;
    std::string index_path;
    std::string out_dir;         // loss log and checkpoints land here
    int steps = 0;               // 0: take from config
    std::optional<std::string> resume_from;
    std::function<void(int64_t, double)> progress;  // step, smoothed loss
};

struct TrainReport {
    int64_t steps = 0;
    double initial_loss = 0.0;  // mean over the first smoothing window
    double final_loss = 0.0;    // mean over the last smoothing window
    std::string checkpoint_path;
    std::string loss_log_path;
};

TrainReport train_stage1(const Config& cfg, const TrainOptions& opt);
TrainReport train_stage2(const Config& cfg, const TrainOptions& opt);

// eps-hat = sum_i coef_i eps_i with coef_i = s_i - s_{i+1}, s_0 = 1 and
// s_{n} = 0; conditions are ordered weakest to strongest. Zero coefficients
// are skipped, so equal adjacent scales telescope exactly.
Tensor combine_guided(const std::vector<Tensor>& eps, const std::vector<double>& scales);

struct GenerateRequest {
    Image person;
    Image mask;
    std::array<Keypoint, kNumKeypoints> keypoints{};
    bool has_pose = false;
    std::string caption;
    std::vector<Image> garments;  // rank order
    uint64_t seed = 0;
};

struct GenerateResult {
    Image image;
    int steps = 0;
    bool identity = false;  // all-zero mask: input returned untouched
};

// Deterministic DDIM edit. The final image is composited per pixel from the
// decoded latent inside the mask and the input outside it, so unmasked
// pixels are returned bit-exactly.
GenerateResult generate(const PipelineModel& model, const GenerateRequest& req);

}  // namespace fashionrag
