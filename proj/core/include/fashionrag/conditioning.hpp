#pragma once

#include "fashionrag/config.hpp"
#include "fashionrag/dataset.hpp"
#include "fashionrag/image.hpp"
#include "fashionrag/nn.hpp"

#include <array>
#include <string>

namespace fashionrag {

// Patch-averaging stand-in for a latent VAE: every patch x patch block of
// the RGB input becomes one latent cell with channels [2r-1, 2g-1, 2b-1,
// 2 * luminance_spread]. The decoder paints flat blocks from the first three
// channels, so motifs whose bands sit on the patch grid survive a round trip.
struct PatchColorVae {
    int patch = 8;           // spatial downsample factor
    bool identity = false;   // patch 1, passthrough color (test hook)
    double latent_scale = 1.0;
    double logvar = -6.0;    // fixed posterior spread for encode_sample

    static PatchColorVae from_config(const Config& cfg);
    static PatchColorVae identity_vae();

    Tensor encode_mean(const Image& rgb) const;            // [4, H/p, W/p], unscaled
    Tensor encode_sample(const Image& rgb, Rng& rng) const;
    Image decode(const Tensor& latent) const;              // expects unscaled

    // Diffusion-side views: scaled on the way in, unscaled before decode.
    Tensor latent_from_image(const Image& rgb) const;
    Image image_from_latent(const Tensor& latent) const;
};

inline constexpr int kLatentChannels = 4;
inline constexpr int kSpatialChannels = 27;  // 4 latent + 1 mask + 4 masked + 18 pose

// Edit region is zeroed: out = I * (1 - M). Mask must be 1-channel and match.
Image apply_mask_complement(const Image& rgb, const Image& mask);

// Binary masks move to latent resolution with nearest neighbour (no gray
// halos); pose heatmaps move bilinearly.
Tensor resize_mask_to_latent(const Image& mask, int lw, int lh);
Tensor resize_pose_to_latent(const Tensor& pose, int lw, int lh);

// 18 Gaussian heatmaps at image resolution, peak 1 at the joint, sigma in
// pixels. A joint with confidence <= 0 leaves its channel all-zero.
Tensor render_pose_heatmaps(const std::array<Keypoint, kNumKeypoints>& kps, int w, int h,
                            double sigma);

// VAE posterior mean of the masked image, multiplied by the latent scale.
Tensor encode_masked_image(const Image& rgb, const Image& mask, const PatchColorVae& vae);

// gamma = [z_t | mask | masked latent | pose], 27 channels. Each piece is
// validated separately so a shape error names the offending input.
Tensor assemble_spatial_input(const Tensor& z_t, const Tensor& mask_latent,
                              const Tensor& masked_latent, const Tensor& pose_latent);

// Widens a conv weight from the 9-channel layout to the 27-channel one:
// existing input slices are copied, the 18 appended pose slices start at
// zero, the bias is untouched. Any other base width is a hard error.
void extend_input_projection(ParamStore& ps, const std::string& weight_name);

}  // namespace fashionrag
