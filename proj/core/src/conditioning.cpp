#include "fashionrag/conditioning.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>

namespace fashionrag {

namespace {

void check_divisible(const Image& img, int patch) {
    if (img.width % patch != 0 || img.height % patch != 0) {
        std::ostringstream msg;
        msg << "vae: image " << img.width << "x" << img.height
            << " is not divisible by the patch size " << patch;
        throw std::runtime_error(msg.str());
    }
}

double luminance(const Image& rgb, int y, int x) {
    return 0.299 * rgb.at(0, y, x) + 0.587 * rgb.at(1, y, x) + 0.114 * rgb.at(2, y, x);
}

}  // namespace

PatchColorVae PatchColorVae::from_config(const Config& cfg) {
    PatchColorVae v;
    v.patch = static_cast<int>(cfg.integer("vae.downsample"));
    v.latent_scale = cfg.real("vae.latent_scale");
    if (v.patch < 1) throw std::runtime_error("vae: downsample must be positive");
    return v;
}

PatchColorVae PatchColorVae::identity_vae() {
    PatchColorVae v;
    v.patch = 1;
    v.identity = true;
    return v;
}

Tensor PatchColorVae::encode_mean(const Image& input) const {
    const Image rgb = to_rgb(input);
    check_divisible(rgb, patch);
    const int lh = rgb.height / patch;
    const int lw = rgb.width / patch;
    std::vector<double> out(static_cast<size_t>(kLatentChannels) * lh * lw, 0.0);
    const double inv_n = 1.0 / (static_cast<double>(patch) * patch);
    for (int py = 0; py < lh; ++py) {
        for (int px = 0; px < lw; ++px) {
            double mean[3] = {0, 0, 0};
            for (int y = 0; y < patch; ++y)
                for (int x = 0; x < patch; ++x)
                    for (int c = 0; c < 3; ++c)
                        mean[c] += rgb.at(c, py * patch + y, px * patch + x);
            for (int c = 0; c < 3; ++c) mean[c] *= inv_n;
            double spread = 0.0;
            if (!identity) {
                const double ml = 0.299 * mean[0] + 0.587 * mean[1] + 0.114 * mean[2];
                for (int y = 0; y < patch; ++y)
                    for (int x = 0; x < patch; ++x)
                        spread += std::abs(luminance(rgb, py * patch + y, px * patch + x) - ml);
                spread *= inv_n;
            }
            const size_t cell = static_cast<size_t>(py) * lw + px;
            const size_t plane = static_cast<size_t>(lh) * lw;
            for (int c = 0; c < 3; ++c) out[static_cast<size_t>(c) * plane + cell] = 2.0 * mean[c] - 1.0;
            out[3 * plane + cell] = 2.0 * spread;
        }
    }
    return Tensor::from_vector({kLatentChannels, lh, lw}, std::move(out));
}

Tensor PatchColorVae::encode_sample(const Image& rgb, Rng& rng) const {
    Tensor mean = encode_mean(rgb);
    const double sigma = std::exp(0.5 * logvar);
    std::vector<double> vals = mean.values();
    for (auto& v : vals) v += sigma * rng.normal();
    return Tensor::from_vector(mean.shape(), std::move(vals));
}

Image PatchColorVae::decode(const Tensor& latent) const {
    if (latent.ndim() != 3 || latent.dim(0) != kLatentChannels)
        throw std::runtime_error("vae: decode expects [4, h, w], got " + shape_str(latent.shape()));
    const int lh = latent.dim(1);
    const int lw = latent.dim(2);
    Image img(lw * patch, lh * patch, 3);
    const size_t plane = static_cast<size_t>(lh) * lw;
    for (int py = 0; py < lh; ++py)
        for (int px = 0; px < lw; ++px) {
            const size_t cell = static_cast<size_t>(py) * lw + px;
            for (int c = 0; c < 3; ++c) {
                double v = (latent.data()[static_cast<size_t>(c) * plane + cell] + 1.0) / 2.0;
                v = std::min(1.0, std::max(0.0, v));
                for (int y = 0; y < patch; ++y)
                    for (int x = 0; x < patch; ++x)
                        img.at(c, py * patch + y, px * patch + x) = v;
            }
        }
    return img;
}

Tensor PatchColorVae::latent_from_image(const Image& rgb) const {
    Tensor z = encode_mean(rgb);
    if (latent_scale != 1.0)
        for (auto& v : z.values()) v *= latent_scale;
    return z;
}

Image PatchColorVae::image_from_latent(const Tensor& latent) const {
    if (latent_scale == 1.0) return decode(latent);
    std::vector<double> vals = latent.values();
    for (auto& v : vals) v /= latent_scale;
    return decode(Tensor::from_vector(latent.shape(), std::move(vals)));
}

Image apply_mask_complement(const Image& rgb, const Image& mask) {
    if (mask.channels != 1)
        throw std::runtime_error("mask must be single-channel");
    if (mask.width != rgb.width || mask.height != rgb.height) {
        std::ostringstream msg;
        msg << "mask " << mask.width << "x" << mask.height << " does not match image "
            << rgb.width << "x" << rgb.height;
        throw std::runtime_error(msg.str());
    }
    Image out = rgb;
    for (int c = 0; c < out.channels; ++c)
        for (int y = 0; y < out.height; ++y)
            for (int x = 0; x < out.width; ++x)
                out.at(c, y, x) *= 1.0 - mask.at(0, y, x);
    return out;
}

Tensor resize_mask_to_latent(const Image& mask, int lw, int lh) {
    const Image gray = mask.channels == 1 ? mask : to_gray(mask);
    const Image small = resize_nearest(gray, lw, lh);
    std::vector<double> vals(small.data);
    return Tensor::from_vector({1, lh, lw}, std::move(vals));
}

Tensor resize_pose_to_latent(const Tensor& pose, int lw, int lh) {
    if (pose.ndim() != 3)
        throw std::runtime_error("pose tensor must be [channels, h, w]");
    const int ch = pose.dim(0);
    const int h = pose.dim(1);
    const int w = pose.dim(2);
    std::vector<double> out(static_cast<size_t>(ch) * lh * lw);
    for (int c = 0; c < ch; ++c) {
        Image plane(w, h, 1);
        std::copy(pose.data() + static_cast<size_t>(c) * h * w,
                  pose.data() + static_cast<size_t>(c + 1) * h * w, plane.data.begin());
        const Image small = resize_bilinear(plane, lw, lh);
        std::copy(small.data.begin(), small.data.end(),
                  out.begin() + static_cast<size_t>(c) * lh * lw);
    }
    return Tensor::from_vector({ch, lh, lw}, std::move(out));
}

Tensor render_pose_heatmaps(const std::array<Keypoint, kNumKeypoints>& kps, int w, int h,
                            double sigma) {
    if (sigma <= 0.0) throw std::runtime_error("pose: sigma must be positive");
    std::vector<double> out(static_cast<size_t>(kNumKeypoints) * h * w, 0.0);
    const double inv = 1.0 / (2.0 * sigma * sigma);
    for (int c = 0; c < kNumKeypoints; ++c) {
        const Keypoint& kp = kps[static_cast<size_t>(c)];
        if (kp.confidence <= 0.0) continue;  // missing joint keeps an all-zero channel
        double* plane = out.data() + static_cast<size_t>(c) * h * w;
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                const double dx = x - kp.x;
                const double dy = y - kp.y;
                plane[static_cast<size_t>(y) * w + x] = std::exp(-(dx * dx + dy * dy) * inv);
            }
    }
    return Tensor::from_vector({kNumKeypoints, h, w}, std::move(out));
}

Tensor encode_masked_image(const Image& rgb, const Image& mask, const PatchColorVae& vae) {
    return vae.latent_from_image(apply_mask_complement(to_rgb(rgb), mask));
}

namespace {

void expect_piece(const Tensor& t, const char* name, int channels, int h, int w) {
    if (t.ndim() != 3 || t.dim(0) != channels) {
        std::ostringstream msg;
        msg << "spatial input: " << name << " expected [" << channels << ", h, w], got "
            << shape_str(t.shape());
        throw std::runtime_error(msg.str());
    }
    if (t.dim(1) != h || t.dim(2) != w) {
        std::ostringstream msg;
        msg << "spatial input: " << name << " is " << t.dim(1) << "x" << t.dim(2)
            << " but z_t is " << h << "x" << w;
        throw std::runtime_error(msg.str());
    }
}

}  // namespace

Tensor assemble_spatial_input(const Tensor& z_t, const Tensor& mask_latent,
                              const Tensor& masked_latent, const Tensor& pose_latent) {
    if (z_t.ndim() != 3 || z_t.dim(0) != kLatentChannels)
        throw std::runtime_error("spatial input: z_t expected [4, h, w], got " +
                                 shape_str(z_t.shape()));
    const int h = z_t.dim(1);
    const int w = z_t.dim(2);
    expect_piece(mask_latent, "mask", 1, h, w);
    expect_piece(masked_latent, "masked image latent", kLatentChannels, h, w);
    expect_piece(pose_latent, "pose", kNumKeypoints, h, w);
    return concat_channels({z_t, mask_latent, masked_latent, pose_latent});
}

void extend_input_projection(ParamStore& ps, const std::string& weight_name) {
    Tensor w = ps.get(weight_name);
    if (w.ndim() != 4)
        throw std::runtime_error("extend_input_projection: " + weight_name + " is not a conv weight");
    const int cout = w.dim(0);
    const int cin = w.dim(1);
    const int kh = w.dim(2);
    const int kw = w.dim(3);
    if (cin != kSpatialChannels - kNumKeypoints) {
        std::ostringstream msg;
        msg << "extend_input_projection: expected " << (kSpatialChannels - kNumKeypoints)
            << " input channels, found " << cin;
        throw std::runtime_error(msg.str());
    }
    const size_t spatial = static_cast<size_t>(kh) * kw;
    std::vector<double> wide(static_cast<size_t>(cout) * kSpatialChannels * spatial, 0.0);
    for (int co = 0; co < cout; ++co) {
        const double* src = w.data() + static_cast<size_t>(co) * cin * spatial;
        double* dst = wide.data() + static_cast<size_t>(co) * kSpatialChannels * spatial;
        std::copy(src, src + static_cast<size_t>(cin) * spatial, dst);
    }
    ps.reshape_param(weight_name, {cout, kSpatialChannels, kh, kw}, std::move(wide));
}

}  // namespace fashionrag
