#pragma once

#include "fashionrag/config.hpp"
#include "fashionrag/image.hpp"
#include "fashionrag/retrieval.hpp"

#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace fashionrag {

// Structural similarity over fully interior 11x11 Gaussian windows
// (sigma 1.5, K1 0.01, K2 0.03, dynamic range 1), averaged over windows
// and channels. Both images must share size and channel count.
double ssim(const Image& a, const Image& b);

// Perceptual distance through a small fixed convolutional stack whose
// weights come from an internal seed, so scores are comparable across
// runs and machines. Zero iff the inputs are identical.
double lpips(const Image& a, const Image& b);

// Feature extractor behind fid/kid: the image is resized to a fixed grid
// and the flattened pixels are projected to metrics.feature_dim dims by a
// random matrix seeded with metrics.feature_seed. A linear map keeps the
// Gaussian-fit metrics analytically checkable; scores are comparable only
// within one extractor configuration.
struct FeatureExtractor {
    int dim = 64;
    int grid = 16;
    std::vector<double> proj;  // [dim, grid*grid*3] row-major

    static FeatureExtractor from_config(const Config& cfg);
    std::vector<double> extract(const Image& img) const;
};

// Gaussian fit of a feature set: mean plus unbiased covariance (n >= 2).
struct FeatureStats {
    int dim = 0;
    std::vector<double> mean;  // [dim]
    std::vector<double> cov;   // [dim*dim] row-major

    static FeatureStats from_features(const std::vector<std::vector<double>>& feats);
};

struct FrechetResult {
    double value = 0.0;
    bool jittered = false;  // a singular covariance got +1e-6 I, warned on stderr
};

// ||mu_a - mu_b||^2 + tr(C_a + C_b - 2 (C_a C_b)^{1/2}).
FrechetResult frechet_distance(const FeatureStats& a, const FeatureStats& b);

// Unbiased MMD^2 with the cubic kernel k(x,y) = (x.y / d + 1)^3; both sets
// need at least two vectors. Raw scale (no x1000).
double mmd2_unbiased(const std::vector<std::vector<double>>& x,
                     const std::vector<std::vector<double>>& y);

struct DistributionScores {
    double fid = 0.0;
    double kid = 0.0;  // x1000, reporting convention
    bool fid_jittered = false;
};

// Fits Gaussians to extracted features of both sets; needs >= 2 images each.
DistributionScores distribution_realism(const std::vector<Image>& generated,
                                        const std::vector<Image>& reference,
                                        const FeatureExtractor& fx);

// Mean cosine between image and caption embeddings, x100. Captions the
// text encoder cannot embed are skipped; absent when none embed.
std::optional<double> clip_t_score(const std::vector<Image>& generated,
                                   const std::vector<std::string>& captions,
                                   const ImageEncoder& image_enc, const TextEncoder& text_enc);

// Per sample: mean cosine between the generated image and each of its
// retrieved garments, x100; samples without retrieved items are excluded.
// Absent (not zero) when no sample retrieved anything.
std::optional<double> clip_i_score(const std::vector<Image>& generated,
                                   const std::vector<std::vector<Image>>& retrieved,
                                   const ImageEncoder& image_enc);

struct MetricReport {
    std::string setting = "paired";  // "paired" or "unpaired"
    std::optional<double> lpips;     // paired only
    std::optional<double> ssim;      // paired only
    double fid = 0.0;
    double kid = 0.0;                // x1000
    std::optional<double> clip_t;    // x100, absent when no caption embeds
    std::optional<double> clip_i;    // x100, absent when nothing was retrieved
    size_t n_samples = 0;
    bool fid_jittered = false;
    std::string config_echo;         // Config::dump of the run
};

struct EvalInputs {
    std::vector<Image> generated;
    std::vector<Image> reference;                 // aligned ground truth when paired
    std::vector<std::string> captions;            // aligned with generated
    std::vector<std::vector<Image>> retrieved;    // per sample, may be empty
    bool paired = true;
};

// Full report: lpips/ssim on aligned pairs (paired setting only), fid/kid
// between the two sets, clip scores through the config's encoder tag.
MetricReport compute_metrics(const EvalInputs& in, const Config& cfg);

// Flat `key=value` lines; absent metrics are omitted, config echo keys are
// prefixed with "config.".
void write_metric_report_kv(const std::string& path, const MetricReport& r);
std::string metric_report_header();             // TSV column names
std::string metric_report_row(const MetricReport& r);  // absent cells are "-"

// Evaluation manifest rows:
// sample_id<TAB>generated_path<TAB>reference_path<TAB>caption<TAB>retrieved_ids(comma-sep)
struct EvalRecord {
    std::string sample_id;
    std::string generated_path;
    std::string reference_path;
    std::string caption;
    std::vector<std::string> retrieved_ids;
};
void write_eval_manifest(const std::string& path, const std::vector<EvalRecord>& rows);
std::vector<EvalRecord> load_eval_manifest(const std::string& path);

}  // namespace fashionrag
