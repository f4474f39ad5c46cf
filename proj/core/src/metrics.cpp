#include "fashionrag/metrics.hpp"

#include "fashionrag/rng.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <stdexcept>

namespace fashionrag {

namespace {

void check(bool ok, const std::string& msg) {
    if (!ok) throw std::runtime_error("metrics: " + msg);
}

constexpr int kSsimWindow = 11;
constexpr double kSsimSigma = 1.5;
constexpr double kSsimK1 = 0.01;
constexpr double kSsimK2 = 0.03;

const std::vector<double>& ssim_kernel() {
    static const std::vector<double> k = [] {
        std::vector<double> w(kSsimWindow * kSsimWindow);
        const int r = kSsimWindow / 2;
        double total = 0.0;
        for (int dy = -r; dy <= r; ++dy)
            for (int dx = -r; dx <= r; ++dx) {
                const double v = std::exp(-(dx * dx + dy * dy) / (2.0 * kSsimSigma * kSsimSigma));
                w[(dy + r) * kSsimWindow + (dx + r)] = v;
                total += v;
            }
        for (auto& v : w) v /= total;
        return w;
    }();
    return k;
}

double dot(const std::vector<double>& a, const std::vector<double>& b) {
    double s = 0.0;
    for (size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

double norm(const std::vector<double>& a) { return std::sqrt(dot(a, a)); }

double cosine(const std::vector<double>& a, const std::vector<double>& b) {
    check(a.size() == b.size(), "embedding dimensions differ");
    const double na = norm(a), nb = norm(b);
    if (na < 1e-12 || nb < 1e-12) return 0.0;
    return dot(a, b) / (na * nb);
}

}  // namespace

double ssim(const Image& a, const Image& b) {
    check(a.width == b.width && a.height == b.height && a.channels == b.channels,
          "ssim needs images of equal size and channel count");
    check(a.width >= kSsimWindow && a.height >= kSsimWindow,
          "ssim needs images at least 11x11");
    const auto& win = ssim_kernel();
    const int r = kSsimWindow / 2;
    const double c1 = kSsimK1 * kSsimK1;
    const double c2 = kSsimK2 * kSsimK2;

    double total = 0.0;
    int64_t count = 0;
    for (int c = 0; c < a.channels; ++c) {
        for (int cy = r; cy < a.height - r; ++cy) {
            for (int cx = r; cx < a.width - r; ++cx) {
                double mx = 0, my = 0, xx = 0, yy = 0, xy = 0;
                for (int dy = -r; dy <= r; ++dy)
                    for (int dx = -r; dx <= r; ++dx) {
                        const double w = win[(dy + r) * kSsimWindow + (dx + r)];
                        const double px = a.at(c, cy + dy, cx + dx);
                        const double py = b.at(c, cy + dy, cx + dx);
                        mx += w * px;
                        my += w * py;
                        xx += w * px * px;
                        yy += w * py * py;
                        xy += w * px * py;
                    }
                const double vx = xx - mx * mx;
                const double vy = yy - my * my;
                const double cov = xy - mx * my;
                total += ((2 * mx * my + c1) * (2 * cov + c2)) /
                         ((mx * mx + my * my + c1) * (vx + vy + c2));
                ++count;
            }
        }
    }
    return total / static_cast<double>(count);
}

namespace {

// Fixed three-stage conv stack for the perceptual distance. Weights are a
// pure function of the internal seed; no training, no gradients.
struct PerceptualNet {
    struct Stage {
        int cin, cout;
        std::vector<double> w;  // [cout, cin, 3, 3]
        std::vector<double> b;  // [cout]
    };
    std::vector<Stage> stages;

    static const PerceptualNet& instance() {
        static const PerceptualNet net = [] {
            PerceptualNet n;
            Rng rng(0x6c706970u);  // private to this net
            const int plan[4] = {3, 8, 16, 24};
            for (int s = 0; s < 3; ++s) {
                Stage st;
                st.cin = plan[s];
                st.cout = plan[s + 1];
                st.w.resize(static_cast<size_t>(st.cout) * st.cin * 9);
                const double sd = 1.0 / std::sqrt(static_cast<double>(st.cin) * 9);
                for (auto& v : st.w) v = rng.normal() * sd;
                st.b.resize(static_cast<size_t>(st.cout));
                for (auto& v : st.b) v = rng.normal() * 0.1;
                n.stages.push_back(std::move(st));
            }
            return n;
        }();
        return net;
    }
};

struct FeatureMap {
    int c = 0, h = 0, w = 0;
    std::vector<double> v;  // [c,h,w]
    double at(int ci, int y, int x) const {
        return v[(static_cast<size_t>(ci) * h + y) * w + x];
    }
};

// 3x3 conv, stride 2, pad 1, ReLU.
FeatureMap conv_stage(const PerceptualNet::Stage& st, const FeatureMap& in) {
    FeatureMap out;
    out.c = st.cout;
    out.h = (in.h + 1) / 2;
    out.w = (in.w + 1) / 2;
    out.v.assign(static_cast<size_t>(out.c) * out.h * out.w, 0.0);
    for (int co = 0; co < out.c; ++co)
        for (int oy = 0; oy < out.h; ++oy)
            for (int ox = 0; ox < out.w; ++ox) {
                double acc = st.b[co];
                const int iy0 = oy * 2 - 1, ix0 = ox * 2 - 1;
                for (int ci = 0; ci < in.c; ++ci)
                    for (int ky = 0; ky < 3; ++ky) {
                        const int iy = iy0 + ky;
                        if (iy < 0 || iy >= in.h) continue;
                        for (int kx = 0; kx < 3; ++kx) {
                            const int ix = ix0 + kx;
                            if (ix < 0 || ix >= in.w) continue;
                            acc += st.w[((static_cast<size_t>(co) * in.c + ci) * 3 + ky) * 3 + kx] *
                                   in.at(ci, iy, ix);
                        }
                    }
                out.v[(static_cast<size_t>(co) * out.h + oy) * out.w + ox] = std::max(0.0, acc);
            }
    return out;
}

// Unit-normalize across channels at one pixel, then squared difference.
double stage_distance(const FeatureMap& fa, const FeatureMap& fb) {
    double total = 0.0;
    for (int y = 0; y < fa.h; ++y)
        for (int x = 0; x < fa.w; ++x) {
            double na = 0, nb = 0;
            for (int c = 0; c < fa.c; ++c) {
                na += fa.at(c, y, x) * fa.at(c, y, x);
                nb += fb.at(c, y, x) * fb.at(c, y, x);
            }
            na = std::sqrt(na);
            nb = std::sqrt(nb);
            for (int c = 0; c < fa.c; ++c) {
                const double ua = na < 1e-12 ? 0.0 : fa.at(c, y, x) / na;
                const double ub = nb < 1e-12 ? 0.0 : fb.at(c, y, x) / nb;
                total += (ua - ub) * (ua - ub);
            }
        }
    return total / (static_cast<double>(fa.h) * fa.w);
}

FeatureMap image_to_map(const Image& img) {
    const Image rgb = to_rgb(img);
    FeatureMap m;
    m.c = 3;
    m.h = rgb.height;
    m.w = rgb.width;
    m.v.resize(rgb.data.size());
    // Centered around gray so dark/bright asymmetries register equally.
    for (size_t i = 0; i < rgb.data.size(); ++i) m.v[i] = rgb.data[i] * 2.0 - 1.0;
    return m;
}

}  // namespace

double lpips(const Image& a, const Image& b) {
    check(a.width == b.width && a.height == b.height,
          "lpips needs images of equal size");
    const auto& net = PerceptualNet::instance();
    FeatureMap fa = image_to_map(a);
    FeatureMap fb = image_to_map(b);
    double total = 0.0;
    for (const auto& st : net.stages) {
        fa = conv_stage(st, fa);
        fb = conv_stage(st, fb);
        total += stage_distance(fa, fb);
    }
    return total / static_cast<double>(net.stages.size());
}

FeatureExtractor FeatureExtractor::from_config(const Config& cfg) {
    FeatureExtractor fx;
    fx.dim = static_cast<int>(cfg.integer("metrics.feature_dim"));
    check(fx.dim >= 1, "metrics.feature_dim must be positive");
    const int in = fx.grid * fx.grid * 3;
    fx.proj.resize(static_cast<size_t>(fx.dim) * in);
    Rng rng(static_cast<uint64_t>(cfg.integer("metrics.feature_seed")));
    const double sd = 1.0 / std::sqrt(static_cast<double>(in));
    for (auto& v : fx.proj) v = rng.normal() * sd;
    return fx;
}

std::vector<double> FeatureExtractor::extract(const Image& img) const {
    const Image small = resize_bilinear(to_rgb(img), grid, grid);
    const int in = grid * grid * 3;
    std::vector<double> out(static_cast<size_t>(dim), 0.0);
    for (int d = 0; d < dim; ++d) {
        double acc = 0.0;
        const double* row = proj.data() + static_cast<size_t>(d) * in;
        for (int i = 0; i < in; ++i) acc += row[i] * small.data[static_cast<size_t>(i)];
        out[static_cast<size_t>(d)] = acc;
    }
    return out;
}

FeatureStats FeatureStats::from_features(const std::vector<std::vector<double>>& feats) {
    check(feats.size() >= 2, "covariance needs at least 2 feature vectors");
    const int d = static_cast<int>(feats[0].size());
    for (const auto& f : feats) check(static_cast<int>(f.size()) == d, "feature dimensions differ");
    FeatureStats s;
    s.dim = d;
    s.mean.assign(static_cast<size_t>(d), 0.0);
    for (const auto& f : feats)
        for (int i = 0; i < d; ++i) s.mean[static_cast<size_t>(i)] += f[static_cast<size_t>(i)];
    const double n = static_cast<double>(feats.size());
    for (auto& v : s.mean) v /= n;
    s.cov.assign(static_cast<size_t>(d) * d, 0.0);
    for (const auto& f : feats)
        for (int i = 0; i < d; ++i) {
            const double di = f[static_cast<size_t>(i)] - s.mean[static_cast<size_t>(i)];
            for (int j = i; j < d; ++j)
                s.cov[static_cast<size_t>(i) * d + j] +=
                    di * (f[static_cast<size_t>(j)] - s.mean[static_cast<size_t>(j)]);
        }
    for (int i = 0; i < d; ++i)
        for (int j = i; j < d; ++j) {
            s.cov[static_cast<size_t>(i) * d + j] /= n - 1.0;  // unbiased
            s.cov[static_cast<size_t>(j) * d + i] = s.cov[static_cast<size_t>(i) * d + j];
        }
    return s;
}

FrechetResult frechet_distance(const FeatureStats& a, const FeatureStats& b) {
    check(a.dim == b.dim && a.dim > 0, "feature stats dimensions differ");
    const int d = a.dim;
    using Mat = Eigen::MatrixXd;
    Mat ca = Eigen::Map<const Mat>(a.cov.data(), d, d);
    Mat cb = Eigen::Map<const Mat>(b.cov.data(), d, d);
    ca = (ca + ca.transpose()) / 2.0;
    cb = (cb + cb.transpose()) / 2.0;

    FrechetResult res;
    // Degenerate fits (fewer samples than dimensions) make the product
    // matrix square root ill-defined; a tiny ridge keeps it meaningful.
    auto min_eig = [](const Mat& m) {
        Eigen::SelfAdjointEigenSolver<Mat> es(m, Eigen::EigenvaluesOnly);
        return es.eigenvalues().minCoeff();
    };
    if (min_eig(ca) < 1e-10 || min_eig(cb) < 1e-10) {
        res.jittered = true;
        std::cerr << "metrics: singular covariance, adding 1e-6 jitter to both fits\n";
        ca += 1e-6 * Mat::Identity(d, d);
        cb += 1e-6 * Mat::Identity(d, d);
    }

    Eigen::SelfAdjointEigenSolver<Mat> es1(ca);
    Eigen::VectorXd ev = es1.eigenvalues().cwiseMax(0.0).cwiseSqrt();
    const Mat root_a = es1.eigenvectors() * ev.asDiagonal() * es1.eigenvectors().transpose();
    Mat inner = root_a * cb * root_a;
    inner = (inner + inner.transpose()) / 2.0;
    Eigen::SelfAdjointEigenSolver<Mat> es2(inner, Eigen::EigenvaluesOnly);
    const double tr_sqrt = es2.eigenvalues().cwiseMax(0.0).cwiseSqrt().sum();

    double mean_sq = 0.0;
    for (int i = 0; i < d; ++i) {
        const double diff = a.mean[static_cast<size_t>(i)] - b.mean[static_cast<size_t>(i)];
        mean_sq += diff * diff;
    }
    double value = mean_sq + ca.trace() + cb.trace() - 2.0 * tr_sqrt;
    if (value < 0.0 && value > -1e-8) value = 0.0;  // fp residue on identical fits
    res.value = value;
    return res;
}

namespace {

double poly_kernel(const std::vector<double>& x, const std::vector<double>& y) {
    const double base = dot(x, y) / static_cast<double>(x.size()) + 1.0;
    return base * base * base;
}

}  // namespace

double mmd2_unbiased(const std::vector<std::vector<double>>& x,
                     const std::vector<std::vector<double>>& y) {
    const size_t m = x.size(), n = y.size();
    check(m >= 2 && n >= 2, "mmd needs at least 2 vectors per set");
    check(x[0].size() == y[0].size(), "feature dimensions differ");
    double kxx = 0.0, kyy = 0.0, kxy = 0.0;
    for (size_t i = 0; i < m; ++i)
        for (size_t j = 0; j < m; ++j)
            if (i != j) kxx += poly_kernel(x[i], x[j]);
    for (size_t i = 0; i < n; ++i)
        for (size_t j = 0; j < n; ++j)
            if (i != j) kyy += poly_kernel(y[i], y[j]);
    if (m == n) {
        // Paired U-statistic: the cross sum skips i == j, so a set against
        // itself cancels term for term to exactly zero. Still unbiased for
        // independent samples.
        for (size_t i = 0; i < m; ++i)
            for (size_t j = 0; j < n; ++j)
                if (i != j) kxy += poly_kernel(x[i], y[j]);
        const double denom = static_cast<double>(m) * (m - 1);
        return (kxx + kyy - 2.0 * kxy) / denom;
    }
    for (size_t i = 0; i < m; ++i)
        for (size_t j = 0; j < n; ++j) kxy += poly_kernel(x[i], y[j]);
    return kxx / (static_cast<double>(m) * (m - 1)) + kyy / (static_cast<double>(n) * (n - 1)) -
           2.0 * kxy / (static_cast<double>(m) * n);
}

DistributionScores distribution_realism(const std::vector<Image>& generated,
                                        const std::vector<Image>& reference,
                                        const FeatureExtractor& fx) {
    check(generated.size() >= 2 && reference.size() >= 2,
          "distribution metrics need at least 2 images per set");
    std::vector<std::vector<double>> fg, fr;
    fg.reserve(generated.size());
    fr.reserve(reference.size());
    for (const auto& img : generated) fg.push_back(fx.extract(img));
    for (const auto& img : reference) fr.push_back(fx.extract(img));
    DistributionScores out;
    const FrechetResult f = frechet_distance(FeatureStats::from_features(fg),
                                             FeatureStats::from_features(fr));
    out.fid = f.value;
    out.fid_jittered = f.jittered;
    out.kid = 1000.0 * mmd2_unbiased(fg, fr);
    return out;
}

std::optional<double> clip_t_score(const std::vector<Image>& generated,
                                   const std::vector<std::string>& captions,
                                   const ImageEncoder& image_enc, const TextEncoder& text_enc) {
    check(generated.size() == captions.size(), "clip_t needs aligned images and captions");
    check(!generated.empty(), "clip_t needs at least one sample");
    double total = 0.0;
    size_t embedded = 0;
    for (size_t i = 0; i < generated.size(); ++i) {
        // A truncated caption can fall outside the encoder's coverage (the
        // toy text encoder needs a color or motif word); such samples are
        // skipped rather than scored against a made-up embedding.
        std::vector<double> t;
        try {
            t = text_enc(captions[i]);
        } catch (const std::exception&) {
            continue;
        }
        total += cosine(image_enc(generated[i]), t);
        ++embedded;
    }
    if (embedded == 0) return std::nullopt;
    return 100.0 * total / static_cast<double>(embedded);
}

std::optional<double> clip_i_score(const std::vector<Image>& generated,
                                   const std::vector<std::vector<Image>>& retrieved,
                                   const ImageEncoder& image_enc) {
    check(generated.size() == retrieved.size(), "clip_i needs aligned images and retrieved lists");
    double total = 0.0;
    size_t with_items = 0;
    for (size_t i = 0; i < generated.size(); ++i) {
        if (retrieved[i].empty()) continue;
        const std::vector<double> g = image_enc(generated[i]);
        double sample = 0.0;
        for (const auto& item : retrieved[i]) sample += cosine(g, image_enc(item));
        total += sample / static_cast<double>(retrieved[i].size());
        ++with_items;
    }
    if (with_items == 0) return std::nullopt;
    return 100.0 * total / static_cast<double>(with_items);
}

MetricReport compute_metrics(const EvalInputs& in, const Config& cfg) {
    check(!in.generated.empty(), "no generated images");
    check(in.generated.size() == in.captions.size(), "captions not aligned with images");
    check(in.generated.size() == in.retrieved.size(), "retrieved lists not aligned with images");

    MetricReport r;
    r.setting = in.paired ? "paired" : "unpaired";
    r.n_samples = in.generated.size();
    r.config_echo = cfg.dump();

    if (in.paired) {
        check(in.generated.size() == in.reference.size(),
              "paired setting needs aligned generated/reference lists");
        double l = 0.0, s = 0.0;
        for (size_t i = 0; i < in.generated.size(); ++i) {
            l += lpips(in.generated[i], in.reference[i]);
            s += ssim(in.generated[i], in.reference[i]);
        }
        r.lpips = l / static_cast<double>(in.generated.size());
        r.ssim = s / static_cast<double>(in.generated.size());
    }

    const FeatureExtractor fx = FeatureExtractor::from_config(cfg);
    const DistributionScores ds = distribution_realism(in.generated, in.reference, fx);
    r.fid = ds.fid;
    r.kid = ds.kid;
    r.fid_jittered = ds.fid_jittered;

    const std::string tag = cfg.str("retrieval.encoder_tag");
    const ImageEncoder ie = image_encoder_for_tag(tag);
    const TextEncoder te = text_encoder_for_tag(tag);
    r.clip_t = clip_t_score(in.generated, in.captions, ie, te);
    r.clip_i = clip_i_score(in.generated, in.retrieved, ie);
    return r;
}

namespace {

std::string fmt(double v) {
    std::ostringstream os;
    os << std::setprecision(10) << v;
    return os.str();
}

}  // namespace

void write_metric_report_kv(const std::string& path, const MetricReport& r) {
    std::ofstream out(path);
    check(out.good(), "cannot write " + path);
    out << "setting=" << r.setting << '\n';
    out << "n_samples=" << r.n_samples << '\n';
    if (r.lpips) out << "lpips=" << fmt(*r.lpips) << '\n';
    if (r.ssim) out << "ssim=" << fmt(*r.ssim) << '\n';
    out << "fid=" << fmt(r.fid) << '\n';
    out << "kid=" << fmt(r.kid) << '\n';
    if (r.clip_t) out << "clip_t=" << fmt(*r.clip_t) << '\n';
    if (r.clip_i) out << "clip_i=" << fmt(*r.clip_i) << '\n';
    if (r.fid_jittered) out << "fid_jittered=1\n";
    std::istringstream cfg(r.config_echo);
    std::string line;
    while (std::getline(cfg, line))
        if (!line.empty()) out << "config." << line << '\n';
}

std::string metric_report_header() {
    return "setting\tn_samples\tlpips\tssim\tfid\tkid\tclip_t\tclip_i";
}

std::string metric_report_row(const MetricReport& r) {
    std::ostringstream os;
    os << r.setting << '\t' << r.n_samples << '\t'
       << (r.lpips ? fmt(*r.lpips) : "-") << '\t'
       << (r.ssim ? fmt(*r.ssim) : "-") << '\t'
       << fmt(r.fid) << '\t' << fmt(r.kid) << '\t'
       << (r.clip_t ? fmt(*r.clip_t) : "-") << '\t'
       << (r.clip_i ? fmt(*r.clip_i) : "-");
    return os.str();
}

void write_eval_manifest(const std::string& path, const std::vector<EvalRecord>& rows) {
    std::ofstream out(path);
    check(out.good(), "cannot write " + path);
    for (const auto& row : rows) {
        out << row.sample_id << '\t' << row.generated_path << '\t' << row.reference_path << '\t'
            << row.caption << '\t';
        for (size_t i = 0; i < row.retrieved_ids.size(); ++i) {
            if (i) out << ',';
            out << row.retrieved_ids[i];
        }
        out << '\n';
    }
}

std::vector<EvalRecord> load_eval_manifest(const std::string& path) {
    std::ifstream in(path);
    check(in.good(), "cannot read " + path);
    std::vector<EvalRecord> rows;
    std::string line;
    size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        std::vector<std::string> fields;
        size_t start = 0;
        while (true) {
            const size_t tab = line.find('\t', start);
            fields.push_back(line.substr(start, tab == std::string::npos ? tab : tab - start));
            if (tab == std::string::npos) break;
            start = tab + 1;
        }
        std::ostringstream msg;
        msg << "manifest line " << lineno << ": expected 5 tab-separated fields, got "
            << fields.size();
        check(fields.size() == 5, msg.str());
        EvalRecord rec;
        rec.sample_id = fields[0];
        rec.generated_path = fields[1];
        rec.reference_path = fields[2];
        rec.caption = fields[3];
        std::istringstream ids(fields[4]);
        std::string id;
        while (std::getline(ids, id, ','))
            if (!id.empty()) rec.retrieved_ids.push_back(id);
        rows.push_back(std::move(rec));
    }
    return rows;
}

}  // namespace fashionrag
