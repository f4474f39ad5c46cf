// Acceptance gate: one line per criterion, [PASS]/[FAIL]/[SKIP], exit 0 only
// when every checked criterion passes. Criteria run independently; a thrown
// exception fails its criterion and the run moves on.

#include "fashionrag/cli.hpp"

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <vector>

using namespace fashionrag;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

struct Outcome {
    bool ok = false;
    std::string detail;
};

double seconds_since(Clock::time_point t0) {
    return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string fmt(double v, int prec = 4) {
    std::ostringstream os;
    os.setf(std::ios::fixed);
    os.precision(prec);
    os << v;
    return os.str();
}

Tensor random_tensor(const Shape& shape, uint64_t seed) {
    Rng rng(seed);
    std::vector<double> v(static_cast<size_t>(shape_numel(shape)));
    for (auto& x : v) x = rng.normal();
    return Tensor::from_vector(shape, std::move(v));
}

Image random_image(uint64_t seed, int w, int h) {
    Rng rng(seed);
    Image img(w, h, 3);
    for (auto& v : img.data) v = rng.uniform();
    return img;
}

bool bits_equal(const Tensor& a, const Tensor& b) {
    return a.shape() == b.shape() &&
           std::memcmp(a.data(), b.data(), sizeof(double) * static_cast<size_t>(a.numel())) == 0;
}

// Runs the CLI in-process with stdout/stderr captured so the gate's own
// output stays one line per criterion.
int run_cli(const std::vector<std::string>& args, std::string* out = nullptr,
            std::string* err = nullptr) {
    std::ostringstream o, e;
    std::streambuf* so = std::cout.rdbuf(o.rdbuf());
    std::streambuf* se = std::cerr.rdbuf(e.rdbuf());
    int rc = -1;
    try {
        rc = run_command(args);
    } catch (...) {
        std::cout.rdbuf(so);
        std::cerr.rdbuf(se);
        throw;
    }
    std::cout.rdbuf(so);
    std::cerr.rdbuf(se);
    if (out) *out = o.str();
    if (err) *err = e.str();
    return rc;
}

std::string tail_of(const std::string& s, size_t n = 200) {
    return s.size() <= n ? s : s.substr(s.size() - n);
}

// ---- criterion 1: retrieval equals exhaustive ranking ----------------------

std::vector<RetrievalEntry> brute_force(const EmbeddingIndex& idx, const std::vector<double>& q,
                                        size_t k) {
    std::vector<RetrievalEntry> all;
    for (const auto& r : idx.records) {
        double s = 0.0;
        for (size_t i = 0; i < q.size(); ++i) s += q[i] * r.embedding[i];
        all.push_back({r.id, s});
    }
    std::sort(all.begin(), all.end(), [](const RetrievalEntry& a, const RetrievalEntry& b) {
        return a.score != b.score ? a.score > b.score : a.id < b.id;
    });
    all.resize(std::min(k, all.size()));
    return all;
}

Outcome ac1_retrieval_oracle() {
    const auto t0 = Clock::now();
    const int dim = 7;
    EmbeddingIndex idx;
    idx.d_ret = dim;
    idx.encoder_tag = "synthetic";
    Rng rng(41);
    for (int i = 0; i < 100; ++i) {
        GarmentRecord rec;
        std::ostringstream id;
        id << "g" << std::setw(3) << std::setfill('0') << i;
        rec.id = id.str();
        rec.category = static_cast<GarmentCategory>(i % 3);
        std::vector<double> e(dim);
        double n2 = 0.0;
        for (auto& x : e) {
            x = rng.normal();
            n2 += x * x;
        }
        rec.embedding.resize(dim);
        for (int d = 0; d < dim; ++d)
            rec.embedding[static_cast<size_t>(d)] = static_cast<float>(e[static_cast<size_t>(d)] / std::sqrt(n2));
        idx.records.push_back(std::move(rec));
    }

    size_t compared = 0;
    for (int qi = 0; qi < 20; ++qi) {
        std::vector<double> q(dim);
        double n2 = 0.0;
        for (auto& x : q) {
            x = rng.normal();
            n2 += x * x;
        }
        for (auto& x : q) x /= std::sqrt(n2);
        for (size_t k : {size_t{1}, size_t{3}, size_t{10}, size_t{100}}) {
            const auto want = brute_force(idx, q, k);
            const auto got = retrieve_top_k(idx, q, k);
            if (got.entries.size() != want.size())
                return {false, "size mismatch at k=" + std::to_string(k)};
            for (size_t i = 0; i < want.size(); ++i) {
                if (got.entries[i].id != want[i].id || got.entries[i].score != want[i].score)
                    return {false, "rank " + std::to_string(i) + " differs at k=" + std::to_string(k)};
                ++compared;
            }
        }
    }
    const double secs = seconds_since(t0);
    if (secs >= 5.0) return {false, "took " + fmt(secs, 2) + " s, budget 5 s"};
    return {true, std::to_string(compared) + " ranks identical across 100x20, " + fmt(secs, 2) + " s"};
}

// ---- criterion 2: conditioning sequence contract ---------------------------

Outcome ac2_sequence_contract() {
    const Config cfg = Config::profile_defaults("desk");
    const PipelineModel model = build_pipeline(cfg, 1, 1);
    const int n_v = model.adapter.cfg.n_v;
    const int n_l = model.embed.n_l;
    const int h_e = model.embed.h_e;
    const std::vector<std::string> phrases = {"red top", "striped pattern", "casual style"};

    for (int n_r = 0; n_r <= 3; ++n_r)
        for (int n_c = 1; n_c <= 3; ++n_c) {
            const std::string caption = build_caption(phrases, n_c);
            std::vector<Image> garments;
            for (int g = 0; g < n_r; ++g)
                garments.push_back(random_image(100 + static_cast<uint64_t>(10 * n_r + g), 64, 64));
            const auto seq = assemble_conditioning_sequence(
                caption, model.pseudo_blocks(garments), model.embed, n_v);

            const int total = seq.count(TokenRole::prompt) + seq.count(TokenRole::caption) +
                              seq.count(TokenRole::pseudo) + seq.count(TokenRole::pad);
            if (total != n_l)
                return {false, "role counts sum " + std::to_string(total) + " != n_l"};
            if (seq.count(TokenRole::pseudo) != n_r * n_v)
                return {false, "pseudo count " + std::to_string(seq.count(TokenRole::pseudo)) +
                                   " != n_r*n_v at n_r=" + std::to_string(n_r)};

            if (n_r == 0) continue;
            // The text prefix of the retrieval sequence equals the no-retrieval
            // sequence bit for bit, and the latter is pad-only past its text.
            const auto plain = assemble_conditioning_sequence(caption, {}, model.embed, n_v);
            const int text_rows = 1 + static_cast<int>(DeskTokenizer::tokenize(kFixedPrompt).size()) +
                                  seq.n_q + 1;
            if (std::memcmp(seq.x_c.data(), plain.x_c.data(),
                            sizeof(double) * static_cast<size_t>(text_rows * h_e)) != 0)
                return {false, "text prefix differs from text-only path at n_r=" +
                                   std::to_string(n_r) + " n_c=" + std::to_string(n_c)};
            for (size_t i = static_cast<size_t>(text_rows); i < plain.roles.size(); ++i)
                if (plain.roles[i] != TokenRole::pad)
                    return {false, "text-only sequence has non-pad tail"};
        }
    return {true, "12 grid cells, n_l=" + std::to_string(n_l) + ", n_v=" + std::to_string(n_v)};
}

// ---- criterion 3: spatial assembly is 27 channels and sliceable ------------

Outcome ac3_spatial_assembly() {
    const Tensor z = random_tensor({4, 12, 8}, 31);
    const Tensor m = random_tensor({1, 12, 8}, 32);
    const Tensor ml = random_tensor({4, 12, 8}, 33);
    const Tensor p = random_tensor({18, 12, 8}, 34);
    const Tensor gamma = assemble_spatial_input(z, m, ml, p);
    if (gamma.shape() != Shape{kSpatialChannels, 12, 8})
        return {false, "gamma channels != 27"};
    if (4 + 1 + 4 + 18 != kSpatialChannels) return {false, "channel plan broken"};
    if (!bits_equal(slice_channels(gamma, 0, 4), z) ||
        !bits_equal(slice_channels(gamma, 4, 1), m) ||
        !bits_equal(slice_channels(gamma, 5, 4), ml) ||
        !bits_equal(slice_channels(gamma, 9, 18), p))
        return {false, "concatenate-then-slice is not the identity"};
    return {true, "4+1+4+18 = 27, slices identical"};
}

// ---- criterion 4: zero-init pose slices are neutral at stage-2 start -------

Outcome ac4_zero_init_neutrality() {
    const Config cfg = Config::profile_defaults("desk");
    PipelineModel model = build_pipeline(cfg, 1, 3);
    promote_to_stage2(model);

    const Tensor z = random_tensor({4, 12, 8}, 43);
    const Tensor m = random_tensor({1, 12, 8}, 44);
    const Tensor ml = random_tensor({4, 12, 8}, 45);
    const Tensor pose = random_tensor({18, 12, 8}, 46);
    const Tensor zero = Tensor::zeros({18, 12, 8});
    const auto [psi, keep] = model.encode_condition("red dress", {random_image(47, 64, 64)});

    const Tensor with_pose = model.unet.forward(assemble_spatial_input(z, m, ml, pose), 7.0, psi, &keep);
    const Tensor with_zero = model.unet.forward(assemble_spatial_input(z, m, ml, zero), 7.0, psi, &keep);
    if (!bits_equal(with_pose, with_zero))
        return {false, "pose content leaks through freshly widened projection"};
    return {true, "arbitrary vs zero pose bit-identical after promotion"};
}

// ---- criterion 5: stage-1 freeze and finite-difference gradients -----------

Outcome ac5_gradient_contracts() {
    const auto t0 = Clock::now();
    const Config cfg = Config::profile_defaults("desk");
    PipelineModel model = build_pipeline(cfg, 1, 5);

    TrainExample ex;
    ex.z0 = random_tensor({4, 12, 8}, 51);
    ex.eps = random_tensor({4, 12, 8}, 52);
    ex.t = 321;
    {
        Rng mr(53);
        std::vector<double> mv(12 * 8);
        for (auto& v : mv) v = mr.uniform() < 0.4 ? 1.0 : 0.0;
        ex.mask_latent = Tensor::from_vector({1, 12, 8}, std::move(mv));
    }
    ex.masked_latent = random_tensor({4, 12, 8}, 54);
    ex.pose_latent = random_tensor({18, 12, 8}, 55);
    ex.caption = "red top with stripes";
    ex.garments = {random_image(56, 64, 64), random_image(57, 64, 64)};

    const std::vector<std::string> frozen_prefixes = {"unet.", "vae.", "vision_encoder.",
                                                      "text_encoder.", "text_embed."};
    std::map<std::string, uint64_t> before;
    for (const auto& p : frozen_prefixes) before[p] = model.ps.content_hash(p);
    const uint64_t adapter_before = model.ps.content_hash("adapter.");

    Tensor loss = example_training_loss(model, ex);
    model.ps.zero_grads();
    loss.backward();

    // Probe the ten largest-gradient adapter entries, one per parameter.
    struct Probe {
        std::string name;
        size_t idx;
        double g;
    };
    std::vector<Probe> probes;
    for (const auto& name : model.ps.names_with_prefix("adapter.")) {
        const Tensor p = model.ps.get(name);
        const std::vector<double> g = p.grad_or_zeros();
        size_t best = 0;
        for (size_t i = 1; i < g.size(); ++i)
            if (std::abs(g[i]) > std::abs(g[best])) best = i;
        if (std::abs(g[best]) > 0.0) probes.push_back({name, best, g[best]});
    }
    std::sort(probes.begin(), probes.end(),
              [](const Probe& a, const Probe& b) { return std::abs(a.g) > std::abs(b.g); });
    if (probes.size() < 10)
        return {false, "only " + std::to_string(probes.size()) + " adapter params carry gradient"};
    probes.resize(10);

    const double h = 1e-5;
    double worst_rel = 0.0;
    std::string worst_name;
    for (const auto& pr : probes) {
        Tensor param = model.ps.get(pr.name);
        const double saved = param.data()[pr.idx];
        double up, down;
        {
            NoGradGuard ng;
            param.data()[pr.idx] = saved + h;
            up = example_training_loss(model, ex).item();
            param.data()[pr.idx] = saved - h;
            down = example_training_loss(model, ex).item();
            param.data()[pr.idx] = saved;
        }
        const double fd = (up - down) / (2.0 * h);
        const double rel = std::abs(pr.g - fd) / std::max({std::abs(pr.g), std::abs(fd), 1e-6});
        if (rel > worst_rel) {
            worst_rel = rel;
            worst_name = pr.name;
        }
    }
    if (worst_rel > 1e-3)
        return {false, "finite differences disagree: rel " + fmt(worst_rel, 6) + " on " + worst_name};

    AdamW adam;
    adam.lr = cfg.real("train.lr");
    adam.step(model.ps);

    for (const auto& p : frozen_prefixes) {
        if (model.ps.names_with_prefix(p).empty()) continue;  // the vae is parameter-free
        if (model.ps.content_hash(p) != before[p])
            return {false, "frozen stack changed after a stage-1 step: " + p};
    }
    if (model.ps.content_hash("adapter.") == adapter_before)
        return {false, "adapter did not move under the optimizer"};

    const double secs = seconds_since(t0);
    if (secs >= 120.0) return {false, "took " + fmt(secs, 1) + " s, budget 120 s"};
    return {true, "frozen stacks hash-stable, worst FD rel " + fmt(worst_rel, 6) + " over 10 probes, " +
                      fmt(secs, 1) + " s"};
}

// ---- criterion 6: guidance identities ---------------------------------------

Outcome ac6_guidance_identities() {
    const Tensor e0 = random_tensor({4, 12, 8}, 61);
    const Tensor e1 = random_tensor({4, 12, 8}, 62);
    const Tensor e2 = random_tensor({4, 12, 8}, 63);
    if (!bits_equal(combine_guided({e0, e1, e2}, {1.0, 1.0}), e2))
        return {false, "all-scales-1 does not telescope to the full condition"};
    if (!bits_equal(combine_guided({e0, e1}, {1.0}), e1))
        return {false, "two-condition scale-1 identity broken"};
    if (!bits_equal(combine_guided({e0, e1, e2}, {0.0, 0.0}), e0))
        return {false, "all-scales-0 does not reduce to the unconditional branch"};
    return {true, "telescoping and zero-scale reductions exact to the bit"};
}

// ---- criterion 7: metric identities and closed-form oracle ------------------

Outcome ac7_metric_identities() {
    const Config cfg = Config::profile_defaults("desk");
    const Image img = random_image(71, 64, 96);
    if (lpips(img, img) != 0.0) return {false, "lpips(x,x) != 0"};
    if (std::abs(ssim(img, img) - 1.0) > 1e-12) return {false, "ssim(x,x) != 1"};

    std::vector<Image> xs;
    for (int i = 0; i < 8; ++i) xs.push_back(random_image(720 + static_cast<uint64_t>(i), 64, 96));
    const FeatureExtractor fx = FeatureExtractor::from_config(cfg);
    const DistributionScores self = distribution_realism(xs, xs, fx);
    if (self.fid > 1e-6) return {false, "fid(X,X) = " + fmt(self.fid, 9)};
    if (std::abs(self.kid) > 1e-12) return {false, "kid(X,X) = " + fmt(self.kid, 9)};

    // Injected features with diagonal sample covariance: the Fréchet distance
    // has the closed form |mu_a - mu_b|^2 + sum_i (sigma_a,i - sigma_b,i)^2.
    auto diag_set = [](double mx, double my, double a, double b) {
        return std::vector<std::vector<double>>{
            {mx, my}, {mx + a, my}, {mx - a, my}, {mx, my + b}, {mx, my - b}};
    };
    const auto fa = diag_set(0.5, -0.25, 0.6, 0.9);
    const auto fb = diag_set(-0.2, 0.3, 0.4, 1.1);
    const FeatureStats sa = FeatureStats::from_features(fa);
    const FeatureStats sb = FeatureStats::from_features(fb);
    const double va1 = 2.0 * 0.6 * 0.6 / 4.0, va2 = 2.0 * 0.9 * 0.9 / 4.0;
    const double vb1 = 2.0 * 0.4 * 0.4 / 4.0, vb2 = 2.0 * 1.1 * 1.1 / 4.0;
    const double dmu2 = (0.5 + 0.2) * (0.5 + 0.2) + (-0.25 - 0.3) * (-0.25 - 0.3);
    const double want = dmu2 + std::pow(std::sqrt(va1) - std::sqrt(vb1), 2) +
                        std::pow(std::sqrt(va2) - std::sqrt(vb2), 2);
    const FrechetResult fr = frechet_distance(sa, sb);
    if (fr.jittered) return {false, "oracle covariances should not need jitter"};
    if (std::abs(fr.value - want) > 1e-4)
        return {false, "frechet " + fmt(fr.value, 8) + " vs closed form " + fmt(want, 8)};

    // clip_i ignores the order of the retrieved garments.
    const ImageEncoder enc = image_encoder_for_tag(cfg.str("retrieval.encoder_tag"));
    const std::vector<Image> gen = {random_image(73, 64, 96)};
    const Image a = random_image(74, 64, 64), b = random_image(75, 64, 64),
                c = random_image(76, 64, 64);
    const auto abc = clip_i_score(gen, {{a, b, c}}, enc);
    const auto cab = clip_i_score(gen, {{c, a, b}}, enc);
    if (!abc || !cab) return {false, "clip_i absent on non-empty retrieval"};
    if (std::abs(*abc - *cab) > 1e-12)
        return {false, "clip_i changed under permutation: " + fmt(*abc, 10) + " vs " + fmt(*cab, 10)};

    return {true, "identities hold, frechet matches closed form to " +
                      fmt(std::abs(fr.value - want), 10)};
}

// ---- criterion 8: toy end-to-end with directional retrieval gain ------------

double kv_value(const std::string& kv_text, const std::string& key) {
    std::istringstream in(kv_text);
    std::string line;
    while (std::getline(in, line))
        if (line.rfind(key + "=", 0) == 0) return std::stod(line.substr(key.size() + 1));
    throw std::runtime_error("report lacks " + key);
}

Outcome ac8_toy_end_to_end() {
    const auto t0 = Clock::now();
    const fs::path w = fs::temp_directory_path() / "fashionrag_acceptance";
    fs::remove_all(w);
    fs::create_directories(w);
    const std::string data = (w / "data").string();
    const std::string index = (w / "garments.frix").string();
    std::string out, err;

    auto step = [&](const std::vector<std::string>& args, const char* what) {
        if (run_cli(args, &out, &err) != 0)
            throw std::runtime_error(std::string(what) + " failed: " + tail_of(err));
    };

    // 48 test samples keep the 8-dim Gaussian fits of the FID proxy
    // well-conditioned; the training split stays at n=64.
    step({"toydata", "--out", data, "--n", "64", "--n-test", "48", "--seed", "7"}, "toydata");
    step({"index", "build", "--data", data, "--out", index}, "index build");

    // Desk-profile budgets: train.stage1_steps and train.stage2_steps, both
    // capped at 2000 in the profile.
    const std::string s1 = (w / "s1").string();
    step({"train", "stage1", "--data", data, "--index", index, "--out", s1}, "stage 1");
    double s1_initial = 0.0, s1_final = 0.0;
    {
        const size_t pi = out.find("initial_loss=");
        const size_t pf = out.find("final_loss=");
        if (pi == std::string::npos || pf == std::string::npos)
            return {false, "stage-1 report line missing losses"};
        s1_initial = std::stod(out.substr(pi + 13));
        s1_final = std::stod(out.substr(pf + 11));
    }
    const std::string ckpt1 = s1 + "/checkpoints/stage1_final.frck";

    const std::string s2 = (w / "s2").string();
    step({"train", "stage2", "--data", data, "--index", index, "--out", s2, "--resume", ckpt1},
         "stage 2");
    const size_t pf2 = out.find("final_loss=");
    if (pf2 == std::string::npos) return {false, "stage-2 report line missing losses"};
    const double s2_final = std::stod(out.substr(pf2 + 11));
    const std::string ckpt2 = s2 + "/checkpoints/stage2_final.frck";

    // (a) smoothed training loss ends below 0.2x its starting level.
    if (!(s2_final < 0.2 * s1_initial))
        return {false, "loss " + fmt(s2_final) + " not below 0.2 x " + fmt(s1_initial)};

    // Single-phrase captions leave the garment underdetermined by text, which
    // is the regime retrieval conditioning is for; both cells share per-sample
    // generation seeds, so they differ only in conditioning.
    const std::string ev3 = (w / "ev3").string();
    step({"evaluate", "--checkpoint", ckpt2, "--data", data, "--index", index, "--out", ev3,
          "--n-r", "3", "--n-c", "1"},
         "evaluate n_r=3");
    const std::string ev0 = (w / "ev0").string();
    step({"evaluate", "--checkpoint", ckpt2, "--data", data, "--index", index, "--out", ev0,
          "--n-r", "0", "--n-c", "1"},
         "evaluate n_r=0");

    // (b) unmasked pixels of every generated image equal the input bit-exactly.
    const LoadReport split = load_dataset(data, "test");
    std::map<std::string, const SampleAnnotation*> by_id;
    for (const auto& s : split.samples) by_id[s.sample_id] = &s;
    const auto records3 = load_eval_manifest(ev3 + "/reports/metrics_paired_nr3_nc1_samples.tsv");
    if (records3.size() != split.samples.size())
        return {false, "evaluation covered " + std::to_string(records3.size()) + " of " +
                           std::to_string(split.samples.size()) + " samples"};
    for (const auto& rec : records3) {
        const SampleAnnotation* s = by_id.at(rec.sample_id);
        const Image gen = read_png(rec.generated_path);
        const Image person = read_png(s->image_path);
        const Image mask = read_png(s->mask_path);
        for (int y = 0; y < person.height; ++y)
            for (int x = 0; x < person.width; ++x) {
                if (mask.at(0, y, x) >= 0.5) continue;
                for (int ch = 0; ch < 3; ++ch)
                    if (gen.at(ch, y, x) != person.at(ch, y, x))
                        return {false, "unmasked pixel differs in " + rec.sample_id};
            }
    }

    // (c) retrieval on strictly improves the distribution proxy and garment
    // alignment against the same checkpoint with retrieval off. clip_i for the
    // n_r=0 images is scored against the garments the n_r=3 run retrieved.
    auto read_file = [](const std::string& path) {
        std::ifstream f(path);
        if (!f) throw std::runtime_error("cannot read " + path);
        return std::string((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    };
    const std::string kv3_text = read_file(ev3 + "/reports/metrics_paired_nr3_nc1.txt");
    const std::string kv0_text = read_file(ev0 + "/reports/metrics_paired_nr0_nc1.txt");
    const double fid3 = kv_value(kv3_text, "fid");
    const double fid0 = kv_value(kv0_text, "fid");
    if (kv0_text.find("clip_i=") != std::string::npos)
        return {false, "n_r=0 report carries clip_i"};
    const double clip_i3 = kv_value(kv3_text, "clip_i");

    const auto records0 = load_eval_manifest(ev0 + "/reports/metrics_paired_nr0_nc1_samples.tsv");
    const EmbeddingIndex idx = load_index(index);
    const ImageEncoder enc = image_encoder_for_tag(idx.encoder_tag);
    std::vector<Image> gen0;
    std::vector<std::vector<Image>> garments3;
    for (size_t i = 0; i < records0.size(); ++i) {
        if (records0[i].sample_id != records3[i].sample_id)
            return {false, "evaluation sample order diverged between cells"};
        gen0.push_back(read_png(records0[i].generated_path));
        std::vector<Image> garms;
        for (const auto& gid : records3[i].retrieved_ids) {
            const GarmentRecord* grec = idx.find(gid);
            if (!grec) return {false, "retrieved id " + gid + " missing from index"};
            garms.push_back(read_png((fs::path(data) / grec->image_ref).string()));
        }
        garments3.push_back(std::move(garms));
    }
    const auto clip_i0 = clip_i_score(gen0, garments3, enc);
    if (!clip_i0) return {false, "clip_i for the n_r=0 images came back absent"};

    const bool fid_better = fid3 < fid0;
    const bool clip_better = clip_i3 > *clip_i0;
    const double secs = seconds_since(t0);
    std::ostringstream d;
    d << "loss " << fmt(s1_initial, 3) << "->" << fmt(s2_final, 3) << " (stage1 end "
      << fmt(s1_final, 3) << "), fid " << fmt(fid3) << " vs " << fmt(fid0) << ", clip_i "
      << fmt(clip_i3, 2) << " vs " << fmt(*clip_i0, 2) << ", " << fmt(secs, 0) << " s";
    if (!fid_better || !clip_better)
        return {false, std::string(!fid_better ? "fid" : "clip_i") + " not strictly better: " + d.str()};
    if (secs > 1800.0) return {false, "took " + fmt(secs, 0) + " s, budget 1800 s"};
    return {true, d.str()};
}

// ---- criterion 9: per-batch retrieval count is uniform ---------------------

Outcome ac9_retrieval_count() {
    Rng rng(123);
    std::array<int, 4> counts{};
    const int draws = 40000;
    for (int i = 0; i < draws; ++i) {
        const int n = sample_retrieval_count(rng);
        if (n < 0 || n > 3) return {false, "value out of range: " + std::to_string(n)};
        ++counts[static_cast<size_t>(n)];
    }
    std::ostringstream d;
    for (int v = 0; v < 4; ++v) {
        const double share = static_cast<double>(counts[static_cast<size_t>(v)]) / draws;
        d << (v ? " " : "") << v << ":" << fmt(share, 4);
        if (std::abs(share - 0.25) > 0.01)
            return {false, "value " + std::to_string(v) + " at " + fmt(share, 4) +
                               ", outside 0.25 +/- 0.01"};
    }
    return {true, d.str()};
}

}  // namespace

int main() {
    struct Criterion {
        int id;
        const char* what;
        Outcome (*fn)();
    };
    const Criterion criteria[] = {
        {1, "retrieval equals exhaustive ranking", ac1_retrieval_oracle},
        {2, "conditioning sequence contract", ac2_sequence_contract},
        {3, "spatial assembly 27 channels, slice identity", ac3_spatial_assembly},
        {4, "zero-init pose slices are neutral", ac4_zero_init_neutrality},
        {5, "stage-1 freeze and gradient accuracy", ac5_gradient_contracts},
        {6, "guidance identities", ac6_guidance_identities},
        {7, "metric identities and closed-form oracle", ac7_metric_identities},
        {8, "toy end-to-end with retrieval gain", ac8_toy_end_to_end},
        {9, "retrieval count sampling uniform", ac9_retrieval_count},
    };

    int failed = 0;
    for (const auto& c : criteria) {
        Outcome o;
        try {
            o = c.fn();
        } catch (const std::exception& e) {
            o = {false, std::string("exception: ") + e.what()};
        }
        std::cout << (o.ok ? "[PASS]" : "[FAIL]") << " AC" << c.id << ": " << c.what;
        if (!o.detail.empty()) std::cout << " (" << o.detail << ")";
        std::cout << std::endl;
        if (!o.ok) ++failed;
    }
    std::cout << "[SKIP] AC10: full-scale reproduction needs a pretrained backbone and the real "
                 "dataset; out of desk scope" << std::endl;

    if (failed) {
        std::cout << "ACCEPTANCE: " << failed << " criterion(s) failed" << std::endl;
        return 1;
    }
    std::cout << "ACCEPTANCE: all checked criteria passed" << std::endl;
    return 0;
}
