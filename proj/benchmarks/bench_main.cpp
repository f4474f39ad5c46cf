// Microbenchmarks for the hot paths: retrieval over a catalog, the
// conditioning stack (vision + adapter + text encoder), one denoiser forward,
// the image metrics, and the Gaussian feature distance. All inputs are
// synthetic so the binary runs without a dataset on disk.

#include "fashionrag/adapter.hpp"
#include "fashionrag/conditioning.hpp"
#include "fashionrag/config.hpp"
#include "fashionrag/diffusion.hpp"
#include "fashionrag/image.hpp"
#include "fashionrag/metrics.hpp"
#include "fashionrag/retrieval.hpp"
#include "fashionrag/rng.hpp"

#include <benchmark/benchmark.h>

#include <cmath>
#include <map>
#include <string>
#include <utility>
#include <vector>

using namespace fashionrag;

namespace {

// Catalog of n random unit vectors in dimension d, cached across iterations.
const EmbeddingIndex& synthetic_index(int64_t n, int64_t d) {
    static std::map<std::pair<int64_t, int64_t>, EmbeddingIndex> cache;
    auto it = cache.find({n, d});
    if (it != cache.end()) return it->second;

    Rng rng(static_cast<uint64_t>(n * 1315423911 + d));
    EmbeddingIndex index;
    index.d_ret = static_cast<uint32_t>(d);
    index.encoder_tag = "bench";
    index.records.resize(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) {
        GarmentRecord& rec = index.records[static_cast<size_t>(i)];
        rec.id = "g" + std::to_string(i);
        rec.category = GarmentCategory::upper;
        rec.embedding.resize(static_cast<size_t>(d));
        double norm2 = 0.0;
        for (auto& v : rec.embedding) {
            v = static_cast<float>(rng.normal());
            norm2 += static_cast<double>(v) * v;
        }
        const float inv = static_cast<float>(1.0 / std::sqrt(norm2));
        for (auto& v : rec.embedding) v *= inv;
    }
    return cache.emplace(std::make_pair(n, d), std::move(index)).first->second;
}

Image synthetic_image(int w, int h, uint64_t seed) {
    Image img;
    img.width = w;
    img.height = h;
    img.channels = 3;
    img.data.resize(static_cast<size_t>(3) * w * h);
    Rng rng(seed);
    for (auto& v : img.data) v = rng.uniform();
    return img;
}

const PipelineModel& desk_model() {
    static PipelineModel model = build_pipeline(Config::profile_defaults("desk"), 2, 42);
    return model;
}

void BM_RetrieveTopK(benchmark::State& state) {
    const int64_t n = state.range(0);
    const int64_t d = state.range(1);
    const EmbeddingIndex& index = synthetic_index(n, d);

    Rng rng(7);
    std::vector<double> query(static_cast<size_t>(d));
    double norm2 = 0.0;
    for (auto& v : query) {
        v = rng.normal();
        norm2 += v * v;
    }
    for (auto& v : query) v /= std::sqrt(norm2);

    for (auto _ : state) {
        RetrievalResult r = retrieve_top_k(index, query, 20);
        benchmark::DoNotOptimize(r.entries.data());
    }
    state.SetItemsProcessed(state.iterations() * n);
}
BENCHMARK(BM_RetrieveTopK)
    ->Args({1000, 7})
    ->Args({10000, 7})
    ->Args({100000, 7})
    ->Args({10000, 512})
    ->Unit(benchmark::kMicrosecond);

void BM_ToyEncodeImage(benchmark::State& state) {
    const Image img = synthetic_image(192, 256, 3);
    for (auto _ : state) {
        std::vector<double> e = toy_encode_image(img);
        benchmark::DoNotOptimize(e.data());
    }
}
BENCHMARK(BM_ToyEncodeImage)->Unit(benchmark::kMicrosecond);

// Full conditioning stack: three garments through the vision encoder and
// adapter, caption tokenized and embedded, sequence encoded to psi.
void BM_EncodeCondition(benchmark::State& state) {
    const PipelineModel& model = desk_model();
    std::vector<Image> garments;
    for (int i = 0; i < 3; ++i) garments.push_back(synthetic_image(64, 96, 10 + i));
    const std::string caption = "red checkered dress with short sleeves";

    for (auto _ : state) {
        auto [psi, keep] = model.encode_condition(caption, garments);
        benchmark::DoNotOptimize(psi.data());
        benchmark::DoNotOptimize(keep.data());
    }
}
BENCHMARK(BM_EncodeCondition)->Unit(benchmark::kMillisecond);

// One denoiser forward at the desk latent resolution (27 x 12 x 8). This is
// the per-step cost of sampling; a 50-step draw with three guidance branches
// runs it 150 times.
void BM_UNetForward(benchmark::State& state) {
    const PipelineModel& model = desk_model();
    const int lw = 64 / model.vae.patch;
    const int lh = 96 / model.vae.patch;

    Rng rng(11);
    std::vector<double> g(static_cast<size_t>(kSpatialChannels) * lh * lw);
    for (auto& v : g) v = rng.normal();
    const Tensor gamma = Tensor::from_vector({kSpatialChannels, lh, lw}, std::move(g));

    std::vector<Image> garments = {synthetic_image(64, 96, 21)};
    auto [psi, keep] = model.encode_condition("blue banded top", garments);

    for (auto _ : state) {
        Tensor eps = model.unet.forward(gamma, 500.0, psi, &keep);
        benchmark::DoNotOptimize(eps.data());
    }
}
BENCHMARK(BM_UNetForward)->Unit(benchmark::kMillisecond);

void BM_Ssim(benchmark::State& state) {
    const Image a = synthetic_image(64, 96, 31);
    const Image b = synthetic_image(64, 96, 32);
    for (auto _ : state) {
        double v = ssim(a, b);
        benchmark::DoNotOptimize(v);
    }
}
BENCHMARK(BM_Ssim)->Unit(benchmark::kMicrosecond);

void BM_Lpips(benchmark::State& state) {
    const Image a = synthetic_image(64, 96, 41);
    const Image b = synthetic_image(64, 96, 42);
    for (auto _ : state) {
        double v = lpips(a, b);
        benchmark::DoNotOptimize(v);
    }
}
BENCHMARK(BM_Lpips)->Unit(benchmark::kMicrosecond);

// Gaussian fit plus Frechet distance over 256 synthetic feature vectors
// (enough for a full-rank covariance at both dimensions); the matrix square
// root dominates as the feature dimension grows.
void BM_FrechetDistance(benchmark::State& state) {
    const int64_t dim = state.range(0);
    Rng rng(55);
    std::vector<std::vector<double>> fa(256), fb(256);
    for (int i = 0; i < 256; ++i) {
        fa[static_cast<size_t>(i)].resize(static_cast<size_t>(dim));
        fb[static_cast<size_t>(i)].resize(static_cast<size_t>(dim));
        for (auto& v : fa[static_cast<size_t>(i)]) v = rng.normal();
        for (auto& v : fb[static_cast<size_t>(i)]) v = 0.5 + rng.normal();
    }

    for (auto _ : state) {
        const FeatureStats sa = FeatureStats::from_features(fa);
        const FeatureStats sb = FeatureStats::from_features(fb);
        FrechetResult r = frechet_distance(sa, sb);
        benchmark::DoNotOptimize(r.value);
    }
}
BENCHMARK(BM_FrechetDistance)->Arg(8)->Arg(64)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
