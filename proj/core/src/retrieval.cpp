#include "fashionrag/retrieval.hpp"

#include "fashionrag/toy_vocab.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace fashionrag {

GarmentCategory category_from_string(const std::string& s) {
    if (s == "upper") return GarmentCategory::upper;
    if (s == "lower") return GarmentCategory::lower;
    if (s == "full") return GarmentCategory::full;
    throw std::runtime_error("unknown garment category: " + s);
}

std::string category_to_string(GarmentCategory c) {
    switch (c) {
        case GarmentCategory::upper: return "upper";
        case GarmentCategory::lower: return "lower";
        case GarmentCategory::full: return "full";
    }
    throw std::runtime_error("corrupt category value");
}

const GarmentRecord* EmbeddingIndex::find(const std::string& id) const {
    for (const auto& r : records)
        if (r.id == id) return &r;
    return nullptr;
}

std::vector<CatalogItem> load_catalog_manifest(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("catalog manifest: cannot open " + path);
    std::vector<CatalogItem> items;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        std::istringstream ss(line);
        CatalogItem item;
        std::string cat;
        if (!std::getline(ss, item.id, '\t') || !std::getline(ss, cat, '\t') ||
            !std::getline(ss, item.image_path, '\t') || !std::getline(ss, item.caption))
            throw std::runtime_error("catalog manifest: malformed line " + std::to_string(lineno) +
                                     " in " + path);
        item.category = category_from_string(cat);
        items.push_back(std::move(item));
    }
    return items;
}

void write_catalog_manifest(const std::string& path, const std::vector<CatalogItem>& items) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("catalog manifest: cannot write " + path);
    for (const auto& it : items)
        out << it.id << "\t" << category_to_string(it.category) << "\t" << it.image_path << "\t"
            << it.caption << "\n";
}

namespace {

void l2_normalize(std::vector<double>& v) {
    double n = 0.0;
    for (double x : v) n += x * x;
    n = std::sqrt(n);
    if (n < 1e-12) throw std::runtime_error("embedding has zero norm");
    for (double& x : v) x /= n;
}

}  // namespace

EmbeddingIndex encode_garment_catalog(const std::vector<CatalogItem>& items,
                                      const ImageEncoder& encoder,
                                      const std::string& encoder_tag,
                                      EncodeReport* report) {
    EmbeddingIndex index;
    index.encoder_tag = encoder_tag;
    for (const auto& item : items) {
        std::vector<double> emb;
        try {
            const Image img = read_png(item.image_path);
            emb = encoder(img);
            l2_normalize(emb);
        } catch (const std::exception& e) {
            if (report) report->failures.emplace_back(item.id, e.what());
            continue;
        }
        if (index.d_ret == 0) index.d_ret = static_cast<uint32_t>(emb.size());
        if (emb.size() != index.d_ret)
            throw std::runtime_error("encoder dimension changed mid-catalog at id " + item.id +
                                     ": got " + std::to_string(emb.size()) + ", expected " +
                                     std::to_string(index.d_ret));
        GarmentRecord rec;
        rec.id = item.id;
        rec.image_ref = item.image_path;
        rec.category = item.category;
        rec.embedding.assign(emb.begin(), emb.end());
        index.records.push_back(std::move(rec));
        if (report) ++report->encoded;
    }
    return index;
}

std::vector<double> encode_text_query(const std::string& caption, const TextEncoder& encoder) {
    if (caption.empty()) throw std::runtime_error("encode_text_query: empty caption");
    std::vector<double> emb = encoder(caption);
    l2_normalize(emb);
    return emb;
}

RetrievalResult retrieve_top_k(const EmbeddingIndex& index, const std::vector<double>& query,
                               size_t k, const std::set<std::string>& exclude_ids,
                               std::optional<GarmentCategory> category) {
    if (query.size() != index.d_ret)
        throw std::runtime_error("retrieve_top_k: query dimension " + std::to_string(query.size()) +
                                 " does not match index d_ret " + std::to_string(index.d_ret));
    std::vector<const GarmentRecord*> pool;
    pool.reserve(index.records.size());
    for (const auto& r : index.records) {
        if (category && r.category != *category) continue;
        if (exclude_ids.count(r.id)) continue;
        pool.push_back(&r);
    }
    if (k > pool.size())
        throw std::runtime_error("retrieve_top_k: requested k=" + std::to_string(k) + " but only " +
                                 std::to_string(pool.size()) + " candidates remain after filters");

    std::vector<RetrievalEntry> scored;
    scored.reserve(pool.size());
    for (const GarmentRecord* r : pool) {
        double s = 0.0;
        for (size_t i = 0; i < query.size(); ++i) s += query[i] * r->embedding[i];
        scored.push_back({r->id, s});
    }
    std::sort(scored.begin(), scored.end(), [](const RetrievalEntry& a, const RetrievalEntry& b) {
        if (a.score != b.score) return a.score > b.score;
        return a.id < b.id;
    });
    scored.resize(k);

    RetrievalResult result;
    result.entries = std::move(scored);
    return result;
}

namespace {

constexpr char kMagic[4] = {'F', 'R', 'I', 'X'};
constexpr uint32_t kVersion = 1;

void put_u32(std::ostream& out, uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                          static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
    out.write(reinterpret_cast<const char*>(b), 4);
}

uint32_t get_u32(std::istream& in, const char* what) {
    unsigned char b[4];
    if (!in.read(reinterpret_cast<char*>(b), 4))
        throw std::runtime_error(std::string("index file truncated reading ") + what);
    return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
           (static_cast<uint32_t>(b[2]) << 16) | (static_cast<uint32_t>(b[3]) << 24);
}

void put_string(std::ostream& out, const std::string& s) {
    put_u32(out, static_cast<uint32_t>(s.size()));
    out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::string get_string(std::istream& in, const char* what) {
    const uint32_t n = get_u32(in, what);
    std::string s(n, '\0');
    if (n && !in.read(s.data(), n))
        throw std::runtime_error(std::string("index file truncated reading ") + what);
    return s;
}

void put_f32(std::ostream& out, float v) {
    static_assert(sizeof(float) == 4);
    uint32_t bits;
    std::memcpy(&bits, &v, 4);
    put_u32(out, bits);
}

float get_f32(std::istream& in, const char* what) {
    const uint32_t bits = get_u32(in, what);
    float v;
    std::memcpy(&v, &bits, 4);
    return v;
}

}  // namespace

void persist_index(const EmbeddingIndex& index, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("persist_index: cannot write " + path);
    out.write(kMagic, 4);
    put_u32(out, kVersion);
    put_u32(out, index.d_ret);
    put_u32(out, static_cast<uint32_t>(index.records.size()));
    for (const auto& r : index.records) {
        if (r.embedding.size() != index.d_ret)
            throw std::runtime_error("persist_index: record " + r.id + " has wrong dimension");
        put_string(out, r.id);
        out.put(static_cast<char>(r.category));
        put_string(out, r.image_ref);
        for (float v : r.embedding) put_f32(out, v);
    }
    put_string(out, index.encoder_tag);
    if (!out) throw std::runtime_error("persist_index: write failed for " + path);
}

EmbeddingIndex load_index(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("load_index: cannot open " + path);
    char magic[4];
    if (!in.read(magic, 4)) throw std::runtime_error("load_index: truncated magic in " + path);
    if (std::memcmp(magic, kMagic, 4) != 0)
        throw std::runtime_error("load_index: bad magic in " + path + ", expected FRIX, found " +
                                 std::string(magic, 4));
    const uint32_t version = get_u32(in, "version");
    if (version != kVersion)
        throw std::runtime_error("load_index: unsupported version " + std::to_string(version) +
                                 ", expected " + std::to_string(kVersion));
    EmbeddingIndex index;
    index.d_ret = get_u32(in, "d_ret");
    const uint32_t count = get_u32(in, "record count");
    index.records.reserve(count);
    for (uint32_t i = 0; i < count; ++i) {
        GarmentRecord rec;
        rec.id = get_string(in, "record id");
        int cat = in.get();
        if (cat == EOF) throw std::runtime_error("index file truncated reading category");
        if (cat > 2) throw std::runtime_error("load_index: invalid category code " + std::to_string(cat));
        rec.category = static_cast<GarmentCategory>(cat);
        rec.image_ref = get_string(in, "image_ref");
        rec.embedding.resize(index.d_ret);
        for (uint32_t j = 0; j < index.d_ret; ++j) rec.embedding[j] = get_f32(in, "embedding");
        index.records.push_back(std::move(rec));
    }
    // Trailing encoder tag; absent in a file that ends exactly at the records.
    if (in.peek() != EOF) index.encoder_tag = get_string(in, "encoder tag");
    return index;
}

// ------------------------------------------------------------- toy encoders

namespace {

// Saturation-weighted mean color plus band-transition energy along each
// axis, classified into the four motif classes. Chroma weighting makes the
// color statistic follow the garment whether the input is a product tile
// (uniformly saturated, weighting is a no-op on the hue direction) or a
// dressed person (white background, gray clothing and low-chroma skin all
// carry little weight). The energy ratio is normalized by mean luminance so
// dark and bright garments classify identically.
void toy_image_stats(const Image& img, double rgb[3], int& motif) {
    const Image color = to_rgb(img);
    rgb[0] = rgb[1] = rgb[2] = 0.0;
    double wsum = 0.0;
    for (int y = 0; y < color.height; ++y)
        for (int x = 0; x < color.width; ++x) {
            const double r = color.at(0, y, x), g = color.at(1, y, x), b = color.at(2, y, x);
            const double w = std::max({r, g, b}) - std::min({r, g, b});
            rgb[0] += w * r;
            rgb[1] += w * g;
            rgb[2] += w * b;
            wsum += w;
        }
    const double npix = static_cast<double>(color.width) * color.height;
    if (wsum > 1e-9) {
        for (int c = 0; c < 3; ++c) rgb[c] /= wsum;
    } else {
        // Fully neutral image: fall back to the plain mean.
        rgb[0] = rgb[1] = rgb[2] = 0.0;
        for (int y = 0; y < color.height; ++y)
            for (int x = 0; x < color.width; ++x)
                for (int c = 0; c < 3; ++c) rgb[c] += color.at(c, y, x);
        for (int c = 0; c < 3; ++c) rgb[c] /= npix;
    }

    const Image gray = to_gray(img);
    double gx = 0.0, gy = 0.0, lum = 0.0;
    for (int y = 0; y < gray.height; ++y)
        for (int x = 0; x < gray.width; ++x) {
            lum += gray.at(0, y, x);
            if (x + 1 < gray.width) gx += std::abs(gray.at(0, y, x + 1) - gray.at(0, y, x));
            if (y + 1 < gray.height) gy += std::abs(gray.at(0, y + 1, x) - gray.at(0, y, x));
        }
    lum /= npix;
    gx /= static_cast<double>(gray.height) * std::max(1, gray.width - 1);
    gy /= static_cast<double>(gray.width) * std::max(1, gray.height - 1);
    const double rx = lum > 1e-9 ? gx / lum : 0.0;
    const double ry = lum > 1e-9 ? gy / lum : 0.0;
    const double thresh = 0.03;
    const bool vx = rx > thresh;  // variation along x: vertical stripes
    const bool vy = ry > thresh;  // variation along y: horizontal bands
    if (vx && vy) motif = 3;
    else if (vx) motif = 2;
    else if (vy) motif = 1;
    else motif = 0;
}

// Hue dominates the embedding. With the color block scaled by W, a garment
// of the same color but a different motif must outrank one of the nearest
// distinct color with a matching motif; the closest color pair in the
// palette (orange/yellow) has cosine 0.973, so W^2 * (1 - 0.973) > 1 needs
// W >= 6.2. The motif bit then acts as a tie-breaker within a color.
constexpr double kColorWeight = 8.0;

std::vector<double> toy_embedding(const double rgb[3], int motif) {
    std::vector<double> e(7, 0.0);
    double n = std::sqrt(rgb[0] * rgb[0] + rgb[1] * rgb[1] + rgb[2] * rgb[2]);
    if (n < 1e-12) n = 1.0;
    for (int c = 0; c < 3; ++c) e[static_cast<size_t>(c)] = kColorWeight * rgb[c] / n;
    if (motif >= 0) e[static_cast<size_t>(3 + motif)] = 1.0;
    return e;
}

std::string lower(std::string s) {
    for (char& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    return s;
}

}  // namespace

std::vector<double> toy_encode_image(const Image& img) {
    double rgb[3];
    int motif;
    toy_image_stats(img, rgb, motif);
    return toy_embedding(rgb, motif);
}

std::vector<double> toy_encode_text(const std::string& caption) {
    const std::string text = lower(caption);
    // Whole-word scan over the shared vocabulary tables.
    auto has_word = [&](const std::string& w) {
        size_t pos = 0;
        while ((pos = text.find(w, pos)) != std::string::npos) {
            const bool left_ok = pos == 0 || !std::isalpha(static_cast<unsigned char>(text[pos - 1]));
            const size_t end = pos + w.size();
            const bool right_ok =
                end >= text.size() || !std::isalpha(static_cast<unsigned char>(text[end]));
            if (left_ok && right_ok) return true;
            pos = end;
        }
        return false;
    };

    double rgb[3] = {0.0, 0.0, 0.0};
    bool have_color = false;
    for (int i = 0; i < toyvocab::kNumColors; ++i) {
        if (has_word(toyvocab::kColorWords[static_cast<size_t>(i)])) {
            for (int c = 0; c < 3; ++c) rgb[c] = toyvocab::kColorRgb[static_cast<size_t>(i)][static_cast<size_t>(c)];
            have_color = true;
            break;
        }
    }
    int motif = -1;
    for (int i = 0; i < toyvocab::kNumMotifs; ++i) {
        if (has_word(toyvocab::kMotifWords[static_cast<size_t>(i)])) {
            motif = i;
            break;
        }
    }
    if (!have_color && motif < 0)
        throw std::runtime_error("toy text encoder: no recognizable color or motif word in: " + caption);
    return toy_embedding(rgb, motif);
}

ImageEncoder image_encoder_for_tag(const std::string& tag) {
    if (tag == "toy-color-v1") return [](const Image& img) { return toy_encode_image(img); };
    return [tag](const Image&) -> std::vector<double> {
        throw std::runtime_error("image encoder '" + tag +
                                 "' requires pretrained weights that are not shipped; "
                                 "use the desk profile (toy-color-v1) or provide weights");
    };
}

TextEncoder text_encoder_for_tag(const std::string& tag) {
    if (tag == "toy-color-v1") return [](const std::string& s) { return toy_encode_text(s); };
    return [tag](const std::string&) -> std::vector<double> {
        throw std::runtime_error("text encoder '" + tag +
                                 "' requires pretrained weights that are not shipped; "
                                 "use the desk profile (toy-color-v1) or provide weights");
    };
}

}  // namespace fashionrag
