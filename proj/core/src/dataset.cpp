#include "fashionrag/dataset.hpp"

#include "fashionrag/nn.hpp"
#include "fashionrag/rng.hpp"
#include "fashionrag/toy_vocab.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace fs = std::filesystem;

namespace fashionrag {

namespace {

const char* kCategoryDirs[3] = {"upper", "lower", "full"};

std::array<Keypoint, kNumKeypoints> parse_keypoints(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open keypoint record " + path);
    std::array<Keypoint, kNumKeypoints> kps{};
    std::string line;
    int count = 0;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        if (count >= kNumKeypoints) throw std::runtime_error("too many keypoints in " + path);
        std::istringstream ss(line);
        Keypoint kp;
        if (!(ss >> kp.x >> kp.y >> kp.confidence))
            throw std::runtime_error("malformed keypoint line in " + path + ": " + line);
        std::string extra;
        if (ss >> extra) throw std::runtime_error("trailing tokens in keypoint line of " + path);
        kps[static_cast<size_t>(count++)] = kp;
    }
    if (count != kNumKeypoints)
        throw std::runtime_error("expected " + std::to_string(kNumKeypoints) + " keypoints, found " +
                                 std::to_string(count) + " in " + path);
    return kps;
}

}  // namespace

LoadReport load_dataset(const std::string& root, const std::string& split) {
    if (split != "train" && split != "test")
        throw std::runtime_error("load_dataset: split must be train or test, got " + split);
    const fs::path base = fs::path(root) / split;
    if (!fs::exists(base)) throw std::runtime_error("load_dataset: missing split directory " + base.string());

    LoadReport report;
    for (int c = 0; c < 3; ++c) {
        const fs::path cdir = base / kCategoryDirs[c];
        const fs::path captions = cdir / "captions.tsv";
        if (!fs::exists(captions)) continue;
        std::ifstream in(captions);
        if (!in) throw std::runtime_error("load_dataset: cannot open " + captions.string());
        std::string line;
        int lineno = 0;
        while (std::getline(in, line)) {
            ++lineno;
            if (line.empty()) continue;
            std::istringstream ss(line);
            std::string id;
            if (!std::getline(ss, id, '\t') || id.empty()) {
                report.errors.emplace_back("<line " + std::to_string(lineno) + ">",
                                           "malformed caption row in " + captions.string());
                continue;
            }
            SampleAnnotation s;
            s.sample_id = id;
            s.category = static_cast<GarmentCategory>(c);
            std::string phrase;
            while (std::getline(ss, phrase, '\t'))
                if (!phrase.empty()) s.noun_phrases.push_back(phrase);
            if (s.noun_phrases.empty()) {
                report.errors.emplace_back(id, "no noun phrases");
                continue;
            }
            s.image_path = (cdir / "images" / (id + ".png")).string();
            s.mask_path = (cdir / "masks" / (id + ".png")).string();
            s.garment_id = id;
            const fs::path garment = cdir / "garments" / (id + ".png");
            const fs::path kp = cdir / "keypoints" / (id + ".txt");
            try {
                if (!fs::exists(s.image_path)) throw std::runtime_error("missing image " + s.image_path);
                if (!fs::exists(s.mask_path)) throw std::runtime_error("missing mask " + s.mask_path);
                if (!fs::exists(garment)) throw std::runtime_error("missing garment " + garment.string());
                s.keypoints = parse_keypoints(kp.string());
            } catch (const std::exception& e) {
                report.errors.emplace_back(id, e.what());
                continue;
            }
            report.per_category[s.category]++;
            report.samples.push_back(std::move(s));
        }
    }
    if (report.samples.empty())
        throw std::runtime_error("load_dataset: split '" + split + "' under " + root +
                                 " contains no loadable samples");
    return report;
}

std::string build_caption(const std::vector<std::string>& phrases, int n_c, size_t offset) {
    if (n_c < 1 || n_c > 3)
        throw std::runtime_error("build_caption: n_c must be in [1,3], got " + std::to_string(n_c));
    if (static_cast<size_t>(n_c) > phrases.size())
        throw std::runtime_error("build_caption: n_c=" + std::to_string(n_c) + " exceeds available " +
                                 std::to_string(phrases.size()) + " phrases");
    std::string out;
    for (int i = 0; i < n_c; ++i) {
        if (i) out += ", ";
        out += phrases[(offset + static_cast<size_t>(i)) % phrases.size()];
    }
    return out;
}

size_t caption_offset(const std::string& sample_id, size_t n_phrases) {
    if (n_phrases == 0) return 0;
    return static_cast<size_t>(fnv1a_bytes(sample_id.data(), sample_id.size()) % n_phrases);
}

std::map<std::string, std::string> make_unpaired_assignment(
    const std::vector<SampleAnnotation>& samples, uint64_t seed) {
    std::map<GarmentCategory, std::vector<std::string>> groups;
    for (const auto& s : samples) groups[s.category].push_back(s.sample_id);

    Rng rng(seed);
    std::map<std::string, std::string> assignment;
    for (auto& [cat, ids] : groups) {  // map iterates categories in fixed order
        if (ids.size() < 2)
            throw std::runtime_error("unpaired assignment: category " + category_to_string(cat) +
                                     " has " + std::to_string(ids.size()) +
                                     " sample(s); a derangement needs at least 2");
        std::vector<std::string> donors = ids;
        // Sattolo's algorithm: a uniform cyclic permutation, hence no fixed points.
        for (size_t i = donors.size() - 1; i > 0; --i) {
            const size_t j = static_cast<size_t>(rng.uniform_index(i));
            std::swap(donors[i], donors[j]);
        }
        for (size_t i = 0; i < ids.size(); ++i) assignment[ids[i]] = donors[i];
    }
    return assignment;
}

void write_unpaired_assignment(const std::string& path,
                               const std::map<std::string, std::string>& assignment) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write unpaired assignment " + path);
    for (const auto& [id, donor] : assignment) out << id << "\t" << donor << "\n";
}

std::map<std::string, std::string> load_unpaired_assignment(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open unpaired assignment " + path);
    std::map<std::string, std::string> assignment;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        const auto tab = line.find('\t');
        if (tab == std::string::npos)
            throw std::runtime_error("malformed unpaired assignment line: " + line);
        assignment[line.substr(0, tab)] = line.substr(tab + 1);
    }
    return assignment;
}

// ------------------------------------------------------------- toy dataset

namespace {

struct Box {
    int x0, y0, x1, y1;  // half-open
    bool contains(int x, int y) const { return x >= x0 && x < x1 && y >= y0 && y < y1; }
};

Box garment_box(GarmentCategory cat, int w, int h) {
    // All edges sit on multiples of 8 (for the default 64x96 canvas) so the
    // edit region and the motif bands align with the 8x8 latent patch grid.
    const Box torso{w / 4, h / 4, 3 * w / 4, h / 2};
    const Box hips{w / 4, h / 2, 3 * w / 4, 3 * h / 4};
    switch (cat) {
        case GarmentCategory::upper: return torso;
        case GarmentCategory::lower: return hips;
        case GarmentCategory::full: return Box{w / 4, h / 4, 3 * w / 4, 3 * h / 4};
    }
    throw std::runtime_error("corrupt category");
}

void fill_rect(Image& img, const Box& b, const double rgb[3]) {
    for (int y = std::max(0, b.y0); y < std::min(img.height, b.y1); ++y)
        for (int x = std::max(0, b.x0); x < std::min(img.width, b.x1); ++x)
            for (int c = 0; c < 3; ++c) img.at(c, y, x) = rgb[c];
}

void fill_circle(Image& img, int cx, int cy, int r, const double rgb[3]) {
    for (int y = std::max(0, cy - r); y <= std::min(img.height - 1, cy + r); ++y)
        for (int x = std::max(0, cx - r); x <= std::min(img.width - 1, cx + r); ++x)
            if ((x - cx) * (x - cx) + (y - cy) * (y - cy) <= r * r)
                for (int c = 0; c < 3; ++c) img.at(c, y, x) = rgb[c];
}

constexpr double kSkin[3] = {0.85, 0.70, 0.60};
constexpr double kNeutral[3] = {0.75, 0.75, 0.75};
constexpr double kWhite[3] = {1.0, 1.0, 1.0};

Image draw_person(int w, int h, GarmentCategory cat, int color, int motif) {
    Image img(w, h, 3);
    fill_rect(img, Box{0, 0, w, h}, kWhite);

    // limbs and head
    fill_circle(img, w / 2, h / 10, h / 14, kSkin);
    fill_rect(img, Box{w / 2 - w / 32, h / 10, w / 2 + w / 32, h / 5}, kSkin);      // neck
    fill_rect(img, Box{w / 4 - w / 16, h / 5, w / 4, h / 2}, kSkin);                // right arm
    fill_rect(img, Box{3 * w / 4, h / 5, 3 * w / 4 + w / 16, h / 2}, kSkin);        // left arm
    fill_rect(img, Box{w / 2 - w / 8 - w / 16, 4 * h / 5, w / 2 - w / 8, h}, kSkin);  // right leg
    fill_rect(img, Box{w / 2 + w / 8, 4 * h / 5, w / 2 + w / 8 + w / 16, h}, kSkin);  // left leg

    // neutral clothing on the non-edited region
    const Box torso = garment_box(GarmentCategory::upper, w, h);
    const Box hips = garment_box(GarmentCategory::lower, w, h);
    if (cat == GarmentCategory::lower) fill_rect(img, torso, kNeutral);
    if (cat == GarmentCategory::upper) fill_rect(img, hips, kNeutral);

    // the garment itself, motif phase anchored at the box corner
    const Box g = garment_box(cat, w, h);
    const auto& rgb = toyvocab::kColorRgb[static_cast<size_t>(color)];
    for (int y = g.y0; y < g.y1; ++y)
        for (int x = g.x0; x < g.x1; ++x) {
            const double f = toyvocab::motif_brightness(motif, x - g.x0, y - g.y0);
            for (int c = 0; c < 3; ++c) img.at(c, y, x) = rgb[static_cast<size_t>(c)] * f;
        }
    return img;
}

Image draw_garment_patch(int size, int color, int motif) {
    Image img(size, size, 3);
    const auto& rgb = toyvocab::kColorRgb[static_cast<size_t>(color)];
    for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x) {
            const double f = toyvocab::motif_brightness(motif, x, y);
            for (int c = 0; c < 3; ++c) img.at(c, y, x) = rgb[static_cast<size_t>(c)] * f;
        }
    return img;
}

Image draw_mask(int w, int h, GarmentCategory cat) {
    Image img(w, h, 1);
    const Box g = garment_box(cat, w, h);
    for (int y = g.y0; y < g.y1; ++y)
        for (int x = g.x0; x < g.x1; ++x) img.at(0, y, x) = 1.0;
    return img;
}

std::array<Keypoint, kNumKeypoints> skeleton(int w, int h) {
    auto kp = [](int x, int y) { return Keypoint{static_cast<double>(x), static_cast<double>(y), 1.0}; };
    return {
        kp(w / 2, h / 10),                    // nose
        kp(w / 2, h / 5),                     // neck
        kp(w / 4, h / 5),                     // right shoulder
        kp(w / 4 - w / 16, h / 3),            // right elbow
        kp(w / 4 - w / 16, h / 2),            // right wrist
        kp(3 * w / 4, h / 5),                 // left shoulder
        kp(3 * w / 4 + w / 16, h / 3),        // left elbow
        kp(3 * w / 4 + w / 16, h / 2),        // left wrist
        kp(w / 2 - w / 8, h / 2),             // right hip
        kp(w / 2 - w / 8, 3 * h / 4),         // right knee
        kp(w / 2 - w / 8, 19 * h / 20),       // right ankle
        kp(w / 2 + w / 8, h / 2),             // left hip
        kp(w / 2 + w / 8, 3 * h / 4),         // left knee
        kp(w / 2 + w / 8, 19 * h / 20),       // left ankle
        kp(w / 2 - w / 32, h / 12),           // right eye
        kp(w / 2 + w / 32, h / 12),           // left eye
        kp(w / 2 - w / 16, h / 10),           // right ear
        kp(w / 2 + w / 16, h / 10),           // left ear
    };
}

void write_keypoints(const std::string& path, const std::array<Keypoint, kNumKeypoints>& kps) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write keypoints " + path);
    for (const auto& kp : kps)
        out << static_cast<int>(kp.x) << " " << static_cast<int>(kp.y) << " " << kp.confidence << "\n";
}

}  // namespace

ToyClass toy_class_of(int index) {
    return ToyClass{index % toyvocab::kNumColors,
                    (index / toyvocab::kNumColors) % toyvocab::kNumMotifs};
}

void generate_toy_dataset(const std::string& root, const ToyDatasetSpec& spec) {
    if (spec.n_train < 8) throw std::runtime_error("toy dataset: n_train must be at least 8");
    if (spec.width % 8 || spec.height % 8)
        throw std::runtime_error("toy dataset: dimensions must be divisible by 8");

    Rng rng(spec.seed);
    std::vector<CatalogItem> catalog;

    auto emit_split = [&](const std::string& split, const std::string& prefix, int count, int base_index) {
        for (int c = 0; c < 3; ++c) {
            const fs::path cdir = fs::path(root) / split / kCategoryDirs[c];
            fs::create_directories(cdir / "images");
            fs::create_directories(cdir / "garments");
            fs::create_directories(cdir / "masks");
            fs::create_directories(cdir / "keypoints");
        }
        std::array<std::ofstream, 3> captions;
        for (int c = 0; c < 3; ++c) {
            const fs::path p = fs::path(root) / split / kCategoryDirs[c] / "captions.tsv";
            captions[static_cast<size_t>(c)].open(p);
            if (!captions[static_cast<size_t>(c)])
                throw std::runtime_error("toy dataset: cannot write " + p.string());
        }

        for (int i = 0; i < count; ++i) {
            const int gi = base_index + i;
            const ToyClass cls = toy_class_of(gi);
            const auto cat = static_cast<GarmentCategory>(gi % 3);
            const int ci = static_cast<int>(cat);
            char id[16];
            std::snprintf(id, sizeof(id), "%s%04d", prefix.c_str(), i);

            const fs::path cdir = fs::path(root) / split / kCategoryDirs[ci];
            const std::string image_path = (cdir / "images" / (std::string(id) + ".png")).string();
            const std::string garment_path = (cdir / "garments" / (std::string(id) + ".png")).string();
            const std::string mask_path = (cdir / "masks" / (std::string(id) + ".png")).string();
            const std::string kp_path = (cdir / "keypoints" / (std::string(id) + ".txt")).string();

            write_png(image_path, draw_person(spec.width, spec.height, cat, cls.color, cls.motif));
            write_png(garment_path, draw_garment_patch(spec.garment_size, cls.color, cls.motif));
            write_png(mask_path, draw_mask(spec.width, spec.height, cat));
            write_keypoints(kp_path, skeleton(spec.width, spec.height));

            const std::string noun = toyvocab::kGarmentNouns[static_cast<size_t>(ci)];
            const std::string style =
                toyvocab::kStyleWords[static_cast<size_t>(rng.uniform_index(toyvocab::kStyleWords.size()))];
            const std::string p1 = std::string(toyvocab::kColorWords[static_cast<size_t>(cls.color)]) + " " + noun;
            const std::string p2 = std::string(toyvocab::kMotifWords[static_cast<size_t>(cls.motif)]) + " pattern";
            const std::string p3 = style + " style";
            captions[static_cast<size_t>(ci)] << id << "\t" << p1 << "\t" << p2 << "\t" << p3 << "\n";

            CatalogItem item;
            item.id = id;
            item.category = cat;
            item.image_path = (fs::path(split) / kCategoryDirs[ci] / "garments" / (std::string(id) + ".png")).string();
            item.caption = p1 + ", " + p2 + ", " + p3;
            catalog.push_back(std::move(item));
        }
    };

    emit_split("train", "tr", spec.n_train, 0);
    emit_split("test", "te", spec.n_test, spec.n_train);

    write_catalog_manifest((fs::path(root) / "catalog.tsv").string(), catalog);
}

}  // namespace fashionrag
