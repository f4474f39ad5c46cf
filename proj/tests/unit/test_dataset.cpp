#include <doctest.h>

#include "fashionrag/dataset.hpp"
#include "fashionrag/retrieval.hpp"
#include "fashionrag/toy_vocab.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>

using namespace fashionrag;
namespace fs = std::filesystem;

namespace {

std::string temp_root(const char* name) {
    return (fs::temp_directory_path() / name).string();
}

// Directory tree as (relative path -> file bytes).
std::map<std::string, std::string> tree_bytes(const std::string& root) {
    std::map<std::string, std::string> out;
    for (const auto& e : fs::recursive_directory_iterator(root)) {
        if (!e.is_regular_file()) continue;
        std::ifstream in(e.path(), std::ios::binary);
        std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
        out[fs::relative(e.path(), root).string()] = std::move(bytes);
    }
    return out;
}

}  // namespace

TEST_CASE("build_caption joins phrases in order") {
    std::vector<std::string> phrases = {"long white dress", "rouched front", "floor length"};
    CHECK(build_caption(phrases, 3) == "long white dress, rouched front, floor length");
    CHECK(build_caption(phrases, 1) == "long white dress");
    CHECK(build_caption(phrases, 2) == "long white dress, rouched front");
    CHECK_THROWS(build_caption(phrases, 4));
    CHECK_THROWS(build_caption({"one"}, 2));
    // order preserved for permuted inputs
    std::vector<std::string> permuted = {"floor length", "long white dress", "rouched front"};
    CHECK(build_caption(permuted, 3) == "floor length, long white dress, rouched front");
}

TEST_CASE("toy dataset: regeneration is byte-identical and loads back") {
    const std::string root_a = temp_root("frag_toy_a");
    const std::string root_b = temp_root("frag_toy_b");
    fs::remove_all(root_a);
    fs::remove_all(root_b);
    ToyDatasetSpec spec;
    spec.n_train = 8;
    spec.n_test = 8;
    spec.seed = 0;
    generate_toy_dataset(root_a, spec);
    generate_toy_dataset(root_b, spec);
    CHECK(tree_bytes(root_a) == tree_bytes(root_b));

    LoadReport train = load_dataset(root_a, "train");
    CHECK(train.samples.size() == 8);
    CHECK(train.errors.empty());
    LoadReport test = load_dataset(root_a, "test");
    CHECK(test.samples.size() == 8);
    for (const auto& s : train.samples) {
        CHECK(s.noun_phrases.size() == 3);
        CHECK(fs::exists(s.image_path));
        CHECK(fs::exists(s.mask_path));
    }
    fs::remove_all(root_b);
    fs::remove_all(root_a);
}

TEST_CASE("toy dataset: caption color word matches the garment patch color") {
    const std::string root = temp_root("frag_toy_color");
    fs::remove_all(root);
    ToyDatasetSpec spec;
    spec.n_train = 16;
    spec.n_test = 0;
    generate_toy_dataset(root, spec);
    LoadReport train = load_dataset(root, "train");
    REQUIRE(train.samples.size() == 16);
    for (const auto& s : train.samples) {
        // locate garment image through the catalog
        auto catalog = load_catalog_manifest(root + "/catalog.tsv");
        auto it = std::find_if(catalog.begin(), catalog.end(),
                               [&](const CatalogItem& c) { return c.id == s.garment_id; });
        REQUIRE(it != catalog.end());
        Image patch = read_png(root + "/" + it->image_path);
        // nearest palette color by direction must equal the caption's color word
        double rgb[3] = {0, 0, 0};
        for (int y = 0; y < patch.height; ++y)
            for (int x = 0; x < patch.width; ++x)
                for (int c = 0; c < 3; ++c) rgb[c] += patch.at(c, y, x);
        double n = std::sqrt(rgb[0] * rgb[0] + rgb[1] * rgb[1] + rgb[2] * rgb[2]);
        int best = -1;
        double best_cos = -2.0;
        for (int k = 0; k < toyvocab::kNumColors; ++k) {
            const auto& p = toyvocab::kColorRgb[static_cast<size_t>(k)];
            const double pn = std::sqrt(p[0] * p[0] + p[1] * p[1] + p[2] * p[2]);
            const double cosv = (rgb[0] * p[0] + rgb[1] * p[1] + rgb[2] * p[2]) / (n * pn);
            if (cosv > best_cos) {
                best_cos = cosv;
                best = k;
            }
        }
        const std::string color_word = toyvocab::kColorWords[static_cast<size_t>(best)];
        CHECK(s.noun_phrases[0].rfind(color_word, 0) == 0);
    }
    fs::remove_all(root);
}

TEST_CASE("toy dataset: every caption retrieves its own garment top-1") {
    const std::string root = temp_root("frag_toy_top1");
    fs::remove_all(root);
    ToyDatasetSpec spec;
    spec.n_train = 24;
    spec.n_test = 8;  // 32 samples total: every (color, motif) class unique
    generate_toy_dataset(root, spec);
    auto catalog = load_catalog_manifest(root + "/catalog.tsv");
    for (auto& item : catalog) item.image_path = root + "/" + item.image_path;
    EmbeddingIndex idx = encode_garment_catalog(catalog, image_encoder_for_tag("toy-color-v1"),
                                                "toy-color-v1");
    REQUIRE(idx.records.size() == 32);
    for (const auto& item : catalog) {
        auto q = encode_text_query(item.caption, text_encoder_for_tag("toy-color-v1"));
        auto r = retrieve_top_k(idx, q, 1);
        INFO("caption: ", item.caption);
        CHECK(r.entries[0].id == item.id);
    }
    fs::remove_all(root);
}

TEST_CASE("unpaired assignment: derangement within category, deterministic") {
    const std::string root = temp_root("frag_toy_unpaired");
    fs::remove_all(root);
    ToyDatasetSpec spec;
    spec.n_train = 100;
    spec.n_test = 0;
    generate_toy_dataset(root, spec);
    LoadReport train = load_dataset(root, "train");
    REQUIRE(train.samples.size() == 100);

    auto a = make_unpaired_assignment(train.samples, 7);
    auto b = make_unpaired_assignment(train.samples, 7);
    CHECK(a == b);
    auto c = make_unpaired_assignment(train.samples, 8);
    CHECK(a != c);

    std::map<std::string, GarmentCategory> cat_of;
    for (const auto& s : train.samples) cat_of[s.sample_id] = s.category;
    CHECK(a.size() == 100);
    std::set<std::string> donors;
    for (const auto& [id, donor] : a) {
        CHECK(id != donor);                       // zero fixed points, checked exhaustively
        CHECK(cat_of.at(id) == cat_of.at(donor));  // category preserved
        donors.insert(donor);
    }
    CHECK(donors.size() == 100);  // permutation: donors are distinct

    // round-trip through the TSV form
    const std::string path = root + "/unpaired.tsv";
    write_unpaired_assignment(path, a);
    CHECK(load_unpaired_assignment(path) == a);
    fs::remove_all(root);
}

TEST_CASE("unpaired assignment: 2-sample category is the swap, 1-sample is fatal") {
    std::vector<SampleAnnotation> two(2);
    two[0].sample_id = "a";
    two[0].category = GarmentCategory::upper;
    two[1].sample_id = "b";
    two[1].category = GarmentCategory::upper;
    auto m = make_unpaired_assignment(two, 0);
    CHECK(m.at("a") == "b");
    CHECK(m.at("b") == "a");

    std::vector<SampleAnnotation> one(1);
    one[0].sample_id = "solo";
    one[0].category = GarmentCategory::full;
    CHECK_THROWS_WITH_AS(make_unpaired_assignment(one, 0), doctest::Contains("at least 2"),
                         std::runtime_error);
}

TEST_CASE("load_dataset: corrupt keypoints reject the sample, run continues") {
    const std::string root = temp_root("frag_toy_corrupt");
    fs::remove_all(root);
    ToyDatasetSpec spec;
    spec.n_train = 9;
    spec.n_test = 0;
    generate_toy_dataset(root, spec);
    // damage one keypoint record
    LoadReport before = load_dataset(root, "train");
    REQUIRE(before.samples.size() == 9);
    const std::string victim = before.samples[0].sample_id;
    const std::string cat_dir = category_to_string(before.samples[0].category);
    {
        std::ofstream bad(root + "/train/" + cat_dir + "/keypoints/" + victim + ".txt");
        bad << "1 2 3\nnot numbers\n";
    }
    LoadReport after = load_dataset(root, "train");
    CHECK(after.samples.size() == 8);
    REQUIRE(after.errors.size() == 1);
    CHECK(after.errors[0].first == victim);
    fs::remove_all(root);
}

TEST_CASE("load_dataset: empty split is fatal") {
    const std::string root = temp_root("frag_toy_empty");
    fs::remove_all(root);
    fs::create_directories(root + "/train/upper");
    CHECK_THROWS_WITH_AS(load_dataset(root, "train"), doctest::Contains("no loadable samples"),
                         std::runtime_error);
    CHECK_THROWS(load_dataset(root, "validation"));
    fs::remove_all(root);
}

TEST_CASE("toy keypoints: 18 rows inside the frame") {
    const std::string root = temp_root("frag_toy_kp");
    fs::remove_all(root);
    ToyDatasetSpec spec;
    spec.n_train = 8;
    spec.n_test = 0;
    generate_toy_dataset(root, spec);
    LoadReport train = load_dataset(root, "train");
    for (const auto& s : train.samples) {
        for (const auto& kp : s.keypoints) {
            CHECK(kp.confidence > 0.0);
            CHECK(kp.x >= 0.0);
            CHECK(kp.x < spec.width);
            CHECK(kp.y >= 0.0);
            CHECK(kp.y < spec.height);
        }
    }
    fs::remove_all(root);
}
