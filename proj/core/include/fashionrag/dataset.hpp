#pragma once

#include "fashionrag/retrieval.hpp"

#include <array>
#include <map>
#include <string>
#include <vector>

namespace fashionrag {

struct Keypoint {
    double x = 0.0, y = 0.0;
    double confidence = 0.0;  // <= 0 marks a missing joint
};

inline constexpr int kNumKeypoints = 18;

struct SampleAnnotation {
    std::string sample_id;
    std::string image_path;    // person image
    std::string garment_id;    // ground-truth garment (catalog id)
    GarmentCategory category = GarmentCategory::upper;
    std::string mask_path;
    std::array<Keypoint, kNumKeypoints> keypoints{};
    std::vector<std::string> noun_phrases;  // ordered, at least one
};

struct LoadReport {
    std::vector<SampleAnnotation> samples;
    std::vector<std::pair<std::string, std::string>> errors;  // (sample_id, reason)
    std::map<GarmentCategory, size_t> per_category;
};

// Layout under root: <split>/<category>/{images,garments,masks,keypoints}/
// plus <split>/<category>/captions.tsv (sample_id, then tab-separated
// phrases). Keypoint records: 18 lines of "x y confidence". A malformed
// sample is skipped with an error entry; an empty split is fatal.
LoadReport load_dataset(const std::string& root, const std::string& split);

// Joins n_c phrases starting at `offset`, wrapping cyclically. Truncated
// captions therefore sample different phrase subsets instead of always
// keeping the leading (color-bearing) phrase, so the text can genuinely
// lack appearance details that garment images still carry.
std::string build_caption(const std::vector<std::string>& phrases, int n_c, size_t offset = 0);

// Deterministic phrase offset for a sample id: evaluation reruns and
// ablation grid cells pick the same caption subset for the same sample.
size_t caption_offset(const std::string& sample_id, size_t n_phrases);

// Category-preserving derangement (Sattolo cycle per category), so every
// sample borrows annotations from a different garment of the same category.
std::map<std::string, std::string> make_unpaired_assignment(
    const std::vector<SampleAnnotation>& samples, uint64_t seed);

void write_unpaired_assignment(const std::string& path,
                               const std::map<std::string, std::string>& assignment);
std::map<std::string, std::string> load_unpaired_assignment(const std::string& path);

struct ToyDatasetSpec {
    int n_train = 64;
    int n_test = 16;
    uint64_t seed = 0;
    int width = 64;
    int height = 96;
    int garment_size = 64;
};

// Writes a deterministic stick-figure dataset plus the garment catalog
// manifest (root/catalog.tsv covering both splits). Byte-stable across runs
// for one spec: all geometry is integer and the palette is fixed.
void generate_toy_dataset(const std::string& root, const ToyDatasetSpec& spec);

// Deterministic garment class of toy sample index i (shared with tests).
struct ToyClass {
    int color;  // palette row
    int motif;  // motif row
};
ToyClass toy_class_of(int index);

}  // namespace fashionrag
