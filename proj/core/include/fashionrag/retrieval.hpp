#pragma once

#include "fashionrag/image.hpp"

#include <cstdint>
#include <functional>
#include <optional>
#include <set>
#include <string>
#include <vector>

namespace fashionrag {

enum class GarmentCategory : uint8_t { upper = 0, lower = 1, full = 2 };

GarmentCategory category_from_string(const std::string& s);
std::string category_to_string(GarmentCategory c);

struct GarmentRecord {
    std::string id;
    std::string image_ref;
    GarmentCategory category = GarmentCategory::upper;
    std::vector<float> embedding;  // unit L2 norm, length d_ret
};

struct EmbeddingIndex {
    uint32_t d_ret = 0;
    std::string encoder_tag;
    std::vector<GarmentRecord> records;  // order is stable across save/load

    const GarmentRecord* find(const std::string& id) const;
};

struct RetrievalEntry {
    std::string id;
    double score;
};

struct RetrievalResult {
    std::vector<RetrievalEntry> entries;  // scores non-increasing, ties by ascending id
    std::string query_text;
};

// Catalog manifest row: id<TAB>category<TAB>image_path<TAB>caption
struct CatalogItem {
    std::string id;
    GarmentCategory category = GarmentCategory::upper;
    std::string image_path;
    std::string caption;
};

std::vector<CatalogItem> load_catalog_manifest(const std::string& path);
void write_catalog_manifest(const std::string& path, const std::vector<CatalogItem>& items);

using ImageEncoder = std::function<std::vector<double>(const Image&)>;
using TextEncoder = std::function<std::vector<double>(const std::string&)>;

struct EncodeReport {
    size_t encoded = 0;
    std::vector<std::pair<std::string, std::string>> failures;  // (id, reason)
};

// Encodes every catalog item; per-item decode failures are collected and the
// batch continues. A dimension disagreement between items is a fatal error.
EmbeddingIndex encode_garment_catalog(const std::vector<CatalogItem>& items,
                                      const ImageEncoder& encoder,
                                      const std::string& encoder_tag,
                                      EncodeReport* report = nullptr);

std::vector<double> encode_text_query(const std::string& caption, const TextEncoder& encoder);

// Exact top-k by cosine (embeddings are unit norm, so dot product). Ties
// broken by ascending id. category, when set, restricts the candidate pool.
RetrievalResult retrieve_top_k(const EmbeddingIndex& index, const std::vector<double>& query,
                               size_t k, const std::set<std::string>& exclude_ids = {},
                               std::optional<GarmentCategory> category = std::nullopt);

// Binary index file, little-endian: magic "FRIX", u32 version, u32 d_ret,
// u32 count, then per record: u32-length-prefixed id, u8 category code,
// u32-length-prefixed image_ref, d_ret float32 values. The encoder tag is
// stored as one trailing length-prefixed string after the records.
void persist_index(const EmbeddingIndex& index, const std::string& path);
EmbeddingIndex load_index(const std::string& path);

// Desk-scale dual encoder: images map to [weighted chroma RGB (3) | texture
// one-hot (4)], captions parse the shared color/motif word tables, and both
// sides are L2-normalized, so a garment and its own caption land on the same
// unit vector. The color block is weighted to dominate: same-color matches
// outrank nearest-distinct-color ones, with motif breaking ties.
std::vector<double> toy_encode_image(const Image& img);
std::vector<double> toy_encode_text(const std::string& caption);

// Encoder lookup by tag; unknown tags (pretrained full-scale encoders whose
// weights are not shipped) raise a descriptive error when invoked.
ImageEncoder image_encoder_for_tag(const std::string& tag);
TextEncoder text_encoder_for_tag(const std::string& tag);

}  // namespace fashionrag
