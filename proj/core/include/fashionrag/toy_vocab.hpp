#pragma once

#include <array>
#include <cstdint>

namespace fashionrag::toyvocab {

// Shared vocabulary of the desk-scale world: the dataset generator paints
// garments from these tables and the toy dual encoder parses captions with
// them, which is what makes caption->own-garment retrieval exact.

inline constexpr int kNumColors = 8;
inline constexpr std::array<const char*, kNumColors> kColorWords = {
    "red", "green", "blue", "yellow", "magenta", "cyan", "orange", "purple"};
inline constexpr std::array<std::array<double, 3>, kNumColors> kColorRgb = {{
    {1.0, 0.1, 0.1},
    {0.1, 1.0, 0.1},
    {0.15, 0.25, 1.0},
    {1.0, 0.9, 0.1},
    {1.0, 0.1, 0.9},
    {0.1, 0.9, 1.0},
    {1.0, 0.55, 0.1},
    {0.6, 0.15, 1.0},
}};

inline constexpr int kNumMotifs = 4;
inline constexpr std::array<const char*, kNumMotifs> kMotifWords = {
    "plain", "banded", "pinstriped", "checkered"};
// banded = horizontal stripes, pinstriped = vertical stripes.

inline constexpr std::array<const char*, 3> kGarmentNouns = {"top", "skirt", "dress"};

inline constexpr std::array<const char*, 4> kStyleWords = {
    "classic", "casual", "elegant", "sporty"};

// Motif geometry: brightness bands of this width, dimmed by this factor.
inline constexpr int kBandWidth = 8;
inline constexpr double kDimFactor = 0.55;

// Brightness multiplier of motif m at pixel (x, y).
inline constexpr double motif_brightness(int motif, int x, int y) {
    const bool bx = (x / kBandWidth) % 2 == 1;
    const bool by = (y / kBandWidth) % 2 == 1;
    switch (motif) {
        case 1: return by ? kDimFactor : 1.0;          // banded (varies with y)
        case 2: return bx ? kDimFactor : 1.0;          // pinstriped (varies with x)
        case 3: return (bx != by) ? kDimFactor : 1.0;  // checkered
        default: return 1.0;                           // plain
    }
}

}  // namespace fashionrag::toyvocab
