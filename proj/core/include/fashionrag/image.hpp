#pragma once

#include "fashionrag/tensor.hpp"

#include <string>
#include <vector>

namespace fashionrag {

// Channel-major pixel buffer, values in [0,1]. channels is 1 (mask/gray)
// or 3 (RGB); layout matches Tensor [C,H,W] so conversion is a copy.
struct Image {
    int width = 0, height = 0, channels = 0;
    std::vector<double> data;

    Image() = default;
    Image(int w, int h, int c) : width(w), height(h), channels(c),
                                 data(static_cast<size_t>(w) * h * c, 0.0) {}

    double& at(int c, int y, int x) {
        return data[(static_cast<size_t>(c) * height + y) * width + x];
    }
    double at(int c, int y, int x) const {
        return data[(static_cast<size_t>(c) * height + y) * width + x];
    }
};

Image read_png(const std::string& path);                  // gray stays 1ch, color becomes 3ch
void write_png(const std::string& path, const Image& img);  // 1ch or 3ch, 8-bit

Image to_rgb(const Image& img);
Image to_gray(const Image& img);

Image resize_nearest(const Image& img, int out_w, int out_h);
Image resize_bilinear(const Image& img, int out_w, int out_h);

Tensor image_to_tensor(const Image& img);   // [C,H,W], no grad
Image tensor_to_image(const Tensor& t);     // clamps to [0,1]

}  // namespace fashionrag
