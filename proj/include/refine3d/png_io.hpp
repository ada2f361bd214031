#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "refine3d/tensor.hpp"

namespace refine3d {

// 8-bit RGB image, row-major, top row first.
struct Image {
    int64_t width = 0;
    int64_t height = 0;
    std::vector<uint8_t> rgb;  // 3 * width * height

    Image() = default;
    Image(int64_t w, int64_t h)
        : width(w), height(h), rgb(static_cast<size_t>(3 * w * h), 0) {}

    uint8_t* pixel(int64_t x, int64_t y) { return rgb.data() + 3 * (y * width + x); }
    const uint8_t* pixel(int64_t x, int64_t y) const {
        return rgb.data() + 3 * (y * width + x);
    }
};

void write_png(const Image& img, const std::filesystem::path& path);
Image read_png(const std::filesystem::path& path);

// [3,H,W] float tensor in [0,1] <-> 8-bit image.
template <typename T = float>
TensorT<T> image_to_tensor(const Image& img) {
    TensorT<T> t = TensorT<T>::zeros({3, img.height, img.width});
    for (int64_t y = 0; y < img.height; ++y)
        for (int64_t x = 0; x < img.width; ++x) {
            const uint8_t* px = img.pixel(x, y);
            for (int64_t c = 0; c < 3; ++c)
                t.data()[static_cast<size_t>((c * img.height + y) * img.width + x)] =
                    static_cast<T>(px[c]) / T(255);
        }
    return t;
}

template <typename T>
Image tensor_to_image(const TensorT<T>& t) {
    if (t.rank() != 3 || t.dim(0) != 3)
        throw DimensionError("tensor_to_image: expected [3,H,W], got " + shape_str(t.shape()));
    Image img(t.dim(2), t.dim(1));
    for (int64_t y = 0; y < img.height; ++y)
        for (int64_t x = 0; x < img.width; ++x) {
            uint8_t* px = img.pixel(x, y);
            for (int64_t c = 0; c < 3; ++c) {
                T v = t.data()[static_cast<size_t>((c * img.height + y) * img.width + x)];
                v = std::min(T(1), std::max(T(0), v));
                px[c] = static_cast<uint8_t>(std::lround(static_cast<double>(v) * 255.0));
            }
        }
    return img;
}

}  // namespace refine3d
