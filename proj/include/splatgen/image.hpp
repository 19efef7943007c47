#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace splatgen {

// Row-major H x W x C image, values nominally in [0, 1].
struct Image {
    int width = 0, height = 0, channels = 0;
    std::vector<double> data;

    Image() = default;
    Image(int h, int w, int c) : width(w), height(h), channels(c) {
        data.assign(static_cast<size_t>(h) * w * c, 0.0);
    }

    double& at(int y, int x, int c) {
        return data[(static_cast<size_t>(y) * width + x) * channels + c];
    }
    double at(int y, int x, int c) const {
        return data[(static_cast<size_t>(y) * width + x) * channels + c];
    }

    size_t size() const { return data.size(); }
};

// 8-bit RGB PNG. Grayscale inputs (channels == 1) are replicated on write.
void write_png(const std::string& path, const Image& img);
Image read_png(const std::string& path);

Image center_crop(const Image& img, int side);
Image resize_bilinear(const Image& img, int out_h, int out_w);
Image avg_pool(const Image& img, int factor);

// Quantize to 8 bits and back; makes in-memory renders comparable to PNG
// round-tripped ones.
Image quantize8(const Image& img);

double mean_abs_diff(const Image& a, const Image& b);

// FNV-1a over the quantized pixel bytes.
uint64_t image_hash(const Image& img);

}  // namespace splatgen
