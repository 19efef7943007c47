#include "splatgen/image.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <memory>

#include "splatgen/error.hpp"

namespace splatgen {

namespace {

uint8_t to_u8(double v) {
    double s = std::clamp(v, 0.0, 1.0) * 255.0;
    return static_cast<uint8_t>(std::lround(s));
}

struct FileCloser {
    void operator()(FILE* f) const {
        if (f) std::fclose(f);
    }
};

}  // namespace

void write_png(const std::string& path, const Image& img) {
    if (img.width <= 0 || img.height <= 0 || (img.channels != 1 && img.channels != 3))
        fail(ErrorCode::argument, "write_png: image must be HxWx1 or HxWx3");
    std::unique_ptr<FILE, FileCloser> fp(std::fopen(path.c_str(), "wb"));
    if (!fp) fail(ErrorCode::io, "write_png: cannot open " + path);

    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png_create_info_struct(png);
    if (!png || !info) fail(ErrorCode::io, "write_png: libpng init failed");
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        fail(ErrorCode::io, "write_png: libpng error for " + path);
    }
    png_init_io(png, fp.get());
    png_set_IHDR(png, info, static_cast<png_uint_32>(img.width), static_cast<png_uint_32>(img.height), 8,
                 PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    // Fixed settings keep encodes byte-reproducible.
    png_set_compression_level(png, 6);
    png_set_filter(png, 0, PNG_FILTER_NONE);
    png_write_info(png, info);

    std::vector<uint8_t> row(static_cast<size_t>(img.width) * 3);
    for (int y = 0; y < img.height; ++y) {
        for (int x = 0; x < img.width; ++x) {
            for (int c = 0; c < 3; ++c) {
                double v = img.channels == 1 ? img.at(y, x, 0) : img.at(y, x, c);
                row[static_cast<size_t>(x) * 3 + c] = to_u8(v);
            }
        }
        png_write_row(png, row.data());
    }
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

Image read_png(const std::string& path) {
    std::unique_ptr<FILE, FileCloser> fp(std::fopen(path.c_str(), "rb"));
    if (!fp) fail(ErrorCode::io, "read_png: cannot open " + path);

    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png_create_info_struct(png);
    if (!png || !info) fail(ErrorCode::io, "read_png: libpng init failed");
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        fail(ErrorCode::io, "read_png: libpng error for " + path);
    }
    png_init_io(png, fp.get());
    png_read_info(png, info);

    png_set_expand(png);
    png_set_strip_16(png);
    png_set_strip_alpha(png);
    png_set_gray_to_rgb(png);
    png_read_update_info(png, info);

    const int w = static_cast<int>(png_get_image_width(png, info));
    const int h = static_cast<int>(png_get_image_height(png, info));
    Image img(h, w, 3);
    std::vector<uint8_t> row(static_cast<size_t>(w) * 3);
    for (int y = 0; y < h; ++y) {
        png_read_row(png, row.data(), nullptr);
        for (int x = 0; x < w; ++x)
            for (int c = 0; c < 3; ++c)
                img.at(y, x, c) = row[static_cast<size_t>(x) * 3 + c] / 255.0;
    }
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);
    return img;
}

Image center_crop(const Image& img, int side) {
    if (side <= 0 || side > img.width || side > img.height)
        fail(ErrorCode::argument, "center_crop: bad side");
    const int x0 = (img.width - side) / 2;
    const int y0 = (img.height - side) / 2;
    Image out(side, side, img.channels);
    for (int y = 0; y < side; ++y)
        for (int x = 0; x < side; ++x)
            for (int c = 0; c < img.channels; ++c) out.at(y, x, c) = img.at(y0 + y, x0 + x, c);
    return out;
}

Image resize_bilinear(const Image& img, int out_h, int out_w) {
    if (img.width == 0 || img.height == 0) fail(ErrorCode::argument, "resize: empty image");
    Image out(out_h, out_w, img.channels);
    const double sx = static_cast<double>(img.width) / out_w;
    const double sy = static_cast<double>(img.height) / out_h;
    for (int y = 0; y < out_h; ++y) {
        double fy = (y + 0.5) * sy - 0.5;
        int y0 = static_cast<int>(std::floor(fy));
        double wy = fy - y0;
        int y1 = std::clamp(y0 + 1, 0, img.height - 1);
        y0 = std::clamp(y0, 0, img.height - 1);
        for (int x = 0; x < out_w; ++x) {
            double fx = (x + 0.5) * sx - 0.5;
            int x0 = static_cast<int>(std::floor(fx));
            double wx = fx - x0;
            int x1 = std::clamp(x0 + 1, 0, img.width - 1);
            x0 = std::clamp(x0, 0, img.width - 1);
            for (int c = 0; c < img.channels; ++c) {
                double top = img.at(y0, x0, c) * (1 - wx) + img.at(y0, x1, c) * wx;
                double bot = img.at(y1, x0, c) * (1 - wx) + img.at(y1, x1, c) * wx;
                out.at(y, x, c) = top * (1 - wy) + bot * wy;
            }
        }
    }
    return out;
}

Image avg_pool(const Image& img, int factor) {
    if (factor <= 0 || img.width % factor || img.height % factor)
        fail(ErrorCode::argument, "avg_pool: size not divisible by factor");
    Image out(img.height / factor, img.width / factor, img.channels);
    const double inv = 1.0 / (factor * factor);
    for (int y = 0; y < out.height; ++y)
        for (int x = 0; x < out.width; ++x)
            for (int c = 0; c < img.channels; ++c) {
                double acc = 0;
                for (int dy = 0; dy < factor; ++dy)
                    for (int dx = 0; dx < factor; ++dx) acc += img.at(y * factor + dy, x * factor + dx, c);
                out.at(y, x, c) = acc * inv;
            }
    return out;
}

Image quantize8(const Image& img) {
    Image out = img;
    for (double& v : out.data) v = to_u8(v) / 255.0;
    return out;
}

double mean_abs_diff(const Image& a, const Image& b) {
    if (a.size() != b.size() || a.size() == 0) fail(ErrorCode::argument, "mean_abs_diff: shape mismatch");
    double acc = 0;
    for (size_t i = 0; i < a.data.size(); ++i) acc += std::abs(a.data[i] - b.data[i]);
    return acc / static_cast<double>(a.data.size());
}

uint64_t image_hash(const Image& img) {
    uint64_t h = 1469598103934665603ULL;
    auto mix = [&h](uint8_t byte) {
        h ^= byte;
        h *= 1099511628211ULL;
    };
    for (double v : img.data) mix(to_u8(v));
    return h;
}

}  // namespace splatgen
