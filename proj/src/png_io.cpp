#include "toco/png_io.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <memory>
#include <string>

namespace toco {

namespace {

struct FileCloser {
    void operator()(std::FILE* f) const {
        if (f) std::fclose(f);
    }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

[[noreturn]] void png_fail(png_structp png, png_const_charp msg) {
    auto* where = static_cast<std::string*>(png_get_error_ptr(png));
    if (where) *where = msg;
    png_longjmp(png, 1);
}

}  // namespace

void write_png(const std::filesystem::path& path, const Raster& r) {
    if (r.channels != 1 && r.channels != 3) throw IoError("write_png: unsupported channel count for " + path.string());
    FilePtr f(std::fopen(path.c_str(), "wb"));
    if (!f) throw IoError("cannot open " + path.string() + " for writing");
    std::string err;
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, &err, png_fail, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
        png_destroy_write_struct(&png, &info);
        throw IoError("libpng initialisation failed for " + path.string());
    }
    std::vector<png_bytep> rows(std::size_t(r.height));
    for (int y = 0; y < r.height; ++y) {
        rows[std::size_t(y)] = const_cast<png_bytep>(r.pixels.data() + std::size_t(y) * r.width * r.channels);
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw IoError("failed writing " + path.string() + ": " + err);
    }
    png_init_io(png, f.get());
    png_set_IHDR(png, info, png_uint_32(r.width), png_uint_32(r.height), 8,
                 r.channels == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE,
                 PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    png_write_image(png, rows.data());
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

Raster read_png(const std::filesystem::path& path) {
    FilePtr f(std::fopen(path.c_str(), "rb"));
    if (!f) throw IoError("cannot open " + path.string());
    png_byte sig[8];
    if (std::fread(sig, 1, 8, f.get()) != 8 || png_sig_cmp(sig, 0, 8) != 0) {
        throw IoError("not a PNG file: " + path.string());
    }
    std::string err;
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, &err, png_fail, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw IoError("libpng initialisation failed for " + path.string());
    }
    Raster r;
    std::vector<png_bytep> rows;
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw IoError("corrupt PNG " + path.string() + ": " + err);
    }
    png_init_io(png, f.get());
    png_set_sig_bytes(png, 8);
    png_read_info(png, info);
    const auto color = png_get_color_type(png, info);
    if (png_get_bit_depth(png, info) == 16) png_set_strip_16(png);
    if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
    if (color == PNG_COLOR_TYPE_GRAY && png_get_bit_depth(png, info) < 8) png_set_expand_gray_1_2_4_to_8(png);
    if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
    png_read_update_info(png, info);
    r.width = int(png_get_image_width(png, info));
    r.height = int(png_get_image_height(png, info));
    r.channels = int(png_get_channels(png, info));
    r.pixels.resize(std::size_t(r.width) * r.height * r.channels);
    rows.resize(std::size_t(r.height));
    for (int y = 0; y < r.height; ++y) rows[std::size_t(y)] = r.pixels.data() + std::size_t(y) * r.width * r.channels;
    png_read_image(png, rows.data());
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);
    return r;
}

Raster to_raster(const Image& image) {
    if (image.channels != 3 && image.channels != 1) throw IoError("to_raster: need 1 or 3 channels");
    Raster r{image.width, image.height, image.channels, {}};
    r.pixels.resize(std::size_t(image.width) * image.height * image.channels);
    for (int y = 0; y < image.height; ++y) {
        for (int x = 0; x < image.width; ++x) {
            for (int c = 0; c < image.channels; ++c) {
                const float v = std::clamp(image.at(c, y, x), 0.f, 1.f);
                r.pixels[(std::size_t(y) * image.width + x) * image.channels + c] =
                    std::uint8_t(std::lround(v * 255.f));
            }
        }
    }
    return r;
}

Image to_image(const Raster& r) {
    Image img(3, r.height, r.width);
    for (int y = 0; y < r.height; ++y) {
        for (int x = 0; x < r.width; ++x) {
            for (int c = 0; c < 3; ++c) {
                const int src = r.channels == 1 ? 0 : c;
                img.at(c, y, x) = float(r.pixels[(std::size_t(y) * r.width + x) * r.channels + src]) / 255.f;
            }
        }
    }
    return img;
}

Raster to_raster(const LabelMap& labels) {
    return Raster{labels.width, labels.height, 1, labels.labels};
}

LabelMap to_label_map(const Raster& r) {
    if (r.channels != 1) throw IoError("label PNG must be single-channel");
    LabelMap m(r.height, r.width);
    m.labels = r.pixels;
    return m;
}

}  // namespace toco
