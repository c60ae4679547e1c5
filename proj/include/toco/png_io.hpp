#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <vector>

#include "toco/image.hpp"

namespace toco {

class IoError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// 8-bit raster, interleaved channels (1 = gray, 3 = RGB).
struct Raster {
    int width = 0;
    int height = 0;
    int channels = 0;
    std::vector<std::uint8_t> pixels;
};

void write_png(const std::filesystem::path& path, const Raster& raster);
/// Decodes to 8-bit gray or RGB (alpha is dropped, palettes expanded).
Raster read_png(const std::filesystem::path& path);

/// [0, 1] float image to 8-bit RGB with rounding.
Raster to_raster(const Image& image);
Image to_image(const Raster& raster);

Raster to_raster(const LabelMap& labels);
LabelMap to_label_map(const Raster& raster);

}  // namespace toco
