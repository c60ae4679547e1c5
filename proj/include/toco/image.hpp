#pragma once

#include <cstdint>
#include <stdexcept>
#include <vector>

namespace toco {

/// Planar float image, channel-major (c, y, x). Values nominally in [0, 1].
struct Image {
    int channels = 3;
    int height = 0;
    int width = 0;
    std::vector<float> data;

    Image() = default;
    Image(int c, int h, int w, float fill = 0.f)
        : channels(c), height(h), width(w), data(std::size_t(c) * h * w, fill) {}

    float& at(int c, int y, int x) { return data[(std::size_t(c) * height + y) * width + x]; }
    float at(int c, int y, int x) const { return data[(std::size_t(c) * height + y) * width + x]; }

    bool operator==(const Image&) const = default;
};

/// Grid of 8-bit labels. Palette: 0 = background, 1..c = classes, 255 = ignore.
struct LabelMap {
    static constexpr std::uint8_t kBackground = 0;
    static constexpr std::uint8_t kIgnore = 255;

    int height = 0;
    int width = 0;
    std::vector<std::uint8_t> labels;

    LabelMap() = default;
    LabelMap(int h, int w, std::uint8_t fill = kBackground) : height(h), width(w), labels(std::size_t(h) * w, fill) {}

    std::uint8_t& at(int y, int x) { return labels[std::size_t(y) * width + x]; }
    std::uint8_t at(int y, int x) const { return labels[std::size_t(y) * width + x]; }
    std::size_t size() const { return labels.size(); }

    static constexpr std::uint8_t foreground(int class_index) { return std::uint8_t(class_index + 1); }
    static constexpr bool is_foreground(std::uint8_t l) { return l != kBackground && l != kIgnore; }
    static constexpr int class_of(std::uint8_t l) { return int(l) - 1; }

    bool operator==(const LabelMap&) const = default;
};

/// Nearest-neighbour resampling of a label grid.
LabelMap resize_nearest(const LabelMap& src, int height, int width);

}  // namespace toco
