#include "toco/image.hpp"

namespace toco {

LabelMap resize_nearest(const LabelMap& src, int height, int width) {
    if (height <= 0 || width <= 0) throw std::invalid_argument("resize_nearest: empty target");
    LabelMap out(height, width);
    for (int y = 0; y < height; ++y) {
        const int sy = int(std::int64_t(y) * src.height / height);
        for (int x = 0; x < width; ++x) {
            const int sx = int(std::int64_t(x) * src.width / width);
            out.at(y, x) = src.at(sy, sx);
        }
    }
    return out;
}

}  // namespace toco
