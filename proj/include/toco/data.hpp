#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <vector>

#include "toco/image.hpp"

namespace toco {

class DatasetError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// What training code is allowed to see of a sample: pixels and image-level labels.
struct TrainingView {
    const Image* image = nullptr;
    const std::vector<std::uint8_t>* labels = nullptr;
};

class Sample {
public:
    Image image;
    std::vector<std::uint8_t> image_labels;  // 0/1 per class
    std::vector<int> instances;              // class index of every drawn shape (synthetic data only)

    Sample() = default;
    Sample(Image img, std::vector<std::uint8_t> labels, std::optional<LabelMap> mask)
        : image(std::move(img)), image_labels(std::move(labels)), mask_(std::move(mask)) {}

    TrainingView training_view() const { return {&image, &image_labels}; }

    bool has_evaluation_mask() const { return mask_.has_value(); }
    /// Ground-truth mask; only evaluation code may call this.
    const LabelMap& evaluation_mask() const;

    bool operator==(const Sample&) const = default;

private:
    std::optional<LabelMap> mask_;
};

struct ShapesConfig {
    int classes = 3;
    int size = 64;
    std::vector<double> class_weights;  // empty = uniform
    int min_shapes = 1;
    int max_shapes = 3;
};

/// Synthetic multi-label shapes (circle, triangle, rectangle, then diamond,
/// ring, cross for classes > 3) on a textured background. Pixels are
/// quantised to k/255 so PNG export is lossless. Sample i depends only on
/// (seed, i, config).
std::vector<Sample> gen_shapes_dataset(int n, const ShapesConfig& cfg, std::uint64_t seed);

/// Writes images/<id>.png, masks/<id>.png and labels.txt ("<id> <class>..." with
/// 1-based class ids).
void export_dataset(const std::vector<Sample>& samples, const std::filesystem::path& root);

/// Reads the export_dataset layout. Missing labels are derived from masks;
/// unknown mask values or unreadable files raise DatasetError naming the path.
std::vector<Sample> load_dir_dataset(const std::filesystem::path& root, int classes);

struct IoUReport {
    std::vector<double> per_class_iou;  // classes + 1 entries, background first
    std::vector<bool> valid;            // union was non-empty
    double miou = 0;
};

/// Confusion-matrix IoU over class_count labels (background included). Pixels
/// whose ground truth is ignore are skipped; a prediction outside
/// [0, class_count) counts as a miss for the true class.
IoUReport miou(const std::vector<LabelMap>& preds, const std::vector<LabelMap>& gts, int class_count);

}  // namespace toco
