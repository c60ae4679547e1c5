#pragma once

#include <cstdint>
#include <random>
#include <vector>

#include "toco/autograd.hpp"
#include "toco/backbone.hpp"
#include "toco/image.hpp"

namespace toco {

/// Bias-free classification layer, c x d.
template <typename T>
struct ClassifierHead {
    Param<T> weight;

    static ClassifierHead init(int classes, int dim, std::mt19937_64& rng);
    int class_count() const { return int(weight.value.rows()); }
};

/// Per-class activation in [0, 1] on an h x w token grid; values is c x (h*w).
template <typename T>
struct ActivationMap {
    Matrix<T> values;
    std::vector<bool> present;
    int h = 0;
    int w = 0;

    int class_count() const { return int(values.rows()); }
    T at(int k, int y, int x) const { return values(k, Eigen::Index(y) * w + x); }
};

/// Global max pooling over tokens followed by the classifier projection (1 x c).
template <typename T>
Var<T> gmp_classify(Var<T> tokens, Var<T> head_weight);

template <typename T>
RowVector<T> gmp_classify(const Matrix<T>& tokens, const Matrix<T>& head_weight);

/// Multi-label soft margin: mean over classes of binary cross-entropy on sigmoid(logit).
template <typename T>
T cls_loss(const RowVector<T>& logits, const std::vector<std::uint8_t>& labels);

template <typename T>
Var<T> cls_loss(Var<T> logits, const std::vector<std::uint8_t>& labels);

template <typename T>
ActivationMap<T> compute_cam(const TokenGrid<T>& tokens, const Matrix<T>& head_weight, const std::vector<bool>& present);

/// Classes whose sigmoid(logit) exceeds 0.5.
template <typename T>
std::vector<bool> predicted_classes(const RowVector<T>& logits);

/// Throws std::invalid_argument unless 0 < low < high < 1.
void check_thresholds(double low, double high);

/// Dual-threshold token labels: background below `low`, foreground (argmax
/// class) above `high`, ignore in between. Both comparisons are strict.
template <typename T>
LabelMap token_pseudo_labels(const ActivationMap<T>& cam, double low, double high);

/// token_pseudo_labels replicated (nearest) to a height x width grid.
template <typename T>
LabelMap seg_pseudo_labels(const ActivationMap<T>& cam, double low, double high, int height, int width);

/// Bilinear upsample of every class map to height x width (values stay in [0, 1]).
template <typename T>
ActivationMap<T> upsample_cam(const ActivationMap<T>& cam, int height, int width);

/// Hard labels from a single background threshold: argmax class where its score
/// exceeds `threshold`, background elsewhere.
template <typename T>
LabelMap cam_to_labels(const ActivationMap<T>& cam, double threshold);

}  // namespace toco
