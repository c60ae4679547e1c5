#include "toco/cam.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace toco {

namespace {

template <typename T>
T sigmoid(T x) {
    if (x >= 0) return T(1) / (T(1) + std::exp(-x));
    const T e = std::exp(x);
    return e / (T(1) + e);
}

constexpr double kLogClamp = 1e-12;

}  // namespace

template <typename T>
ClassifierHead<T> ClassifierHead<T>::init(int classes, int dim, std::mt19937_64& rng) {
    return ClassifierHead{Param<T>(trunc_normal<T>(classes, dim, 0.02, rng))};
}

template <typename T>
Var<T> gmp_classify(Var<T> tokens, Var<T> head_weight) {
    return matmul(column_max(tokens), transpose(head_weight));
}

template <typename T>
RowVector<T> gmp_classify(const Matrix<T>& tokens, const Matrix<T>& head_weight) {
    if (tokens.rows() == 0) throw std::invalid_argument("gmp_classify: no tokens");
    RowVector<T> pooled = tokens.colwise().maxCoeff();
    return pooled * head_weight.transpose();
}

template <typename T>
T cls_loss(const RowVector<T>& logits, const std::vector<std::uint8_t>& labels) {
    if (std::size_t(logits.size()) != labels.size()) throw std::invalid_argument("cls_loss: label count mismatch");
    T total = 0;
    for (Eigen::Index k = 0; k < logits.size(); ++k) {
        const T p = sigmoid(logits(k));
        const T q = sigmoid(-logits(k));
        const T y = labels[std::size_t(k)] ? T(1) : T(0);
        total -= y * std::log(std::max(p, T(kLogClamp))) + (T(1) - y) * std::log(std::max(q, T(kLogClamp)));
    }
    return total / T(logits.size());
}

template <typename T>
Var<T> cls_loss(Var<T> logits, const std::vector<std::uint8_t>& labels) {
    RowVector<T> x = logits.value().row(0);
    Matrix<T> out(1, 1);
    out(0, 0) = cls_loss<T>(x, labels);
    Tape<T>& tape = *logits.tape;
    std::size_t il = logits.id, self = tape.size();
    return tape.push(std::move(out), tape.requires_grad(logits), [il, self, labels](Tape<T>& t) {
        const auto& x = t.node(il).value;
        const T g = t.out_grad(self)(0, 0);
        const T c = T(x.cols());
        Matrix<T> dx(1, x.cols());
        for (Eigen::Index k = 0; k < x.cols(); ++k) {
            const T p = sigmoid(x(0, k));
            const T q = sigmoid(-x(0, k));
            const T y = labels[std::size_t(k)] ? T(1) : T(0);
            T d = 0;
            if (p > T(kLogClamp)) d -= y * q;
            if (q > T(kLogClamp)) d += (T(1) - y) * p;
            dx(0, k) = d * g / c;
        }
        t.accumulate(il, dx);
    });
}

template <typename T>
ActivationMap<T> compute_cam(const TokenGrid<T>& tokens, const Matrix<T>& head_weight, const std::vector<bool>& present) {
    const Eigen::Index c = head_weight.rows();
    if (std::size_t(c) != present.size()) throw std::invalid_argument("compute_cam: present mask has wrong length");
    if (tokens.tokens.cols() != head_weight.cols()) throw std::invalid_argument("compute_cam: feature width mismatch");
    ActivationMap<T> cam;
    cam.h = tokens.h;
    cam.w = tokens.w;
    cam.present = present;
    cam.values.noalias() = head_weight * tokens.tokens.transpose();
    for (Eigen::Index k = 0; k < c; ++k) {
        auto row = cam.values.row(k);
        if (!present[std::size_t(k)]) {
            row.setZero();
            continue;
        }
        row = row.cwiseMax(T(0));
        const T peak = row.size() > 0 ? row.maxCoeff() : T(0);
        if (peak > T(0)) {
            row /= peak;
        } else {
            row.setZero();
        }
    }
    return cam;
}

template <typename T>
std::vector<bool> predicted_classes(const RowVector<T>& logits) {
    std::vector<bool> out(std::size_t(logits.size()));
    for (Eigen::Index k = 0; k < logits.size(); ++k) out[std::size_t(k)] = sigmoid(logits(k)) > T(0.5);
    return out;
}

void check_thresholds(double low, double high) {
    if (!(low > 0.0 && low < high && high < 1.0)) {
        throw std::invalid_argument("invalid background thresholds: need 0 < low < high < 1, got (" +
                                    std::to_string(low) + ", " + std::to_string(high) + ")");
    }
}

namespace {

/// Best present class at one position; score 0 and class -1 when none is present.
template <typename T>
std::pair<int, T> best_class(const ActivationMap<T>& cam, Eigen::Index pos) {
    int arg = -1;
    T best = 0;
    for (int k = 0; k < cam.class_count(); ++k) {
        if (!cam.present[std::size_t(k)]) continue;
        const T v = cam.values(k, pos);
        if (arg < 0 || v > best) {
            arg = k;
            best = v;
        }
    }
    return {arg, best};
}

}  // namespace

template <typename T>
LabelMap token_pseudo_labels(const ActivationMap<T>& cam, double low, double high) {
    check_thresholds(low, high);
    LabelMap out(cam.h, cam.w);
    for (Eigen::Index i = 0; i < Eigen::Index(cam.h) * cam.w; ++i) {
        const auto [k, s] = best_class(cam, i);
        std::uint8_t l = LabelMap::kIgnore;
        if (double(s) < low) {
            l = LabelMap::kBackground;
        } else if (double(s) > high) {
            l = LabelMap::foreground(k);
        }
        out.labels[std::size_t(i)] = l;
    }
    return out;
}

template <typename T>
LabelMap seg_pseudo_labels(const ActivationMap<T>& cam, double low, double high, int height, int width) {
    return resize_nearest(token_pseudo_labels(cam, low, high), height, width);
}

template <typename T>
ActivationMap<T> upsample_cam(const ActivationMap<T>& cam, int height, int width) {
    ActivationMap<T> out;
    out.h = height;
    out.w = width;
    out.present = cam.present;
    out.values.noalias() = cam.values * bilinear_matrix<T>(cam.h, cam.w, height, width).transpose();
    return out;
}

template <typename T>
LabelMap cam_to_labels(const ActivationMap<T>& cam, double threshold) {
    LabelMap out(cam.h, cam.w);
    for (Eigen::Index i = 0; i < Eigen::Index(cam.h) * cam.w; ++i) {
        const auto [k, s] = best_class(cam, i);
        out.labels[std::size_t(i)] = double(s) > threshold ? LabelMap::foreground(k) : LabelMap::kBackground;
    }
    return out;
}

#define TOCO_INSTANTIATE_CAM(T)                                                                              \
    template struct ClassifierHead<T>;                                                                       \
    template Var<T> gmp_classify(Var<T>, Var<T>);                                                            \
    template RowVector<T> gmp_classify(const Matrix<T>&, const Matrix<T>&);                                  \
    template T cls_loss(const RowVector<T>&, const std::vector<std::uint8_t>&);                              \
    template Var<T> cls_loss(Var<T>, const std::vector<std::uint8_t>&);                                      \
    template ActivationMap<T> compute_cam(const TokenGrid<T>&, const Matrix<T>&, const std::vector<bool>&);  \
    template std::vector<bool> predicted_classes(const RowVector<T>&);                                       \
    template LabelMap token_pseudo_labels(const ActivationMap<T>&, double, double);                          \
    template LabelMap seg_pseudo_labels(const ActivationMap<T>&, double, double, int, int);                  \
    template ActivationMap<T> upsample_cam(const ActivationMap<T>&, int, int);                               \
    template LabelMap cam_to_labels(const ActivationMap<T>&, double);

TOCO_INSTANTIATE_CAM(float)
TOCO_INSTANTIATE_CAM(double)

}  // namespace toco
