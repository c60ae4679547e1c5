#include "toco/segmenter.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <stdexcept>
#include <string>

#include "toco/backbone.hpp"

namespace toco {

template <typename T>
Decoder<T> Decoder<T>::init(int in_dim, int width, int classes, std::mt19937_64& rng) {
    Decoder d;
    d.conv1_w = Param<T>(trunc_normal<T>(9 * in_dim, width, std::sqrt(2.0 / (9.0 * in_dim)), rng));
    d.conv1_b = Param<T>(Matrix<T>::Zero(1, width));
    d.conv2_w = Param<T>(trunc_normal<T>(9 * width, width, std::sqrt(2.0 / (9.0 * width)), rng));
    d.conv2_b = Param<T>(Matrix<T>::Zero(1, width));
    d.pred_w = Param<T>(trunc_normal<T>(width, classes + 1, 0.02, rng));
    d.pred_b = Param<T>(Matrix<T>::Zero(1, classes + 1));
    return d;
}

template <typename T>
std::vector<std::pair<std::string, Param<T>*>> Decoder<T>::named_params() {
    return {{"conv1.weight", &conv1_w}, {"conv1.bias", &conv1_b}, {"conv2.weight", &conv2_w},
            {"conv2.bias", &conv2_b},   {"pred.weight", &pred_w},  {"pred.bias", &pred_b}};
}

template <typename T>
BoundDecoder<T> bind(Tape<T>& tape, Decoder<T>& dec, bool trainable) {
    auto b = [&](Param<T>& p) { return trainable ? tape.parameter(p) : tape.constant(p.value); };
    return {b(dec.conv1_w), b(dec.conv1_b), b(dec.conv2_w), b(dec.conv2_b), b(dec.pred_w), b(dec.pred_b)};
}

template <typename T>
Var<T> decode(Var<T> tokens, int h, int w, const BoundDecoder<T>& dec) {
    constexpr int dil = Decoder<T>::kDilation;
    Var<T> x = relu(add_row(matmul(im2col(tokens, h, w, 3, dil), dec.conv1_w), dec.conv1_b));
    x = relu(add_row(matmul(im2col(x, h, w, 3, dil), dec.conv2_w), dec.conv2_b));
    return add_row(matmul(x, dec.pred_w), dec.pred_b);
}

template <typename T>
Matrix<T> decode(const Matrix<T>& tokens, int h, int w, Decoder<T>& dec) {
    Tape<T> tape;
    return decode(tape.constant(tokens), h, w, bind(tape, dec, false)).value();
}

namespace {

/// Normalised affinity kernel per pixel: self plus 3x3 neighbours at each
/// dilation. Out-of-image taps keep weight zero so every pixel has the same
/// number of taps.
struct ParKernel {
    int taps_per_pixel = 0;
    std::vector<int> index;
    std::vector<double> weight;

    ParKernel(const Image& image, const ParConfig& cfg) {
        const float inv_s2 = float(1.0 / (cfg.sigma_rgb * cfg.sigma_rgb));
        const int H = image.height, W = image.width;
        taps_per_pixel = 1 + 8 * int(cfg.dilations.size());
        index.assign(std::size_t(H) * W * taps_per_pixel, 0);
        weight.assign(index.size(), 0.0);
        const int C = image.channels;
        std::vector<float> rgb(std::size_t(H) * W * C);
        for (int c = 0; c < C; ++c) {
            for (std::size_t i = 0; i < std::size_t(H) * W; ++i) rgb[i * C + c] = image.data[std::size_t(c) * H * W + i];
        }
        for (int y = 0; y < H; ++y) {
            for (int x = 0; x < W; ++x) {
                const std::size_t base = (std::size_t(y) * W + x) * taps_per_pixel;
                std::size_t t = base;
                index[t] = y * W + x;
                weight[t++] = 1.0;
                for (int d : cfg.dilations) {
                    for (int dy = -1; dy <= 1; ++dy) {
                        for (int dx = -1; dx <= 1; ++dx) {
                            if (dy == 0 && dx == 0) continue;
                            const int yy = y + dy * d, xx = x + dx * d;
                            const std::size_t slot = t++;
                            if (yy < 0 || yy >= H || xx < 0 || xx >= W) continue;
                            float dist = 0;
                            const float* a = rgb.data() + (std::size_t(y) * W + x) * C;
                            const float* b = rgb.data() + (std::size_t(yy) * W + xx) * C;
                            for (int c = 0; c < C; ++c) dist += (a[c] - b[c]) * (a[c] - b[c]);
                            index[slot] = yy * W + xx;
                            weight[slot] = std::exp(-dist * inv_s2);
                        }
                    }
                }
                double total = 0;
                for (std::size_t k = base; k < t; ++k) total += weight[k];
                for (std::size_t k = base; k < t; ++k) weight[k] /= total;
            }
        }
    }

    /// scores is K x n, treated as independent stacks of `group` rows each;
    /// every stack is rescaled to its own per-position total. Works on a
    /// position-major copy so each gather is contiguous.
    template <typename T>
    Matrix<T> apply(const Matrix<T>& scores, int iters, Eigen::Index group) const {
        const Eigen::Index n = scores.cols(), K = scores.rows(), G = K / group;
        Matrix<T> cur = scores.transpose();
        Matrix<T> next(n, K);
        Matrix<T> totals(n, G);
        for (Eigen::Index g = 0; g < G; ++g) totals.col(g) = cur.middleCols(g * group, group).rowwise().sum();
        std::vector<T> w(weight.begin(), weight.end());
        for (int it = 0; it < iters; ++it) {
            const T* src = cur.data();
            for (Eigen::Index i = 0; i < n; ++i) {
                const std::size_t base = std::size_t(i) * taps_per_pixel;
                T* dst = next.data() + i * K;
                std::fill(dst, dst + K, T(0));
                for (int k = 0; k < taps_per_pixel; ++k) {
                    const T wgt = w[base + k];
                    if (wgt == T(0)) continue;
                    const T* s = src + Eigen::Index(index[base + k]) * K;
                    for (Eigen::Index c = 0; c < K; ++c) dst[c] += wgt * s[c];
                }
                for (Eigen::Index g = 0; g < G; ++g) {
                    T* d = dst + g * group;
                    T total = 0;
                    for (Eigen::Index c = 0; c < group; ++c) total += d[c];
                    if (total != T(0)) {
                        const T r = totals(i, g) / total;
                        for (Eigen::Index c = 0; c < group; ++c) d[c] *= r;
                    }
                }
            }
            std::swap(cur, next);
        }
        return cur.transpose();
    }
};

}  // namespace

template <typename T>
Matrix<T> par_refine(const Image& image, const Matrix<T>& scores, const ParConfig& cfg) {
    const Eigen::Index n = Eigen::Index(image.height) * image.width;
    if (scores.cols() != n) throw std::invalid_argument("par_refine: score maps do not match image size");
    if (cfg.iters <= 0) return scores;
    return ParKernel(image, cfg).apply(scores, cfg.iters, scores.rows());
}

template <typename T>
LabelMap refine_pseudo_labels(const Image& image, const ActivationMap<T>& cam, double low, double high,
                              const ParConfig& cfg) {
    check_thresholds(low, high);
    if (cam.h != image.height || cam.w != image.width) {
        throw std::invalid_argument("refine_pseudo_labels: CAM must be at image resolution");
    }
    const int c = cam.class_count();
    const Eigen::Index n = Eigen::Index(cam.h) * cam.w;
    // Rows 0..c: high-threshold stack, rows c+1..2c+1: low-threshold stack.
    Matrix<T> both(2 * (c + 1), n);
    both.row(0).setConstant(T(high));
    both.middleRows(1, c) = cam.values;
    both.row(c + 1).setConstant(T(low));
    both.bottomRows(c) = cam.values;
    if (cfg.iters > 0) {
        for (Eigen::Index g = 0; g < 2; ++g) {
            auto stack = both.middleRows(g * (c + 1), c + 1);
            stack.array().rowwise() /= stack.colwise().sum().array();
        }
        both = ParKernel(image, cfg).apply(both, cfg.iters, c + 1);
    }
    const auto hi = both.topRows(c + 1);
    const auto lo = both.bottomRows(c + 1);

    LabelMap out(cam.h, cam.w, LabelMap::kIgnore);
    for (Eigen::Index i = 0; i < n; ++i) {
        int arg = -1;
        T best_hi = 0, best_lo = 0;
        for (int k = 0; k < c; ++k) {
            if (!cam.present[std::size_t(k)]) continue;
            if (arg < 0 || hi(k + 1, i) > best_hi) {
                arg = k;
                best_hi = hi(k + 1, i);
            }
            if (lo(k + 1, i) > best_lo) best_lo = lo(k + 1, i);
        }
        if (arg >= 0 && best_hi > hi(0, i)) {
            out.labels[std::size_t(i)] = LabelMap::foreground(arg);
        } else if (arg < 0 || lo(0, i) > best_lo) {
            out.labels[std::size_t(i)] = LabelMap::kBackground;
        }
    }
    return out;
}

namespace {

template <typename T>
void check_seg_labels(const Matrix<T>& logits, const LabelMap& labels) {
    if (std::size_t(logits.rows()) != labels.size()) throw std::invalid_argument("seg_loss: label count mismatch");
    for (auto l : labels.labels) {
        if (l != LabelMap::kIgnore && l >= logits.cols()) {
            throw std::invalid_argument("seg_loss: label " + std::to_string(int(l)) + " outside " +
                                        std::to_string(logits.cols()) + " channels");
        }
    }
}

template <typename T>
Matrix<T> row_softmax(const Matrix<T>& x) {
    Matrix<T> p(x.rows(), x.cols());
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
        p.row(i) = (x.row(i).array() - x.row(i).maxCoeff()).exp();
        p.row(i) /= p.row(i).sum();
    }
    return p;
}

}  // namespace

template <typename T>
T seg_loss(const Matrix<T>& logits, const LabelMap& labels) {
    check_seg_labels(logits, labels);
    T total = 0;
    std::size_t count = 0;
    for (Eigen::Index i = 0; i < logits.rows(); ++i) {
        const auto l = labels.labels[std::size_t(i)];
        if (l == LabelMap::kIgnore) continue;
        const T m = logits.row(i).maxCoeff();
        const T lse = m + std::log((logits.row(i).array() - m).exp().sum());
        total += lse - logits(i, l);
        ++count;
    }
    return count ? total / T(count) : T(0);
}

template <typename T>
Var<T> seg_loss(Var<T> logits, const LabelMap& labels) {
    const auto& X = logits.value();
    check_seg_labels(X, labels);
    Tape<T>& tape = *logits.tape;
    Matrix<T> out = Matrix<T>::Constant(1, 1, seg_loss<T>(X, labels));
    std::size_t count = 0;
    for (auto l : labels.labels) count += l != LabelMap::kIgnore;
    if (count == 0) return tape.constant(std::move(out));
    auto lab = std::make_shared<std::vector<std::uint8_t>>(labels.labels);
    std::size_t ix = logits.id, self = tape.size();
    return tape.push(std::move(out), tape.requires_grad(logits), [ix, self, lab, count](Tape<T>& t) {
        const T g = t.out_grad(self)(0, 0) / T(count);
        Matrix<T> d = row_softmax<T>(t.node(ix).value);
        for (Eigen::Index i = 0; i < d.rows(); ++i) {
            const auto l = (*lab)[std::size_t(i)];
            if (l == LabelMap::kIgnore) {
                d.row(i).setZero();
            } else {
                d(i, l) -= T(1);
            }
        }
        t.accumulate_expr(ix, d * g);
    });
}

template <typename T>
LabelMap argmax_labels(const Matrix<T>& logits, int height, int width) {
    if (logits.rows() != Eigen::Index(height) * width) throw std::invalid_argument("argmax_labels: size mismatch");
    LabelMap out(height, width);
    for (Eigen::Index i = 0; i < logits.rows(); ++i) {
        Eigen::Index k;
        logits.row(i).maxCoeff(&k);
        out.labels[std::size_t(i)] = std::uint8_t(k);
    }
    return out;
}

LossBreakdown total_loss(LossBreakdown parts, const LossWeights& w) {
    const double vals[] = {parts.l_cls, parts.l_cls_aux, parts.l_ptc, parts.l_ctc, parts.l_seg};
    const char* names[] = {"l_cls", "l_cls_aux", "l_ptc", "l_ctc", "l_seg"};
    for (int i = 0; i < 5; ++i) {
        if (!std::isfinite(vals[i])) {
            throw NonFiniteError("total_loss: " + std::string(names[i]) + " is " + std::to_string(vals[i]));
        }
    }
    parts.total = parts.l_cls + parts.l_cls_aux + w.ptc * parts.l_ptc + w.ctc * parts.l_ctc + w.seg * parts.l_seg;
    return parts;
}

double lr_schedule(int t, const ScheduleConfig& cfg) {
    if (t < cfg.warmup_iters) {
        return cfg.lr_floor + (cfg.lr_max - cfg.lr_floor) * double(t) / double(cfg.warmup_iters);
    }
    const double span = double(cfg.total_iters - cfg.warmup_iters);
    const double frac = std::clamp(double(t - cfg.warmup_iters) / span, 0.0, 1.0);
    return cfg.lr_max * std::pow(1.0 - frac, cfg.power);
}

#define TOCO_INSTANTIATE_SEGMENTER(T)                                                                     \
    template struct Decoder<T>;                                                                           \
    template BoundDecoder<T> bind(Tape<T>&, Decoder<T>&, bool);                                           \
    template Var<T> decode(Var<T>, int, int, const BoundDecoder<T>&);                                     \
    template Matrix<T> decode(const Matrix<T>&, int, int, Decoder<T>&);                                   \
    template Matrix<T> par_refine(const Image&, const Matrix<T>&, const ParConfig&);                      \
    template LabelMap refine_pseudo_labels(const Image&, const ActivationMap<T>&, double, double,         \
                                           const ParConfig&);                                             \
    template T seg_loss(const Matrix<T>&, const LabelMap&);                                               \
    template Var<T> seg_loss(Var<T>, const LabelMap&);                                                    \
    template LabelMap argmax_labels(const Matrix<T>&, int, int);

TOCO_INSTANTIATE_SEGMENTER(float)
TOCO_INSTANTIATE_SEGMENTER(double)

}  // namespace toco
