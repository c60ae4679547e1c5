#pragma once

#include <random>
#include <string>
#include <utility>
#include <vector>

#include "toco/autograd.hpp"
#include "toco/cam.hpp"
#include "toco/image.hpp"

namespace toco {

/// Two 3x3 convolutions (dilation 5) with ReLU, then a 1x1 prediction layer
/// producing classes + 1 channels (channel 0 is background).
template <typename T>
struct Decoder {
    static constexpr int kDilation = 5;
    Param<T> conv1_w, conv1_b;  // (9 * in) x width
    Param<T> conv2_w, conv2_b;  // (9 * width) x width
    Param<T> pred_w, pred_b;    // width x (classes + 1)

    static Decoder init(int in_dim, int width, int classes, std::mt19937_64& rng);
    std::vector<std::pair<std::string, Param<T>*>> named_params();
};

template <typename T>
struct BoundDecoder {
    Var<T> conv1_w, conv1_b, conv2_w, conv2_b, pred_w, pred_b;
};

template <typename T>
BoundDecoder<T> bind(Tape<T>& tape, Decoder<T>& dec, bool trainable = true);

/// Logits at token resolution, (h*w) x (classes + 1).
template <typename T>
Var<T> decode(Var<T> tokens, int h, int w, const BoundDecoder<T>& dec);

template <typename T>
Matrix<T> decode(const Matrix<T>& tokens, int h, int w, Decoder<T>& dec);

struct ParConfig {
    int iters = 10;
    double sigma_rgb = 0.15;
    std::vector<int> dilations{1, 2, 4};
};

/// Image-conditioned smoothing of K x (H*W) score maps: each round replaces a
/// position's scores with the kernel-weighted mean over itself and its 3x3
/// neighbours at every dilation, w ~ exp(-|I_i - I_j|^2 / sigma^2), and then
/// rescales each position back to its original channel total.
template <typename T>
Matrix<T> par_refine(const Image& image, const Matrix<T>& scores, const ParConfig& cfg);

/// Dual-threshold labels from an image-resolution CAM after refinement. For each
/// threshold the CAM is stacked under a constant background channel, normalised
/// per position and refined; foreground needs a class beating the refined
/// high-threshold channel, background needs the refined low-threshold channel
/// to beat every class. Equals seg_pseudo_labels when cfg.iters == 0.
template <typename T>
LabelMap refine_pseudo_labels(const Image& image, const ActivationMap<T>& cam, double low, double high,
                              const ParConfig& cfg);

/// Mean softmax cross-entropy over positions whose label is not ignore.
template <typename T>
T seg_loss(const Matrix<T>& logits, const LabelMap& labels);

template <typename T>
Var<T> seg_loss(Var<T> logits, const LabelMap& labels);

/// Per-position argmax as a label map (channel index = label value).
template <typename T>
LabelMap argmax_labels(const Matrix<T>& logits, int height, int width);

struct LossWeights {
    double ptc = 0.2;
    double ctc = 0.5;
    double seg = 0.1;
};

struct LossBreakdown {
    double l_cls = 0;
    double l_cls_aux = 0;
    double l_ptc = 0;
    double l_ctc = 0;
    double l_seg = 0;
    double total = 0;
};

/// total = cls + cls_aux + ptc*l_ptc + ctc*l_ctc + seg*l_seg; throws
/// NonFiniteError when any part is NaN/Inf.
LossBreakdown total_loss(LossBreakdown parts, const LossWeights& weights);

struct ScheduleConfig {
    double lr_max = 6e-5;
    double lr_floor = 1e-6;
    int warmup_iters = 1500;
    int total_iters = 20000;
    double power = 0.9;
};

/// Linear warm-up from lr_floor to lr_max, then polynomial decay to zero at total_iters.
double lr_schedule(int t, const ScheduleConfig& cfg);

}  // namespace toco
