#pragma once

#include <random>
#include <string>
#include <utility>
#include <vector>

#include "toco/autograd.hpp"
#include "toco/image.hpp"

namespace toco {

enum class Polarity { Positive, Negative };

/// Square crop in global-image pixels.
struct CropProposal {
    int x = 0;
    int y = 0;
    int side = 0;
    Polarity polarity = Polarity::Positive;

    bool operator==(const CropProposal&) const = default;
};

struct CropConfig {
    int n_crops = 4;
    int local_size = 16;
    double bg_fraction = 0.9;   // negative: at least this much reliable background, no foreground
    double unc_fraction = 0.3;  // positive: at least this much uncertain area
    int max_retries = 32;       // per crop, before the max-uncertainty fallback
};

struct AugmentConfig {
    bool enabled = true;
    double flip_prob = 0.5;
    double brightness = 0.1;  // multiplicative jitter in [1 - b, 1 + b]
};

/// Draws cfg.n_crops proposals whose polarity follows token-label coverage.
/// Boxes failing both coverage tests are redrawn; after max_retries the crop
/// falls back to a positive box at the most uncertain location.
std::vector<CropProposal> sample_crops(const LabelMap& token_labels, int image_height, int image_width,
                                       const CropConfig& cfg, std::mt19937_64& rng);

Image crop(const Image& image, const CropProposal& box);
Image flip_horizontal(const Image& image);

/// Extracts the box then applies flip and brightness jitter when enabled.
Image crop_and_augment(const Image& image, const CropProposal& box, const AugmentConfig& aug, std::mt19937_64& rng);

/// Appends "image_id,x,y,side,polarity" rows.
std::string crops_to_csv(int image_id, const std::vector<CropProposal>& crops);

enum class HeadRole { Global, Local };

/// Three linear layers with GELU in between, then L2 normalisation.
template <typename T>
struct ProjectionHead {
    HeadRole role = HeadRole::Local;
    Param<T> w1, b1, w2, b2, w3, b3;

    static ProjectionHead init(int in_dim, int hidden, int out_dim, HeadRole role, std::mt19937_64& rng);
    std::vector<std::pair<std::string, Param<T>*>> named_params();
};

template <typename T>
struct BoundHead {
    Var<T> w1, b1, w2, b2, w3, b3;
};

/// Binds the head; a global head is always bound as constants (no gradient reaches it).
template <typename T>
BoundHead<T> bind(Tape<T>& tape, ProjectionHead<T>& head);

template <typename T>
Var<T> project(Var<T> x, const BoundHead<T>& head);

template <typename T>
Matrix<T> project(const Matrix<T>& x, const ProjectionHead<T>& head);

/// InfoNCE of one anchor p (1 x k) against positives (m x k, m >= 1) and
/// negatives (r x k, r >= 0), as a negative log-likelihood averaged over positives.
template <typename T>
T ctc_loss(const Matrix<T>& p, const Matrix<T>& positives, const Matrix<T>& negatives, T tau, T eps);

template <typename T>
Var<T> ctc_loss(Var<T> p, Var<T> positives, Var<T> negatives, T tau, T eps);

/// target <- rho * target + (1 - rho) * source, elementwise.
template <typename T>
void ema_update(Matrix<T>& target, const Matrix<T>& source, T rho);

template <typename T>
void ema_update(ProjectionHead<T>& global, ProjectionHead<T>& local, T rho);

}  // namespace toco
