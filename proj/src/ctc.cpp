#include "toco/ctc.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <sstream>
#include <stdexcept>

#include "toco/backbone.hpp"

namespace toco {

namespace {

/// Summed-area tables of background / uncertain / foreground pixel counts.
struct CoverageTables {
    int h = 0, w = 0;
    std::vector<int> bg, unc, fg;  // (h+1) x (w+1)

    CoverageTables(const LabelMap& tokens, int height, int width)
        : h(height), w(width), bg((h + 1) * (w + 1), 0), unc(bg), fg(bg) {
        for (int y = 0; y < h; ++y) {
            const int ty = int(std::int64_t(y) * tokens.height / h);
            for (int x = 0; x < w; ++x) {
                const int tx = int(std::int64_t(x) * tokens.width / w);
                const auto l = tokens.at(ty, tx);
                const int i = (y + 1) * (w + 1) + (x + 1);
                const int up = y * (w + 1) + (x + 1), left = (y + 1) * (w + 1) + x, diag = y * (w + 1) + x;
                auto fill = [&](std::vector<int>& t, int v) { t[i] = v + t[up] + t[left] - t[diag]; };
                fill(bg, l == LabelMap::kBackground);
                fill(unc, l == LabelMap::kIgnore);
                fill(fg, LabelMap::is_foreground(l));
            }
        }
    }

    int count(const std::vector<int>& t, int x, int y, int s) const {
        auto at = [&](int yy, int xx) { return t[yy * (w + 1) + xx]; };
        return at(y + s, x + s) - at(y, x + s) - at(y + s, x) + at(y, x);
    }
};

}  // namespace

std::vector<CropProposal> sample_crops(const LabelMap& token_labels, int image_height, int image_width,
                                       const CropConfig& cfg, std::mt19937_64& rng) {
    if (cfg.n_crops < 1) throw std::invalid_argument("sample_crops: n_crops must be >= 1");
    const int s = cfg.local_size;
    if (s < 1 || s > image_height || s > image_width) {
        throw std::invalid_argument("sample_crops: local crop side must fit inside the image");
    }
    CoverageTables cov(token_labels, image_height, image_width);
    const double area = double(s) * s;
    std::uniform_int_distribution<int> xs(0, image_width - s), ys(0, image_height - s);

    std::vector<CropProposal> out;
    for (int c = 0; c < cfg.n_crops; ++c) {
        bool placed = false;
        for (int attempt = 0; attempt < std::max(1, cfg.max_retries) && !placed; ++attempt) {
            const int x = xs(rng);
            const int y = ys(rng);
            const double bg = cov.count(cov.bg, x, y, s) / area;
            const double unc = cov.count(cov.unc, x, y, s) / area;
            const int fg = cov.count(cov.fg, x, y, s);
            if (bg >= cfg.bg_fraction && fg == 0) {
                out.push_back({x, y, s, Polarity::Negative});
                placed = true;
            } else if (unc >= cfg.unc_fraction) {
                out.push_back({x, y, s, Polarity::Positive});
                placed = true;
            }
        }
        if (!placed) {
            int bx = 0, by = 0, best = -1;
            for (int y = 0; y + s <= image_height; ++y) {
                for (int x = 0; x + s <= image_width; ++x) {
                    const int u = cov.count(cov.unc, x, y, s);
                    if (u > best) {
                        best = u;
                        bx = x;
                        by = y;
                    }
                }
            }
            out.push_back({bx, by, s, Polarity::Positive});
        }
    }
    return out;
}

Image crop(const Image& image, const CropProposal& box) {
    if (box.side <= 0 || box.x < 0 || box.y < 0 || box.x + box.side > image.width || box.y + box.side > image.height) {
        std::ostringstream os;
        os << "crop: box (" << box.x << ", " << box.y << ", " << box.side << ") outside " << image.width << "x"
           << image.height << " image";
        throw std::out_of_range(os.str());
    }
    Image out(image.channels, box.side, box.side);
    for (int c = 0; c < image.channels; ++c) {
        for (int y = 0; y < box.side; ++y) {
            for (int x = 0; x < box.side; ++x) out.at(c, y, x) = image.at(c, box.y + y, box.x + x);
        }
    }
    return out;
}

Image flip_horizontal(const Image& image) {
    Image out(image.channels, image.height, image.width);
    for (int c = 0; c < image.channels; ++c) {
        for (int y = 0; y < image.height; ++y) {
            for (int x = 0; x < image.width; ++x) out.at(c, y, x) = image.at(c, y, image.width - 1 - x);
        }
    }
    return out;
}

Image crop_and_augment(const Image& image, const CropProposal& box, const AugmentConfig& aug, std::mt19937_64& rng) {
    Image out = crop(image, box);
    if (!aug.enabled) return out;
    std::uniform_real_distribution<double> u(0.0, 1.0);
    const bool flip = u(rng) < aug.flip_prob;
    const double factor = 1.0 + aug.brightness * (2.0 * u(rng) - 1.0);
    if (flip) out = flip_horizontal(out);
    for (float& v : out.data) v = std::clamp(float(v * factor), 0.f, 1.f);
    return out;
}

std::string crops_to_csv(int image_id, const std::vector<CropProposal>& crops) {
    std::ostringstream os;
    for (const auto& c : crops) {
        os << image_id << ',' << c.x << ',' << c.y << ',' << c.side << ','
           << (c.polarity == Polarity::Positive ? "positive" : "negative") << '\n';
    }
    return os.str();
}

template <typename T>
ProjectionHead<T> ProjectionHead<T>::init(int in_dim, int hidden, int out_dim, HeadRole role, std::mt19937_64& rng) {
    ProjectionHead h;
    h.role = role;
    h.w1 = Param<T>(trunc_normal<T>(in_dim, hidden, 0.02, rng));
    h.b1 = Param<T>(Matrix<T>::Zero(1, hidden));
    h.w2 = Param<T>(trunc_normal<T>(hidden, hidden, 0.02, rng));
    h.b2 = Param<T>(Matrix<T>::Zero(1, hidden));
    h.w3 = Param<T>(trunc_normal<T>(hidden, out_dim, 0.02, rng));
    h.b3 = Param<T>(Matrix<T>::Zero(1, out_dim));
    return h;
}

template <typename T>
std::vector<std::pair<std::string, Param<T>*>> ProjectionHead<T>::named_params() {
    return {{"fc1.weight", &w1}, {"fc1.bias", &b1}, {"fc2.weight", &w2},
            {"fc2.bias", &b2},   {"fc3.weight", &w3}, {"fc3.bias", &b3}};
}

template <typename T>
BoundHead<T> bind(Tape<T>& tape, ProjectionHead<T>& head) {
    auto b = [&](Param<T>& p) { return head.role == HeadRole::Global ? tape.constant(p.value) : tape.parameter(p); };
    return {b(head.w1), b(head.b1), b(head.w2), b(head.b2), b(head.w3), b(head.b3)};
}

template <typename T>
Var<T> project(Var<T> x, const BoundHead<T>& h) {
    Var<T> y = gelu(add_row(matmul(x, h.w1), h.b1));
    y = gelu(add_row(matmul(y, h.w2), h.b2));
    y = add_row(matmul(y, h.w3), h.b3);
    return l2_normalize_rows(y);
}

template <typename T>
Matrix<T> project(const Matrix<T>& x, const ProjectionHead<T>& head) {
    Tape<T> tape;
    BoundHead<T> h{tape.constant(head.w1.value), tape.constant(head.b1.value), tape.constant(head.w2.value),
                   tape.constant(head.b2.value), tape.constant(head.w3.value), tape.constant(head.b3.value)};
    return project(tape.constant(x), h).value();
}

namespace {

template <typename T>
void check_contrast_shapes(const Matrix<T>& p, const Matrix<T>& pos, const Matrix<T>& neg) {
    if (p.rows() != 1) throw std::invalid_argument("ctc_loss: anchor must be a single row");
    if (pos.rows() < 1) throw std::invalid_argument("ctc_loss: at least one positive is required");
    if (pos.cols() != p.cols() || (neg.rows() > 0 && neg.cols() != p.cols())) {
        throw std::invalid_argument("ctc_loss: embedding widths differ");
    }
}

/// Logits and per-positive softmax pieces, shifted by the largest logit.
template <typename T>
struct ContrastTerms {
    Eigen::Matrix<T, Eigen::Dynamic, 1> a, b;  // positive / negative logits
    Eigen::Matrix<T, Eigen::Dynamic, 1> ea, eb;
    Eigen::Matrix<T, Eigen::Dynamic, 1> denom;
    T loss = 0;

    ContrastTerms(const Matrix<T>& p, const Matrix<T>& pos, const Matrix<T>& neg, T tau, T eps) {
        a = (pos * p.transpose()) / tau;
        b = neg.rows() > 0 ? Eigen::Matrix<T, Eigen::Dynamic, 1>((neg * p.transpose()) / tau)
                           : Eigen::Matrix<T, Eigen::Dynamic, 1>(0);
        T shift = a.maxCoeff();
        if (b.size() > 0) shift = std::max(shift, b.maxCoeff());
        ea = (a.array() - shift).exp();
        eb = (b.array() - shift).exp();
        const T neg_sum = eb.sum();
        const T eps_shifted = eps * std::exp(-shift);
        denom = (ea.array() + neg_sum + eps_shifted).matrix();
        for (Eigen::Index i = 0; i < a.size(); ++i) loss -= std::log(ea(i) / denom(i));
        loss /= T(a.size());
    }
};

}  // namespace

template <typename T>
T ctc_loss(const Matrix<T>& p, const Matrix<T>& positives, const Matrix<T>& negatives, T tau, T eps) {
    check_contrast_shapes(p, positives, negatives);
    return ContrastTerms<T>(p, positives, negatives, tau, eps).loss;
}

template <typename T>
Var<T> ctc_loss(Var<T> p, Var<T> positives, Var<T> negatives, T tau, T eps) {
    check_contrast_shapes(p.value(), positives.value(), negatives.value());
    auto terms = std::make_shared<ContrastTerms<T>>(p.value(), positives.value(), negatives.value(), tau, eps);
    Tape<T>& tape = *p.tape;
    const bool rg = tape.requires_grad(p) || tape.requires_grad(positives) || tape.requires_grad(negatives);
    std::size_t ip = p.id, iq = positives.id, in = negatives.id, self = tape.size();
    return tape.push(Matrix<T>::Constant(1, 1, terms->loss), rg, [ip, iq, in, self, terms, tau](Tape<T>& t) {
        const T g = t.out_grad(self)(0, 0);
        const auto& P = t.node(ip).value;
        const auto& Q = t.node(iq).value;
        const auto& N = t.node(in).value;
        const Eigen::Index m = Q.rows();
        // d loss / d logits
        Eigen::Matrix<T, Eigen::Dynamic, 1> da(m);
        Eigen::Matrix<T, Eigen::Dynamic, 1> db = Eigen::Matrix<T, Eigen::Dynamic, 1>::Zero(N.rows());
        for (Eigen::Index i = 0; i < m; ++i) {
            da(i) = (terms->ea(i) / terms->denom(i) - T(1)) / T(m);
            for (Eigen::Index j = 0; j < N.rows(); ++j) db(j) += terms->eb(j) / terms->denom(i) / T(m);
        }
        da *= g / tau;
        db *= g / tau;
        if (t.node(ip).requires_grad) {
            Matrix<T> dp = da.transpose() * Q;
            if (N.rows() > 0) dp += db.transpose() * N;
            t.accumulate(ip, dp);
        }
        if (t.node(iq).requires_grad) t.accumulate_expr(iq, da * P);
        if (N.rows() > 0 && t.node(in).requires_grad) t.accumulate_expr(in, db * P);
    });
}

template <typename T>
void ema_update(Matrix<T>& target, const Matrix<T>& source, T rho) {
    if (!(rho >= T(0) && rho <= T(1))) throw std::invalid_argument("ema_update: momentum must lie in [0, 1]");
    if (target.rows() != source.rows() || target.cols() != source.cols()) {
        throw std::invalid_argument("ema_update: shape mismatch");
    }
    target = rho * target + (T(1) - rho) * source;
}

template <typename T>
void ema_update(ProjectionHead<T>& global, ProjectionHead<T>& local, T rho) {
    auto g = global.named_params();
    auto l = local.named_params();
    for (std::size_t i = 0; i < g.size(); ++i) ema_update(g[i].second->value, l[i].second->value, rho);
}

#define TOCO_INSTANTIATE_CTC(T)                                                          \
    template struct ProjectionHead<T>;                                                   \
    template BoundHead<T> bind(Tape<T>&, ProjectionHead<T>&);                            \
    template Var<T> project(Var<T>, const BoundHead<T>&);                                \
    template Matrix<T> project(const Matrix<T>&, const ProjectionHead<T>&);              \
    template T ctc_loss(const Matrix<T>&, const Matrix<T>&, const Matrix<T>&, T, T);     \
    template Var<T> ctc_loss(Var<T>, Var<T>, Var<T>, T, T);                              \
    template void ema_update(Matrix<T>&, const Matrix<T>&, T);                           \
    template void ema_update(ProjectionHead<T>&, ProjectionHead<T>&, T);

TOCO_INSTANTIATE_CTC(float)
TOCO_INSTANTIATE_CTC(double)

}  // namespace toco
