#include <doctest.h>

#include <cmath>

#include "support.hpp"
#include "toco/segmenter.hpp"

using namespace toco;
using namespace toco::test;

namespace {

/// Direct 3x3 dilated convolution with zero padding; weight row = tap * in + ch, tap = (dy+1)*3 + (dx+1).
Md conv_oracle(const Md& x, int h, int w, const Md& weight, const Md& bias, int dil) {
    const Eigen::Index in = x.cols(), out = weight.cols();
    Md y(h * w, out);
    for (int r = 0; r < h; ++r) {
        for (int c = 0; c < w; ++c) {
            for (Eigen::Index o = 0; o < out; ++o) {
                double acc = bias(0, o);
                for (int dy = -1; dy <= 1; ++dy) {
                    for (int dx = -1; dx <= 1; ++dx) {
                        const int rr = r + dy * dil, cc = c + dx * dil;
                        if (rr < 0 || rr >= h || cc < 0 || cc >= w) continue;
                        const int tap = (dy + 1) * 3 + (dx + 1);
                        for (Eigen::Index ch = 0; ch < in; ++ch) acc += x(rr * w + cc, ch) * weight(tap * in + ch, o);
                    }
                }
                y(r * w + c, o) = acc;
            }
        }
    }
    return y;
}

Md relu_ref(Md m) { return m.cwiseMax(0.0); }

Image random_image(int h, int w, std::mt19937_64& rng) {
    std::uniform_real_distribution<float> u(0.f, 1.f);
    Image img(3, h, w);
    for (float& v : img.data) v = u(rng);
    return img;
}

/// Scalar PAR transcription: self weight 1 plus exp(-|dI|^2/sigma^2) for in-image
/// neighbours, normalised, then per-position rescale to the input column total.
Md par_oracle(const Image& img, const Md& scores, const ParConfig& cfg) {
    const int H = img.height, W = img.width;
    const Eigen::Index K = scores.rows();
    Md cur = scores;
    for (int it = 0; it < cfg.iters; ++it) {
        Md next = Md::Zero(K, H * W);
        for (int y = 0; y < H; ++y) {
            for (int x = 0; x < W; ++x) {
                std::vector<std::pair<int, double>> taps{{y * W + x, 1.0}};
                for (int d : cfg.dilations) {
                    for (int dy = -1; dy <= 1; ++dy) {
                        for (int dx = -1; dx <= 1; ++dx) {
                            if (dy == 0 && dx == 0) continue;
                            const int yy = y + dy * d, xx = x + dx * d;
                            if (yy < 0 || yy >= H || xx < 0 || xx >= W) continue;
                            double dist = 0;
                            for (int c = 0; c < img.channels; ++c) {
                                const double diff = double(img.at(c, y, x)) - double(img.at(c, yy, xx));
                                dist += diff * diff;
                            }
                            taps.emplace_back(yy * W + xx, std::exp(-dist / (cfg.sigma_rgb * cfg.sigma_rgb)));
                        }
                    }
                }
                double z = 0;
                for (auto& t : taps) z += t.second;
                const int i = y * W + x;
                for (auto& [j, wt] : taps) next.col(i) += wt / z * cur.col(j);
                const double total = next.col(i).sum();
                if (total != 0) next.col(i) *= scores.col(i).sum() / total;
            }
        }
        cur = next;
    }
    return cur;
}

Md random_simplex_columns(Eigen::Index K, Eigen::Index n, std::mt19937_64& rng) {
    std::uniform_real_distribution<double> u(0.01, 1.0);
    Md m(K, n);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = u(rng);
    m.array().rowwise() /= m.colwise().sum().array();
    return m;
}

}  // namespace

TEST_CASE("decoder with zero weights gives uniform logits") {
    std::mt19937_64 rng(1);
    auto dec = Decoder<double>::init(4, 6, 3, rng);
    for (auto& [name, p] : dec.named_params()) p->value.setZero();
    const Md logits = decode(random_matrix(12, 4, rng), 3, 4, dec);
    REQUIRE(logits.rows() == 12);
    REQUIRE(logits.cols() == 4);
    CHECK(logits.isZero(0.0));
}

TEST_CASE("single token: the dilated convolution only sees its centre tap") {
    std::mt19937_64 rng(2);
    auto dec = Decoder<double>::init(3, 5, 2, rng);
    dec.conv1_b.value = random_matrix(1, 5, rng);
    dec.pred_b.value = random_matrix(1, 3, rng);
    const Md x = random_matrix(1, 3, rng);
    const Md h1 = relu_ref(x * dec.conv1_w.value.middleRows(4 * 3, 3) + dec.conv1_b.value);
    const Md h2 = relu_ref(h1 * dec.conv2_w.value.middleRows(4 * 5, 5) + dec.conv2_b.value);
    const Md expect = h2 * dec.pred_w.value + dec.pred_b.value;
    CHECK((decode(x, 1, 1, dec) - expect).cwiseAbs().maxCoeff() < 1e-14);
}

TEST_CASE("decoder matches a direct dilated-convolution oracle") {
    std::mt19937_64 rng(3);
    const int h = 7, w = 8;
    auto dec = Decoder<double>::init(4, 5, 3, rng);
    for (auto& [name, p] : dec.named_params()) p->value = random_matrix(p->value.rows(), p->value.cols(), rng, 0.5);
    const Md x = random_matrix(h * w, 4, rng);
    const Md h1 = relu_ref(conv_oracle(x, h, w, dec.conv1_w.value, dec.conv1_b.value, 5));
    const Md h2 = relu_ref(conv_oracle(h1, h, w, dec.conv2_w.value, dec.conv2_b.value, 5));
    const Md expect = (h2 * dec.pred_w.value).rowwise() + dec.pred_b.value.row(0);
    CHECK((decode(x, h, w, dec) - expect).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("decoder gradient") {
    std::mt19937_64 rng(4);
    auto dec = Decoder<double>::init(3, 4, 2, rng);
    const Md x = random_matrix(6 * 6, 3, rng);
    CHECK(grad_check(
              [&](Tape<double>& t, Var<double> v) {
                  return readout(t, decode(v, 6, 6, bind(t, dec, false)));
              },
              x) < 1e-4);
}

TEST_CASE("par_refine examples") {
    std::mt19937_64 rng(5);
    ParConfig cfg;
    const Image img = random_image(6, 7, rng);
    const Md s = random_simplex_columns(3, 42, rng);

    SUBCASE("zero iterations is the identity") {
        cfg.iters = 0;
        CHECK(par_refine(img, s, cfg) == s);
    }
    SUBCASE("constant image gives plain neighbourhood averaging") {
        cfg.iters = 1;
        cfg.dilations = {1};
        const Image flat(3, 6, 7, 0.4f);
        const Md r = par_refine(flat, s, cfg);
        for (int y = 0; y < 6; ++y) {
            for (int x = 0; x < 7; ++x) {
                Eigen::VectorXd acc = Eigen::VectorXd::Zero(3);
                int count = 0;
                for (int dy = -1; dy <= 1; ++dy) {
                    for (int dx = -1; dx <= 1; ++dx) {
                        const int yy = y + dy, xx = x + dx;
                        if (yy < 0 || yy >= 6 || xx < 0 || xx >= 7) continue;
                        acc += s.col(yy * 7 + xx);
                        ++count;
                    }
                }
                acc /= count;
                acc *= s.col(y * 7 + x).sum() / acc.sum();
                CHECK((r.col(y * 7 + x) - acc).cwiseAbs().maxCoeff() < 1e-12);
            }
        }
    }
    SUBCASE("shape mismatch") { CHECK_THROWS_AS(par_refine(img, Md(Md::Zero(3, 5)), cfg), std::invalid_argument); }
}

TEST_CASE("par_refine matches a scalar kernel oracle") {
    std::mt19937_64 rng(6);
    for (int trial = 0; trial < 10; ++trial) {
        ParConfig cfg;
        cfg.iters = 1 + int(rng() % 4);
        cfg.sigma_rgb = 0.1 + 0.1 * double(rng() % 5);
        const int h = 3 + int(rng() % 6), w = 3 + int(rng() % 6);
        const Image img = random_image(h, w, rng);
        const Md s = random_simplex_columns(2 + int(rng() % 3), h * w, rng);
        // Kernel exponentials are evaluated in single precision.
        CHECK((par_refine(img, s, cfg) - par_oracle(img, s, cfg)).cwiseAbs().maxCoeff() < 1e-6);
    }
}

TEST_CASE("a hard colour edge stops PAR mass from leaking") {
    Image img(3, 4, 4, 0.f);
    for (int c = 0; c < 3; ++c) {
        for (int y = 0; y < 4; ++y) {
            for (int x = 2; x < 4; ++x) img.at(c, y, x) = 1.f;
        }
    }
    // Class 0 owns the dark left half, class 1 the bright right half.
    Md s(2, 16);
    for (int y = 0; y < 4; ++y) {
        for (int x = 0; x < 4; ++x) {
            s(0, y * 4 + x) = x < 2 ? 1.0 : 0.0;
            s(1, y * 4 + x) = x < 2 ? 0.0 : 1.0;
        }
    }
    ParConfig cfg;
    cfg.iters = 10;
    cfg.sigma_rgb = 0.1;
    const Md r = par_refine(img, s, cfg);
    CHECK((r - s).cwiseAbs().maxCoeff() < 1e-3);
    CHECK((r - par_oracle(img, s, cfg)).cwiseAbs().maxCoeff() < 1e-9);
}

TEST_CASE("par_refine conserves per-position totals") {
    std::mt19937_64 rng(7);
    std::uniform_real_distribution<double> u(0.0, 3.0);
    for (int trial = 0; trial < 1000; ++trial) {
        ParConfig cfg;
        cfg.iters = 1 + int(rng() % 3);
        const int h = 2 + int(rng() % 5), w = 2 + int(rng() % 5);
        const Image img = random_image(h, w, rng);
        Md s(1 + int(rng() % 4), h * w);
        for (Eigen::Index i = 0; i < s.size(); ++i) s.data()[i] = u(rng);
        const Md r = par_refine(img, s, cfg);
        REQUIRE((r.colwise().sum() - s.colwise().sum()).cwiseAbs().maxCoeff() < 1e-6);
        REQUIRE(r.minCoeff() >= 0.0);
    }
}

TEST_CASE("refine_pseudo_labels without refinement equals the plain dual-threshold labels") {
    std::mt19937_64 rng(8);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    ParConfig cfg;
    cfg.iters = 0;
    for (int trial = 0; trial < 200; ++trial) {
        ActivationMap<double> cam;
        cam.h = 4 + int(rng() % 5);
        cam.w = 4 + int(rng() % 5);
        cam.values.resize(3, cam.h * cam.w);
        for (Eigen::Index i = 0; i < cam.values.size(); ++i) cam.values.data()[i] = u(rng);
        cam.present = {rng() % 2 == 0, true, rng() % 2 == 0};
        for (int k = 0; k < 3; ++k) {
            if (!cam.present[std::size_t(k)]) cam.values.row(k).setZero();
        }
        const Image img = random_image(cam.h, cam.w, rng);
        REQUIRE(refine_pseudo_labels(img, cam, 0.25, 0.7, cfg) == seg_pseudo_labels(cam, 0.25, 0.7, cam.h, cam.w));
    }
}

TEST_CASE("refine_pseudo_labels on a constant-colour object") {
    // A 6x6 bright square whose CAM is strong inside, weak outside.
    Image img(3, 12, 12, 0.f);
    ActivationMap<double> cam;
    cam.h = cam.w = 12;
    cam.values = Md::Constant(1, 144, 0.05);
    cam.present = {true};
    for (int y = 3; y < 9; ++y) {
        for (int x = 3; x < 9; ++x) {
            for (int c = 0; c < 3; ++c) img.at(c, y, x) = 1.f;
            cam.values(0, y * 12 + x) = 0.95;
        }
    }
    ParConfig cfg;
    cfg.sigma_rgb = 0.1;
    const LabelMap l = refine_pseudo_labels(img, cam, 0.25, 0.7, cfg);
    for (int y = 0; y < 12; ++y) {
        for (int x = 0; x < 12; ++x) {
            const bool inside = y >= 3 && y < 9 && x >= 3 && x < 9;
            CHECK(l.at(y, x) == (inside ? 1 : 0));
        }
    }
    CHECK_THROWS_AS(refine_pseudo_labels(img, cam, 0.7, 0.25, cfg), std::invalid_argument);
}

TEST_CASE("seg_loss examples") {
    LabelMap labels(1, 3);
    labels.labels = {0, 2, 1};
    Md one_hot = Md::Constant(3, 4, -40.0);
    one_hot(0, 0) = one_hot(1, 2) = one_hot(2, 1) = 40.0;
    CHECK(seg_loss<double>(one_hot, labels) < 1e-30);
    CHECK(seg_loss<double>(Md::Zero(3, 4), labels) == doctest::Approx(std::log(4.0)));
    CHECK(seg_loss<double>(Md::Zero(3, 4), LabelMap(1, 3, 255)) == 0.0);
    CHECK_THROWS_AS(seg_loss<double>(Md::Zero(2, 4), labels), std::invalid_argument);
}

TEST_CASE("seg_loss matches a masked-mean oracle and its gradient") {
    std::mt19937_64 rng(9);
    static const std::uint8_t palette[] = {0, 1, 2, 3, 255};
    for (int trial = 0; trial < 100; ++trial) {
        const int n = 1 + int(rng() % 16);
        const Md logits = random_matrix(n, 4, rng, 2.0);
        LabelMap labels(1, n);
        for (auto& l : labels.labels) l = palette[rng() % 5];
        double acc = 0;
        int count = 0;
        for (int i = 0; i < n; ++i) {
            if (labels.labels[std::size_t(i)] == 255) continue;
            double z = 0;
            for (int k = 0; k < 4; ++k) z += std::exp(logits(i, k));
            acc -= logits(i, labels.labels[std::size_t(i)]) - std::log(z);
            ++count;
        }
        const double expect = count ? acc / count : 0.0;
        REQUIRE(std::abs(seg_loss<double>(logits, labels) - expect) < 1e-12);
        if (trial < 10) {
            CHECK(grad_check([&](Tape<double>&, Var<double> v) { return seg_loss(v, labels); }, logits) < 1e-4);
        }
    }
}

TEST_CASE("argmax_labels") {
    Md logits(2, 3);
    logits << 0, 2, 1, 5, 5, -1;
    const LabelMap l = argmax_labels<double>(logits, 1, 2);
    CHECK(l.at(0, 0) == 1);
    CHECK(l.at(0, 1) == 0);
}

TEST_CASE("total_loss") {
    const LossWeights w{0.2, 0.5, 0.1};
    CHECK(total_loss({}, w).total == 0.0);
    LossBreakdown p{0.5, 0.4, 1.0, 0.6, 2.0, 0};
    CHECK(total_loss(p, w).total == doctest::Approx(1.6).epsilon(1e-15));
    CHECK(total_loss(p, LossWeights{0, 0, 0}).total == doctest::Approx(0.9));
    p.l_ctc = std::nan("");
    CHECK_THROWS_AS(total_loss(p, w), NonFiniteError);
    p.l_ctc = INFINITY;
    CHECK_THROWS_AS(total_loss(p, w), NonFiniteError);

    std::mt19937_64 rng(10);
    std::uniform_real_distribution<double> u(0.0, 5.0);
    for (int trial = 0; trial < 1000; ++trial) {
        const LossBreakdown q{u(rng), u(rng), u(rng), u(rng), u(rng), 0};
        const LossWeights lw{u(rng), u(rng), u(rng)};
        const double expect = q.l_cls + q.l_cls_aux + lw.ptc * q.l_ptc + lw.ctc * q.l_ctc + lw.seg * q.l_seg;
        const LossBreakdown r = total_loss(q, lw);
        REQUIRE(std::abs(r.total - expect) < 1e-12);
        REQUIRE(r.l_cls == q.l_cls);
    }
}

TEST_CASE("lr_schedule examples") {
    const ScheduleConfig cfg{6e-5, 1e-6, 1500, 20000, 0.9};
    CHECK(lr_schedule(0, cfg) == doctest::Approx(1e-6));
    CHECK(lr_schedule(1500, cfg) == 6e-5);
    CHECK(lr_schedule(20000, cfg) == 0.0);
    CHECK(lr_schedule((1500 + 20000) / 2, cfg) == doctest::Approx(6e-5 * std::pow(0.5, 0.9)).epsilon(1e-12));
    CHECK(lr_schedule(750, cfg) == doctest::Approx(1e-6 + (6e-5 - 1e-6) * 0.5));
}

TEST_CASE("lr_schedule matches the closed form, is continuous at warm-up and non-increasing after") {
    std::mt19937_64 rng(11);
    for (int trial = 0; trial < 1000; ++trial) {
        ScheduleConfig cfg;
        cfg.warmup_iters = int(rng() % 200);
        cfg.total_iters = cfg.warmup_iters + 1 + int(rng() % 2000);
        cfg.lr_max = 1e-4 * (1 + double(rng() % 100));
        cfg.lr_floor = cfg.lr_max * 1e-3;
        cfg.power = 0.5 + double(rng() % 10) / 10.0;
        const int t = int(rng() % std::uint64_t(cfg.total_iters + 1));
        double expect;
        if (t <= cfg.warmup_iters) {
            expect = cfg.warmup_iters == 0
                         ? cfg.lr_max
                         : cfg.lr_floor + (cfg.lr_max - cfg.lr_floor) * double(t) / double(cfg.warmup_iters);
        } else {
            expect = cfg.lr_max * std::pow(1.0 - double(t - cfg.warmup_iters) / double(cfg.total_iters - cfg.warmup_iters),
                                           cfg.power);
        }
        REQUIRE(std::abs(lr_schedule(t, cfg) - expect) < 1e-12);
        REQUIRE(lr_schedule(cfg.warmup_iters, cfg) == cfg.lr_max);
        REQUIRE(std::abs(lr_schedule(cfg.warmup_iters + 1, cfg) - cfg.lr_max) <
                cfg.lr_max * (1.0 - std::pow(1.0 - 1.0 / double(cfg.total_iters - cfg.warmup_iters), cfg.power)) + 1e-15);
        if (t > cfg.warmup_iters && t < cfg.total_iters) REQUIRE(lr_schedule(t + 1, cfg) <= lr_schedule(t, cfg));
    }
}
