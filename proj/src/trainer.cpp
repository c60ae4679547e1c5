#include "toco/trainer.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <numeric>

#include "toco/checkpoint.hpp"
#include "toco/png_io.hpp"
#include "toco/ptc.hpp"

namespace toco {

namespace {

std::mt19937_64 seeded(std::uint64_t seed, std::uint64_t a, std::uint64_t b) {
    std::seed_seq seq{std::uint32_t(seed), std::uint32_t(seed >> 32), std::uint32_t(a), std::uint32_t(a >> 32),
                      std::uint32_t(b)};
    return std::mt19937_64(seq);
}

std::vector<bool> present_mask(const std::vector<std::uint8_t>& labels) {
    std::vector<bool> out(labels.size());
    for (std::size_t k = 0; k < labels.size(); ++k) out[k] = labels[k] != 0;
    return out;
}

}  // namespace

std::mt19937_64 step_rng(std::uint64_t seed, int iteration) { return seeded(seed, std::uint64_t(iteration), 0x57e9u); }

template <typename T>
TrainState<T> TrainState<T>::init(const TrainConfig& cfg) {
    auto rng = seeded(cfg.seed, 0, 0x1417u);
    TrainState s{ToCoModel<T>::init(cfg, rng),
                 AdamW<T>(AdamWConfig{cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps, cfg.weight_decay})};
    return s;
}

template <typename T>
LossBreakdown train_step(std::span<const TrainingView> batch, TrainState<T>& state, const TrainConfig& cfg) {
    if (batch.empty()) throw std::invalid_argument("train_step: empty batch");
    ToCoModel<T>& model = state.model;
    const auto params = model.trainable();
    for (auto* p : params) p->zero_grad();
    auto rng = step_rng(cfg.seed, state.iteration);

    const bool use_ptc = cfg.lambda.ptc > 0;
    const bool use_ctc = cfg.lambda.ctc > 0;
    const bool use_seg = cfg.lambda.seg > 0;
    const T tau = T(cfg.tau), eps = T(cfg.eps);
    const int aux = cfg.vit.aux_block - 1;

    Tape<T> tape;
    auto vit = bind(tape, model.vit, true);
    Var<T> w_head = tape.parameter(model.head.weight);
    Var<T> w_aux = tape.parameter(model.aux_head.weight);
    BoundDecoder<T> dec;
    if (use_seg) dec = bind(tape, model.decoder, true);
    BoundHead<T> local;
    if (use_ctc) local = bind(tape, model.local_proj);

    std::vector<Var<T>> terms;
    std::vector<T> weights;
    LossBreakdown parts;
    const T inv_b = T(1) / T(batch.size());
    std::bernoulli_distribution flip(cfg.augment.flip_prob);

    for (const TrainingView& view : batch) {
        const std::vector<std::uint8_t>& labels = *view.labels;
        Image image = *view.image;
        if (cfg.augment.enabled && flip(rng)) image = flip_horizontal(image);

        VitGraph<T> g = forward(vit, image);
        Var<T> f = g.final_tokens();
        Var<T> f_aux = g.patch_tokens[std::size_t(aux)];

        Var<T> l_cls = cls_loss(gmp_classify(f, w_head), labels);
        Var<T> l_aux = cls_loss(gmp_classify(f_aux, w_aux), labels);
        terms.push_back(l_cls);
        weights.push_back(inv_b);
        terms.push_back(l_aux);
        weights.push_back(inv_b);
        parts.l_cls += double(l_cls.scalar());
        parts.l_cls_aux += double(l_aux.scalar());

        const std::vector<bool> present = present_mask(labels);
        LabelMap token_labels;
        if (use_ptc || use_ctc) {
            auto aux_cam =
                compute_cam(TokenGrid<T>{f_aux.value(), g.h, g.w}, model.aux_head.weight.value, present);
            token_labels = token_pseudo_labels(aux_cam, cfg.beta_low, cfg.beta_high);
        }

        if (use_ptc) {
            Var<T> l = ptc_loss(f, pairwise_relations(token_labels), cfg.ptc_mode, eps);
            terms.push_back(l);
            weights.push_back(T(cfg.lambda.ptc) * inv_b);
            parts.l_ptc += double(l.scalar());
        }

        if (use_ctc) {
            const auto boxes = sample_crops(token_labels, image.height, image.width, cfg.crops, rng);
            std::vector<Var<T>> pos, neg;
            for (const auto& box : boxes) {
                Image local_view = crop_and_augment(image, box, cfg.augment, rng);
                Var<T> c = forward(vit, local_view).final_class_token();
                (box.polarity == Polarity::Positive ? pos : neg).push_back(c);
            }
            if (!pos.empty()) {
                Var<T> p = tape.constant(project(Matrix<T>(g.final_class_token().value()), model.global_proj));
                Var<T> q = project(concat_rows<T>(pos), local);
                Var<T> n = neg.empty() ? tape.constant(Matrix<T>(0, p.cols())) : project(concat_rows<T>(neg), local);
                Var<T> l = ctc_loss(p, q, n, tau, eps);
                terms.push_back(l);
                weights.push_back(T(cfg.lambda.ctc) * inv_b);
                parts.l_ctc += double(l.scalar());
            }
        }

        if (use_seg) {
            auto cam = compute_cam(TokenGrid<T>{f.value(), g.h, g.w}, model.head.weight.value, present);
            LabelMap target = refine_pseudo_labels(image, upsample_cam(cam, image.height, image.width),
                                                   cfg.beta_low, cfg.beta_high, cfg.par);
            Var<T> logits = left_multiply(bilinear_matrix<T>(g.h, g.w, image.height, image.width),
                                          decode(f, g.h, g.w, dec));
            Var<T> l = seg_loss(logits, target);
            terms.push_back(l);
            weights.push_back(T(cfg.lambda.seg) * inv_b);
            parts.l_seg += double(l.scalar());
        }
    }

    const double nb = double(batch.size());
    parts.l_cls /= nb;
    parts.l_cls_aux /= nb;
    parts.l_ptc /= nb;
    parts.l_ctc /= nb;
    parts.l_seg /= nb;
    LossBreakdown out = total_loss(parts, cfg.lambda);

    Var<T> total = weighted_sum<T>(terms, weights);
    tape.backward(total);

    const double lr = lr_schedule(state.iteration, cfg.schedule);
    state.optimizer.step(params, lr);
    if (use_ctc) ema_update(model.global_proj, model.local_proj, T(cfg.rho));
    state.last_lr = lr;
    ++state.iteration;
    return out;
}

std::vector<std::size_t> batch_indices(std::size_t dataset_size, int batch_size, int iteration, std::uint64_t seed) {
    if (dataset_size == 0) throw std::invalid_argument("batch_indices: empty dataset");
    std::vector<std::size_t> out;
    const std::uint64_t start = std::uint64_t(iteration) * std::uint64_t(batch_size);
    std::uint64_t cached_epoch = ~std::uint64_t(0);
    std::vector<std::size_t> perm(dataset_size);
    for (int i = 0; i < batch_size; ++i) {
        const std::uint64_t pos = start + std::uint64_t(i);
        const std::uint64_t epoch = pos / dataset_size;
        if (epoch != cached_epoch) {
            std::iota(perm.begin(), perm.end(), std::size_t(0));
            auto rng = seeded(seed, epoch, 0xda7au);
            std::shuffle(perm.begin(), perm.end(), rng);
            cached_epoch = epoch;
        }
        out.push_back(perm[pos % dataset_size]);
    }
    return out;
}

std::string metrics_header() { return "iteration,lr,l_cls,l_cls_aux,l_ptc,l_ctc,l_seg,total"; }

std::string metrics_row(int iteration, double lr, const LossBreakdown& l) {
    char buf[256];
    std::snprintf(buf, sizeof buf, "%d,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g", iteration, lr, l.l_cls, l.l_cls_aux,
                  l.l_ptc, l.l_ctc, l.l_seg, l.total);
    return buf;
}

TrainState<float> train(const TrainConfig& cfg, const std::vector<Sample>& data, const TrainOptions& opts) {
    cfg.validate();
    if (data.empty()) throw std::invalid_argument("train: empty dataset");
    const int iters = opts.max_iters > 0 ? std::min(opts.max_iters, cfg.schedule.total_iters) : cfg.schedule.total_iters;

    std::ofstream metrics;
    if (!opts.out_dir.empty()) {
        std::filesystem::create_directories(opts.out_dir);
        save_config(opts.out_dir / "config.json", cfg);
        metrics.open(opts.out_dir / "metrics.csv");
        if (!metrics) throw IoError("cannot write " + (opts.out_dir / "metrics.csv").string());
        metrics << metrics_header() << '\n';
    }

    auto state = TrainState<float>::init(cfg);
    std::vector<TrainingView> batch;
    while (state.iteration < iters) {
        batch.clear();
        for (std::size_t i : batch_indices(data.size(), cfg.batch_size, state.iteration, cfg.seed)) {
            batch.push_back(data[i].training_view());
        }
        const int it = state.iteration;
        const LossBreakdown l = train_step<float>(batch, state, cfg);
        if (metrics.is_open()) metrics << metrics_row(it, state.last_lr, l) << '\n';
        if (opts.on_step) opts.on_step(it, state.last_lr, l);
        if (!opts.out_dir.empty() && cfg.checkpoint_every > 0 && state.iteration % cfg.checkpoint_every == 0 &&
            state.iteration < iters) {
            char name[32];
            std::snprintf(name, sizeof name, "ckpt_%06d", state.iteration);
            save_checkpoint(opts.out_dir / name, state.model, cfg, state.iteration);
        }
    }
    if (!opts.out_dir.empty()) save_checkpoint(opts.out_dir / "final", state.model, cfg, state.iteration);
    return state;
}

template struct TrainState<float>;
template struct TrainState<double>;
template LossBreakdown train_step(std::span<const TrainingView>, TrainState<float>&, const TrainConfig&);
template LossBreakdown train_step(std::span<const TrainingView>, TrainState<double>&, const TrainConfig&);

}  // namespace toco
