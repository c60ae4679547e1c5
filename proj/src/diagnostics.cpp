#include "toco/diagnostics.hpp"

#include <algorithm>
#include <atomic>
#include <cfenv>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <mutex>
#include <sstream>
#include <thread>

#include "toco/ptc.hpp"
#include "toco/trainer.hpp"

namespace toco {

Inference infer(ToCoModel<float>& model, const TrainConfig& cfg, const Image& image) {
    Inference out;
    out.trace = forward(image, model.vit);
    const auto& final_tokens = out.trace.blocks.back();
    const auto& aux_tokens = out.trace.blocks[std::size_t(cfg.vit.aux_block - 1)];
    out.logits = gmp_classify(final_tokens.tokens, model.head.weight.value);
    out.aux_logits = gmp_classify(aux_tokens.tokens, model.aux_head.weight.value);
    out.cam = compute_cam(final_tokens, model.head.weight.value, predicted_classes(out.logits));
    out.aux_cam = compute_cam(aux_tokens, model.aux_head.weight.value, predicted_classes(out.aux_logits));
    const Matrix<float> tok_logits = decode(final_tokens.tokens, final_tokens.h, final_tokens.w, model.decoder);
    out.seg_logits = bilinear_matrix<float>(final_tokens.h, final_tokens.w, image.height, image.width) * tok_logits;
    return out;
}

LabelMap cam_pseudo_labels(const ActivationMap<float>& cam, int height, int width, double threshold) {
    return cam_to_labels(upsample_cam(cam, height, width), threshold);
}

EvalReport evaluate(ToCoModel<float>& model, const TrainConfig& cfg, const std::vector<Sample>& samples,
                    const std::filesystem::path& dump_dir) {
    std::vector<LabelMap> gts, cams, auxs, segs;
    if (!dump_dir.empty()) std::filesystem::create_directories(dump_dir);
    for (std::size_t i = 0; i < samples.size(); ++i) {
        const Sample& s = samples[i];
        if (!s.has_evaluation_mask()) throw DatasetError("evaluate: sample " + std::to_string(i) + " has no mask");
        const Inference inf = infer(model, cfg, s.image);
        const int H = s.image.height, W = s.image.width;
        gts.push_back(s.evaluation_mask());
        cams.push_back(cam_pseudo_labels(inf.cam, H, W, cfg.eval_threshold));
        auxs.push_back(cam_pseudo_labels(inf.aux_cam, H, W, cfg.eval_threshold));
        segs.push_back(argmax_labels(inf.seg_logits, H, W));
        if (!dump_dir.empty()) {
            char name[32];
            std::snprintf(name, sizeof name, "%05zu.png", i);
            write_png(dump_dir / name, to_raster(cams.back()));
        }
    }
    const int k = cfg.classes + 1;
    return EvalReport{miou(cams, gts, k), miou(auxs, gts, k), miou(segs, gts, k)};
}

EvalReport evaluate(const std::filesystem::path& checkpoint_prefix, const std::vector<Sample>& samples) {
    LoadedCheckpoint ck = load_checkpoint(checkpoint_prefix);
    for (const Sample& s : samples) {
        if (s.image.height != ck.config.vit.image_size || s.image.width != ck.config.vit.image_size) {
            throw CheckpointError("checkpoint expects " + std::to_string(ck.config.vit.image_size) +
                                  " px images, dataset has " + std::to_string(s.image.height) + "x" +
                                  std::to_string(s.image.width));
        }
        if (s.image_labels.size() != std::size_t(ck.config.classes)) {
            throw CheckpointError("checkpoint has " + std::to_string(ck.config.classes) + " classes, dataset has " +
                                  std::to_string(s.image_labels.size()));
        }
    }
    return evaluate(ck.model, ck.config, samples);
}

nlohmann::json to_json(const EvalReport& r) {
    auto one = [](const IoUReport& x) {
        return nlohmann::json{{"miou", x.miou}, {"per_class_iou", x.per_class_iou}};
    };
    return nlohmann::json{{"cam", one(r.cam)}, {"aux_cam", one(r.aux_cam)}, {"seg", one(r.seg)}};
}

std::vector<double> blockwise_similarity(ToCoModel<float>& model, const std::vector<Sample>& samples,
                                         std::size_t sample_limit) {
    if (samples.empty()) throw std::invalid_argument("blockwise_similarity: empty dataset");
    const std::size_t n = sample_limit == 0 ? samples.size() : std::min(sample_limit, samples.size());
    std::vector<double> out(std::size_t(model.vit.config.depth), 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        const ForwardTrace<float> trace = forward(samples[i].image, model.vit);
        for (std::size_t b = 0; b < out.size(); ++b) {
            // Every point is a raw block output; the final LayerNorm sits outside the blocks.
            const Matrix<float>& tokens = b + 1 == out.size() ? trace.final_pre_norm : trace.blocks[b].tokens;
            out[b] += mean_pairwise_cosine<double>(tokens.cast<double>());
        }
    }
    for (double& v : out) v /= double(n);
    return out;
}

Raster similarity_raster(const Matrix<float>& tokens) {
    const Matrix<double> cos = cosine_matrix<double>(tokens.cast<double>());
    const int n = int(cos.rows());
    Raster r{n, n, 1, std::vector<std::uint8_t>(std::size_t(n) * n)};
    const int old_mode = std::fegetround();
    std::fesetround(FE_TONEAREST);
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j < n; ++j) {
            const double v = std::clamp(std::abs(cos(i, j)), 0.0, 1.0) * 255.0;
            r.pixels[std::size_t(i) * n + j] = std::uint8_t(std::nearbyint(v));
        }
    }
    std::fesetround(old_mode);
    return r;
}

namespace {

void jet(double m, double rgb[3]) {
    auto ramp = [](double v) { return std::clamp(1.5 - std::abs(v), 0.0, 1.0); };
    rgb[0] = ramp(4 * m - 3);
    rgb[1] = ramp(4 * m - 2);
    rgb[2] = ramp(4 * m - 1);
}

}  // namespace

Raster overlay_raster(const Image& image, const Matrix<float>& map, int map_h, int map_w) {
    const int H = image.height, W = image.width;
    const Matrix<double> flat = Eigen::Map<const Matrix<float>>(map.data(), Eigen::Index(map_h) * map_w, 1).cast<double>();
    const Matrix<double> up = bilinear_matrix<double>(map_h, map_w, H, W) * flat;
    Image out(3, H, W);
    constexpr double alpha = 0.5;
    for (int y = 0; y < H; ++y) {
        for (int x = 0; x < W; ++x) {
            const double m = std::clamp(up(Eigen::Index(y) * W + x, 0), 0.0, 1.0);
            double c[3];
            jet(m, c);
            for (int ch = 0; ch < 3; ++ch) {
                const double base = image.at(image.channels == 1 ? 0 : ch, y, x);
                out.at(ch, y, x) = float((1 - alpha * m) * base + alpha * m * c[ch]);
            }
        }
    }
    return to_raster(out);
}

std::vector<std::filesystem::path> render_cam(const Sample& sample, ToCoModel<float>& model, const TrainConfig& cfg,
                                              const std::filesystem::path& out_dir) {
    std::error_code ec;
    std::filesystem::create_directories(out_dir, ec);
    if (ec) throw IoError("cannot create " + out_dir.string() + ": " + ec.message());
    const Inference inf = infer(model, cfg, sample.image);
    std::vector<std::filesystem::path> written;
    auto emit = [&](const std::string& name, const Raster& r) {
        const auto path = out_dir / name;
        write_png(path, r);
        written.push_back(path);
    };
    for (int k = 0; k < inf.cam.class_count(); ++k) {
        emit("cam_" + std::to_string(k) + ".png",
             overlay_raster(sample.image, Matrix<float>(inf.cam.values.row(k)), inf.cam.h, inf.cam.w));
        emit("aux_cam_" + std::to_string(k) + ".png",
             overlay_raster(sample.image, Matrix<float>(inf.aux_cam.values.row(k)), inf.aux_cam.h, inf.aux_cam.w));
    }
    emit("sim_final.png", similarity_raster(inf.trace.blocks.back().tokens));
    emit("sim_aux.png", similarity_raster(inf.trace.blocks[std::size_t(cfg.vit.aux_block - 1)].tokens));
    for (int b = 0; b < inf.trace.depth(); ++b) {
        Matrix<float> attn = class_attention_map(inf.trace, b);
        const float peak = attn.maxCoeff();
        if (peak > 0) attn /= peak;
        emit("attn_block" + std::to_string(b + 1) + ".png",
             overlay_raster(sample.image, attn, int(attn.rows()), int(attn.cols())));
    }
    return written;
}

std::string ablation_header() { return "setting,status,pseudo_miou,aux_miou,seg_miou,final_similarity,error"; }

std::string ablation_row(const AblationResult& r) {
    std::string err = r.error;
    std::replace(err.begin(), err.end(), '"', '\'');
    std::replace(err.begin(), err.end(), '\n', ' ');
    char buf[160];
    std::snprintf(buf, sizeof buf, ",%s,%.6f,%.6f,%.6f,%.6f,", r.ok ? "ok" : "failed", r.pseudo_miou, r.aux_miou,
                  r.seg_miou, r.final_similarity);
    return r.name + buf + (err.empty() ? "" : "\"" + err + "\"");
}

void append_row_atomic(const std::filesystem::path& csv_path, const std::string& row) {
    static std::mutex mu;
    std::lock_guard lock(mu);
    std::string body;
    if (std::ifstream in(csv_path); in) {
        std::ostringstream ss;
        ss << in.rdbuf();
        body = ss.str();
    }
    if (body.empty()) body = std::string(kAblationSchema) + "\n" + ablation_header() + "\n";
    if (body.back() != '\n') body += '\n';
    body += row + "\n";
    if (csv_path.has_parent_path()) std::filesystem::create_directories(csv_path.parent_path());
    auto tmp = csv_path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::trunc);
        if (!out) throw IoError("cannot write " + tmp.string());
        out << body;
        if (!out.flush()) throw IoError("short write on " + tmp.string());
    }
    std::filesystem::rename(tmp, csv_path);
}

int worker_threads(int fallback) {
    if (const char* env = std::getenv("TOCO_THREADS")) {
        char* end = nullptr;
        const long v = std::strtol(env, &end, 10);
        if (end != env && v >= 1) return int(v);
    }
    return std::max(1, fallback);
}

std::vector<AblationResult> run_ablation(const TrainConfig& base, const std::vector<GridPoint>& grid,
                                         const std::vector<Sample>& train_data, const std::vector<Sample>& eval_data,
                                         const std::filesystem::path& csv_path, const AblationOptions& opts) {
    std::vector<AblationResult> results(grid.size());
    std::atomic<std::size_t> next{0};
    auto worker = [&] {
        for (std::size_t i = next++; i < grid.size(); i = next++) {
            AblationResult& r = results[i];
            r.name = grid[i].name;
            try {
                TrainConfig cfg = base;
                from_json(grid[i].overrides, cfg);
                TrainOptions topts;
                topts.max_iters = opts.max_iters;
                auto state = train(cfg, train_data, topts);
                const EvalReport rep = evaluate(state.model, cfg, eval_data);
                r.pseudo_miou = rep.cam.miou;
                r.aux_miou = rep.aux_cam.miou;
                r.seg_miou = rep.seg.miou;
                r.final_similarity = blockwise_similarity(state.model, eval_data, opts.similarity_samples).back();
                r.ok = true;
            } catch (const std::exception& e) {
                r.ok = false;
                r.error = e.what();
            }
            append_row_atomic(csv_path, ablation_row(r));
        }
    };
    const int threads = std::min<int>(opts.threads > 0 ? opts.threads : worker_threads(1), int(grid.size()));
    if (threads <= 1) {
        worker();
    } else {
        std::vector<std::jthread> pool;
        for (int t = 0; t < threads; ++t) pool.emplace_back(worker);
    }
    return results;
}

}  // namespace toco
