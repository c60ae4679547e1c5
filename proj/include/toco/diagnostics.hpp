#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "toco/checkpoint.hpp"
#include "toco/config.hpp"
#include "toco/data.hpp"
#include "toco/model.hpp"
#include "toco/png_io.hpp"

namespace toco {

/// Everything inference produces for one image.
struct Inference {
    ForwardTrace<float> trace;
    RowVector<float> logits;
    RowVector<float> aux_logits;
    ActivationMap<float> cam;      // final CAM over predicted classes, token grid
    ActivationMap<float> aux_cam;  // auxiliary CAM over its own predicted classes
    Matrix<float> seg_logits;      // (H*W) x (classes + 1), image resolution
};

Inference infer(ToCoModel<float>& model, const TrainConfig& cfg, const Image& image);

/// Hard pseudo labels at image resolution from a token-grid CAM: bilinear
/// upsampling, then a single background threshold.
LabelMap cam_pseudo_labels(const ActivationMap<float>& cam, int height, int width, double threshold);

struct EvalReport {
    IoUReport cam;      // final-CAM pseudo labels
    IoUReport aux_cam;  // auxiliary-CAM pseudo labels
    IoUReport seg;      // decoder argmax
};

/// Requires evaluation masks on every sample. When dump_dir is non-empty the
/// final-CAM pseudo labels are also written there as <index>.png.
EvalReport evaluate(ToCoModel<float>& model, const TrainConfig& cfg, const std::vector<Sample>& samples,
                    const std::filesystem::path& dump_dir = {});

EvalReport evaluate(const std::filesystem::path& checkpoint_prefix, const std::vector<Sample>& samples);

nlohmann::json to_json(const EvalReport& r);

/// Per block: mean over images of the mean pairwise cosine between the patch
/// tokens each block outputs (the last one read before the final LayerNorm).
std::vector<double> blockwise_similarity(ToCoModel<float>& model, const std::vector<Sample>& samples,
                                         std::size_t sample_limit);

/// Grayscale n x n render of |cos(F_i, F_j)|, each pixel round-half-even(|cos| * 255).
Raster similarity_raster(const Matrix<float>& tokens);

/// Colour-mapped overlay: out = (1 - a m) * image + a m * jet(m), a = 0.5, with m
/// the bilinearly upsampled map. An all-zero map returns the image unchanged.
Raster overlay_raster(const Image& image, const Matrix<float>& map, int map_h, int map_w);

/// Writes cam_<k>.png per class, aux_cam_<k>.png, sim_final.png,
/// sim_aux.png and attn_block<b>.png (class-token attention) into out_dir.
/// Returns the written paths.
std::vector<std::filesystem::path> render_cam(const Sample& sample, ToCoModel<float>& model, const TrainConfig& cfg,
                                              const std::filesystem::path& out_dir);

struct GridPoint {
    std::string name;
    nlohmann::json overrides;  // merged over the base config
};

struct AblationResult {
    std::string name;
    bool ok = false;
    std::string error;
    double pseudo_miou = 0;
    double aux_miou = 0;
    double seg_miou = 0;
    double final_similarity = 0;
};

inline constexpr const char* kAblationSchema = "# toco-ablation v1";
std::string ablation_header();
std::string ablation_row(const AblationResult& r);

/// Appends one row to csv_path via write-to-temp-and-rename, creating the file
/// (schema comment plus header) when absent. Serialised across threads.
void append_row_atomic(const std::filesystem::path& csv_path, const std::string& row);

struct AblationOptions {
    int max_iters = 0;           // forwarded to TrainOptions (0 = full schedule)
    std::size_t similarity_samples = 32;
    int threads = 0;             // 0 = TOCO_THREADS or 1
};

/// One training run per grid point on train_data, evaluated on eval_data. A
/// failing run is recorded with its error and the grid continues.
std::vector<AblationResult> run_ablation(const TrainConfig& base, const std::vector<GridPoint>& grid,
                                         const std::vector<Sample>& train_data, const std::vector<Sample>& eval_data,
                                         const std::filesystem::path& csv_path, const AblationOptions& opts = {});

/// Thread cap from TOCO_THREADS (>= 1), else `fallback`.
int worker_threads(int fallback = 1);

}  // namespace toco
