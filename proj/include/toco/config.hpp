#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include <json.hpp>

#include "toco/backbone.hpp"
#include "toco/ctc.hpp"
#include "toco/ptc.hpp"
#include "toco/segmenter.hpp"

namespace toco {

struct TrainConfig {
    VitConfig vit;
    int classes = 3;

    double beta_low = 0.25;
    double beta_high = 0.7;
    double tau = 0.5;
    double rho = 0.9;
    double eps = 1e-8;
    LossWeights lambda;
    SimilarityMode ptc_mode = SimilarityMode::Abs;

    CropConfig crops;
    AugmentConfig augment;
    ParConfig par;
    int proj_hidden = 128;
    int proj_dim = 64;
    int decoder_width = 64;

    ScheduleConfig schedule;
    int batch_size = 8;
    double weight_decay = 0.01;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-8;

    int train_samples = 512;
    int eval_samples = 64;
    /// Single background threshold used when turning a CAM into hard evaluation labels.
    double eval_threshold = 0.475;
    int checkpoint_every = 0;  // 0 = only at the end

    std::uint64_t seed = 0;
    /// Seeds the synthetic train set; the held-out set uses data_seed + 1.
    std::uint64_t data_seed = 7;

    /// Throws std::invalid_argument on the first violated constraint.
    void validate() const;
};

/// Small laboratory setting: 64^2 images, depth-6 ViT, 3000 iterations.
TrainConfig desk_preset();
/// Reported full-scale setting: ViT-B/16 at 448^2 with 96^2 local crops.
TrainConfig paper_preset();
TrainConfig preset(const std::string& name);

void to_json(nlohmann::json& j, const VitConfig& c);
void from_json(const nlohmann::json& j, VitConfig& c);
void to_json(nlohmann::json& j, const TrainConfig& c);
/// Missing keys keep the values already in c, so a partial file overrides a preset.
void from_json(const nlohmann::json& j, TrainConfig& c);

TrainConfig load_config(const std::filesystem::path& path, TrainConfig base);
void save_config(const std::filesystem::path& path, const TrainConfig& cfg);

}  // namespace toco
