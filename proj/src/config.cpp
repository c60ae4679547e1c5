#include "toco/config.hpp"

#include <fstream>
#include <stdexcept>

#include "toco/cam.hpp"
#include "toco/png_io.hpp"

namespace toco {

void TrainConfig::validate() const {
    vit.validate();
    check_thresholds(beta_low, beta_high);
    auto fail = [](const std::string& what) { throw std::invalid_argument("TrainConfig: " + what); };
    if (classes < 1) fail("classes must be >= 1");
    if (lambda.ptc < 0 || lambda.ctc < 0 || lambda.seg < 0) fail("loss weights must be non-negative");
    if (!(tau > 0)) fail("tau must be positive");
    if (rho < 0 || rho > 1) fail("rho must lie in [0, 1]");
    if (schedule.warmup_iters >= schedule.total_iters) fail("warmup_iters must be below total_iters");
    if (batch_size < 1) fail("batch_size must be >= 1");
    if (crops.n_crops < 1) fail("n_crops must be >= 1");
    if (crops.local_size > vit.image_size || crops.local_size % vit.patch_size != 0) {
        fail("local crop size must be a patch multiple no larger than the image");
    }
}

TrainConfig desk_preset() {
    TrainConfig c;
    c.vit = VitConfig{};
    c.schedule.lr_max = 1e-3;
    c.schedule.lr_floor = 1e-6;
    c.schedule.warmup_iters = 100;
    c.schedule.total_iters = 3000;
    c.schedule.power = 0.9;
    c.batch_size = 8;
    return c;
}

TrainConfig paper_preset() {
    TrainConfig c;
    c.vit = VitConfig{448, 16, 12, 768, 12, 4, 10, 3};
    c.classes = 20;
    c.beta_low = 0.25;
    c.beta_high = 0.7;
    c.tau = 0.5;
    c.rho = 0.9;
    c.lambda = LossWeights{0.2, 0.5, 0.1};
    c.ptc_mode = SimilarityMode::Abs;
    c.crops.local_size = 96;
    c.schedule.lr_max = 6e-5;
    c.schedule.lr_floor = 1e-6;
    c.schedule.warmup_iters = 1500;
    c.schedule.total_iters = 20000;
    c.schedule.power = 0.9;
    c.batch_size = 4;
    c.proj_hidden = 2048;
    c.proj_dim = 256;
    c.decoder_width = 256;
    return c;
}

TrainConfig preset(const std::string& name) {
    if (name == "desk") return desk_preset();
    if (name == "paper") return paper_preset();
    throw std::invalid_argument("unknown preset '" + name + "' (expected desk or paper)");
}

void to_json(nlohmann::json& j, const VitConfig& c) {
    j = {{"image_size", c.image_size}, {"patch_size", c.patch_size}, {"depth", c.depth},       {"dim", c.dim},
         {"heads", c.heads},           {"mlp_ratio", c.mlp_ratio},   {"aux_block", c.aux_block}, {"channels", c.channels}};
}

void from_json(const nlohmann::json& j, VitConfig& c) {
    c.image_size = j.value("image_size", c.image_size);
    c.patch_size = j.value("patch_size", c.patch_size);
    c.depth = j.value("depth", c.depth);
    c.dim = j.value("dim", c.dim);
    c.heads = j.value("heads", c.heads);
    c.mlp_ratio = j.value("mlp_ratio", c.mlp_ratio);
    c.aux_block = j.value("aux_block", c.aux_block);
    c.channels = j.value("channels", c.channels);
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
    j = nlohmann::json{
        {"vit", c.vit},
        {"classes", c.classes},
        {"beta_low", c.beta_low},
        {"beta_high", c.beta_high},
        {"tau", c.tau},
        {"rho", c.rho},
        {"eps", c.eps},
        {"lambda_ptc", c.lambda.ptc},
        {"lambda_ctc", c.lambda.ctc},
        {"lambda_seg", c.lambda.seg},
        {"ptc_mode", std::string(to_string(c.ptc_mode))},
        {"n_crops", c.crops.n_crops},
        {"local_size", c.crops.local_size},
        {"crop_bg_fraction", c.crops.bg_fraction},
        {"crop_unc_fraction", c.crops.unc_fraction},
        {"crop_max_retries", c.crops.max_retries},
        {"augment", c.augment.enabled},
        {"flip_prob", c.augment.flip_prob},
        {"brightness", c.augment.brightness},
        {"par_iters", c.par.iters},
        {"par_sigma_rgb", c.par.sigma_rgb},
        {"par_dilations", c.par.dilations},
        {"proj_hidden", c.proj_hidden},
        {"proj_dim", c.proj_dim},
        {"decoder_width", c.decoder_width},
        {"lr_max", c.schedule.lr_max},
        {"lr_floor", c.schedule.lr_floor},
        {"warmup_iters", c.schedule.warmup_iters},
        {"total_iters", c.schedule.total_iters},
        {"poly_power", c.schedule.power},
        {"batch_size", c.batch_size},
        {"weight_decay", c.weight_decay},
        {"adam_beta1", c.adam_beta1},
        {"adam_beta2", c.adam_beta2},
        {"adam_eps", c.adam_eps},
        {"train_samples", c.train_samples},
        {"eval_samples", c.eval_samples},
        {"eval_threshold", c.eval_threshold},
        {"checkpoint_every", c.checkpoint_every},
        {"seed", c.seed},
        {"data_seed", c.data_seed},
    };
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
    if (j.contains("vit")) from_json(j.at("vit"), c.vit);
    c.classes = j.value("classes", c.classes);
    c.beta_low = j.value("beta_low", c.beta_low);
    c.beta_high = j.value("beta_high", c.beta_high);
    c.tau = j.value("tau", c.tau);
    c.rho = j.value("rho", c.rho);
    c.eps = j.value("eps", c.eps);
    c.lambda.ptc = j.value("lambda_ptc", c.lambda.ptc);
    c.lambda.ctc = j.value("lambda_ctc", c.lambda.ctc);
    c.lambda.seg = j.value("lambda_seg", c.lambda.seg);
    if (j.contains("ptc_mode")) c.ptc_mode = parse_similarity_mode(j.at("ptc_mode").get<std::string>());
    c.crops.n_crops = j.value("n_crops", c.crops.n_crops);
    c.crops.local_size = j.value("local_size", c.crops.local_size);
    c.crops.bg_fraction = j.value("crop_bg_fraction", c.crops.bg_fraction);
    c.crops.unc_fraction = j.value("crop_unc_fraction", c.crops.unc_fraction);
    c.crops.max_retries = j.value("crop_max_retries", c.crops.max_retries);
    c.augment.enabled = j.value("augment", c.augment.enabled);
    c.augment.flip_prob = j.value("flip_prob", c.augment.flip_prob);
    c.augment.brightness = j.value("brightness", c.augment.brightness);
    c.par.iters = j.value("par_iters", c.par.iters);
    c.par.sigma_rgb = j.value("par_sigma_rgb", c.par.sigma_rgb);
    c.par.dilations = j.value("par_dilations", c.par.dilations);
    c.proj_hidden = j.value("proj_hidden", c.proj_hidden);
    c.proj_dim = j.value("proj_dim", c.proj_dim);
    c.decoder_width = j.value("decoder_width", c.decoder_width);
    c.schedule.lr_max = j.value("lr_max", c.schedule.lr_max);
    c.schedule.lr_floor = j.value("lr_floor", c.schedule.lr_floor);
    c.schedule.warmup_iters = j.value("warmup_iters", c.schedule.warmup_iters);
    c.schedule.total_iters = j.value("total_iters", c.schedule.total_iters);
    c.schedule.power = j.value("poly_power", c.schedule.power);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.weight_decay = j.value("weight_decay", c.weight_decay);
    c.adam_beta1 = j.value("adam_beta1", c.adam_beta1);
    c.adam_beta2 = j.value("adam_beta2", c.adam_beta2);
    c.adam_eps = j.value("adam_eps", c.adam_eps);
    c.train_samples = j.value("train_samples", c.train_samples);
    c.eval_samples = j.value("eval_samples", c.eval_samples);
    c.eval_threshold = j.value("eval_threshold", c.eval_threshold);
    c.checkpoint_every = j.value("checkpoint_every", c.checkpoint_every);
    c.seed = j.value("seed", c.seed);
    c.data_seed = j.value("data_seed", c.data_seed);
}

TrainConfig load_config(const std::filesystem::path& path, TrainConfig base) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config " + path.string());
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw IoError("malformed config " + path.string() + ": " + e.what());
    }
    from_json(j, base);
    return base;
}

void save_config(const std::filesystem::path& path, const TrainConfig& cfg) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write " + path.string());
    out << nlohmann::json(cfg).dump(2) << '\n';
}

}  // namespace toco
