#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "toco/checkpoint.hpp"
#include "toco/diagnostics.hpp"
#include "toco/trainer.hpp"

using namespace toco;

namespace {

struct Common {
    std::string preset = "desk";
    std::string config_path;
    std::optional<std::uint64_t> seed;
    std::string out = "out";
};

void add_common(CLI::App* app, Common& c) {
    app->add_option("--preset", c.preset, "Base hyper-parameters")->check(CLI::IsMember({"desk", "paper"}));
    app->add_option("--config", c.config_path, "JSON file overriding preset keys")->check(CLI::ExistingFile);
    app->add_option("--seed", c.seed, "Training seed");
    app->add_option("--out", c.out, "Output directory");
}

TrainConfig resolve(const Common& c) {
    TrainConfig cfg = preset(c.preset);
    if (!c.config_path.empty()) cfg = load_config(c.config_path, cfg);
    if (c.seed) cfg.seed = *c.seed;
    cfg.validate();
    return cfg;
}

ShapesConfig shapes_for(const TrainConfig& cfg) {
    ShapesConfig s;
    s.classes = cfg.classes;
    s.size = cfg.vit.image_size;
    return s;
}

std::vector<Sample> training_set(const TrainConfig& cfg, const std::string& dir) {
    if (!dir.empty()) return load_dir_dataset(dir, cfg.classes);
    return gen_shapes_dataset(cfg.train_samples, shapes_for(cfg), cfg.data_seed);
}

std::vector<Sample> eval_set(const TrainConfig& cfg, const std::string& dir) {
    if (!dir.empty()) return load_dir_dataset(dir, cfg.classes);
    return gen_shapes_dataset(cfg.eval_samples, shapes_for(cfg), cfg.data_seed + 1);
}

void write_text(const std::filesystem::path& path, const std::string& text) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write " + path.string());
    out << text;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Token-contrast weakly-supervised segmentation laboratory"};
    app.require_subcommand(1);

    Common train_c, eval_c, diag_c, ablate_c, gen_c;
    std::string train_data, eval_data, diag_data, ablate_train, ablate_eval;
    int train_iters = 0, ablate_iters = 0, log_every = 100;
    std::string eval_ckpt, dump_dir, diag_ckpt, grid_path;
    std::size_t diag_samples = 32, diag_renders = 4;
    int gen_n = 64, gen_classes = 3, gen_size = 64;

    auto* train_cmd = app.add_subcommand("train", "Train and write metrics.csv plus checkpoints");
    add_common(train_cmd, train_c);
    train_cmd->add_option("--data", train_data, "Directory dataset (default: synthetic shapes)");
    train_cmd->add_option("--iters", train_iters, "Stop early after this many iterations");
    train_cmd->add_option("--log-every", log_every, "Progress print interval");

    auto* eval_cmd = app.add_subcommand("eval", "mIoU of CAM, auxiliary CAM and decoder outputs");
    add_common(eval_cmd, eval_c);
    eval_cmd->add_option("--checkpoint", eval_ckpt, "Checkpoint prefix (without .json/.bin)")->required();
    eval_cmd->add_option("--data", eval_data, "Directory dataset with masks (default: held-out shapes)");
    eval_cmd->add_option("--dump", dump_dir, "Also write CAM pseudo-label PNGs here");

    auto* diag_cmd = app.add_subcommand("diagnose", "Blockwise similarity curve and CAM/similarity/attention renders");
    add_common(diag_cmd, diag_c);
    diag_cmd->add_option("--checkpoint", diag_ckpt, "Checkpoint prefix")->required();
    diag_cmd->add_option("--data", diag_data, "Directory dataset (default: held-out shapes)");
    diag_cmd->add_option("--samples", diag_samples, "Images averaged for the similarity curve");
    diag_cmd->add_option("--renders", diag_renders, "Images to render");

    auto* ablate_cmd = app.add_subcommand("ablate", "Run a grid of training configurations");
    add_common(ablate_cmd, ablate_c);
    ablate_cmd->add_option("--grid", grid_path, "JSON: {\"points\": [{\"name\": ..., \"overrides\": {...}}]}")
        ->required()
        ->check(CLI::ExistingFile);
    ablate_cmd->add_option("--iters", ablate_iters, "Stop every run early after this many iterations");
    ablate_cmd->add_option("--train-data", ablate_train, "Directory dataset for training");
    ablate_cmd->add_option("--eval-data", ablate_eval, "Directory dataset for evaluation");

    auto* gen_cmd = app.add_subcommand("gen-data", "Export a synthetic shapes dataset");
    add_common(gen_cmd, gen_c);
    gen_cmd->add_option("--n", gen_n, "Number of samples")->check(CLI::NonNegativeNumber);
    gen_cmd->add_option("--classes", gen_classes, "Shape classes (2-6)");
    gen_cmd->add_option("--size", gen_size, "Image side in pixels");

    CLI11_PARSE(app, argc, argv);

    try {
        if (*train_cmd) {
            TrainConfig cfg = resolve(train_c);
            const auto data = training_set(cfg, train_data);
            TrainOptions opts;
            opts.out_dir = train_c.out;
            opts.max_iters = train_iters;
            opts.on_step = [&](int it, double lr, const LossBreakdown& l) {
                if (log_every > 0 && it % log_every == 0) std::printf("%s\n", metrics_row(it, lr, l).c_str());
            };
            train(cfg, data, opts);
            std::printf("wrote %s\n", (std::filesystem::path(train_c.out) / "final.json").c_str());
        } else if (*eval_cmd) {
            LoadedCheckpoint ck = load_checkpoint(eval_ckpt);
            const auto data = eval_set(ck.config, eval_data);
            const EvalReport rep = evaluate(ck.model, ck.config, data, dump_dir);
            const std::string text = to_json(rep).dump(2) + "\n";
            std::filesystem::create_directories(eval_c.out);
            write_text(std::filesystem::path(eval_c.out) / "eval.json", text);
            std::cout << text;
        } else if (*diag_cmd) {
            LoadedCheckpoint ck = load_checkpoint(diag_ckpt);
            const auto data = eval_set(ck.config, diag_data);
            const std::filesystem::path out = diag_c.out;
            std::filesystem::create_directories(out);
            const auto sim = blockwise_similarity(ck.model, data, diag_samples);
            std::string csv = "block,mean_pairwise_cosine\n";
            for (std::size_t b = 0; b < sim.size(); ++b) {
                char row[64];
                std::snprintf(row, sizeof row, "%zu,%.6f\n", b + 1, sim[b]);
                csv += row;
            }
            write_text(out / "similarity.csv", csv);
            std::cout << csv;
            for (std::size_t i = 0; i < std::min(diag_renders, data.size()); ++i) {
                char name[32];
                std::snprintf(name, sizeof name, "render_%03zu", i);
                render_cam(data[i], ck.model, ck.config, out / name);
            }
        } else if (*ablate_cmd) {
            TrainConfig cfg = resolve(ablate_c);
            std::ifstream in(grid_path);
            const auto grid_json = nlohmann::json::parse(in);
            std::vector<GridPoint> grid;
            for (const auto& p : grid_json.at("points")) {
                grid.push_back({p.at("name").get<std::string>(), p.value("overrides", nlohmann::json::object())});
            }
            const auto train_data = training_set(cfg, ablate_train);
            const auto eval_data = eval_set(cfg, ablate_eval);
            AblationOptions opts;
            opts.max_iters = ablate_iters;
            const auto csv = std::filesystem::path(ablate_c.out) / "ablation.csv";
            const auto results = run_ablation(cfg, grid, train_data, eval_data, csv, opts);
            for (const auto& r : results) std::printf("%s\n", ablation_row(r).c_str());
        } else if (*gen_cmd) {
            ShapesConfig s;
            s.classes = gen_classes;
            s.size = gen_size;
            const std::uint64_t seed = gen_c.seed.value_or(0);
            export_dataset(gen_shapes_dataset(gen_n, s, seed), gen_c.out);
            std::printf("wrote %d samples to %s\n", gen_n, gen_c.out.c_str());
        }
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 0;
}
