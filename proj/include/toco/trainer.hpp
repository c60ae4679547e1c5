#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "toco/config.hpp"
#include "toco/data.hpp"
#include "toco/model.hpp"

namespace toco {

template <typename T>
struct TrainState {
    ToCoModel<T> model;
    AdamW<T> optimizer;
    int iteration = 0;
    double last_lr = 0;

    /// Model initialised from cfg.seed; optimiser moments empty.
    static TrainState init(const TrainConfig& cfg);
};

/// Randomness for one step, derived from (seed, iteration) only.
std::mt19937_64 step_rng(std::uint64_t seed, int iteration);

/// One optimisation step over a batch: global forward, auxiliary CAM and token
/// labels, every enabled loss, backward, AdamW at lr_schedule(iteration), then
/// the EMA update of the global projection head. Branches whose weight is zero
/// are skipped entirely. Losses in the result are batch means.
template <typename T>
LossBreakdown train_step(std::span<const TrainingView> batch, TrainState<T>& state, const TrainConfig& cfg);

/// Indices of the samples forming batch `iteration`: epochs are reshuffled
/// permutations seeded by (seed, epoch) and consumed contiguously.
std::vector<std::size_t> batch_indices(std::size_t dataset_size, int batch_size, int iteration, std::uint64_t seed);

std::string metrics_header();
std::string metrics_row(int iteration, double lr, const LossBreakdown& l);

struct TrainOptions {
    /// When non-empty: metrics.csv, config.json and checkpoints go here.
    std::filesystem::path out_dir;
    /// Overrides cfg.schedule.total_iters when positive (for short smoke runs).
    int max_iters = 0;
    std::function<void(int iteration, double lr, const LossBreakdown&)> on_step;
};

/// Full training run on `data` (only image-level labels are read).
TrainState<float> train(const TrainConfig& cfg, const std::vector<Sample>& data, const TrainOptions& opts = {});

}  // namespace toco
