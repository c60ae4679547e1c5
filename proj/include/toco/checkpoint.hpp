#pragma once

#include <filesystem>
#include <stdexcept>

#include "toco/config.hpp"
#include "toco/model.hpp"

namespace toco {

class CheckpointError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Writes <prefix>.bin (little-endian float32 tensors back to back) and
/// <prefix>.json (format tag, config, and name/shape/offset of every tensor).
void save_checkpoint(const std::filesystem::path& prefix, ToCoModel<float>& model, const TrainConfig& cfg,
                     int iteration);

struct LoadedCheckpoint {
    TrainConfig config;
    ToCoModel<float> model;
    int iteration = 0;
};

/// Rebuilds the model from the manifest's config and fills every tensor.
/// Missing files, unknown or missing tensors, shape or size mismatches raise CheckpointError.
LoadedCheckpoint load_checkpoint(const std::filesystem::path& prefix);

}  // namespace toco
