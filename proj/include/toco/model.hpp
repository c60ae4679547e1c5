#pragma once

#include <random>
#include <string>
#include <utility>
#include <vector>

#include "toco/backbone.hpp"
#include "toco/cam.hpp"
#include "toco/config.hpp"
#include "toco/ctc.hpp"
#include "toco/segmenter.hpp"

namespace toco {

/// Everything that gets trained or checkpointed.
template <typename T>
struct ToCoModel {
    VitWeights<T> vit;
    ClassifierHead<T> head;      // on the final patch tokens
    ClassifierHead<T> aux_head;  // on the auxiliary block's tokens
    Decoder<T> decoder;
    ProjectionHead<T> local_proj;
    ProjectionHead<T> global_proj;  // EMA copy of local_proj, never optimised

    /// The global head starts as an exact copy of the local one.
    static ToCoModel init(const TrainConfig& cfg, std::mt19937_64& rng);

    std::vector<std::pair<std::string, Param<T>*>> named_params();
    /// Parameters the optimiser updates (everything but the global head).
    std::vector<Param<T>*> trainable();
};

struct AdamWConfig {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.01;
};

/// Decoupled weight decay: p <- p (1 - lr wd) - lr m_hat / (sqrt(v_hat) + eps).
template <typename T>
class AdamW {
public:
    explicit AdamW(AdamWConfig cfg = {}) : cfg_(cfg) {}

    void step(const std::vector<Param<T>*>& params, double lr);
    long steps() const { return t_; }

private:
    AdamWConfig cfg_;
    long t_ = 0;
    std::vector<Matrix<T>> m_, v_;
};

}  // namespace toco
