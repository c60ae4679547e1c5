#pragma once

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "toco/autograd.hpp"
#include "toco/image.hpp"

namespace toco {

struct VitConfig {
    int image_size = 64;
    int patch_size = 8;
    int depth = 6;
    int dim = 96;
    int heads = 4;
    int mlp_ratio = 4;
    int aux_block = 5;  // 1-based
    int channels = 3;

    int grid() const { return image_size / patch_size; }
    int tokens() const { return grid() * grid(); }
    /// Throws std::invalid_argument naming the violated constraint.
    void validate() const;

    bool operator==(const VitConfig&) const = default;
};

/// Raised when an activation turns NaN/Inf during a forward pass.
class NonFiniteError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

template <typename T>
struct TokenGrid {
    Matrix<T> tokens;  // n x d
    int h = 0;
    int w = 0;

    Eigen::Index size() const { return tokens.rows(); }
};

template <typename T>
struct BlockWeights {
    Param<T> ln1_gamma, ln1_beta;
    Param<T> qkv_w, qkv_b;
    Param<T> proj_w, proj_b;
    Param<T> ln2_gamma, ln2_beta;
    Param<T> fc1_w, fc1_b;
    Param<T> fc2_w, fc2_b;
};

template <typename T>
struct VitWeights {
    VitConfig config;
    Param<T> patch_w;  // (channels * p * p) x dim
    Param<T> patch_b;
    Param<T> cls_token;  // 1 x dim
    Param<T> pos_embed;  // (1 + tokens) x dim, row 0 belongs to the class token
    std::vector<BlockWeights<T>> blocks;
    Param<T> norm_gamma, norm_beta;

    /// Truncated-normal (sigma 0.02) projections and embeddings, zero biases, unit norm gains.
    static VitWeights init(const VitConfig& cfg, std::mt19937_64& rng);

    std::vector<std::pair<std::string, Param<T>*>> named_params();
};

/// Samples N(0, sigma^2) truncated to +-2 sigma.
template <typename T>
Matrix<T> trunc_normal(Eigen::Index rows, Eigen::Index cols, double sigma, std::mt19937_64& rng);

/// Rows are patches in raster order; columns are (channel, dy, dx) flattened.
template <typename T>
Matrix<T> extract_patches(const Image& image, int patch_size);

/// Linear patch embedding; errors when the image is not tiled by the patch size.
template <typename T>
TokenGrid<T> patchify(const Image& image, const VitWeights<T>& weights);

/// Bilinear resampling weights (dst_h*dst_w) x (src_h*src_w), half-pixel centres, edge clamped.
template <typename T>
Matrix<T> bilinear_matrix(int src_h, int src_w, int dst_h, int dst_w);

/// Resamples an n0 x d patch position table laid out on src_grid to target_grid.
template <typename T>
Matrix<T> interpolate_pos_embed(const Matrix<T>& pos, std::pair<int, int> src_grid, std::pair<int, int> target_grid);

/// Everything one forward pass records, as plain values.
template <typename T>
struct ForwardTrace {
    std::vector<TokenGrid<T>> blocks;             // patch tokens after each block
    std::vector<RowVector<T>> class_tokens;       // class token after each block
    std::vector<std::vector<Matrix<T>>> attention;  // [block][head] (n+1) x (n+1)
    Matrix<T> final_pre_norm;                     // last block's patch tokens before the final LayerNorm

    int depth() const { return int(blocks.size()); }
};

/// Parameters bound onto a tape once so several forwards can share them.
template <typename T>
struct BoundVit {
    struct Block {
        Var<T> ln1_gamma, ln1_beta, qkv_w, qkv_b, proj_w, proj_b;
        Var<T> ln2_gamma, ln2_beta, fc1_w, fc1_b, fc2_w, fc2_b;
    };
    const VitWeights<T>* weights = nullptr;
    Var<T> patch_w, patch_b, cls_token, pos_embed;
    std::vector<Block> blocks;
    Var<T> norm_gamma, norm_beta;
};

/// trainable = false binds every weight as a constant.
template <typename T>
BoundVit<T> bind(Tape<T>& tape, VitWeights<T>& weights, bool trainable = true);

/// Differentiable handles produced by one forward pass. The entry for the last
/// block is taken after the final LayerNorm, i.e. the final patch/class tokens.
template <typename T>
struct VitGraph {
    int h = 0;
    int w = 0;
    std::vector<Var<T>> patch_tokens;  // per block, n x d
    std::vector<Var<T>> class_tokens;  // per block, 1 x d
    std::vector<std::vector<Matrix<T>>> attention;
    Matrix<T> final_pre_norm;  // value of the last block output before the final LayerNorm

    Var<T> final_tokens() const { return patch_tokens.back(); }
    Var<T> final_class_token() const { return class_tokens.back(); }
};

/// Forward over precomputed patches (n x channels*p*p). Any grid tiling the
/// image works; position embeddings are resampled when it differs from the
/// configured one.
template <typename T>
VitGraph<T> forward_patches(const BoundVit<T>& vit, Var<T> patches, int h, int w);

template <typename T>
VitGraph<T> forward(const BoundVit<T>& vit, const Image& image);

/// Value-only forward pass.
template <typename T>
ForwardTrace<T> forward(const Image& image, VitWeights<T>& weights);

template <typename T>
ForwardTrace<T> to_trace(const VitGraph<T>& graph);

/// Class-token query attention over patch keys, averaged over heads, as h x w.
template <typename T>
Matrix<T> class_attention_map(const ForwardTrace<T>& trace, int block);

}  // namespace toco
