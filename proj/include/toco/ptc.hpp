#pragma once

#include <cstdint>
#include <string_view>
#include <vector>

#include "toco/autograd.hpp"
#include "toco/image.hpp"

namespace toco {

/// Reliable token-pair relations. Masks are n x n, symmetric, zero diagonal;
/// counts are over unordered pairs.
struct PairRelations {
    int n = 0;
    std::vector<std::uint8_t> positive;
    std::vector<std::uint8_t> negative;
    std::size_t n_pos = 0;
    std::size_t n_neg = 0;

    bool is_positive(int i, int j) const { return positive[std::size_t(i) * n + j] != 0; }
    bool is_negative(int i, int j) const { return negative[std::size_t(i) * n + j] != 0; }
};

/// How cosine similarity enters the negative-pair term (and the positive one).
enum class SimilarityMode { Raw, Relu, Abs };

SimilarityMode parse_similarity_mode(std::string_view name);
std::string_view to_string(SimilarityMode mode);

/// Pairs of reliable (foreground or background) tokens: positive when the
/// labels match, negative otherwise. Ignore-labelled tokens take no part.
PairRelations pairwise_relations(const LabelMap& labels);

/// Patch-token contrast: mean (1 - sim) over positive pairs plus mean sim over
/// negative pairs; an empty pair set contributes zero.
template <typename T>
T ptc_loss(const Matrix<T>& tokens, const PairRelations& rel, SimilarityMode mode, T eps = T(1e-8));

template <typename T>
Var<T> ptc_loss(Var<T> tokens, const PairRelations& rel, SimilarityMode mode, T eps = T(1e-8));

/// Pairwise cosine similarities of rows, with eps-guarded norms.
template <typename T>
Matrix<T> cosine_matrix(const Matrix<T>& tokens, T eps = T(1e-8));

/// Mean cosine over unordered pairs i < j (1 for a single token).
template <typename T>
T mean_pairwise_cosine(const Matrix<T>& tokens);

}  // namespace toco
