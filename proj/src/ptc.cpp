#include "toco/ptc.hpp"

#include <cmath>
#include <memory>
#include <stdexcept>
#include <string>

namespace toco {

SimilarityMode parse_similarity_mode(std::string_view name) {
    if (name == "raw") return SimilarityMode::Raw;
    if (name == "relu") return SimilarityMode::Relu;
    if (name == "abs") return SimilarityMode::Abs;
    throw std::invalid_argument("unknown similarity mode '" + std::string(name) + "' (expected raw, relu or abs)");
}

std::string_view to_string(SimilarityMode mode) {
    switch (mode) {
        case SimilarityMode::Raw: return "raw";
        case SimilarityMode::Relu: return "relu";
        case SimilarityMode::Abs: return "abs";
    }
    return "abs";
}

PairRelations pairwise_relations(const LabelMap& labels) {
    PairRelations rel;
    rel.n = int(labels.size());
    const std::size_t n = labels.size();
    rel.positive.assign(n * n, 0);
    rel.negative.assign(n * n, 0);
    for (std::size_t i = 0; i < n; ++i) {
        const auto li = labels.labels[i];
        if (li == LabelMap::kIgnore) continue;
        for (std::size_t j = i + 1; j < n; ++j) {
            const auto lj = labels.labels[j];
            if (lj == LabelMap::kIgnore) continue;
            auto& mask = li == lj ? rel.positive : rel.negative;
            mask[i * n + j] = mask[j * n + i] = 1;
            ++(li == lj ? rel.n_pos : rel.n_neg);
        }
    }
    return rel;
}

namespace {

template <typename T>
T similarity(T c, SimilarityMode mode) {
    switch (mode) {
        case SimilarityMode::Raw: return c;
        case SimilarityMode::Relu: return std::max(c, T(0));
        case SimilarityMode::Abs: return std::abs(c);
    }
    return c;
}

template <typename T>
T similarity_slope(T c, SimilarityMode mode) {
    switch (mode) {
        case SimilarityMode::Raw: return T(1);
        case SimilarityMode::Relu: return c > T(0) ? T(1) : T(0);
        case SimilarityMode::Abs: return c > T(0) ? T(1) : (c < T(0) ? T(-1) : T(0));
    }
    return T(1);
}

template <typename T>
Matrix<T> unit_rows(const Matrix<T>& x, T eps, Eigen::Matrix<T, Eigen::Dynamic, 1>* norms = nullptr) {
    Matrix<T> u(x.rows(), x.cols());
    if (norms) norms->resize(x.rows());
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
        const T n = x.row(i).norm();
        if (norms) (*norms)(i) = n;
        u.row(i) = x.row(i) / std::max(n, eps);
    }
    return u;
}

void check_size(const PairRelations& rel, Eigen::Index rows) {
    if (rel.n != rows) {
        throw std::invalid_argument("ptc_loss: relations cover " + std::to_string(rel.n) + " tokens, got " +
                                    std::to_string(rows));
    }
}

}  // namespace

template <typename T>
Matrix<T> cosine_matrix(const Matrix<T>& tokens, T eps) {
    Matrix<T> u = unit_rows(tokens, eps);
    Matrix<T> c;
    c.noalias() = u * u.transpose();
    return c;
}

template <typename T>
T mean_pairwise_cosine(const Matrix<T>& tokens) {
    const Eigen::Index n = tokens.rows();
    if (n < 2) return T(1);
    Matrix<T> c = cosine_matrix<T>(tokens);
    T total = 0;
    for (Eigen::Index i = 0; i < n; ++i) {
        for (Eigen::Index j = i + 1; j < n; ++j) total += c(i, j);
    }
    return total / T(n * (n - 1) / 2);
}

template <typename T>
T ptc_loss(const Matrix<T>& tokens, const PairRelations& rel, SimilarityMode mode, T eps) {
    check_size(rel, tokens.rows());
    if (rel.n_pos == 0 && rel.n_neg == 0) return T(0);
    Matrix<T> c = cosine_matrix<T>(tokens, eps);
    T pos = 0, neg = 0;
    for (int i = 0; i < rel.n; ++i) {
        for (int j = i + 1; j < rel.n; ++j) {
            if (rel.is_positive(i, j)) pos += T(1) - similarity(c(i, j), mode);
            if (rel.is_negative(i, j)) neg += similarity(c(i, j), mode);
        }
    }
    T loss = 0;
    if (rel.n_pos > 0) loss += pos / T(rel.n_pos);
    if (rel.n_neg > 0) loss += neg / T(rel.n_neg);
    return loss;
}

template <typename T>
Var<T> ptc_loss(Var<T> tokens, const PairRelations& rel, SimilarityMode mode, T eps) {
    const auto& X = tokens.value();
    check_size(rel, X.rows());
    Tape<T>& tape = *tokens.tape;
    Matrix<T> out(1, 1);
    out(0, 0) = ptc_loss<T>(X, rel, mode, eps);
    if (rel.n_pos == 0 && rel.n_neg == 0) return tape.constant(std::move(out));

    auto norms = std::make_shared<Eigen::Matrix<T, Eigen::Dynamic, 1>>();
    auto u = std::make_shared<Matrix<T>>(unit_rows(X, eps, norms.get()));
    // dL/dcos for each unordered pair, stored in the upper triangle.
    auto dcos = std::make_shared<Matrix<T>>(Matrix<T>::Zero(X.rows(), X.rows()));
    {
        Matrix<T> c;
        c.noalias() = (*u) * u->transpose();
        const T wp = rel.n_pos ? T(1) / T(rel.n_pos) : T(0);
        const T wn = rel.n_neg ? T(1) / T(rel.n_neg) : T(0);
        for (int i = 0; i < rel.n; ++i) {
            for (int j = i + 1; j < rel.n; ++j) {
                if (rel.is_positive(i, j)) (*dcos)(i, j) = -wp * similarity_slope(c(i, j), mode);
                if (rel.is_negative(i, j)) (*dcos)(i, j) = wn * similarity_slope(c(i, j), mode);
            }
        }
    }
    std::size_t ix = tokens.id, self = tape.size();
    return tape.push(std::move(out), tape.requires_grad(tokens), [ix, self, u, norms, dcos, eps](Tape<T>& t) {
        const T g = t.out_grad(self)(0, 0);
        Matrix<T> sym = *dcos + dcos->transpose();
        Matrix<T> du;
        du.noalias() = sym * (*u);
        du *= g;
        Matrix<T> dx(du.rows(), du.cols());
        for (Eigen::Index i = 0; i < du.rows(); ++i) {
            const T n = (*norms)(i);
            if (n > eps) {
                dx.row(i) = (du.row(i) - u->row(i) * u->row(i).dot(du.row(i))) / n;
            } else {
                dx.row(i) = du.row(i) / eps;
            }
        }
        t.accumulate(ix, dx);
    });
}

#define TOCO_INSTANTIATE_PTC(T)                                                           \
    template T ptc_loss(const Matrix<T>&, const PairRelations&, SimilarityMode, T);       \
    template Var<T> ptc_loss(Var<T>, const PairRelations&, SimilarityMode, T);            \
    template Matrix<T> cosine_matrix(const Matrix<T>&, T);                                \
    template T mean_pairwise_cosine(const Matrix<T>&);

TOCO_INSTANTIATE_PTC(float)
TOCO_INSTANTIATE_PTC(double)

}  // namespace toco
