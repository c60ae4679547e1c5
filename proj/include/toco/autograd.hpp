#pragma once

// Minimal tape-based reverse-mode differentiation over dense row-major
// matrices. Every op records a closure that propagates its output gradient to
// its inputs; Tape::backward replays them in reverse creation order.

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <vector>

#include <Eigen/Dense>

namespace toco {

template <typename T>
using Matrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename T>
using RowVector = Eigen::Matrix<T, 1, Eigen::Dynamic>;

/// A trainable tensor with its accumulated gradient.
template <typename T>
struct Param {
    Matrix<T> value;
    Matrix<T> grad;

    Param() = default;
    explicit Param(Matrix<T> v) : value(std::move(v)), grad(Matrix<T>::Zero(value.rows(), value.cols())) {}

    void zero_grad() { grad.setZero(value.rows(), value.cols()); }
};

template <typename T>
class Tape;

template <typename T>
struct Var {
    Tape<T>* tape = nullptr;
    std::size_t id = 0;

    const Matrix<T>& value() const;
    Eigen::Index rows() const { return value().rows(); }
    Eigen::Index cols() const { return value().cols(); }
    T scalar() const { return value()(0, 0); }
};

template <typename T>
class Tape {
public:
    struct Node {
        Matrix<T> value;
        Matrix<T> grad;
        bool requires_grad = false;
        Matrix<T>* sink = nullptr;
        std::function<void(Tape&)> backward;
    };

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    Var<T> constant(Matrix<T> value);
    /// Leaf whose gradient is kept on the tape (read it back with grad()).
    Var<T> variable(Matrix<T> value);
    /// Leaf whose gradient is added into param.grad by backward().
    Var<T> parameter(Param<T>& param);

    /// Seeds d(out)/d(out) = seed (out must be 1x1) and propagates.
    void backward(Var<T> out, T seed = T(1));

    const Matrix<T>& value(Var<T> v) const { return nodes_[v.id].value; }
    /// Gradient of a node after backward(); zeros if nothing reached it.
    Matrix<T> grad(Var<T> v) const;
    bool requires_grad(Var<T> v) const { return nodes_[v.id].requires_grad; }
    std::size_t size() const { return nodes_.size(); }

    // Op plumbing.
    Var<T> push(Matrix<T> value, bool requires_grad, std::function<void(Tape&)> backward);
    Node& node(std::size_t id) { return nodes_[id]; }
    const Matrix<T>& out_grad(std::size_t id) const { return nodes_[id].grad; }
    void accumulate(std::size_t id, const Matrix<T>& g);
    template <typename Expr>
    void accumulate_expr(std::size_t id, const Expr& g) {
        auto& n = nodes_[id];
        if (!n.requires_grad) return;
        if (n.grad.size() == 0) n.grad = Matrix<T>::Zero(n.value.rows(), n.value.cols());
        n.grad += g;
    }

private:
    std::vector<Node> nodes_;
};

template <typename T>
const Matrix<T>& Var<T>::value() const {
    return tape->value(*this);
}

// Linear algebra.
template <typename T> Var<T> matmul(Var<T> a, Var<T> b);
/// Fixed (non-differentiated) left factor: m * x.
template <typename T> Var<T> left_multiply(const Matrix<T>& m, Var<T> x);
template <typename T> Var<T> add(Var<T> a, Var<T> b);
template <typename T> Var<T> add_row(Var<T> x, Var<T> row);
template <typename T> Var<T> scale(Var<T> x, T s);
template <typename T> Var<T> transpose(Var<T> x);

// Pointwise.
template <typename T> Var<T> gelu(Var<T> x);
template <typename T> Var<T> relu(Var<T> x);

// Structural.
template <typename T> Var<T> slice_rows(Var<T> x, Eigen::Index begin, Eigen::Index count);
template <typename T> Var<T> concat_rows(std::span<const Var<T>> parts);
template <typename T> Var<T> stop_gradient(Var<T> x);

// Normalization.
template <typename T> Var<T> layer_norm(Var<T> x, Var<T> gamma, Var<T> beta, T eps = T(1e-6));
/// Row-wise x / max(||x||, eps).
template <typename T> Var<T> l2_normalize_rows(Var<T> x, T eps = T(1e-8));

/// Per-column max over rows (global max pooling); ties route to the first row.
template <typename T> Var<T> column_max(Var<T> x);

/// Multi-head softmax attention over packed [q | k | v] rows (n x 3d).
/// Writes per-head probabilities into probs (heads blocks of n x n) when non-null.
template <typename T>
Var<T> multihead_attention(Var<T> qkv, int heads, std::vector<Matrix<T>>* probs = nullptr);

/// Gathers k x k dilated neighborhoods of an (h*w) x c grid into (h*w) x (k*k*c)
/// rows with zero padding; rows are row-major grid positions.
template <typename T> Var<T> im2col(Var<T> x, int h, int w, int kernel, int dilation);

// Reductions.
template <typename T> Var<T> sum(Var<T> x);
/// sum_i w_i * s_i over 1x1 scalars.
template <typename T> Var<T> weighted_sum(std::span<const Var<T>> scalars, std::span<const T> weights);

}  // namespace toco
