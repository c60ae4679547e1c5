#include "toco/autograd.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>
#include <string>

namespace toco {

template <typename T>
Var<T> Tape<T>::push(Matrix<T> value, bool requires_grad, std::function<void(Tape&)> backward) {
    Node n;
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    if (requires_grad) n.backward = std::move(backward);
    nodes_.push_back(std::move(n));
    return Var<T>{this, nodes_.size() - 1};
}

template <typename T>
Var<T> Tape<T>::constant(Matrix<T> value) {
    return push(std::move(value), false, nullptr);
}

template <typename T>
Var<T> Tape<T>::variable(Matrix<T> value) {
    return push(std::move(value), true, [](Tape&) {});
}

template <typename T>
Var<T> Tape<T>::parameter(Param<T>& param) {
    auto v = push(param.value, true, [](Tape&) {});
    nodes_[v.id].sink = &param.grad;
    return v;
}

template <typename T>
void Tape<T>::accumulate(std::size_t id, const Matrix<T>& g) {
    accumulate_expr(id, g);
}

template <typename T>
Matrix<T> Tape<T>::grad(Var<T> v) const {
    const auto& n = nodes_[v.id];
    if (n.grad.size() == 0) return Matrix<T>::Zero(n.value.rows(), n.value.cols());
    return n.grad;
}

template <typename T>
void Tape<T>::backward(Var<T> out, T seed) {
    auto& root = nodes_[out.id];
    if (root.value.size() != 1) throw std::invalid_argument("backward: output must be a scalar");
    if (!root.requires_grad) return;
    root.grad = Matrix<T>::Constant(1, 1, seed);
    for (std::size_t i = out.id + 1; i-- > 0;) {
        auto& n = nodes_[i];
        if (!n.requires_grad || n.grad.size() == 0) continue;
        if (n.backward) n.backward(*this);
        if (n.sink) {
            if (n.sink->size() == 0) *n.sink = Matrix<T>::Zero(n.value.rows(), n.value.cols());
            *n.sink += n.grad;
        }
    }
}

namespace {

template <typename T>
void require_same_tape(Var<T> a, Var<T> b, const char* op) {
    if (a.tape != b.tape) throw std::invalid_argument(std::string(op) + ": operands live on different tapes");
}

template <typename T>
void require_shape(bool ok, const char* op, Eigen::Index r0, Eigen::Index c0, Eigen::Index r1, Eigen::Index c1) {
    if (!ok) {
        throw std::invalid_argument(std::string(op) + ": shape mismatch " + std::to_string(r0) + "x" +
                                    std::to_string(c0) + " vs " + std::to_string(r1) + "x" + std::to_string(c1));
    }
}

}  // namespace

template <typename T>
Var<T> matmul(Var<T> a, Var<T> b) {
    require_same_tape(a, b, "matmul");
    const auto& A = a.value();
    const auto& B = b.value();
    require_shape<T>(A.cols() == B.rows(), "matmul", A.rows(), A.cols(), B.rows(), B.cols());
    Tape<T>& tape = *a.tape;
    Matrix<T> out;
    out.noalias() = A * B;
    const bool rg = tape.requires_grad(a) || tape.requires_grad(b);
    std::size_t ia = a.id, ib = b.id;
    std::size_t self = tape.size();
    return tape.push(std::move(out), rg, [ia, ib, self](Tape<T>& t) {
        const Matrix<T>& g = t.out_grad(self);
        if (t.node(ia).requires_grad) {
            Matrix<T> ga;
            ga.noalias() = g * t.node(ib).value.transpose();
            t.accumulate(ia, ga);
        }
        if (t.node(ib).requires_grad) {
            Matrix<T> gb;
            gb.noalias() = t.node(ia).value.transpose() * g;
            t.accumulate(ib, gb);
        }
    });
}

template <typename T>
Var<T> left_multiply(const Matrix<T>& m, Var<T> x) {
    const auto& X = x.value();
    require_shape<T>(m.cols() == X.rows(), "left_multiply", m.rows(), m.cols(), X.rows(), X.cols());
    Tape<T>& tape = *x.tape;
    Matrix<T> out;
    out.noalias() = m * X;
    std::size_t ix = x.id, self = tape.size();
    auto fixed = std::make_shared<Matrix<T>>(m);
    return tape.push(std::move(out), tape.requires_grad(x), [ix, self, fixed](Tape<T>& t) {
        Matrix<T> gx;
        gx.noalias() = fixed->transpose() * t.out_grad(self);
        t.accumulate(ix, gx);
    });
}

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
    require_same_tape(a, b, "add");
    const auto& A = a.value();
    const auto& B = b.value();
    require_shape<T>(A.rows() == B.rows() && A.cols() == B.cols(), "add", A.rows(), A.cols(), B.rows(), B.cols());
    Tape<T>& tape = *a.tape;
    std::size_t ia = a.id, ib = b.id, self = tape.size();
    return tape.push(A + B, tape.requires_grad(a) || tape.requires_grad(b), [ia, ib, self](Tape<T>& t) {
        t.accumulate(ia, t.out_grad(self));
        t.accumulate(ib, t.out_grad(self));
    });
}

template <typename T>
Var<T> add_row(Var<T> x, Var<T> row) {
    require_same_tape(x, row, "add_row");
    const auto& X = x.value();
    const auto& R = row.value();
    require_shape<T>(R.rows() == 1 && R.cols() == X.cols(), "add_row", X.rows(), X.cols(), R.rows(), R.cols());
    Tape<T>& tape = *x.tape;
    Matrix<T> out = X.rowwise() + R.row(0);
    std::size_t ix = x.id, ir = row.id, self = tape.size();
    return tape.push(std::move(out), tape.requires_grad(x) || tape.requires_grad(row), [ix, ir, self](Tape<T>& t) {
        const Matrix<T>& g = t.out_grad(self);
        t.accumulate(ix, g);
        if (t.node(ir).requires_grad) t.accumulate_expr(ir, g.colwise().sum());
    });
}

template <typename T>
Var<T> scale(Var<T> x, T s) {
    Tape<T>& tape = *x.tape;
    std::size_t ix = x.id, self = tape.size();
    return tape.push(x.value() * s, tape.requires_grad(x), [ix, self, s](Tape<T>& t) {
        t.accumulate_expr(ix, t.out_grad(self) * s);
    });
}

template <typename T>
Var<T> transpose(Var<T> x) {
    Tape<T>& tape = *x.tape;
    std::size_t ix = x.id, self = tape.size();
    return tape.push(x.value().transpose(), tape.requires_grad(x), [ix, self](Tape<T>& t) {
        t.accumulate_expr(ix, t.out_grad(self).transpose());
    });
}

template <typename T>
Var<T> gelu(Var<T> x) {
    Tape<T>& tape = *x.tape;
    const auto& X = x.value();
    const T inv_sqrt2 = T(1) / std::sqrt(T(2));
    Matrix<T> out = X.unaryExpr([inv_sqrt2](T v) { return T(0.5) * v * (T(1) + std::erf(v * inv_sqrt2)); });
    std::size_t ix = x.id, self = tape.size();
    return tape.push(std::move(out), tape.requires_grad(x), [ix, self, inv_sqrt2](Tape<T>& t) {
        const T inv_sqrt2pi = T(1) / std::sqrt(T(2) * std::numbers::pi_v<T>);
        Matrix<T> d = t.node(ix).value.unaryExpr([&](T v) {
            return T(0.5) * (T(1) + std::erf(v * inv_sqrt2)) + v * std::exp(T(-0.5) * v * v) * inv_sqrt2pi;
        });
        t.accumulate_expr(ix, d.cwiseProduct(t.out_grad(self)));
    });
}

template <typename T>
Var<T> relu(Var<T> x) {
    Tape<T>& tape = *x.tape;
    std::size_t ix = x.id, self = tape.size();
    return tape.push(x.value().cwiseMax(T(0)), tape.requires_grad(x), [ix, self](Tape<T>& t) {
        const auto& X = t.node(ix).value;
        t.accumulate_expr(ix, (X.array() > T(0)).select(t.out_grad(self), T(0)));
    });
}

template <typename T>
Var<T> slice_rows(Var<T> x, Eigen::Index begin, Eigen::Index count) {
    const auto& X = x.value();
    if (begin < 0 || count < 0 || begin + count > X.rows()) throw std::out_of_range("slice_rows: range out of bounds");
    Tape<T>& tape = *x.tape;
    std::size_t ix = x.id, self = tape.size();
    return tape.push(X.middleRows(begin, count), tape.requires_grad(x), [ix, self, begin, count](Tape<T>& t) {
        auto& n = t.node(ix);
        if (n.grad.size() == 0) n.grad = Matrix<T>::Zero(n.value.rows(), n.value.cols());
        n.grad.middleRows(begin, count) += t.out_grad(self);
    });
}

template <typename T>
Var<T> concat_rows(std::span<const Var<T>> parts) {
    if (parts.empty()) throw std::invalid_argument("concat_rows: no parts");
    Tape<T>& tape = *parts[0].tape;
    Eigen::Index rows = 0;
    const Eigen::Index cols = parts[0].cols();
    bool rg = false;
    std::vector<std::size_t> ids;
    for (const auto& p : parts) {
        require_shape<T>(p.cols() == cols, "concat_rows", p.rows(), p.cols(), p.rows(), cols);
        rows += p.rows();
        rg = rg || tape.requires_grad(p);
        ids.push_back(p.id);
    }
    Matrix<T> out(rows, cols);
    Eigen::Index r = 0;
    for (const auto& p : parts) {
        out.middleRows(r, p.rows()) = p.value();
        r += p.rows();
    }
    std::size_t self = tape.size();
    return tape.push(std::move(out), rg, [ids, self](Tape<T>& t) {
        Eigen::Index r0 = 0;
        for (auto id : ids) {
            const Eigen::Index n = t.node(id).value.rows();
            t.accumulate_expr(id, t.out_grad(self).middleRows(r0, n));
            r0 += n;
        }
    });
}

template <typename T>
Var<T> stop_gradient(Var<T> x) {
    return x.tape->constant(x.value());
}

template <typename T>
Var<T> layer_norm(Var<T> x, Var<T> gamma, Var<T> beta, T eps) {
    const auto& X = x.value();
    const Eigen::Index d = X.cols();
    require_shape<T>(gamma.rows() == 1 && gamma.cols() == d && beta.rows() == 1 && beta.cols() == d, "layer_norm",
                     X.rows(), d, gamma.rows(), gamma.cols());
    Tape<T>& tape = *x.tape;
    auto xhat = std::make_shared<Matrix<T>>(X.rows(), d);
    auto inv_std = std::make_shared<Eigen::Matrix<T, Eigen::Dynamic, 1>>(X.rows());
    for (Eigen::Index i = 0; i < X.rows(); ++i) {
        const T mean = X.row(i).mean();
        const T var = (X.row(i).array() - mean).square().mean();
        (*inv_std)(i) = T(1) / std::sqrt(var + eps);
        xhat->row(i) = (X.row(i).array() - mean) * (*inv_std)(i);
    }
    Matrix<T> out = (xhat->array().rowwise() * gamma.value().row(0).array()).rowwise() + beta.value().row(0).array();
    const bool rg = tape.requires_grad(x) || tape.requires_grad(gamma) || tape.requires_grad(beta);
    std::size_t ix = x.id, ig = gamma.id, ib = beta.id, self = tape.size();
    return tape.push(std::move(out), rg, [ix, ig, ib, self, xhat, inv_std](Tape<T>& t) {
        const Matrix<T>& g = t.out_grad(self);
        if (t.node(ig).requires_grad) t.accumulate_expr(ig, g.cwiseProduct(*xhat).colwise().sum());
        if (t.node(ib).requires_grad) t.accumulate_expr(ib, g.colwise().sum());
        if (t.node(ix).requires_grad) {
            const auto& gam = t.node(ig).value;
            Matrix<T> dxhat = g.array().rowwise() * gam.row(0).array();
            Matrix<T> dx(g.rows(), g.cols());
            for (Eigen::Index i = 0; i < g.rows(); ++i) {
                const T m1 = dxhat.row(i).mean();
                const T m2 = dxhat.row(i).dot(xhat->row(i)) / T(g.cols());
                dx.row(i) = (dxhat.row(i).array() - m1 - xhat->row(i).array() * m2) * (*inv_std)(i);
            }
            t.accumulate(ix, dx);
        }
    });
}

template <typename T>
Var<T> l2_normalize_rows(Var<T> x, T eps) {
    const auto& X = x.value();
    Tape<T>& tape = *x.tape;
    auto norms = std::make_shared<Eigen::Matrix<T, Eigen::Dynamic, 1>>(X.rows());
    Matrix<T> out(X.rows(), X.cols());
    for (Eigen::Index i = 0; i < X.rows(); ++i) {
        const T n = X.row(i).norm();
        (*norms)(i) = n;
        out.row(i) = X.row(i) / std::max(n, eps);
    }
    std::size_t ix = x.id, self = tape.size();
    return tape.push(std::move(out), tape.requires_grad(x), [ix, self, norms, eps](Tape<T>& t) {
        const Matrix<T>& g = t.out_grad(self);
        const Matrix<T>& y = t.node(self).value;
        Matrix<T> dx(g.rows(), g.cols());
        for (Eigen::Index i = 0; i < g.rows(); ++i) {
            const T n = (*norms)(i);
            if (n > eps) {
                dx.row(i) = (g.row(i) - y.row(i) * y.row(i).dot(g.row(i))) / n;
            } else {
                dx.row(i) = g.row(i) / eps;
            }
        }
        t.accumulate(ix, dx);
    });
}

template <typename T>
Var<T> column_max(Var<T> x) {
    const auto& X = x.value();
    if (X.rows() == 0) throw std::invalid_argument("column_max: empty input");
    Tape<T>& tape = *x.tape;
    auto arg = std::make_shared<std::vector<Eigen::Index>>(X.cols(), 0);
    Matrix<T> out(1, X.cols());
    for (Eigen::Index j = 0; j < X.cols(); ++j) {
        Eigen::Index best = 0;
        for (Eigen::Index i = 1; i < X.rows(); ++i) {
            if (X(i, j) > X(best, j)) best = i;
        }
        (*arg)[j] = best;
        out(0, j) = X(best, j);
    }
    std::size_t ix = x.id, self = tape.size();
    return tape.push(std::move(out), tape.requires_grad(x), [ix, self, arg](Tape<T>& t) {
        auto& n = t.node(ix);
        if (n.grad.size() == 0) n.grad = Matrix<T>::Zero(n.value.rows(), n.value.cols());
        const Matrix<T>& g = t.out_grad(self);
        for (Eigen::Index j = 0; j < g.cols(); ++j) n.grad((*arg)[j], j) += g(0, j);
    });
}

template <typename T>
Var<T> multihead_attention(Var<T> qkv, int heads, std::vector<Matrix<T>>* probs) {
    const auto& X = qkv.value();
    const Eigen::Index n = X.rows();
    if (heads <= 0 || X.cols() % (3 * heads) != 0) {
        throw std::invalid_argument("multihead_attention: width " + std::to_string(X.cols()) +
                                    " not divisible into 3 x " + std::to_string(heads) + " heads");
    }
    const Eigen::Index d = X.cols() / 3;
    const Eigen::Index dh = d / heads;
    const T sc = T(1) / std::sqrt(T(dh));
    Tape<T>& tape = *qkv.tape;
    auto saved = std::make_shared<std::vector<Matrix<T>>>(heads);
    Matrix<T> out(n, d);
    for (int h = 0; h < heads; ++h) {
        auto q = X.middleCols(h * dh, dh);
        auto k = X.middleCols(d + h * dh, dh);
        auto v = X.middleCols(2 * d + h * dh, dh);
        Matrix<T> s;
        s.noalias() = q * k.transpose();
        s *= sc;
        for (Eigen::Index i = 0; i < n; ++i) {
            const T m = s.row(i).maxCoeff();
            s.row(i) = (s.row(i).array() - m).exp();
            s.row(i) /= s.row(i).sum();
        }
        out.middleCols(h * dh, dh).noalias() = s * v;
        (*saved)[h] = std::move(s);
    }
    if (probs) *probs = *saved;
    std::size_t ix = qkv.id, self = tape.size();
    return tape.push(std::move(out), tape.requires_grad(qkv), [ix, self, saved, heads, d, dh, sc](Tape<T>& t) {
        const Matrix<T>& g = t.out_grad(self);
        const Matrix<T>& X = t.node(ix).value;
        Matrix<T> dx = Matrix<T>::Zero(X.rows(), X.cols());
        for (int h = 0; h < heads; ++h) {
            const Matrix<T>& p = (*saved)[h];
            auto q = X.middleCols(h * dh, dh);
            auto k = X.middleCols(d + h * dh, dh);
            auto v = X.middleCols(2 * d + h * dh, dh);
            auto go = g.middleCols(h * dh, dh);
            dx.middleCols(2 * d + h * dh, dh).noalias() = p.transpose() * go;
            Matrix<T> dp;
            dp.noalias() = go * v.transpose();
            Eigen::Matrix<T, Eigen::Dynamic, 1> rowdot = dp.cwiseProduct(p).rowwise().sum();
            Matrix<T> ds = p.cwiseProduct(dp.colwise() - rowdot) * sc;
            dx.middleCols(h * dh, dh).noalias() = ds * k;
            dx.middleCols(d + h * dh, dh).noalias() = ds.transpose() * q;
        }
        t.accumulate(ix, dx);
    });
}

template <typename T>
Var<T> im2col(Var<T> x, int h, int w, int kernel, int dilation) {
    const auto& X = x.value();
    if (X.rows() != Eigen::Index(h) * w) throw std::invalid_argument("im2col: row count does not match grid");
    if (kernel <= 0 || kernel % 2 == 0) throw std::invalid_argument("im2col: kernel must be odd");
    const Eigen::Index c = X.cols();
    const int half = kernel / 2;
    Tape<T>& tape = *x.tape;
    // Source row per (position, tap), -1 for padding.
    auto src = std::make_shared<std::vector<Eigen::Index>>(std::size_t(h) * w * kernel * kernel, -1);
    Matrix<T> out = Matrix<T>::Zero(Eigen::Index(h) * w, c * kernel * kernel);
    for (int i = 0; i < h; ++i) {
        for (int j = 0; j < w; ++j) {
            const Eigen::Index row = Eigen::Index(i) * w + j;
            for (int ki = 0; ki < kernel; ++ki) {
                for (int kj = 0; kj < kernel; ++kj) {
                    const int si = i + (ki - half) * dilation;
                    const int sj = j + (kj - half) * dilation;
                    if (si < 0 || si >= h || sj < 0 || sj >= w) continue;
                    const int tap = ki * kernel + kj;
                    const Eigen::Index s = Eigen::Index(si) * w + sj;
                    (*src)[std::size_t(row) * kernel * kernel + tap] = s;
                    out.block(row, tap * c, 1, c) = X.row(s);
                }
            }
        }
    }
    const int taps = kernel * kernel;
    std::size_t ix = x.id, self = tape.size();
    return tape.push(std::move(out), tape.requires_grad(x), [ix, self, src, taps, c](Tape<T>& t) {
        auto& n = t.node(ix);
        if (n.grad.size() == 0) n.grad = Matrix<T>::Zero(n.value.rows(), n.value.cols());
        const Matrix<T>& g = t.out_grad(self);
        for (Eigen::Index row = 0; row < g.rows(); ++row) {
            for (int tap = 0; tap < taps; ++tap) {
                const Eigen::Index s = (*src)[std::size_t(row) * taps + tap];
                if (s >= 0) n.grad.row(s) += g.block(row, tap * c, 1, c);
            }
        }
    });
}

template <typename T>
Var<T> sum(Var<T> x) {
    Tape<T>& tape = *x.tape;
    std::size_t ix = x.id, self = tape.size();
    Matrix<T> out(1, 1);
    out(0, 0) = x.value().sum();
    return tape.push(std::move(out), tape.requires_grad(x), [ix, self](Tape<T>& t) {
        const auto& v = t.node(ix).value;
        t.accumulate_expr(ix, Matrix<T>::Constant(v.rows(), v.cols(), t.out_grad(self)(0, 0)));
    });
}

template <typename T>
Var<T> weighted_sum(std::span<const Var<T>> scalars, std::span<const T> weights) {
    if (scalars.empty() || scalars.size() != weights.size()) {
        throw std::invalid_argument("weighted_sum: need equally many scalars and weights");
    }
    Tape<T>& tape = *scalars[0].tape;
    T total = 0;
    bool rg = false;
    std::vector<std::size_t> ids;
    std::vector<T> ws(weights.begin(), weights.end());
    for (std::size_t i = 0; i < scalars.size(); ++i) {
        if (scalars[i].value().size() != 1) throw std::invalid_argument("weighted_sum: operands must be 1x1");
        total += weights[i] * scalars[i].scalar();
        rg = rg || tape.requires_grad(scalars[i]);
        ids.push_back(scalars[i].id);
    }
    std::size_t self = tape.size();
    return tape.push(Matrix<T>::Constant(1, 1, total), rg, [ids, ws, self](Tape<T>& t) {
        const T g = t.out_grad(self)(0, 0);
        for (std::size_t i = 0; i < ids.size(); ++i) t.accumulate_expr(ids[i], Matrix<T>::Constant(1, 1, ws[i] * g));
    });
}

#define TOCO_INSTANTIATE_AUTOGRAD(T)                                                            \
    template class Tape<T>;                                                                     \
    template Var<T> matmul(Var<T>, Var<T>);                                                     \
    template Var<T> left_multiply(const Matrix<T>&, Var<T>);                                    \
    template Var<T> add(Var<T>, Var<T>);                                                        \
    template Var<T> add_row(Var<T>, Var<T>);                                                    \
    template Var<T> scale(Var<T>, T);                                                           \
    template Var<T> transpose(Var<T>);                                                          \
    template Var<T> gelu(Var<T>);                                                               \
    template Var<T> relu(Var<T>);                                                               \
    template Var<T> slice_rows(Var<T>, Eigen::Index, Eigen::Index);                             \
    template Var<T> concat_rows(std::span<const Var<T>>);                                       \
    template Var<T> stop_gradient(Var<T>);                                                      \
    template Var<T> layer_norm(Var<T>, Var<T>, Var<T>, T);                                      \
    template Var<T> l2_normalize_rows(Var<T>, T);                                               \
    template Var<T> column_max(Var<T>);                                                         \
    template Var<T> multihead_attention(Var<T>, int, std::vector<Matrix<T>>*);                  \
    template Var<T> im2col(Var<T>, int, int, int, int);                                         \
    template Var<T> sum(Var<T>);                                                                \
    template Var<T> weighted_sum(std::span<const Var<T>>, std::span<const T>);

TOCO_INSTANTIATE_AUTOGRAD(float)
TOCO_INSTANTIATE_AUTOGRAD(double)

}  // namespace toco
