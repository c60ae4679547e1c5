#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>

#include "toco/autograd.hpp"

namespace toco::test {

using Md = Matrix<double>;

inline Md random_matrix(Eigen::Index r, Eigen::Index c, std::mt19937_64& rng, double scale = 1.0) {
    std::normal_distribution<double> n(0.0, scale);
    Md m(r, c);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
    return m;
}

/// Scalar-valued function of one input, built on a fresh tape.
using ScalarFn = std::function<Var<double>(Tape<double>&, Var<double>)>;

/// Central differences of f at x.
inline Md numeric_grad(const ScalarFn& f, const Md& x, double h = 1e-6) {
    Md g(x.rows(), x.cols());
    Md xp = x;
    for (Eigen::Index i = 0; i < x.size(); ++i) {
        const double orig = xp.data()[i];
        xp.data()[i] = orig + h;
        Tape<double> t1;
        const double fp = f(t1, t1.constant(xp)).scalar();
        xp.data()[i] = orig - h;
        Tape<double> t2;
        const double fm = f(t2, t2.constant(xp)).scalar();
        xp.data()[i] = orig;
        g.data()[i] = (fp - fm) / (2 * h);
    }
    return g;
}

inline Md analytic_grad(const ScalarFn& f, const Md& x) {
    Tape<double> tape;
    Var<double> v = tape.variable(x);
    tape.backward(f(tape, v));
    return tape.grad(v);
}

/// ||a - b|| / max(||a||, ||b||), or the absolute gap when both are tiny.
inline double rel_error(const Md& a, const Md& b) {
    const double scale = std::max(a.norm(), b.norm());
    const double diff = (a - b).norm();
    return scale < 1e-10 ? diff : diff / scale;
}

inline double grad_check(const ScalarFn& f, const Md& x) { return rel_error(analytic_grad(f, x), numeric_grad(f, x)); }

/// A random smooth scalar read-out of a matrix-valued node, so every entry matters.
inline Var<double> readout(Tape<double>& tape, Var<double> y, std::uint64_t seed = 99) {
    std::mt19937_64 rng(seed);
    Var<double> r = tape.constant(random_matrix(y.cols(), 1, rng));
    return sum(matmul(gelu(y), r));
}

}  // namespace toco::test
