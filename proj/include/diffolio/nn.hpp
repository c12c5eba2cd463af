#pragma once

#include <cmath>
#include <vector>

#include <Eigen/Dense>

#include "diffolio/errors.hpp"
#include "diffolio/tensor.hpp"

// Dense building blocks with explicit backward passes. Row-vector convention:
// a linear map is y = x·W + b with W of shape (in × out).
namespace diffolio::nn {

using RowVec = Eigen::RowVectorXd;
using CMap = Eigen::Map<const Matrix>;
using MMap = Eigen::Map<Matrix>;

inline constexpr double inv_sqrt2 = 0.70710678118654752440;
inline constexpr double inv_sqrt_2pi = 0.39894228040143267794;

// Exact (erf) form.
inline double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x * inv_sqrt2)); }

inline double gelu_grad(double x) {
    const double cdf = 0.5 * (1.0 + std::erf(x * inv_sqrt2));
    return cdf + x * inv_sqrt_2pi * std::exp(-0.5 * x * x);
}

inline void require_finite(const Matrix& m, const char* what) {
    if (!m.allFinite()) throw NumericError(std::string("non-finite values in ") + what);
}

// ---- layer norm over the feature (column) dimension, one row at a time ----

struct LayerNormCache {
    Matrix xhat;
    Vector inv_std;
};

template <class G, class B>
Matrix layer_norm(const Matrix& x, const G& gain, const B& bias, double eps, LayerNormCache* cache) {
    const auto d = static_cast<double>(x.cols());
    const Vector mean = x.rowwise().mean();
    Matrix xhat = x.colwise() - mean;
    const Vector var = xhat.rowwise().squaredNorm() / d;
    const Vector inv = (var.array() + eps).rsqrt();
    xhat = xhat.array().colwise() * inv.array();
    Matrix y = (xhat.array().rowwise() * gain.row(0).array()).rowwise() + bias.row(0).array();
    if (cache) {
        cache->xhat = std::move(xhat);
        cache->inv_std = inv;
    }
    return y;
}

template <class G, class DG, class DB>
Matrix layer_norm_backward(const Matrix& dy, const LayerNormCache& c, const G& gain, DG&& dgain, DB&& dbias) {
    const auto d = static_cast<double>(dy.cols());
    dgain += (dy.array() * c.xhat.array()).colwise().sum().matrix();
    dbias += dy.colwise().sum();
    const Matrix dxhat = dy.array().rowwise() * gain.row(0).array();
    const Vector m1 = dxhat.rowwise().sum() / d;
    const Vector m2 = (dxhat.array() * c.xhat.array()).rowwise().sum().matrix() / d;
    Matrix dx = (dxhat.colwise() - m1) - (c.xhat.array().colwise() * m2.array()).matrix();
    return dx.array().colwise() * c.inv_std.array();
}

// ---- two-layer GELU perceptron ----

struct MlpCache {
    Matrix input;
    Matrix pre;
    Matrix act;
};

template <class W1, class B1, class W2, class B2>
Matrix mlp(const Matrix& x, const W1& w1, const B1& b1, const W2& w2, const B2& b2, MlpCache* cache) {
    Matrix pre = (x * w1).rowwise() + b1.row(0);
    Matrix act = pre.unaryExpr([](double v) { return gelu(v); });
    Matrix out = (act * w2).rowwise() + b2.row(0);
    if (cache) {
        cache->input = x;
        cache->pre = std::move(pre);
        cache->act = std::move(act);
    }
    return out;
}

template <class W1, class W2, class DW1, class DB1, class DW2, class DB2>
Matrix mlp_backward(const Matrix& dout, const MlpCache& c, const W1& w1, const W2& w2, DW1&& dw1, DB1&& db1, DW2&& dw2,
                    DB2&& db2) {
    dw2.noalias() += c.act.transpose() * dout;
    db2 += dout.colwise().sum();
    Matrix dpre = dout * w2.transpose();
    dpre.array() *= c.pre.unaryExpr([](double v) { return gelu_grad(v); }).array();
    dw1.noalias() += c.input.transpose() * dpre;
    db1 += dpre.colwise().sum();
    return dpre * w1.transpose();
}

// ---- multi-head scaled dot-product attention on already-projected inputs ----
//
// Head h uses columns [h·d_h, (h+1)·d_h) and scales scores by 1/√d_h.

inline void softmax_rows(Matrix& s) {
    for (Eigen::Index r = 0; r < s.rows(); ++r) {
        const double mx = s.row(r).maxCoeff();
        s.row(r) = (s.row(r).array() - mx).exp();
        s.row(r) /= s.row(r).sum();
    }
}

// probs receives one (Lq × Lk) matrix per head.
template <class Q, class K, class V>
Matrix attend(const Q& q, const K& k, const V& v, int heads, std::vector<Matrix>& probs) {
    const Eigen::Index d = q.cols();
    const Eigen::Index dh = d / heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    Matrix out(q.rows(), d);
    probs.resize(static_cast<std::size_t>(heads));
    for (int h = 0; h < heads; ++h) {
        Matrix s = (q.middleCols(h * dh, dh) * k.middleCols(h * dh, dh).transpose()) * scale;
        softmax_rows(s);
        out.middleCols(h * dh, dh).noalias() = s * v.middleCols(h * dh, dh);
        probs[static_cast<std::size_t>(h)] = std::move(s);
    }
    return out;
}

// Accumulates into dq, dk, dv. `dprobs_extra`, when non-null, adds a direct
// loss gradient on each head's probability matrix.
template <class Q, class K, class V, class DQ, class DK, class DV>
void attend_backward(const Matrix& dout, const Q& q, const K& k, const V& v, int heads, const std::vector<Matrix>& probs,
                     const std::vector<Matrix>* dprobs_extra, DQ&& dq, DK&& dk, DV&& dv) {
    const Eigen::Index d = q.cols();
    const Eigen::Index dh = d / heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    for (int h = 0; h < heads; ++h) {
        const Matrix& p = probs[static_cast<std::size_t>(h)];
        const auto doh = dout.middleCols(h * dh, dh);
        Matrix dp = doh * v.middleCols(h * dh, dh).transpose();
        if (dprobs_extra) dp += (*dprobs_extra)[static_cast<std::size_t>(h)];
        dv.middleCols(h * dh, dh).noalias() += p.transpose() * doh;
        const Vector rs = (dp.array() * p.array()).rowwise().sum();
        Matrix ds = p.array() * (dp.colwise() - rs).array();
        ds *= scale;
        dq.middleCols(h * dh, dh).noalias() += ds * k.middleCols(h * dh, dh);
        dk.middleCols(h * dh, dh).noalias() += ds.transpose() * q.middleCols(h * dh, dh);
    }
}

// ---- z + MLP(LayerNorm(z)) ----

struct ResidualMlpCache {
    LayerNormCache ln;
    MlpCache mlp;
};

}  // namespace diffolio::nn
