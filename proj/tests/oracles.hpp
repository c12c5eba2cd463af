#pragma once

// Slow, direct reference computations shared by the unit tests and the acceptance run.
// None of them reuse the library's fast paths.

#include <cmath>
#include <limits>
#include <numbers>

#include "diffolio/characteristics.hpp"
#include "support.hpp"

namespace testing_support {

// Normal-equations OLS with intercept; returns {coef (p+1), resid std}.
inline std::pair<Vector, double> naive_ols(const Vector& y, const Matrix& x) {
    const auto n = x.rows();
    Matrix a(n, x.cols() + 1);
    a.col(0).setOnes();
    a.rightCols(x.cols()) = x;
    const Vector b = (a.transpose() * a).ldlt().solve(a.transpose() * y);
    const Vector e = y - a * b;
    return {b, std::sqrt(e.squaredNorm() / static_cast<double>(n - x.cols() - 1))};
}

inline ReturnPanel random_panel(std::uint64_t seed, int days, int assets) {
    Rng rng(seed);
    NormalSampler ns;
    std::vector<Date> dates;
    std::vector<std::string> names;
    for (int t = 0; t < days; ++t) dates.emplace_back(15000 + t);
    for (int i = 0; i < assets; ++i) names.push_back("A" + std::to_string(i));
    Matrix fac(days, 3), raw(days, assets);
    Vector rf(days);
    for (int t = 0; t < days; ++t) {
        for (int k = 0; k < 3; ++k) fac(t, k) = 0.01 * ns(rng);
        rf[t] = 1e-4 * NormalSampler::uniform01(rng);
        for (int i = 0; i < assets; ++i) {
            raw(t, i) = rf[t] + 0.8 * fac(t, 0) + 0.3 * (i - 1) * fac(t, 1) + 0.2 * fac(t, 2) + 0.01 * ns(rng);
        }
    }
    return ReturnPanel::make(dates, names, raw, rf, fac);
}

// One characteristic recomputed from scratch at (t, i); NaN where the window is short.
inline double naive_characteristic(const ReturnPanel& p, Eigen::Index t, Eigen::Index i, Characteristic k) {
    const Matrix& ex = p.excess_returns;
    const double nan = std::numeric_limits<double>::quiet_NaN();
    auto mom = [&](int len, Eigen::Index end) {
        if (end < len - 1) return nan;
        double prod = 1.0;
        for (int s = 0; s < len; ++s) prod *= 1.0 + ex(end - s, i);
        return prod - 1.0;
    };
    switch (k) {
        case mom1m: return mom(21, t);
        case mom6m: return mom(126, t);
        case mom12m: return mom(252, t);
        case mom36m: return mom(756, t);
        case chmom: return t >= 126 ? mom(126, t) - mom(126, t - 126) : nan;
        case retvol:
        case maxret: {
            if (t < 20) return nan;
            double mean = 0.0, mx = -std::numeric_limits<double>::infinity();
            for (int s = 0; s < 21; ++s) {
                mean += ex(t - s, i) / 21.0;
                mx = std::max(mx, ex(t - s, i));
            }
            if (k == maxret) return mx;
            double ss = 0.0;
            for (int s = 0; s < 21; ++s) ss += (ex(t - s, i) - mean) * (ex(t - s, i) - mean);
            return std::sqrt(ss / 20.0);
        }
        case beta:
        case betasq:
        case idiovol: {
            if (t < 251) return nan;
            const Vector y = ex.col(i).segment(t - 251, 252);
            if (k == idiovol) return naive_ols(y, p.factors.middleRows(t - 251, 252)).second;
            const double b = naive_ols(y, p.factors.block(t - 251, 0, 252, 1)).first[1];
            return k == beta ? b : b * b;
        }
        default: return nan;
    }
}

// Direct double sums, no sorting trick.
inline double naive_crps(const Vector& x, double r) {
    const auto k = static_cast<double>(x.size());
    double a = 0.0, b = 0.0;
    for (Eigen::Index i = 0; i < x.size(); ++i) {
        a += std::abs(x[i] - r);
        for (Eigen::Index j = 0; j < x.size(); ++j) b += std::abs(x[i] - x[j]);
    }
    return a / k - b / (2.0 * k * k);
}

inline double gaussian_crps(double mu, double sigma, double r) {
    const double z = (r - mu) / sigma;
    const double pdf = std::exp(-0.5 * z * z) / std::sqrt(2.0 * std::numbers::pi);
    const double cdf = 0.5 * std::erfc(-z / std::sqrt(2.0));
    return sigma * (z * (2.0 * cdf - 1.0) + 2.0 * pdf - 1.0 / std::sqrt(std::numbers::pi));
}

// Enumerate the 3-simplex on a grid; returns the argmax of f.
template <class F>
Vector grid_argmax3(F&& f, int steps) {
    double best = -std::numeric_limits<double>::infinity();
    Vector arg;
    Vector w(3);
    for (int a = 0; a <= steps; ++a) {
        for (int b = 0; a + b <= steps; ++b) {
            w << a, b, steps - a - b;
            w /= static_cast<double>(steps);
            const double v = f(w);
            if (v > best) {
                best = v;
                arg = w;
            }
        }
    }
    return arg;
}

// Largest peak-to-trough loss over all pairs a <= b of a value path; returned as a negative number.
inline double brute_force_mdd(const Vector& value_path) {
    double worst = 0.0;
    for (Eigen::Index a = 0; a < value_path.size(); ++a) {
        for (Eigen::Index b = a; b < value_path.size(); ++b) worst = std::max(worst, 1.0 - value_path[b] / value_path[a]);
    }
    return -worst;
}

inline Matrix random_spd(Rng& rng, Eigen::Index n) {
    const Matrix a = random_matrix(rng, n, n);
    return a * a.transpose() / static_cast<double>(n) + 0.1 * Matrix::Identity(n, n);
}

inline Matrix correlated_window(Rng& rng, const Matrix& chol, Eigen::Index m) {
    NormalSampler ns;
    Matrix w(m, chol.rows());
    for (Eigen::Index t = 0; t < m; ++t) w.row(t) = (chol * normal_vector(rng, ns, chol.rows())).transpose();
    return w;
}

}  // namespace testing_support
