#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <string>
#include <vector>

#include "diffolio/csv.hpp"
#include "diffolio/date.hpp"
#include "diffolio/ensemble.hpp"
#include "diffolio/errors.hpp"
#include "diffolio/tensor.hpp"

namespace diffolio {

struct MomentEstimate {
    Vector mu;
    Matrix sigma;
};

inline constexpr double moment_ridge = 1e-8;

inline MomentEstimate estimate_moments(const Matrix& samples, double ridge = moment_ridge) {
    const auto k = samples.rows();
    if (k < 2) throw DataError("estimate_moments needs K >= 2 samples");
    MomentEstimate m;
    m.mu = samples.colwise().mean().transpose();
    const Matrix c = samples.rowwise() - m.mu.transpose();
    m.sigma = (c.transpose() * c) / static_cast<double>(k - 1);
    m.sigma = 0.5 * (m.sigma + m.sigma.transpose());
    m.sigma.diagonal().array() += ridge;
    return m;
}

inline MomentEstimate estimate_moments(const ForecastEnsemble& ens, double ridge = moment_ridge) {
    return estimate_moments(ens.samples, ridge);
}

struct PortfolioWeights {
    Vector w;
    bool fallback = false;  // MVP: no positive predicted mean, long-only min variance used
    int iterations = 0;
    double residual = 0.0;
};

struct QpResult {
    Vector y;
    int iterations = 0;
    double residual = 0.0;
};

/// min yᵀΣy  s.t.  aᵀy = 1, y ≥ 0, by a primal active-set method. Needs max(a) > 0 and Σ PD.
inline QpResult solve_halfspace_qp(const Matrix& sigma, const Vector& a, int max_iter = 100000) {
    const auto n = a.size();
    if (sigma.rows() != n || sigma.cols() != n) throw NumericError("qp: shape mismatch");
    Eigen::Index start = 0;
    a.maxCoeff(&start);
    if (!(a[start] > 0.0)) throw NumericError("qp: constraint vector has no positive entry");

    Vector y = Vector::Zero(n);
    y[start] = 1.0 / a[start];
    std::vector<char> free(static_cast<std::size_t>(n), 0);
    free[static_cast<std::size_t>(start)] = 1;

    const double scale = std::max(1.0, sigma.cwiseAbs().maxCoeff()) * std::max(1.0, a.cwiseAbs().maxCoeff());
    auto residual_of = [&](const Vector& yy, double* worst_dual, Eigen::Index* worst_idx) {
        const Vector g = 2.0 * sigma * yy;
        const double lambda = yy.dot(g);  // aᵀy = 1 at feasibility, so λ = 2yᵀΣy
        const Vector nu = g - lambda * a;
        double res = std::abs(a.dot(yy) - 1.0);
        double worst = 0.0;
        Eigen::Index idx = -1;
        for (Eigen::Index i = 0; i < n; ++i) {
            res = std::max(res, std::max(0.0, -yy[i]));
            if (free[static_cast<std::size_t>(i)]) {
                res = std::max(res, std::abs(nu[i]) / scale);
            } else if (nu[i] < worst) {
                worst = nu[i];
                idx = i;
            }
        }
        res = std::max(res, -worst / scale);
        if (worst_dual) *worst_dual = worst / scale;
        if (worst_idx) *worst_idx = idx;
        return res;
    };

    for (int it = 1; it <= max_iter; ++it) {
        std::vector<Eigen::Index> f;
        for (Eigen::Index i = 0; i < n; ++i) {
            if (free[static_cast<std::size_t>(i)]) f.push_back(i);
        }
        const auto m = static_cast<Eigen::Index>(f.size());
        Matrix sff(m, m);
        Vector af(m);
        for (Eigen::Index r = 0; r < m; ++r) {
            af[r] = a[f[static_cast<std::size_t>(r)]];
            for (Eigen::Index c = 0; c < m; ++c) sff(r, c) = sigma(f[static_cast<std::size_t>(r)], f[static_cast<std::size_t>(c)]);
        }
        const Vector z = sff.ldlt().solve(af);
        const double az = af.dot(z);
        if (!(az > 0.0) || !z.allFinite()) throw NumericError("qp: singular reduced system");
        const Vector cand_f = z / az;

        bool feasible = true;
        for (Eigen::Index r = 0; r < m; ++r) feasible = feasible && cand_f[r] >= 0.0;
        if (feasible) {
            y.setZero();
            for (Eigen::Index r = 0; r < m; ++r) y[f[static_cast<std::size_t>(r)]] = cand_f[r];
            double worst = 0.0;
            Eigen::Index idx = -1;
            const double res = residual_of(y, &worst, &idx);
            if (idx < 0 || worst > -1e-12) return {y, it, res};
            free[static_cast<std::size_t>(idx)] = 1;
            continue;
        }
        // step from y toward the candidate until the first free coordinate hits zero
        double alpha = 1.0;
        Eigen::Index block = -1;
        for (Eigen::Index r = 0; r < m; ++r) {
            const Eigen::Index i = f[static_cast<std::size_t>(r)];
            if (cand_f[r] < 0.0) {
                const double ai = y[i] / (y[i] - cand_f[r]);
                if (ai < alpha) {
                    alpha = ai;
                    block = i;
                }
            }
        }
        Vector next = y;
        for (Eigen::Index r = 0; r < m; ++r) {
            const Eigen::Index i = f[static_cast<std::size_t>(r)];
            next[i] = y[i] + alpha * (cand_f[r] - y[i]);
        }
        if (block >= 0) {
            next[block] = 0.0;
            free[static_cast<std::size_t>(block)] = 0;
        }
        y = next.cwiseMax(0.0);
    }
    throw NumericError("mvp solver did not converge in " + std::to_string(max_iter) +
                       " iterations; KKT residual " + std::to_string(residual_of(y, nullptr, nullptr)));
}

/// Long-only tangency portfolio via the half-space QP; min-variance when no μ_i > 0.
inline PortfolioWeights solve_mvp(const MomentEstimate& m, int max_iter = 100000) {
    const auto n = m.mu.size();
    if (m.sigma.rows() != n || m.sigma.cols() != n) throw NumericError("solve_mvp: shape mismatch");
    if (!m.mu.allFinite() || !m.sigma.allFinite()) throw NumericError("solve_mvp: non-finite moments");
    PortfolioWeights out;
    const bool has_positive = m.mu.maxCoeff() > 0.0;
    const Vector a = has_positive ? m.mu : Vector::Ones(n);
    out.fallback = !has_positive;
    const QpResult qp = solve_halfspace_qp(m.sigma, a, max_iter);
    out.w = qp.y / qp.y.sum();
    out.iterations = qp.iterations;
    out.residual = qp.residual;
    return out;
}

// ---- growth-optimal portfolio ---------------------------------------------------

inline double log_utility(const Matrix& samples, const Vector& w) {
    const Vector g = (samples * w).array() + 1.0;
    if ((g.array() <= 0.0).any()) return -std::numeric_limits<double>::infinity();
    return g.array().log().mean();
}

struct GopOptions {
    int eg_iterations = 500;
    int newton_iterations = 200;
    double grad_tol = 1e-9;
    double utility_tol = 1e-12;
};

/// Maximizes (1/K)Σ log(1 + wᵀr_k) over the simplex. Exponentiated-gradient ascent gives
/// the warm start; an active-set Newton phase polishes to the KKT tolerance, since mirror
/// ascent alone crawls when the optimum sits on a face.
inline PortfolioWeights solve_gop(const Matrix& samples, const GopOptions& opt = {}) {
    const auto k = samples.rows();
    const auto n = samples.cols();
    if (k < 1 || n < 1) throw DataError("solve_gop: empty ensemble");
    if (!samples.allFinite()) throw NumericError("solve_gop: non-finite samples");
    PortfolioWeights out;
    if (n == 1) {
        if ((samples.array() <= -1.0).any()) throw NumericError("solve_gop: no feasible portfolio");
        out.w = Vector::Ones(1);
        return out;
    }

    Vector w = Vector::Constant(n, 1.0 / static_cast<double>(n));
    double f = log_utility(samples, w);
    if (!std::isfinite(f)) {
        // shrink toward the best single asset
        double best = -std::numeric_limits<double>::infinity();
        for (Eigen::Index i = 0; i < n; ++i) {
            const Vector e = Vector::Unit(n, i);
            const double fi = log_utility(samples, e);
            if (fi > best) {
                best = fi;
                w = e;
            }
        }
        if (!std::isfinite(best)) throw NumericError("solve_gop: no feasible portfolio (every asset can lose 100%)");
        const Vector ew = Vector::Constant(n, 1.0 / static_cast<double>(n));
        for (double s = 0.5; s > 1e-6; s *= 0.5) {
            const Vector cand = (1.0 - s) * w + s * ew;
            if (std::isfinite(log_utility(samples, cand))) {
                w = cand;
                break;
            }
        }
        f = log_utility(samples, w);
    }

    auto gradient = [&](const Vector& ww) {
        const Vector g = ((samples * ww).array() + 1.0).inverse().matrix();
        return Vector((samples.transpose() * g) / static_cast<double>(k));
    };
    auto projected_norm = [&](const Vector& ww, const Vector& g) {
        // KKT violation on the simplex: free coordinates share one multiplier, bound ones must not exceed it
        const double lambda = ww.dot(g);
        double v = 0.0;
        for (Eigen::Index i = 0; i < n; ++i) {
            const double d = g[i] - lambda;
            v = std::max(v, ww[i] > 0.0 ? std::abs(d) * std::min(1.0, ww[i] * 1e6) : std::max(0.0, d));
        }
        return v;
    };

    int iters = 0;
    double eta = 1.0;
    for (int it = 0; it < opt.eg_iterations; ++it, ++iters) {
        const Vector g = gradient(w);
        if (projected_norm(w, g) < opt.grad_tol) break;
        eta = std::min(eta * 2.0, 1e3 / std::max(1e-300, g.cwiseAbs().maxCoeff()));
        bool moved = false;
        double f_new = f;
        Vector cand;
        for (int bt = 0; bt < 60; ++bt, eta *= 0.5) {
            const double gmax = g.maxCoeff();
            cand = (w.array() * ((g.array() - gmax) * eta).exp()).matrix();
            cand /= cand.sum();
            f_new = log_utility(samples, cand);
            if (std::isfinite(f_new) && f_new >= f) {
                moved = true;
                break;
            }
        }
        if (!moved) break;
        const double change = f_new - f;
        w = cand;
        f = f_new;
        if (change < opt.utility_tol) break;
    }

    // active-set Newton polish
    std::vector<char> free(static_cast<std::size_t>(n));
    for (Eigen::Index i = 0; i < n; ++i) free[static_cast<std::size_t>(i)] = w[i] > 1e-12 ? 1 : 0;
    for (Eigen::Index i = 0; i < n; ++i) {
        if (!free[static_cast<std::size_t>(i)]) w[i] = 0.0;
    }
    w /= w.sum();
    if (!std::isfinite(log_utility(samples, w))) throw NumericError("solve_gop: lost feasibility");
    f = log_utility(samples, w);

    for (int it = 0; it < opt.newton_iterations; ++it, ++iters) {
        const Vector g = gradient(w);
        std::vector<Eigen::Index> fidx;
        for (Eigen::Index i = 0; i < n; ++i) {
            if (free[static_cast<std::size_t>(i)]) fidx.push_back(i);
        }
        const auto m = static_cast<Eigen::Index>(fidx.size());
        Vector gf(m);
        for (Eigen::Index r = 0; r < m; ++r) gf[r] = g[fidx[static_cast<std::size_t>(r)]];
        const double lambda = gf.mean();
        double free_violation = (gf.array() - lambda).abs().maxCoeff();

        if (free_violation < opt.grad_tol) {
            Eigen::Index add = -1;
            double worst = opt.grad_tol;
            for (Eigen::Index i = 0; i < n; ++i) {
                if (!free[static_cast<std::size_t>(i)] && g[i] - lambda > worst) {
                    worst = g[i] - lambda;
                    add = i;
                }
            }
            if (add < 0) break;
            free[static_cast<std::size_t>(add)] = 1;
            continue;
        }

        // negative Hessian on the free block: (1/K) Σ r rᵀ / (1 + wᵀr)²
        const Vector denom = ((samples * w).array() + 1.0).matrix();
        Matrix rf(k, m);
        for (Eigen::Index r = 0; r < m; ++r) rf.col(r) = samples.col(fidx[static_cast<std::size_t>(r)]).cwiseQuotient(denom);
        Matrix p = (rf.transpose() * rf) / static_cast<double>(k);
        p.diagonal().array() += 1e-12 * std::max(1.0, p.diagonal().maxCoeff());
        const auto ldlt = p.ldlt();
        const Vector u = ldlt.solve(gf);
        const Vector v = ldlt.solve(Vector::Ones(m));
        Vector d = u - v * (u.sum() / v.sum());
        if (!d.allFinite()) throw NumericError("solve_gop: singular Newton system");

        double alpha_max = std::numeric_limits<double>::infinity();
        Eigen::Index block = -1;
        for (Eigen::Index r = 0; r < m; ++r) {
            if (d[r] < 0.0) {
                const double ar = w[fidx[static_cast<std::size_t>(r)]] / -d[r];
                if (ar < alpha_max) {
                    alpha_max = ar;
                    block = fidx[static_cast<std::size_t>(r)];
                }
            }
        }
        double alpha = std::min(1.0, alpha_max);
        bool hit_bound = alpha_max <= 1.0;
        const double slope = gf.dot(d);
        Vector cand = w;
        double f_new = f;
        bool accepted = false;
        for (int bt = 0; bt < 60; ++bt) {
            cand = w;
            for (Eigen::Index r = 0; r < m; ++r) cand[fidx[static_cast<std::size_t>(r)]] += alpha * d[r];
            if (hit_bound && block >= 0) cand[block] = 0.0;
            cand = cand.cwiseMax(0.0);
            cand /= cand.sum();
            f_new = log_utility(samples, cand);
            if (std::isfinite(f_new) && f_new >= f + 1e-4 * alpha * slope - 1e-15) {
                accepted = true;
                break;
            }
            alpha *= 0.5;
            hit_bound = false;
        }
        if (!accepted) break;
        if (hit_bound && block >= 0) free[static_cast<std::size_t>(block)] = 0;
        const double change = f_new - f;
        w = cand;
        f = f_new;
        if (!hit_bound && change < opt.utility_tol && alpha * d.cwiseAbs().maxCoeff() < 1e-12) break;
    }

    out.w = w;
    out.iterations = iters;
    out.residual = projected_norm(w, gradient(w));
    return out;
}

inline PortfolioWeights solve_gop(const ForecastEnsemble& ens, const GopOptions& opt = {}) {
    return solve_gop(ens.samples, opt);
}

// ---- backtest ---------------------------------------------------------------------

inline constexpr double trading_days = 252.0;

struct BacktestReport {
    Vector daily_returns;
    Vector value_path;  // length T + 1, value_path[0] = 1
    double sr = 0.0, ret = 0.0, vol = 0.0, mdd = 0.0, ce = 0.0;
    double utility = 0.0;
    bool sr_defined = true;
    bool ce_defined = true;
    Eigen::Index bankrupt_at = -1;
};

/// Summary statistics of a daily return series; MDD is the magnitude shown with a minus sign.
inline BacktestReport summarize_returns(const Vector& r) {
    if (r.size() < 1) throw DataError("backtest: empty return series");
    BacktestReport rep;
    rep.daily_returns = r;
    const auto t = r.size();
    rep.value_path.resize(t + 1);
    rep.value_path[0] = 1.0;
    for (Eigen::Index i = 0; i < t; ++i) rep.value_path[i + 1] = rep.value_path[i] * (1.0 + r[i]);

    const double mean = r.mean();
    const double sd = t > 1 ? std::sqrt((r.array() - mean).square().sum() / static_cast<double>(t - 1)) : 0.0;
    rep.ret = mean * trading_days;
    rep.vol = sd * std::sqrt(trading_days);
    if (rep.vol > 0.0) {
        rep.sr = rep.ret / rep.vol;
    } else {
        rep.sr = undefined_value;
        rep.sr_defined = false;
    }

    double peak = rep.value_path[0];
    double dd = 0.0;
    for (Eigen::Index i = 0; i <= t; ++i) {
        peak = std::max(peak, rep.value_path[i]);
        if (peak > 0.0) dd = std::max(dd, (peak - rep.value_path[i]) / peak);
    }
    rep.mdd = dd > 0.0 ? -dd : 0.0;

    double u = 0.0;
    for (Eigen::Index i = 0; i < t; ++i) {
        if (1.0 + r[i] <= 0.0) {
            rep.bankrupt_at = i;
            break;
        }
        u += std::log1p(r[i]);
    }
    if (rep.bankrupt_at >= 0) {
        rep.ce_defined = false;
        rep.ce = undefined_value;
        rep.utility = undefined_value;
    } else {
        rep.utility = u / static_cast<double>(t);
        rep.ce = std::pow(std::exp(rep.utility), trading_days) - 1.0;
    }
    return rep;
}

/// Row t of `weights` is held over realized row t.
inline BacktestReport backtest(const Matrix& weights, const Matrix& realized) {
    if (weights.rows() != realized.rows() || weights.cols() != realized.cols()) {
        throw DataError("backtest: weights and realized returns are misaligned");
    }
    const Vector r = (weights.cwiseProduct(realized)).rowwise().sum();
    return summarize_returns(r);
}

inline void write_weights_csv(const std::string& path, const std::vector<Date>& dates,
                              const std::vector<std::string>& assets, const Matrix& weights,
                              const std::vector<char>* flags = nullptr) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot write " + path);
    out << "date";
    for (const auto& a : assets) out << "," << a;
    if (flags) out << ",fallback";
    out << "\n";
    for (Eigen::Index t = 0; t < weights.rows(); ++t) {
        out << dates.at(static_cast<std::size_t>(t)).iso();
        for (Eigen::Index i = 0; i < weights.cols(); ++i) out << "," << csv::fmt(weights(t, i));
        if (flags) out << "," << int((*flags)[static_cast<std::size_t>(t)]);
        out << "\n";
    }
}

struct NamedReport {
    std::string name;
    BacktestReport report;
    bool with_ce = true;
};

inline void write_backtest_csv(const std::string& path, const std::vector<NamedReport>& rows) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot write " + path);
    out << "strategy,SR,Ret,Vol,MDD,CE,sr_defined,ce_defined\n";
    for (const auto& r : rows) {
        const auto& b = r.report;
        out << r.name << "," << csv::fmt(b.sr) << "," << csv::fmt(b.ret) << "," << csv::fmt(b.vol) << ","
            << csv::fmt(b.mdd) << "," << (r.with_ce ? csv::fmt(b.ce) : std::string("")) << "," << int(b.sr_defined)
            << "," << int(b.ce_defined) << "\n";
    }
}

}  // namespace diffolio
