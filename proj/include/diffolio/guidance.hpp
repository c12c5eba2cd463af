#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <mutex>
#include <shared_mutex>
#include <unordered_map>

#include "diffolio/errors.hpp"
#include "diffolio/tensor.hpp"

namespace diffolio {

/// Unbiased (M − 1) sample covariance of the rows of `window`.
inline Matrix sample_covariance(const Matrix& window) {
    if (window.rows() < 2) throw NumericError("sample covariance needs at least 2 observations");
    const Matrix centered = window.rowwise() - window.colwise().mean();
    Matrix s = (centered.transpose() * centered) / static_cast<double>(window.rows() - 1);
    return 0.5 * (s + s.transpose());
}

enum class ShrinkageMode { analytic, fixed };

struct ShrinkageTarget {
    Matrix train_cov;
    ShrinkageMode mode = ShrinkageMode::analytic;
    double fixed_delta = 0.5;
};

struct ShrinkResult {
    Matrix cov;
    double delta = 0.0;
};

/// Shrinkage intensity δ = clip(π̂ / (M·γ̂), 0, 1) for a fixed external target: π̂ sums the
/// estimated asymptotic variances of the sample covariance entries and γ̂ = ‖target − S‖²_F.
inline double ledoit_wolf_intensity(const Matrix& sample, const Matrix& target, const Matrix& window) {
    const auto m = window.rows();
    const Matrix y = window.rowwise() - window.colwise().mean();
    const Matrix s_m = (y.transpose() * y) / static_cast<double>(m);
    double pi_hat = 0.0;
    for (Eigen::Index t = 0; t < m; ++t) {
        const Vector yt = y.row(t).transpose();
        pi_hat += ((yt * yt.transpose()) - s_m).squaredNorm();
    }
    pi_hat /= static_cast<double>(m);
    const double gamma_hat = (target - sample).squaredNorm();
    if (gamma_hat == 0.0) return 1.0;
    return std::clamp(pi_hat / (static_cast<double>(m) * gamma_hat), 0.0, 1.0);
}

inline ShrinkResult ledoit_wolf_shrink(const Matrix& sample, const ShrinkageTarget& target, const Matrix& window) {
    if (sample.rows() != target.train_cov.rows() || sample.cols() != target.train_cov.cols() ||
        window.cols() != sample.cols()) {
        throw NumericError("ledoit_wolf_shrink: shape mismatch");
    }
    const double delta = target.mode == ShrinkageMode::fixed
                             ? target.fixed_delta
                             : ledoit_wolf_intensity(sample, target.train_cov, window);
    Matrix cov = delta * target.train_cov + (1.0 - delta) * sample;
    return {0.5 * (cov + cov.transpose()), delta};
}

struct TargetCorrelation {
    Matrix matrix;
};

inline TargetCorrelation covariance_to_correlation(const Matrix& cov) {
    constexpr double floor = 1e-12;
    const Vector d = cov.diagonal();
    if (!d.allFinite() || (d.array() < -floor).any()) {
        throw NumericError("covariance_to_correlation: nonpositive diagonal");
    }
    const Vector inv = d.cwiseMax(floor).cwiseSqrt().cwiseInverse();
    Matrix c = inv.asDiagonal() * cov * inv.asDiagonal();
    c = (0.5 * (c + c.transpose())).cwiseMax(-1.0).cwiseMin(1.0);
    c.diagonal().setOnes();
    return {c};
}

/// Negative mean row cosine between the attention block and the target correlation.
/// Rows with a zero target contribute 0. When `grad` is non-null it receives dL/dA.
inline double correlation_guidance_loss(const Matrix& a, const TargetCorrelation& target, Matrix* grad = nullptr) {
    const Matrix& t = target.matrix;
    if (a.rows() != t.rows() || a.cols() != t.cols()) throw NumericError("guidance loss: shape mismatch");
    if (!a.allFinite() || !t.allFinite()) throw NumericError("guidance loss: non-finite input");
    const auto n = a.rows();
    if (grad) grad->setZero(n, n);
    double total = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
        const double tn = t.row(i).norm();
        const double an = a.row(i).norm();
        if (tn == 0.0) continue;
        if (an == 0.0) throw NumericError("guidance loss: attention row is all zero");
        const double dot = a.row(i).dot(t.row(i));
        total += dot / (an * tn);
        if (grad) {
            grad->row(i) = -(t.row(i) / (an * tn) - (dot / (an * an * an * tn)) * a.row(i)) / static_cast<double>(n);
        }
    }
    return -total / static_cast<double>(n);
}

/// Read-mostly cache of target correlations keyed by window end index.
class TargetCache {
public:
    const TargetCorrelation& get_or_compute(Eigen::Index end_index,
                                            const std::function<TargetCorrelation()>& compute) {
        {
            std::shared_lock lock(mu_);
            if (const auto it = map_.find(end_index); it != map_.end()) return it->second;
        }
        TargetCorrelation value = compute();
        std::unique_lock lock(mu_);
        return map_.try_emplace(end_index, std::move(value)).first->second;
    }

    std::size_t size() const {
        std::shared_lock lock(mu_);
        return map_.size();
    }

private:
    mutable std::shared_mutex mu_;
    std::unordered_map<Eigen::Index, TargetCorrelation> map_;
};

}  // namespace diffolio
