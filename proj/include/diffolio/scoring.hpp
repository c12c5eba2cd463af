#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <vector>

#include "diffolio/date.hpp"
#include "diffolio/ensemble.hpp"
#include "diffolio/errors.hpp"
#include "diffolio/tensor.hpp"

namespace diffolio {

// plain: (1/2K²)ΣΣ|x_i − x_j| spread term; fair: 1/(2K(K−1)).
enum class CrpsEstimator { plain, fair };

/// Sample CRPS: mean |x_k − r| minus half the mean pairwise spread. O(K log K).
inline double crps_empirical(const Vector& samples, double truth, CrpsEstimator est = CrpsEstimator::plain) {
    const auto k = samples.size();
    if (k < 1) throw DataError("crps needs at least one sample");
    const double first = (samples.array() - truth).abs().mean();
    std::vector<double> s(samples.data(), samples.data() + k);
    std::sort(s.begin(), s.end());
    // ΣΣ|x_i − x_j| = 2 Σ_i (2i − K − 1) x_(i), i 1-based; offsets from the minimum keep
    // identical samples at exactly zero spread
    double pair_sum = 0.0;
    for (Eigen::Index i = 1; i < k; ++i) {
        pair_sum += static_cast<double>(2 * (i + 1) - k - 1) * (s[static_cast<std::size_t>(i)] - s.front());
    }
    pair_sum *= 2.0;
    const double kk = static_cast<double>(k);
    const double denom = (est == CrpsEstimator::fair && k > 1) ? 2.0 * kk * (kk - 1.0) : 2.0 * kk * kk;
    return first - pair_sum / denom;
}

struct MeanStd {
    double mean = 0.0;
    double std = 0.0;
};

/// Time-average each asset's CRPS series, then mean and (n − 1) std across assets.
inline MeanStd aggregate_crps(const std::vector<Vector>& per_asset) {
    if (per_asset.empty()) throw DataError("aggregate_crps: no assets");
    const auto len = per_asset.front().size();
    if (len < 1) throw DataError("aggregate_crps: empty series");
    Vector avg(static_cast<Eigen::Index>(per_asset.size()));
    for (std::size_t i = 0; i < per_asset.size(); ++i) {
        if (per_asset[i].size() != len) throw DataError("aggregate_crps: series length mismatch");
        avg[static_cast<Eigen::Index>(i)] = per_asset[i].mean();
    }
    MeanStd out{avg.mean(), 0.0};
    if (avg.size() > 1) out.std = std::sqrt((avg.array() - out.mean).square().sum() / static_cast<double>(avg.size() - 1));
    return out;
}

/// Sample energy score over K × N samples. O(K² N).
inline double energy_score(const Matrix& samples, const Vector& truth) {
    const auto k = samples.rows();
    if (k < 1) throw DataError("energy score needs at least one sample");
    if (samples.cols() != truth.size()) throw DataError("energy score: dimension mismatch");
    double first = 0.0;
    for (Eigen::Index a = 0; a < k; ++a) first += (samples.row(a).transpose() - truth).norm();
    double spread = 0.0;
    for (Eigen::Index a = 0; a < k; ++a) {
        for (Eigen::Index b = a + 1; b < k; ++b) spread += (samples.row(a) - samples.row(b)).norm();
    }
    const double kk = static_cast<double>(k);
    return first / kk - (2.0 * spread) / (2.0 * kk * kk);
}

/// Pearson correlation of the columns of x; constant columns are an error.
inline Matrix correlation_matrix(const Matrix& x) {
    if (x.rows() < 2) throw DataError("correlation needs at least 2 rows");
    const Matrix c = x.rowwise() - x.colwise().mean();
    const Vector sd = c.colwise().norm().transpose();
    for (Eigen::Index j = 0; j < sd.size(); ++j) {
        // demeaning a constant column can leave rounding residue, so compare against its scale
        const double scale = x.col(j).cwiseAbs().maxCoeff() * std::sqrt(static_cast<double>(x.rows()));
        if (!(sd[j] > 1e-13 * scale)) throw NumericError("correlation undefined: column " + std::to_string(j) + " is constant");
    }
    const Matrix u = c.array().rowwise() / sd.transpose().array();
    Matrix r = u.transpose() * u;
    r.diagonal().setOnes();
    return r;
}

/// ‖C_real − C_synth‖_F with C_synth from the per-date ensemble means.
inline double corr_score(const Matrix& real, const Matrix& synth_mean_path) {
    if (real.rows() != synth_mean_path.rows() || real.cols() != synth_mean_path.cols()) {
        throw DataError("corr_score: real and synthetic paths differ in shape");
    }
    return (correlation_matrix(real) - correlation_matrix(synth_mean_path)).norm();
}

inline Matrix ensemble_mean_path(const std::vector<ForecastEnsemble>& ens) {
    if (ens.empty()) throw DataError("no ensembles");
    Matrix m(static_cast<Eigen::Index>(ens.size()), ens.front().samples.cols());
    for (std::size_t t = 0; t < ens.size(); ++t) m.row(static_cast<Eigen::Index>(t)) = ens[t].mean().transpose();
    return m;
}

inline double corr_score(const Matrix& real, const std::vector<ForecastEnsemble>& ens) {
    return corr_score(real, ensemble_mean_path(ens));
}

struct ScoreReport {
    double crps_mean = 0.0;
    double crps_std = 0.0;
    double es = 0.0;
    double corr_score = 0.0;
    bool corr_defined = true;
    Eigen::Index dates = 0;
};

/// Scores ensembles against realized rows (row t of `real` is the outcome of ens[t]).
inline ScoreReport evaluate_forecasts(const Matrix& real, const std::vector<ForecastEnsemble>& ens,
                                      CrpsEstimator est = CrpsEstimator::plain) {
    if (real.rows() != static_cast<Eigen::Index>(ens.size())) throw DataError("evaluate: date count mismatch");
    if (ens.empty()) throw DataError("evaluate: no forecasts");
    const auto n = real.cols();
    std::vector<Vector> per_asset(static_cast<std::size_t>(n), Vector(real.rows()));
    double es = 0.0;
    for (std::size_t t = 0; t < ens.size(); ++t) {
        ens[t].validate();
        if (ens[t].samples.cols() != n) throw DataError("evaluate: asset count mismatch");
        const Vector truth = real.row(static_cast<Eigen::Index>(t)).transpose();
        for (Eigen::Index i = 0; i < n; ++i) {
            per_asset[static_cast<std::size_t>(i)][static_cast<Eigen::Index>(t)] =
                crps_empirical(ens[t].samples.col(i), truth[i], est);
        }
        es += energy_score(ens[t].samples, truth);
    }
    ScoreReport r;
    const auto agg = aggregate_crps(per_asset);
    r.crps_mean = agg.mean;
    r.crps_std = agg.std;
    r.es = es / static_cast<double>(ens.size());
    r.dates = real.rows();
    try {
        r.corr_score = corr_score(real, ens);
    } catch (const NumericError&) {
        r.corr_defined = false;
        r.corr_score = undefined_value;
    }
    return r;
}

struct YearlyScore {
    int year = 0;
    ScoreReport scores;
};

/// One row per calendar year Y, scored on dates falling in [Y − 2, Y]; leading years
/// use the shorter history available.
inline std::vector<YearlyScore> rolling_yearly_scores(const Matrix& real, const std::vector<ForecastEnsemble>& ens,
                                                      int span_years = 3) {
    std::vector<YearlyScore> out;
    if (ens.empty()) return out;
    std::vector<int> years;
    for (const auto& e : ens) {
        if (years.empty() || years.back() != e.date.year()) years.push_back(e.date.year());
    }
    for (int y : years) {
        std::vector<ForecastEnsemble> sub;
        std::vector<Eigen::Index> rows;
        for (std::size_t t = 0; t < ens.size(); ++t) {
            const int ey = ens[t].date.year();
            if (ey <= y && ey > y - span_years) {
                sub.push_back(ens[t]);
                rows.push_back(static_cast<Eigen::Index>(t));
            }
        }
        Matrix r(static_cast<Eigen::Index>(rows.size()), real.cols());
        for (std::size_t k = 0; k < rows.size(); ++k) r.row(static_cast<Eigen::Index>(k)) = real.row(rows[k]);
        out.push_back({y, evaluate_forecasts(r, sub)});
    }
    return out;
}

}  // namespace diffolio
