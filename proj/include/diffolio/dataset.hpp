#pragma once

#include <string>
#include <vector>

#include "diffolio/characteristics.hpp"
#include "diffolio/data_panel.hpp"
#include "diffolio/denoiser.hpp"
#include "diffolio/guidance.hpp"

namespace diffolio {

struct FeatureOptions {
    bool standardize_targets = true;
    bool use_characteristics = true;
    bool zero_asset_covariates = false;  // ablation: keep the slots, feed zeros
    bool zero_sys_covariates = false;
};

struct FittedNormalizers {
    Normalizer returns;
    Normalizer asset;
    Normalizer sys;
};

/// Model-ready view of a panel: normalized inputs aligned by date plus the valid
/// forecast anchors of each split. Anchor t forecasts row t + 1 from rows [t − M + 1, t].
struct PreparedData {
    std::vector<Date> dates;
    std::vector<std::string> assets;
    std::vector<std::string> asset_feature_names;
    std::vector<std::string> sys_names;
    Matrix excess;          // T × N decimal excess returns
    Matrix targets;         // T × N model-space returns
    Tensor3 asset_feats;    // T × N × z, normalized; NaN where undefined
    Matrix sys_feats;       // T × N_y, normalized
    FittedNormalizers norms;
    Matrix train_cov;       // Σ^train of excess returns
    int window = 0;
    SplitIndices split;
    std::vector<Eigen::Index> train_anchors, val_anchors, test_anchors;

    Eigen::Index num_assets() const { return excess.cols(); }
    int z_dim() const { return static_cast<int>(asset_feats.dim2()); }
    int sys_dim() const { return static_cast<int>(sys_feats.cols()); }

    ConditioningBundle context(Eigen::Index t) const {
        const auto m = static_cast<Eigen::Index>(window);
        const auto lo = t - m + 1;
        if (lo < 0 || t + 1 > static_cast<Eigen::Index>(dates.size())) throw DataError("context window out of range");
        ConditioningBundle b;
        b.hist_returns = targets.middleRows(lo, m);
        b.sys_covs = sys_feats.middleRows(lo, m);
        const auto n = static_cast<std::size_t>(num_assets()), z = asset_feats.dim2();
        b.asset_covs = Tensor3(static_cast<std::size_t>(m), n, z);
        for (Eigen::Index s = 0; s < m; ++s) {
            for (std::size_t i = 0; i < n; ++i) {
                for (std::size_t k = 0; k < z; ++k) {
                    b.asset_covs(static_cast<std::size_t>(s), i, k) = asset_feats(static_cast<std::size_t>(lo + s), i, k);
                }
            }
        }
        return b;
    }

    Vector target(Eigen::Index t) const { return targets.row(t + 1).transpose(); }
    Vector realized(Eigen::Index t) const { return excess.row(t + 1).transpose(); }
    Matrix raw_window(Eigen::Index t) const { return excess.middleRows(t - window + 1, window); }
    Date forecast_date(Eigen::Index t) const { return dates.at(static_cast<std::size_t>(t + 1)); }

    /// Model-space samples (K × N) back to decimal excess returns.
    Matrix to_returns(const Matrix& model_space) const { return norms.returns.invert(model_space); }

    void apply_to(DenoiserConfig& c) const {
        c.assets = static_cast<int>(num_assets());
        c.z_dim = z_dim();
        c.sys_covariates = sys_dim();
    }
};

namespace detail {

inline bool row_defined(const Tensor3& x, Eigen::Index t) {
    for (std::size_t i = 0; i < x.dim1(); ++i) {
        for (std::size_t k = 0; k < x.dim2(); ++k) {
            if (!is_defined(x(static_cast<std::size_t>(t), i, k))) return false;
        }
    }
    return true;
}

}  // namespace detail

/// `extra` may be null; `sys_daily` is the forward-filled T × N_y matrix.
/// When `fitted` is given its normalizers are reused instead of refitting.
inline PreparedData prepare_data(const ReturnPanel& panel, const CharacteristicTensor* chars,
                                 const AssetCovariates* extra, const Matrix& sys_daily,
                                 const std::vector<std::string>& sys_names, const SplitSpec& spec, int window,
                                 const FeatureOptions& opt = {}, const FittedNormalizers* fitted = nullptr) {
    const auto t_len = panel.rows();
    const auto n = panel.num_assets();
    if (window < 2) throw ConfigError("model.window", "must be at least 2");
    if (sys_daily.rows() != t_len) throw DataError("systematic covariates do not cover the panel");
    if (sys_daily.cols() < 1) throw DataError("at least one systematic covariate is required");

    PreparedData d;
    d.dates = panel.dates;
    d.assets = panel.assets;
    d.sys_names = sys_names;
    d.excess = panel.excess_returns;
    d.window = window;
    d.split = split_panel(panel, spec);
    const IndexRange& tr = d.split.train;

    // asset feature stack: characteristics first, then extra covariates
    std::size_t z = 0;
    if (opt.use_characteristics && chars) {
        z += characteristic_count;
        for (auto nm : characteristic_names) d.asset_feature_names.emplace_back(nm);
    }
    if (extra) {
        if (extra->values.dim0() != static_cast<std::size_t>(t_len)) throw DataError("asset covariates misaligned");
        z += extra->names.size();
        for (const auto& nm : extra->names) d.asset_feature_names.push_back(nm);
    }
    if (z == 0) throw DataError("no asset covariates: enable characteristics or supply an asset covariate file");
    Tensor3 raw(static_cast<std::size_t>(t_len), static_cast<std::size_t>(n), z, undefined_value);
    for (Eigen::Index t = 0; t < t_len; ++t) {
        for (Eigen::Index i = 0; i < n; ++i) {
            std::size_t k = 0;
            if (opt.use_characteristics && chars) {
                for (std::size_t c = 0; c < characteristic_count; ++c, ++k) {
                    raw(static_cast<std::size_t>(t), static_cast<std::size_t>(i), k) =
                        chars->values(static_cast<std::size_t>(t), static_cast<std::size_t>(i), c);
                }
            }
            if (extra) {
                for (std::size_t c = 0; c < extra->names.size(); ++c, ++k) {
                    raw(static_cast<std::size_t>(t), static_cast<std::size_t>(i), k) =
                        extra->values(static_cast<std::size_t>(t), static_cast<std::size_t>(i), c);
                }
            }
        }
    }
    std::vector<char> defined(static_cast<std::size_t>(t_len));
    for (Eigen::Index t = 0; t < t_len; ++t) defined[static_cast<std::size_t>(t)] = detail::row_defined(raw, t);

    if (fitted) {
        d.norms = *fitted;
    } else {
        if (opt.standardize_targets) {
            d.norms.returns = fit_normalizer(panel.excess_returns.middleRows(tr.first, tr.count));
        } else {
            d.norms.returns.mean = Vector::Zero(n);
            d.norms.returns.std = Vector::Ones(n);
        }
        std::vector<Eigen::Index> rows;
        for (Eigen::Index t = tr.first; t < tr.end(); ++t) {
            if (defined[static_cast<std::size_t>(t)]) rows.push_back(t);
        }
        if (rows.size() < 2) throw DataError("training range has fewer than 2 dates with all asset covariates defined");
        Matrix stacked(static_cast<Eigen::Index>(rows.size()) * n, static_cast<Eigen::Index>(z));
        Eigen::Index r = 0;
        for (auto t : rows) {
            for (Eigen::Index i = 0; i < n; ++i, ++r) {
                for (std::size_t k = 0; k < z; ++k) {
                    stacked(r, static_cast<Eigen::Index>(k)) =
                        raw(static_cast<std::size_t>(t), static_cast<std::size_t>(i), k);
                }
            }
        }
        d.norms.asset = fit_normalizer(stacked);
        d.norms.sys = fit_normalizer(sys_daily.middleRows(tr.first, tr.count));
    }
    if (d.norms.returns.columns() != n || d.norms.asset.columns() != static_cast<Eigen::Index>(z) ||
        d.norms.sys.columns() != sys_daily.cols()) {
        throw DataError("stored normalizers do not match the data's shape");
    }

    d.targets = d.norms.returns.apply(panel.excess_returns);
    d.asset_feats = Tensor3(static_cast<std::size_t>(t_len), static_cast<std::size_t>(n), z, undefined_value);
    for (Eigen::Index t = 0; t < t_len; ++t) {
        for (Eigen::Index i = 0; i < n; ++i) {
            for (std::size_t k = 0; k < z; ++k) {
                const double v = raw(static_cast<std::size_t>(t), static_cast<std::size_t>(i), k);
                double& out = d.asset_feats(static_cast<std::size_t>(t), static_cast<std::size_t>(i), k);
                if (opt.zero_asset_covariates) {
                    out = 0.0;
                } else if (is_defined(v)) {
                    out = (v - d.norms.asset.mean[static_cast<Eigen::Index>(k)]) / d.norms.asset.std[static_cast<Eigen::Index>(k)];
                }
            }
        }
    }
    d.sys_feats = opt.zero_sys_covariates ? Matrix(Matrix::Zero(t_len, sys_daily.cols())) : d.norms.sys.apply(sys_daily);
    d.train_cov = sample_covariance(panel.excess_returns.middleRows(tr.first, tr.count));

    // anchors: every date in the context window has defined features and the target row is in range
    std::vector<Eigen::Index> run(static_cast<std::size_t>(t_len), 0);  // consecutive defined rows ending at t
    for (Eigen::Index t = 0; t < t_len; ++t) {
        const bool ok = opt.zero_asset_covariates || defined[static_cast<std::size_t>(t)];
        run[static_cast<std::size_t>(t)] = ok ? (t > 0 ? run[static_cast<std::size_t>(t - 1)] : 0) + 1 : 0;
    }
    for (Eigen::Index t = window - 1; t + 1 < t_len; ++t) {
        if (run[static_cast<std::size_t>(t)] < window) continue;
        const auto next = t + 1;
        if (tr.contains(next) && tr.contains(t - window + 1)) d.train_anchors.push_back(t);
        if (d.split.val.contains(next)) d.val_anchors.push_back(t);
        if (d.split.test.contains(next)) d.test_anchors.push_back(t);
    }
    if (d.train_anchors.empty()) {
        throw DataError("no training anchors: the training range must hold a full window after the covariate warm-up");
    }
    return d;
}

}  // namespace diffolio
