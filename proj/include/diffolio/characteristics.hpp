#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "diffolio/data_panel.hpp"
#include "diffolio/errors.hpp"
#include "diffolio/tensor.hpp"

namespace diffolio {

// Column order of the characteristic tensor.
enum Characteristic : std::size_t {
    mom1m = 0,
    mom6m,
    mom12m,
    mom36m,
    chmom,
    retvol,
    maxret,
    beta,
    betasq,
    idiovol,
    characteristic_count
};

inline constexpr std::array<std::string_view, characteristic_count> characteristic_names = {
    "mom1m", "mom6m", "mom12m", "mom36m", "chmom", "retvol", "maxret", "beta", "betasq", "idiovol"};

// Window lengths in trading days; a trading month is 21 days.
struct CharacteristicWindows {
    int mom1m = 21;
    int mom6m = 126;
    int mom12m = 252;
    int mom36m = 756;
    int chmom_shift = 126;
    int vol = 21;
    int regression = 252;

    // First row index at which every characteristic is defined.
    int first_computable() const {
        return std::max({mom1m - 1, mom6m - 1 + chmom_shift, mom12m - 1, mom36m - 1, vol - 1, regression - 1});
    }
};

/// Cumulative return over the trailing k observations; undefined for t < k − 1.
inline Vector compute_momentum(const Vector& r, int k) {
    if (k < 1) throw DataError("momentum window must be >= 1");
    Vector out = Vector::Constant(r.size(), undefined_value);
    for (Eigen::Index t = k - 1; t < r.size(); ++t) {
        double prod = 1.0;
        for (Eigen::Index s = t - k + 1; s <= t; ++s) prod *= 1.0 + r[s];
        out[t] = prod - 1.0;
    }
    return out;
}

struct RollingOls {
    Matrix coef;      // T × (p + 1): intercept then slopes; NaN where undefined
    Vector resid_std;  // T; denominator window − p − 1
};

/// Rolling OLS with intercept of every column of `ys` on the regressors `x`, sharing one
/// factorization per window across all response columns.
inline std::vector<RollingOls> rolling_ols(const Matrix& ys, const Matrix& x, int window) {
    const auto t_len = x.rows();
    const auto p = x.cols();
    if (ys.rows() != t_len) throw DataError("rolling_ols: response and regressors differ in length");
    if (window <= p + 1) throw DataError("rolling_ols: window must exceed regressor count + 1");
    std::vector<RollingOls> out(static_cast<std::size_t>(ys.cols()));
    for (auto& o : out) {
        o.coef = Matrix::Constant(t_len, p + 1, undefined_value);
        o.resid_std = Vector::Constant(t_len, undefined_value);
    }
    const double dof = static_cast<double>(window - p - 1);
    for (Eigen::Index t = window - 1; t < t_len; ++t) {
        const auto first = t - window + 1;
        const Matrix xw = x.middleRows(first, window);
        const Eigen::RowVectorXd xbar = xw.colwise().mean();
        const Matrix xc = xw.rowwise() - xbar;
        const Eigen::ColPivHouseholderQR<Matrix> qr(xc);
        if (qr.rank() < p) continue;
        const Matrix yw = ys.middleRows(first, window);
        const Eigen::RowVectorXd ybar = yw.colwise().mean();
        const Matrix yc = yw.rowwise() - ybar;
        const Matrix slopes = qr.solve(yc);  // p × n
        const Matrix resid = yc - xc * slopes;
        for (Eigen::Index j = 0; j < ys.cols(); ++j) {
            auto& o = out[static_cast<std::size_t>(j)];
            o.coef(t, 0) = ybar[j] - xbar.dot(slopes.col(j));
            o.coef.row(t).tail(p) = slopes.col(j).transpose();
            o.resid_std[t] = std::sqrt(resid.col(j).squaredNorm() / dof);
        }
    }
    return out;
}

inline RollingOls rolling_ols(const Vector& y, const Matrix& x, int window) {
    return std::move(rolling_ols(Matrix(y), x, window).front());
}

struct CharacteristicTensor {
    Tensor3 values;  // T × N × 10
    Eigen::Index valid_from = 0;

    bool defined_at(Eigen::Index t) const {
        if (t < valid_from) return false;
        for (std::size_t i = 0; i < values.dim1(); ++i) {
            for (std::size_t c = 0; c < values.dim2(); ++c) {
                if (!is_defined(values(static_cast<std::size_t>(t), i, c))) return false;
            }
        }
        return true;
    }
};

/// Builds the ten return-based characteristics from a panel's excess returns and factors.
inline CharacteristicTensor compute_characteristics(const ReturnPanel& panel, const CharacteristicWindows& w = {}) {
    const auto t_len = panel.rows();
    const auto n = panel.num_assets();
    const auto first = w.first_computable();
    if (t_len <= first) {
        throw DataError("panel has " + std::to_string(t_len) + " rows; characteristics need " +
                        std::to_string(first + 1) + " rows (first computable row index " + std::to_string(first) +
                        ")");
    }
    CharacteristicTensor ct{Tensor3(static_cast<std::size_t>(t_len), static_cast<std::size_t>(n),
                                    characteristic_count, undefined_value),
                            0};
    auto put = [&](Characteristic c, Eigen::Index i, const Vector& series) {
        for (Eigen::Index t = 0; t < t_len; ++t) {
            ct.values(static_cast<std::size_t>(t), static_cast<std::size_t>(i), c) = series[t];
        }
    };

    const Matrix& ex = panel.excess_returns;
    for (Eigen::Index i = 0; i < n; ++i) {
        const Vector r = ex.col(i);
        const Vector m6 = compute_momentum(r, w.mom6m);
        put(mom1m, i, compute_momentum(r, w.mom1m));
        put(mom6m, i, m6);
        put(mom12m, i, compute_momentum(r, w.mom12m));
        put(mom36m, i, compute_momentum(r, w.mom36m));

        Vector ch = Vector::Constant(t_len, undefined_value);
        for (Eigen::Index t = w.chmom_shift; t < t_len; ++t) ch[t] = m6[t] - m6[t - w.chmom_shift];
        put(chmom, i, ch);

        Vector vol = Vector::Constant(t_len, undefined_value);
        Vector mx = Vector::Constant(t_len, undefined_value);
        for (Eigen::Index t = w.vol - 1; t < t_len; ++t) {
            const auto seg = r.segment(t - w.vol + 1, w.vol);
            const double mean = seg.mean();
            vol[t] = std::sqrt((seg.array() - mean).square().sum() / static_cast<double>(w.vol - 1));
            mx[t] = seg.maxCoeff();
        }
        put(retvol, i, vol);
        put(maxret, i, mx);
    }

    const auto capm = rolling_ols(ex, panel.factors.leftCols(1), w.regression);
    const auto ff3 = rolling_ols(ex, panel.factors, w.regression);
    for (Eigen::Index i = 0; i < n; ++i) {
        const auto& c = capm[static_cast<std::size_t>(i)];
        const auto& f = ff3[static_cast<std::size_t>(i)];
        for (Eigen::Index t = 0; t < t_len; ++t) {
            const double b = c.coef(t, 1);
            ct.values(static_cast<std::size_t>(t), static_cast<std::size_t>(i), beta) = b;
            ct.values(static_cast<std::size_t>(t), static_cast<std::size_t>(i), betasq) = b * b;
            ct.values(static_cast<std::size_t>(t), static_cast<std::size_t>(i), idiovol) = f.resid_std[t];
        }
    }

    // Rank-deficient regression windows can leave later holes; consumers check per date.
    Eigen::Index valid = t_len;
    for (Eigen::Index t = first; t < t_len && valid == t_len; ++t) {
        bool all = true;
        for (Eigen::Index i = 0; i < n && all; ++i) {
            for (std::size_t c = 0; c < characteristic_count && all; ++c) {
                all = is_defined(ct.values(static_cast<std::size_t>(t), static_cast<std::size_t>(i), c));
            }
        }
        if (all) valid = t;
    }
    if (valid == t_len) throw DataError("no date has all characteristics defined");
    ct.valid_from = valid;
    return ct;
}

// ---- cache file ------------------------------------------------------------
//
// Layout (little-endian):
//   char[8]  "DFCHAR01"
//   u64      panel hash, u64 config hash
//   u64      T, u64 N, u64 C, i64 valid_from
//   f64[T*N*C] values, channel-fastest; undefined entries are NaN

inline std::uint64_t fnv1a(const void* data, std::size_t len, std::uint64_t h = 0xcbf29ce484222325ULL) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < len; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline std::uint64_t panel_hash(const ReturnPanel& p) {
    std::uint64_t h = fnv1a(p.excess_returns.data(), sizeof(double) * static_cast<std::size_t>(p.excess_returns.size()));
    h = fnv1a(p.factors.data(), sizeof(double) * static_cast<std::size_t>(p.factors.size()), h);
    for (const auto& d : p.dates) {
        const int v = d.days();
        h = fnv1a(&v, sizeof v, h);
    }
    return h;
}

inline std::uint64_t windows_hash(const CharacteristicWindows& w) {
    const std::array<int, 7> v{w.mom1m, w.mom6m, w.mom12m, w.mom36m, w.chmom_shift, w.vol, w.regression};
    return fnv1a(v.data(), sizeof(int) * v.size());
}

inline void write_characteristics_cache(const std::string& path, const CharacteristicTensor& ct,
                                        std::uint64_t panel_h, std::uint64_t config_h) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write " + path);
    out.write("DFCHAR01", 8);
    const std::uint64_t dims[5] = {panel_h, config_h, ct.values.dim0(), ct.values.dim1(), ct.values.dim2()};
    out.write(reinterpret_cast<const char*>(dims), sizeof dims);
    const std::int64_t vf = ct.valid_from;
    out.write(reinterpret_cast<const char*>(&vf), sizeof vf);
    out.write(reinterpret_cast<const char*>(ct.values.data().data()),
              static_cast<std::streamsize>(sizeof(double) * ct.values.data().size()));
}

// Returns nullopt when the file is missing or keyed to a different panel/config.
inline std::optional<CharacteristicTensor> read_characteristics_cache(const std::string& path, std::uint64_t panel_h,
                                                                      std::uint64_t config_h) {
    std::ifstream in(path, std::ios::binary);
    if (!in) return std::nullopt;
    char magic[8];
    std::uint64_t dims[5];
    std::int64_t vf = 0;
    if (!in.read(magic, 8) || std::memcmp(magic, "DFCHAR01", 8) != 0) return std::nullopt;
    if (!in.read(reinterpret_cast<char*>(dims), sizeof dims) || !in.read(reinterpret_cast<char*>(&vf), sizeof vf)) {
        return std::nullopt;
    }
    if (dims[0] != panel_h || dims[1] != config_h) return std::nullopt;
    CharacteristicTensor ct{Tensor3(dims[2], dims[3], dims[4]), vf};
    if (!in.read(reinterpret_cast<char*>(ct.values.data().data()),
                 static_cast<std::streamsize>(sizeof(double) * ct.values.data().size()))) {
        return std::nullopt;
    }
    return ct;
}

}  // namespace diffolio
