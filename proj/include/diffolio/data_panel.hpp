#pragma once

#include <algorithm>
#include <cmath>
#include <iostream>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "diffolio/csv.hpp"
#include "diffolio/date.hpp"
#include "diffolio/errors.hpp"
#include "diffolio/tensor.hpp"

namespace diffolio {

inline const std::vector<std::string> factor_columns = {"MKT", "SMB", "HML"};
inline const std::vector<std::string> macro_columns = {"tbl", "dp", "ep", "bm", "tms", "dfy", "ntis", "svar"};

/// Date-indexed asset returns with risk-free rate and the three factor series.
/// Excess returns are derived on construction.
struct ReturnPanel {
    std::vector<Date> dates;
    std::vector<std::string> assets;
    Matrix raw_returns;  // T × N
    Vector risk_free;    // T
    Matrix factors;      // T × 3 (MKT, SMB, HML)
    Matrix excess_returns;

    static ReturnPanel make(std::vector<Date> dates, std::vector<std::string> assets, Matrix raw, Vector rf,
                            Matrix factors) {
        const auto t = static_cast<Eigen::Index>(dates.size());
        if (raw.rows() != t || rf.size() != t || factors.rows() != t) {
            throw DataError("panel matrices must share the row count of dates");
        }
        if (raw.cols() != static_cast<Eigen::Index>(assets.size())) throw DataError("asset name count mismatch");
        if (factors.cols() != 3) throw DataError("factor matrix must have 3 columns");
        for (std::size_t i = 1; i < dates.size(); ++i) {
            if (!(dates[i - 1] < dates[i])) throw DataError("dates must be strictly increasing: " + dates[i].iso());
        }
        ReturnPanel p;
        p.dates = std::move(dates);
        p.assets = std::move(assets);
        p.raw_returns = std::move(raw);
        p.risk_free = std::move(rf);
        p.factors = std::move(factors);
        p.excess_returns = p.raw_returns.colwise() - p.risk_free;
        return p;
    }

    Eigen::Index rows() const { return static_cast<Eigen::Index>(dates.size()); }
    Eigen::Index num_assets() const { return raw_returns.cols(); }

    // Rows [first, first + count).
    ReturnPanel slice(Eigen::Index first, Eigen::Index count) const {
        std::vector<Date> d(dates.begin() + first, dates.begin() + first + count);
        return make(std::move(d), assets, raw_returns.middleRows(first, count), risk_free.segment(first, count),
                    factors.middleRows(first, count));
    }
};

struct MacroPanel {
    std::vector<Date> dates;
    std::vector<std::string> names;
    Matrix values;  // T_months × N_y
};

struct LoadOptions {
    // Median absolute return above this triggers the percent-units check.
    double percent_threshold = 1.0;
    bool percent_is_error = false;
};

namespace detail {

inline Date parse_date_cell(const std::string& cell, const std::string& path, std::size_t lineno) {
    const auto d = Date::parse(cell);
    if (!d) throw DataError(path + ":" + std::to_string(lineno) + ": cannot parse date '" + cell + "'");
    return *d;
}

inline void check_units(const Matrix& m, const std::string& path, const LoadOptions& opt) {
    if (m.size() == 0) return;
    std::vector<double> a(m.data(), m.data() + m.size());
    for (auto& v : a) v = std::abs(v);
    const auto mid = a.begin() + static_cast<std::ptrdiff_t>(a.size() / 2);
    std::nth_element(a.begin(), mid, a.end());
    if (*mid > opt.percent_threshold) {
        const std::string msg = path + ": median absolute return " + csv::fmt(*mid) +
                                " exceeds 1.0; values look percent-formatted (expected decimal returns)";
        if (opt.percent_is_error) throw DataError(msg);
        std::clog << "warning: " << msg << "\n";
    }
}

struct DatedRows {
    std::vector<Date> dates;
    Matrix values;
};

inline DatedRows read_dated(const std::string& path, const std::vector<std::string>& required_tail,
                            std::vector<std::string>* leading_names) {
    const csv::Table t = csv::read(path);
    if (t.header.empty() || t.header.front() != "date") throw DataError(path + ": first column must be 'date'");
    const std::size_t ncols = t.header.size() - 1;
    if (ncols < required_tail.size()) throw DataError(path + ": too few columns");
    for (std::size_t k = 0; k < required_tail.size(); ++k) {
        const auto& got = t.header[t.header.size() - required_tail.size() + k];
        if (got != required_tail[k]) {
            throw DataError(path + ": expected column '" + required_tail[k] + "', found '" + got + "'");
        }
    }
    if (leading_names) {
        leading_names->assign(t.header.begin() + 1, t.header.end() - static_cast<std::ptrdiff_t>(required_tail.size()));
    }
    DatedRows out;
    out.values.resize(static_cast<Eigen::Index>(t.rows.size()), static_cast<Eigen::Index>(ncols));
    for (std::size_t r = 0; r < t.rows.size(); ++r) {
        const auto ln = t.line_numbers[r];
        out.dates.push_back(parse_date_cell(t.rows[r][0], path, ln));
        for (std::size_t c = 0; c < ncols; ++c) {
            out.values(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) =
                csv::parse_double(t.rows[r][c + 1], path, ln);
        }
        if (r > 0 && !(out.dates[r - 1] < out.dates[r])) {
            throw DataError(path + ":" + std::to_string(ln) + ": dates must be strictly increasing");
        }
    }
    return out;
}

}  // namespace detail

/// Loads `date,<assets...>,RF` and `date,MKT,SMB,HML`, inner-joined on date.
inline ReturnPanel load_panel(const std::string& returns_path, const std::string& factors_path,
                              const LoadOptions& opt = {}) {
    std::vector<std::string> assets;
    const auto ret = detail::read_dated(returns_path, {"RF"}, &assets);
    if (assets.empty()) throw DataError(returns_path + ": no asset columns");
    const auto fac = detail::read_dated(factors_path, factor_columns, nullptr);
    if (fac.values.cols() != 3) throw DataError(factors_path + ": expected exactly MKT,SMB,HML");

    std::vector<std::pair<Eigen::Index, Eigen::Index>> joined;
    std::size_t j = 0;
    for (std::size_t i = 0; i < ret.dates.size(); ++i) {
        while (j < fac.dates.size() && fac.dates[j] < ret.dates[i]) ++j;
        if (j < fac.dates.size() && fac.dates[j] == ret.dates[i]) {
            joined.emplace_back(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
        }
    }
    if (joined.size() < 2) {
        throw DataError("date alignment between " + returns_path + " and " + factors_path + " leaves " +
                        std::to_string(joined.size()) + " rows (need at least 2)");
    }
    const auto t = static_cast<Eigen::Index>(joined.size());
    const auto n = static_cast<Eigen::Index>(assets.size());
    std::vector<Date> dates;
    Matrix raw(t, n), factors(t, 3);
    Vector rf(t);
    for (Eigen::Index r = 0; r < t; ++r) {
        const auto [ri, fi] = joined[static_cast<std::size_t>(r)];
        dates.push_back(ret.dates[static_cast<std::size_t>(ri)]);
        raw.row(r) = ret.values.row(ri).head(n);
        rf[r] = ret.values(ri, n);
        factors.row(r) = fac.values.row(fi);
    }
    detail::check_units(raw, returns_path, opt);
    detail::check_units(factors, factors_path, opt);
    return ReturnPanel::make(std::move(dates), std::move(assets), std::move(raw), std::move(rf), std::move(factors));
}

/// Loads a monthly macro file `date,<names...>`. The canonical column set is `macro_columns`;
/// other column sets are accepted as long as they are consistent.
inline MacroPanel load_macro(const std::string& path) {
    std::vector<std::string> names;
    auto rows = detail::read_dated(path, {}, &names);
    if (names.empty()) throw DataError(path + ": no covariate columns");
    if (rows.dates.empty()) throw DataError(path + ": no rows");
    return MacroPanel{std::move(rows.dates), std::move(names), std::move(rows.values)};
}

/// Forward-fills monthly observations onto the panel's daily dates.
inline Matrix align_macro_daily(const std::vector<Date>& daily_dates, const MacroPanel& macro) {
    Matrix out(static_cast<Eigen::Index>(daily_dates.size()), macro.values.cols());
    std::size_t m = 0;
    for (std::size_t t = 0; t < daily_dates.size(); ++t) {
        while (m + 1 < macro.dates.size() && macro.dates[m + 1] <= daily_dates[t]) ++m;
        if (macro.dates.empty() || daily_dates[t] < macro.dates[m]) {
            throw DataError("macro coverage: panel date " + daily_dates[t].iso() +
                            " precedes the first macro observation");
        }
        out.row(static_cast<Eigen::Index>(t)) = macro.values.row(static_cast<Eigen::Index>(m));
    }
    return out;
}

inline Matrix align_macro_daily(const ReturnPanel& panel, const MacroPanel& macro) {
    return align_macro_daily(panel.dates, macro);
}

/// Per-asset exogenous covariates, `date,<asset>.<name>,...`, one column per (asset, name).
struct AssetCovariates {
    std::vector<std::string> names;
    Tensor3 values;  // T_days × N × C, aligned to a panel's dates
};

inline AssetCovariates load_asset_covariates(const std::string& path, const ReturnPanel& panel) {
    std::vector<std::string> cols;
    const auto rows = detail::read_dated(path, {}, &cols);
    std::vector<std::string> names;
    std::map<std::pair<std::size_t, std::size_t>, std::size_t> where;  // (asset, name) -> column
    for (std::size_t c = 0; c < cols.size(); ++c) {
        const auto dot = cols[c].rfind('.');
        if (dot == std::string::npos) throw DataError(path + ": column '" + cols[c] + "' is not <asset>.<name>");
        const auto asset = cols[c].substr(0, dot);
        const auto name = cols[c].substr(dot + 1);
        const auto ait = std::find(panel.assets.begin(), panel.assets.end(), asset);
        if (ait == panel.assets.end()) throw DataError(path + ": unknown asset '" + asset + "'");
        auto nit = std::find(names.begin(), names.end(), name);
        if (nit == names.end()) {
            names.push_back(name);
            nit = names.end() - 1;
        }
        where[{static_cast<std::size_t>(ait - panel.assets.begin()), static_cast<std::size_t>(nit - names.begin())}] = c;
    }
    const auto n = panel.assets.size();
    if (where.size() != n * names.size()) throw DataError(path + ": every asset needs every covariate");
    AssetCovariates out{names, Tensor3(panel.dates.size(), n, names.size())};
    std::size_t r = 0;
    for (std::size_t t = 0; t < panel.dates.size(); ++t) {
        while (r < rows.dates.size() && rows.dates[r] < panel.dates[t]) ++r;
        if (r == rows.dates.size() || rows.dates[r] != panel.dates[t]) {
            throw DataError(path + ": no row for panel date " + panel.dates[t].iso());
        }
        for (const auto& [key, c] : where) {
            out.values(t, key.first, key.second) =
                rows.values(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
        }
    }
    return out;
}

struct SplitSpec {
    DateRange train;
    DateRange val;
    DateRange test;

    void validate() const {
        for (const auto* r : {&train, &val, &test}) {
            if (r->empty_interval()) throw DataError("split interval ends before it starts");
        }
        if (!(train.last < val.first) || !(val.last < test.first)) {
            throw DataError("split intervals must be disjoint and ordered train < val < test");
        }
    }
};

struct IndexRange {
    Eigen::Index first = 0;
    Eigen::Index count = 0;

    Eigen::Index end() const { return first + count; }
    bool contains(Eigen::Index i) const { return i >= first && i < end(); }
    bool operator==(const IndexRange&) const = default;
};

struct SplitIndices {
    IndexRange train;
    IndexRange val;
    IndexRange test;
};

inline IndexRange index_range_for(const std::vector<Date>& dates, const DateRange& r) {
    const auto lo = std::lower_bound(dates.begin(), dates.end(), r.first);
    const auto hi = std::upper_bound(dates.begin(), dates.end(), r.last);
    return IndexRange{lo - dates.begin(), std::max<Eigen::Index>(0, hi - lo)};
}

inline SplitIndices split_panel(const std::vector<Date>& dates, const SplitSpec& spec) {
    spec.validate();
    SplitIndices s{index_range_for(dates, spec.train), index_range_for(dates, spec.val),
                   index_range_for(dates, spec.test)};
    const char* names[] = {"train", "val", "test"};
    const IndexRange* ranges[] = {&s.train, &s.val, &s.test};
    for (int k = 0; k < 3; ++k) {
        if (ranges[k]->count == 0) throw DataError(std::string("split '") + names[k] + "' contains no panel dates");
    }
    return s;
}

inline SplitIndices split_panel(const ReturnPanel& panel, const SplitSpec& spec) { return split_panel(panel.dates, spec); }

/// Column-wise standardization fitted on training rows.
struct Normalizer {
    static constexpr double std_floor = 1e-8;

    Vector mean;
    Vector std;

    Matrix apply(const Matrix& x) const {
        check(x);
        return (x.rowwise() - mean.transpose()).array().rowwise() / std.transpose().array();
    }

    Matrix invert(const Matrix& z) const {
        check(z);
        return (z.array().rowwise() * std.transpose().array()).matrix().rowwise() + mean.transpose();
    }

    Eigen::Index columns() const { return mean.size(); }

private:
    void check(const Matrix& x) const {
        if (x.cols() != mean.size()) {
            throw DataError("normalizer shape mismatch: fitted on " + std::to_string(mean.size()) +
                            " columns, got " + std::to_string(x.cols()));
        }
    }
};

inline Normalizer fit_normalizer(const Matrix& columns) {
    if (columns.rows() < 2) throw DataError("normalizer fit needs at least 2 rows");
    Normalizer n;
    n.mean = columns.colwise().mean().transpose();
    const Matrix centered = columns.rowwise() - n.mean.transpose();
    n.std = (centered.colwise().squaredNorm() / static_cast<double>(columns.rows() - 1)).cwiseSqrt().transpose();
    n.std = n.std.cwiseMax(Normalizer::std_floor);
    return n;
}

}  // namespace diffolio
