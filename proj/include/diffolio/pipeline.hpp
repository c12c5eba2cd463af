#pragma once

#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "diffolio/characteristics.hpp"
#include "diffolio/checkpoint.hpp"
#include "diffolio/config.hpp"
#include "diffolio/data_panel.hpp"
#include "diffolio/dataset.hpp"
#include "diffolio/portfolio.hpp"
#include "diffolio/rng.hpp"
#include "diffolio/sampler.hpp"
#include "diffolio/scoring.hpp"

namespace diffolio {

// ---- inputs ---------------------------------------------------------------------------

struct LoadedInputs {
    ReturnPanel panel;
    Matrix sys;  // T × N_y, forward-filled
    std::vector<std::string> sys_names;
    std::optional<AssetCovariates> extra;
};

inline LoadedInputs load_inputs(const RunConfig& cfg) {
    cfg.require_data_paths();
    LoadOptions lo;
    lo.percent_is_error = cfg.data.percent_is_error;
    LoadedInputs in;
    in.panel = load_panel(cfg.data.returns, cfg.data.factors, lo);
    const auto macro = load_macro(cfg.data.macro);
    in.sys = align_macro_daily(in.panel, macro);
    in.sys_names = macro.names;
    if (!cfg.data.asset_covariates.empty()) in.extra = load_asset_covariates(cfg.data.asset_covariates, in.panel);
    return in;
}

inline std::string characteristics_cache_path(const RunConfig& cfg) {
    return (std::filesystem::path(cfg.output_dir) / "characteristics.bin").string();
}

/// Uses the cache in the output directory when it is keyed to this panel, else computes.
inline CharacteristicTensor characteristics_for(const RunConfig& cfg, const ReturnPanel& panel) {
    const CharacteristicWindows w;
    if (auto cached = read_characteristics_cache(characteristics_cache_path(cfg), panel_hash(panel), windows_hash(w))) {
        return *cached;
    }
    return compute_characteristics(panel, w);
}

inline PreparedData prepare_inputs(const RunConfig& cfg, const LoadedInputs& in,
                                   const FittedNormalizers* fitted = nullptr) {
    std::optional<CharacteristicTensor> chars;
    if (cfg.features.use_characteristics) chars = characteristics_for(cfg, in.panel);
    return prepare_data(in.panel, chars ? &*chars : nullptr, in.extra ? &*in.extra : nullptr, in.sys, in.sys_names,
                        cfg.split, cfg.model.window, cfg.features, fitted);
}

inline DenoiserConfig model_config_for(const RunConfig& cfg, const PreparedData& data) {
    DenoiserConfig m = cfg.model;
    data.apply_to(m);
    m.validate();
    return m;
}

inline const std::vector<Eigen::Index>& split_anchors(const PreparedData& d, const std::string& split) {
    if (split == "train") return d.train_anchors;
    if (split == "val") return d.val_anchors;
    if (split == "test") return d.test_anchors;
    throw ConfigError("sample.split", "must be one of train, val, test");
}

inline Checkpoint make_checkpoint(const DenoiserParams& params, const AdamState& adam, int step,
                                  const PreparedData& data, const RunConfig& cfg) {
    Checkpoint ck;
    ck.params = params;
    ck.adam = adam;
    ck.step = step;
    ck.norms = data.norms;
    ck.train_cov = data.train_cov;
    ck.assets = data.assets;
    ck.asset_features = data.asset_feature_names;
    ck.sys_names = data.sys_names;
    ck.diffusion_steps = cfg.train.diffusion_steps;
    ck.beta_start = cfg.train.beta_start;
    ck.beta_end = cfg.train.beta_end;
    ck.seed = cfg.seed;
    ck.lambda_corr = cfg.train.lambda_corr;
    ck.standardize_targets = cfg.features.standardize_targets;
    return ck;
}

/// Checks that a checkpoint was trained on data shaped like `data`.
inline void check_compatible(const Checkpoint& ck, const PreparedData& data) {
    if (ck.assets != data.assets) throw DataError("checkpoint assets differ from the data's assets");
    if (ck.asset_features != data.asset_feature_names) {
        throw DataError("checkpoint asset covariates differ from the configured features");
    }
    if (ck.sys_names != data.sys_names) throw DataError("checkpoint systematic covariates differ from the data's");
    if (ck.params.config.window != data.window) throw ConfigError("model.window", "differs from the checkpoint");
}

/// Realized excess returns on each ensemble's date.
inline Matrix realized_for(const ReturnPanel& panel, const std::vector<ForecastEnsemble>& ens) {
    Matrix out(static_cast<Eigen::Index>(ens.size()), panel.num_assets());
    std::size_t r = 0;
    for (std::size_t k = 0; k < ens.size(); ++k) {
        while (r < panel.dates.size() && panel.dates[r] < ens[k].date) ++r;
        if (r == panel.dates.size() || panel.dates[r] != ens[k].date) {
            // dates may repeat or go backwards in hand-made files; fall back to a search
            const auto it = std::lower_bound(panel.dates.begin(), panel.dates.end(), ens[k].date);
            if (it == panel.dates.end() || *it != ens[k].date) {
                throw DataError("ensemble date " + ens[k].date.iso() + " is not in the return panel");
            }
            r = static_cast<std::size_t>(it - panel.dates.begin());
        }
        if (ens[k].samples.cols() != panel.num_assets()) throw DataError("ensemble asset count differs from the panel");
        out.row(static_cast<Eigen::Index>(k)) = panel.excess_returns.row(static_cast<Eigen::Index>(r));
    }
    return out;
}

// ---- climatology baseline ----------------------------------------------------------------

/// Unconditional Gaussian fitted on the training rows; K draws per forecast date.
inline std::vector<ForecastEnsemble> climatology_ensembles(const Matrix& train_excess, const std::vector<Date>& dates,
                                                           int k, std::uint64_t seed) {
    const Vector mu = train_excess.colwise().mean().transpose();
    const Matrix cov = sample_covariance(train_excess);
    Eigen::LLT<Matrix> llt(cov + 1e-14 * Matrix::Identity(cov.rows(), cov.cols()));
    if (llt.info() != Eigen::Success) throw NumericError("climatology covariance is not positive definite");
    const Matrix l = llt.matrixL();
    std::vector<ForecastEnsemble> out;
    for (std::size_t d = 0; d < dates.size(); ++d) {
        Rng rng(substream_seed(seed, 0x636c696dULL, static_cast<std::uint64_t>(dates[d].days())));
        NormalSampler ns;
        Matrix s(k, mu.size());
        for (int j = 0; j < k; ++j) s.row(j) = (mu + l * normal_vector(rng, ns, mu.size())).transpose();
        out.push_back({dates[d], s});
    }
    return out;
}

// ---- strategies -------------------------------------------------------------------------

struct StrategyRun {
    std::string name;
    Matrix weights;  // T × N
    std::vector<char> fallback;
    BacktestReport report;
    bool with_ce = true;
};

/// MVP, GOP and the equal-weight benchmark on the ensembles' dates.
inline std::vector<StrategyRun> run_strategies(const std::vector<ForecastEnsemble>& ens, const Matrix& realized,
                                               const ParallelOptions& par = {}) {
    const auto t = static_cast<Eigen::Index>(ens.size());
    const auto n = realized.cols();
    StrategyRun mvp{"MVP", Matrix(t, n), std::vector<char>(static_cast<std::size_t>(t)), {}, false};
    StrategyRun gop{"GOP", Matrix(t, n), std::vector<char>(static_cast<std::size_t>(t)), {}, true};
    parallel_for(ens.size(), par, [&](std::size_t k) {
        const auto m = solve_mvp(estimate_moments(ens[k]));
        mvp.weights.row(static_cast<Eigen::Index>(k)) = m.w.transpose();
        mvp.fallback[k] = m.fallback;
        const auto g = solve_gop(ens[k]);
        gop.weights.row(static_cast<Eigen::Index>(k)) = g.w.transpose();
        gop.fallback[k] = g.fallback;
    });
    StrategyRun ew{"EW", Matrix::Constant(t, n, 1.0 / static_cast<double>(n)), {}, {}, true};
    std::vector<StrategyRun> out{std::move(mvp), std::move(gop), std::move(ew)};
    for (auto& s : out) s.report = backtest(s.weights, realized);
    return out;
}

struct YearlySharpe {
    int year = 0;
    double sr = 0.0;
};

/// Annualized Sharpe over dates in years (Y − span, Y], one row per year present.
inline std::vector<YearlySharpe> rolling_yearly_sharpe(const std::vector<Date>& dates, const Vector& r,
                                                       int span_years = 3) {
    std::vector<YearlySharpe> out;
    std::vector<int> years;
    for (const auto& d : dates) {
        if (years.empty() || years.back() != d.year()) years.push_back(d.year());
    }
    for (int y : years) {
        std::vector<double> sub;
        for (std::size_t k = 0; k < dates.size(); ++k) {
            if (dates[k].year() <= y && dates[k].year() > y - span_years) sub.push_back(r[static_cast<Eigen::Index>(k)]);
        }
        if (sub.size() < 2) continue;
        const auto rep = summarize_returns(Eigen::Map<const Vector>(sub.data(), static_cast<Eigen::Index>(sub.size())));
        out.push_back({y, rep.sr});
    }
    return out;
}

// ---- synthetic fixture ----------------------------------------------------------------------

/// Gaussian daily returns in two equicorrelated blocks. Each asset carries a persistent
/// AR(1) signal that shifts its next-day mean; the signals' innovations share the block
/// correlation, so conditional means co-move like the returns do. One AR(1) systematic
/// series shifts every asset's mean.
struct SyntheticSpec {
    int days = 3000;
    int assets = 4;
    std::uint64_t seed = 20240611;
    double vol = 0.01;            // daily return volatility of the noise
    double block_corr = 0.6;      // within-block correlation; blocks of 2 assets
    double signal_phi = 0.98;     // AR(1) coefficient of each asset signal (unit stationary variance)
    double signal_shift = 1.0;    // next-day mean shift per unit signal, in units of vol
    double sys_phi = 0.95;        // AR(1) coefficient of the systematic covariate
    double sys_shift = 0.25;      // next-day mean shift per unit systematic covariate, in units of vol
    double drift = 2e-4;          // unconditional daily excess mean
    double rf = 1e-4;             // daily risk-free rate
    Date start = Date::from_ymd(2000, 1, 3);
};

struct SyntheticData {
    ReturnPanel panel;
    MacroPanel sys;  // daily observations
    AssetCovariates signals;
    SplitSpec split;
};

inline bool is_weekend(Date d) {
    const int dow = ((d.days() % 7) + 7 + 4) % 7;  // 0 = Sunday; day 0 was a Thursday
    return dow == 0 || dow == 6;
}

inline Matrix block_correlation(int n, double rho) {
    Matrix c = Matrix::Identity(n, n);
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j < n; ++j) {
            if (i != j && i / 2 == j / 2) c(i, j) = rho;
        }
    }
    return c;
}

inline SyntheticData make_synthetic(const SyntheticSpec& s) {
    if (s.days < 100 || s.assets < 1) throw ConfigError("synthetic", "needs at least 100 days and 1 asset");
    const int n = s.assets;
    Rng rng(s.seed);
    NormalSampler ns;
    const Matrix l = Eigen::LLT<Matrix>(block_correlation(n, s.block_corr)).matrixL();

    std::vector<Date> dates;
    for (Date d = s.start; static_cast<int>(dates.size()) < s.days; d = d.next_day()) {
        if (!is_weekend(d)) dates.push_back(d);
    }
    Matrix raw(s.days, n), factors(s.days, 3);
    Vector rf = Vector::Constant(s.days, s.rf);
    Matrix sys(s.days, 1);
    Tensor3 sig(static_cast<std::size_t>(s.days), static_cast<std::size_t>(n), 1);

    Vector signal = l * normal_vector(rng, ns, n);
    double y = ns(rng);
    const double sig_innov = std::sqrt(1.0 - s.signal_phi * s.signal_phi);
    const double sys_innov = std::sqrt(1.0 - s.sys_phi * s.sys_phi);
    for (int t = 0; t < s.days; ++t) {
        const Vector z = l * normal_vector(rng, ns, n);
        // today's return responds to yesterday's covariates
        const Vector excess = Vector::Constant(n, s.drift) +
                              s.vol * (s.signal_shift * signal + Vector::Constant(n, s.sys_shift * y) + z);
        raw.row(t) = (excess.array() + s.rf).matrix().transpose();
        factors(t, 0) = excess.mean();
        factors(t, 1) = 0.005 * ns(rng);
        factors(t, 2) = 0.005 * ns(rng);
        // covariates observed at the close of t
        signal = s.signal_phi * signal + sig_innov * (l * normal_vector(rng, ns, n));
        for (int i = 0; i < n; ++i) sig(static_cast<std::size_t>(t), static_cast<std::size_t>(i), 0) = signal[i];
        y = s.sys_phi * y + sys_innov * ns(rng);
        sys(t, 0) = y;
    }

    std::vector<std::string> assets;
    for (int i = 0; i < n; ++i) assets.push_back("A" + std::to_string(i + 1));
    SyntheticData out;
    out.panel = ReturnPanel::make(dates, assets, raw, rf, factors);
    out.sys = MacroPanel{dates, {"ar1"}, sys};
    out.signals = AssetCovariates{{"signal"}, sig};
    // roughly 73% / 10% / 17% of the days
    const auto at = [&](double f) { return static_cast<std::size_t>(f * s.days); };
    out.split.train = {dates.front(), dates[at(0.7333) - 1]};
    out.split.val = {dates[at(0.7333)], dates[at(0.8333) - 1]};
    out.split.test = {dates[at(0.8333)], dates.back()};
    return out;
}

/// Model and training settings sized for a desktop run on the synthetic fixture.
inline RunConfig synthetic_run_config() {
    RunConfig c;
    c.model.window = 21;
    c.model.hidden = 32;
    c.model.heads = 2;
    c.model.mlp_hidden = 128;
    c.model.step_embed_dim = 16;
    c.train.diffusion_steps = 200;
    c.train.steps = 5000;
    c.train.batch = 128;
    c.train.lr_max = 1e-3;
    c.train.warmup = 250;
    c.train.val_every = 1000;
    c.train.val_samples = 16;
    c.train.val_max_dates = 64;
    c.train.log_every = 1;
    c.sample.ddim_steps = 20;
    c.sample.samples = 64;
    return c;
}

/// Writes returns.csv, factors.csv, macro.csv, asset_covariates.csv and config.toml into
/// `dir`; returns the config path.
inline std::string write_synthetic_fixture(const std::string& dir, const SyntheticSpec& spec = {},
                                           std::optional<RunConfig> base = std::nullopt) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    const auto d = make_synthetic(spec);
    const auto path = [&](const char* f) { return (fs::path(dir) / f).string(); };
    auto open = [&](const char* f) {
        std::ofstream o(path(f));
        if (!o) throw DataError("cannot write " + path(f));
        return o;
    };
    {
        auto o = open("returns.csv");
        o << "date";
        for (const auto& a : d.panel.assets) o << "," << a;
        o << ",RF\n";
        for (Eigen::Index t = 0; t < d.panel.rows(); ++t) {
            o << d.panel.dates[static_cast<std::size_t>(t)].iso();
            for (Eigen::Index i = 0; i < d.panel.num_assets(); ++i) o << "," << csv::fmt(d.panel.raw_returns(t, i));
            o << "," << csv::fmt(d.panel.risk_free[t]) << "\n";
        }
    }
    {
        auto o = open("factors.csv");
        o << "date,MKT,SMB,HML\n";
        for (Eigen::Index t = 0; t < d.panel.rows(); ++t) {
            o << d.panel.dates[static_cast<std::size_t>(t)].iso() << "," << csv::fmt(d.panel.factors(t, 0)) << ","
              << csv::fmt(d.panel.factors(t, 1)) << "," << csv::fmt(d.panel.factors(t, 2)) << "\n";
        }
    }
    {
        auto o = open("macro.csv");
        o << "date," << d.sys.names.front() << "\n";
        for (std::size_t t = 0; t < d.sys.dates.size(); ++t) {
            o << d.sys.dates[t].iso() << "," << csv::fmt(d.sys.values(static_cast<Eigen::Index>(t), 0)) << "\n";
        }
    }
    {
        auto o = open("asset_covariates.csv");
        o << "date";
        for (const auto& a : d.panel.assets) o << "," << a << ".signal";
        o << "\n";
        for (std::size_t t = 0; t < d.panel.dates.size(); ++t) {
            o << d.panel.dates[t].iso();
            for (std::size_t i = 0; i < d.panel.assets.size(); ++i) o << "," << csv::fmt(d.signals.values(t, i, 0));
            o << "\n";
        }
    }
    RunConfig c = base ? *base : synthetic_run_config();
    c.data = {"returns.csv", "factors.csv", "macro.csv", "asset_covariates.csv", false};
    c.split = d.split;
    c.output_dir = "out";
    {
        auto o = open("config.toml");
        o << "# synthetic fixture: " << spec.assets << " assets, " << spec.days << " business days, seed " << spec.seed
          << "\n\n"
          << config_to_toml(c);
    }
    return path("config.toml");
}

}  // namespace diffolio
