#pragma once

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "diffolio/checkpoint.hpp"
#include "diffolio/config.hpp"
#include "diffolio/ensemble.hpp"
#include "diffolio/errors.hpp"
#include "diffolio/pipeline.hpp"
#include "diffolio/plot_svg.hpp"
#include "diffolio/portfolio.hpp"
#include "diffolio/sampler.hpp"
#include "diffolio/scoring.hpp"
#include "diffolio/trainer.hpp"

// Command-line front end. Every subcommand reads a RunConfig and writes its artifacts
// under the run's output directory:
//   ingest    ingest.json                          (--synthetic: fixture CSVs + config.toml)
//   features  characteristics.bin, features.json
//   train     checkpoint.bin (best by validation ES), checkpoint_last.bin, train_log.csv
//   sample    ensembles.bin | ensembles.csv
//   evaluate  scores.csv, rolling_scores.csv
//   backtest  backtest.csv, weights_mvp.csv, weights_gop.csv, portfolio_returns.csv
//   report    report/ with the CSVs above plus SVG figures; never touches model or data files
namespace diffolio::cli {

namespace fs = std::filesystem;

struct Options {
    std::string config;
    std::optional<int> threads;
    bool deterministic = false;
    std::optional<std::uint64_t> seed;
    std::string out;
    bool quiet = false;

    // ingest
    bool synthetic = false;
    int days = 3000;
    std::uint64_t fixture_seed = SyntheticSpec{}.seed;
    // train
    std::optional<int> steps;
    // sample / evaluate / backtest / report
    std::string checkpoint;
    std::string ensembles;
    std::optional<int> samples;
    std::string split;
    std::string format = "bin";
};

namespace detail {

inline std::optional<std::uint64_t> env_u64(const char* name) {
    const char* v = std::getenv(name);
    if (!v || !*v) return std::nullopt;
    std::uint64_t out = 0;
    const std::string s(v);
    const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
    if (ec != std::errc() || p != s.data() + s.size()) throw ConfigError(name, "expected a non-negative integer");
    return out;
}

/// Config file plus environment and flag overrides (flag > environment > file).
inline RunConfig load_run_config(const Options& o) {
    if (o.config.empty()) throw UsageError("--config is required");
    RunConfig c = validate_config(o.config);
    if (auto s = env_u64("DIFFOLIO_SEED")) c.seed = *s;
    if (auto t = env_u64("DIFFOLIO_THREADS")) c.threads = static_cast<int>(*t);
    if (o.seed) c.seed = *o.seed;
    if (o.threads) c.threads = *o.threads;
    if (o.deterministic) c.deterministic = true;
    if (!o.out.empty()) c.output_dir = o.out;
    if (o.steps) c.train.steps = *o.steps;
    if (o.samples) c.sample.samples = *o.samples;
    if (!o.split.empty()) c.sample.split = o.split;
    c.train.seed = c.seed;
    if (c.train.steps > 0 && c.train.warmup >= c.train.steps) {
        // a short override run keeps the schedule's shape
        c.train.warmup = c.train.steps / 10;
    }
    c.validate();
    return c;
}

inline std::string out_path(const RunConfig& c, const std::string& name) {
    fs::create_directories(c.output_dir);
    return (fs::path(c.output_dir) / name).string();
}

inline std::string ensembles_path(const RunConfig& c, const Options& o) {
    if (!o.ensembles.empty()) return o.ensembles;
    const auto bin = (fs::path(c.output_dir) / "ensembles.bin").string();
    const auto csv = (fs::path(c.output_dir) / "ensembles.csv").string();
    if (fs::exists(bin)) return bin;
    if (fs::exists(csv)) return csv;
    throw DataError("no ensembles found in " + c.output_dir + " (run `sample` first or pass --ensembles)");
}

inline void write_text(const std::string& path, const std::string& text) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot write " + path);
    out << text;
}

inline nlohmann::json range_json(const std::vector<Date>& dates, const IndexRange& r) {
    if (r.count == 0) return {{"rows", 0}};
    return {{"first", dates[static_cast<std::size_t>(r.first)].iso()},
            {"last", dates[static_cast<std::size_t>(r.end() - 1)].iso()},
            {"rows", r.count}};
}

inline Matrix train_rows(const ReturnPanel& panel, const SplitSpec& spec) {
    const auto s = split_panel(panel, spec);
    if (s.train.count < 2) throw DataError("training split has fewer than 2 rows");
    return panel.excess_returns.middleRows(s.train.first, s.train.count);
}

inline std::vector<Date> dates_of(const std::vector<ForecastEnsemble>& ens) {
    std::vector<Date> d;
    for (const auto& e : ens) d.push_back(e.date);
    return d;
}

inline int ensemble_size(const std::vector<ForecastEnsemble>& ens) {
    if (ens.empty()) throw DataError("ensemble file holds no forecasts");
    return static_cast<int>(ens.front().size());
}

inline double fractional_year(Date d) {
    const int y = d.year();
    const double start = Date::from_ymd(y, 1, 1).days();
    const double end = Date::from_ymd(y + 1, 1, 1).days();
    return y + (d.days() - start) / (end - start);
}

inline void write_scores_csv(const std::string& path, const std::vector<std::pair<std::string, ScoreReport>>& rows) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot write " + path);
    out << "source,crps_mean,crps_std,es,corr_score,dates\n";
    for (const auto& [name, r] : rows) {
        out << name << "," << csv::fmt(r.crps_mean) << "," << csv::fmt(r.crps_std) << "," << csv::fmt(r.es) << ","
            << (r.corr_defined ? csv::fmt(r.corr_score) : std::string()) << "," << r.dates << "\n";
    }
}

inline void write_rolling_csv(const std::string& path,
                              const std::vector<std::pair<std::string, std::vector<YearlyScore>>>& rows) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot write " + path);
    out << "source,year,crps_mean,es,dates\n";
    for (const auto& [name, ys] : rows) {
        for (const auto& y : ys) {
            out << name << "," << y.year << "," << csv::fmt(y.scores.crps_mean) << "," << csv::fmt(y.scores.es) << ","
                << y.scores.dates << "\n";
        }
    }
}

struct Scored {
    std::vector<std::pair<std::string, ScoreReport>> totals;
    std::vector<std::pair<std::string, std::vector<YearlyScore>>> rolling;
};

inline Scored score_all(const RunConfig& c, const ReturnPanel& panel, const std::vector<ForecastEnsemble>& ens) {
    const Matrix real = realized_for(panel, ens);
    const auto clim = climatology_ensembles(train_rows(panel, c.split), dates_of(ens), ensemble_size(ens), c.seed);
    Scored s;
    s.totals = {{"model", evaluate_forecasts(real, ens)}, {"climatology", evaluate_forecasts(real, clim)}};
    s.rolling = {{"model", rolling_yearly_scores(real, ens)}, {"climatology", rolling_yearly_scores(real, clim)}};
    return s;
}

inline void write_strategy_files(const std::string& dir, const std::vector<StrategyRun>& runs,
                                 const std::vector<Date>& dates, const std::vector<std::string>& assets) {
    std::vector<NamedReport> rows;
    for (const auto& r : runs) rows.push_back({r.name, r.report, r.with_ce});
    write_backtest_csv((fs::path(dir) / "backtest.csv").string(), rows);
    for (const auto& r : runs) {
        if (r.name == "EW") continue;
        std::string lower = r.name;
        for (auto& ch : lower) ch = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
        write_weights_csv((fs::path(dir) / ("weights_" + lower + ".csv")).string(), dates, assets, r.weights,
                          &r.fallback);
    }
    std::ofstream out(fs::path(dir) / "portfolio_returns.csv");
    if (!out) throw DataError("cannot write portfolio_returns.csv in " + dir);
    out << "date";
    for (const auto& r : runs) out << "," << r.name;
    out << "\n";
    for (std::size_t t = 0; t < dates.size(); ++t) {
        out << dates[t].iso();
        for (const auto& r : runs) out << "," << csv::fmt(r.report.daily_returns[static_cast<Eigen::Index>(t)]);
        out << "\n";
    }
}

// ---- subcommands -------------------------------------------------------------------------

inline int cmd_ingest(const Options& o, std::ostream& out) {
    if (o.synthetic) {
        std::string dir = o.out;
        if (dir.empty() && !o.config.empty()) dir = load_run_config(o).output_dir;
        if (dir.empty()) dir = "synthetic";
        SyntheticSpec spec;
        spec.days = o.days;
        spec.seed = o.fixture_seed;
        const auto path = write_synthetic_fixture(dir, spec);
        out << "wrote synthetic fixture (" << spec.days << " days, " << spec.assets << " assets) and " << path << "\n";
        return 0;
    }
    const auto c = load_run_config(o);
    const auto in = load_inputs(c);
    c.split.validate();
    const auto s = split_panel(in.panel, c.split);
    nlohmann::json j;
    j["assets"] = in.panel.assets;
    j["rows"] = in.panel.rows();
    j["first_date"] = in.panel.dates.front().iso();
    j["last_date"] = in.panel.dates.back().iso();
    j["systematic_covariates"] = in.sys_names;
    j["asset_covariates"] = in.extra ? in.extra->names : std::vector<std::string>{};
    j["split"] = {{"train", range_json(in.panel.dates, s.train)},
                  {"val", range_json(in.panel.dates, s.val)},
                  {"test", range_json(in.panel.dates, s.test)}};
    write_text(out_path(c, "ingest.json"), j.dump(2) + "\n");
    out << "ingested " << in.panel.rows() << " rows x " << in.panel.num_assets() << " assets ("
        << in.panel.dates.front().iso() << " .. " << in.panel.dates.back().iso() << ")\n";
    return 0;
}

inline int cmd_features(const Options& o, std::ostream& out) {
    const auto c = load_run_config(o);
    const auto in = load_inputs(c);
    const CharacteristicWindows w;
    const auto chars = compute_characteristics(in.panel, w);
    write_characteristics_cache(out_path(c, "characteristics.bin"), chars, panel_hash(in.panel), windows_hash(w));
    const auto data = prepare_inputs(c, in);
    nlohmann::json j;
    j["valid_from"] = in.panel.dates[static_cast<std::size_t>(chars.valid_from)].iso();
    j["asset_features"] = data.asset_feature_names;
    j["systematic_covariates"] = data.sys_names;
    j["anchors"] = {{"train", data.train_anchors.size()},
                    {"val", data.val_anchors.size()},
                    {"test", data.test_anchors.size()}};
    write_text(out_path(c, "features.json"), j.dump(2) + "\n");
    out << "features: " << data.z_dim() << " asset covariates, " << data.sys_dim() << " systematic; anchors train "
        << data.train_anchors.size() << ", val " << data.val_anchors.size() << ", test " << data.test_anchors.size()
        << "\n";
    return 0;
}

inline int cmd_train(const Options& o, std::ostream& out) {
    const auto c = load_run_config(o);
    const auto in = load_inputs(c);
    const auto data = prepare_inputs(c, in);
    const auto mc = model_config_for(c, data);
    const auto init = init_params(mc, c.seed);
    const auto sched = c.train.schedule();
    const auto best_path = out_path(c, "checkpoint.bin");
    const auto last_path = out_path(c, "checkpoint_last.bin");
    const auto log_path = out_path(c, "train_log.csv");

    TrainHooks hooks;
    const int every = std::max(1, c.train.steps / 10);
    if (!o.quiet) {
        hooks.on_log = [&](const TrainLogRow& r) {
            if (r.step % every == 0 || r.val_es) {
                out << "step " << r.step << " lr " << csv::fmt(r.lr) << " mse " << csv::fmt(r.mse) << " l_corr "
                    << csv::fmt(r.l_corr);
                if (r.val_es) out << " val_es " << csv::fmt(*r.val_es);
                out << "\n";
            }
        };
    }
    hooks.on_checkpoint = [&](const TrainState& s) {
        save_checkpoint(out_path(c, "checkpoint_step" + std::to_string(s.step) + ".bin"),
                        make_checkpoint(s.params, s.adam, s.step, data, c));
    };
    out << "training " << mc.assets << " assets, " << init.values.size() << " parameters, " << c.train.steps
        << " steps\n";
    TrainResult res;
    try {
        res = train(data, init, c.train, c.sampler_settings(sched), c.parallel(), hooks);
    } catch (const TrainingAborted& e) {
        const auto& g = e.last_good();
        save_checkpoint(last_path, make_checkpoint(g.params, g.adam, g.step, data, c));
        write_train_log(log_path, e.log());
        throw;
    }
    auto last = make_checkpoint(res.last.params, res.last.adam, res.last.step, data, c);
    save_checkpoint(last_path, last);
    auto best = make_checkpoint(res.best, {}, res.best_step, data, c);
    best.best_step = res.best_step;
    best.best_val_es = res.best_val_es;
    last.best_step = res.best_step;
    save_checkpoint(best_path, best, false);
    write_train_log(log_path, res.log);
    out << "wrote " << best_path << " (step " << res.best_step << ") and " << last_path << "\n";
    return 0;
}

inline int cmd_sample(const Options& o, std::ostream& out) {
    const auto c = load_run_config(o);
    if (o.format != "bin" && o.format != "csv") throw UsageError("--format must be bin or csv");
    const auto ck_path = o.checkpoint.empty() ? (fs::path(c.output_dir) / "checkpoint.bin").string() : o.checkpoint;
    const auto ck = load_checkpoint(ck_path);
    const auto in = load_inputs(c);
    const auto data = prepare_inputs(c, in, &ck.norms);
    check_compatible(ck, data);
    const auto sched = ck.schedule();
    RunConfig sc = c;
    sc.train.diffusion_steps = ck.diffusion_steps;
    if (sc.sample.ddim_steps > ck.diffusion_steps) throw ConfigError("sample.ddim_steps", "exceeds the checkpoint's T");
    const auto settings = sc.sampler_settings(sched);
    const auto anchors = thin_anchors(split_anchors(data, c.sample.split), c.sample.max_dates);
    if (anchors.empty()) throw DataError("no forecast anchors in the " + c.sample.split + " split");
    const auto ens = forecast_anchors(ck.params, data, anchors, sched, settings, c.parallel());
    const auto path = o.ensembles.empty() ? out_path(c, "ensembles." + o.format) : o.ensembles;
    if (!o.ensembles.empty() && fs::path(path).has_parent_path()) fs::create_directories(fs::path(path).parent_path());
    if (o.format == "csv") {
        write_ensembles_csv(path, ens);
    } else {
        write_ensembles_binary(path, ens);
    }
    out << "wrote " << ens.size() << " ensembles of K=" << settings.samples << " to " << path << "\n";
    return 0;
}

inline int cmd_evaluate(const Options& o, std::ostream& out) {
    const auto c = load_run_config(o);
    const auto ens = read_ensembles(ensembles_path(c, o));
    const auto in = load_inputs(c);
    const auto s = score_all(c, in.panel, ens);
    write_scores_csv(out_path(c, "scores.csv"), s.totals);
    write_rolling_csv(out_path(c, "rolling_scores.csv"), s.rolling);
    for (const auto& [name, r] : s.totals) {
        out << name << ": CRPS " << csv::fmt(r.crps_mean) << " (sd " << csv::fmt(r.crps_std) << "), ES "
            << csv::fmt(r.es) << ", CorrScore " << (r.corr_defined ? csv::fmt(r.corr_score) : "undefined") << "\n";
    }
    return 0;
}

inline int cmd_backtest(const Options& o, std::ostream& out) {
    const auto c = load_run_config(o);
    const auto ens = read_ensembles(ensembles_path(c, o));
    const auto in = load_inputs(c);
    const auto runs = run_strategies(ens, realized_for(in.panel, ens), c.parallel());
    fs::create_directories(c.output_dir);
    write_strategy_files(c.output_dir, runs, dates_of(ens), in.panel.assets);
    for (const auto& r : runs) {
        out << r.name << ": SR " << csv::fmt(r.report.sr) << ", Ret " << csv::fmt(r.report.ret) << ", Vol "
            << csv::fmt(r.report.vol) << ", MDD " << csv::fmt(r.report.mdd);
        if (r.with_ce) out << ", CE " << csv::fmt(r.report.ce);
        out << "\n";
    }
    return 0;
}

inline int cmd_report(const Options& o, std::ostream& out) {
    const auto c = load_run_config(o);
    const auto ens = read_ensembles(ensembles_path(c, o));
    const auto in = load_inputs(c);
    const auto dir = (fs::path(c.output_dir) / "report").string();
    fs::create_directories(dir);
    const auto s = score_all(c, in.panel, ens);
    write_scores_csv((fs::path(dir) / "scores.csv").string(), s.totals);
    write_rolling_csv((fs::path(dir) / "rolling_scores.csv").string(), s.rolling);
    const auto dates = dates_of(ens);
    const auto runs = run_strategies(ens, realized_for(in.panel, ens), c.parallel());
    write_strategy_files(dir, runs, dates, in.panel.assets);

    std::vector<double> xs;
    for (const auto& d : dates) xs.push_back(fractional_year(d));
    xs.insert(xs.begin(), xs.front() - 1.0 / trading_days);
    std::vector<svg::Series> cum;
    for (const auto& r : runs) {
        std::vector<double> ys(r.report.value_path.data(), r.report.value_path.data() + r.report.value_path.size());
        for (auto& y : ys) y -= 1.0;
        cum.push_back({r.name, xs, ys});
    }
    svg::write_line_chart((fs::path(dir) / "cumulative_returns.svg").string(), cum,
                          {"Cumulative excess return", "year", "cumulative return", 800, 450, true});

    std::vector<svg::Series> crps, es;
    for (const auto& [name, ys] : s.rolling) {
        svg::Series a{name, {}, {}}, b{name, {}, {}};
        for (const auto& y : ys) {
            a.x.push_back(y.year);
            a.y.push_back(y.scores.crps_mean);
            b.x.push_back(y.year);
            b.y.push_back(y.scores.es);
        }
        crps.push_back(a);
        es.push_back(b);
    }
    svg::write_line_chart((fs::path(dir) / "rolling_crps.svg").string(), crps,
                          {"Rolling 3-year CRPS", "year", "CRPS", 800, 450, false});
    svg::write_line_chart((fs::path(dir) / "rolling_es.svg").string(), es,
                          {"Rolling 3-year energy score", "year", "ES", 800, 450, false});

    std::vector<svg::Series> sharpe;
    std::ofstream sr_csv(fs::path(dir) / "rolling_sharpe.csv");
    if (!sr_csv) throw DataError("cannot write rolling_sharpe.csv in " + dir);
    sr_csv << "strategy,year,SR\n";
    for (const auto& r : runs) {
        svg::Series sr{r.name, {}, {}};
        for (const auto& y : rolling_yearly_sharpe(dates, r.report.daily_returns)) {
            sr.x.push_back(y.year);
            sr.y.push_back(y.sr);
            sr_csv << r.name << "," << y.year << "," << csv::fmt(y.sr) << "\n";
        }
        sharpe.push_back(sr);
    }
    svg::write_line_chart((fs::path(dir) / "rolling_sharpe.svg").string(), sharpe,
                          {"Rolling 3-year Sharpe ratio", "year", "Sharpe ratio", 800, 450, true});
    out << "wrote report to " << dir << "\n";
    return 0;
}

}  // namespace detail

/// Parses argv, runs one subcommand, and maps failures onto exit codes
/// (0 ok, 1 config/data, 2 usage, 3 numeric).
inline int run_command(int argc, const char* const* argv, std::ostream& out = std::cout,
                       std::ostream& err = std::cerr) {
    CLI::App app{"diffolio: conditional diffusion forecasts of multivariate returns", "diffolio"};
    app.require_subcommand(1);
    Options o;
    std::optional<int> threads;
    std::optional<std::uint64_t> seed;
    std::optional<int> steps, samples;

    auto common = [&](CLI::App* sub, bool config_required) {
        auto* c = sub->add_option("-c,--config", o.config, "run configuration (TOML)");
        if (config_required) c->required();
        sub->add_option("--threads", threads, "worker threads (0 = all cores)")->check(CLI::NonNegativeNumber);
        sub->add_flag("--deterministic", o.deterministic, "static work assignment");
        sub->add_option("--seed", seed, "overrides run.seed");
        sub->add_option("--out", o.out, "output directory");
        sub->add_flag("-q,--quiet", o.quiet, "less output");
    };
    auto* ingest = app.add_subcommand("ingest", "validate and summarize input files");
    common(ingest, false);
    ingest->add_flag("--synthetic", o.synthetic, "write the bundled synthetic fixture instead");
    ingest->add_option("--days", o.days, "synthetic fixture length")->check(CLI::Range(100, 1000000));
    ingest->add_option("--fixture-seed", o.fixture_seed, "synthetic fixture seed");
    auto* features = app.add_subcommand("features", "compute and cache asset characteristics");
    common(features, true);
    auto* train_cmd = app.add_subcommand("train", "train the denoiser");
    common(train_cmd, true);
    train_cmd->add_option("--steps", steps, "overrides train.steps")->check(CLI::NonNegativeNumber);
    auto* sample = app.add_subcommand("sample", "generate forecast ensembles");
    common(sample, true);
    sample->add_option("--checkpoint", o.checkpoint, "checkpoint file (default <out>/checkpoint.bin)");
    sample->add_option("-K,--samples", samples, "ensemble size")->check(CLI::PositiveNumber);
    sample->add_option("--split", o.split, "train, val or test");
    sample->add_option("--format", o.format, "bin or csv");
    sample->add_option("--ensembles", o.ensembles, "output file");
    std::vector<CLI::App*> readers;
    for (auto [name, help] : {std::pair{"evaluate", "score ensembles (CRPS, ES, CorrScore)"},
                              std::pair{"backtest", "MVP and GOP portfolios from ensembles"},
                              std::pair{"report", "score and backtest tables plus figures"}}) {
        auto* s = app.add_subcommand(name, help);
        common(s, true);
        s->add_option("--ensembles", o.ensembles, "ensemble file (default <out>/ensembles.bin)");
        readers.push_back(s);
    }

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        out << app.help();
        return 0;
    } catch (const CLI::CallForAllHelp& e) {
        out << app.help("", CLI::AppFormatMode::All);
        return 0;
    } catch (const CLI::ParseError& e) {
        err << "usage error: " << e.what() << "\n" << app.help();
        return static_cast<int>(ExitCode::usage);
    }
    o.threads = threads;
    o.seed = seed;
    o.steps = steps;
    o.samples = samples;

    try {
        if (ingest->parsed()) return detail::cmd_ingest(o, out);
        if (features->parsed()) return detail::cmd_features(o, out);
        if (train_cmd->parsed()) return detail::cmd_train(o, out);
        if (sample->parsed()) return detail::cmd_sample(o, out);
        if (readers[0]->parsed()) return detail::cmd_evaluate(o, out);
        if (readers[1]->parsed()) return detail::cmd_backtest(o, out);
        if (readers[2]->parsed()) return detail::cmd_report(o, out);
        throw UsageError("no subcommand");
    } catch (const ConfigError& e) {
        err << "config error: " << e.what() << "\n";
        return static_cast<int>(e.code());
    } catch (const Error& e) {
        const char* kind = e.code() == ExitCode::numeric ? "numeric error" : e.code() == ExitCode::usage ? "usage error"
                                                                                                          : "error";
        err << kind << ": " << e.what() << "\n";
        return static_cast<int>(e.code());
    } catch (const fs::filesystem_error& e) {
        err << "error: " << e.what() << "\n";
        return static_cast<int>(ExitCode::config_or_data);
    }
}

inline int run_command(const std::vector<std::string>& args, std::ostream& out = std::cout,
                       std::ostream& err = std::cerr) {
    std::vector<const char*> argv{"diffolio"};
    for (const auto& a : args) argv.push_back(a.c_str());
    return run_command(static_cast<int>(argv.size()), argv.data(), out, err);
}

}  // namespace diffolio::cli
