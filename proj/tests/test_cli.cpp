#include <gtest/gtest.h>

#include <cstdlib>
#include <sstream>

#include "diffolio/cli.hpp"
#include "pipeline_support.hpp"

using namespace diffolio;
using namespace testing_support;
namespace fs = std::filesystem;

namespace {

RunConfig tiny_run_config() {
    RunConfig c = synthetic_run_config();
    c.model.window = 8;
    c.model.hidden = 8;
    c.model.heads = 2;
    c.model.mlp_hidden = 16;
    c.model.step_embed_dim = 4;
    c.train.diffusion_steps = 50;
    c.train.steps = 20;
    c.train.batch = 8;
    c.train.warmup = 2;
    c.train.val_every = 5;
    c.train.val_samples = 2;
    c.train.val_max_dates = 4;
    c.sample.ddim_steps = 5;
    c.sample.samples = 4;
    c.sample.max_dates = 12;
    c.seed = 5;
    return c;
}

struct Fixture {
    TempDir dir{"cli"};
    std::string config;
    Fixture() {
        SyntheticSpec spec;
        spec.days = 1100;
        spec.assets = 3;
        config = write_synthetic_fixture(dir.path().string(), spec, tiny_run_config());
    }
    std::string out(const std::string& f) const { return dir.file("out/" + f); }
};

struct Result {
    int code;
    std::string out, err;
};

Result run(std::vector<std::string> args) {
    std::ostringstream out, err;
    const int code = cli::run_command(args, out, err);
    return {code, out.str(), err.str()};
}

int count_lines(const std::string& text) { return static_cast<int>(std::count(text.begin(), text.end(), '\n')); }

std::map<std::string, std::string> scores_by_source(const std::string& path) {
    std::map<std::string, std::string> rows;
    std::istringstream in(read_file(path));
    std::string line;
    std::getline(in, line);
    while (std::getline(in, line)) rows[line.substr(0, line.find(','))] = line;
    return rows;
}

std::vector<double> numbers(const std::string& row) {
    std::vector<double> v;
    std::istringstream in(row.substr(row.find(',') + 1));
    std::string cell;
    while (std::getline(in, cell, ',')) v.push_back(cell.empty() ? std::nan("") : std::stod(cell));
    return v;
}

std::map<std::string, std::string> snapshot(const fs::path& dir) {
    std::map<std::string, std::string> files;
    for (const auto& e : fs::recursive_directory_iterator(dir)) {
        if (e.is_regular_file()) files[e.path().string()] = read_file(e.path().string());
    }
    return files;
}

}  // namespace

TEST(Cli, TrainWritesCheckpointsAndLog) {
    Fixture f;
    const auto r = run({"train", "-c", f.config, "--steps", "10", "-q"});
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_TRUE(fs::exists(f.out("checkpoint.bin")));
    EXPECT_TRUE(fs::exists(f.out("checkpoint_last.bin")));
    const auto log = read_file(f.out("train_log.csv"));
    EXPECT_EQ(count_lines(log), 11);
    EXPECT_EQ(log.substr(0, log.find('\n')).substr(0, 5), "step,");
    const auto last = load_checkpoint(f.out("checkpoint_last.bin"));
    EXPECT_EQ(last.step, 10);
    EXPECT_EQ(last.seed, 5u);
    const auto best = load_checkpoint(f.out("checkpoint.bin"));
    EXPECT_TRUE(best.best_step == 5 || best.best_step == 10) << best.best_step;
    EXPECT_TRUE(std::isfinite(best.best_val_es));
}

TEST(Cli, SampleIsRepeatableAndEvaluates) {
    Fixture f;
    ASSERT_EQ(run({"train", "-c", f.config, "--steps", "6", "-q"}).code, 0);
    for (const auto* fmt : {"csv", "bin"}) {
        const std::string a = f.dir.file(std::string("a.") + fmt), b = f.dir.file(std::string("b.") + fmt);
        ASSERT_EQ(run({"sample", "-c", f.config, "-K", "1", "--format", fmt, "--ensembles", a}).code, 0);
        ASSERT_EQ(run({"sample", "-c", f.config, "-K", "1", "--format", fmt, "--ensembles", b}).code, 0);
        EXPECT_EQ(read_file(a), read_file(b)) << fmt;
    }
    const auto ens = read_ensembles(f.dir.file("a.bin"));
    ASSERT_EQ(ens.size(), 12u);
    EXPECT_EQ(ens.front().size(), 1u);
    // csv and binary hold the same values
    const auto csv_ens = read_ensembles(f.dir.file("a.csv"));
    for (std::size_t j = 0; j < ens.size(); ++j) {
        EXPECT_EQ(csv_ens[j].date, ens[j].date);
        EXPECT_TRUE(same_bits(csv_ens[j].samples, ens[j].samples));
    }

    ASSERT_EQ(run({"sample", "-c", f.config}).code, 0);
    const auto r = run({"evaluate", "-c", f.config});
    ASSERT_EQ(r.code, 0) << r.err;
    const auto rows = scores_by_source(f.out("scores.csv"));
    ASSERT_EQ(rows.size(), 2u);
    EXPECT_EQ(numbers(rows.at("model")).back(), 12.0);
    EXPECT_GT(numbers(rows.at("climatology"))[0], 0.0);
    EXPECT_TRUE(fs::exists(f.out("rolling_scores.csv")));
}

TEST(Cli, EnsembleAtTheTruthScoresZero) {
    Fixture f;
    ASSERT_EQ(run({"train", "-c", f.config, "--steps", "4", "-q"}).code, 0);
    ASSERT_EQ(run({"sample", "-c", f.config, "-K", "3"}).code, 0);
    auto ens = read_ensembles(f.out("ensembles.bin"));
    const auto cfg = validate_config(f.config);
    const Matrix real = realized_for(load_inputs(cfg).panel, ens);
    for (std::size_t j = 0; j < ens.size(); ++j) {
        ens[j].samples = real.row(static_cast<Eigen::Index>(j)).replicate(3, 1);
    }
    write_ensembles_binary(f.dir.file("perfect.bin"), ens);
    ASSERT_EQ(run({"evaluate", "-c", f.config, "--ensembles", f.dir.file("perfect.bin")}).code, 0);
    const auto v = numbers(scores_by_source(f.out("scores.csv")).at("model"));
    EXPECT_EQ(v[0], 0.0);  // CRPS
    EXPECT_EQ(v[2], 0.0);  // ES
    EXPECT_NEAR(v[3], 0.0, 1e-12);  // CorrScore: the ensemble mean path is the realized path
}

TEST(Cli, ExitCodes) {
    Fixture f;
    EXPECT_EQ(run({}).code, 2);
    EXPECT_EQ(run({"fly"}).code, 2);
    EXPECT_EQ(run({"train"}).code, 2);
    EXPECT_EQ(run({"train", "-c", f.config, "--steps", "-1"}).code, 2);
    EXPECT_EQ(run({"sample", "-c", f.config, "-K", "0"}).code, 2);
    EXPECT_EQ(run({"--help"}).code, 0);

    EXPECT_EQ(run({"train", "-c", f.dir.file("missing.toml")}).code, 1);
    write_file(f.dir.file("bad.toml"), read_file(f.config) + "\n[extra]\nx = 1\n");
    auto r = run({"train", "-c", f.dir.file("bad.toml")});
    EXPECT_EQ(r.code, 1);
    EXPECT_NE(r.err.find("extra"), std::string::npos);
    auto text = read_file(f.config);
    text.replace(text.find("heads = 2"), 9, "heads = 3");
    write_file(f.dir.file("heads.toml"), text);
    r = run({"train", "-c", f.dir.file("heads.toml")});
    EXPECT_EQ(r.code, 1);
    EXPECT_NE(r.err.find("model.heads"), std::string::npos);

    // data problems
    EXPECT_EQ(run({"sample", "-c", f.config}).code, 1);  // no checkpoint yet
    EXPECT_EQ(run({"evaluate", "-c", f.config}).code, 1);  // no ensembles yet
    ASSERT_EQ(run({"train", "-c", f.config, "--steps", "2", "-q"}).code, 0);
    EXPECT_EQ(run({"sample", "-c", f.config, "--format", "xml"}).code, 2);
    EXPECT_EQ(run({"sample", "-c", f.config, "--split", "later"}).code, 1);
    write_file(f.dir.file("returns.csv"), "date,A1,RF\n2001-01-01,abc,0\n");
    EXPECT_EQ(run({"ingest", "-c", f.config}).code, 1);
}

TEST(Cli, BinaryExitCodes) {
    const char* bin = std::getenv("DIFFOLIO_CLI");
    if (!bin) GTEST_SKIP() << "DIFFOLIO_CLI not set";
    const auto code = [](const std::string& cmd) {
        const int s = std::system((cmd + " >/dev/null 2>&1").c_str());
        return WEXITSTATUS(s);
    };
    EXPECT_EQ(code(std::string(bin) + " fly"), 2);
    EXPECT_EQ(code(std::string(bin) + " train -c /no/such.toml"), 1);
    EXPECT_EQ(code(std::string(bin) + " --help"), 0);
}

TEST(Cli, OverridePrecedence) {
    Fixture f;
    cli::Options o;
    o.config = f.config;
    EXPECT_EQ(cli::detail::load_run_config(o).seed, 5u);
    ::setenv("DIFFOLIO_SEED", "9", 1);
    ::setenv("DIFFOLIO_THREADS", "3", 1);
    auto c = cli::detail::load_run_config(o);
    EXPECT_EQ(c.seed, 9u);
    EXPECT_EQ(c.train.seed, 9u);
    EXPECT_EQ(c.threads, 3);
    o.seed = 11;
    o.threads = 1;
    c = cli::detail::load_run_config(o);
    EXPECT_EQ(c.seed, 11u);
    EXPECT_EQ(c.threads, 1);
    ::setenv("DIFFOLIO_SEED", "x", 1);
    EXPECT_THROW(cli::detail::load_run_config(o), ConfigError);
    ::unsetenv("DIFFOLIO_SEED");
    ::unsetenv("DIFFOLIO_THREADS");

    // a --steps override below the warmup keeps a proportional warmup
    o.steps = 1;
    EXPECT_EQ(cli::detail::load_run_config(o).train.warmup, 0);
    o.steps = 30;
    EXPECT_EQ(cli::detail::load_run_config(o).train.warmup, 2);
}

TEST(Cli, IngestFeaturesBacktestReport) {
    Fixture f;
    auto r = run({"ingest", "-c", f.config});
    ASSERT_EQ(r.code, 0) << r.err;
    const auto ingest = nlohmann::json::parse(read_file(f.out("ingest.json")));
    EXPECT_EQ(ingest["rows"], 1100);
    EXPECT_EQ(ingest["assets"].size(), 3u);
    EXPECT_EQ(ingest["split"]["train"]["rows"].get<int>() + ingest["split"]["val"]["rows"].get<int>() +
                  ingest["split"]["test"]["rows"].get<int>(),
              1100);

    r = run({"features", "-c", f.config});
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_TRUE(fs::exists(f.out("characteristics.bin")));
    const auto feats = nlohmann::json::parse(read_file(f.out("features.json")));
    EXPECT_EQ(feats["asset_features"].size(), 11u);  // 10 characteristics + signal

    ASSERT_EQ(run({"train", "-c", f.config, "--steps", "4", "-q"}).code, 0);
    ASSERT_EQ(run({"sample", "-c", f.config}).code, 0);
    r = run({"backtest", "-c", f.config});
    ASSERT_EQ(r.code, 0) << r.err;
    for (const auto* name : {"backtest.csv", "weights_mvp.csv", "weights_gop.csv", "portfolio_returns.csv"}) {
        EXPECT_TRUE(fs::exists(f.out(name))) << name;
    }
    EXPECT_EQ(count_lines(read_file(f.out("weights_mvp.csv"))), 13);

    // report only adds files under report/
    const auto before = snapshot(f.dir.path());
    r = run({"report", "-c", f.config});
    ASSERT_EQ(r.code, 0) << r.err;
    const auto after = snapshot(f.dir.path());
    for (const auto& [path, bytes] : before) {
        ASSERT_TRUE(after.count(path)) << path;
        EXPECT_EQ(after.at(path), bytes) << path;
    }
    for (const auto& [path, bytes] : after) {
        if (!before.count(path)) EXPECT_NE(path.find("/out/report/"), std::string::npos) << path;
    }
    for (const auto* name : {"scores.csv", "backtest.csv", "cumulative_returns.svg", "rolling_crps.svg",
                             "rolling_es.svg", "rolling_sharpe.svg", "rolling_sharpe.csv"}) {
        EXPECT_TRUE(fs::exists(f.out(std::string("report/") + name))) << name;
    }
}

TEST(Cli, DeterministicRerunsAreByteIdentical) {
    Fixture f;
    std::map<std::string, std::string> first;
    for (const auto* threads : {"1", "2"}) {
        const auto out = f.dir.file(std::string("run") + threads);
        const std::vector<std::string> common{"-c", f.config, "--deterministic", "--threads", threads, "--out", out};
        auto with = [&](std::vector<std::string> head) {
            head.insert(head.end(), common.begin(), common.end());
            return run(head).code;
        };
        ASSERT_EQ(with({"train", "--steps", "8", "-q"}), 0);
        ASSERT_EQ(with({"sample"}), 0);
        ASSERT_EQ(with({"evaluate"}), 0);
        ASSERT_EQ(with({"backtest"}), 0);
        std::map<std::string, std::string> files;
        for (const auto* name : {"checkpoint.bin", "checkpoint_last.bin", "train_log.csv", "ensembles.bin",
                                 "scores.csv", "backtest.csv", "weights_gop.csv"}) {
            files[name] = read_file(out + "/" + name);
        }
        if (first.empty()) {
            first = files;
        } else {
            for (const auto& [name, bytes] : files) EXPECT_EQ(bytes, first.at(name)) << name;
        }
    }
}

TEST(Cli, SyntheticIngestWritesFixture) {
    TempDir dir("cli");
    const auto target = dir.file("fx");
    const auto r = run({"ingest", "--synthetic", "--days", "300", "--out", target});
    ASSERT_EQ(r.code, 0) << r.err;
    for (const auto* name : {"returns.csv", "factors.csv", "macro.csv", "asset_covariates.csv", "config.toml"}) {
        EXPECT_TRUE(fs::exists(target + "/" + name)) << name;
    }
    EXPECT_NO_THROW(validate_config(target + "/config.toml"));
    EXPECT_EQ(count_lines(read_file(target + "/returns.csv")), 301);
}
