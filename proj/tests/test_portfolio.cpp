#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "diffolio/portfolio.hpp"
#include "diffolio/rng.hpp"
#include "oracles.hpp"

using namespace diffolio;
using namespace testing_support;

namespace {

MomentEstimate moments(Vector mu, Matrix sigma) { return MomentEstimate{std::move(mu), std::move(sigma)}; }

void expect_simplex(const Vector& w) {
    EXPECT_GE(w.minCoeff(), 0.0);
    EXPECT_NEAR(w.sum(), 1.0, 1e-9);
}

}  // namespace

TEST(Moments, Examples) {
    const auto same = estimate_moments(Matrix((Matrix(3, 2) << 1, 2, 1, 2, 1, 2).finished()));
    EXPECT_EQ(same.mu, (Vector(2) << 1, 2).finished());
    EXPECT_EQ(same.sigma, moment_ridge * Matrix::Identity(2, 2));
    const auto two = estimate_moments(Matrix((Matrix(2, 2) << 0, 0, 2, 0).finished()));
    EXPECT_EQ(two.mu, (Vector(2) << 1, 0).finished());
    EXPECT_EQ(two.sigma(0, 0), 2.0 + moment_ridge);
    Rng rng(1);
    const auto r = estimate_moments(random_matrix(rng, 30, 5));
    EXPECT_LE((r.sigma - r.sigma.transpose()).cwiseAbs().maxCoeff(), 1e-14);
    EXPECT_THROW(estimate_moments(Matrix::Ones(1, 3)), DataError);
}

TEST(Mvp, Examples) {
    const auto sym = solve_mvp(moments((Vector(2) << 0.1, 0.1).finished(), Matrix::Identity(2, 2)));
    EXPECT_NEAR(sym.w[0], 0.5, 1e-9);
    const auto interior = solve_mvp(moments((Vector(2) << 0.2, 0.1).finished(), Matrix::Identity(2, 2)));
    EXPECT_NEAR(interior.w[0], 2.0 / 3.0, 1e-9);
    EXPECT_NEAR(interior.w[1], 1.0 / 3.0, 1e-9);
    const auto corner = solve_mvp(moments((Vector(2) << 0.1, -0.5).finished(), Matrix::Identity(2, 2)));
    EXPECT_NEAR(corner.w[0], 1.0, 1e-9);
    EXPECT_FALSE(corner.fallback);
    // grid oracle over the 2-simplex at step 1e-3
    double best = -1e9, arg = 0.0;
    for (int k = 0; k <= 1000; ++k) {
        const double w = k / 1000.0;
        const double sr = (0.1 * w - 0.5 * (1 - w)) / std::sqrt(w * w + (1 - w) * (1 - w));
        if (sr > best) best = sr, arg = w;
    }
    EXPECT_NEAR(corner.w[0], arg, 1e-3);
}

TEST(Mvp, FallbackIsMinimumVariance) {
    Matrix s(2, 2);
    s << 1.0, 0.0, 0.0, 4.0;
    const auto r = solve_mvp(moments((Vector(2) << -0.1, -0.2).finished(), s));
    EXPECT_TRUE(r.fallback);
    EXPECT_NEAR(r.w[0], 0.8, 1e-9);  // inverse variance weights
    expect_simplex(r.w);
}

TEST(Mvp, MatchesSharpeGridOracle) {
    Rng rng(2);
    for (int trial = 0; trial < 30; ++trial) {
        const Matrix s = random_spd(rng, 3);
        const Vector mu = random_matrix(rng, 3, 1).col(0) * 0.1;
        if (mu.maxCoeff() <= 0.0) continue;
        const auto r = solve_mvp(moments(mu, s));
        expect_simplex(r.w);
        auto sharpe = [&](const Vector& w) { return mu.dot(w) / std::sqrt(w.dot(s * w)); };
        const Vector g = grid_argmax3(sharpe, 300);
        // solver never loses to the grid, and agrees with it up to the grid step
        EXPECT_GE(sharpe(r.w), sharpe(g) - 1e-12);
        EXPECT_LT((r.w - g).cwiseAbs().maxCoeff(), 0.05);
    }
}

TEST(Mvp, ScaleInvariant) {
    Rng rng(3);
    for (int trial = 0; trial < 20; ++trial) {
        const Matrix s = random_spd(rng, 5);
        const Vector mu = random_matrix(rng, 5, 1).col(0).array() + 0.3;
        const Vector w = solve_mvp(moments(mu, s)).w;
        EXPECT_LT((solve_mvp(moments(7.0 * mu, s)).w - w).cwiseAbs().maxCoeff(), 1e-7);
        EXPECT_LT((solve_mvp(moments(mu, 0.01 * s)).w - w).cwiseAbs().maxCoeff(), 1e-7);
    }
}

TEST(Mvp, KktOnInteriorSolutions) {
    Rng rng(4);
    int interior = 0;
    for (int trial = 0; trial < 40; ++trial) {
        const Matrix s = random_spd(rng, 4);
        const Vector mu = (random_matrix(rng, 4, 1).col(0).array() * 0.05 + 0.1).matrix();
        const Vector w = solve_mvp(moments(mu, s)).w;
        // Σw ∝ μ on the support
        std::vector<Eigen::Index> sup;
        for (Eigen::Index i = 0; i < 4; ++i) {
            if (w[i] > 1e-9) sup.push_back(i);
        }
        if (sup.size() < 2) continue;
        const Vector g = s * w;
        const double c = g[sup[0]] / mu[sup[0]];
        for (auto i : sup) EXPECT_NEAR(g[i] / mu[i], c, 1e-6 * std::abs(c));
        // inactive assets cannot improve: (Σw)_i / μ_i >= c when μ_i > 0
        for (Eigen::Index i = 0; i < 4; ++i) {
            if (w[i] <= 1e-9 && mu[i] > 0) EXPECT_GE(g[i] / mu[i], c * (1 - 1e-6));
        }
        if (sup.size() == 4) ++interior;
    }
    EXPECT_GT(interior, 0);
}

TEST(Mvp, Errors) {
    EXPECT_THROW(solve_mvp(moments(Vector::Ones(2), Matrix::Identity(3, 3))), NumericError);
    Matrix bad = Matrix::Identity(2, 2);
    bad(0, 0) = std::nan("");
    EXPECT_THROW(solve_mvp(moments(Vector::Ones(2), bad)), NumericError);
}

TEST(Gop, Examples) {
    EXPECT_EQ(solve_gop(Matrix::Constant(4, 1, 0.02)).w, Vector::Ones(1));
    Matrix dom(3, 2);
    dom.col(0).setConstant(0.1);
    dom.col(1).setConstant(-0.1);
    const auto d = solve_gop(dom);
    EXPECT_NEAR(d.w[0], 1.0, 1e-9);
    expect_simplex(d.w);
    Matrix coin(2, 2);
    coin << 1.0, 0.0, -1.0, 0.0;
    const auto k = solve_gop(coin);
    EXPECT_NEAR(k.w[1], 1.0, 1e-9);
    // grid oracle on the coin: 0.5 log(1+w) + 0.5 log(1-w)
    double best = -1e9, arg = -1;
    for (int i = 0; i < 1000; ++i) {
        const double w = i / 1000.0;
        const double u = 0.5 * std::log1p(w) + 0.5 * std::log1p(-w);
        if (u > best) best = u, arg = w;
    }
    EXPECT_NEAR(k.w[0], arg, 1e-3);
}

TEST(Gop, BeatsVerticesAndEqualWeights) {
    Rng rng(5);
    for (int trial = 0; trial < 50; ++trial) {
        const auto n = 2 + static_cast<Eigen::Index>(uniform_int(rng, 0, 8));
        const Matrix s = random_matrix(rng, 64, n, 0.02).array() + 0.002;
        const auto r = solve_gop(s);
        expect_simplex(r.w);
        const double f = log_utility(s, r.w);
        EXPECT_GE(f, log_utility(s, Vector::Constant(n, 1.0 / static_cast<double>(n))) - 1e-14);
        for (Eigen::Index i = 0; i < n; ++i) EXPECT_GE(f, log_utility(s, Vector::Unit(n, i)) - 1e-14);
    }
}

TEST(Gop, MatchesGridOracle) {
    Rng rng(6);
    for (int trial = 0; trial < 10; ++trial) {
        const Matrix s = random_matrix(rng, 40, 3, 0.3).array() + 0.03;  // large moves so the optimum is sharp
        const auto r = solve_gop(s);
        const Vector g = grid_argmax3([&](const Vector& w) { return log_utility(s, w); }, 300);
        EXPECT_GE(log_utility(s, r.w), log_utility(s, g) - 1e-12);
    }
}

TEST(Gop, InfeasibleStartShrinksToBestAsset) {
    Matrix s(2, 3);
    s << -1.5, 0.1, 0.0, 0.2, 0.05, 0.0;
    const auto r = solve_gop(s);
    EXPECT_TRUE(std::isfinite(log_utility(s, r.w)));
    expect_simplex(r.w);
    EXPECT_THROW(solve_gop(Matrix::Constant(2, 2, -1.0)), NumericError);
    EXPECT_THROW(solve_gop(Matrix::Constant(2, 1, -1.0)), NumericError);
}

TEST(Backtest, Examples) {
    const auto c = summarize_returns(Vector::Constant(10, 0.001));
    EXPECT_NEAR(c.ce, std::pow(1.001, 252) - 1.0, 1e-12);
    const auto mdd = summarize_returns((Vector(2) << 0.2, 0.9 / 1.2 - 1.0).finished());
    EXPECT_NEAR(mdd.mdd, -0.25, 1e-15);
    const auto zero = summarize_returns(Vector::Zero(5));
    EXPECT_FALSE(zero.sr_defined);
    EXPECT_EQ(zero.ret, 0.0);
    EXPECT_EQ(zero.mdd, 0.0);
    EXPECT_EQ(zero.ce, 0.0);
    const auto broke = summarize_returns((Vector(3) << 0.1, -1.0, 0.1).finished());
    EXPECT_FALSE(broke.ce_defined);
    EXPECT_EQ(broke.bankrupt_at, 1);
}

TEST(Backtest, IdentitiesAndBruteForceDrawdown) {
    Rng rng(7);
    for (int trial = 0; trial < 50; ++trial) {
        const auto t = 2 + static_cast<Eigen::Index>(uniform_int(rng, 0, 200));
        const Matrix real = random_matrix(rng, t, 3, 0.02);
        Matrix w = random_matrix(rng, t, 3).array().exp();
        for (Eigen::Index r = 0; r < t; ++r) w.row(r) /= w.row(r).sum();
        const auto rep = backtest(w, real);
        Vector daily(t);
        for (Eigen::Index r = 0; r < t; ++r) daily[r] = w.row(r).dot(real.row(r));
        EXPECT_LT((rep.daily_returns - daily).cwiseAbs().maxCoeff(), 1e-15);
        const double mean = daily.mean();
        const double sd = std::sqrt((daily.array() - mean).square().sum() / static_cast<double>(t - 1));
        EXPECT_NEAR(rep.ret, mean * 252.0, 1e-15);
        EXPECT_NEAR(rep.vol, sd * std::sqrt(252.0), 1e-14);
        EXPECT_EQ(rep.sr, rep.ret / rep.vol);
        EXPECT_EQ(rep.value_path[0], 1.0);
        // all peak/trough pairs
        EXPECT_NEAR(rep.mdd, brute_force_mdd(rep.value_path), 1e-14);
        double u = 0.0;
        for (Eigen::Index r = 0; r < t; ++r) u += std::log(1.0 + daily[r]);
        EXPECT_NEAR(rep.ce, std::exp(252.0 * u / static_cast<double>(t)) - 1.0, 1e-12);
    }
    EXPECT_THROW(backtest(Matrix::Ones(2, 2), Matrix::Ones(3, 2)), DataError);
}

TEST(Backtest, CsvOutputs) {
    TempDir dir("bt");
    const auto rep = summarize_returns((Vector(3) << 0.01, -0.02, 0.005).finished());
    write_backtest_csv(dir.file("b.csv"), {{"MVP", rep, false}, {"GOP", rep, true}});
    const auto text = read_file(dir.file("b.csv"));
    EXPECT_EQ(text.substr(0, text.find('\n')), "strategy,SR,Ret,Vol,MDD,CE,sr_defined,ce_defined");
    EXPECT_NE(text.find("\nMVP,"), std::string::npos);
    write_weights_csv(dir.file("w.csv"), {Date(18000), Date(18001)}, {"A", "B"}, Matrix::Constant(2, 2, 0.5));
    EXPECT_EQ(read_file(dir.file("w.csv")), "date,A,B\n2019-04-14,0.5,0.5\n2019-04-15,0.5,0.5\n");
}
