#include <gtest/gtest.h>

#include <numeric>

#include "diffolio/denoiser.hpp"
#include "support.hpp"

using namespace diffolio;
using namespace testing_support;

namespace {

// Closed-form count from the field list, written out independently of make_layout.
std::size_t closed_form_count(const DenoiserConfig& c) {
    const std::size_t d = c.hidden, mh = c.mlp_hidden;
    const std::size_t query = (1 + c.step_embed_dim) * d + d;
    const std::size_t context = (1 + c.z_dim) * d + d;
    const std::size_t sys = c.window * d + d + c.sys_covariates * d;
    const std::size_t block = 3 * d * d + 2 * d + (d * mh + mh) + (mh * d + d);
    return query + context + sys + block * (c.cross_depth + c.self_depth) + d + 1;
}

}  // namespace

TEST(Denoiser, ParameterCountAtDefaultConfig) {
    const DenoiserConfig c;  // D=128, 4 heads, M=63, N=12, N_y=8
    EXPECT_EQ(parameter_count(c), 377473u);
    EXPECT_EQ(parameter_count(c), closed_form_count(c));
    DenoiserConfig deep = c;
    deep.cross_depth = 2;
    deep.self_depth = 3;
    EXPECT_EQ(parameter_count(deep), closed_form_count(deep));
}

TEST(Denoiser, HeadsMustDivideHidden) {
    DenoiserConfig c;
    c.heads = 3;
    try {
        c.validate();
        FAIL() << "expected ConfigError";
    } catch (const ConfigError& e) {
        EXPECT_EQ(e.field(), "model.heads");
    }
}

TEST(Denoiser, InitIsDeterministicWithUnitGains) {
    const auto c = small_config();
    const auto a = init_params(c, 7), b = init_params(c, 7), other = init_params(c, 8);
    EXPECT_EQ(a.values, b.values);
    EXPECT_NE(a.values, other.values);
    for (const auto& s : a.layout.cross) EXPECT_TRUE((a[s.ln_gain].array() == 1.0).all());
    for (const auto& s : a.layout.self) {
        EXPECT_TRUE((a[s.ln_gain].array() == 1.0).all());
        EXPECT_TRUE((a[s.ln_bias].array() == 0.0).all());
    }
    const double bound = 1.0 / std::sqrt(1.0 + c.step_embed_dim);
    EXPECT_LE(a[a.layout.query_w].cwiseAbs().maxCoeff(), bound);
}

TEST(Denoiser, StepEmbeddingFormula) {
    const auto e0 = step_embedding(0.0, 8);
    for (int i = 0; i < 8; ++i) EXPECT_EQ(e0[i], i % 2 == 0 ? 0.0 : 1.0);
    EXPECT_DOUBLE_EQ(step_embedding(1.234, 2)[0], std::sin(1.234));
    const auto e = step_embedding(100.0, 32);
    for (int i = 0; i < 16; ++i) {
        const double arg = 100.0 / std::pow(10000.0, (2.0 * i) / 32.0);
        EXPECT_NEAR(e[2 * i], std::sin(arg), 1e-12);
        EXPECT_NEAR(e[2 * i + 1], std::cos(arg), 1e-12);
    }
    EXPECT_THROW(step_embedding(1.0, 3), ConfigError);
}

TEST(Denoiser, FullNetworkGradientTwentySeeds) {
    for (std::uint64_t seed = 1; seed <= 20; ++seed) {
        EXPECT_LT(full_network_gradcheck(seed), 1e-4) << "seed " << seed;
    }
}

TEST(Denoiser, GradientWithDeeperStacksAndFirstHead) {
    auto c = small_config();
    c.cross_depth = 2;
    c.self_depth = 2;
    EXPECT_LT(full_network_gradcheck(101, 2, 0.5, c), 1e-4);
    c.attention_reduce = AttentionReduce::first_head;
    EXPECT_LT(full_network_gradcheck(102, 3, 0.5, c), 1e-4);
    c = small_config();
    c.window_pos = false;
    EXPECT_LT(full_network_gradcheck(103, 1, 0.5, c), 1e-4);
}

TEST(Denoiser, BlockGradients) {
    for (std::uint64_t seed = 1; seed <= 20; ++seed) {
        EXPECT_LT(cross_block_gradcheck(seed), 1e-4) << "seed " << seed;
        EXPECT_LT(self_block_gradcheck(seed), 1e-4) << "seed " << seed;
    }
}

TEST(Denoiser, CrossAttentionSingleKeyAndDuplicates) {
    const auto f = block_fixture(5, true);
    const auto bp = block_view(f.params.values, f.params.layout, f.slots);
    Rng rng(3);
    const nn::RowVec q = random_matrix(rng, 1, 8).row(0);
    const Matrix kv1 = random_matrix(rng, 1, 8);
    const auto single = cross_attention_block(q, kv1, kv1, bp, 2);
    // single key: CA equals the projected value row
    const Matrix ca = kv1 * bp.wv;
    nn::ResidualMlpCache cache;
    const Matrix expected = residual_mlp_forward(ca, bp, 1e-5, &cache);
    EXPECT_LT((single - expected.row(0)).cwiseAbs().maxCoeff(), 1e-12);
    Matrix dup(2, 8);
    dup.row(0) = kv1.row(0);
    dup.row(1) = kv1.row(0);
    const auto doubled = cross_attention_block(q, dup, dup, bp, 2);
    EXPECT_LT((single - doubled).cwiseAbs().maxCoeff(), 1e-12);
    Matrix bad = kv1;
    bad(0, 0) = std::nan("");
    EXPECT_THROW(cross_attention_block(q, bad, kv1, bp, 2), NumericError);
}

TEST(Denoiser, SelfAttentionPermutationEquivariance) {
    const auto f = block_fixture(9, false);
    const auto bp = block_view(f.params.values, f.params.layout, f.slots);
    Rng rng(4);
    const int n = 3;
    const Matrix h = random_matrix(rng, 5, 8);
    const auto base = self_attention_block(h, n, bp, 2);
    const std::vector<int> perm = {2, 0, 1};
    Matrix hp = h;
    for (int i = 0; i < n; ++i) hp.row(i) = h.row(perm[static_cast<std::size_t>(i)]);
    const auto moved = self_attention_block(hp, n, bp, 2);
    for (int i = 0; i < n; ++i) {
        const int pi = perm[static_cast<std::size_t>(i)];
        EXPECT_LT((moved.h.row(i) - base.h.row(pi)).cwiseAbs().maxCoeff(), 1e-12);
        for (int j = 0; j < n; ++j) {
            EXPECT_NEAR(moved.attention(i, j), base.attention(pi, perm[static_cast<std::size_t>(j)]), 1e-12);
        }
    }
    EXPECT_TRUE((base.attention.rowwise().sum().array() <= 1.0 + 1e-12).all());
}

TEST(Denoiser, AttentionRowsSumToOne) {
    const auto c = small_config();
    for (std::uint64_t seed = 1; seed <= 50; ++seed) {
        Rng rng(seed);
        const auto p = random_params(c, seed);
        const auto ctx = random_context(c, rng);
        const auto enc = encode_context(p, ctx);
        ForwardCache fc;
        denoise_forward_batch(p, enc, random_matrix(rng, 3, c.assets), 17, &fc);
        for (const auto& blk : fc.cross) {
            for (const auto& per_asset : blk.probs) {
                for (const auto& ph : per_asset) EXPECT_LT((ph.rowwise().sum().array() - 1.0).abs().maxCoeff(), 1e-12);
            }
        }
        for (const auto& blk : fc.self) {
            for (const auto& per_chain : blk.probs) {
                for (const auto& ph : per_chain) EXPECT_LT((ph.rowwise().sum().array() - 1.0).abs().maxCoeff(), 1e-12);
            }
        }
    }
}

TEST(Denoiser, StageOneAssetIsolation) {
    const auto c = small_config();
    Rng rng(77);
    const auto p = random_params(c, 77);
    auto ctx = random_context(c, rng);
    const Matrix x = random_matrix(rng, 2, c.assets);
    ForwardCache base, moved;
    denoise_forward_batch(p, encode_context(p, ctx), x, 40, &base);
    const int j = 1;
    for (int s = 0; s < c.window; ++s) {
        for (int k = 0; k < c.z_dim; ++k) ctx.asset_covs(s, j, k) += 0.5 + s;
        ctx.hist_returns(s, j) -= 0.3;
    }
    denoise_forward_batch(p, encode_context(p, ctx), x, 40, &moved);
    const int b = 2;
    for (int i = 0; i < c.assets; ++i) {
        const Matrix before = base.stage1.middleRows(i * b, b), after = moved.stage1.middleRows(i * b, b);
        if (i == j) {
            EXPECT_GT((before - after).cwiseAbs().maxCoeff(), 0.0);
        } else {
            EXPECT_TRUE(before == after) << "asset " << i;
        }
    }
}

TEST(Denoiser, BatchedChainsMatchSingleForward) {
    const auto c = small_config();
    Rng rng(5);
    const auto p = random_params(c, 5);
    const auto ctx = random_context(c, rng);
    const Matrix x = random_matrix(rng, 4, c.assets);
    const auto out = denoise_forward_batch(p, encode_context(p, ctx), x, 33);
    for (int b = 0; b < 4; ++b) {
        const auto one = denoise_forward(p, x.row(b).transpose(), 33, ctx);
        EXPECT_LT((one.eps_hat - out.eps_hat.row(b).transpose()).cwiseAbs().maxCoeff(), 1e-12);
        EXPECT_LT((one.attention - out.attention[static_cast<std::size_t>(b)]).cwiseAbs().maxCoeff(), 1e-12);
    }
}

TEST(Denoiser, SymmetricAssetsGiveEqualOutputs) {
    const auto c = small_config();
    Rng rng(6);
    const auto p = init_params(c, 6);
    auto ctx = random_context(c, rng);
    for (int s = 0; s < c.window; ++s) {
        ctx.hist_returns(s, 1) = ctx.hist_returns(s, 0);
        for (int k = 0; k < c.z_dim; ++k) ctx.asset_covs(s, 1, k) = ctx.asset_covs(s, 0, k);
    }
    ctx.sys_covs.setZero();
    Vector x(3);
    x << 0.4, 0.4, -1.0;
    const auto r = denoise_forward(p, x, 12, ctx);
    EXPECT_NEAR(r.eps_hat[0], r.eps_hat[1], 1e-12);
    EXPECT_EQ(r.eps_hat.size(), 3);
    EXPECT_EQ(r.attention.rows(), 3);
    EXPECT_EQ(r.attention.cols(), 3);
}

// With the systematic embedding zeroed its rows are constant, so the covariate values
// cannot reach ε̂. (Adding extra zero rows is not a no-op: they still take softmax mass.)
TEST(Denoiser, ZeroSystematicEmbeddingIgnoresCovariateValues) {
    const auto c = small_config();
    Rng rng(8);
    auto p = random_params(c, 8);
    p[p.layout.sys_w].setZero();
    p[p.layout.sys_b].setZero();
    p[p.layout.sys_id].setZero();
    auto ctx = random_context(c, rng);
    const Vector x = random_matrix(rng, c.assets, 1).col(0);
    const auto a = denoise_forward(p, x, 50, ctx);
    ctx.sys_covs = random_matrix(rng, c.window, c.sys_covariates, 5.0);
    const auto b = denoise_forward(p, x, 50, ctx);
    EXPECT_TRUE(a.eps_hat == b.eps_hat);
}

TEST(Denoiser, ContextValidation) {
    const auto c = small_config();
    Rng rng(9);
    const auto p = init_params(c, 9);
    auto ctx = random_context(c, rng);
    ctx.asset_covs(0, 0, 0) = std::nan("");
    EXPECT_THROW(encode_context(p, ctx), DataError);
    ctx = random_context(c, rng);
    ctx.hist_returns.conservativeResize(c.window - 1, c.assets);
    EXPECT_THROW(encode_context(p, ctx), DataError);
    ctx = random_context(c, rng);
    Vector x = Vector::Zero(c.assets);
    x[0] = std::numeric_limits<double>::infinity();
    EXPECT_THROW(denoise_forward(p, x, 3, ctx), NumericError);
}
