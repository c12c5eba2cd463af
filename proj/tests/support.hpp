#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "diffolio/denoiser.hpp"
#include "diffolio/guidance.hpp"
#include "diffolio/rng.hpp"

#include <unistd.h>

namespace testing_support {

using namespace diffolio;

inline DenoiserConfig small_config() {
    DenoiserConfig c;
    c.assets = 3;
    c.sys_covariates = 2;
    c.window = 5;
    c.hidden = 8;
    c.heads = 2;
    c.mlp_hidden = 12;
    c.step_embed_dim = 4;
    c.z_dim = 3;
    return c;
}

inline Matrix random_matrix(Rng& rng, Eigen::Index r, Eigen::Index c, double scale = 1.0) {
    NormalSampler ns;
    Matrix m(r, c);
    for (Eigen::Index j = 0; j < c; ++j) {
        for (Eigen::Index i = 0; i < r; ++i) m(i, j) = scale * ns(rng);
    }
    return m;
}

inline ConditioningBundle random_context(const DenoiserConfig& c, Rng& rng) {
    NormalSampler ns;
    ConditioningBundle b;
    b.hist_returns = random_matrix(rng, c.window, c.assets);
    b.asset_covs = Tensor3(static_cast<std::size_t>(c.window), static_cast<std::size_t>(c.assets),
                           static_cast<std::size_t>(c.z_dim));
    for (auto& v : b.asset_covs.data()) v = ns(rng);
    b.sys_covs = random_matrix(rng, c.window, c.sys_covariates);
    return b;
}

// Init, then jitter every parameter so layer-norm gains/biases are generic too.
inline DenoiserParams random_params(const DenoiserConfig& c, std::uint64_t seed) {
    DenoiserParams p = init_params(c, seed);
    Rng rng(substream_seed(seed, 991));
    NormalSampler ns;
    for (auto& v : p.values) v += 0.1 * ns(rng);
    return p;
}

inline Matrix random_correlation(Rng& rng, Eigen::Index n) {
    const Matrix x = random_matrix(rng, n + 4, n);
    return covariance_to_correlation(sample_covariance(x)).matrix;
}

// |a − n| / max(|a|, |n|, floor) maximized over coordinates.
inline double max_relative_error(const std::vector<double>& analytic, const std::vector<double>& numeric,
                                 double floor = 1e-6) {
    double worst = 0.0;
    for (std::size_t i = 0; i < analytic.size(); ++i) {
        const double den = std::max({std::abs(analytic[i]), std::abs(numeric[i]), floor});
        worst = std::max(worst, std::abs(analytic[i] - numeric[i]) / den);
    }
    return worst;
}

inline std::vector<double> central_difference(std::vector<double>& x, const std::function<double()>& f,
                                              double h = 1e-5) {
    std::vector<double> g(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double keep = x[i];
        x[i] = keep + h;
        const double up = f();
        x[i] = keep - h;
        const double down = f();
        x[i] = keep;
        g[i] = (up - down) / (2.0 * h);
    }
    return g;
}

/// Full-network check of L = Σ W∘ε̂ + λ·mean_b L_corr(A_b, target) with B chains.
inline double full_network_gradcheck(std::uint64_t seed, int chains = 2, double lambda = 0.7,
                                     DenoiserConfig c = small_config()) {
    Rng rng(substream_seed(seed, 1));
    DenoiserParams p = random_params(c, seed);
    const ConditioningBundle ctx = random_context(c, rng);
    const Matrix x = random_matrix(rng, chains, c.assets);
    const Matrix w = random_matrix(rng, chains, c.assets);
    const TargetCorrelation target{random_correlation(rng, c.assets)};
    const int tau = 1 + static_cast<int>(uniform_int(rng, 0, 199));

    auto loss = [&](const Matrix& xx) {
        const auto enc = encode_context(p, ctx);
        const auto out = denoise_forward_batch(p, enc, xx, tau);
        double l = (out.eps_hat.array() * w.array()).sum();
        for (const auto& a : out.attention) l += lambda * correlation_guidance_loss(a, target) / chains;
        return l;
    };

    std::vector<double> grad(p.values.size(), 0.0);
    {
        const auto enc = encode_context(p, ctx);
        ForwardCache fc;
        const auto out = denoise_forward_batch(p, enc, x, tau, &fc);
        std::vector<Matrix> da;
        for (const auto& a : out.attention) {
            Matrix g;
            correlation_guidance_loss(a, target, &g);
            da.push_back(lambda * g / chains);
        }
        denoise_backward(p, enc, fc, w, &da, grad);
    }
    const auto numeric = central_difference(p.values, [&] { return loss(x); });
    return max_relative_error(grad, numeric);
}

// Standalone block parameters drawn from a small full-network layout.
struct BlockFixture {
    DenoiserParams params;
    BlockSlots slots;
};

inline BlockFixture block_fixture(std::uint64_t seed, bool cross) {
    BlockFixture f{random_params(small_config(), seed), {}};
    f.slots = cross ? f.params.layout.cross.front() : f.params.layout.self.front();
    return f;
}

/// Cross block: L = Σ W∘out over params, q_in, k_proj and v_proj.
inline double cross_block_gradcheck(std::uint64_t seed) {
    const DenoiserConfig c = small_config();
    auto f = block_fixture(seed, true);
    Rng rng(substream_seed(seed, 2));
    const int n = c.assets, b = 2, m = c.window, d = c.hidden;
    std::vector<double> q(static_cast<std::size_t>(n * b * d)), k(static_cast<std::size_t>(n * m * d)),
        v(static_cast<std::size_t>(n * m * d));
    NormalSampler ns;
    for (auto* vec : {&q, &k, &v}) {
        for (auto& e : *vec) e = ns(rng);
    }
    const Matrix w = random_matrix(rng, n * b, d);
    auto as_mat = [](std::vector<double>& vec, Eigen::Index r, Eigen::Index cc) { return Matrix(nn::MMap(vec.data(), r, cc)); };
    auto loss = [&] {
        const auto bp = block_view(std::as_const(f.params.values), f.params.layout, f.slots);
        const Matrix out = cross_block_forward(bp, as_mat(q, n * b, d), as_mat(k, n * m, d), as_mat(v, n * m, d), n, b, m,
                                               c.heads, c.layernorm_eps, nullptr);
        return (out.array() * w.array()).sum();
    };
    std::vector<double> grad(f.params.values.size(), 0.0);
    Matrix dq, dk = Matrix::Zero(n * m, d), dv = Matrix::Zero(n * m, d);
    {
        const auto bp = block_view(std::as_const(f.params.values), f.params.layout, f.slots);
        auto bg = block_view(grad, f.params.layout, f.slots);
        CrossBlockCache cache;
        cross_block_forward(bp, as_mat(q, n * b, d), as_mat(k, n * m, d), as_mat(v, n * m, d), n, b, m, c.heads,
                            c.layernorm_eps, &cache);
        cross_block_backward(bp, bg, w, cache, as_mat(k, n * m, d), as_mat(v, n * m, d), n, b, m, c.heads, dq, dk, dv);
    }
    double worst = max_relative_error(grad, central_difference(f.params.values, loss));
    auto flat = [](const Matrix& mm) { return std::vector<double>(mm.data(), mm.data() + mm.size()); };
    worst = std::max(worst, max_relative_error(flat(dq), central_difference(q, loss)));
    worst = std::max(worst, max_relative_error(flat(dk), central_difference(k, loss)));
    worst = std::max(worst, max_relative_error(flat(dv), central_difference(v, loss)));
    return worst;
}

/// Self block: L = Σ W∘out + Σ_h Σ P_h∘Wp_h over params and h_in.
inline double self_block_gradcheck(std::uint64_t seed) {
    const DenoiserConfig c = small_config();
    auto f = block_fixture(seed, false);
    Rng rng(substream_seed(seed, 3));
    const int group = c.assets + c.sys_covariates, b = 2, d = c.hidden;
    std::vector<double> h(static_cast<std::size_t>(group * b * d));
    NormalSampler ns;
    for (auto& e : h) e = ns(rng);
    const Matrix w = random_matrix(rng, group * b, d);
    std::vector<std::vector<Matrix>> wp(static_cast<std::size_t>(b));
    for (auto& per : wp) {
        for (int k = 0; k < c.heads; ++k) per.push_back(random_matrix(rng, group, group));
    }
    auto loss = [&] {
        const auto bp = block_view(std::as_const(f.params.values), f.params.layout, f.slots);
        SelfBlockCache cache;
        const Matrix out = self_block_forward(bp, Matrix(nn::MMap(h.data(), group * b, d)), group, b, c.heads,
                                              c.layernorm_eps, &cache);
        double l = (out.array() * w.array()).sum();
        for (int bb = 0; bb < b; ++bb) {
            for (int k = 0; k < c.heads; ++k) {
                l += (cache.probs[static_cast<std::size_t>(bb)][static_cast<std::size_t>(k)].array() *
                      wp[static_cast<std::size_t>(bb)][static_cast<std::size_t>(k)].array())
                         .sum();
            }
        }
        return l;
    };
    std::vector<double> grad(f.params.values.size(), 0.0);
    Matrix dh;
    {
        const auto bp = block_view(std::as_const(f.params.values), f.params.layout, f.slots);
        auto bg = block_view(grad, f.params.layout, f.slots);
        SelfBlockCache cache;
        self_block_forward(bp, Matrix(nn::MMap(h.data(), group * b, d)), group, b, c.heads, c.layernorm_eps, &cache);
        self_block_backward(bp, bg, w, cache, group, b, c.heads, &wp, dh);
    }
    double worst = max_relative_error(grad, central_difference(f.params.values, loss));
    worst = std::max(worst, max_relative_error(std::vector<double>(dh.data(), dh.data() + dh.size()),
                                               central_difference(h, loss)));
    return worst;
}

// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
public:
    explicit TempDir(const std::string& tag) {
        static int counter = 0;
        path_ = std::filesystem::temp_directory_path() /
                ("diffolio_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
        std::filesystem::remove_all(path_);
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;

    std::string file(const std::string& name) const { return (path_ / name).string(); }
    const std::filesystem::path& path() const { return path_; }

private:
    std::filesystem::path path_;
};

inline std::string write_file(const std::string& path, const std::string& text) {
    std::ofstream out(path);
    out << text;
    return path;
}

inline std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace testing_support
