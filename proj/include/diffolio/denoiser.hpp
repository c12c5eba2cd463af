#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "diffolio/errors.hpp"
#include "diffolio/nn.hpp"
#include "diffolio/rng.hpp"
#include "diffolio/tensor.hpp"

namespace diffolio {

enum class AttentionReduce { mean, first_head };

struct DenoiserConfig {
    int assets = 12;          // N
    int sys_covariates = 8;   // N_y
    int window = 63;          // M
    int hidden = 128;         // D
    int heads = 4;
    int mlp_hidden = 512;
    int step_embed_dim = 32;
    int z_dim = 10;
    int cross_depth = 1;
    int self_depth = 1;
    bool window_pos = true;
    AttentionReduce attention_reduce = AttentionReduce::mean;
    double layernorm_eps = 1e-5;

    void validate() const {
        const std::pair<const char*, int> positive[] = {
            {"assets", assets},         {"sys_covariates", sys_covariates}, {"window", window},
            {"hidden", hidden},         {"heads", heads},                   {"mlp_hidden", mlp_hidden},
            {"step_embed_dim", step_embed_dim}, {"z_dim", z_dim},           {"cross_depth", cross_depth},
            {"self_depth", self_depth}};
        for (const auto& [name, v] : positive) {
            if (v <= 0) throw ConfigError(std::string("model.") + name, "must be positive");
        }
        if (hidden % heads != 0) throw ConfigError("model.heads", "hidden dimension must be divisible by heads");
        if (step_embed_dim % 2 != 0) throw ConfigError("model.step_embed_dim", "must be even");
        if (window_pos && hidden % 2 != 0) throw ConfigError("model.hidden", "must be even for window positions");
    }

    bool operator==(const DenoiserConfig&) const = default;
};

// ---- parameter layout -------------------------------------------------------

struct TensorSpec {
    std::string name;
    Eigen::Index rows = 0;
    Eigen::Index cols = 0;
    std::size_t offset = 0;

    std::size_t size() const { return static_cast<std::size_t>(rows * cols); }
};

struct BlockSlots {
    std::size_t wq, wk, wv, ln_gain, ln_bias, w1, b1, w2, b2;
};

/// Flat parameter vector layout; tensors appear in declaration order.
struct ParamLayout {
    std::vector<TensorSpec> tensors;
    std::size_t total = 0;
    std::size_t query_w = 0, query_b = 0, context_w = 0, context_b = 0, sys_w = 0, sys_b = 0, sys_id = 0;
    std::size_t dec_w = 0, dec_b = 0;
    std::vector<BlockSlots> cross, self;

    std::size_t add(std::string name, Eigen::Index rows, Eigen::Index cols) {
        tensors.push_back(TensorSpec{std::move(name), rows, cols, total});
        total += tensors.back().size();
        return tensors.size() - 1;
    }
};

inline ParamLayout make_layout(const DenoiserConfig& c) {
    ParamLayout l;
    const Eigen::Index d = c.hidden;
    l.query_w = l.add("query_embed.weight", 1 + c.step_embed_dim, d);
    l.query_b = l.add("query_embed.bias", 1, d);
    l.context_w = l.add("context_embed.weight", 1 + c.z_dim, d);
    l.context_b = l.add("context_embed.bias", 1, d);
    l.sys_w = l.add("sys_embed.weight", c.window, d);
    l.sys_b = l.add("sys_embed.bias", 1, d);
    l.sys_id = l.add("sys_embed.identity", c.sys_covariates, d);
    auto block = [&](const std::string& p) {
        BlockSlots s{};
        s.wq = l.add(p + ".w_q", d, d);
        s.wk = l.add(p + ".w_k", d, d);
        s.wv = l.add(p + ".w_v", d, d);
        s.ln_gain = l.add(p + ".ln.gain", 1, d);
        s.ln_bias = l.add(p + ".ln.bias", 1, d);
        s.w1 = l.add(p + ".mlp1.weight", d, c.mlp_hidden);
        s.b1 = l.add(p + ".mlp1.bias", 1, c.mlp_hidden);
        s.w2 = l.add(p + ".mlp2.weight", c.mlp_hidden, d);
        s.b2 = l.add(p + ".mlp2.bias", 1, d);
        return s;
    };
    for (int k = 0; k < c.cross_depth; ++k) l.cross.push_back(block("cross" + std::to_string(k)));
    for (int k = 0; k < c.self_depth; ++k) l.self.push_back(block("self" + std::to_string(k)));
    l.dec_w = l.add("decoder.weight", d, 1);
    l.dec_b = l.add("decoder.bias", 1, 1);
    return l;
}

inline std::size_t parameter_count(const DenoiserConfig& c) { return make_layout(c).total; }

inline nn::CMap tensor_view(const std::vector<double>& v, const ParamLayout& l, std::size_t slot) {
    const auto& t = l.tensors[slot];
    return nn::CMap(v.data() + t.offset, t.rows, t.cols);
}

inline nn::MMap tensor_view(std::vector<double>& v, const ParamLayout& l, std::size_t slot) {
    const auto& t = l.tensors[slot];
    return nn::MMap(v.data() + t.offset, t.rows, t.cols);
}

/// All learnable weights of the hierarchical attention denoiser.
struct DenoiserParams {
    DenoiserConfig config;
    ParamLayout layout;
    std::vector<double> values;

    nn::CMap operator[](std::size_t slot) const { return tensor_view(values, layout, slot); }
    nn::MMap operator[](std::size_t slot) { return tensor_view(values, layout, slot); }

    static DenoiserParams zeros(const DenoiserConfig& c) {
        c.validate();
        DenoiserParams p{c, make_layout(c), {}};
        p.values.assign(p.layout.total, 0.0);
        return p;
    }
};

/// Uniform ±1/√fan_in for linear maps, unit gain / zero bias for layer norms.
inline DenoiserParams init_params(const DenoiserConfig& c, std::uint64_t seed) {
    DenoiserParams p = DenoiserParams::zeros(c);
    const auto& l = p.layout;
    auto fill = [&](std::size_t slot, double bound) {
        Rng rng(substream_seed(seed, slot));
        auto m = p[slot];
        for (Eigen::Index j = 0; j < m.cols(); ++j) {
            for (Eigen::Index i = 0; i < m.rows(); ++i) m(i, j) = bound * (2.0 * NormalSampler::uniform01(rng) - 1.0);
        }
    };
    auto linear = [&](std::size_t w, std::size_t b) {
        const double bound = 1.0 / std::sqrt(static_cast<double>(l.tensors[w].rows));
        fill(w, bound);
        fill(b, bound);
    };
    linear(l.query_w, l.query_b);
    linear(l.context_w, l.context_b);
    linear(l.sys_w, l.sys_b);
    fill(l.sys_id, 1.0 / std::sqrt(static_cast<double>(c.hidden)));
    for (const auto* blocks : {&l.cross, &l.self}) {
        for (const auto& s : *blocks) {
            const double bound = 1.0 / std::sqrt(static_cast<double>(c.hidden));
            fill(s.wq, bound);
            fill(s.wk, bound);
            fill(s.wv, bound);
            p[s.ln_gain].setOnes();
            linear(s.w1, s.b1);
            linear(s.w2, s.b2);
        }
    }
    linear(l.dec_w, l.dec_b);
    return p;
}

// ---- embeddings ---------------------------------------------------------------

/// Sinusoidal embedding: [2i] = sin(τ / 10000^{2i/dim}), [2i+1] = cos(same).
inline nn::RowVec step_embedding(double tau, int dim) {
    if (dim <= 0 || dim % 2 != 0) throw ConfigError("model.step_embed_dim", "must be even and positive");
    nn::RowVec e(dim);
    for (int i = 0; i < dim / 2; ++i) {
        const double freq = std::pow(10000.0, -2.0 * i / dim);
        e[2 * i] = std::sin(tau * freq);
        e[2 * i + 1] = std::cos(tau * freq);
    }
    return e;
}

// Fixed sinusoidal table over window positions 1..M.
inline Matrix window_position_table(int window, int dim) {
    Matrix p(window, dim);
    for (int s = 0; s < window; ++s) p.row(s) = step_embedding(static_cast<double>(s + 1), dim);
    return p;
}

// ---- attention blocks -------------------------------------------------------------

template <class MapT>
struct BlockView {
    MapT wq, wk, wv, ln_gain, ln_bias, w1, b1, w2, b2;
};
using BlockParams = BlockView<nn::CMap>;
using BlockGrads = BlockView<nn::MMap>;

template <class Vec>
auto block_view(Vec& v, const ParamLayout& l, const BlockSlots& s) {
    using MapT = decltype(tensor_view(v, l, 0));
    return BlockView<MapT>{tensor_view(v, l, s.wq),      tensor_view(v, l, s.wk),      tensor_view(v, l, s.wv),
                           tensor_view(v, l, s.ln_gain), tensor_view(v, l, s.ln_bias), tensor_view(v, l, s.w1),
                           tensor_view(v, l, s.b1),      tensor_view(v, l, s.w2),      tensor_view(v, l, s.b2)};
}

inline Matrix residual_mlp_forward(const Matrix& z, const BlockParams& p, double eps, nn::ResidualMlpCache* c) {
    const Matrix n = nn::layer_norm(z, p.ln_gain, p.ln_bias, eps, c ? &c->ln : nullptr);
    return z + nn::mlp(n, p.w1, p.b1, p.w2, p.b2, c ? &c->mlp : nullptr);
}

inline Matrix residual_mlp_backward(const Matrix& dout, const nn::ResidualMlpCache& c, const BlockParams& p,
                                    BlockGrads& g) {
    const Matrix dn = nn::mlp_backward(dout, c.mlp, p.w1, p.w2, g.w1, g.b1, g.w2, g.b2);
    return dout + nn::layer_norm_backward(dn, c.ln, p.ln_gain, g.ln_gain, g.ln_bias);
}

struct CrossBlockCache {
    Matrix q_in;
    Matrix q_proj;
    std::vector<std::vector<Matrix>> probs;  // [asset][head], each (batch × window)
    nn::ResidualMlpCache residual;
};

/// Stage-1 cross attention for `n_assets` groups. Query rows are asset-major
/// (row i·batch + b); key/value rows are asset-major (row i·window + s). Each
/// query group attends only to its own asset's window. `k_proj`/`v_proj` are
/// keys·W_K and values·W_V.
inline Matrix cross_block_forward(const BlockParams& p, const Matrix& q_in, const Matrix& k_proj, const Matrix& v_proj,
                                  int n_assets, int batch, int window, int heads, double eps, CrossBlockCache* c) {
    Matrix q_proj = q_in * p.wq;
    Matrix ca(q_in.rows(), q_in.cols());
    std::vector<std::vector<Matrix>> probs(static_cast<std::size_t>(n_assets));
    for (int i = 0; i < n_assets; ++i) {
        ca.middleRows(i * batch, batch) =
            nn::attend(q_proj.middleRows(i * batch, batch), k_proj.middleRows(i * window, window),
                       v_proj.middleRows(i * window, window), heads, probs[static_cast<std::size_t>(i)]);
    }
    Matrix out = residual_mlp_forward(ca, p, eps, c ? &c->residual : nullptr);
    if (c) {
        c->q_in = q_in;
        c->q_proj = std::move(q_proj);
        c->probs = std::move(probs);
    }
    return out;
}

// Accumulates parameter gradients; writes dq_in and adds into dk_proj/dv_proj.
inline void cross_block_backward(const BlockParams& p, BlockGrads& g, const Matrix& dout, const CrossBlockCache& c,
                                 const Matrix& k_proj, const Matrix& v_proj, int n_assets, int batch, int window,
                                 int heads, Matrix& dq_in, Matrix& dk_proj, Matrix& dv_proj) {
    const Matrix dca = residual_mlp_backward(dout, c.residual, p, g);
    Matrix dq_proj = Matrix::Zero(dca.rows(), dca.cols());
    for (int i = 0; i < n_assets; ++i) {
        nn::attend_backward(dca.middleRows(i * batch, batch), c.q_proj.middleRows(i * batch, batch),
                            k_proj.middleRows(i * window, window), v_proj.middleRows(i * window, window), heads,
                            c.probs[static_cast<std::size_t>(i)], nullptr, dq_proj.middleRows(i * batch, batch),
                            dk_proj.middleRows(i * window, window), dv_proj.middleRows(i * window, window));
    }
    g.wq.noalias() += c.q_in.transpose() * dq_proj;
    dq_in = dq_proj * p.wq.transpose();
}

struct SelfBlockCache {
    Matrix h_in, q, k, v;
    std::vector<std::vector<Matrix>> probs;  // [chain][head], each (L × L)
    nn::ResidualMlpCache residual;
};

/// Stage-2 self attention over `batch` independent groups of `group` rows each.
inline Matrix self_block_forward(const BlockParams& p, const Matrix& h_in, int group, int batch, int heads, double eps,
                                 SelfBlockCache* c) {
    Matrix q = h_in * p.wq;
    Matrix k = h_in * p.wk;
    Matrix v = h_in * p.wv;
    Matrix sa(h_in.rows(), h_in.cols());
    std::vector<std::vector<Matrix>> probs(static_cast<std::size_t>(batch));
    for (int b = 0; b < batch; ++b) {
        sa.middleRows(b * group, group) =
            nn::attend(q.middleRows(b * group, group), k.middleRows(b * group, group),
                       v.middleRows(b * group, group), heads, probs[static_cast<std::size_t>(b)]);
    }
    Matrix out = residual_mlp_forward(sa, p, eps, c ? &c->residual : nullptr);
    if (c) {
        c->h_in = h_in;
        c->q = std::move(q);
        c->k = std::move(k);
        c->v = std::move(v);
        c->probs = std::move(probs);
    }
    return out;
}

inline void self_block_backward(const BlockParams& p, BlockGrads& g, const Matrix& dout, const SelfBlockCache& c,
                                int group, int batch, int heads, const std::vector<std::vector<Matrix>>* dprobs,
                                Matrix& dh_in) {
    const Matrix dsa = residual_mlp_backward(dout, c.residual, p, g);
    Matrix dq = Matrix::Zero(dsa.rows(), dsa.cols());
    Matrix dk = Matrix::Zero(dsa.rows(), dsa.cols());
    Matrix dv = Matrix::Zero(dsa.rows(), dsa.cols());
    for (int b = 0; b < batch; ++b) {
        nn::attend_backward(dsa.middleRows(b * group, group), c.q.middleRows(b * group, group),
                            c.k.middleRows(b * group, group), c.v.middleRows(b * group, group), heads,
                            c.probs[static_cast<std::size_t>(b)],
                            dprobs ? &(*dprobs)[static_cast<std::size_t>(b)] : nullptr,
                            dq.middleRows(b * group, group), dk.middleRows(b * group, group),
                            dv.middleRows(b * group, group));
    }
    g.wq.noalias() += c.h_in.transpose() * dq;
    g.wk.noalias() += c.h_in.transpose() * dk;
    g.wv.noalias() += c.h_in.transpose() * dv;
    dh_in = dq * p.wq.transpose() + dk * p.wk.transpose() + dv * p.wv.transpose();
}

// Head reduction of the asset-to-asset block of one probability stack.
inline Matrix reduce_attention(const std::vector<Matrix>& head_probs, int n, AttentionReduce mode) {
    if (mode == AttentionReduce::first_head) return head_probs.front().topLeftCorner(n, n);
    Matrix a = Matrix::Zero(n, n);
    for (const auto& ph : head_probs) a += ph.topLeftCorner(n, n);
    return a / static_cast<double>(head_probs.size());
}

// ---- full network ------------------------------------------------------------------

/// Lookback-window conditioning for one forecast anchor.
struct ConditioningBundle {
    Matrix hist_returns;  // M × N, standardized
    Tensor3 asset_covs;   // M × N × z_dim, normalized
    Matrix sys_covs;      // M × N_y, normalized

    void validate(const DenoiserConfig& c) const {
        if (hist_returns.rows() != c.window || hist_returns.cols() != c.assets) {
            throw DataError("context: hist_returns shape mismatch");
        }
        if (asset_covs.dim0() != static_cast<std::size_t>(c.window) ||
            asset_covs.dim1() != static_cast<std::size_t>(c.assets) ||
            asset_covs.dim2() != static_cast<std::size_t>(c.z_dim)) {
            throw DataError("context: asset covariate shape mismatch");
        }
        if (sys_covs.rows() != c.window || sys_covs.cols() != c.sys_covariates) {
            throw DataError("context: systematic covariate shape mismatch");
        }
        bool ok = hist_returns.allFinite() && sys_covs.allFinite();
        for (double v : asset_covs.data()) ok = ok && std::isfinite(v);
        if (!ok) throw DataError("context: undefined or non-finite entry");
    }
};

/// Everything in the forward pass that does not depend on (x_τ, τ).
struct ContextEncoding {
    Matrix context_rows;  // (N·M) × (1 + z_dim), asset-major
    Matrix kv;            // (N·M) × D: embedded keys = values
    std::vector<Matrix> k_proj, v_proj;  // per cross block
    Matrix sys_inputs;    // N_y × M
    Matrix sys_h;         // N_y × D
};

inline ContextEncoding encode_context(const DenoiserParams& params, const ConditioningBundle& ctx) {
    const auto& c = params.config;
    const auto& l = params.layout;
    ctx.validate(c);
    const int n = c.assets, m = c.window, z = c.z_dim;
    ContextEncoding e;
    e.context_rows.resize(n * m, 1 + z);
    for (int i = 0; i < n; ++i) {
        for (int s = 0; s < m; ++s) {
            const auto r = i * m + s;
            e.context_rows(r, 0) = ctx.hist_returns(s, i);
            for (int k = 0; k < z; ++k) {
                e.context_rows(r, 1 + k) =
                    ctx.asset_covs(static_cast<std::size_t>(s), static_cast<std::size_t>(i), static_cast<std::size_t>(k));
            }
        }
    }
    e.kv = (e.context_rows * params[l.context_w]).rowwise() + params[l.context_b].row(0);
    if (c.window_pos) {
        const Matrix pos = window_position_table(m, c.hidden);
        for (int i = 0; i < n; ++i) e.kv.middleRows(i * m, m) += pos;
    }
    for (const auto& s : l.cross) {
        e.k_proj.push_back(e.kv * params[s.wk]);
        e.v_proj.push_back(e.kv * params[s.wv]);
    }
    e.sys_inputs = ctx.sys_covs.transpose();
    e.sys_h = ((e.sys_inputs * params[l.sys_w]).rowwise() + params[l.sys_b].row(0)) + params[l.sys_id];
    return e;
}

struct ForwardCache {
    int batch = 0;
    nn::RowVec step_emb;
    Matrix query_inputs;  // (N·B) × (1 + S), asset-major
    std::vector<CrossBlockCache> cross;
    Matrix stage1;        // (N·B) × D, asset-major: h_i after the cross blocks
    std::vector<SelfBlockCache> self;
    Matrix h_out;         // (B·(N + N_y)) × D, chain-major
};

struct DenoiserOutput {
    Matrix eps_hat;                  // B × N
    std::vector<Matrix> attention;   // per chain, N × N
};

/// Runs B chains that share one context and one diffusion step.
inline DenoiserOutput denoise_forward_batch(const DenoiserParams& params, const ContextEncoding& enc,
                                           const Matrix& x_tau, int tau, ForwardCache* cache = nullptr) {
    const auto& c = params.config;
    const auto& l = params.layout;
    const int n = c.assets, ny = c.sys_covariates, m = c.window;
    const int bsz = static_cast<int>(x_tau.rows());
    const int group = n + ny;
    if (x_tau.cols() != n) throw DataError("denoiser: x_tau has wrong asset count");
    nn::require_finite(x_tau, "x_tau");

    ForwardCache local;
    ForwardCache& fc = cache ? *cache : local;
    fc.batch = bsz;
    fc.step_emb = step_embedding(static_cast<double>(tau), c.step_embed_dim);
    fc.query_inputs.resize(n * bsz, 1 + c.step_embed_dim);
    for (int i = 0; i < n; ++i) {
        for (int b = 0; b < bsz; ++b) {
            fc.query_inputs(i * bsz + b, 0) = x_tau(b, i);
            fc.query_inputs.row(i * bsz + b).tail(c.step_embed_dim) = fc.step_emb;
        }
    }
    Matrix h = (fc.query_inputs * params[l.query_w]).rowwise() + params[l.query_b].row(0);
    fc.cross.assign(l.cross.size(), {});
    for (std::size_t k = 0; k < l.cross.size(); ++k) {
        const auto bp = block_view(params.values, l, l.cross[k]);
        h = cross_block_forward(bp, h, enc.k_proj[k], enc.v_proj[k], n, bsz, m, c.heads, c.layernorm_eps,
                                &fc.cross[k]);
    }
    fc.stage1 = h;

    Matrix hh(bsz * group, c.hidden);
    for (int b = 0; b < bsz; ++b) {
        for (int i = 0; i < n; ++i) hh.row(b * group + i) = fc.stage1.row(i * bsz + b);
        hh.middleRows(b * group + n, ny) = enc.sys_h;
    }
    fc.self.assign(l.self.size(), {});
    for (std::size_t k = 0; k < l.self.size(); ++k) {
        const auto bp = block_view(params.values, l, l.self[k]);
        hh = self_block_forward(bp, hh, group, bsz, c.heads, c.layernorm_eps, &fc.self[k]);
    }
    fc.h_out = hh;

    DenoiserOutput out;
    out.eps_hat.resize(bsz, n);
    const auto wd = params[l.dec_w];
    const double bd = params[l.dec_b](0, 0);
    for (int b = 0; b < bsz; ++b) {
        out.eps_hat.row(b) = (fc.h_out.middleRows(b * group, n) * wd).transpose().array() + bd;
        out.attention.push_back(reduce_attention(fc.self.back().probs[static_cast<std::size_t>(b)], n, c.attention_reduce));
    }
    return out;
}

struct DenoiseResult {
    Vector eps_hat;
    Matrix attention;
};

inline DenoiseResult denoise_forward(const DenoiserParams& params, const Vector& x_tau, int tau,
                                     const ConditioningBundle& ctx) {
    const auto enc = encode_context(params, ctx);
    auto out = denoise_forward_batch(params, enc, x_tau.transpose(), tau);
    return {out.eps_hat.row(0).transpose(), std::move(out.attention.front())};
}

/// Backpropagates d(loss)/dε̂ (B × N) and optionally d(loss)/dA (per chain) into `grad`
/// (same layout as params.values; accumulated, not overwritten).
inline void denoise_backward(const DenoiserParams& params, const ContextEncoding& enc, const ForwardCache& fc,
                             const Matrix& d_eps, const std::vector<Matrix>* d_attention, std::vector<double>& grad) {
    const auto& c = params.config;
    const auto& l = params.layout;
    const int n = c.assets, ny = c.sys_covariates, m = c.window, heads = c.heads;
    const int bsz = fc.batch;
    const int group = n + ny;

    // decoder
    const auto wd = params[l.dec_w];
    Matrix dh = Matrix::Zero(fc.h_out.rows(), fc.h_out.cols());
    {
        auto gwd = tensor_view(grad, l, l.dec_w);
        auto gbd = tensor_view(grad, l, l.dec_b);
        for (int b = 0; b < bsz; ++b) {
            const Vector de = d_eps.row(b).transpose();
            gwd.noalias() += fc.h_out.middleRows(b * group, n).transpose() * de;
            gbd(0, 0) += de.sum();
            dh.middleRows(b * group, n).noalias() = de * wd.transpose();
        }
    }

    std::vector<std::vector<Matrix>> dprobs;
    if (d_attention) {
        dprobs.resize(static_cast<std::size_t>(bsz));
        for (int b = 0; b < bsz; ++b) {
            auto& per_head = dprobs[static_cast<std::size_t>(b)];
            per_head.assign(static_cast<std::size_t>(heads), Matrix::Zero(group, group));
            const Matrix& da = (*d_attention)[static_cast<std::size_t>(b)];
            if (c.attention_reduce == AttentionReduce::first_head) {
                per_head[0].topLeftCorner(n, n) = da;
            } else {
                for (auto& ph : per_head) ph.topLeftCorner(n, n) = da / static_cast<double>(heads);
            }
        }
    }

    for (std::size_t k = l.self.size(); k-- > 0;) {
        const auto bp = block_view(params.values, l, l.self[k]);
        auto bg = block_view(grad, l, l.self[k]);
        Matrix dh_in;
        self_block_backward(bp, bg, dh, fc.self[k], group, bsz, heads,
                            (d_attention && k + 1 == l.self.size()) ? &dprobs : nullptr, dh_in);
        dh = std::move(dh_in);
    }

    Matrix dstage = Matrix::Zero(n * bsz, c.hidden);
    Matrix dsys = Matrix::Zero(ny, c.hidden);
    for (int b = 0; b < bsz; ++b) {
        for (int i = 0; i < n; ++i) dstage.row(i * bsz + b) = dh.row(b * group + i);
        dsys += dh.middleRows(b * group + n, ny);
    }

    Matrix dkv = Matrix::Zero(enc.kv.rows(), enc.kv.cols());
    for (std::size_t k = l.cross.size(); k-- > 0;) {
        const auto bp = block_view(params.values, l, l.cross[k]);
        auto bg = block_view(grad, l, l.cross[k]);
        Matrix dq_in;
        Matrix dkp = Matrix::Zero(enc.kv.rows(), enc.kv.cols());
        Matrix dvp = Matrix::Zero(enc.kv.rows(), enc.kv.cols());
        cross_block_backward(bp, bg, dstage, fc.cross[k], enc.k_proj[k], enc.v_proj[k], n, bsz, m, heads, dq_in, dkp,
                             dvp);
        bg.wk.noalias() += enc.kv.transpose() * dkp;
        bg.wv.noalias() += enc.kv.transpose() * dvp;
        dkv.noalias() += dkp * bp.wk.transpose();
        dkv.noalias() += dvp * bp.wv.transpose();
        dstage = std::move(dq_in);
    }

    tensor_view(grad, l, l.query_w).noalias() += fc.query_inputs.transpose() * dstage;
    tensor_view(grad, l, l.query_b) += dstage.colwise().sum();
    tensor_view(grad, l, l.context_w).noalias() += enc.context_rows.transpose() * dkv;
    tensor_view(grad, l, l.context_b) += dkv.colwise().sum();
    tensor_view(grad, l, l.sys_w).noalias() += enc.sys_inputs.transpose() * dsys;
    tensor_view(grad, l, l.sys_b) += dsys.colwise().sum();
    tensor_view(grad, l, l.sys_id) += dsys;
}

// ---- standalone block entry points -------------------------------------------------

/// Single-query cross attention block: q (1 × D), keys/values (M × D) before projection.
inline nn::RowVec cross_attention_block(const nn::RowVec& q, const Matrix& keys, const Matrix& values,
                                        const BlockParams& p, int heads, double eps = 1e-5) {
    if (!q.allFinite() || !keys.allFinite() || !values.allFinite()) {
        throw NumericError("cross_attention_block: non-finite input");
    }
    const Matrix kp = keys * p.wk;
    const Matrix vp = values * p.wv;
    const Matrix out = cross_block_forward(p, Matrix(q), kp, vp, 1, 1, static_cast<int>(keys.rows()), heads, eps, nullptr);
    return out.row(0);
}

struct SelfAttentionResult {
    Matrix h;       // (N + N_y) × D
    Matrix attention;  // N × N
};

inline SelfAttentionResult self_attention_block(const Matrix& h, int n_assets, const BlockParams& p, int heads,
                                                AttentionReduce mode = AttentionReduce::mean, double eps = 1e-5) {
    if (!h.allFinite()) throw NumericError("self_attention_block: non-finite input");
    SelfBlockCache c;
    Matrix out = self_block_forward(p, h, static_cast<int>(h.rows()), 1, heads, eps, &c);
    return {std::move(out), reduce_attention(c.probs.front(), n_assets, mode)};
}

}  // namespace diffolio
