#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <functional>
#include <limits>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include "diffolio/dataset.hpp"
#include "diffolio/denoiser.hpp"
#include "diffolio/diffusion.hpp"
#include "diffolio/guidance.hpp"
#include "diffolio/parallel.hpp"
#include "diffolio/rng.hpp"
#include "diffolio/sampler.hpp"
#include "diffolio/scoring.hpp"

namespace diffolio {

struct TrainConfig {
    int steps = 100000;
    int batch = 1024;
    double lr_max = 1e-4;
    int warmup = 1000;
    double lambda_corr = 0.05;
    int diffusion_steps = 1000;  // T
    double beta_start = 1e-4;
    double beta_end = 0.02;
    std::uint64_t seed = 0;

    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-8;
    double weight_decay = 0.01;
    double clip_norm = 1.0;  // <= 0 disables clipping

    ShrinkageMode shrinkage = ShrinkageMode::analytic;
    double shrinkage_delta = 0.5;

    int log_every = 1;
    int val_every = 5000;     // 0 disables validation
    int val_samples = 16;
    int val_max_dates = 256;
    int checkpoint_every = 0; // 0: only the final/best checkpoints
    std::vector<int> probe_steps;
    int probe_size = 512;
    int grad_chunks = 32;     // fixed accumulation partition of each batch

    void validate() const {
        if (steps < 0) throw ConfigError("train.steps", "must be >= 0");
        if (batch < 1) throw ConfigError("train.batch", "must be >= 1");
        if (!(lr_max > 0.0)) throw ConfigError("train.lr", "must be positive");
        if (warmup < 0) throw ConfigError("train.warmup", "must be >= 0");
        if (steps > 0 && warmup >= steps) throw ConfigError("train.warmup", "must be smaller than train.steps");
        if (!(lambda_corr >= 0.0)) throw ConfigError("train.lambda_corr", "must be >= 0");
        if (diffusion_steps < 1) throw ConfigError("diffusion.T", "must be >= 1");
        if (!(beta_start > 0.0 && beta_start <= beta_end)) throw ConfigError("diffusion.beta_start", "need 0 < beta_start <= beta_end");
        if (!(beta_end < 1.0)) throw ConfigError("diffusion.beta_end", "must be < 1");
        if (!(weight_decay >= 0.0)) throw ConfigError("train.weight_decay", "must be >= 0");
        if (!(shrinkage_delta >= 0.0 && shrinkage_delta <= 1.0)) {
            throw ConfigError("train.shrinkage_delta", "must lie in [0, 1]");
        }
        if (log_every < 1) throw ConfigError("train.log_every", "must be >= 1");
        if (val_every < 0) throw ConfigError("train.val_every", "must be >= 0");
        if (val_samples < 1) throw ConfigError("train.val_samples", "must be >= 1");
        if (grad_chunks < 1) throw ConfigError("train.grad_chunks", "must be >= 1");
    }

    NoiseSchedule schedule() const { return make_linear_schedule(diffusion_steps, beta_start, beta_end); }
};

/// Linear warmup to lr_max, then cosine decay to 0 at the last step.
inline double lr_at_step(int step, const TrainConfig& cfg) {
    if (cfg.warmup > 0 && step <= cfg.warmup) return cfg.lr_max * step / cfg.warmup;
    const double span = static_cast<double>(cfg.steps - cfg.warmup);
    if (span <= 0.0) return cfg.lr_max;
    return cfg.lr_max * 0.5 * (1.0 + std::cos(std::numbers::pi * (step - cfg.warmup) / span));
}

struct TrainSample {
    Eigen::Index t_index = 0;
    Vector x0;
    ConditioningBundle ctx;
};

/// Uniform draws with replacement from the anchor list.
inline std::vector<Eigen::Index> sample_training_batch(const std::vector<Eigen::Index>& anchors, int batch, Rng& rng) {
    if (anchors.empty()) throw DataError("training dataset is empty");
    std::vector<Eigen::Index> out(static_cast<std::size_t>(batch));
    for (auto& a : out) a = anchors[static_cast<std::size_t>(uniform_int(rng, 0, anchors.size() - 1))];
    return out;
}

inline TrainSample make_sample(const PreparedData& data, Eigen::Index t) { return {t, data.target(t), data.context(t)}; }

/// Diffusion step and noise of one batch element.
struct ElementNoise {
    int tau = 1;
    Vector eps;
};

inline ElementNoise draw_noise(Rng& rng, int n, int diffusion_steps) {
    NormalSampler ns;
    ElementNoise e;
    e.tau = 1 + static_cast<int>(uniform_int(rng, 0, static_cast<std::uint64_t>(diffusion_steps - 1)));
    e.eps = normal_vector(rng, ns, n);
    return e;
}

struct LossTerms {
    double mse = 0.0;
    double l_corr = 0.0;
    double total = 0.0;
};

// Per-coordinate mean squared error.
inline double mse_term(const Vector& eps, const Vector& eps_hat) { return (eps - eps_hat).squaredNorm() / eps.size(); }

/// Loss of one element; adds scale·dL/dθ into `grad` when non-null. The L_corr path
/// is skipped entirely when lambda is 0 or no target is given.
inline LossTerms element_loss(const DenoiserParams& params, const TrainSample& s, const ElementNoise& noise,
                              const NoiseSchedule& sched, const TargetCorrelation* target, double lambda,
                              std::vector<double>* grad, double scale = 1.0) {
    const Vector x_tau = forward_diffuse(s.x0, noise.tau, noise.eps, sched);
    const auto enc = encode_context(params, s.ctx);
    ForwardCache fc;
    const auto out = denoise_forward_batch(params, enc, x_tau.transpose(), noise.tau, grad ? &fc : nullptr);
    const Vector eps_hat = out.eps_hat.row(0).transpose();
    LossTerms l;
    l.mse = mse_term(noise.eps, eps_hat);
    const bool guided = lambda > 0.0 && target != nullptr;
    Matrix da;
    if (guided) l.l_corr = correlation_guidance_loss(out.attention.front(), *target, grad ? &da : nullptr);
    l.total = l.mse + lambda * l.l_corr;
    if (!std::isfinite(l.total)) throw NumericError("non-finite element loss");
    if (grad) {
        const Matrix d_eps = (scale * 2.0 / static_cast<double>(noise.eps.size())) * (eps_hat - noise.eps).transpose();
        std::vector<Matrix> d_attention;
        if (guided) d_attention.push_back((scale * lambda) * da);
        denoise_backward(params, enc, fc, d_eps, guided ? &d_attention : nullptr, *grad);
    }
    return l;
}

/// Shrinkage-target correlation for the window ending at anchor t.
inline TargetCorrelation window_target(const PreparedData& data, Eigen::Index t, const TrainConfig& cfg) {
    const Matrix w = data.raw_window(t);
    const ShrinkageTarget st{data.train_cov, cfg.shrinkage, cfg.shrinkage_delta};
    return covariance_to_correlation(ledoit_wolf_shrink(sample_covariance(w), st, w).cov);
}

/// Batch-mean loss and gradient. Elements are split into a fixed number of contiguous
/// chunks; chunk gradients are summed in chunk order, independent of thread count.
inline LossTerms compute_total_loss(const DenoiserParams& params, const std::vector<TrainSample>& batch,
                                    const std::vector<ElementNoise>& noise, const NoiseSchedule& sched,
                                    const std::vector<const TargetCorrelation*>& targets, double lambda,
                                    std::vector<double>* grad, int chunks = 32, const ParallelOptions& par = {}) {
    const auto b = batch.size();
    if (b == 0) throw DataError("empty batch");
    if (noise.size() != b || targets.size() != b) throw DataError("batch, noise and targets differ in length");
    const std::size_t nc = std::min<std::size_t>(static_cast<std::size_t>(std::max(chunks, 1)), b);
    std::vector<std::vector<double>> partial(nc);
    std::vector<LossTerms> terms(b);
    const double scale = 1.0 / static_cast<double>(b);
    parallel_for(nc, par, [&](std::size_t c) {
        const std::size_t lo = c * b / nc, hi = (c + 1) * b / nc;
        std::vector<double>* g = nullptr;
        if (grad) {
            partial[c].assign(params.values.size(), 0.0);
            g = &partial[c];
        }
        for (std::size_t e = lo; e < hi; ++e) {
            terms[e] = element_loss(params, batch[e], noise[e], sched, targets[e], lambda, g, scale);
        }
    });
    LossTerms mean;
    for (const auto& t : terms) {
        mean.mse += t.mse;
        mean.l_corr += t.l_corr;
        mean.total += t.total;
    }
    mean.mse *= scale;
    mean.l_corr *= scale;
    mean.total *= scale;
    if (grad) {
        grad->assign(params.values.size(), 0.0);
        for (const auto& p : partial) {
            for (std::size_t i = 0; i < p.size(); ++i) (*grad)[i] += p[i];
        }
    }
    return mean;
}

// ---- optimizer --------------------------------------------------------------------

struct AdamState {
    std::vector<double> m, v;
    long step = 0;
};

inline double global_norm(const std::vector<double>& g) {
    double s = 0.0;
    for (double x : g) s += x * x;
    return std::sqrt(s);
}

/// Decoupled weight decay Adam update; clips `grad` in place first.
inline void adamw_update(std::vector<double>& theta, std::vector<double>& grad, AdamState& st, double lr,
                         const TrainConfig& cfg) {
    if (st.m.empty()) {
        st.m.assign(theta.size(), 0.0);
        st.v.assign(theta.size(), 0.0);
    }
    if (cfg.clip_norm > 0.0) {
        const double norm = global_norm(grad);
        if (norm > cfg.clip_norm) {
            const double f = cfg.clip_norm / norm;
            for (auto& g : grad) g *= f;
        }
    }
    ++st.step;
    const double b1 = cfg.adam_beta1, b2 = cfg.adam_beta2;
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(st.step));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(st.step));
    for (std::size_t i = 0; i < theta.size(); ++i) {
        st.m[i] = b1 * st.m[i] + (1.0 - b1) * grad[i];
        st.v[i] = b2 * st.v[i] + (1.0 - b2) * grad[i] * grad[i];
        const double mh = st.m[i] / c1, vh = st.v[i] / c2;
        theta[i] -= lr * (mh / (std::sqrt(vh) + cfg.adam_eps) + cfg.weight_decay * theta[i]);
    }
}

// ---- training loop -------------------------------------------------------------------

struct TrainLogRow {
    int step = 0;
    double lr = 0.0, mse = 0.0, l_corr = 0.0, total = 0.0;
    std::optional<double> val_es;
    std::optional<double> probe_mse;
};

struct TrainState {
    DenoiserParams params;
    AdamState adam;
    int step = 0;
};

struct TrainResult {
    TrainState last;
    DenoiserParams best;
    int best_step = 0;
    double best_val_es = std::numeric_limits<double>::quiet_NaN();
    std::vector<TrainLogRow> log;
};

/// Thrown when the loss turns non-finite; carries the last finite state.
class TrainingAborted : public NumericError {
public:
    TrainingAborted(const std::string& what, TrainState last_good, std::vector<TrainLogRow> log)
        : NumericError(what), last_good_(std::move(last_good)), log_(std::move(log)) {}
    const TrainState& last_good() const { return last_good_; }
    const std::vector<TrainLogRow>& log() const { return log_; }

private:
    TrainState last_good_;
    std::vector<TrainLogRow> log_;
};

struct TrainHooks {
    std::function<void(const TrainLogRow&)> on_log;
    std::function<void(const TrainState&)> on_checkpoint;
};

namespace detail {
inline constexpr std::uint64_t batch_stream = 0x6261746368ULL;
inline constexpr std::uint64_t noise_stream = 0x6e6f697365ULL;
inline constexpr std::uint64_t probe_stream = 0x70726f6265ULL;
inline constexpr std::uint64_t val_stream = 0x76616cULL;
}  // namespace detail

/// Mean validation energy score (decimal return units) of small ensembles.
inline double validation_energy_score(const DenoiserParams& params, const PreparedData& data,
                                      const NoiseSchedule& sched, const SamplerSettings& s,
                                      const std::vector<Eigen::Index>& anchors, const ParallelOptions& par) {
    if (anchors.empty()) return std::numeric_limits<double>::quiet_NaN();
    const auto ens = forecast_anchors(params, data, anchors, sched, s, par);
    double es = 0.0;
    for (std::size_t j = 0; j < ens.size(); ++j) es += energy_score(ens[j].samples, data.realized(anchors[j]));
    return es / static_cast<double>(ens.size());
}

/// Fixed probe set drawn once from the training anchors; its MSE tracks fit without
/// batch-to-batch sampling noise.
struct ProbeSet {
    std::vector<TrainSample> samples;
    std::vector<ElementNoise> noise;
};

inline ProbeSet make_probe_set(const PreparedData& data, const TrainConfig& cfg, int n_assets) {
    ProbeSet p;
    Rng rng(substream_seed(cfg.seed, detail::probe_stream));
    for (auto t : sample_training_batch(data.train_anchors, cfg.probe_size, rng)) {
        p.samples.push_back(make_sample(data, t));
        p.noise.push_back(draw_noise(rng, n_assets, cfg.diffusion_steps));
    }
    return p;
}

inline double probe_mse(const DenoiserParams& params, const ProbeSet& probe, const NoiseSchedule& sched,
                        const ParallelOptions& par) {
    std::vector<const TargetCorrelation*> none(probe.samples.size(), nullptr);
    return compute_total_loss(params, probe.samples, probe.noise, sched, none, 0.0, nullptr, 32, par).mse;
}

inline TrainResult train(const PreparedData& data, const DenoiserParams& init, const TrainConfig& cfg,
                         const SamplerSettings& val_sampling, const ParallelOptions& par = {},
                         const TrainHooks& hooks = {}) {
    cfg.validate();
    const auto sched = cfg.schedule();
    const int n = init.config.assets;
    if (n != data.num_assets() || init.config.z_dim != data.z_dim() || init.config.sys_covariates != data.sys_dim() ||
        init.config.window != data.window) {
        throw ConfigError("model", "denoiser shape does not match the prepared data");
    }

    TrainResult res;
    res.last = TrainState{init, {}, 0};
    res.best = init;
    double best_es = std::numeric_limits<double>::infinity();

    TargetCache targets;
    auto target_for = [&](Eigen::Index t) -> const TargetCorrelation& {
        return targets.get_or_compute(t, [&] { return window_target(data, t, cfg); });
    };

    std::optional<ProbeSet> probe;
    if (!cfg.probe_steps.empty()) probe = make_probe_set(data, cfg, n);
    auto probe_due = [&](int step) {
        return probe && std::find(cfg.probe_steps.begin(), cfg.probe_steps.end(), step) != cfg.probe_steps.end();
    };
    const auto val_anchors = thin_anchors(data.val_anchors, cfg.val_max_dates);
    SamplerSettings vs = val_sampling;
    vs.samples = cfg.val_samples;
    vs.seed = substream_seed(cfg.seed, detail::val_stream);

    if (probe_due(0)) {
        TrainLogRow row;
        row.probe_mse = probe_mse(res.last.params, *probe, sched, par);
        res.log.push_back(row);
        if (hooks.on_log) hooks.on_log(row);
    }

    std::vector<double> grad;
    for (int step = 1; step <= cfg.steps; ++step) {
        Rng brng(substream_seed(cfg.seed, detail::batch_stream, static_cast<std::uint64_t>(step)));
        const auto idx = sample_training_batch(data.train_anchors, cfg.batch, brng);
        std::vector<TrainSample> batch;
        std::vector<ElementNoise> noise;
        std::vector<const TargetCorrelation*> tgt;
        batch.reserve(idx.size());
        for (std::size_t e = 0; e < idx.size(); ++e) {
            batch.push_back(make_sample(data, idx[e]));
            Rng nrng(substream_seed(cfg.seed, detail::noise_stream,
                                    static_cast<std::uint64_t>(step) * 0x100000000ULL + e));
            noise.push_back(draw_noise(nrng, n, cfg.diffusion_steps));
            tgt.push_back(cfg.lambda_corr > 0.0 ? &target_for(idx[e]) : nullptr);
        }

        LossTerms loss;
        try {
            loss = compute_total_loss(res.last.params, batch, noise, sched, tgt, cfg.lambda_corr, &grad, cfg.grad_chunks,
                                      par);
        } catch (const NumericError& e) {
            throw TrainingAborted("training aborted at step " + std::to_string(step) + ": " + e.what(), res.last,
                                  res.log);
        }
        bool finite = std::isfinite(loss.total);
        for (double g : grad) finite = finite && std::isfinite(g);
        if (!finite) {
            throw TrainingAborted("training aborted at step " + std::to_string(step) + ": non-finite loss (mse " +
                                      std::to_string(loss.mse) + ", l_corr " + std::to_string(loss.l_corr) + ")",
                                  res.last, res.log);
        }

        const double lr = lr_at_step(step, cfg);
        TrainState next = res.last;
        adamw_update(next.params.values, grad, next.adam, lr, cfg);
        next.step = step;
        res.last = std::move(next);

        const bool val_due = cfg.val_every > 0 && step % cfg.val_every == 0;
        if (step % cfg.log_every == 0 || step == cfg.steps || val_due || probe_due(step)) {
            TrainLogRow row{step, lr, loss.mse, loss.l_corr, loss.total, std::nullopt, std::nullopt};
            if (val_due && !val_anchors.empty()) {
                const double es = validation_energy_score(res.last.params, data, sched, vs, val_anchors, par);
                row.val_es = es;
                if (es < best_es) {
                    best_es = es;
                    res.best = res.last.params;
                    res.best_step = step;
                    res.best_val_es = es;
                }
            }
            if (probe_due(step)) row.probe_mse = probe_mse(res.last.params, *probe, sched, par);
            res.log.push_back(row);
            if (hooks.on_log) hooks.on_log(row);
        }
        if (cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 && hooks.on_checkpoint) {
            hooks.on_checkpoint(res.last);
        }
    }
    if (!std::isfinite(best_es)) {
        res.best = res.last.params;
        res.best_step = res.last.step;
    }
    return res;
}

inline void write_train_log(const std::string& path, const std::vector<TrainLogRow>& log) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot write " + path);
    out << "step,lr,mse,l_corr,total,val_es,probe_mse\n";
    for (const auto& r : log) {
        out << r.step << "," << csv::fmt(r.lr) << "," << csv::fmt(r.mse) << "," << csv::fmt(r.l_corr) << ","
            << csv::fmt(r.total) << "," << (r.val_es ? csv::fmt(*r.val_es) : std::string()) << ","
            << (r.probe_mse ? csv::fmt(*r.probe_mse) : std::string()) << "\n";
    }
}

}  // namespace diffolio
