#pragma once

#include <vector>

#include "diffolio/dataset.hpp"
#include "diffolio/denoiser.hpp"
#include "diffolio/diffusion.hpp"
#include "diffolio/ensemble.hpp"
#include "diffolio/parallel.hpp"
#include "diffolio/rng.hpp"

namespace diffolio {

struct SamplerSettings {
    DdimPlan plan;
    int samples = 100;      // K
    std::uint64_t seed = 0;
    int chain_block = 16;   // chains per batched forward; blocks are zero-padded to this size
};

/// K reverse chains for one context, in model space (K × N). Chain k draws x^T and
/// any σ-noise from substream (seed, stream, k), and every block has the same shape,
/// so a chain's output does not depend on K.
inline Matrix sample_chains(const DenoiserParams& params, const ContextEncoding& enc, const NoiseSchedule& sched,
                            const SamplerSettings& s, std::uint64_t stream) {
    if (s.samples < 1) throw DataError("sample count K must be >= 1");
    if (s.chain_block < 1) throw ConfigError("sample.chain_block", "must be positive");
    s.plan.validate(sched);
    const int n = params.config.assets;
    Matrix out(s.samples, n);
    NormalSampler ns_proto;
    for (int start = 0; start < s.samples; start += s.chain_block) {
        const int live = std::min(s.chain_block, s.samples - start);
        std::vector<Rng> rngs;
        std::vector<NormalSampler> ns(static_cast<std::size_t>(live), ns_proto);
        Matrix x = Matrix::Zero(s.chain_block, n);
        for (int b = 0; b < live; ++b) {
            rngs.emplace_back(substream_seed(s.seed, stream, static_cast<std::uint64_t>(start + b)));
            for (int i = 0; i < n; ++i) x(b, i) = ns[static_cast<std::size_t>(b)](rngs.back());
        }
        for (std::size_t k = 0; k + 1 < s.plan.steps.size(); ++k) {
            const int tau = s.plan.steps[k], prev = s.plan.steps[k + 1];
            const auto pred = denoise_forward_batch(params, enc, x, tau);
            const double sigma = ddim_sigma(sched, tau, prev, s.plan.eta);
            Vector noise;
            for (int b = 0; b < live; ++b) {
                if (sigma > 0.0) {
                    noise = normal_vector(rngs[static_cast<std::size_t>(b)], ns[static_cast<std::size_t>(b)], n);
                }
                x.row(b) = ddim_step(x.row(b).transpose(), pred.eps_hat.row(b).transpose(), tau, prev, s.plan.eta, sched,
                                     noise)
                               .transpose();
            }
        }
        out.middleRows(start, live) = x.topRows(live);
    }
    if (!out.allFinite()) throw NumericError("sampler produced non-finite values");
    return out;
}

/// One forecast ensemble in decimal return units.
inline ForecastEnsemble generate_ensemble(const DenoiserParams& params, const ConditioningBundle& ctx,
                                          const NoiseSchedule& sched, const SamplerSettings& s, std::uint64_t stream,
                                          const Normalizer& returns_norm, Date date) {
    const auto enc = encode_context(params, ctx);
    return ForecastEnsemble{date, returns_norm.invert(sample_chains(params, enc, sched, s, stream))};
}

/// Ensembles for a list of anchors; the stream of anchor t is t itself.
inline std::vector<ForecastEnsemble> forecast_anchors(const DenoiserParams& params, const PreparedData& data,
                                                      const std::vector<Eigen::Index>& anchors,
                                                      const NoiseSchedule& sched, const SamplerSettings& s,
                                                      const ParallelOptions& par = {}) {
    std::vector<ForecastEnsemble> out(anchors.size());
    parallel_for(anchors.size(), par, [&](std::size_t j) {
        const auto t = anchors[j];
        out[j] = generate_ensemble(params, data.context(t), sched, s, static_cast<std::uint64_t>(t), data.norms.returns,
                                   data.forecast_date(t));
    });
    return out;
}

/// Evenly spaced subset of at most `cap` anchors (all when cap <= 0).
inline std::vector<Eigen::Index> thin_anchors(const std::vector<Eigen::Index>& anchors, int cap) {
    if (cap <= 0 || anchors.size() <= static_cast<std::size_t>(cap)) return anchors;
    std::vector<Eigen::Index> out;
    for (int j = 0; j < cap; ++j) {
        out.push_back(anchors[static_cast<std::size_t>(j) * anchors.size() / static_cast<std::size_t>(cap)]);
    }
    return out;
}

}  // namespace diffolio
