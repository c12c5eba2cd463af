#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "diffolio/errors.hpp"
#include "diffolio/tensor.hpp"

namespace diffolio {

/// Variance schedule β_τ for τ = 1..T with α_τ = 1 − β_τ and ᾱ_τ = ∏ α.
/// Accessors take the 1-based diffusion step; ᾱ_0 is defined as 1.
class NoiseSchedule {
public:
    NoiseSchedule() = default;

    static NoiseSchedule from_betas(std::vector<double> betas) {
        if (betas.empty()) throw NumericError("schedule: T must be >= 1");
        NoiseSchedule s;
        s.beta_ = std::move(betas);
        s.alpha_bar_.resize(s.beta_.size());
        double prod = 1.0;
        for (std::size_t i = 0; i < s.beta_.size(); ++i) {
            if (!(s.beta_[i] > 0.0 && s.beta_[i] < 1.0)) throw NumericError("schedule: beta must lie in (0,1)");
            prod *= 1.0 - s.beta_[i];
            s.alpha_bar_[i] = prod;
        }
        return s;
    }

    int steps() const { return static_cast<int>(beta_.size()); }
    double beta(int tau) const { return beta_.at(static_cast<std::size_t>(tau - 1)); }
    double alpha(int tau) const { return 1.0 - beta(tau); }
    double alpha_bar(int tau) const { return tau == 0 ? 1.0 : alpha_bar_.at(static_cast<std::size_t>(tau - 1)); }

    void check_step(int tau) const {
        if (tau < 1 || tau > steps()) {
            throw NumericError("diffusion step " + std::to_string(tau) + " outside [1, " + std::to_string(steps()) + "]");
        }
    }

private:
    std::vector<double> beta_;
    std::vector<double> alpha_bar_;
};

inline NoiseSchedule make_linear_schedule(int steps, double beta_start, double beta_end) {
    if (steps < 1) throw NumericError("schedule: T must be >= 1");
    if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0)) {
        throw NumericError("schedule: need 0 < beta_start <= beta_end < 1");
    }
    std::vector<double> b(static_cast<std::size_t>(steps));
    for (int i = 0; i < steps; ++i) {
        b[static_cast<std::size_t>(i)] =
            steps == 1 ? beta_start : beta_start + (beta_end - beta_start) * static_cast<double>(i) / (steps - 1);
    }
    return NoiseSchedule::from_betas(std::move(b));
}

/// Reverse-time step sequence ending at the terminal step 0.
struct DdimPlan {
    std::vector<int> steps;  // strictly decreasing, last element 0
    double eta = 0.0;

    void validate(const NoiseSchedule& sched) const {
        if (steps.size() < 2 || steps.back() != 0) throw NumericError("ddim plan must end at step 0");
        if (steps.front() > sched.steps()) throw NumericError("ddim plan starts beyond T");
        for (std::size_t i = 1; i < steps.size(); ++i) {
            if (steps[i] >= steps[i - 1]) throw NumericError("ddim plan steps must strictly decrease");
        }
        if (!(eta >= 0.0 && eta <= 1.0)) throw NumericError("ddim eta must lie in [0,1]");
    }
};

/// `count` denoiser evaluations evenly spaced from T down, then the terminal 0.
inline DdimPlan make_ddim_plan(int total_steps, int count, double eta) {
    if (count < 1 || count > total_steps) throw NumericError("ddim step count must lie in [1, T]");
    DdimPlan p;
    p.eta = eta;
    for (int k = 0; k < count; ++k) {
        const int tau = static_cast<int>(std::lround(total_steps - static_cast<double>(k) * total_steps / count));
        if (p.steps.empty() || tau < p.steps.back()) p.steps.push_back(tau);
    }
    p.steps.push_back(0);
    return p;
}

inline Vector forward_diffuse(const Vector& x0, int tau, const Vector& eps, const NoiseSchedule& sched) {
    sched.check_step(tau);
    if (eps.size() != x0.size()) throw NumericError("forward_diffuse: noise shape mismatch");
    const double ab = sched.alpha_bar(tau);
    return std::sqrt(ab) * x0 + std::sqrt(1.0 - ab) * eps;
}

inline double ddim_sigma(const NoiseSchedule& sched, int tau, int tau_prev, double eta) {
    const double ab = sched.alpha_bar(tau);
    const double ab_prev = sched.alpha_bar(tau_prev);
    return eta * std::sqrt((1.0 - ab_prev) / (1.0 - ab)) * std::sqrt(1.0 - ab / ab_prev);
}

/// One generalized DDIM update from τ to τ′ given the predicted noise.
/// `eps_prime` is only read when σ > 0.
inline Vector ddim_step(const Vector& x_tau, const Vector& eps_hat, int tau, int tau_prev, double eta,
                        const NoiseSchedule& sched, const Vector& eps_prime) {
    sched.check_step(tau);
    if (tau_prev < 0 || tau_prev >= tau) throw NumericError("ddim_step: need 0 <= tau_prev < tau");
    if (eps_hat.size() != x_tau.size()) throw NumericError("ddim_step: shape mismatch");
    const double ab = sched.alpha_bar(tau);
    const double ab_prev = sched.alpha_bar(tau_prev);
    const double sigma = ddim_sigma(sched, tau, tau_prev, eta);
    const double dir_var = 1.0 - ab_prev - sigma * sigma;
    // Exact algebra gives dir_var >= 0 for eta in [0,1]; clamp rounding residue only.
    if (dir_var < -1e-12) throw NumericError("ddim_step: negative direction variance");
    const Vector x0_hat = (x_tau - std::sqrt(1.0 - ab) * eps_hat) / std::sqrt(ab);
    Vector out = std::sqrt(ab_prev) * x0_hat + std::sqrt(std::max(0.0, dir_var)) * eps_hat;
    if (sigma > 0.0) {
        if (eps_prime.size() != x_tau.size()) throw NumericError("ddim_step: noise shape mismatch");
        out += sigma * eps_prime;
    }
    return out;
}

inline Vector ddim_step(const Vector& x_tau, const Vector& eps_hat, int tau, int tau_prev, const DdimPlan& plan,
                        const NoiseSchedule& sched, const Vector& eps_prime) {
    return ddim_step(x_tau, eps_hat, tau, tau_prev, plan.eta, sched, eps_prime);
}

}  // namespace diffolio
