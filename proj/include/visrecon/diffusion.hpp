#pragma once

#include <cmath>
#include <utility>
#include <vector>

#include "visrecon/autodiff.hpp"
#include "visrecon/schedule.hpp"

namespace visrecon {

constexpr int kLatentC = 4, kLatentH = 8, kLatentW = 8;

inline std::vector<int> latent_shape() { return {kLatentC, kLatentH, kLatentW}; }

inline void check_latent(const Tensor& z, const char* what) {
    check(z.shape == latent_shape(), std::string(what) + ": expected 4x8x8 latent");
}

enum class GradMode { stop_gradient, full_backprop };

struct GuidanceConfig {
    double kappa = 0.0;
    double eta = 0.2;
    double cfg_scale = 7.5;
    int ddim_steps = 50;
    double img2img_strength = 0.75;
    GradMode grad_mode = GradMode::stop_gradient;
    std::uint64_t seed = 0;

    void validate() const {
        if (kappa < 0.0) throw config_error("guidance kappa must be nonnegative");
        if (eta < 0.0 || eta > 1.0) throw config_error("guidance eta must be in [0,1]");
        if (cfg_scale < 0.0) throw config_error("cfg_scale must be nonnegative");
        if (ddim_steps <= 0) throw config_error("ddim_steps must be positive");
        if (img2img_strength <= 0.0 || img2img_strength > 1.0)
            throw config_error("img2img_strength must be in (0,1]");
    }

    int guided_iterations() const { return static_cast<int>(std::ceil(eta * ddim_steps)); }
    int start_iterations() const {
        int n = static_cast<int>(std::floor(img2img_strength * ddim_steps));
        return n < 1 ? 1 : n;
    }
};

// z_t = sqrt(ab_t) z0 + sqrt(1-ab_t) eps
inline Tensor forward_diffuse(const Tensor& z0, int t, const Tensor& eps, const NoiseSchedule& sched) {
    if (!z0.same_shape(eps)) throw invariant_error("forward_diffuse: shape mismatch");
    double ab = sched.ab(t);
    Tensor out = z0;
    out.vec() = std::sqrt(ab) * z0.vec() + std::sqrt(1.0 - ab) * eps.vec();
    return out;
}

namespace detail {
inline Tensor tweedie_eps_form(const Tensor& z_t, const Tensor& eps_hat, double ab) {
    Tensor out = z_t;
    out.vec() = (z_t.vec() - std::sqrt(1.0 - ab) * eps_hat.vec()) / std::sqrt(ab);
    return out;
}
}  // namespace detail

// clean-sample estimate from the noise prediction; cross-checked against the
// score-form evaluation z0 = (z_t + (1-ab) s) / sqrt(ab) with s = -eps/sqrt(1-ab)
inline Tensor tweedie_estimate(const Tensor& z_t, const Tensor& eps_hat, int t, const NoiseSchedule& sched) {
    if (!z_t.same_shape(eps_hat)) throw invariant_error("tweedie_estimate: shape mismatch");
    double ab = sched.ab(t);
    if (!(ab > 0.0)) throw numeric_error("tweedie_estimate: degenerate schedule, alpha_bar=0");
    Tensor out = detail::tweedie_eps_form(z_t, eps_hat, ab);
    if (ab < 1.0) {
        double s1 = std::sqrt(1.0 - ab);
        for (int i = 0; i < z_t.numel(); ++i) {
            double score = -eps_hat.v[i] / s1;
            double alt = (z_t.v[i] + (1.0 - ab) * score) / std::sqrt(ab);
            if (std::abs(alt - out.v[i]) > 1e-10)
                throw numeric_error("tweedie_estimate: score-form disagreement");
        }
    }
    return out;
}

// z_hat_t = sqrt(1-ab) z0_hat + (1 - sqrt(1-ab)) z_t
inline Tensor blend_weighted(const Tensor& z0_hat, const Tensor& z_t, int t, const NoiseSchedule& sched) {
    if (!z0_hat.same_shape(z_t)) throw invariant_error("blend_weighted: shape mismatch");
    double w = std::sqrt(1.0 - sched.ab(t));
    Tensor out = z_t;
    out.vec() = w * z0_hat.vec() + (1.0 - w) * z_t.vec();
    return out;
}

inline Tensor cfg_epsilon(const Tensor& eps_cond, const Tensor& eps_uncond, double scale) {
    if (!eps_cond.same_shape(eps_uncond)) throw invariant_error("cfg_epsilon: shape mismatch");
    Tensor out = eps_uncond;
    out.vec() += scale * (eps_cond.vec() - eps_uncond.vec());
    return out;
}

// One deterministic DDIM update with effective noise eps_eff:
// z_prev = sqrt(ab_prev) * (z_t - sqrt(1-ab_t) eps_eff)/sqrt(ab_t) + sqrt(1-ab_prev) eps_eff
inline Tensor ddim_update(const Tensor& z_t, const Tensor& eps_eff, double ab_t, double ab_prev) {
    Tensor z0 = detail::tweedie_eps_form(z_t, eps_eff, ab_t);
    Tensor out = z0;
    out.vec() = std::sqrt(ab_prev) * z0.vec() + std::sqrt(1.0 - ab_prev) * eps_eff.vec();
    return out;
}

// Differentiable loss attached to the blended latent; implementations build
// the scalar loss node from the latent node (decoding, feature extraction and
// the distance all happen inside the graph so the VJP is exact).
struct GuidanceObjective {
    virtual ~GuidanceObjective() = default;
    virtual int build_loss(Graph& g, int z_hat_t_node) const = 0;
};

// loss value plus gradient w.r.t. the blended latent
inline std::pair<double, Tensor> guidance_loss(const Tensor& z_t_hat, const GuidanceObjective& obj) {
    Graph g;
    int z = g.leaf(z_t_hat);
    int loss = obj.build_loss(g, z);
    g.backward(loss);
    Tensor grad = g.has_grad(z) ? g.grad(z) : Tensor(z_t_hat.shape);
    return {g.val(loss)[0], std::move(grad)};
}

struct StepTrace {
    int t = 0;             // schedule step index
    bool guided = false;
    double loss = 0.0;      // guidance loss at this step (0 when unguided)
    double grad_norm = 0.0; // norm of d(loss)/d(z_t)
};

// Evenly thinned step ladder for DDIM; index i in [0, steps) maps to schedule
// step (i+1)*T/steps - 1.
inline std::vector<int> ddim_time_ladder(int T, int steps) {
    if (steps <= 0 || steps > T) throw config_error("ddim_steps must be in [1, T]");
    if (T % steps != 0) throw config_error("schedule length must be a multiple of ddim_steps");
    std::vector<int> times(steps);
    int c = T / steps;
    for (int i = 0; i < steps; ++i) times[i] = (i + 1) * c - 1;
    return times;
}

}  // namespace visrecon
