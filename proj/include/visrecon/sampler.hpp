#pragma once

#include "visrecon/denoiser.hpp"
#include "visrecon/latent_codec.hpp"

namespace visrecon {

struct ModelBundle {
    const Denoiser* denoiser = nullptr;
    const LatentCodec* codec = nullptr;
    const FeaturePyramid* features = nullptr;
    const NoiseSchedule* sched = nullptr;

    void validate() const {
        check(denoiser && codec && features && sched, "model bundle incomplete");
    }
};

// kappa * sum over layers of squared distance between pyramid features of the
// decoded latent and the target features
struct FeatureGuidance final : GuidanceObjective {
    const LatentCodec* codec = nullptr;
    const FeaturePyramid* features = nullptr;
    const GuidanceFeatureSet* targets = nullptr;
    double kappa = 0.0;
    std::vector<int> layers{1, 2, 3};

    int build_loss(Graph& g, int z_hat_t_node) const override {
        check(codec && features && targets, "feature guidance objective not wired");
        int img = codec->decode_op(g, z_hat_t_node);
        std::vector<int> terms;
        for (int l : layers) {
            int f = features->extract_op(g, img, l);
            int d = g.sub(f, g.input(targets->layer(l)));
            terms.push_back(g.sum_sq(d));
        }
        return g.scale(g.sum_scalars(terms), kappa);
    }
};

inline std::pair<double, Tensor> guidance_loss(const Tensor& z_t_hat, const GuidanceFeatureSet& targets,
                                               double kappa, const LatentCodec& codec,
                                               const FeaturePyramid& features,
                                               const std::vector<int>& layers = {1, 2, 3}) {
    FeatureGuidance obj;
    obj.codec = &codec;
    obj.features = &features;
    obj.targets = &targets;
    obj.kappa = kappa;
    obj.layers = layers;
    return guidance_loss(z_t_hat, obj);
}

namespace detail {

// loss and d(loss)/d(z_t) with the full chain z_t -> eps_theta -> z0 -> blend
// kept inside one graph (full-backprop mode)
inline std::pair<double, Tensor> guided_grad_full(const Tensor& z_t, int t, const Tensor& c,
                                                  const GuidanceObjective& obj, const GuidanceConfig& cfg,
                                                  const ModelBundle& m) {
    const NoiseSchedule& sched = *m.sched;
    double ab = sched.ab(t);
    double s1 = std::sqrt(1.0 - ab), s0 = std::sqrt(ab);
    Graph g;
    Bound bp = bind_frozen(g, m.denoiser->ps);
    int z = g.leaf(z_t.reshaped({1, kLatentC, kLatentH, kLatentW}));
    int te = g.input(timestep_embedding(static_cast<double>(t), kTembDim).reshaped({1, kTembDim}));
    int eps_c = m.denoiser->forward(g, bp, z, te, g.input(c.reshaped({1, kSemTokens, kSemDim})));
    int eps_u = m.denoiser->forward(g, bp, z, te,
                                    g.input(m.features->null_embedding().reshaped({1, kSemTokens, kSemDim})));
    int eps = g.add(g.scale(eps_u, 1.0 - cfg.cfg_scale), g.scale(eps_c, cfg.cfg_scale));
    int z0 = g.scale(g.sub(z, g.scale(eps, s1)), 1.0 / s0);
    int zh = g.add(g.scale(z0, s1), g.scale(z, 1.0 - s1));
    int loss = obj.build_loss(g, g.reshape(zh, latent_shape()));
    g.backward(loss);
    Tensor grad = g.has_grad(z) ? g.grad(z).reshaped(latent_shape()) : Tensor(latent_shape());
    return {g.val(loss)[0], std::move(grad)};
}

// stop-gradient guidance direction at one step: the objective's gradient on
// the blended estimate, pulled back to z_t with the denoiser output held
// fixed (z_t enters the blend both directly and through the Tweedie term, so
// the chain collapses to a scalar)
inline std::pair<double, Tensor> guided_grad_stop(const Tensor& z, const Tensor& eps_cfg, int t,
                                                  const GuidanceObjective& obj, const NoiseSchedule& sched) {
    Tensor z0_hat = tweedie_estimate(z, eps_cfg, t, sched);
    Tensor z_hat_t = blend_weighted(z0_hat, z, t, sched);
    auto [lv, gz] = guidance_loss(z_hat_t, obj);
    double ab_t = sched.ab(t);
    double chain = std::sqrt(1.0 - ab_t) / std::sqrt(ab_t) + (1.0 - std::sqrt(1.0 - ab_t));
    gz *= chain;
    return {lv, std::move(gz)};
}

inline Tensor sample_core(const Tensor& init_latent, const Tensor& c, const GuidanceObjective* obj,
                          const GuidanceConfig& cfg, const ModelBundle& m,
                          std::vector<StepTrace>* trace) {
    m.validate();
    cfg.validate();
    check_latent(init_latent, "sample");
    const NoiseSchedule& sched = *m.sched;
    std::vector<int> times = ddim_time_ladder(sched.T, cfg.ddim_steps);
    int n_start = std::min(cfg.start_iterations(), cfg.ddim_steps);
    int guided_budget = (obj && cfg.kappa > 0.0) ? std::min(cfg.guided_iterations(), n_start) : 0;

    Rng rng(derive_seed(cfg.seed, "sampler-init"));
    Tensor eps0 = Tensor::randn(latent_shape(), rng);
    Tensor z = forward_diffuse(init_latent, times[n_start - 1], eps0, sched);
    Tensor null_c = m.features->null_embedding();

    for (int k = 0; k < n_start; ++k) {
        int i = n_start - 1 - k;
        int t = times[i];
        double ab_t = sched.ab(t);
        double ab_prev = i > 0 ? sched.ab(times[i - 1]) : 1.0;
        Tensor eps_cfg = m.denoiser->eval_cfg(z, t, c, null_c, cfg.cfg_scale);

        Tensor eps_eff;
        StepTrace st;
        st.t = t;
        if (k < guided_budget) {
            double loss;
            Tensor grad_zt;
            if (cfg.grad_mode == GradMode::full_backprop) {
                std::tie(loss, grad_zt) = guided_grad_full(z, t, c, *obj, cfg, m);
            } else {
                std::tie(loss, grad_zt) = guided_grad_stop(z, eps_cfg, t, *obj, sched);
            }
            eps_eff = eps_cfg;
            eps_eff.vec() += std::sqrt(1.0 - ab_t) * grad_zt.vec();
            st.guided = true;
            st.loss = loss;
            st.grad_norm = grad_zt.norm();
        } else {
            eps_eff = eps_cfg;
        }
        if (trace) trace->push_back(st);
        z = ddim_update(z, eps_eff, ab_t, ab_prev);
        if (!z.all_finite())
            throw numeric_error("sampler: non-finite latent at reverse step t=" + std::to_string(t));
    }
    return z;
}

}  // namespace detail

inline Tensor guided_sample(const Tensor& init_latent, const Tensor& c, const GuidanceFeatureSet& targets,
                            const GuidanceConfig& cfg, const ModelBundle& m,
                            std::vector<StepTrace>* trace = nullptr) {
    FeatureGuidance obj;
    obj.codec = m.codec;
    obj.features = m.features;
    obj.targets = &targets;
    obj.kappa = cfg.kappa;
    return detail::sample_core(init_latent, c, &obj, cfg, m, trace);
}

inline Tensor guided_sample_with(const Tensor& init_latent, const Tensor& c, const GuidanceObjective& obj,
                                 const GuidanceConfig& cfg, const ModelBundle& m,
                                 std::vector<StepTrace>* trace = nullptr) {
    return detail::sample_core(init_latent, c, &obj, cfg, m, trace);
}

inline Tensor unguided_sample(const Tensor& init_latent, const Tensor& c, const GuidanceConfig& cfg,
                              const ModelBundle& m, std::vector<StepTrace>* trace = nullptr) {
    return detail::sample_core(init_latent, c, nullptr, cfg, m, trace);
}

// final guidance loss of a produced latent, for paired-run comparisons
inline double final_guidance_loss(const Tensor& z_final, const GuidanceFeatureSet& targets, double kappa,
                                  const ModelBundle& m) {
    auto [loss, grad] = guidance_loss(z_final, targets, kappa, *m.codec, *m.features);
    return loss;
}

}  // namespace visrecon
