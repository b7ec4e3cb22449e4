#pragma once

// Guided stochastic reverse sampling in latent space.
//
// Each step predicts the clean latent, decodes it, and back-propagates the
// target classifier's log-probability and the latent distance to the factual
// image all the way to z_t (through both the decoder and the noise predictor).
// The classifier gradient is filtered by sign consensus with the implicit
// classifier score of the conditional/unconditional noise predictions, both
// gradients are normalized and combined, and the result shifts the posterior
// mean before sampling.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>

#include "docvce/autodiff.hpp"
#include "docvce/codec.hpp"
#include "docvce/models.hpp"
#include "docvce/random.hpp"
#include "docvce/schedule.hpp"
#include "docvce/tensor.hpp"

namespace docvce {

struct GuidanceConfig {
    double scale = 3.0;        // s
    double lambda_c = 0.7;     // classifier weight
    double lambda_d = 0.3;     // distance weight
    double gamma_deg = 45.0;   // consensus angle threshold
    bool consensus = true;     // false disables the filter entirely
    std::size_t t_start = 100; // index into the respaced ladder
    std::size_t n_inference_steps = 200;
    std::uint64_t rng_seed = 0;

    void validate() const {
        if (!(scale >= 0.0)) throw std::invalid_argument("guidance: scale must be >= 0");
        if (!(lambda_c >= 0.0 && lambda_d >= 0.0)) throw std::invalid_argument("guidance: weights must be >= 0");
        if (!(gamma_deg >= 0.0 && gamma_deg <= 180.0)) {
            throw std::invalid_argument("guidance: gamma must lie in [0,180] degrees");
        }
        if (n_inference_steps == 0) throw std::invalid_argument("guidance: n_inference_steps must be positive");
        if (t_start > n_inference_steps) throw std::invalid_argument("guidance: t_start exceeds n_inference_steps");
    }
};

struct GuidanceModels {
    const Denoiser& denoiser;
    const Classifier& classifier;
};

namespace detail {

inline void check_finite_gradient(const Tensor& g, const char* what, std::size_t t) {
    if (!g.all_finite()) {
        throw NumericalError(std::string("guided step ") + std::to_string(t) + ": non-finite " + what);
    }
}

struct CleanPrediction {
    Var eps;
    Var latent;  // predicted clean diffusion latent
    Var image;   // decoded
};

inline CleanPrediction predict_clean_graph(Var z_t, std::size_t t, std::size_t y, const Denoiser& denoiser,
                                           const Codec& codec, const NoiseSchedule& schedule) {
    const double ab = schedule.alpha_bar(t);
    Var eps = denoiser.denoise(z_t, schedule.original_timestep(t), y);
    Var z0 = scale(sub(z_t, scale(eps, std::sqrt(1.0 - ab))), 1.0 / std::sqrt(ab));
    Var image = codec.decode(scale(z0, codec.eta()));
    return {eps, z0, image};
}

}  // namespace detail

/// D(eta * (z_t - sqrt(1-abar_t) eps_theta(z_t,t,y)) / sqrt(abar_t)), differentiable wrt z_t.
/// `t` indexes `schedule`; the noise predictor sees the mapped original timestep.
inline Var predict_clean_image(Var z_t, std::size_t t, std::size_t y, const Denoiser& denoiser, const Codec& codec,
                               const NoiseSchedule& schedule) {
    if (z_t.value().shape() != codec.config().latent_shape()) {
        throw std::invalid_argument("predict_clean_image: latent shape " + shape_string(z_t.value().shape()) +
                                    " does not match codec " + shape_string(codec.config().latent_shape()));
    }
    return detail::predict_clean_graph(z_t, t, y, denoiser, codec, schedule).image;
}

inline Tensor predict_clean_image(const Tensor& z_t, std::size_t t, std::size_t y, const Denoiser& denoiser,
                                  const Codec& codec, const NoiseSchedule& schedule) {
    Graph g;
    return predict_clean_image(g.constant(z_t), t, y, denoiser, codec, schedule).value();
}

/// -(eps_theta(z_t,t,y) - eps_theta(z_t,t,null)) / sqrt(1 - abar_t)
inline Tensor implicit_classifier_score(const Tensor& eps_conditional, const Tensor& eps_unconditional, std::size_t t,
                                        const NoiseSchedule& schedule) {
    require_same_shape(eps_conditional, eps_unconditional, "implicit_classifier_score");
    const double c = 1.0 / std::sqrt(1.0 - schedule.alpha_bar(t));
    return axpby(-c, eps_conditional, c, eps_unconditional);
}

inline Tensor implicit_classifier_score(const Tensor& z_t, std::size_t t, std::size_t y, const Denoiser& denoiser,
                                        const NoiseSchedule& schedule) {
    const std::size_t orig = schedule.original_timestep(t);
    return implicit_classifier_score(denoiser.denoise(z_t, orig, y), denoiser.denoise(z_t, orig, denoiser.null_label()),
                                     t, schedule);
}

/// 1x1-patch consensus: an element of g_cls survives iff both it and the
/// matching g_cfg element are nonzero and their angle (0 for equal signs, 180
/// for opposite signs) is at most gamma_deg.
inline Tensor consensus_filter(const Tensor& g_cls, const Tensor& g_cfg, double gamma_deg) {
    require_same_shape(g_cls, g_cfg, "consensus_filter");
    Tensor out(g_cls.shape());
    for (std::size_t i = 0; i < g_cls.size(); ++i) {
        const double a = g_cls[i], b = g_cfg[i];
        if (a == 0.0 || b == 0.0) continue;
        const double angle = (a > 0.0) == (b > 0.0) ? 0.0 : 180.0;
        if (angle <= gamma_deg) out[i] = a;
    }
    return out;
}

/// lambda_c * g_cls/|g_cls| - lambda_d * g_dist/|g_dist|; a zero input contributes nothing.
inline Tensor combine_guidance(const Tensor& g_cls_filtered, const Tensor& g_dist, double lambda_c, double lambda_d) {
    require_same_shape(g_cls_filtered, g_dist, "combine_guidance");
    const double nc = l2_norm(g_cls_filtered);
    const double nd = l2_norm(g_dist);
    const double a = nc > 0.0 ? lambda_c / nc : 0.0;
    const double b = nd > 0.0 ? lambda_d / nd : 0.0;
    return axpby(a, g_cls_filtered, -b, g_dist);
}

/// ||z_F - z0_pred||^2
inline double distance_value(const Tensor& z0_pred, const Tensor& z_factual) {
    require_same_shape(z0_pred, z_factual, "distance_value");
    const Tensor d = z_factual - z0_pred;
    return dot(d, d);
}

/// Every intermediate quantity of one guided step.
struct GuidedStepTerms {
    Tensor eps_conditional;
    Tensor eps_unconditional;
    Tensor mean;
    double variance = 0.0;
    Tensor g_cls;
    Tensor g_cfg;
    Tensor g_dist;
    Tensor g_cls_filtered;
    Tensor g;
    Tensor perturbed_mean;
    Tensor next;
};

/// One reverse step from respaced index t to t-1. `schedule` is the respaced
/// schedule, `z_factual` the factual image's diffusion latent.
inline GuidedStepTerms guided_step_terms(const Tensor& z_t, std::size_t t, std::size_t target, const Tensor& z_factual,
                                         const GuidanceModels& models, const Codec& codec,
                                         const NoiseSchedule& schedule, const GuidanceConfig& cfg, Rng& rng) {
    require_same_shape(z_t, z_factual, "guided_step");
    GuidedStepTerms s;
    {
        Graph g;
        Var z = g.input(z_t);
        const auto pred = detail::predict_clean_graph(z, t, target, models.denoiser, codec, schedule);
        Var log_p = models.classifier.log_prob(pred.image, target);
        Var dist = squared_l2(pred.latent, g.constant(z_factual));
        s.eps_conditional = pred.eps.value();
        s.g_cls = grad(g, log_p, z);
        s.g_dist = grad(g, dist, z);
    }
    detail::check_finite_gradient(s.g_cls, "classifier gradient", t);
    detail::check_finite_gradient(s.g_dist, "distance gradient", t);

    s.eps_unconditional = models.denoiser.denoise(z_t, schedule.original_timestep(t), models.denoiser.null_label());
    s.g_cfg = implicit_classifier_score(s.eps_conditional, s.eps_unconditional, t, schedule);
    s.g_cls_filtered = cfg.consensus ? consensus_filter(s.g_cls, s.g_cfg, cfg.gamma_deg) : s.g_cls;
    s.g = combine_guidance(s.g_cls_filtered, s.g_dist, cfg.lambda_c, cfg.lambda_d);

    s.mean = posterior_mean(z_t, s.eps_conditional, t, schedule);
    s.variance = posterior_variance(t, schedule);
    const double shift = cfg.scale * s.variance * l2_norm(s.mean);
    s.perturbed_mean = s.mean;
    for (std::size_t i = 0; i < s.g.size(); ++i) s.perturbed_mean[i] += shift * s.g[i];
    require_finite(s.perturbed_mean, "guided_step");

    s.next = s.perturbed_mean;
    if (t > 1) {
        const double sigma = std::sqrt(s.variance);
        for (double& v : s.next.values()) v += sigma * rng.normal();
    }
    return s;
}

inline Tensor guided_step(const Tensor& z_t, std::size_t t, std::size_t target, const Tensor& z_factual,
                          const GuidanceModels& models, const Codec& codec, const NoiseSchedule& schedule,
                          const GuidanceConfig& cfg, Rng& rng) {
    return guided_step_terms(z_t, t, target, z_factual, models, codec, schedule, cfg, rng).next;
}

/// Plain class-conditional ancestral step: mean + sigma * noise, no noise at t = 1.
inline Tensor unguided_step(const Tensor& z_t, std::size_t t, std::size_t y, const Denoiser& denoiser,
                            const NoiseSchedule& schedule, Rng& rng) {
    const Tensor eps = denoiser.denoise(z_t, schedule.original_timestep(t), y);
    Tensor next = posterior_mean(z_t, eps, t, schedule);
    if (t > 1) {
        const double sigma = std::sqrt(posterior_variance(t, schedule));
        for (double& v : next.values()) v += sigma * rng.normal();
    }
    return next;
}

/// Noises the factual latent to respaced step t_start: the starting point of the reverse chain.
inline Tensor project_to_start(const Tensor& z_factual, std::size_t t_start, const NoiseSchedule& respaced, Rng& rng) {
    if (t_start == 0) return z_factual;
    const Tensor eps = rng.normal(z_factual.shape());
    return forward_sample(z_factual, t_start, eps, respaced);
}

/// Runs the guided chain from t_start down to 0 and decodes, clamped to [0,1].
/// `schedule` is the full training schedule; it is respaced to cfg.n_inference_steps.
inline Tensor generate_base_counterfactual(const Tensor& x_factual, std::size_t target, const GuidanceModels& models,
                                           const Codec& codec, const NoiseSchedule& schedule,
                                           const GuidanceConfig& cfg, Rng& rng) {
    cfg.validate();
    const NoiseSchedule respaced = respace(schedule, cfg.n_inference_steps);
    const Tensor z_factual = codec.to_diffusion_latent(x_factual);
    Tensor z = project_to_start(z_factual, cfg.t_start, respaced, rng);
    for (std::size_t t = cfg.t_start; t >= 1; --t) {
        z = guided_step(z, t, target, z_factual, models, codec, respaced, cfg, rng);
    }
    return clamped(codec.from_diffusion_latent(z), 0.0, 1.0);
}

/// The same chain without guidance terms; used to check that s = 0 changes nothing.
inline Tensor generate_unguided(const Tensor& x_factual, std::size_t y, const Denoiser& denoiser, const Codec& codec,
                                const NoiseSchedule& schedule, const GuidanceConfig& cfg, Rng& rng) {
    cfg.validate();
    const NoiseSchedule respaced = respace(schedule, cfg.n_inference_steps);
    Tensor z = project_to_start(codec.to_diffusion_latent(x_factual), cfg.t_start, respaced, rng);
    for (std::size_t t = cfg.t_start; t >= 1; --t) z = unguided_step(z, t, y, denoiser, respaced, rng);
    return clamped(codec.from_diffusion_latent(z), 0.0, 1.0);
}

}  // namespace docvce
