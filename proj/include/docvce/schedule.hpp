#pragma once

// Noise schedule and closed-form diffusion algebra.
//
// Timesteps are 1-based: t = 1..T. alpha_bar(0) is defined as 1 so that the
// boundary t = 1 is total for every operation below.

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

#include "docvce/tensor.hpp"

namespace docvce {

class NoiseSchedule {
public:
    NoiseSchedule() = default;

    std::size_t steps() const { return betas_.size(); }

    double beta(std::size_t t) const { return betas_[index(t)]; }
    double alpha(std::size_t t) const { return alphas_[index(t)]; }
    double alpha_bar(std::size_t t) const { return t == 0 ? 1.0 : alpha_bars_[index(t)]; }

    /// Timestep of the original (un-respaced) schedule that step `t` stands for.
    std::size_t original_timestep(std::size_t t) const { return timestep_map_[index(t)]; }

    const std::vector<double>& betas() const { return betas_; }
    const std::vector<double>& alphas() const { return alphas_; }
    const std::vector<double>& alpha_bars() const { return alpha_bars_; }
    const std::vector<std::size_t>& timestep_map() const { return timestep_map_; }

    void check_timestep(std::size_t t) const { (void)index(t); }

private:
    std::size_t index(std::size_t t) const {
        if (t < 1 || t > betas_.size()) {
            throw std::out_of_range("schedule: timestep " + std::to_string(t) + " outside [1," +
                                    std::to_string(betas_.size()) + "]");
        }
        return t - 1;
    }

    std::vector<double> betas_;
    std::vector<double> alphas_;
    std::vector<double> alpha_bars_;
    std::vector<std::size_t> timestep_map_;

    friend NoiseSchedule build_linear_schedule(std::size_t, double, double);
    friend NoiseSchedule respace(const NoiseSchedule&, std::size_t);
};

inline NoiseSchedule build_linear_schedule(std::size_t total_steps, double beta_start, double beta_end) {
    if (total_steps < 1) throw std::invalid_argument("build_linear_schedule: T must be >= 1");
    if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0)) {
        throw std::invalid_argument("build_linear_schedule: need 0 < beta_start <= beta_end < 1");
    }
    NoiseSchedule s;
    s.betas_.resize(total_steps);
    s.alphas_.resize(total_steps);
    s.alpha_bars_.resize(total_steps);
    s.timestep_map_.resize(total_steps);
    double running = 1.0;
    for (std::size_t i = 0; i < total_steps; ++i) {
        const double frac = total_steps == 1 ? 0.0 : static_cast<double>(i) / static_cast<double>(total_steps - 1);
        s.betas_[i] = i + 1 == total_steps && total_steps > 1 ? beta_end : beta_start + frac * (beta_end - beta_start);
        s.alphas_[i] = 1.0 - s.betas_[i];
        running *= s.alphas_[i];
        s.alpha_bars_[i] = running;
        s.timestep_map_[i] = i + 1;
    }
    return s;
}

/// Keeps `n_steps` evenly strided timesteps t_i = floor(i*T/n), i = 1..n, so the
/// last step is always T. alpha_bar is copied exactly at the kept steps and the
/// step betas are recomputed as 1 - alpha_bar(t_i)/alpha_bar(t_{i-1}).
inline NoiseSchedule respace(const NoiseSchedule& schedule, std::size_t n_steps) {
    const std::size_t total = schedule.steps();
    if (n_steps < 1 || n_steps > total) {
        throw std::invalid_argument("respace: n_steps " + std::to_string(n_steps) + " outside [1," +
                                    std::to_string(total) + "]");
    }
    if (n_steps == total) return schedule;
    NoiseSchedule s;
    s.betas_.resize(n_steps);
    s.alphas_.resize(n_steps);
    s.alpha_bars_.resize(n_steps);
    s.timestep_map_.resize(n_steps);
    double previous = 1.0;
    for (std::size_t i = 1; i <= n_steps; ++i) {
        const std::size_t t = i * total / n_steps;
        const std::size_t orig = schedule.original_timestep(t);
        const double ab = schedule.alpha_bar(t);
        s.timestep_map_[i - 1] = orig;
        s.alpha_bars_[i - 1] = ab;
        s.betas_[i - 1] = 1.0 - ab / previous;
        s.alphas_[i - 1] = ab / previous;
        previous = ab;
    }
    return s;
}

/// sqrt(abar_t)*x0 + sqrt(1-abar_t)*eps
inline Tensor forward_sample(const Tensor& x0, std::size_t t, const Tensor& eps, const NoiseSchedule& schedule) {
    require_same_shape(x0, eps, "forward_sample");
    const double ab = schedule.alpha_bar(t);
    return axpby(std::sqrt(ab), x0, std::sqrt(1.0 - ab), eps);
}

/// (z_t - sqrt(1-abar_t)*eps_hat) / sqrt(abar_t)
inline Tensor predict_clean(const Tensor& z_t, const Tensor& eps_hat, std::size_t t, const NoiseSchedule& schedule) {
    require_same_shape(z_t, eps_hat, "predict_clean");
    const double ab = schedule.alpha_bar(t);
    const double inv = 1.0 / std::sqrt(ab);
    return axpby(inv, z_t, -std::sqrt(1.0 - ab) * inv, eps_hat);
}

/// (1/sqrt(alpha_t)) * (z_t - beta_t/sqrt(1-abar_t) * eps_hat)
inline Tensor posterior_mean(const Tensor& z_t, const Tensor& eps_hat, std::size_t t, const NoiseSchedule& schedule) {
    require_same_shape(z_t, eps_hat, "posterior_mean");
    const double inv = 1.0 / std::sqrt(schedule.alpha(t));
    const double coef = schedule.beta(t) / std::sqrt(1.0 - schedule.alpha_bar(t));
    return axpby(inv, z_t, -inv * coef, eps_hat);
}

/// Fixed reverse-process variance beta_t * (1-abar_{t-1}) / (1-abar_t); exactly 0 at t = 1.
inline double posterior_variance(std::size_t t, const NoiseSchedule& schedule) {
    return schedule.beta(t) * (1.0 - schedule.alpha_bar(t - 1)) / (1.0 - schedule.alpha_bar(t));
}

inline double posterior_log_variance(std::size_t t, const NoiseSchedule& schedule) {
    return std::log(std::max(posterior_variance(t, schedule), 1e-20));
}

}  // namespace docvce
