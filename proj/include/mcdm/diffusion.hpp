#pragma once

// Noise schedule, forward corruption, noise-prediction loss and the
// ancestral sampler shared by the motion prior and the video denoiser.

#include <cmath>
#include <functional>

#include "mcdm/tensor.hpp"

namespace mcdm {

struct NoiseSchedule {
    int64_t T_steps = 0;
    std::vector<double> beta;
    std::vector<double> alpha;          // 1 - beta
    std::vector<double> alpha_bar;      // cumulative product of alpha
    std::vector<double> posterior_var;  // beta_t (1 - abar_{t-1}) / (1 - abar_t), 0 at t = 0
};

inline NoiseSchedule make_schedule(int64_t T_steps, double beta_start, double beta_end) {
    if (T_steps < 2) throw ConfigError("schedule needs T_steps >= 2");
    if (!(0.0 < beta_start && beta_start < beta_end && beta_end < 1.0))
        throw ConfigError("schedule needs 0 < beta_start < beta_end < 1");
    NoiseSchedule s;
    s.T_steps = T_steps;
    s.beta.resize(static_cast<size_t>(T_steps));
    s.alpha.resize(static_cast<size_t>(T_steps));
    s.alpha_bar.resize(static_cast<size_t>(T_steps));
    s.posterior_var.resize(static_cast<size_t>(T_steps));
    double acc = 1.0;
    for (int64_t t = 0; t < T_steps; ++t) {
        double frac = static_cast<double>(t) / static_cast<double>(T_steps - 1);
        double b = beta_start + (beta_end - beta_start) * frac;
        s.beta[static_cast<size_t>(t)] = b;
        s.alpha[static_cast<size_t>(t)] = 1.0 - b;
        double prev_bar = acc;
        acc *= 1.0 - b;
        s.alpha_bar[static_cast<size_t>(t)] = acc;
        s.posterior_var[static_cast<size_t>(t)] =
            t == 0 ? 0.0 : b * (1.0 - prev_bar) / (1.0 - acc);
    }
    return s;
}

// z_t = sqrt(abar_t) z0 + sqrt(1 - abar_t) eps
inline Tensor q_sample(const Tensor& z0, int64_t t, const Tensor& eps, const NoiseSchedule& s) {
    if (t < 0 || t >= s.T_steps)
        throw ConfigError("q_sample: timestep " + std::to_string(t) + " out of range");
    if (z0.shape() != eps.shape())
        throw ShapeError("q_sample: eps shape " + shape_str(eps.shape()) + " vs z0 " +
                         shape_str(z0.shape()));
    double ab = s.alpha_bar[static_cast<size_t>(t)];
    return add(mul_scalar(z0, std::sqrt(ab)), mul_scalar(eps, std::sqrt(1.0 - ab)));
}

// mean squared error over all elements
inline Tensor eps_loss(const Tensor& eps, const Tensor& eps_hat) {
    if (eps.shape() != eps_hat.shape())
        throw ShapeError("eps_loss: shape " + shape_str(eps.shape()) + " vs " +
                         shape_str(eps_hat.shape()));
    return mean(square(sub(eps, eps_hat)));
}

// epsilon-predictor: maps (z_t, t) to a same-shape noise estimate; callers
// close over their conditioning
using EpsModel = std::function<Tensor(const Tensor& z_t, int64_t t)>;

// Ancestral reversal: z_{t-1} = (z_t - beta_t / sqrt(1 - abar_t) eps_hat) /
// sqrt(alpha_t) + sqrt(posterior_var_t) n, with no noise at the final step.
// Deterministic given the rng.
inline Tensor ddpm_sample(const EpsModel& model, const NoiseSchedule& s, const Shape& shape,
                          Rng& rng) {
    NoGradGuard ng;
    Tensor z = rng_tensor(rng, shape, Dist::normal);
    for (int64_t t = s.T_steps - 1; t >= 0; --t) {
        Tensor eps_hat = model(z, t);
        if (eps_hat.shape() != z.shape())
            throw ShapeError("ddpm_sample: model output " + shape_str(eps_hat.shape()) +
                             " vs state " + shape_str(z.shape()));
        for (double v : eps_hat.data())
            if (std::isnan(v))
                throw GradError("ddpm_sample: NaN in eps prediction at step " + std::to_string(t));
        double b = s.beta[static_cast<size_t>(t)];
        double ab = s.alpha_bar[static_cast<size_t>(t)];
        double inv_sa = 1.0 / std::sqrt(s.alpha[static_cast<size_t>(t)]);
        Tensor mean_t =
            mul_scalar(sub(z, mul_scalar(eps_hat, b / std::sqrt(1.0 - ab))), inv_sa);
        if (t > 0) {
            double sigma = std::sqrt(s.posterior_var[static_cast<size_t>(t)]);
            Tensor noise = rng_tensor(rng, shape, Dist::normal);
            z = add(mean_t, mul_scalar(noise, sigma));
        } else {
            z = mean_t;
        }
    }
    return z;
}

}  // namespace mcdm
