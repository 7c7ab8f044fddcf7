#pragma once

#include <cmath>
#include <vector>

#include "maskdiff/errors.hpp"
#include "maskdiff/rng.hpp"
#include "maskdiff/tensor.hpp"

namespace maskdiff {

// DDPM beta/alpha tables indexed by timestep. Images ("latents" in the wider
// pipeline) are plain [c, h, w] tensors in [-1, 1] when clean.

template <typename T>
struct NoiseSchedule {
    int steps = 0;
    std::vector<T> betas;
    std::vector<T> alphas;
    std::vector<T> alpha_bars;
};

// Linear beta interpolation from beta_start to beta_end over `steps` steps.
template <typename T>
NoiseSchedule<T> build_schedule(int steps, double beta_start, double beta_end) {
    if (steps < 1) throw config_error("schedule: step count must be positive");
    if (!(beta_start > 0.0) || !(beta_end < 1.0) || !(beta_start <= beta_end))
        throw config_error("schedule: beta bounds must satisfy 0 < beta_start <= beta_end < 1");
    NoiseSchedule<T> s;
    s.steps = steps;
    s.betas.resize(static_cast<size_t>(steps));
    s.alphas.resize(static_cast<size_t>(steps));
    s.alpha_bars.resize(static_cast<size_t>(steps));
    double prod = 1.0;
    for (int t = 0; t < steps; ++t) {
        const double beta =
            steps == 1 ? beta_start
                       : beta_start + (beta_end - beta_start) * static_cast<double>(t) / (steps - 1);
        prod *= 1.0 - beta;
        s.betas[static_cast<size_t>(t)] = static_cast<T>(beta);
        s.alphas[static_cast<size_t>(t)] = static_cast<T>(1.0 - beta);
        s.alpha_bars[static_cast<size_t>(t)] = static_cast<T>(prod);
    }
    return s;
}

// z_t = sqrt(abar_t) * z0 + sqrt(1 - abar_t) * eps
template <typename T>
Tensor<T> add_noise(const Tensor<T>& z0, const Tensor<T>& eps, int t, const NoiseSchedule<T>& s) {
    if (!z0.same_shape(eps)) throw argument_error("add_noise: shape mismatch");
    if (t < 0 || t >= s.steps) throw argument_error("add_noise: timestep out of range");
    const double abar = static_cast<double>(s.alpha_bars[static_cast<size_t>(t)]);
    const T a = static_cast<T>(std::sqrt(abar));
    const T b = static_cast<T>(std::sqrt(1.0 - abar));
    Tensor<T> out(z0.shape);
    for (long long i = 0; i < z0.numel(); ++i) out[i] = a * z0[i] + b * eps[i];
    return out;
}

// Ancestral DDPM step:
//   mu  = (z_t - beta_t / sqrt(1 - abar_t) * eps_pred) / sqrt(alpha_t)
//   out = mu + sqrt(beta_t) * n   (n ~ N(0,1) for t > 0, zero at t = 0)
template <typename T>
Tensor<T> ddpm_step(const Tensor<T>& z_t, const Tensor<T>& eps_pred, int t,
                    const NoiseSchedule<T>& s, Rng& rng) {
    if (!z_t.same_shape(eps_pred)) throw argument_error("ddpm_step: shape mismatch");
    if (t < 0 || t >= s.steps) throw argument_error("ddpm_step: timestep out of range");
    const double beta = static_cast<double>(s.betas[static_cast<size_t>(t)]);
    const double alpha = static_cast<double>(s.alphas[static_cast<size_t>(t)]);
    const double abar = static_cast<double>(s.alpha_bars[static_cast<size_t>(t)]);
    const T coef = static_cast<T>(beta / std::sqrt(1.0 - abar));
    const T inv_sqrt_alpha = static_cast<T>(1.0 / std::sqrt(alpha));
    const T sigma = static_cast<T>(std::sqrt(beta));
    Tensor<T> out(z_t.shape);
    for (long long i = 0; i < z_t.numel(); ++i)
        out[i] = inv_sqrt_alpha * (z_t[i] - coef * eps_pred[i]);
    if (t > 0) {
        for (long long i = 0; i < out.numel(); ++i)
            out[i] += sigma * static_cast<T>(rng.normal());
    }
    return out;
}

}  // namespace maskdiff
