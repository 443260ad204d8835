#pragma once

#include <functional>

#include "vd/embedding.hpp"
#include "vd/graph.hpp"
#include "vd/ops.hpp"
#include "vd/rng.hpp"

namespace vd {

// Reference linear-schedule endpoints at 1000 steps. Shorter toy schedules
// scale both endpoints by 1000/T so total injected noise stays comparable.
inline constexpr int kReferenceSteps = 1000;
inline constexpr double kReferenceBetaStart = 8.5e-5;
inline constexpr double kReferenceBetaEnd = 1.2e-2;

// beta/alpha/alpha_bar tables for T steps. Index convention: betas[t-1] is
// the step-t rate; alpha_bars[t] = prod_{s<=t} alpha_s with alpha_bars[0] = 1.
template <typename T>
struct NoiseSchedule {
    int steps = 0;
    std::vector<T> betas;       // [T]
    std::vector<T> alphas;      // [T]
    std::vector<T> alpha_bars;  // [T+1]

    T beta(int t) const { return betas[static_cast<size_t>(t - 1)]; }
    T alpha(int t) const { return alphas[static_cast<size_t>(t - 1)]; }
    T alpha_bar(int t) const { return alpha_bars[static_cast<size_t>(t)]; }

    void check_t(int t) const {
        if (t < 1 || t > steps)
            throw ShapeError("diffusion step t=" + std::to_string(t) + " outside 1.." +
                             std::to_string(steps));
    }
};

template <typename T>
NoiseSchedule<T> make_schedule(int steps, double beta_start, double beta_end) {
    if (steps < 1) throw ConfigError("make_schedule: need at least one step");
    if (!(beta_start > 0.0) || !(beta_start <= beta_end) || !(beta_end < 1.0))
        throw ConfigError("make_schedule: need 0 < beta_start <= beta_end < 1");
    NoiseSchedule<T> s;
    s.steps = steps;
    s.betas.resize(static_cast<size_t>(steps));
    s.alphas.resize(static_cast<size_t>(steps));
    s.alpha_bars.resize(static_cast<size_t>(steps) + 1);
    s.alpha_bars[0] = T(1);
    for (int t = 1; t <= steps; ++t) {
        const double frac = steps == 1 ? 0.0 : static_cast<double>(t - 1) / (steps - 1);
        const T beta = static_cast<T>(beta_start + (beta_end - beta_start) * frac);
        s.betas[static_cast<size_t>(t - 1)] = beta;
        s.alphas[static_cast<size_t>(t - 1)] = T(1) - beta;
        s.alpha_bars[static_cast<size_t>(t)] =
            s.alpha_bars[static_cast<size_t>(t - 1)] * s.alphas[static_cast<size_t>(t - 1)];
    }
    return s;
}

// Paper-endpoint schedule rescaled to T steps (identity at T = 1000).
template <typename T>
NoiseSchedule<T> make_default_schedule(int steps) {
    const double f = static_cast<double>(kReferenceSteps) / steps;
    return make_schedule<T>(steps, kReferenceBetaStart * f, kReferenceBetaEnd * f);
}

// Closed-form forward marginal: x_t = sqrt(abar_t) x0 + sqrt(1-abar_t) eps.
template <typename T>
Tensor<T> forward_diffuse(const Tensor<T>& x0, int t, const Tensor<T>& eps,
                          const NoiseSchedule<T>& sched) {
    sched.check_t(t);
    if (!x0.same_shape(eps)) throw ShapeError("forward_diffuse: eps shape mismatch");
    const T a = std::sqrt(sched.alpha_bar(t));
    const T b = std::sqrt(T(1) - sched.alpha_bar(t));
    Tensor<T> out = x0;
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = a * x0[i] + b * eps[i];
    return out;
}

// A denoiser as the samplers see it: predicted eps from (x_t, t, context).
template <typename T>
using DenoiseFn =
    std::function<Tensor<T>(const Tensor<T>& x_t, int t, const ContextEmbedding<T>& ctx)>;

// The epsilon-prediction training objective for one sample, recorded on `g`
// so backward can reach the model parameters. `predict` must return the
// graph node of the model output for the noised input.
template <typename T>
Var eps_loss(Graph<T>& g, const std::function<Var(Graph<T>&, const Tensor<T>&, int)>& predict,
             const Tensor<T>& x0, int t, const Tensor<T>& eps, const NoiseSchedule<T>& sched) {
    Tensor<T> x_t = forward_diffuse(x0, t, eps, sched);
    Var predicted = predict(g, x_t, t);
    Var target = g.input(eps);
    return mse(g, predicted, target);
}

// One ancestral reverse step. Fixed small variance beta_tilde; no noise at t=1.
template <typename T>
Tensor<T> ddpm_step(const DenoiseFn<T>& model, const Tensor<T>& x_t, int t,
                    const ContextEmbedding<T>& ctx, const NoiseSchedule<T>& sched, Rng& rng) {
    sched.check_t(t);
    Tensor<T> eps_hat = model(x_t, t, ctx);
    if (!eps_hat.same_shape(x_t)) throw ShapeError("ddpm_step: model output shape mismatch");
    const T beta = sched.beta(t);
    const T alpha = sched.alpha(t);
    const T abar = sched.alpha_bar(t);
    const T abar_prev = sched.alpha_bar(t - 1);
    const T inv_sqrt_alpha = T(1) / std::sqrt(alpha);
    const T coef = beta / std::sqrt(T(1) - abar);
    const T beta_tilde = beta * (T(1) - abar_prev) / (T(1) - abar);
    const T sigma = std::sqrt(beta_tilde);
    Tensor<T> out = x_t;
    for (int64_t i = 0; i < out.numel(); ++i)
        out[i] = inv_sqrt_alpha * (x_t[i] - coef * eps_hat[i]);
    if (t > 1) {
        for (int64_t i = 0; i < out.numel(); ++i)
            out[i] += sigma * static_cast<T>(rng.normal());
    }
    return out;
}

// Deterministic (eta = 0) step from t down to t_prev; t_prev = 0 lands on x0.
template <typename T>
Tensor<T> ddim_step(const DenoiseFn<T>& model, const Tensor<T>& x_t, int t, int t_prev,
                    const ContextEmbedding<T>& ctx, const NoiseSchedule<T>& sched) {
    sched.check_t(t);
    if (t_prev >= t || t_prev < 0)
        throw ShapeError("ddim_step: need 0 <= t_prev < t");
    Tensor<T> eps_hat = model(x_t, t, ctx);
    if (!eps_hat.same_shape(x_t)) throw ShapeError("ddim_step: model output shape mismatch");
    const T abar = sched.alpha_bar(t);
    const T abar_prev = sched.alpha_bar(t_prev);
    const T sq = std::sqrt(abar);
    const T sq1 = std::sqrt(T(1) - abar);
    const T sqp = std::sqrt(abar_prev);
    const T sq1p = std::sqrt(T(1) - abar_prev);
    Tensor<T> out = x_t;
    for (int64_t i = 0; i < out.numel(); ++i) {
        const T x0_pred = (x_t[i] - sq1 * eps_hat[i]) / sq;
        out[i] = sqp * x0_pred + sq1p * eps_hat[i];
    }
    return out;
}

// Classifier-free guidance arithmetic: y = y_u + (y_c - y_u) * s.
// Endpoints return the exact operand so s in {0,1} is bitwise.
template <typename T>
Tensor<T> cfg_combine(const Tensor<T>& y_u, const Tensor<T>& y_c, double s) {
    if (!y_u.same_shape(y_c)) throw ShapeError("cfg_combine: shape mismatch");
    if (s == 0.0) return y_u;
    if (s == 1.0) return y_c;
    Tensor<T> out = y_u;
    const T sv = static_cast<T>(s);
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = y_u[i] + (y_c[i] - y_u[i]) * sv;
    return out;
}

enum class UncondMode { EmptyInput, ZeroEmbedding };

inline UncondMode uncond_mode_from_name(const std::string& s) {
    if (s == "empty") return UncondMode::EmptyInput;
    if (s == "zero") return UncondMode::ZeroEmbedding;
    throw ConfigError("unknown uncond mode: " + s + " (want empty|zero)");
}

// Unconditional context for guidance. Mode EmptyInput runs the encoder on an
// all-zero raw input; ZeroEmbedding is the K x D zero matrix.
template <typename T, typename Encoder>
ContextEmbedding<T> uncond_context(UncondMode mode, const Encoder& encoder) {
    if (mode == UncondMode::ZeroEmbedding)
        return ContextEmbedding<T>::zero(encoder.token_count(), encoder.dim(), encoder.modality());
    return encoder.encode_zero_raw();
}

template <typename T>
struct GuidanceRequest {
    double scale = 1.0;
    UncondMode mode = UncondMode::ZeroEmbedding;
    ContextEmbedding<T> cond;
    ContextEmbedding<T> uncond;
};

// Wrap a conditional denoiser with guidance. scale 1 short-circuits to the
// purely conditional path (bitwise identical and half the cost).
template <typename T>
DenoiseFn<T> guided(const DenoiseFn<T>& model, const ContextEmbedding<T>& uncond, double s) {
    if (s == 1.0) return model;
    return [model, uncond, s](const Tensor<T>& x_t, int t, const ContextEmbedding<T>& ctx) {
        Tensor<T> y_c = model(x_t, t, ctx);
        Tensor<T> y_u = model(x_t, t, uncond);
        return cfg_combine(y_u, y_c, s);
    };
}

// Evenly spaced DDIM timestep ladder from T down to 0 (K+1 entries).
inline std::vector<int> ddim_timesteps(int total_steps, int k) {
    if (k < 1 || k > total_steps) throw ConfigError("ddim_timesteps: need 1 <= k <= T");
    std::vector<int> ts(static_cast<size_t>(k) + 1);
    for (int i = 0; i <= k; ++i) {
        ts[static_cast<size_t>(i)] =
            static_cast<int>(std::llround(static_cast<double>(total_steps) * (k - i) / k));
    }
    ts.front() = total_steps;
    ts.back() = 0;
    return ts;
}

// Full reverse chains from pure noise.
template <typename T>
Tensor<T> sample_ddpm(const DenoiseFn<T>& model, const Shape& latent_shape,
                      const ContextEmbedding<T>& ctx, const NoiseSchedule<T>& sched, Rng& rng) {
    Tensor<T> x = rng.normal_tensor<T>(latent_shape);
    for (int t = sched.steps; t >= 1; --t) x = ddpm_step(model, x, t, ctx, sched, rng);
    return x;
}

template <typename T>
Tensor<T> sample_ddim(const DenoiseFn<T>& model, const Shape& latent_shape,
                      const ContextEmbedding<T>& ctx, const NoiseSchedule<T>& sched, int k,
                      Rng& rng) {
    Tensor<T> x = rng.normal_tensor<T>(latent_shape);
    const auto ts = ddim_timesteps(sched.steps, k);
    for (size_t i = 0; i + 1 < ts.size(); ++i)
        x = ddim_step(model, x, ts[i], ts[i + 1], ctx, sched);
    return x;
}

}  // namespace vd
