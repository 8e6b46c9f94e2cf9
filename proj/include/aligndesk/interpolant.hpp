// Copyright (c) 2026, The aligndesk Authors
// SPDX-License-Identifier: Apache-2.0
//
// Linear interpolant x_t = (1 - t) x0 + t eps (t = 0 data, t = 1 noise),
// velocity regression, and Euler / Euler-Maruyama samplers with
// classifier-free guidance restricted to a guidance interval.
//
// A velocity field is any callable
//     Array field(const Array& x /*[B,H,W,C]*/, const Array& t /*[B]*/,
//                 const std::vector<int>& labels);

#pragma once

#include <cmath>
#include <concepts>
#include <cstdint>
#include <string>
#include <vector>

#include "aligndesk/errors.hpp"
#include "aligndesk/ndgrad/array.hpp"
#include "aligndesk/ndgrad/node.hpp"
#include "aligndesk/ndgrad/ops.hpp"
#include "aligndesk/ndgrad/rng.hpp"
#include "aligndesk/synthdata.hpp"

namespace aligndesk {

template <class F>
concept VelocityField = requires(F f, const Array& x, const Array& t, const std::vector<int>& c) {
    { f(x, t, c) } -> std::convertible_to<Array>;
};

namespace detail {

inline std::size_t per_sample(const Shape& s, const Array& t, const char* op) {
    if (s.empty() || t.rank() != 1 || t.dim(0) != s[0]) {
        throw ShapeError(std::string(op) + ": t must be [B] matching the leading extent");
    }
    return numel(s) / s[0];
}

}  // namespace detail

template <class T>
BasicArray<T> corrupt(const BasicArray<T>& x0, const BasicArray<T>& eps, const BasicArray<T>& t) {
    if (x0.shape() != eps.shape()) throw ShapeError("corrupt: x0 and eps shapes differ");
    const Array tf = t.template cast<float>();
    const std::size_t per = detail::per_sample(x0.shape(), tf, "corrupt");
    BasicArray<T> out(x0.shape());
    for (std::size_t b = 0; b < t.size(); ++b) {
        const T tb = t[b];
        if (!(tb >= T(0) && tb <= T(1))) throw DomainError("corrupt: t outside [0, 1]");
        for (std::size_t i = b * per; i < (b + 1) * per; ++i) {
            out[i] = (T(1) - tb) * x0[i] + tb * eps[i];
        }
    }
    return out;
}

/// d/dt of corrupt at fixed (x0, eps).
template <class T>
BasicArray<T> velocity_target(const BasicArray<T>& x0, const BasicArray<T>& eps) {
    if (x0.shape() != eps.shape()) throw ShapeError("velocity_target: shapes differ");
    BasicArray<T> out(x0.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = eps[i] - x0[i];
    return out;
}

struct DiffusionBatch {
    Array x0;                 // [B, H, W, 1]
    Array eps;                // [B, H, W, 1]
    Array t;                  // [B], inside (0, 1)
    std::vector<int> labels;  // 0..C-1 or the null label C

    Array x_t() const { return corrupt(x0, eps, t); }
    Array target() const { return velocity_target(x0, eps); }
};

/// Draws t ~ U(t_floor, 1) per element and eps ~ N(0, I) from `rng`.
inline DiffusionBatch make_diffusion_batch(const ImageBatch& data, Rng& rng,
                                           double t_floor = 1e-3) {
    DiffusionBatch b;
    b.x0 = data.images;
    b.labels = data.labels;
    b.t = Array(Shape{data.size()});
    for (auto& v : b.t.span()) v = static_cast<float>(rng.uniform(t_floor, 1.0));
    b.eps = Array(data.images.shape());
    for (auto& v : b.eps.span()) v = static_cast<float>(rng.normal());
    return b;
}

/// Mean over batch and pixels of (v_pred - v*)^2.
template <class T>
VarT<T> velocity_loss(const VarT<T>& v_pred, const BasicArray<T>& v_target) {
    return mse(v_pred, constant(v_target));
}

/// model(x_t, t, labels) -> velocity node.
template <class Model>
Var diffusion_loss(Model&& model, const DiffusionBatch& batch) {
    Var v = model(batch.x_t(), batch.t, batch.labels);
    if (!v->value.all_finite()) throw NumericError("diffusion_loss: non-finite model output");
    return velocity_loss(v, batch.target());
}

// ---------------------------------------------------------------- sampling

enum class SamplerKind { ODE, SDE };

struct SamplerConfig {
    std::size_t nfes = 250;
    SamplerKind kind = SamplerKind::SDE;
    double cfg_scale = 1.0;
    double interval_lo = 0.0;
    double interval_hi = 1.0;
    double t_min = 0.04;
    // Diffusion coefficient g(t) = diffusion_scale * t; 0 gives the ODE.
    double diffusion_scale = 1.0;
    std::uint64_t seed = 0;

    void validate() const {
        if (nfes < 1) throw ConfigError("sampler: nfes must be >= 1");
        if (!(cfg_scale >= 1.0)) throw ConfigError("sampler: cfg_scale must be >= 1");
        if (!(interval_lo <= interval_hi) || interval_lo < 0.0 || interval_hi > 1.0) {
            throw ConfigError("sampler: guidance interval must satisfy 0 <= lo <= hi <= 1");
        }
        if (!(t_min > 0.0 && t_min < 1.0)) throw ConfigError("sampler: t_min must be in (0, 1)");
        if (diffusion_scale < 0.0) throw ConfigError("sampler: diffusion_scale must be >= 0");
    }
};

/// Guided velocity. With w = 1 or t outside the interval the conditional
/// output is returned untouched.
template <VelocityField F>
Array cfg_velocity(F&& field, const Array& x, const Array& t, const std::vector<int>& labels,
                   const SamplerConfig& cfg, int null_label) {
    Array cond = field(x, t, labels);
    if (cfg.cfg_scale == 1.0) return cond;
    const double tv = t[0];
    if (tv < cfg.interval_lo || tv > cfg.interval_hi) return cond;
    const std::vector<int> nulls(labels.size(), null_label);
    const Array uncond = field(x, t, nulls);
    const auto w = static_cast<float>(cfg.cfg_scale);
    Array out(cond.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = uncond[i] + w * (cond[i] - uncond[i]);
    return out;
}

namespace detail {

inline Rng chain_rng(std::uint64_t seed, std::size_t chain) {
    return Rng(seed).split("sampler-chain", chain);
}

/// x(1) ~ N(0, I); chain j draws from its own stream.
inline Array initial_noise(const SamplerConfig& cfg, std::size_t n, const Shape& image_shape,
                           std::vector<Rng>& chains) {
    Shape s{n};
    s.insert(s.end(), image_shape.begin(), image_shape.end());
    Array x(s);
    const std::size_t per = numel(image_shape);
    chains.clear();
    for (std::size_t j = 0; j < n; ++j) {
        chains.push_back(chain_rng(cfg.seed, j));
        for (std::size_t i = 0; i < per; ++i) x[j * per + i] = static_cast<float>(chains[j].normal());
    }
    return x;
}

inline double grid_time(std::size_t i, std::size_t nfes) {
    return 1.0 - static_cast<double>(i) / static_cast<double>(nfes);
}

}  // namespace detail

/// Explicit Euler on dx/dt = v from t = 1 to t = 0 over a uniform grid.
template <VelocityField F>
Array sample_ode(F&& field, const SamplerConfig& cfg, const std::vector<int>& labels,
                 int null_label, const Shape& image_shape) {
    cfg.validate();
    std::vector<Rng> chains;
    Array x = detail::initial_noise(cfg, labels.size(), image_shape, chains);
    Array t(Shape{labels.size()});
    for (std::size_t i = 0; i < cfg.nfes; ++i) {
        const double t_cur = detail::grid_time(i, cfg.nfes);
        const double t_next = detail::grid_time(i + 1, cfg.nfes);
        t.fill(static_cast<float>(t_cur));
        const Array v = cfg_velocity(field, x, t, labels, cfg, null_label);
        const auto dt = static_cast<float>(t_cur - t_next);
        for (std::size_t k = 0; k < x.size(); ++k) x[k] -= dt * v[k];
        if (!x.all_finite()) throw NumericError("sample_ode: non-finite state at step " + std::to_string(i));
    }
    return x;
}

/// Euler-Maruyama on the reverse SDE with drift v - (g/2) s and noise
/// sqrt(g dt) xi, where s = -(x + (1 - t) v) / t and g(t) = diffusion_scale * t.
/// Uses the same grid as sample_ode; steps starting below t_min and the final
/// step into t = 0 are deterministic.
template <VelocityField F>
Array sample_sde(F&& field, const SamplerConfig& cfg, const std::vector<int>& labels,
                 int null_label, const Shape& image_shape) {
    cfg.validate();
    std::vector<Rng> chains;
    Array x = detail::initial_noise(cfg, labels.size(), image_shape, chains);
    const std::size_t per = numel(image_shape);
    Array t(Shape{labels.size()});
    for (std::size_t i = 0; i < cfg.nfes; ++i) {
        const double t_cur = detail::grid_time(i, cfg.nfes);
        const double t_next = detail::grid_time(i + 1, cfg.nfes);
        t.fill(static_cast<float>(t_cur));
        const Array v = cfg_velocity(field, x, t, labels, cfg, null_label);
        const auto dt = static_cast<float>(t_cur - t_next);
        const double g = cfg.diffusion_scale * t_cur;
        const bool stochastic = g > 0.0 && t_cur >= cfg.t_min && i + 1 < cfg.nfes;
        if (!stochastic) {
            for (std::size_t k = 0; k < x.size(); ++k) x[k] -= dt * v[k];
        } else {
            const auto tc = static_cast<float>(t_cur);
            const auto half_g_dt = static_cast<float>(0.5 * g * (t_cur - t_next));
            const auto noise_scale = static_cast<float>(std::sqrt(g * (t_cur - t_next)));
            for (std::size_t j = 0; j < labels.size(); ++j) {
                for (std::size_t q = 0; q < per; ++q) {
                    const std::size_t k = j * per + q;
                    const float score = -(x[k] + (1.0f - tc) * v[k]) / tc;
                    const auto xi = static_cast<float>(chains[j].normal());
                    x[k] = x[k] - dt * v[k] + half_g_dt * score + noise_scale * xi;
                }
            }
        }
        if (!x.all_finite()) throw NumericError("sample_sde: non-finite state at step " + std::to_string(i));
    }
    return x;
}

template <VelocityField F>
Array sample(F&& field, const SamplerConfig& cfg, const std::vector<int>& labels, int null_label,
             const Shape& image_shape) {
    return cfg.kind == SamplerKind::ODE ? sample_ode(field, cfg, labels, null_label, image_shape)
                                        : sample_sde(field, cfg, labels, null_label, image_shape);
}

}  // namespace aligndesk
