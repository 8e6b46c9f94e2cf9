// Copyright (c) 2026, The aligndesk Authors
// SPDX-License-Identifier: Apache-2.0
//
// Adaptive-moment optimizer with decoupled weight decay. Moments and step
// counts are kept per parameter, so a parameter group that stops receiving
// updates keeps its state frozen exactly.

#pragma once

#include <cmath>
#include <map>
#include <string>

#include "aligndesk/errors.hpp"
#include "aligndesk/ndgrad/params.hpp"

namespace aligndesk {

struct AdamWConfig {
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;

    void validate() const {
        if (!(lr > 0.0)) throw ConfigError("optimizer: lr must be positive");
        if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) {
            throw ConfigError("optimizer: betas must be in [0, 1)");
        }
        if (!(eps > 0.0)) throw ConfigError("optimizer: eps must be positive");
        if (weight_decay < 0.0) throw ConfigError("optimizer: weight_decay must be >= 0");
    }
};

struct MomentState {
    Array m;
    Array v;
    std::uint64_t steps = 0;
};

class AdamW {
public:
    explicit AdamW(AdamWConfig cfg = {}) : cfg_(cfg) { cfg_.validate(); }

    const AdamWConfig& config() const noexcept { return cfg_; }

    /// One update of every parameter in `ps` from its current adjoint
    /// (a parameter without an adjoint is treated as having zero gradient).
    void step(ParamSet& ps) {
        const auto lr = static_cast<float>(cfg_.lr);
        const auto b1 = static_cast<float>(cfg_.beta1);
        const auto b2 = static_cast<float>(cfg_.beta2);
        const auto eps = static_cast<float>(cfg_.eps);
        const auto decay = static_cast<float>(1.0 - cfg_.lr * cfg_.weight_decay);
        for (auto& [name, p] : ps) {
            MomentState& s = state_for(name, p->shape());
            ++s.steps;
            const auto c1 = static_cast<float>(1.0 - std::pow(cfg_.beta1, static_cast<double>(s.steps)));
            const auto c2 = static_cast<float>(1.0 - std::pow(cfg_.beta2, static_cast<double>(s.steps)));
            const Array g = p->adjoint_or_zero();
            require_finite(g, "optimizer gradient");
            float* w = p->value.data();
            float* m = s.m.data();
            float* v = s.v.data();
            for (std::size_t i = 0; i < g.size(); ++i) {
                m[i] = b1 * m[i] + (1.0f - b1) * g[i];
                v[i] = b2 * v[i] + (1.0f - b2) * g[i] * g[i];
                const float mhat = m[i] / c1;
                const float vhat = v[i] / c2;
                if (cfg_.weight_decay != 0.0) w[i] *= decay;
                w[i] -= lr * mhat / (std::sqrt(vhat) + eps);
            }
            require_finite(p->value, "optimizer update");
        }
    }

    const std::map<std::string, MomentState>& state() const noexcept { return state_; }
    std::map<std::string, MomentState>& state() noexcept { return state_; }

private:
    MomentState& state_for(const std::string& name, const Shape& shape) {
        auto it = state_.find(name);
        if (it == state_.end()) {
            it = state_.emplace(name, MomentState{Array(shape), Array(shape), 0}).first;
        } else if (it->second.m.shape() != shape) {
            throw ShapeError("optimizer: moment shape mismatch for " + name);
        }
        return it->second;
    }

    AdamWConfig cfg_;
    std::map<std::string, MomentState> state_;
};

}  // namespace aligndesk
