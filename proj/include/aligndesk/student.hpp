// Copyright (c) 2026, The aligndesk Authors
// SPDX-License-Identifier: Apache-2.0
//
// Class-conditional diffusion transformer with adaptive-norm conditioning.
// Every block's hidden state and per-head attention maps are recorded so the
// alignment losses can reach into the middle of the network.

#pragma once

#include <string>
#include <utility>
#include <vector>

#include "aligndesk/errors.hpp"
#include "aligndesk/ndgrad/ops.hpp"
#include "aligndesk/ndgrad/params.hpp"
#include "aligndesk/nn.hpp"

namespace aligndesk {

struct StudentConfig {
    std::size_t depth = 4;
    std::size_t width = 64;
    std::size_t heads = 4;
    std::size_t patch = 4;
    std::size_t image_size = 16;
    std::size_t classes = 8;
    std::size_t time_dim = 64;
    std::size_t mlp_ratio = 4;
    double label_dropout = 0.1;

    std::size_t grid() const { return image_size / patch; }
    std::size_t tokens() const { return grid() * grid(); }
    std::size_t head_dim() const { return width / heads; }
    int null_label() const { return static_cast<int>(classes); }

    void validate() const {
        if (depth == 0 || width == 0 || heads == 0 || patch == 0 || classes == 0) {
            throw ConfigError("student: depth, width, heads, patch and classes must be positive");
        }
        if (width % heads != 0) throw ConfigError("student: width must be divisible by heads");
        if (width % 4 != 0) throw ConfigError("student: width must be a multiple of 4");
        if (image_size % patch != 0) throw ConfigError("student: image size must be divisible by patch");
        if (time_dim == 0 || time_dim % 2 != 0) throw ConfigError("student: time_dim must be even");
        if (mlp_ratio == 0) throw ConfigError("student: mlp_ratio must be positive");
        if (!(label_dropout >= 0.0 && label_dropout < 1.0)) {
            throw ConfigError("student: label_dropout must be in [0, 1)");
        }
    }
};

template <class T>
struct BasicActivationTrace {
    std::vector<VarT<T>> hidden;  // [B, N, d], output of block l
    std::vector<VarT<T>> attn;    // [B, M, N, N]
};

template <class T>
struct StudentOutput {
    VarT<T> velocity;  // [B, H, W, 1]
    BasicActivationTrace<T> trace;
};

/// Replaces each label by the null label with probability `rate`.
inline std::vector<int> apply_label_dropout(const std::vector<int>& labels, double rate,
                                            int null_label, Rng& rng) {
    if (!(rate >= 0.0 && rate < 1.0)) throw DomainError("label dropout rate must be in [0, 1)");
    std::vector<int> out = labels;
    for (auto& c : out) {
        if (rng.uniform() < rate) c = null_label;
    }
    return out;
}

template <class T>
class BasicStudent {
public:
    using Params = BasicParamSet<T>;

    explicit BasicStudent(StudentConfig cfg, std::uint64_t seed) : cfg_(cfg) {
        cfg_.validate();
        Rng rng = Rng(seed).split("student-init");
        const std::size_t d = cfg_.width;
        const std::size_t pp = cfg_.patch * cfg_.patch;
        nn::add_linear(params_, "patch_embed", pp, d, rng);
        nn::add_linear(params_, "t_embed.fc1", cfg_.time_dim, d, rng, nn::Init::Normal);
        nn::add_linear(params_, "t_embed.fc2", d, d, rng, nn::Init::Normal);
        params_.add("y_embed.table", normal_array<T>({cfg_.classes + 1, d}, 0.02, rng));
        for (std::size_t l = 0; l < cfg_.depth; ++l) {
            const std::string b = block_prefix(l);
            nn::add_attention(params_, b + "attn", d, rng);
            nn::add_mlp(params_, b + "mlp", d, d * cfg_.mlp_ratio, rng);
            nn::add_linear(params_, b + "mod", d, 6 * d, rng, nn::Init::Zero);
        }
        nn::add_linear(params_, "final.mod", d, 2 * d, rng, nn::Init::Zero);
        nn::add_linear(params_, "final.out", d, pp, rng, nn::Init::Zero);
        pos_ = constant(nn::sincos_position_table<T>(d, cfg_.grid(), cfg_.grid()));
    }

    BasicStudent(StudentConfig cfg, Params params) : cfg_(cfg), params_(std::move(params)) {
        cfg_.validate();
        pos_ = constant(nn::sincos_position_table<T>(cfg_.width, cfg_.grid(), cfg_.grid()));
    }

    static std::string block_prefix(std::size_t l) { return "blocks." + std::to_string(l) + "."; }

    const StudentConfig& config() const noexcept { return cfg_; }
    Params& params() noexcept { return params_; }
    const Params& params() const noexcept { return params_; }

    /// x_t [B, H, W, 1], t [B], labels in 0..C (C is the null label).
    StudentOutput<T> forward(const BasicArray<T>& x_t, const BasicArray<T>& t,
                             const std::vector<int>& labels) const {
        const Shape& s = x_t.shape();
        if (s.size() != 4 || s[1] != cfg_.image_size || s[2] != cfg_.image_size || s[3] != 1) {
            throw ShapeError("student: expected [B," + std::to_string(cfg_.image_size) + "," +
                             std::to_string(cfg_.image_size) + ",1], got " + to_string(s));
        }
        const std::size_t bsz = s[0];
        if (t.rank() != 1 || t.dim(0) != bsz || labels.size() != bsz) {
            throw ShapeError("student: t and labels must have one entry per sample");
        }
        std::vector<std::size_t> idx(bsz);
        for (std::size_t i = 0; i < bsz; ++i) {
            if (labels[i] < 0 || labels[i] > cfg_.null_label()) {
                throw DomainError("student: label out of range");
            }
            idx[i] = static_cast<std::size_t>(labels[i]);
        }
        const std::size_t d = cfg_.width;

        VarT<T> h = add(nn::apply_linear(params_, "patch_embed", nn::patchify(constant(x_t), cfg_.patch)), pos_);
        VarT<T> temb = constant(nn::timestep_features(t, cfg_.time_dim));
        temb = nn::apply_linear(params_, "t_embed.fc2", silu(nn::apply_linear(params_, "t_embed.fc1", temb)));
        const VarT<T> cond = silu(add(temb, gather(params_.at("y_embed.table"), idx)));

        StudentOutput<T> out;
        for (std::size_t l = 0; l < cfg_.depth; ++l) {
            const std::string b = block_prefix(l);
            const VarT<T> mod = nn::apply_linear(params_, b + "mod", cond);
            auto chunk = [&](std::size_t i) { return slice_lastdim(mod, i * d, d); };
            auto a = nn::attention(params_, b + "attn", modulate(layer_norm(h), chunk(0), chunk(1)),
                                   cfg_.heads);
            h = gated_add(h, a.out, chunk(2));
            const VarT<T> m = nn::mlp(params_, b + "mlp", modulate(layer_norm(h), chunk(3), chunk(4)));
            h = gated_add(h, m, chunk(5));
            out.trace.hidden.push_back(h);
            out.trace.attn.push_back(std::move(a.attn));
        }
        const VarT<T> fmod = nn::apply_linear(params_, "final.mod", cond);
        const VarT<T> fin = modulate(layer_norm(h), slice_lastdim(fmod, 0, d), slice_lastdim(fmod, d, d));
        out.velocity = nn::unpatchify(nn::apply_linear(params_, "final.out", fin), cfg_.patch,
                                      cfg_.image_size, cfg_.image_size, 1);
        return out;
    }

    /// Gradient-free velocity callable for the samplers.
    auto velocity_field() const {
        return [this](const BasicArray<T>& x, const BasicArray<T>& t, const std::vector<int>& c) {
            NoGradGuard guard;
            return forward(x, t, c).velocity->value;
        };
    }

private:
    StudentConfig cfg_;
    Params params_;
    VarT<T> pos_;
};

using Student = BasicStudent<float>;
using ActivationTrace = BasicActivationTrace<float>;

}  // namespace aligndesk
