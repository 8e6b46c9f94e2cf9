// Copyright (c) 2026, The aligndesk Authors
// SPDX-License-Identifier: Apache-2.0
//
// Transformer building blocks shared by the student and the teacher.

#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "aligndesk/errors.hpp"
#include "aligndesk/ndgrad/ops.hpp"
#include "aligndesk/ndgrad/params.hpp"

namespace aligndesk::nn {

enum class Init { Xavier, Zero, Normal };

/// Registers `<name>.w` [in, out] and, unless `bias` is false, a zero
/// `<name>.b` [out].
template <class T>
void add_linear(BasicParamSet<T>& ps, const std::string& name, std::size_t in, std::size_t out,
                Rng& rng, Init init = Init::Xavier, double stddev = 0.02, bool bias = true) {
    BasicArray<T> w(Shape{in, out});
    switch (init) {
        case Init::Xavier: w = xavier_uniform<T>(in, out, rng); break;
        case Init::Normal: w = normal_array<T>({in, out}, stddev, rng); break;
        case Init::Zero: break;
    }
    ps.add(name + ".w", std::move(w));
    if (bias) ps.add(name + ".b", BasicArray<T>(Shape{out}));
}

template <class T>
VarT<T> apply_linear(const BasicParamSet<T>& ps, const std::string& name, const VarT<T>& x) {
    const std::string b = name + ".b";
    if (!ps.contains(b)) return matmul(x, ps.at(name + ".w"));
    return linear(x, ps.at(name + ".w"), ps.at(b));
}

/// Affine-free layer norm followed by an optional learned gain/bias pair.
template <class T>
VarT<T> affine_norm(const BasicParamSet<T>& ps, const std::string& name, const VarT<T>& x) {
    return add(mul(layer_norm(x), ps.at(name + ".g")), ps.at(name + ".b"));
}

template <class T>
void add_affine_norm(BasicParamSet<T>& ps, const std::string& name, std::size_t d) {
    ps.add(name + ".g", BasicArray<T>(Shape{d}, T(1)));
    ps.add(name + ".b", BasicArray<T>(Shape{d}));
}

// The key projection has no bias: a key bias shifts every logit of a row by
// the same amount, so softmax makes it gradient-free.
template <class T>
void add_attention(BasicParamSet<T>& ps, const std::string& name, std::size_t d, Rng& rng) {
    add_linear(ps, name + ".q", d, d, rng);
    add_linear(ps, name + ".k", d, d, rng, Init::Xavier, 0.02, false);
    add_linear(ps, name + ".v", d, d, rng);
    add_linear(ps, name + ".o", d, d, rng);
}

template <class T>
struct AttentionResult {
    VarT<T> out;   // [B, N, d]
    VarT<T> attn;  // [B, M, N, N], rows softmax(q k^T / sqrt(d_h))
};

template <class T>
AttentionResult<T> attention(const BasicParamSet<T>& ps, const std::string& name,
                             const VarT<T>& x, std::size_t heads) {
    const Shape& s = x->shape();
    const std::size_t d = s[2];
    if (d % heads != 0) throw ShapeError("attention: width not divisible by heads");
    const std::size_t dh = d / heads;
    // Fold 1/sqrt(d_h) into q so the logits need no extra pass.
    const VarT<T> q = split_heads(scale(apply_linear(ps, name + ".q", x),
                                        T(1) / std::sqrt(static_cast<T>(dh))), heads);
    const VarT<T> k = split_heads(apply_linear(ps, name + ".k", x), heads);
    const VarT<T> v = split_heads(apply_linear(ps, name + ".v", x), heads);
    VarT<T> attn = softmax_lastdim(matmul_nt(q, k));
    VarT<T> mixed = merge_heads(matmul(attn, v));
    return {apply_linear(ps, name + ".o", mixed), std::move(attn)};
}

template <class T>
void add_mlp(BasicParamSet<T>& ps, const std::string& name, std::size_t d, std::size_t hidden,
             Rng& rng) {
    add_linear(ps, name + ".fc1", d, hidden, rng);
    add_linear(ps, name + ".fc2", hidden, d, rng);
}

template <class T>
VarT<T> mlp(const BasicParamSet<T>& ps, const std::string& name, const VarT<T>& x) {
    return apply_linear(ps, name + ".fc2", silu(apply_linear(ps, name + ".fc1", x)));
}

// ---------------------------------------------------------------- patches

/// [B, H, W, C] -> [B, (H/p)(W/p), p*p*C], tokens in row-major grid order.
template <class T>
VarT<T> patchify(const VarT<T>& x, std::size_t p) {
    const Shape& s = x->shape();
    if (s.size() != 4) throw ShapeError("patchify: expected [B,H,W,C], got " + to_string(s));
    const std::size_t b = s[0], h = s[1], w = s[2], c = s[3];
    if (p == 0 || h % p != 0 || w % p != 0) throw ShapeError("patchify: size not divisible by patch");
    const std::size_t gh = h / p, gw = w / p;
    auto y = permute(reshape(x, Shape{b, gh, p, gw, p, c}), {0, 1, 3, 2, 4, 5});
    return reshape(y, Shape{b, gh * gw, p * p * c});
}

/// Inverse of patchify.
template <class T>
VarT<T> unpatchify(const VarT<T>& tokens, std::size_t p, std::size_t h, std::size_t w,
                   std::size_t c) {
    const std::size_t b = tokens->shape()[0], gh = h / p, gw = w / p;
    auto y = permute(reshape(tokens, Shape{b, gh, gw, p, p, c}), {0, 1, 3, 2, 4, 5});
    return reshape(y, Shape{b, h, w, c});
}

// ---------------------------------------------------------------- embeddings

/// Fixed 2-D sine-cosine position table [gh*gw, d]; half the channels encode
/// the row, half the column.
template <class T>
BasicArray<T> sincos_position_table(std::size_t d, std::size_t gh, std::size_t gw) {
    if (d % 4 != 0) throw ShapeError("position table: width must be a multiple of 4");
    const std::size_t quarter = d / 4;
    BasicArray<T> out(Shape{gh * gw, d});
    for (std::size_t r = 0; r < gh; ++r) {
        for (std::size_t c = 0; c < gw; ++c) {
            T* row = out.data() + (r * gw + c) * d;
            for (std::size_t i = 0; i < quarter; ++i) {
                const double omega = std::pow(10000.0, -static_cast<double>(i) / static_cast<double>(quarter));
                row[i] = static_cast<T>(std::sin(r * omega));
                row[quarter + i] = static_cast<T>(std::cos(r * omega));
                row[2 * quarter + i] = static_cast<T>(std::sin(c * omega));
                row[3 * quarter + i] = static_cast<T>(std::cos(c * omega));
            }
        }
    }
    return out;
}

/// Sinusoidal features of 1000 t: [B, dim] = [cos(args), sin(args)].
template <class T>
BasicArray<T> timestep_features(const BasicArray<T>& t, std::size_t dim) {
    if (dim % 2 != 0) throw ShapeError("timestep features: dim must be even");
    const std::size_t half = dim / 2;
    BasicArray<T> out(Shape{t.size(), dim});
    for (std::size_t b = 0; b < t.size(); ++b) {
        for (std::size_t i = 0; i < half; ++i) {
            const double freq = std::exp(-std::log(10000.0) * static_cast<double>(i) / static_cast<double>(half));
            const double arg = 1000.0 * static_cast<double>(t[b]) * freq;
            out[b * dim + i] = static_cast<T>(std::cos(arg));
            out[b * dim + half + i] = static_cast<T>(std::sin(arg));
        }
    }
    return out;
}

}  // namespace aligndesk::nn
