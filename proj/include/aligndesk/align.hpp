// Copyright (c) 2026, The aligndesk Authors
// SPDX-License-Identifier: Apache-2.0
//
// Alignment objectives between the student's trace and the frozen teacher:
// token-wise feature cosine through a trainable projector, attention-map
// cross-entropy over paired layers and heads, and their weighted sum.

#pragma once

#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "aligndesk/errors.hpp"
#include "aligndesk/ndgrad/ops.hpp"
#include "aligndesk/ndgrad/params.hpp"
#include "aligndesk/nn.hpp"
#include "aligndesk/student.hpp"
#include "aligndesk/teacher.hpp"

namespace aligndesk {

/// Three affine layers d -> hidden -> hidden -> d_T with SiLU between.
template <class T>
class BasicProjector {
public:
    using Params = BasicParamSet<T>;

    BasicProjector(std::size_t in, std::size_t hidden, std::size_t out, std::uint64_t seed) {
        if (in == 0 || hidden == 0 || out == 0) throw ConfigError("projector: sizes must be positive");
        Rng rng = Rng(seed).split("projector-init");
        nn::add_linear(params_, "proj.fc1", in, hidden, rng);
        nn::add_linear(params_, "proj.fc2", hidden, hidden, rng);
        nn::add_linear(params_, "proj.fc3", hidden, out, rng);
    }

    explicit BasicProjector(Params params) : params_(std::move(params)) {
        for (const char* n : {"proj.fc1.w", "proj.fc2.w", "proj.fc3.w"}) {
            if (!params_.contains(n)) throw FormatError(std::string("projector: missing ") + n);
        }
    }

    Params& params() noexcept { return params_; }
    const Params& params() const noexcept { return params_; }
    std::size_t out_dim() const { return params_.at("proj.fc3.w")->shape()[1]; }

    VarT<T> operator()(const VarT<T>& h) const {
        VarT<T> x = silu(nn::apply_linear(params_, "proj.fc1", h));
        x = silu(nn::apply_linear(params_, "proj.fc2", x));
        return nn::apply_linear(params_, "proj.fc3", x);
    }

private:
    Params params_;
};

using Projector = BasicProjector<float>;

struct AlignConfig {
    double lambda_repa = 0.5;
    double lambda_atta = 0.5;
    std::size_t feature_depth = 2;
    std::vector<std::pair<std::size_t, std::size_t>> pairs = {{1, 4}, {2, 5}};
    std::size_t aligned_heads = 4;

    void validate_weights() const {
        if (!(lambda_repa >= 0.0) || !(lambda_atta >= 0.0)) {
            throw ConfigError("align: loss weights must be >= 0");
        }
    }

    void validate(std::size_t student_depth, std::size_t student_heads, std::size_t teacher_depth,
                  std::size_t teacher_heads) const {
        validate_weights();
        if (feature_depth >= student_depth) {
            throw ConfigError("align: feature depth " + std::to_string(feature_depth) +
                              " outside a " + std::to_string(student_depth) + "-block student");
        }
        for (const auto& [ls, lt] : pairs) {
            if (ls >= student_depth || lt >= teacher_depth) {
                throw ConfigError("align: layer pair (" + std::to_string(ls) + "," + std::to_string(lt) +
                                  ") out of range");
            }
        }
        if (aligned_heads == 0 || aligned_heads > std::min(student_heads, teacher_heads)) {
            throw ConfigError("align: aligned heads must be in 1..min(student heads, teacher heads)");
        }
    }

    void validate(const StudentConfig& s, const TeacherConfig& t) const {
        validate(s.depth, s.heads, t.depth, t.heads);
    }
};

enum class PairingPreset { Desk, PaperB, PaperXL };

inline PairingPreset parse_preset(const std::string& name) {
    if (name == "desk") return PairingPreset::Desk;
    if (name == "paper-B") return PairingPreset::PaperB;
    if (name == "paper-XL") return PairingPreset::PaperXL;
    throw ConfigError("align: unknown pairing preset '" + name + "'");
}

/// Named layer/head selections; the result is range-checked against the
/// given architectures.
inline AlignConfig default_pairing(std::size_t student_depth, std::size_t student_heads,
                                   std::size_t teacher_depth, std::size_t teacher_heads,
                                   PairingPreset preset) {
    AlignConfig c;
    switch (preset) {
        case PairingPreset::PaperXL:
            c.feature_depth = 8;
            c.pairs = {{4, 8}, {5, 9}, {6, 10}, {7, 11}};
            c.aligned_heads = 12;
            break;
        case PairingPreset::PaperB:
            c.feature_depth = 5;
            c.pairs = {{2, 7}, {3, 9}, {4, 11}};
            c.aligned_heads = 12;
            break;
        case PairingPreset::Desk:
            c.feature_depth = 2;
            c.pairs = {{1, 4}, {2, 5}};
            c.aligned_heads = std::min(student_heads, teacher_heads);
            break;
    }
    c.validate(student_depth, student_heads, teacher_depth, teacher_heads);
    return c;
}

inline AlignConfig default_pairing(const StudentConfig& s, const TeacherConfig& t, PairingPreset p) {
    return default_pairing(s.depth, s.heads, t.depth, t.heads, p);
}

// ---------------------------------------------------------------- losses

/// -mean over batch and tokens of cos(projected[n], y[n]).
template <class T>
VarT<T> repa_from_projected(const VarT<T>& projected, const BasicArray<T>& y) {
    if (projected->shape() != y.shape()) {
        throw ShapeError("repa: projected features " + to_string(projected->shape()) +
                         " do not match teacher tokens " + to_string(y.shape()));
    }
    return scale(mean(cosine_sim_lastdim(projected, constant(y))), T(-1));
}

template <class T>
VarT<T> repa_loss(const BasicActivationTrace<T>& trace, const BasicTeacherOutputs<T>& teacher,
                  const BasicProjector<T>& proj, const AlignConfig& cfg) {
    if (cfg.feature_depth >= trace.hidden.size()) throw ConfigError("repa: feature depth out of range");
    const VarT<T>& h = trace.hidden[cfg.feature_depth];
    if (h->shape().size() != 3 || teacher.y.rank() != 3 || h->shape()[0] != teacher.y.dim(0) ||
        h->shape()[1] != teacher.y.dim(1)) {
        throw ShapeError("repa: student tokens " + to_string(h->shape()) + " vs teacher tokens " +
                         to_string(teacher.y.shape()));
    }
    return repa_from_projected(proj(h), teacher.y);
}

/// Mean over batch, heads and rows of -sum_j p_teacher log q_student for one
/// pair of [B, M, N, N] maps restricted to the first `heads` heads.
template <class T>
VarT<T> attention_cross_entropy(const VarT<T>& student, const BasicArray<T>& teacher, std::size_t heads) {
    const Shape& ss = student->shape();
    const Shape& ts = teacher.shape();
    if (ss.size() != 4 || ts.size() != 4 || ss[0] != ts[0] || ss[2] != ts[2] || ss[3] != ts[3]) {
        throw ShapeError("atta: student map " + to_string(ss) + " vs teacher map " + to_string(ts));
    }
    if (heads > ss[1] || heads > ts[1]) throw ConfigError("atta: aligned heads exceed available heads");
    VarT<T> q = heads == ss[1] ? student : slice_axis(student, 1, 0, heads);
    BasicArray<T> p = teacher;
    if (heads != ts[1]) p = slice_axis(constant(teacher), 1, 0, heads)->value;
    return mean(row_cross_entropy(p, q));
}

template <class T>
VarT<T> atta_loss(const BasicActivationTrace<T>& trace, const BasicTeacherOutputs<T>& teacher,
                  const AlignConfig& cfg) {
    if (cfg.pairs.empty()) throw ConfigError("atta: empty layer-pair set");
    VarT<T> total;
    for (const auto& [ls, lt] : cfg.pairs) {
        if (ls >= trace.attn.size() || lt >= teacher.attn.size()) {
            throw ConfigError("atta: layer pair out of range");
        }
        VarT<T> term = attention_cross_entropy(trace.attn[ls], teacher.attn[lt], cfg.aligned_heads);
        total = total ? add(total, term) : term;
    }
    return cfg.pairs.size() == 1 ? total : scale(total, T(1) / static_cast<T>(cfg.pairs.size()));
}

template <class T>
struct HybridLoss {
    VarT<T> total;                 // lambda_R * repa + lambda_A * atta
    std::optional<double> repa;    // present only when computed
    std::optional<double> atta;
};

/// Weighted sum; a term whose weight is zero is not evaluated at all, so
/// lambda_A = 0 reproduces the feature-only path bit for bit.
template <class T>
HybridLoss<T> hybrid_loss(const BasicActivationTrace<T>& trace, const BasicTeacherOutputs<T>& teacher,
                          const BasicProjector<T>& proj, const AlignConfig& cfg) {
    cfg.validate_weights();
    HybridLoss<T> out;
    if (cfg.lambda_repa != 0.0) {
        VarT<T> r = repa_loss(trace, teacher, proj, cfg);
        out.repa = r->value.item();
        out.total = scale(r, static_cast<T>(cfg.lambda_repa));
    }
    if (cfg.lambda_atta != 0.0) {
        VarT<T> a = atta_loss(trace, teacher, cfg);
        out.atta = a->value.item();
        VarT<T> wa = scale(a, static_cast<T>(cfg.lambda_atta));
        out.total = out.total ? add(out.total, wa) : wa;
    }
    if (!out.total) out.total = constant(BasicArray<T>::scalar(T(0)));
    return out;
}

}  // namespace aligndesk
