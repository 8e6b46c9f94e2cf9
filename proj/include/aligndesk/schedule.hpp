// Copyright (c) 2026, The aligndesk Authors
// SPDX-License-Identifier: Apache-2.0
//
// When to stop aligning, and how to measure whether alignment still helps:
// a termination policy (fixed step or a gradient-angle trigger) and a probe
// that reports the cosine between the denoising gradient and the alignment
// gradient on one block's parameters, per noise level.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <span>
#include <sstream>
#include <string>
#include <variant>
#include <vector>

#include "aligndesk/align.hpp"
#include "aligndesk/interpolant.hpp"
#include "aligndesk/stats.hpp"
#include "aligndesk/student.hpp"
#include "aligndesk/synthdata.hpp"
#include "aligndesk/teacher.hpp"

namespace aligndesk {

// ---------------------------------------------------------------- termination

/// Alignment is on for steps n < tau.
struct FixedIter {
    std::uint64_t tau = std::numeric_limits<std::uint64_t>::max();
};

/// Alignment switches off for good once the median of the last `window`
/// probe readings at the smallest probed t is <= `threshold`. This rule is
/// a project choice, not a published one.
struct GradAngle {
    std::size_t window = 5;
    double threshold = 0.0;
    std::uint64_t check_every = 500;
};

using TerminationPolicy = std::variant<FixedIter, GradAngle>;

inline TerminationPolicy never_terminate() { return FixedIter{}; }

inline void validate(const TerminationPolicy& p) {
    if (const auto* g = std::get_if<GradAngle>(&p)) {
        if (g->window == 0) throw ConfigError("schedule: grad-angle window must be >= 1");
        if (g->check_every == 0) throw ConfigError("schedule: grad-angle check_every must be >= 1");
        if (!(g->threshold >= -1.0 && g->threshold <= 1.0)) {
            throw ConfigError("schedule: grad-angle threshold must be in [-1, 1]");
        }
    }
}

/// One probe reading at the smallest probed t, taken before update `step`.
struct RhoRecord {
    std::uint64_t step = 0;
    double rho = 0.0;
};

/// Whether update n carries the alignment term. Only readings with
/// step <= n are visible, which makes the result non-increasing in n.
inline bool alignment_active(std::uint64_t n, const TerminationPolicy& policy,
                             std::span<const RhoRecord> history = {}) {
    if (const auto* f = std::get_if<FixedIter>(&policy)) return n < f->tau;
    const auto& g = std::get<GradAngle>(policy);
    std::vector<double> seen;
    for (const RhoRecord& r : history) {
        if (r.step > n) break;
        seen.push_back(r.rho);
        if (seen.size() >= g.window &&
            median(std::vector<double>(seen.end() - static_cast<std::ptrdiff_t>(g.window), seen.end())) <=
                g.threshold) {
            return false;
        }
    }
    return true;
}

// ---------------------------------------------------------------- gradient cosine

/// Adjoint snapshots keyed (and therefore ordered) by parameter name.
using Gradients = std::map<std::string, Array>;

inline Gradients collect_gradients(const ParamSet& ps, const std::string& prefix = "") {
    Gradients g;
    for (const auto& [name, p] : ps) {
        if (name.rfind(prefix, 0) == 0) g.emplace(name, p->adjoint_or_zero());
    }
    return g;
}

/// Cosine of the two gradients restricted to names starting with `prefix`,
/// flattened in name order; accumulated in double with a 1e-12 norm floor.
inline double rho(const Gradients& a, const Gradients& b, const std::string& prefix = "") {
    double dot = 0, na = 0, nb = 0;
    std::size_t matched = 0;
    for (const auto& [name, ga] : a) {
        if (name.rfind(prefix, 0) != 0) continue;
        auto it = b.find(name);
        if (it == b.end() || it->second.shape() != ga.shape()) {
            throw ContractError("rho: second gradient set lacks " + name);
        }
        ++matched;
        const Array& gb = it->second;
        for (std::size_t i = 0; i < ga.size(); ++i) {
            dot += double(ga[i]) * gb[i];
            na += double(ga[i]) * ga[i];
            nb += double(gb[i]) * gb[i];
        }
    }
    if (matched == 0) throw ConfigError("rho: parameter subset '" + prefix + "' is empty");
    return std::clamp(dot / std::max(std::sqrt(na) * std::sqrt(nb), 1e-12), -1.0, 1.0);
}

/// Cosine between the gradients of two losses over the `prefix` subset of
/// `ps`. Each loss is built and differentiated on its own; `zero` must clear
/// every adjoint the losses can reach and is called before and after.
template <class LossA, class LossB, class Zero>
double gradient_cosine(const ParamSet& ps, const std::string& prefix, LossA&& loss_a, LossB&& loss_b,
                       Zero&& zero) {
    zero();
    backward(loss_a());
    const Gradients ga = collect_gradients(ps, prefix);
    zero();
    backward(loss_b());
    const Gradients gb = collect_gradients(ps, prefix);
    zero();
    for (const Gradients* g : {&ga, &gb}) {
        for (const auto& [name, arr] : *g) {
            if (!arr.all_finite()) throw NumericError("non-finite gradient in " + name);
        }
    }
    return rho(ga, gb, prefix);
}

// ---------------------------------------------------------------- probe

inline const std::vector<double>& default_probe_times() {
    static const std::vector<double> t = {0.02, 0.05, 0.1, 0.2, 0.5, 0.9};
    return t;
}

enum class AlignTerm { Repa, Atta, Hybrid };

inline std::string to_string(AlignTerm k) {
    switch (k) {
        case AlignTerm::Repa: return "repa";
        case AlignTerm::Atta: return "atta";
        case AlignTerm::Hybrid: return "hybrid";
    }
    return "?";
}

inline AlignTerm parse_align_term(const std::string& s) {
    if (s == "repa") return AlignTerm::Repa;
    if (s == "atta") return AlignTerm::Atta;
    if (s == "hybrid") return AlignTerm::Hybrid;
    throw ConfigError("unknown alignment term '" + s + "' (repa|atta|hybrid)");
}

/// Fixed probe images with one noise draw per image (shared across t so
/// the per-t readings differ only in the noise level).
struct ConflictProbe {
    ImageBatch images;
    Array eps;
    std::size_t block_index = 0;
    std::vector<double> t_grid;

    ConflictProbe(ImageBatch imgs, std::size_t block, std::vector<double> times, std::uint64_t seed)
        : images(std::move(imgs)), eps(images.images.shape()), block_index(block), t_grid(std::move(times)) {
        if (images.size() == 0) throw ConfigError("probe: empty probe set");
        if (t_grid.empty()) throw ConfigError("probe: empty t grid");
        for (double t : t_grid) {
            if (!(t > 0.0 && t <= 1.0)) throw ConfigError("probe: t must be in (0, 1]");
        }
        Rng rng = Rng(seed).split("probe-noise");
        for (auto& v : eps.span()) v = static_cast<float>(rng.normal());
    }
};

struct RhoPoint {
    double t = 0.0;
    double rho = 0.0;
};

/// rho(grad L_diff, grad L_align) over the probe block's parameters, one
/// reading per t. Leaves parameters, adjoints (cleared) and any optimizer or
/// RNG state untouched.
inline std::vector<RhoPoint> probe_conflict(Student& student, Projector& proj, const TeacherOutputs& teacher,
                                            const ConflictProbe& probe, const AlignConfig& cfg,
                                            AlignTerm kind) {
    if (probe.block_index >= student.config().depth) throw ConfigError("probe: block index out of range");
    if (teacher.size() != probe.images.size()) throw ShapeError("probe: teacher outputs do not match probe set");
    const std::string prefix = Student::block_prefix(probe.block_index);
    const Array target = velocity_target(probe.images.images, probe.eps);
    auto zero = [&] {
        student.params().zero_grad();
        proj.params().zero_grad();
    };
    std::vector<RhoPoint> out;
    for (double t : probe.t_grid) {
        const Array tv(Shape{probe.images.size()}, static_cast<float>(t));
        const Array xt = corrupt(probe.images.images, probe.eps, tv);
        auto diff = [&] { return velocity_loss(student.forward(xt, tv, probe.images.labels).velocity, target); };
        auto align = [&]() -> Var {
            const auto trace = student.forward(xt, tv, probe.images.labels).trace;
            switch (kind) {
                case AlignTerm::Repa: return repa_loss(trace, teacher, proj, cfg);
                case AlignTerm::Atta: return atta_loss(trace, teacher, cfg);
                case AlignTerm::Hybrid: break;
            }
            return hybrid_loss(trace, teacher, proj, cfg).total;
        };
        try {
            out.push_back({t, gradient_cosine(student.params(), prefix, diff, align, zero)});
        } catch (const NumericError& e) {
            zero();
            std::ostringstream msg;
            msg << "probe at t=" << t << ": " << e.what();
            throw NumericError(msg.str());
        }
    }
    return out;
}

/// One diag.csv row.
struct DiagRow {
    std::uint64_t step = 0;
    double t = 0.0;
    double rho = 0.0;
    AlignTerm kind = AlignTerm::Repa;
};

inline constexpr const char* kDiagHeader = "step,t,rho,loss_kind";

}  // namespace aligndesk
