// Copyright (c) 2026, The aligndesk Authors
// SPDX-License-Identifier: Apache-2.0
//
// Desk-scale quality and alignment-progress metrics: kernel two-sample
// distance and energy distance between image sets, plus feature-cosine and
// attention cross-entropy readings of a student against the teacher.

#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include <Eigen/Dense>

#include "aligndesk/align.hpp"
#include "aligndesk/interpolant.hpp"
#include "aligndesk/stats.hpp"
#include "aligndesk/student.hpp"
#include "aligndesk/synthdata.hpp"
#include "aligndesk/teacher.hpp"

namespace aligndesk {

namespace detail {

using MatD = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

inline MatD flatten_rows(const Array& a) {
    if (a.rank() < 1 || a.dim(0) == 0) throw ShapeError("samples: need a leading sample axis");
    const std::size_t n = a.dim(0), d = a.size() / n;
    MatD m(n, d);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < d; ++j) m(i, j) = a[i * d + j];
    return m;
}

/// Lexicographic order on (count, values) so symmetric metrics can always
/// evaluate their arguments in one canonical order.
inline bool canonical_first(const Array& x, const Array& y) {
    if (x.size() != y.size()) return x.size() < y.size();
    return std::lexicographical_compare(x.data(), x.data() + x.size(), y.data(), y.data() + y.size());
}

/// Squared Euclidean distances over the pooled rows [X; Y].
struct PooledDistances {
    std::size_t n = 0, m = 0;
    MatD d2;

    PooledDistances(const Array& x, const Array& y) {
        if (x.size() / std::max<std::size_t>(x.dim(0), 1) != y.size() / std::max<std::size_t>(y.dim(0), 1)) {
            throw ShapeError("samples: X and Y rows differ in size");
        }
        const MatD a = flatten_rows(x), b = flatten_rows(y);
        n = a.rows();
        m = b.rows();
        MatD z(n + m, a.cols());
        z << a, b;
        const Eigen::VectorXd r = z.rowwise().squaredNorm();
        d2 = MatD(z * z.transpose());
        for (Eigen::Index i = 0; i < d2.rows(); ++i) {
            for (Eigen::Index j = 0; j < d2.cols(); ++j) {
                d2(i, j) = i == j ? 0.0 : std::max(0.0, r(i) + r(j) - 2.0 * d2(i, j));
            }
        }
    }
};

}  // namespace detail

/// {0.5, 1, 2, 4} x the median pairwise distance of the pooled samples.
inline std::vector<double> median_bandwidths(const Array& x, const Array& y) {
    const detail::PooledDistances pd(x, y);
    std::vector<double> dist;
    const auto total = static_cast<Eigen::Index>(pd.n + pd.m);
    for (Eigen::Index i = 0; i < total; ++i)
        for (Eigen::Index j = i + 1; j < total; ++j) dist.push_back(std::sqrt(pd.d2(i, j)));
    const double med = std::max(median(std::move(dist)), 1e-6);
    return {0.5 * med, med, 2.0 * med, 4.0 * med};
}

/// Unbiased squared MMD with a sum of Gaussian kernels
/// exp(-|a-b|^2 / (2 s^2)), clamped at zero. Exactly symmetric in X, Y.
inline double mmd_rbf(const Array& x, const Array& y, const std::vector<double>& bandwidths) {
    if (x.dim(0) < 2 || y.dim(0) < 2) throw ContractError("mmd: need at least two samples per set");
    if (bandwidths.empty()) throw ConfigError("mmd: no bandwidths");
    for (double s : bandwidths) {
        if (!(s > 0.0)) throw ConfigError("mmd: bandwidths must be positive");
    }
    if (!detail::canonical_first(x, y) && detail::canonical_first(y, x)) return mmd_rbf(y, x, bandwidths);
    const detail::PooledDistances pd(x, y);
    const auto n = static_cast<Eigen::Index>(pd.n), m = static_cast<Eigen::Index>(pd.m);
    auto k = [&](double d2) {
        double s = 0;
        for (double bw : bandwidths) s += std::exp(-d2 / (2.0 * bw * bw));
        return s;
    };
    double kxx = 0, kyy = 0, kxy = 0;
    for (Eigen::Index i = 0; i < n; ++i)
        for (Eigen::Index j = 0; j < n; ++j)
            if (i != j) kxx += k(pd.d2(i, j));
    for (Eigen::Index i = 0; i < m; ++i)
        for (Eigen::Index j = 0; j < m; ++j)
            if (i != j) kyy += k(pd.d2(n + i, n + j));
    for (Eigen::Index i = 0; i < n; ++i)
        for (Eigen::Index j = 0; j < m; ++j) kxy += k(pd.d2(i, n + j));
    const double v = kxx / double(n * (n - 1)) + kyy / double(m * (m - 1)) - 2.0 * kxy / double(n * m);
    return std::max(v, 0.0);
}

inline double mmd_rbf(const Array& x, const Array& y) { return mmd_rbf(x, y, median_bandwidths(x, y)); }

/// 2 E|X-Y| - E|X-X'| - E|Y-Y'| over all pairs (diagonal included), which
/// is non-negative for any two empirical distributions.
inline double energy_distance(const Array& x, const Array& y) {
    if (!detail::canonical_first(x, y) && detail::canonical_first(y, x)) return energy_distance(y, x);
    const detail::PooledDistances pd(x, y);
    const auto n = static_cast<Eigen::Index>(pd.n), m = static_cast<Eigen::Index>(pd.m);
    double xx = 0, yy = 0, xy = 0;
    for (Eigen::Index i = 0; i < n; ++i)
        for (Eigen::Index j = 0; j < n; ++j) xx += std::sqrt(pd.d2(i, j));
    for (Eigen::Index i = 0; i < m; ++i)
        for (Eigen::Index j = 0; j < m; ++j) yy += std::sqrt(pd.d2(n + i, n + j));
    for (Eigen::Index i = 0; i < n; ++i)
        for (Eigen::Index j = 0; j < m; ++j) xy += std::sqrt(pd.d2(i, n + j));
    const double v = 2.0 * xy / double(n * m) - xx / double(n * n) - yy / double(m * m);
    return std::max(v, 0.0);
}

// ---------------------------------------------------------------- alignment progress

/// Mean over batch and tokens of the cosine between similarity profiles:
/// per image, tokens are centred and normalised, each token is described by
/// its cosine to every other token, and the two descriptions are compared.
/// Independent of either feature basis or width; equals 1 when a = b.
inline double relational_cosine(const Array& a, const Array& b) {
    if (a.rank() != 3 || b.rank() != 3 || a.dim(0) != b.dim(0) || a.dim(1) != b.dim(1)) {
        throw ShapeError("relational_cosine: token layouts differ: " + to_string(a.shape()) + " vs " +
                         to_string(b.shape()));
    }
    const std::size_t bsz = a.dim(0), n = a.dim(1);
    if (n < 3) throw ShapeError("relational_cosine: need at least three tokens");
    auto profiles = [n](const Array& src, std::size_t img) {
        const std::size_t d = src.dim(2);
        detail::MatD t(n, d);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < d; ++j) t(i, j) = src[(img * n + i) * d + j];
        t.rowwise() -= t.colwise().mean();
        for (Eigen::Index i = 0; i < t.rows(); ++i) t.row(i) /= std::max(t.row(i).norm(), 1e-12);
        return detail::MatD(t * t.transpose());
    };
    double acc = 0;
    for (std::size_t img = 0; img < bsz; ++img) {
        const detail::MatD sa = profiles(a, img), sb = profiles(b, img);
        for (std::size_t i = 0; i < n; ++i) {
            // Off-diagonal entries, centred within the row.
            double ma = 0, mb = 0;
            for (std::size_t j = 0; j < n; ++j) {
                if (j == i) continue;
                ma += sa(i, j);
                mb += sb(i, j);
            }
            ma /= double(n - 1);
            mb /= double(n - 1);
            double dot = 0, na = 0, nb = 0;
            for (std::size_t j = 0; j < n; ++j) {
                if (j == i) continue;
                const double u = sa(i, j) - ma, v = sb(i, j) - mb;
                dot += u * v;
                na += u * u;
                nb += v * v;
            }
            acc += dot / std::max(std::sqrt(na * nb), 1e-12);
        }
    }
    return acc / double(bsz * n);
}

/// Direct mean token cosine; widths must match.
inline double token_cosine(const Array& a, const Array& b) {
    if (a.shape() != b.shape()) {
        throw ShapeError("token_cosine: " + to_string(a.shape()) + " vs " + to_string(b.shape()));
    }
    return -repa_from_projected(constant(a), b)->value.item();
}

struct AlignmentProgress {
    double feat_cos = 0;            // unprojected
    double feat_cos_projected = 0;  // through the projector
    double attn_ce = 0;             // mean paired attention cross-entropy
};

/// Unprojected feature agreement: the direct token cosine when widths match,
/// otherwise the relational cosine.
inline double unprojected_feature_cosine(const Array& hidden, const Array& y) {
    return hidden.shape() == y.shape() ? token_cosine(hidden, y) : relational_cosine(hidden, y);
}

/// Readings at one fixed noise level on clean probe images; the noise draw
/// depends only on `seed`.
inline AlignmentProgress alignment_progress(const Student& student, const Projector& proj,
                                            const TeacherOutputs& teacher, const ImageBatch& probe,
                                            const AlignConfig& cfg, double t = 0.25,
                                            std::uint64_t seed = 0) {
    if (!(t > 0.0 && t <= 1.0)) throw ConfigError("alignment_progress: t must be in (0, 1]");
    if (teacher.size() != probe.size()) throw ShapeError("alignment_progress: teacher outputs do not match probe");
    NoGradGuard guard;
    Array eps(probe.images.shape());
    Rng rng = Rng(seed).split("progress-noise");
    for (auto& v : eps.span()) v = static_cast<float>(rng.normal());
    const Array tv(Shape{probe.size()}, static_cast<float>(t));
    const auto out = student.forward(corrupt(probe.images, eps, tv), tv, probe.labels);
    if (cfg.feature_depth >= out.trace.hidden.size()) throw ConfigError("alignment_progress: feature depth out of range");
    const Var& h = out.trace.hidden[cfg.feature_depth];
    AlignmentProgress r;
    r.feat_cos = unprojected_feature_cosine(h->value, teacher.y);
    r.feat_cos_projected = -repa_loss(out.trace, teacher, proj, cfg)->value.item();
    r.attn_ce = atta_loss(out.trace, teacher, cfg)->value.item();
    return r;
}

// ---------------------------------------------------------------- sample quality

/// Deterministic Euler ODE with a short grid: cheap enough to run inside
/// training.
inline SamplerConfig desk_eval_sampler() {
    SamplerConfig s;
    s.kind = SamplerKind::ODE;
    s.nfes = 32;
    return s;
}

struct EvalConfig {
    std::size_t n_samples = 256;
    SamplerConfig sampler = desk_eval_sampler();

    void validate() const {
        if (n_samples < 2) throw ConfigError("eval: need at least two samples");
        sampler.validate();
    }
};

struct MetricReport {
    double mmd = 0;
    double energy_distance = 0;
    double feat_cos = 0;
    double feat_cos_projected = 0;
    double attn_ce = 0;
    std::size_t n_samples = 0;
};

/// Generates one sample per reference label (first n_samples references)
/// and compares the sets.
inline std::pair<double, double> sample_quality(const Student& student, const ImageBatch& reference,
                                                const EvalConfig& cfg) {
    cfg.validate();
    const std::size_t n = std::min(cfg.n_samples, reference.size());
    if (n < 2) throw ConfigError("eval: reference set too small");
    std::vector<std::size_t> idx(n);
    for (std::size_t i = 0; i < n; ++i) idx[i] = i;
    const ImageBatch ref = select(reference, idx);
    const Shape image_shape(ref.images.shape().begin() + 1, ref.images.shape().end());
    const Array gen = sample(student.velocity_field(), cfg.sampler, ref.labels, student.config().null_label(),
                             image_shape);
    return {mmd_rbf(gen, ref.images), energy_distance(gen, ref.images)};
}

}  // namespace aligndesk
