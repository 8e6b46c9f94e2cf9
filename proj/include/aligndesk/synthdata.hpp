// Copyright (c) 2026, The aligndesk Authors
// SPDX-License-Identifier: Apache-2.0
//
// Procedural labeled shape images. Each sample is a pure function of
// (seed, index); labels cycle through the classes so every prefix is
// class-balanced.

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <string_view>
#include <utility>
#include <vector>

#include "aligndesk/errors.hpp"
#include "aligndesk/ndgrad/array.hpp"
#include "aligndesk/ndgrad/rng.hpp"

namespace aligndesk {

struct SynthConfig {
    std::size_t image_size = 16;
    std::size_t classes = 8;
};

struct ShapeSample {
    Array image;  // [H, W, 1] in [-1, 1]
    int label = 0;
};

inline constexpr std::array<std::string_view, 8> kShapeClassNames = {
    "disk", "square", "cross", "h-stripes", "v-stripes", "ring", "triangle", "checker"};

namespace detail {

// Coverage test for one class at offset (dx, dy) from the jittered center,
// or absolute pixel (x, y) for the periodic textures.
inline bool shape_covers(int cls, double x, double y, double dx, double dy, double r,
                         double phase) {
    const double dist = std::hypot(dx, dy);
    switch (cls) {
        case 0: return dist <= r;
        case 1: return std::max(std::abs(dx), std::abs(dy)) <= 0.8 * r;
        case 2: {
            const double arm = r / 3.5;
            return (std::abs(dx) <= arm && std::abs(dy) <= r) ||
                   (std::abs(dy) <= arm && std::abs(dx) <= r);
        }
        case 3: return static_cast<long>(std::floor((y + phase) / 2.0)) % 2 == 0;
        case 4: return static_cast<long>(std::floor((x + phase) / 2.0)) % 2 == 0;
        case 5: return dist <= r && dist >= 0.55 * r;
        case 6: return dy >= -r && dy <= r && std::abs(dx) <= 0.6 * (dy + r);
        case 7: {
            const long cx = static_cast<long>(std::floor((x + phase) / 2.0));
            const long cy = static_cast<long>(std::floor((y + phase) / 2.0));
            return (cx + cy) % 2 == 0;
        }
        default: return false;
    }
}

}  // namespace detail

/// Sample `index` of the stream keyed by `seed`.
inline ShapeSample generate_one(std::uint64_t seed, std::size_t index, const SynthConfig& cfg) {
    if (cfg.classes == 0 || cfg.classes > kShapeClassNames.size()) {
        throw ConfigError("synthdata: classes must be in 1..8");
    }
    const std::size_t h = cfg.image_size;
    Rng rng = Rng(seed).split("shape", index);
    const int cls = static_cast<int>(index % cfg.classes);
    const double center = static_cast<double>(h) / 2.0;
    const double jitter = static_cast<double>(h) / 8.0;
    const double cx = center + rng.uniform(-jitter, jitter);
    const double cy = center + rng.uniform(-jitter, jitter);
    const double r = static_cast<double>(h) * rng.uniform(0.22, 0.34);
    const double fg = rng.uniform(0.6, 1.0);
    const double bg = rng.uniform(-1.0, -0.6);
    const double phase = std::floor(rng.uniform(0.0, 4.0));

    ShapeSample s{Array(Shape{h, h, 1}), cls};
    // 2x2 supersampling for soft edges.
    constexpr std::array<double, 2> sub = {0.25, 0.75};
    for (std::size_t py = 0; py < h; ++py) {
        for (std::size_t px = 0; px < h; ++px) {
            int hits = 0;
            for (double oy : sub) {
                for (double ox : sub) {
                    const double x = static_cast<double>(px) + ox;
                    const double y = static_cast<double>(py) + oy;
                    hits += detail::shape_covers(cls, static_cast<double>(px),
                                                 static_cast<double>(py), x - cx, y - cy, r,
                                                 phase);
                }
            }
            const double cover = hits / 4.0;
            s.image[py * h + px] = static_cast<float>(std::clamp(bg + cover * (fg - bg), -1.0, 1.0));
        }
    }
    return s;
}

inline std::vector<ShapeSample> generate(std::uint64_t seed, std::size_t n,
                                         const SynthConfig& cfg = {}) {
    if (n == 0) throw DomainError("synthdata: n must be >= 1");
    std::vector<ShapeSample> out;
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i) out.push_back(generate_one(seed, i, cfg));
    return out;
}

/// Deterministic disjoint split; the holdout holds round(fraction * n)
/// samples chosen by index hash. Relative order is preserved in both parts.
inline std::pair<std::vector<ShapeSample>, std::vector<ShapeSample>> split(
    const std::vector<ShapeSample>& samples, double holdout_fraction, std::uint64_t seed = 0) {
    if (!(holdout_fraction > 0.0 && holdout_fraction < 1.0)) {
        throw DomainError("split: holdout fraction must be in (0, 1)");
    }
    const std::size_t n = samples.size();
    const auto n_hold = static_cast<std::size_t>(std::llround(holdout_fraction * static_cast<double>(n)));
    std::vector<std::pair<std::uint64_t, std::size_t>> keyed(n);
    for (std::size_t i = 0; i < n; ++i) {
        keyed[i] = {detail::mix64(detail::mix64(seed) ^ (i * detail::kGolden)), i};
    }
    std::sort(keyed.begin(), keyed.end());
    std::vector<bool> hold(n, false);
    for (std::size_t i = 0; i < n_hold; ++i) hold[keyed[i].second] = true;
    std::pair<std::vector<ShapeSample>, std::vector<ShapeSample>> out;
    for (std::size_t i = 0; i < n; ++i) (hold[i] ? out.second : out.first).push_back(samples[i]);
    return out;
}

/// Images stacked into [n, H, W, 1] plus the label vector.
struct ImageBatch {
    Array images;
    std::vector<int> labels;

    std::size_t size() const noexcept { return labels.size(); }
};

inline ImageBatch stack(const std::vector<ShapeSample>& samples) {
    if (samples.empty()) throw DomainError("stack: no samples");
    const Shape one = samples.front().image.shape();
    Shape s{samples.size()};
    s.insert(s.end(), one.begin(), one.end());
    ImageBatch b{Array(s), {}};
    const std::size_t per = samples.front().image.size();
    for (std::size_t i = 0; i < samples.size(); ++i) {
        std::copy_n(samples[i].image.data(), per, b.images.data() + i * per);
        b.labels.push_back(samples[i].label);
    }
    return b;
}

/// Rows `indices` of a stacked batch.
inline ImageBatch select(const ImageBatch& src, const std::vector<std::size_t>& indices) {
    Shape s = src.images.shape();
    const std::size_t per = src.images.size() / s[0];
    s[0] = indices.size();
    ImageBatch out{Array(s), {}};
    for (std::size_t i = 0; i < indices.size(); ++i) {
        std::copy_n(src.images.data() + indices[i] * per, per, out.images.data() + i * per);
        out.labels.push_back(src.labels[indices[i]]);
    }
    return out;
}

}  // namespace aligndesk
