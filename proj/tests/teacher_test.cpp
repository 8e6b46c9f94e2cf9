// Copyright (c) 2026, The aligndesk Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <complex>

#include "aligndesk/teacher.hpp"

namespace aligndesk {
namespace {

TeacherConfig small_teacher() {
    TeacherConfig c;
    c.depth = 2;
    c.width = 32;
    c.heads = 4;
    return c;
}

TEST(Teacher, EncodeRequiresFrozen) {
    Teacher t(small_teacher(), 1);
    EXPECT_THROW(t.encode(Array(Shape{1, 16, 16, 1})), ContractError);
    EXPECT_THROW(t.checksum(), ContractError);
    t.freeze();
    EXPECT_NO_THROW(t.encode(Array(Shape{1, 16, 16, 1})));
    EXPECT_THROW(t.logits(Array(Shape{1, 16, 16, 1})), ContractError);
    EXPECT_FALSE(t.params().contains("head.w"));
}

TEST(Teacher, EncodeShapesRowsAndDeterminism) {
    Teacher t(TeacherConfig{}, 2);
    t.freeze();
    const ImageBatch data = stack(generate(3, 5));
    const TeacherOutputs a = t.encode(data.images);
    EXPECT_EQ(a.y.shape(), (Shape{5, 16, 96}));
    ASSERT_EQ(a.attn.size(), 6u);
    for (const auto& m : a.attn) {
        EXPECT_EQ(m.shape(), (Shape{5, 4, 16, 16}));
        for (std::size_t r = 0; r < m.size() / 16; ++r) {
            double s = 0;
            for (std::size_t j = 0; j < 16; ++j) s += m[r * 16 + j];
            EXPECT_NEAR(s, 1.0, 1e-5);
        }
    }
    const TeacherOutputs b = t.encode(data.images);
    EXPECT_TRUE(a.y.bit_equal(b.y));
    for (std::size_t l = 0; l < 6; ++l) EXPECT_TRUE(a.attn[l].bit_equal(b.attn[l]));
    // Chunked encoding agrees with a single pass.
    const TeacherOutputs c = t.encode_all(data.images, 2);
    EXPECT_TRUE(a.y.bit_equal(c.y));
    EXPECT_TRUE(a.attn[5].bit_equal(c.attn[5]));
}

TEST(Teacher, FrozenParametersReceiveNoGradient) {
    Teacher t(small_teacher(), 3);
    t.freeze();
    const ImageBatch data = stack(generate(1, 2));
    auto f = t.forward(data.images);
    Var w = parameter(Array(Shape{32}, 0.5f));
    backward(sum(mul(f.tokens, w)));
    for (const auto& [name, p] : t.params()) {
        EXPECT_FALSE(p->has_adjoint()) << name;
    }
    EXPECT_TRUE(w->has_adjoint());
}

TEST(Teacher, PretrainingIsDeterministicAndLearns) {
    const ImageBatch data = stack(generate(5, 512));
    TeacherTrainConfig cfg;
    cfg.steps = 120;
    cfg.batch = 32;
    cfg.seed = 9;
    Teacher a(small_teacher(), 4), b(small_teacher(), 4);
    const auto ra = pretrain_teacher(a, data, cfg);
    pretrain_teacher(b, data, cfg);
    EXPECT_EQ(a.checksum(), b.checksum());
    EXPECT_TRUE(a.frozen());
    EXPECT_FALSE(ra.divergence_warning);
    double first = 0, last = 0;
    for (int i = 0; i < 10; ++i) {
        first += ra.losses[static_cast<std::size_t>(i)];
        last += ra.losses[ra.losses.size() - 1 - static_cast<std::size_t>(i)];
    }
    EXPECT_LT(last, first);
}

TEST(Teacher, DivergenceWarningOnFlatLoss) {
    // One repeated image and an lr below float resolution: the loss is flat.
    const ImageBatch data = stack(std::vector<ShapeSample>(8, generate(5, 1)[0]));
    TeacherTrainConfig cfg;
    cfg.steps = 100;
    cfg.batch = 8;
    cfg.lr = 1e-12;
    Teacher t(small_teacher(), 4);
    const auto r = pretrain_teacher(t, data, cfg);
    EXPECT_TRUE(r.divergence_warning);
}

// ---------------------------------------------------------------- low-pass

// Direct O(n^4) DFT oracle.
Array brute_low_pass(const Array& x, double k) {
    const std::size_t H = x.dim(1), W = x.dim(2);
    Array out(x.shape());
    auto sf = [](std::size_t u, std::size_t n) { return u <= n / 2 ? double(u) : double(u) - double(n); };
    for (std::size_t b = 0; b < x.dim(0); ++b) {
        std::vector<std::complex<double>> spec(H * W);
        for (std::size_t u = 0; u < H; ++u)
            for (std::size_t v = 0; v < W; ++v) {
                std::complex<double> acc = 0;
                for (std::size_t i = 0; i < H; ++i)
                    for (std::size_t j = 0; j < W; ++j)
                        acc += double(x[(b * H + i) * W + j]) *
                               std::polar(1.0, -2 * M_PI * (double(u * i) / H + double(v * j) / W));
                spec[u * W + v] = std::hypot(sf(u, H), sf(v, W)) <= k ? acc : 0.0;
            }
        for (std::size_t i = 0; i < H; ++i)
            for (std::size_t j = 0; j < W; ++j) {
                std::complex<double> acc = 0;
                for (std::size_t u = 0; u < H; ++u)
                    for (std::size_t v = 0; v < W; ++v)
                        acc += spec[u * W + v] * std::polar(1.0, 2 * M_PI * (double(u * i) / H + double(v * j) / W));
                EXPECT_LE(std::abs(acc.imag()) / (H * W), 1e-5);
                out[(b * H + i) * W + j] = static_cast<float>(acc.real() / (H * W));
            }
    }
    return out;
}

TEST(LowPass, ConstantImageUnchanged) {
    const Array x(Shape{1, 16, 16, 1}, 0.37f);
    for (double k : {0.0, 1.0, 2.0, 20.0}) {
        const Array y = low_pass(x, k);
        for (float v : y.span()) EXPECT_NEAR(v, 0.37f, 1e-6);
    }
}

TEST(LowPass, AboveCornerFrequencyIsIdentity) {
    Rng rng(1);
    const Array x = normal_array<float>({2, 16, 16, 1}, 1.0, rng);
    const Array y = low_pass(x, max_radial_frequency(16, 16));
    for (std::size_t i = 0; i < x.size(); ++i) EXPECT_NEAR(y[i], x[i], 1e-5);
}

TEST(LowPass, CheckerboardCollapsesToMean) {
    Array x(Shape{1, 16, 16, 1});
    for (std::size_t i = 0; i < 16; ++i)
        for (std::size_t j = 0; j < 16; ++j) x[i * 16 + j] = ((i + j) % 2 ? 0.9f : -0.3f);
    const Array y = low_pass(x, 1.0);
    for (float v : y.span()) EXPECT_NEAR(v, 0.3f, 1e-5);
}

TEST(LowPass, MatchesDirectDft) {
    Rng rng(2);
    const Array x = normal_array<float>({1, 8, 8, 1}, 1.0, rng);
    for (double k : {0.0, 1.0, 2.0, 2.5, 4.0}) {
        const Array a = low_pass(x, k), b = brute_low_pass(x, k);
        for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], b[i], 1e-5) << "k=" << k;
    }
}

TEST(LowPass, IdempotentAndEnergyNonIncreasing) {
    Rng rng(3);
    for (int trial = 0; trial < 5; ++trial) {
        const Array x = normal_array<float>({2, 16, 16, 1}, 1.0, rng);
        for (double k : {1.0, 2.0, 4.0}) {
            const Array once = low_pass(x, k);
            const Array twice = low_pass(once, k);
            double ex = 0, ey = 0;
            for (std::size_t i = 0; i < x.size(); ++i) {
                EXPECT_NEAR(once[i], twice[i], 1e-5);
                ex += double(x[i]) * x[i];
                ey += double(once[i]) * once[i];
            }
            // Parseval: spatial energy equals spectral energy up to 1/(HW).
            EXPECT_LE(ey, ex);
        }
    }
}

TEST(LowPass, RejectsNegativeCutoff) {
    EXPECT_THROW(low_pass(Array(Shape{1, 4, 4, 1}), -1.0), DomainError);
}

}  // namespace
}  // namespace aligndesk
