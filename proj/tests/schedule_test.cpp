// Copyright (c) 2026, The aligndesk Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>

#include "aligndesk/optim.hpp"
#include "aligndesk/schedule.hpp"
#include "oracles.hpp"

namespace aligndesk {
namespace {

using namespace testing;

// ---------------------------------------------------------------- termination

TEST(Termination, FixedIterBoundary) {
    const TerminationPolicy p = FixedIter{5};
    EXPECT_TRUE(alignment_active(4, p));
    EXPECT_FALSE(alignment_active(5, p));
    EXPECT_FALSE(alignment_active(6, p));
    for (std::uint64_t n = 0; n < 10; ++n) EXPECT_FALSE(alignment_active(n, FixedIter{0}));
    EXPECT_TRUE(alignment_active(1'000'000, never_terminate()));
}

TEST(Termination, GradAngleNeverTriggersOnAgreement) {
    std::vector<RhoRecord> h;
    for (std::uint64_t s = 0; s < 50; ++s) h.push_back({s * 10, 1.0});
    EXPECT_TRUE(alignment_active(10'000, GradAngle{}, h));
}

TEST(Termination, GradAngleMedianWindowAndMonotonicity) {
    // Window 5, threshold 0: the median of the last five readings decides.
    const std::vector<RhoRecord> h = {{0, 0.5},  {10, -0.2}, {20, -0.3}, {30, 0.4},
                                      {40, -0.1}, {50, -0.4}, {60, 0.9}};
    // Window at step 40: {0.5,-0.2,-0.3,0.4,-0.1} -> median -0.1 <= 0.
    const GradAngle g{5, 0.0, 10};
    EXPECT_TRUE(alignment_active(39, g, h));
    EXPECT_FALSE(alignment_active(40, g, h));
    bool prev = true;
    for (std::uint64_t n = 0; n < 100; ++n) {
        const bool a = alignment_active(n, g, h);
        EXPECT_LE(a, prev) << n;
        prev = a;
    }
    // Later recovery does not re-enable alignment.
    EXPECT_FALSE(alignment_active(1000, g, h));
    // A stricter threshold is never crossed by these readings' medians.
    EXPECT_TRUE(alignment_active(1000, GradAngle{5, -0.5, 10}, h));
}

TEST(Termination, Validation) {
    EXPECT_THROW(validate(GradAngle{0, 0.0, 1}), ConfigError);
    EXPECT_THROW(validate(GradAngle{5, 2.0, 1}), ConfigError);
    EXPECT_NO_THROW(validate(FixedIter{0}));
    EXPECT_DOUBLE_EQ(median({3, 1, 2}), 2.0);
    EXPECT_DOUBLE_EQ(median({4, 1, 2, 3}), 2.5);
}

// ---------------------------------------------------------------- rho

TEST(Rho, Examples) {
    Gradients a{{"w", Array(Shape{3}, std::vector<float>{1, -2, 3})}};
    EXPECT_NEAR(rho(a, a), 1.0, 1e-12);
    Gradients neg{{"w", Array(Shape{3}, std::vector<float>{-1, 2, -3})}};
    EXPECT_NEAR(rho(a, neg), -1.0, 1e-12);
    Gradients x{{"a", Array(Shape{1}, 1.0f)}, {"b", Array(Shape{1}, 0.0f)}};
    Gradients y{{"a", Array(Shape{1}, 0.0f)}, {"b", Array(Shape{1}, 1.0f)}};
    EXPECT_NEAR(rho(x, y), 0.0, 1e-12);
    // Subset filter.
    Gradients p{{"blk.a", Array(Shape{1}, 1.0f)}, {"other", Array(Shape{1}, 5.0f)}};
    Gradients q{{"blk.a", Array(Shape{1}, 2.0f)}, {"other", Array(Shape{1}, -5.0f)}};
    EXPECT_NEAR(rho(p, q, "blk."), 1.0, 1e-12);
    EXPECT_THROW(rho(p, q, "none."), ConfigError);
    // Zero gradient: floor keeps it finite.
    Gradients z{{"w", Array(Shape{3})}};
    EXPECT_EQ(rho(a, z), 0.0);
}

// ---------------------------------------------------------------- probe

TEST(Probe, MatchesBruteForceOracle) {
    for (std::uint64_t seed = 1; seed <= 10; ++seed) {
        ProbeRig r(seed);
        const auto kind = seed % 3 == 0 ? AlignTerm::Atta : seed % 3 == 1 ? AlignTerm::Repa : AlignTerm::Hybrid;
        const auto got = probe_conflict(r.student, r.proj, r.tout, r.probe, r.cfg, kind);
        ASSERT_EQ(got.size(), 2u);
        const auto want = brute_force_rho(r, kind);
        for (std::size_t k = 0; k < 2; ++k) {
            EXPECT_NEAR(got[k].rho, want[k], 1e-6) << "seed " << seed << " t " << r.probe.t_grid[k];
            EXPECT_EQ(got[k].t, r.probe.t_grid[k]);
        }
    }
}

TEST(Probe, SelfSimilarityAndNegation) {
    ProbeRig r(3);
    const Array tv(Shape{6}, 0.3f);
    const Array xt = corrupt(r.probe.images.images, r.probe.eps, tv);
    const Array v = velocity_target(r.probe.images.images, r.probe.eps);
    auto diff = [&] { return mse(r.student.forward(xt, tv, r.probe.images.labels).velocity, constant(v)); };
    auto neg = [&] { return scale(diff(), -1.0f); };
    auto zero = [&] { r.student.params().zero_grad(); };
    EXPECT_NEAR(gradient_cosine(r.student.params(), "blocks.0.", diff, diff, zero), 1.0, 1e-9);
    EXPECT_NEAR(gradient_cosine(r.student.params(), "blocks.0.", diff, neg, zero), -1.0, 1e-9);
}

TEST(Probe, LeavesTrainingTrajectoryUntouched) {
    auto train = [](bool with_probe) {
        ProbeRig r(5);
        AdamW opt_s(AdamWConfig{1e-3}), opt_p(AdamWConfig{1e-3});
        const ImageBatch data = stack(generate(11, 6));
        Rng rng = Rng(5).split("train");
        for (int step = 0; step < 4; ++step) {
            if (with_probe && step == 2) probe_conflict(r.student, r.proj, r.tout, r.probe, r.cfg, AlignTerm::Hybrid);
            r.student.params().zero_grad();
            r.proj.params().zero_grad();
            const DiffusionBatch b = make_diffusion_batch(data, rng);
            auto out = r.student.forward(b.x_t(), b.t, b.labels);
            Var loss = add(velocity_loss(out.velocity, b.target()), hybrid_loss(out.trace, r.tout, r.proj, r.cfg).total);
            backward(loss);
            opt_s.step(r.student.params());
            opt_p.step(r.proj.params());
        }
        return std::pair{r.student.params().checksum(), r.proj.params().checksum()};
    };
    EXPECT_EQ(train(false), train(true));
}

TEST(Probe, NonFiniteGradientIsTaggedWithT) {
    ProbeRig r(7);
    r.proj.params().at("proj.fc3.w")->value[0] = std::numeric_limits<float>::infinity();
    try {
        probe_conflict(r.student, r.proj, r.tout, r.probe, r.cfg, AlignTerm::Repa);
        FAIL() << "expected NumericError";
    } catch (const NumericError& e) {
        EXPECT_NE(std::string(e.what()).find("t=0.05"), std::string::npos) << e.what();
    }
}

TEST(Probe, RejectsBadConfiguration) {
    EXPECT_THROW(ConflictProbe(stack(generate(1, 2)), 0, {}, 1), ConfigError);
    EXPECT_THROW(ConflictProbe(stack(generate(1, 2)), 0, {0.0}, 1), ConfigError);
    ProbeRig r(2);
    ConflictProbe bad(stack(generate(1, 6)), 9, {0.5}, 1);
    EXPECT_THROW(probe_conflict(r.student, r.proj, r.tout, bad, r.cfg, AlignTerm::Repa), ConfigError);
    EXPECT_THROW(parse_align_term("both"), ConfigError);
    EXPECT_EQ(parse_align_term(to_string(AlignTerm::Atta)), AlignTerm::Atta);
}

}  // namespace
}  // namespace aligndesk
