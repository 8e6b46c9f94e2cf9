// Copyright (c) 2026, The aligndesk Authors
// SPDX-License-Identifier: Apache-2.0
//
// Counter-based random stream. Every draw is a pure function of
// (seed, counter), so a stream can be saved as two integers and children
// derived by label never depend on how much of the parent was consumed.
// The distributions are written out here instead of using <random>'s, whose
// outputs are implementation-defined.

#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <string_view>

namespace aligndesk {

namespace detail {

constexpr std::uint64_t kGolden = 0x9E3779B97F4A7C15ULL;

constexpr std::uint64_t mix64(std::uint64_t z) {
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

constexpr std::uint64_t fnv1a(std::string_view s) {
    std::uint64_t h = 0xCBF29CE484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001B3ULL;
    }
    return h;
}

}  // namespace detail

class Rng {
public:
    constexpr explicit Rng(std::uint64_t seed = 0, std::uint64_t counter = 0)
        : seed_(seed), counter_(counter) {}

    constexpr std::uint64_t seed() const noexcept { return seed_; }
    constexpr std::uint64_t counter() const noexcept { return counter_; }

    /// Child stream keyed by label; independent of this stream's counter.
    constexpr Rng split(std::string_view label) const {
        return Rng(detail::mix64(seed_ ^ detail::mix64(detail::fnv1a(label))));
    }

    constexpr Rng split(std::string_view label, std::uint64_t index) const {
        Rng child = split(label);
        return Rng(detail::mix64(child.seed_ + (index + 1) * detail::kGolden));
    }

    constexpr std::uint64_t next_u64() {
        ++counter_;
        return detail::mix64(seed_ + counter_ * detail::kGolden);
    }

    /// Uniform on [0, 1) with 53 bits.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    /// Uniform on (0, 1], safe as a log argument.
    double uniform_open_low() { return 1.0 - uniform(); }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// Integer in [0, n).
    std::uint64_t below(std::uint64_t n) {
        // Lemire's multiply-shift; bias below 2^-64 * n is irrelevant here.
        return static_cast<std::uint64_t>(
            (static_cast<unsigned __int128>(next_u64()) * n) >> 64);
    }

    /// Standard normal via Box-Muller; consumes two draws, uses one.
    double normal() {
        const double u1 = uniform_open_low();
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) *
               std::cos(2.0 * std::numbers::pi * u2);
    }

    friend constexpr bool operator==(const Rng&, const Rng&) = default;

private:
    std::uint64_t seed_;
    std::uint64_t counter_;
};

}  // namespace aligndesk
