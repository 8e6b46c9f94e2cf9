// Copyright (c) 2026, The aligndesk Authors
// SPDX-License-Identifier: Apache-2.0
//
// Central-difference gradient verification against backward().

#pragma once

#include <algorithm>
#include <cmath>
#include <functional>

#include "aligndesk/errors.hpp"
#include "aligndesk/ndgrad/array.hpp"
#include "aligndesk/ndgrad/node.hpp"
#include "aligndesk/ndgrad/params.hpp"

namespace aligndesk {

namespace detail {

template <class T>
T fd_relative_error(T ad, T fd) {
    return std::abs(ad - fd) / std::max(T(1e-4), std::abs(fd));
}

template <class T>
T eval_scalar(const std::function<VarT<T>()>& f) {
    NoGradGuard guard;
    const T v = f()->value.item();
    if (!std::isfinite(v)) throw NumericError("finite_diff_check: f returned non-finite value");
    return v;
}

}  // namespace detail

/// Max over elements of |g_ad - g_fd| / max(1e-4, |g_fd|) for a scalar
/// function of one array.
template <class T>
T finite_diff_check(const std::function<VarT<T>(const VarT<T>&)>& f,
                    const BasicArray<T>& x, T h = T(1e-3)) {
    if (!(h > T(0))) throw DomainError("finite_diff_check: h must be positive");
    auto leaf = parameter(x);
    auto root = f(leaf);
    if (!std::isfinite(root->value.item())) {
        throw NumericError("finite_diff_check: f returned non-finite value");
    }
    backward(root);
    const BasicArray<T> g_ad = leaf->adjoint_or_zero();

    T worst = 0;
    BasicArray<T> probe = x;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const T orig = probe[i];
        probe[i] = orig + h;
        const T fp = detail::eval_scalar<T>([&] { return f(constant(probe)); });
        probe[i] = orig - h;
        const T fm = detail::eval_scalar<T>([&] { return f(constant(probe)); });
        probe[i] = orig;
        worst = std::max(worst, detail::fd_relative_error(g_ad[i], (fp - fm) / (T(2) * h)));
    }
    return worst;
}

/// Same measure over every entry of every tensor in a parameter set; `loss`
/// rebuilds the scalar from the set's current values.
template <class T>
T finite_diff_check(const std::function<VarT<T>()>& loss, BasicParamSet<T>& params,
                    T h = T(1e-3)) {
    if (!(h > T(0))) throw DomainError("finite_diff_check: h must be positive");
    params.zero_grad();
    auto root = loss();
    backward(root);
    T worst = 0;
    for (const auto& [name, p] : params) {
        const BasicArray<T> g_ad = p->adjoint_or_zero();
        for (std::size_t i = 0; i < p->value.size(); ++i) {
            const T orig = p->value[i];
            p->value[i] = orig + h;
            const T fp = detail::eval_scalar<T>(loss);
            p->value[i] = orig - h;
            const T fm = detail::eval_scalar<T>(loss);
            p->value[i] = orig;
            worst = std::max(worst, detail::fd_relative_error(g_ad[i], (fp - fm) / (T(2) * h)));
        }
    }
    params.zero_grad();
    return worst;
}

}  // namespace aligndesk
