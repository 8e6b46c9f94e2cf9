// Copyright (c) 2026, The aligndesk Authors
// SPDX-License-Identifier: Apache-2.0
//
// Differentiable operations. Broadcasting is limited to one rule: the second
// operand of a binary op may have a shape that is a suffix of the first's
// (bias vectors, shared weight matrices). Everything else must match exactly.

#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <string>
#include <vector>

#include "aligndesk/errors.hpp"
#include "aligndesk/ndgrad/array.hpp"
#include "aligndesk/ndgrad/node.hpp"

namespace aligndesk {

namespace detail {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MatMap = Eigen::Map<RowMat<T>>;
template <class T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

inline bool is_suffix(const Shape& suffix, const Shape& full) {
    if (suffix.size() > full.size()) return false;
    return std::equal(suffix.rbegin(), suffix.rend(), full.rbegin());
}

inline void require_same(const Shape& a, const Shape& b, const char* op) {
    if (a != b) {
        throw ShapeError(std::string(op) + ": shape mismatch " + to_string(a) +
                         " vs " + to_string(b));
    }
}

inline void require_suffix(const Shape& b, const Shape& a, const char* op) {
    if (!is_suffix(b, a)) {
        throw ShapeError(std::string(op) + ": " + to_string(b) +
                         " does not broadcast onto " + to_string(a));
    }
}

inline std::size_t last_dim(const Shape& s, const char* op) {
    if (s.empty()) throw ShapeError(std::string(op) + ": rank-0 input");
    return s.back();
}

}  // namespace detail

// ---------------------------------------------------------------- linear algebra

/// Matrix product over the last two axes. `b` is either rank 2 (shared across
/// a's leading axes) or has exactly a's leading axes.
template <class T>
VarT<T> matmul(const VarT<T>& a, const VarT<T>& b) {
    using detail::ConstMatMap;
    using detail::MatMap;
    const Shape& as = a->shape();
    const Shape& bs = b->shape();
    if (as.size() < 2 || bs.size() < 2) {
        throw ShapeError("matmul: operands must have rank >= 2, got " + to_string(as) +
                         " and " + to_string(bs));
    }
    const std::size_t k = as.back();
    const std::size_t m = as[as.size() - 2];
    const std::size_t n = bs.back();
    if (bs[bs.size() - 2] != k) {
        throw ShapeError("matmul: inner extents differ " + to_string(as) + " x " +
                         to_string(bs));
    }
    Shape out_shape = as;
    out_shape.back() = n;

    if (bs.size() == 2) {
        const auto rows = static_cast<Eigen::Index>(a->value.size() / k);
        const auto K = static_cast<Eigen::Index>(k);
        const auto N = static_cast<Eigen::Index>(n);
        BasicArray<T> out(out_shape);
        MatMap<T>(out.data(), rows, N).noalias() =
            ConstMatMap<T>(a->value.data(), rows, K) * ConstMatMap<T>(b->value.data(), K, N);
        return make_result<T>(std::move(out), {a, b}, [a, b, rows, K, N](Node<T>& self) {
            ConstMatMap<T> g(self.adjoint().data(), rows, N);
            if (a->requires_grad) {
                MatMap<T>(a->adjoint().data(), rows, K).noalias() +=
                    g * ConstMatMap<T>(b->value.data(), K, N).transpose();
            }
            if (b->requires_grad) {
                MatMap<T>(b->adjoint().data(), K, N).noalias() +=
                    ConstMatMap<T>(a->value.data(), rows, K).transpose() * g;
            }
        }, "matmul");
    }

    if (as.size() != bs.size() ||
        !std::equal(as.begin(), as.end() - 2, bs.begin())) {
        throw ShapeError("matmul: leading extents differ " + to_string(as) + " x " +
                         to_string(bs));
    }
    const std::size_t batch = a->value.size() / (m * k);
    const auto M = static_cast<Eigen::Index>(m);
    const auto K = static_cast<Eigen::Index>(k);
    const auto N = static_cast<Eigen::Index>(n);
    BasicArray<T> out(out_shape);
    for (std::size_t i = 0; i < batch; ++i) {
        MatMap<T>(out.data() + i * m * n, M, N).noalias() =
            ConstMatMap<T>(a->value.data() + i * m * k, M, K) *
            ConstMatMap<T>(b->value.data() + i * k * n, K, N);
    }
    return make_result<T>(std::move(out), {a, b}, [a, b, batch, M, K, N](Node<T>& self) {
        const T* g = self.adjoint().data();
        const auto mn = static_cast<std::size_t>(M * N);
        const auto mk = static_cast<std::size_t>(M * K);
        const auto kn = static_cast<std::size_t>(K * N);
        for (std::size_t i = 0; i < batch; ++i) {
            ConstMatMap<T> gi(g + i * mn, M, N);
            if (a->requires_grad) {
                MatMap<T>(a->adjoint().data() + i * mk, M, K).noalias() +=
                    gi * ConstMatMap<T>(b->value.data() + i * kn, K, N).transpose();
            }
            if (b->requires_grad) {
                MatMap<T>(b->adjoint().data() + i * kn, K, N).noalias() +=
                    ConstMatMap<T>(a->value.data() + i * mk, M, K).transpose() * gi;
            }
        }
    }, "matmul");
}

// ---------------------------------------------------------------- elementwise

namespace detail {

// out[o * nb + i] op= b[i] for every block o.
template <class T, class F>
void for_each_block(std::size_t total, std::size_t nb, F&& f) {
    for (std::size_t o = 0; o < total; o += nb) f(o);
}

}  // namespace detail

template <class T>
VarT<T> add(const VarT<T>& a, const VarT<T>& b) {
    detail::require_suffix(b->shape(), a->shape(), "add");
    const std::size_t nb = b->value.size();
    BasicArray<T> out = a->value;
    T* y = out.data();
    const T* bv = b->value.data();
    detail::for_each_block<T>(out.size(), nb, [&](std::size_t o) {
        for (std::size_t i = 0; i < nb; ++i) y[o + i] += bv[i];
    });
    return make_result<T>(std::move(out), {a, b}, [a, b, nb](Node<T>& self) {
        const T* g = self.adjoint().data();
        const std::size_t n = self.value.size();
        if (a->requires_grad) {
            T* ga = a->adjoint().data();
            for (std::size_t i = 0; i < n; ++i) ga[i] += g[i];
        }
        if (b->requires_grad) {
            T* gb = b->adjoint().data();
            detail::for_each_block<T>(n, nb, [&](std::size_t o) {
                for (std::size_t i = 0; i < nb; ++i) gb[i] += g[o + i];
            });
        }
    }, "add");
}

template <class T>
VarT<T> sub(const VarT<T>& a, const VarT<T>& b) {
    detail::require_suffix(b->shape(), a->shape(), "sub");
    const std::size_t nb = b->value.size();
    BasicArray<T> out = a->value;
    T* y = out.data();
    const T* bv = b->value.data();
    detail::for_each_block<T>(out.size(), nb, [&](std::size_t o) {
        for (std::size_t i = 0; i < nb; ++i) y[o + i] -= bv[i];
    });
    return make_result<T>(std::move(out), {a, b}, [a, b, nb](Node<T>& self) {
        const T* g = self.adjoint().data();
        const std::size_t n = self.value.size();
        if (a->requires_grad) {
            T* ga = a->adjoint().data();
            for (std::size_t i = 0; i < n; ++i) ga[i] += g[i];
        }
        if (b->requires_grad) {
            T* gb = b->adjoint().data();
            detail::for_each_block<T>(n, nb, [&](std::size_t o) {
                for (std::size_t i = 0; i < nb; ++i) gb[i] -= g[o + i];
            });
        }
    }, "sub");
}

template <class T>
VarT<T> mul(const VarT<T>& a, const VarT<T>& b) {
    detail::require_suffix(b->shape(), a->shape(), "mul");
    const std::size_t nb = b->value.size();
    BasicArray<T> out = a->value;
    T* y = out.data();
    const T* bv = b->value.data();
    detail::for_each_block<T>(out.size(), nb, [&](std::size_t o) {
        for (std::size_t i = 0; i < nb; ++i) y[o + i] *= bv[i];
    });
    return make_result<T>(std::move(out), {a, b}, [a, b, nb](Node<T>& self) {
        const T* g = self.adjoint().data();
        const std::size_t n = self.value.size();
        const T* av = a->value.data();
        const T* bv = b->value.data();
        if (a->requires_grad) {
            T* ga = a->adjoint().data();
            detail::for_each_block<T>(n, nb, [&](std::size_t o) {
                for (std::size_t i = 0; i < nb; ++i) ga[o + i] += g[o + i] * bv[i];
            });
        }
        if (b->requires_grad) {
            T* gb = b->adjoint().data();
            detail::for_each_block<T>(n, nb, [&](std::size_t o) {
                for (std::size_t i = 0; i < nb; ++i) gb[i] += g[o + i] * av[o + i];
            });
        }
    }, "mul");
}

template <class T>
VarT<T> scale(const VarT<T>& a, T c) {
    BasicArray<T> out = a->value;
    for (auto& v : out.span()) v *= c;
    return make_result<T>(std::move(out), {a}, [a, c](Node<T>& self) {
        const auto& g = self.adjoint();
        auto& ga = a->adjoint();
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += c * g[i];
    }, "scale");
}

template <class T>
VarT<T> add_scalar(const VarT<T>& a, T c) {
    BasicArray<T> out = a->value;
    for (auto& v : out.span()) v += c;
    return make_result<T>(std::move(out), {a}, [a](Node<T>& self) {
        const auto& g = self.adjoint();
        auto& ga = a->adjoint();
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }, "add_scalar");
}

template <class T>
VarT<T> square(const VarT<T>& a) {
    BasicArray<T> out = a->value;
    for (auto& v : out.span()) v *= v;
    return make_result<T>(std::move(out), {a}, [a](Node<T>& self) {
        const auto& g = self.adjoint();
        auto& ga = a->adjoint();
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += T(2) * a->value[i] * g[i];
    }, "square");
}

template <class T>
VarT<T> silu(const VarT<T>& a) {
    BasicArray<T> out(a->shape());
    std::vector<T> sig(out.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        const T x = a->value[i];
        sig[i] = T(1) / (T(1) + std::exp(-x));
        out[i] = x * sig[i];
    }
    return make_result<T>(std::move(out), {a}, [a, sig = std::move(sig)](Node<T>& self) {
        const auto& g = self.adjoint();
        auto& ga = a->adjoint();
        for (std::size_t i = 0; i < g.size(); ++i) {
            const T x = a->value[i];
            ga[i] += g[i] * sig[i] * (T(1) + x * (T(1) - sig[i]));
        }
    }, "silu");
}

// ---------------------------------------------------------------- last-axis ops

/// Max-subtracted softmax over the last axis.
template <class T>
VarT<T> softmax_lastdim(const VarT<T>& a) {
    const std::size_t n = detail::last_dim(a->shape(), "softmax_lastdim");
    if (n == 0) throw ShapeError("softmax_lastdim: empty last axis");
    const std::size_t rows = a->value.size() / n;
    BasicArray<T> out(a->shape());
    for (std::size_t r = 0; r < rows; ++r) {
        const T* x = a->value.data() + r * n;
        T* y = out.data() + r * n;
        const T mx = *std::max_element(x, x + n);
        T s = 0;
        for (std::size_t j = 0; j < n; ++j) {
            y[j] = std::exp(x[j] - mx);
            s += y[j];
        }
        const T inv = T(1) / s;
        for (std::size_t j = 0; j < n; ++j) y[j] *= inv;
    }
    return make_result<T>(std::move(out), {a}, [a, n, rows](Node<T>& self) {
        const T* g = self.adjoint().data();
        const T* y = self.value.data();
        T* ga = a->adjoint().data();
        for (std::size_t r = 0; r < rows; ++r) {
            T dot = 0;
            for (std::size_t j = 0; j < n; ++j) dot += g[r * n + j] * y[r * n + j];
            for (std::size_t j = 0; j < n; ++j) {
                ga[r * n + j] += y[r * n + j] * (g[r * n + j] - dot);
            }
        }
    }, "softmax_lastdim");
}

/// Normalizes the last axis to zero mean and unit variance (no affine part).
template <class T>
VarT<T> layer_norm(const VarT<T>& a, T eps = T(1e-6)) {
    const std::size_t n = detail::last_dim(a->shape(), "layer_norm");
    const std::size_t rows = a->value.size() / n;
    BasicArray<T> out(a->shape());
    std::vector<T> inv_std(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        const T* x = a->value.data() + r * n;
        T mean = 0;
        for (std::size_t j = 0; j < n; ++j) mean += x[j];
        mean /= static_cast<T>(n);
        T var = 0;
        for (std::size_t j = 0; j < n; ++j) var += (x[j] - mean) * (x[j] - mean);
        var /= static_cast<T>(n);
        const T is = T(1) / std::sqrt(var + eps);
        inv_std[r] = is;
        for (std::size_t j = 0; j < n; ++j) out[r * n + j] = (x[j] - mean) * is;
    }
    return make_result<T>(std::move(out), {a},
                          [a, n, rows, inv_std = std::move(inv_std)](Node<T>& self) {
        const T* g = self.adjoint().data();
        const T* y = self.value.data();
        T* ga = a->adjoint().data();
        const T inv_n = T(1) / static_cast<T>(n);
        for (std::size_t r = 0; r < rows; ++r) {
            T gm = 0, gy = 0;
            for (std::size_t j = 0; j < n; ++j) {
                gm += g[r * n + j];
                gy += g[r * n + j] * y[r * n + j];
            }
            gm *= inv_n;
            gy *= inv_n;
            for (std::size_t j = 0; j < n; ++j) {
                ga[r * n + j] += inv_std[r] * (g[r * n + j] - gm - y[r * n + j] * gy);
            }
        }
    }, "layer_norm");
}

/// Cosine similarity over the last axis; each norm is clamped below by eps.
template <class T>
VarT<T> cosine_sim_lastdim(const VarT<T>& a, const VarT<T>& b, T eps = T(1e-8)) {
    detail::require_same(a->shape(), b->shape(), "cosine_sim_lastdim");
    const std::size_t d = detail::last_dim(a->shape(), "cosine_sim_lastdim");
    const std::size_t rows = a->value.size() / d;
    Shape out_shape(a->shape().begin(), a->shape().end() - 1);
    BasicArray<T> out(out_shape);
    std::vector<T> na(rows), nb(rows), ra(rows), rb(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        const T* x = a->value.data() + r * d;
        const T* y = b->value.data() + r * d;
        T xx = 0, yy = 0, xy = 0;
        for (std::size_t j = 0; j < d; ++j) {
            xx += x[j] * x[j];
            yy += y[j] * y[j];
            xy += x[j] * y[j];
        }
        ra[r] = std::sqrt(xx);
        rb[r] = std::sqrt(yy);
        na[r] = std::max(ra[r], eps);
        nb[r] = std::max(rb[r], eps);
        out[r] = std::clamp(xy / (na[r] * nb[r]), T(-1), T(1));
    }
    return make_result<T>(std::move(out), {a, b},
                          [a, b, d, rows, na = std::move(na), nb = std::move(nb),
                           ra = std::move(ra), rb = std::move(rb), eps](Node<T>& self) {
        const T* g = self.adjoint().data();
        const T* c = self.value.data();
        for (std::size_t r = 0; r < rows; ++r) {
            const T* x = a->value.data() + r * d;
            const T* y = b->value.data() + r * d;
            const T inv = T(1) / (na[r] * nb[r]);
            if (a->requires_grad) {
                T* gx = a->adjoint().data() + r * d;
                const T corr = ra[r] > eps ? c[r] / (na[r] * na[r]) : T(0);
                for (std::size_t j = 0; j < d; ++j) gx[j] += g[r] * (y[j] * inv - corr * x[j]);
            }
            if (b->requires_grad) {
                T* gy = b->adjoint().data() + r * d;
                const T corr = rb[r] > eps ? c[r] / (nb[r] * nb[r]) : T(0);
                for (std::size_t j = 0; j < d; ++j) gy[j] += g[r] * (x[j] * inv - corr * y[j]);
            }
        }
    }, "cosine_sim_lastdim");
}

/// Row-wise cross-entropy -sum_j p_j log max(q_j, clamp) of prediction rows
/// against fixed target rows; reduces the last axis.
template <class T>
VarT<T> row_cross_entropy(const BasicArray<T>& target, const VarT<T>& pred,
                          T clamp = T(1e-12)) {
    detail::require_same(target.shape(), pred->shape(), "row_cross_entropy");
    const std::size_t n = detail::last_dim(pred->shape(), "row_cross_entropy");
    const std::size_t rows = pred->value.size() / n;
    Shape out_shape(pred->shape().begin(), pred->shape().end() - 1);
    BasicArray<T> out(out_shape);
    for (std::size_t r = 0; r < rows; ++r) {
        T h = 0;
        for (std::size_t j = 0; j < n; ++j) {
            const T p = target[r * n + j];
            if (p != T(0)) h -= p * std::log(std::max(pred->value[r * n + j], clamp));
        }
        out[r] = h;
    }
    return make_result<T>(std::move(out), {pred}, [target, pred, n, rows, clamp](Node<T>& self) {
        const T* g = self.adjoint().data();
        T* gq = pred->adjoint().data();
        for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t j = 0; j < n; ++j) {
                const T q = pred->value[r * n + j];
                if (q > clamp) gq[r * n + j] -= g[r] * target[r * n + j] / q;
            }
        }
    }, "row_cross_entropy");
}

// ---------------------------------------------------------------- reductions

template <class T>
VarT<T> sum(const VarT<T>& a) {
    T s = 0;
    for (T v : a->value.span()) s += v;
    return make_result<T>(BasicArray<T>::scalar(s), {a}, [a](Node<T>& self) {
        const T g = self.adjoint()[0];
        for (auto& v : a->adjoint().span()) v += g;
    }, "sum");
}

template <class T>
VarT<T> mean(const VarT<T>& a) {
    if (a->value.size() == 0) throw ShapeError("mean of empty array");
    const T inv = T(1) / static_cast<T>(a->value.size());
    T s = 0;
    for (T v : a->value.span()) s += v;
    return make_result<T>(BasicArray<T>::scalar(s * inv), {a}, [a, inv](Node<T>& self) {
        const T g = self.adjoint()[0] * inv;
        for (auto& v : a->adjoint().span()) v += g;
    }, "mean");
}

/// Mean over one axis, which is removed from the shape.
template <class T>
VarT<T> mean_axis(const VarT<T>& a, std::size_t axis) {
    const Shape& s = a->shape();
    if (axis >= s.size()) throw ShapeError("mean_axis: axis out of range");
    const std::size_t outer = numel(Shape(s.begin(), s.begin() + axis));
    const std::size_t mid = s[axis];
    const std::size_t inner = numel(Shape(s.begin() + axis + 1, s.end()));
    Shape out_shape = s;
    out_shape.erase(out_shape.begin() + axis);
    BasicArray<T> out(out_shape);
    const T inv = T(1) / static_cast<T>(mid);
    for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t m = 0; m < mid; ++m)
            for (std::size_t i = 0; i < inner; ++i)
                out[o * inner + i] += a->value[(o * mid + m) * inner + i] * inv;
    return make_result<T>(std::move(out), {a}, [a, outer, mid, inner, inv](Node<T>& self) {
        const auto& g = self.adjoint();
        auto& ga = a->adjoint();
        for (std::size_t o = 0; o < outer; ++o)
            for (std::size_t m = 0; m < mid; ++m)
                for (std::size_t i = 0; i < inner; ++i)
                    ga[(o * mid + m) * inner + i] += g[o * inner + i] * inv;
    }, "mean_axis");
}

// ---------------------------------------------------------------- layout

template <class T>
VarT<T> reshape(const VarT<T>& a, Shape shape) {
    BasicArray<T> out = a->value.reshaped(std::move(shape));
    return make_result<T>(std::move(out), {a}, [a](Node<T>& self) {
        const auto& g = self.adjoint();
        auto& ga = a->adjoint();
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }, "reshape");
}

/// General axis permutation: out axis i is input axis perm[i].
template <class T>
VarT<T> permute(const VarT<T>& a, const std::vector<std::size_t>& perm) {
    const Shape& s = a->shape();
    const std::size_t r = s.size();
    if (perm.size() != r) throw ShapeError("permute: wrong permutation length");
    std::vector<bool> used(r, false);
    for (std::size_t p : perm) {
        if (p >= r || used[p]) throw ShapeError("permute: invalid permutation");
        used[p] = true;
    }
    Shape out_shape(r);
    for (std::size_t i = 0; i < r; ++i) out_shape[i] = s[perm[i]];
    std::vector<std::size_t> in_stride(r, 1);
    for (std::size_t i = r; i-- > 1;) in_stride[i - 1] = in_stride[i] * s[i];
    // src[k] = offset in input of the k-th output element.
    const std::size_t total = a->value.size();
    std::vector<std::size_t> src(total);
    std::vector<std::size_t> idx(r, 0);
    for (std::size_t k = 0; k < total; ++k) {
        std::size_t off = 0;
        for (std::size_t i = 0; i < r; ++i) off += idx[i] * in_stride[perm[i]];
        src[k] = off;
        for (std::size_t i = r; i-- > 0;) {
            if (++idx[i] < out_shape[i]) break;
            idx[i] = 0;
        }
    }
    BasicArray<T> out(out_shape);
    for (std::size_t k = 0; k < total; ++k) out[k] = a->value[src[k]];
    return make_result<T>(std::move(out), {a}, [a, src = std::move(src)](Node<T>& self) {
        const auto& g = self.adjoint();
        auto& ga = a->adjoint();
        for (std::size_t k = 0; k < g.size(); ++k) ga[src[k]] += g[k];
    }, "permute");
}

template <class T>
VarT<T> transpose_last2(const VarT<T>& a) {
    const std::size_t r = a->shape().size();
    if (r < 2) throw ShapeError("transpose_last2: rank < 2");
    std::vector<std::size_t> perm(r);
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    std::swap(perm[r - 1], perm[r - 2]);
    return permute(a, perm);
}

/// Contiguous range [start, start+len) along one axis.
template <class T>
VarT<T> slice_axis(const VarT<T>& a, std::size_t axis, std::size_t start, std::size_t len) {
    const Shape& s = a->shape();
    if (axis >= s.size() || start + len > s[axis]) {
        throw ShapeError("slice_axis: range out of bounds for " + to_string(s));
    }
    const std::size_t outer = numel(Shape(s.begin(), s.begin() + axis));
    const std::size_t mid = s[axis];
    const std::size_t inner = numel(Shape(s.begin() + axis + 1, s.end()));
    Shape out_shape = s;
    out_shape[axis] = len;
    BasicArray<T> out(out_shape);
    for (std::size_t o = 0; o < outer; ++o) {
        std::copy_n(a->value.data() + (o * mid + start) * inner, len * inner,
                    out.data() + o * len * inner);
    }
    return make_result<T>(std::move(out), {a},
                          [a, outer, mid, inner, start, len](Node<T>& self) {
        const auto& g = self.adjoint();
        auto& ga = a->adjoint();
        for (std::size_t o = 0; o < outer; ++o)
            for (std::size_t i = 0; i < len * inner; ++i)
                ga[(o * mid + start) * inner + i] += g[o * len * inner + i];
    }, "slice_axis");
}

template <class T>
VarT<T> slice_lastdim(const VarT<T>& a, std::size_t start, std::size_t len) {
    return slice_axis(a, a->shape().size() - 1, start, len);
}

/// Inserts a new axis of extent n at `axis`, repeating the input along it.
template <class T>
VarT<T> repeat_axis(const VarT<T>& a, std::size_t axis, std::size_t n) {
    const Shape& s = a->shape();
    if (axis > s.size()) throw ShapeError("repeat_axis: axis out of range");
    const std::size_t outer = numel(Shape(s.begin(), s.begin() + axis));
    const std::size_t inner = numel(Shape(s.begin() + axis, s.end()));
    Shape out_shape = s;
    out_shape.insert(out_shape.begin() + axis, n);
    BasicArray<T> out(out_shape);
    for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t m = 0; m < n; ++m)
            std::copy_n(a->value.data() + o * inner, inner, out.data() + (o * n + m) * inner);
    return make_result<T>(std::move(out), {a}, [a, outer, inner, n](Node<T>& self) {
        const auto& g = self.adjoint();
        auto& ga = a->adjoint();
        for (std::size_t o = 0; o < outer; ++o)
            for (std::size_t m = 0; m < n; ++m)
                for (std::size_t i = 0; i < inner; ++i)
                    ga[o * inner + i] += g[(o * n + m) * inner + i];
    }, "repeat_axis");
}

/// Row lookup into a rank-2 table: out[i] = table[indices[i]].
template <class T>
VarT<T> gather(const VarT<T>& table, const std::vector<std::size_t>& indices) {
    const Shape& s = table->shape();
    if (s.size() != 2) throw ShapeError("gather: table must be rank 2");
    const std::size_t d = s[1];
    BasicArray<T> out(Shape{indices.size(), d});
    for (std::size_t i = 0; i < indices.size(); ++i) {
        if (indices[i] >= s[0]) throw ShapeError("gather: index out of range");
        std::copy_n(table->value.data() + indices[i] * d, d, out.data() + i * d);
    }
    return make_result<T>(std::move(out), {table}, [table, indices, d](Node<T>& self) {
        const auto& g = self.adjoint();
        auto& gt = table->adjoint();
        for (std::size_t i = 0; i < indices.size(); ++i)
            for (std::size_t j = 0; j < d; ++j) gt[indices[i] * d + j] += g[i * d + j];
    }, "gather");
}

// ---------------------------------------------------------------- token ops
// Fused forms of patterns the transformers use on [B, N, d] activations with
// per-sample [B, d] conditioning vectors.

namespace detail {

inline void require_tokens(const Shape& x, const Shape& v, const char* op) {
    if (x.size() != 3 || v.size() != 2 || v[0] != x[0] || v[1] != x[2]) {
        throw ShapeError(std::string(op) + ": expected [B,N,d] and [B,d], got " + to_string(x) +
                         " and " + to_string(v));
    }
}

}  // namespace detail

/// x * (1 + scale[b]) + shift[b].
template <class T>
VarT<T> modulate(const VarT<T>& x, const VarT<T>& shift, const VarT<T>& scale) {
    detail::require_tokens(x->shape(), shift->shape(), "modulate");
    detail::require_same(shift->shape(), scale->shape(), "modulate");
    const std::size_t B = x->shape()[0], N = x->shape()[1], d = x->shape()[2];
    BasicArray<T> out(x->shape());
    for (std::size_t b = 0; b < B; ++b) {
        const T* sh = shift->value.data() + b * d;
        const T* sc = scale->value.data() + b * d;
        for (std::size_t n = 0; n < N; ++n) {
            const T* xi = x->value.data() + (b * N + n) * d;
            T* yi = out.data() + (b * N + n) * d;
            for (std::size_t j = 0; j < d; ++j) yi[j] = xi[j] * (T(1) + sc[j]) + sh[j];
        }
    }
    return make_result<T>(std::move(out), {x, shift, scale}, [x, shift, scale, B, N, d](Node<T>& self) {
        const T* g = self.adjoint().data();
        T* gx = x->requires_grad ? x->adjoint().data() : nullptr;
        T* gsh = shift->requires_grad ? shift->adjoint().data() : nullptr;
        T* gsc = scale->requires_grad ? scale->adjoint().data() : nullptr;
        for (std::size_t b = 0; b < B; ++b) {
            const T* sc = scale->value.data() + b * d;
            for (std::size_t n = 0; n < N; ++n) {
                const std::size_t o = (b * N + n) * d;
                const T* xi = x->value.data() + o;
                for (std::size_t j = 0; j < d; ++j) {
                    if (gx) gx[o + j] += g[o + j] * (T(1) + sc[j]);
                    if (gsh) gsh[b * d + j] += g[o + j];
                    if (gsc) gsc[b * d + j] += g[o + j] * xi[j];
                }
            }
        }
    }, "modulate");
}

/// h + y * gate[b].
template <class T>
VarT<T> gated_add(const VarT<T>& h, const VarT<T>& y, const VarT<T>& gate) {
    detail::require_same(h->shape(), y->shape(), "gated_add");
    detail::require_tokens(h->shape(), gate->shape(), "gated_add");
    const std::size_t B = h->shape()[0], N = h->shape()[1], d = h->shape()[2];
    BasicArray<T> out = h->value;
    for (std::size_t b = 0; b < B; ++b) {
        const T* gt = gate->value.data() + b * d;
        for (std::size_t n = 0; n < N; ++n) {
            const std::size_t o = (b * N + n) * d;
            for (std::size_t j = 0; j < d; ++j) out[o + j] += y->value[o + j] * gt[j];
        }
    }
    return make_result<T>(std::move(out), {h, y, gate}, [h, y, gate, B, N, d](Node<T>& self) {
        const T* g = self.adjoint().data();
        if (h->requires_grad) {
            T* gh = h->adjoint().data();
            for (std::size_t i = 0; i < B * N * d; ++i) gh[i] += g[i];
        }
        T* gy = y->requires_grad ? y->adjoint().data() : nullptr;
        T* gg = gate->requires_grad ? gate->adjoint().data() : nullptr;
        for (std::size_t b = 0; b < B; ++b) {
            const T* gt = gate->value.data() + b * d;
            for (std::size_t n = 0; n < N; ++n) {
                const std::size_t o = (b * N + n) * d;
                for (std::size_t j = 0; j < d; ++j) {
                    if (gy) gy[o + j] += g[o + j] * gt[j];
                    if (gg) gg[b * d + j] += g[o + j] * y->value[o + j];
                }
            }
        }
    }, "gated_add");
}

/// [B, N, M*dh] -> [B, M, N, dh].
template <class T>
VarT<T> split_heads(const VarT<T>& x, std::size_t heads) {
    const Shape& s = x->shape();
    if (s.size() != 3 || heads == 0 || s[2] % heads != 0) {
        throw ShapeError("split_heads: expected [B,N,d] with d divisible by heads, got " + to_string(s));
    }
    const std::size_t B = s[0], N = s[1], M = heads, dh = s[2] / heads;
    BasicArray<T> out(Shape{B, M, N, dh});
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t n = 0; n < N; ++n)
            for (std::size_t m = 0; m < M; ++m)
                std::copy_n(x->value.data() + ((b * N + n) * M + m) * dh, dh,
                            out.data() + ((b * M + m) * N + n) * dh);
    return make_result<T>(std::move(out), {x}, [x, B, N, M, dh](Node<T>& self) {
        const T* g = self.adjoint().data();
        T* gx = x->adjoint().data();
        for (std::size_t b = 0; b < B; ++b)
            for (std::size_t n = 0; n < N; ++n)
                for (std::size_t m = 0; m < M; ++m) {
                    const T* src = g + ((b * M + m) * N + n) * dh;
                    T* dst = gx + ((b * N + n) * M + m) * dh;
                    for (std::size_t j = 0; j < dh; ++j) dst[j] += src[j];
                }
    }, "split_heads");
}

/// [B, M, N, dh] -> [B, N, M*dh].
template <class T>
VarT<T> merge_heads(const VarT<T>& x) {
    const Shape& s = x->shape();
    if (s.size() != 4) throw ShapeError("merge_heads: expected [B,M,N,dh], got " + to_string(s));
    const std::size_t B = s[0], M = s[1], N = s[2], dh = s[3];
    BasicArray<T> out(Shape{B, N, M * dh});
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t m = 0; m < M; ++m)
            for (std::size_t n = 0; n < N; ++n)
                std::copy_n(x->value.data() + ((b * M + m) * N + n) * dh, dh,
                            out.data() + ((b * N + n) * M + m) * dh);
    return make_result<T>(std::move(out), {x}, [x, B, N, M, dh](Node<T>& self) {
        const T* g = self.adjoint().data();
        T* gx = x->adjoint().data();
        for (std::size_t b = 0; b < B; ++b)
            for (std::size_t m = 0; m < M; ++m)
                for (std::size_t n = 0; n < N; ++n) {
                    const T* src = g + ((b * N + n) * M + m) * dh;
                    T* dst = gx + ((b * M + m) * N + n) * dh;
                    for (std::size_t j = 0; j < dh; ++j) dst[j] += src[j];
                }
    }, "merge_heads");
}

// ---------------------------------------------------------------- composites

/// x @ w + b for x[..., in], w[in, out], b[out], as one node.
template <class T>
VarT<T> linear(const VarT<T>& x, const VarT<T>& w, const VarT<T>& b) {
    using detail::ConstMatMap;
    using detail::MatMap;
    const Shape& xs = x->shape();
    const Shape& ws = w->shape();
    if (xs.empty() || ws.size() != 2 || ws[0] != xs.back() || b->shape() != Shape{ws[1]}) {
        throw ShapeError("linear: incompatible shapes " + to_string(xs) + ", " + to_string(ws) +
                         ", " + to_string(b->shape()));
    }
    const auto rows = static_cast<Eigen::Index>(x->value.size() / ws[0]);
    const auto K = static_cast<Eigen::Index>(ws[0]);
    const auto N = static_cast<Eigen::Index>(ws[1]);
    Shape out_shape = xs;
    out_shape.back() = ws[1];
    BasicArray<T> out(out_shape);
    MatMap<T> y(out.data(), rows, N);
    y.noalias() = ConstMatMap<T>(x->value.data(), rows, K) * ConstMatMap<T>(w->value.data(), K, N);
    y.rowwise() += Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>>(b->value.data(), N);
    return make_result<T>(std::move(out), {x, w, b}, [x, w, b, rows, K, N](Node<T>& self) {
        ConstMatMap<T> g(self.adjoint().data(), rows, N);
        if (x->requires_grad) {
            MatMap<T>(x->adjoint().data(), rows, K).noalias() +=
                g * ConstMatMap<T>(w->value.data(), K, N).transpose();
        }
        if (w->requires_grad) {
            MatMap<T>(w->adjoint().data(), K, N).noalias() +=
                ConstMatMap<T>(x->value.data(), rows, K).transpose() * g;
        }
        if (b->requires_grad) {
            Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>>(b->adjoint().data(), N) += g.colwise().sum();
        }
    }, "linear");
}

/// Batched a @ b^T over the last two axes; a [..., m, k], b [..., n, k].
template <class T>
VarT<T> matmul_nt(const VarT<T>& a, const VarT<T>& b) {
    using detail::ConstMatMap;
    using detail::MatMap;
    const Shape& as = a->shape();
    const Shape& bs = b->shape();
    if (as.size() < 2 || as.size() != bs.size() || as.back() != bs.back() ||
        !std::equal(as.begin(), as.end() - 2, bs.begin())) {
        throw ShapeError("matmul_nt: incompatible shapes " + to_string(as) + " and " + to_string(bs));
    }
    const std::size_t m = as[as.size() - 2], k = as.back(), n = bs[bs.size() - 2];
    const std::size_t batch = a->value.size() / (m * k);
    const auto M = static_cast<Eigen::Index>(m), K = static_cast<Eigen::Index>(k),
               N = static_cast<Eigen::Index>(n);
    Shape out_shape = as;
    out_shape.back() = n;
    BasicArray<T> out(out_shape);
    for (std::size_t i = 0; i < batch; ++i) {
        MatMap<T>(out.data() + i * m * n, M, N).noalias() =
            ConstMatMap<T>(a->value.data() + i * m * k, M, K) *
            ConstMatMap<T>(b->value.data() + i * n * k, N, K).transpose();
    }
    return make_result<T>(std::move(out), {a, b}, [a, b, batch, m, k, n, M, K, N](Node<T>& self) {
        const T* g = self.adjoint().data();
        for (std::size_t i = 0; i < batch; ++i) {
            ConstMatMap<T> gi(g + i * m * n, M, N);
            if (a->requires_grad) {
                MatMap<T>(a->adjoint().data() + i * m * k, M, K).noalias() +=
                    gi * ConstMatMap<T>(b->value.data() + i * n * k, N, K);
            }
            if (b->requires_grad) {
                MatMap<T>(b->adjoint().data() + i * n * k, N, K).noalias() +=
                    gi.transpose() * ConstMatMap<T>(a->value.data() + i * m * k, M, K);
            }
        }
    }, "matmul_nt");
}

/// Mean squared difference over all elements.
template <class T>
VarT<T> mse(const VarT<T>& pred, const VarT<T>& target) {
    detail::require_same(pred->shape(), target->shape(), "mse");
    return mean(square(sub(pred, target)));
}

}  // namespace aligndesk
