// Copyright (c) 2026, The aligndesk Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <initializer_list>
#include <new>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include "aligndesk/errors.hpp"

namespace aligndesk {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                           std::multiplies<>{});
}

inline std::string to_string(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ',';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

/// Storage allocator with a fixed 64-byte alignment. Vectorized kernels peel
/// differently depending on buffer alignment, which changes summation order;
/// a fixed alignment keeps results a function of the data alone.
template <class T>
struct AlignedAllocator {
    using value_type = T;
    static constexpr std::align_val_t kAlign{64};

    AlignedAllocator() noexcept = default;
    template <class U>
    AlignedAllocator(const AlignedAllocator<U>&) noexcept {}

    T* allocate(std::size_t n) {
        return static_cast<T*>(::operator new(n * sizeof(T), kAlign));
    }
    void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, kAlign); }

    template <class U>
    bool operator==(const AlignedAllocator<U>&) const noexcept { return true; }
};

/// Dense row-major array. Training runs on float; the double instantiation
/// exists for gradient verification.
template <class T>
class BasicArray {
public:
    BasicArray() = default;

    explicit BasicArray(Shape shape, T fill = T(0))
        : shape_(std::move(shape)), data_(numel(shape_), fill) {}

    BasicArray(Shape shape, const std::vector<T>& data)
        : shape_(std::move(shape)), data_(data.begin(), data.end()) {
        if (numel(shape_) != data_.size()) {
            throw ShapeError("array data length " + std::to_string(data_.size()) +
                             " does not match shape " + to_string(shape_));
        }
    }

    static BasicArray scalar(T v) { return BasicArray(Shape{}, std::vector<T>{v}); }

    static BasicArray from(Shape shape, std::initializer_list<T> values) {
        return BasicArray(std::move(shape), std::vector<T>(values));
    }

    template <class U>
    BasicArray<U> cast() const {
        BasicArray<U> out(shape_);
        std::copy(data_.begin(), data_.end(), out.data());
        return out;
    }

    const Shape& shape() const noexcept { return shape_; }
    std::size_t rank() const noexcept { return shape_.size(); }
    std::size_t size() const noexcept { return data_.size(); }
    std::size_t dim(std::size_t axis) const { return shape_.at(axis); }

    T* data() noexcept { return data_.data(); }
    const T* data() const noexcept { return data_.data(); }
    std::span<T> span() noexcept { return data_; }
    std::span<const T> span() const noexcept { return data_; }
    std::vector<T> vec() const { return std::vector<T>(data_.begin(), data_.end()); }

    T& operator[](std::size_t i) { return data_[i]; }
    T operator[](std::size_t i) const { return data_[i]; }

    T item() const {
        if (data_.size() != 1) {
            throw ShapeError("item() on array of shape " + to_string(shape_));
        }
        return data_[0];
    }

    /// Same data, new extents; element count must agree.
    BasicArray reshaped(Shape shape) const {
        if (numel(shape) != data_.size()) {
            throw ShapeError("cannot reshape " + to_string(shape_) + " to " +
                             to_string(shape));
        }
        BasicArray out = *this;
        out.shape_ = std::move(shape);
        return out;
    }

    bool all_finite() const noexcept {
        // Exponent-field test on the raw bits; an integer OR-reduction
        // vectorizes where an isfinite loop does not.
        using Bits = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;
        constexpr Bits exp_mask = sizeof(T) == 4 ? Bits(0x7F800000u) : Bits(0x7FF0000000000000ull);
        const T* p = data_.data();
        Bits bad = 0;
        for (std::size_t i = 0; i < data_.size(); ++i) {
            Bits b;
            std::memcpy(&b, p + i, sizeof(T));
            bad |= static_cast<Bits>((b & exp_mask) == exp_mask);
        }
        return bad == 0;
    }

    bool bit_equal(const BasicArray& other) const noexcept {
        if (shape_ != other.shape_) return false;
        for (std::size_t i = 0; i < data_.size(); ++i) {
            if (std::memcmp(&data_[i], &other.data_[i], sizeof(T)) != 0) {
                return false;
            }
        }
        return true;
    }

    void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

private:
    Shape shape_;
    std::vector<T, AlignedAllocator<T>> data_;
};

using Array = BasicArray<float>;
using ArrayD = BasicArray<double>;

template <class T>
void require_finite(const BasicArray<T>& a, const char* where) {
    if (!a.all_finite()) {
        throw NumericError(std::string("non-finite value produced by ") + where);
    }
}

}  // namespace aligndesk
