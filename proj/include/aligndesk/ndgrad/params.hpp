// Copyright (c) 2026, The aligndesk Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "aligndesk/errors.hpp"
#include "aligndesk/ndgrad/array.hpp"
#include "aligndesk/ndgrad/node.hpp"
#include "aligndesk/ndgrad/rng.hpp"

namespace aligndesk {

/// Named trainable leaves in insertion order.
template <class T>
class BasicParamSet {
public:
    using Entry = std::pair<std::string, VarT<T>>;

    const VarT<T>& add(const std::string& name, BasicArray<T> init) {
        if (index_.count(name)) throw ContractError("duplicate parameter name: " + name);
        index_.emplace(name, entries_.size());
        entries_.emplace_back(name, parameter(std::move(init)));
        return entries_.back().second;
    }

    /// Registers an existing leaf without copying (shared views over
    /// several sets).
    const VarT<T>& adopt(const std::string& name, VarT<T> leaf) {
        if (index_.count(name)) throw ContractError("duplicate parameter name: " + name);
        index_.emplace(name, entries_.size());
        entries_.emplace_back(name, std::move(leaf));
        return entries_.back().second;
    }

    const VarT<T>& at(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) throw ContractError("unknown parameter: " + name);
        return entries_[it->second].second;
    }

    bool contains(const std::string& name) const { return index_.count(name) != 0; }

    void erase_prefix(const std::string& prefix) {
        std::vector<Entry> kept;
        for (auto& e : entries_) {
            if (e.first.rfind(prefix, 0) != 0) kept.push_back(std::move(e));
        }
        entries_ = std::move(kept);
        index_.clear();
        for (std::size_t i = 0; i < entries_.size(); ++i) index_.emplace(entries_[i].first, i);
    }

    auto begin() const { return entries_.begin(); }
    auto end() const { return entries_.end(); }
    std::size_t size() const noexcept { return entries_.size(); }

    std::size_t total_elements() const {
        std::size_t n = 0;
        for (const auto& [_, v] : entries_) n += v->value.size();
        return n;
    }

    void zero_grad() {
        for (auto& [_, v] : entries_) v->zero_adjoint();
    }

    void set_requires_grad(bool on) {
        for (auto& [_, v] : entries_) v->requires_grad = on;
    }

    /// Deep copy of values into a fresh set with the scalar type U.
    template <class U>
    BasicParamSet<U> cast() const {
        BasicParamSet<U> out;
        for (const auto& [name, v] : entries_) {
            out.add(name, v->value.template cast<U>());
            out.at(name)->requires_grad = v->requires_grad;
        }
        return out;
    }

    /// FNV-1a over names, shapes and raw value bytes.
    std::uint64_t checksum() const {
        std::uint64_t h = 0xCBF29CE484222325ULL;
        auto feed = [&h](const void* p, std::size_t n) {
            const auto* b = static_cast<const unsigned char*>(p);
            for (std::size_t i = 0; i < n; ++i) {
                h ^= b[i];
                h *= 0x100000001B3ULL;
            }
        };
        for (const auto& [name, v] : entries_) {
            feed(name.data(), name.size());
            for (std::size_t d : v->shape()) feed(&d, sizeof(d));
            feed(v->value.data(), v->value.size() * sizeof(T));
        }
        return h;
    }

private:
    std::vector<Entry> entries_;
    std::unordered_map<std::string, std::size_t> index_;
};

using ParamSet = BasicParamSet<float>;

// ---------------------------------------------------------------- initializers

template <class T>
BasicArray<T> normal_array(Shape shape, double stddev, Rng& rng) {
    BasicArray<T> a(std::move(shape));
    for (auto& v : a.span()) v = static_cast<T>(rng.normal() * stddev);
    return a;
}

template <class T>
BasicArray<T> uniform_array(Shape shape, double lo, double hi, Rng& rng) {
    BasicArray<T> a(std::move(shape));
    for (auto& v : a.span()) v = static_cast<T>(rng.uniform(lo, hi));
    return a;
}

/// Glorot-uniform weight for a [fan_in, fan_out] matrix.
template <class T>
BasicArray<T> xavier_uniform(std::size_t fan_in, std::size_t fan_out, Rng& rng) {
    const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    return uniform_array<T>(Shape{fan_in, fan_out}, -limit, limit, rng);
}

}  // namespace aligndesk
