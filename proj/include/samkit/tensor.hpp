// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "samkit/errors.hpp"

namespace samkit {

/// Dense f32 tensor: shape plus a flat row-major buffer. All toolkit
/// arithmetic is f32; wider/narrower on-disk dtypes are converted on load.
struct Tensor {
    std::vector<int64_t> shape;
    std::vector<float> data;

    Tensor() = default;
    Tensor(std::vector<int64_t> s, std::vector<float> d)
        : shape(std::move(s)), data(std::move(d)) {}

    size_t numel() const {
        size_t n = 1;
        for (int64_t d : shape) n *= static_cast<size_t>(d);
        return n;
    }

    /// Enforces the type invariants: >=1 positive dimension, element count
    /// matching the shape product, and no NaN values.
    void validate(const std::string& name = "") const {
        const std::string where = name.empty() ? "tensor" : "tensor '" + name + "'";
        if (shape.empty())
            throw InvalidValue(where + " has an empty shape");
        for (int64_t d : shape)
            if (d <= 0) throw InvalidValue(where + " has a non-positive dimension");
        if (data.size() != numel())
            throw InvalidValue(where + ": data length " + std::to_string(data.size()) +
                               " does not match shape product " + std::to_string(numel()));
        for (float v : data)
            if (std::isnan(v)) throw InvalidValue(where + " contains NaN");
    }

    bool same_shape(const Tensor& other) const { return shape == other.shape; }
};

/// Named collection of tensors. Entries are kept in a sorted map so every
/// iteration (and every serialized artifact) is deterministic.
struct TensorMap {
    std::map<std::string, Tensor> entries;
    std::map<std::string, std::string> metadata;

    void insert(const std::string& name, Tensor t) {
        if (name.empty()) throw InvalidValue("tensor name must be non-empty");
        t.validate(name);
        if (!entries.emplace(name, std::move(t)).second)
            throw InvalidValue("duplicate tensor name '" + name + "'");
    }

    const Tensor& at(const std::string& name) const {
        auto it = entries.find(name);
        if (it == entries.end())
            throw InvalidValue("no tensor named '" + name + "'");
        return it->second;
    }

    bool contains(const std::string& name) const { return entries.count(name) > 0; }
    size_t size() const { return entries.size(); }
    bool empty() const { return entries.empty(); }

    void validate() const {
        for (const auto& [name, tensor] : entries) tensor.validate(name);
    }

    bool operator==(const TensorMap& other) const {
        if (metadata != other.metadata || entries.size() != other.entries.size()) return false;
        auto it = entries.begin();
        auto jt = other.entries.begin();
        for (; it != entries.end(); ++it, ++jt) {
            if (it->first != jt->first) return false;
            if (it->second.shape != jt->second.shape) return false;
            if (it->second.data != jt->second.data) return false;
        }
        return true;
    }
};

/// Task vector: per-tensor difference against a base model, tagged with the
/// expert it came from.
struct DeltaSet {
    TensorMap tensors;
    std::string origin;
};

/// Throws ShapeMismatch unless both maps have identical key sets and
/// per-tensor shapes.
inline void check_same_structure(const TensorMap& a, const TensorMap& b,
                                 const std::string& a_name = "left",
                                 const std::string& b_name = "right") {
    for (const auto& [name, tensor] : a.entries) {
        auto it = b.entries.find(name);
        if (it == b.entries.end())
            throw ShapeMismatch("tensor '" + name + "' present in " + a_name +
                                " but missing from " + b_name);
        if (tensor.shape != it->second.shape)
            throw ShapeMismatch("tensor '" + name + "' shape differs between " + a_name +
                                " and " + b_name);
    }
    for (const auto& [name, tensor] : b.entries)
        if (!a.contains(name))
            throw ShapeMismatch("tensor '" + name + "' present in " + b_name +
                                " but missing from " + a_name);
}

/// delta = fine-tuned minus base, element-wise per tensor.
inline DeltaSet compute_delta(const TensorMap& sft, const TensorMap& base,
                              const std::string& origin = "") {
    check_same_structure(sft, base, "fine-tuned", "base");
    DeltaSet out;
    out.origin = origin;
    for (const auto& [name, tensor] : sft.entries) {
        const Tensor& b = base.at(name);
        Tensor d;
        d.shape = tensor.shape;
        d.data.resize(tensor.data.size());
        for (size_t i = 0; i < tensor.data.size(); ++i)
            d.data[i] = tensor.data[i] - b.data[i];
        out.tensors.insert(name, std::move(d));
    }
    return out;
}

/// out = base + scale * delta, element-wise per tensor.
inline TensorMap apply_delta(const TensorMap& base, const DeltaSet& delta, float scale) {
    if (!std::isfinite(scale)) throw InvalidValue("delta scale must be finite");
    check_same_structure(base, delta.tensors, "base", "delta");
    TensorMap out;
    out.metadata = base.metadata;
    for (const auto& [name, tensor] : base.entries) {
        const Tensor& d = delta.tensors.at(name);
        Tensor r;
        r.shape = tensor.shape;
        r.data.resize(tensor.data.size());
        for (size_t i = 0; i < tensor.data.size(); ++i)
            r.data[i] = tensor.data[i] + scale * d.data[i];
        out.insert(name, std::move(r));
    }
    return out;
}

}  // namespace samkit
