// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "samkit/archive.hpp"
#include "samkit/errors.hpp"

namespace samkit {

/// Fixed-length f32 vector in the shared embedding space (hᵢ, h_A, h_t).
struct Embedding {
    std::vector<float> values;

    size_t dim() const { return values.size(); }

    void validate() const {
        if (values.empty()) throw InvalidValue("embedding must be non-empty");
        for (float v : values)
            if (!std::isfinite(v)) throw InvalidValue("embedding contains a non-finite value");
    }

    bool operator==(const Embedding&) const = default;
};

inline void check_same_dim(const Embedding& a, const Embedding& b) {
    if (a.dim() != b.dim())
        throw DimMismatch("embedding dims differ: " + std::to_string(a.dim()) + " vs " +
                          std::to_string(b.dim()));
}

/// Coordinate-wise mean: h_A = (1/|H_A|) Σ hᵢ.
inline Embedding centroid(const std::vector<Embedding>& embeddings) {
    if (embeddings.empty()) throw EmptyInput("centroid requires at least one embedding");
    embeddings.front().validate();
    const size_t dim = embeddings.front().dim();
    std::vector<double> acc(dim, 0.0);
    for (const Embedding& e : embeddings) {
        e.validate();
        check_same_dim(embeddings.front(), e);
        for (size_t i = 0; i < dim; ++i) acc[i] += e.values[i];
    }
    Embedding out;
    out.values.resize(dim);
    for (size_t i = 0; i < dim; ++i)
        out.values[i] = static_cast<float>(acc[i] / static_cast<double>(embeddings.size()));
    return out;
}

/// a·b / (‖a‖‖b‖). Zero-norm inputs are degenerate rather than silently 0.
inline float cosine_similarity(const Embedding& a, const Embedding& b) {
    a.validate();
    b.validate();
    check_same_dim(a, b);
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (size_t i = 0; i < a.dim(); ++i) {
        dot += static_cast<double>(a.values[i]) * b.values[i];
        na += static_cast<double>(a.values[i]) * a.values[i];
        nb += static_cast<double>(b.values[i]) * b.values[i];
    }
    if (na == 0.0 || nb == 0.0)
        throw DegenerateEmbedding("cosine similarity of a zero-norm embedding is undefined");
    const double cos = dot / (std::sqrt(na) * std::sqrt(nb));
    return static_cast<float>(std::clamp(cos, -1.0, 1.0));
}

/// Embeddings loaded from disk; ids are empty strings when the source file
/// does not carry them.
struct EmbeddingTable {
    std::vector<std::string> ids;
    std::vector<Embedding> vectors;
};

/// Reads either JSON-lines ({id?, vector: [...]} per line) or a tensor
/// archive holding one [n, dim] tensor named "embeddings". A file whose
/// first non-whitespace byte is '{' is treated as JSON-lines.
inline EmbeddingTable load_embeddings(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open embeddings file '" + path + "'");
    int first = in.peek();
    while (first != EOF && std::isspace(first)) {
        in.get();
        first = in.peek();
    }

    EmbeddingTable table;
    if (first == EOF) return table;

    if (first != '{') {
        in.close();
        TensorMap map = load_tensor_archive(path);
        if (!map.contains("embeddings"))
            throw FormatError("embeddings archive '" + path + "' lacks an 'embeddings' tensor");
        const Tensor& t = map.at("embeddings");
        if (t.shape.size() != 2)
            throw FormatError("'embeddings' tensor must be 2-D [n, dim]");
        const auto n = static_cast<size_t>(t.shape[0]);
        const auto dim = static_cast<size_t>(t.shape[1]);
        table.ids.assign(n, "");
        table.vectors.resize(n);
        for (size_t r = 0; r < n; ++r) {
            table.vectors[r].values.assign(t.data.begin() + static_cast<ptrdiff_t>(r * dim),
                                           t.data.begin() + static_cast<ptrdiff_t>((r + 1) * dim));
            table.vectors[r].validate();
        }
        return table;
    }

    std::string line;
    size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r\n") == std::string::npos) continue;
        nlohmann::json doc = nlohmann::json::parse(line, nullptr, false);
        if (doc.is_discarded() || !doc.is_object())
            throw FormatError("embeddings file '" + path + "' line " + std::to_string(line_no) +
                              " is not a JSON object");
        if (!doc.contains("vector") || !doc["vector"].is_array())
            throw FormatError("embeddings file '" + path + "' line " + std::to_string(line_no) +
                              " lacks a 'vector' array");
        Embedding e;
        for (const auto& v : doc["vector"]) {
            if (!v.is_number())
                throw FormatError("embeddings file '" + path + "' line " +
                                  std::to_string(line_no) + " has a non-numeric coordinate");
            e.values.push_back(v.get<float>());
        }
        e.validate();
        table.ids.push_back(doc.value("id", std::string{}));
        table.vectors.push_back(std::move(e));
    }
    for (size_t i = 1; i < table.vectors.size(); ++i)
        check_same_dim(table.vectors[0], table.vectors[i]);
    return table;
}

}  // namespace samkit
